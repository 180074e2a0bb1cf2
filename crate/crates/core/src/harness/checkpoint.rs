use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::ExperimentConfig;
use super::train::build_models;
use crate::adversary::Classifier;
use crate::error::{Error, Result};
use crate::gradcore::Tensor;
use crate::model::MetricModel;
use crate::nn::Module;

pub const MAGIC: &[u8; 8] = b"ZSLMCKPT";
pub const VERSION: u32 = 1;

// Layout, little endian throughout:
//   magic[8] version:u32 config_hash:u64 classes:u64
//   toml_len:u64 toml[toml_len]
//   count:u64 then per tensor: name_len:u64 name ndim:u64 dims:u64* data:f64*

pub struct Checkpoint {
    pub config: ExperimentConfig,
    pub model: MetricModel,
    pub classifier: Option<Classifier>,
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub fn encode(config: &ExperimentConfig, model: &MetricModel, classifier: Option<&Classifier>) -> Result<Vec<u8>> {
    let toml = config.to_toml()?;
    let classes = match (classifier, &model.proxies) {
        (Some(c), _) => c.classes(),
        (None, Some(p)) => p.rows(),
        (None, None) => 0,
    };
    let mut tensors: Vec<(String, &Tensor)> = model.params();
    if let Some(c) = classifier {
        tensors.extend(c.params());
    }
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    put_u64(&mut out, config.hash()?);
    put_u64(&mut out, classes as u64);
    put_u64(&mut out, toml.len() as u64);
    out.extend_from_slice(toml.as_bytes());
    put_u64(&mut out, tensors.len() as u64);
    for (name, t) in tensors {
        put_u64(&mut out, name.len() as u64);
        out.extend_from_slice(name.as_bytes());
        put_u64(&mut out, t.ndim() as u64);
        for &d in t.shape() {
            put_u64(&mut out, d as u64);
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn fail(&self, msg: impl Into<String>) -> Error {
        Error::Format {
            offset: self.pos as u64,
            msg: msg.into(),
        }
    }

    fn bytes(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.fail(format!("truncated {what}")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8, what)?.try_into().expect("eight bytes")))
    }

    /// A length that must fit in what remains of the buffer at `unit` bytes each.
    fn len(&mut self, unit: usize, what: &str) -> Result<usize> {
        let at = self.pos;
        let n = self.u64(what)?;
        let remaining = (self.buf.len() - self.pos) as u64;
        if n.checked_mul(unit as u64).is_none_or(|b| b > remaining) {
            return Err(Error::Format {
                offset: at as u64,
                msg: format!("{what} {n} exceeds the remaining {remaining} bytes"),
            });
        }
        Ok(n as usize)
    }
}

/// Decodes a checkpoint. With `expected`, the stored configuration hash
/// must match it.
pub fn decode(buf: &[u8], expected: Option<&ExperimentConfig>) -> Result<Checkpoint> {
    let mut r = Reader { buf, pos: 0 };
    if r.bytes(8, "magic")? != MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: "not a checkpoint file".into(),
        });
    }
    let version = u32::from_le_bytes(r.bytes(4, "version")?.try_into().expect("four bytes"));
    if version != VERSION {
        return Err(Error::Format {
            offset: 8,
            msg: format!("unsupported version {version}"),
        });
    }
    let stored_hash = r.u64("config hash")?;
    if let Some(cfg) = expected {
        let want = cfg.hash()?;
        if want != stored_hash {
            return Err(Error::IncompatibleCheckpoint {
                expected: want,
                found: stored_hash,
            });
        }
    }
    let classes = r.u64("class count")? as usize;
    let toml_at = r.pos;
    let n = r.len(1, "config length")?;
    let text = std::str::from_utf8(r.bytes(n, "config")?).map_err(|_| Error::Format {
        offset: toml_at as u64,
        msg: "config is not UTF-8".into(),
    })?;
    let config = ExperimentConfig::from_toml_str(text).map_err(|e| Error::Format {
        offset: toml_at as u64,
        msg: e.to_string(),
    })?;
    if config.hash()? != stored_hash {
        return Err(Error::Format {
            offset: 12,
            msg: "config hash does not match the embedded config".into(),
        });
    }

    let count = r.len(8, "tensor count")?;
    let mut blobs: BTreeMap<String, (usize, Tensor)> = BTreeMap::new();
    for _ in 0..count {
        let n = r.len(1, "name length")?;
        let name_at = r.pos;
        let name = String::from_utf8(r.bytes(n, "name")?.to_vec()).map_err(|_| Error::Format {
            offset: name_at as u64,
            msg: "tensor name is not UTF-8".into(),
        })?;
        let ndim = r.len(8, "rank")?;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(r.u64("dimension")? as usize);
        }
        let data_at = r.pos;
        let numel = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|&m| m.checked_mul(8).is_some_and(|b| b <= buf.len() - r.pos))
            .ok_or_else(|| r.fail(format!("tensor {name} shape {dims:?} exceeds the file")))?;
        let data: Vec<f64> = r
            .bytes(numel * 8, "tensor data")?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("eight bytes")))
            .collect();
        let t = Tensor::new(dims, data)?;
        blobs.insert(name, (data_at, t));
    }
    if r.pos != buf.len() {
        return Err(r.fail("trailing bytes"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (mut model, mut classifier) = build_models(&config, classes.max(1), &mut rng)?;
    fill(&mut model, &blobs)?;
    if let Some(c) = classifier.as_mut() {
        fill(c, &blobs)?;
    }
    if config.loss.uses_proxies() && classes == 0 {
        return Err(Error::Format {
            offset: 20,
            msg: "proxy model without classes".into(),
        });
    }
    Ok(Checkpoint {
        config,
        model,
        classifier,
    })
}

fn fill<M: Module>(m: &mut M, blobs: &BTreeMap<String, (usize, Tensor)>) -> Result<()> {
    let names: Vec<(String, Vec<usize>)> = m.params().into_iter().map(|(n, t)| (n, t.shape().to_vec())).collect();
    for ((name, shape), slot) in names.into_iter().zip(m.params_mut()) {
        let (at, t) = blobs.get(&name).ok_or_else(|| Error::Format {
            offset: 0,
            msg: format!("missing tensor {name}"),
        })?;
        if t.shape() != shape.as_slice() {
            return Err(Error::Format {
                offset: *at as u64,
                msg: format!("tensor {name} has shape {:?}, expected {shape:?}", t.shape()),
            });
        }
        *slot = t.clone();
    }
    Ok(())
}

pub fn save_model(
    path: &Path,
    config: &ExperimentConfig,
    model: &MetricModel,
    classifier: Option<&Classifier>,
) -> Result<()> {
    std::fs::write(path, encode(config, model, classifier)?)?;
    Ok(())
}

pub fn load_model(path: &Path, expected: Option<&ExperimentConfig>) -> Result<Checkpoint> {
    decode(&std::fs::read(path)?, expected)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::extractor::StageShape;
    use crate::harness::config::Mode;
    use crate::losses::{LossKind, MetricLossConfig};

    fn cfg(mode: Mode, proxy: bool) -> ExperimentConfig {
        let mut c = ExperimentConfig {
            mode,
            embedding_dim: 6,
            ..ExperimentConfig::default()
        };
        c.extractor.backbone.input_dim = 7;
        c.extractor.backbone.stages = vec![StageShape::new(3, 2, 2)];
        c.extractor.backbone.hidden_dim = 4;
        if proxy {
            c.loss = MetricLossConfig::new(LossKind::ProxyNca);
        }
        c
    }

    #[test]
    fn round_trip_preserves_outputs() {
        for (mode, proxy) in [(Mode::Base, false), (Mode::AdaptAdv, true)] {
            let c = cfg(mode, proxy);
            let (model, clf) = build_models(&c, 5, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
            let bytes = encode(&c, &model, clf.as_ref()).unwrap();
            let back = decode(&bytes, Some(&c)).unwrap();
            let x = Tensor::new(vec![3, 7], (0..21).map(|i| (i as f64).sin()).collect()).unwrap();
            assert_eq!(back.model.embed(&x).unwrap(), model.embed(&x).unwrap());
            assert_eq!(back.model.proxies, model.proxies);
            assert_eq!(back.classifier.is_some(), clf.is_some());
            assert_eq!(back.config, c);
        }
    }

    #[test]
    fn rejects_other_config_and_corruption() {
        let c = cfg(Mode::Base, false);
        let (model, _) = build_models(&c, 5, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let bytes = encode(&c, &model, None).unwrap();
        let mut other = c.clone();
        other.seed = 99;
        assert!(matches!(
            decode(&bytes, Some(&other)),
            Err(Error::IncompatibleCheckpoint { .. })
        ));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad, None), Err(Error::Format { offset: 0, .. })));
        for cut in [5, 30, bytes.len() - 3] {
            assert!(matches!(decode(&bytes[..cut], None), Err(Error::Format { .. })), "cut {cut}");
        }
        let mut huge = bytes.clone();
        huge[28..36].copy_from_slice(&u64::MAX.to_le_bytes());
        assert!(matches!(decode(&huge, None), Err(Error::Format { offset: 28, .. })));
    }
}
