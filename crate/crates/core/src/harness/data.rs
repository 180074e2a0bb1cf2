use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradcore::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `(n, input_dim)`
    pub samples: Tensor,
    pub labels: Vec<usize>,
    pub class_names: Option<Vec<String>>,
}

impl Dataset {
    pub fn new(samples: Tensor, labels: Vec<usize>) -> Result<Self> {
        if samples.ndim() != 2 || samples.rows() != labels.len() {
            return Err(Error::dim("dataset", samples.shape(), &[labels.len()]));
        }
        let ds = Dataset {
            samples,
            labels,
            class_names: None,
        };
        let c = ds.num_classes();
        let mut seen = vec![false; c];
        ds.labels.iter().for_each(|&y| seen[y] = true);
        if seen.iter().any(|s| !s) {
            return Err(Error::Contract(format!("labels are not dense in [0, {c})")));
        }
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.samples.row_len()
    }

    pub fn num_classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| m + 1)
    }

    /// Rows `idx` as an `(idx.len(), input_dim)` tensor.
    pub fn rows(&self, idx: &[usize]) -> Result<Tensor> {
        let d = self.input_dim();
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend_from_slice(self.samples.row(i));
        }
        Tensor::matrix(idx.len(), d, data)
    }

    pub fn labels_of(&self, idx: &[usize]) -> Vec<usize> {
        idx.iter().map(|&i| self.labels[i]).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ZslSplit {
    pub train_classes: Vec<usize>,
    pub test_classes: Vec<usize>,
    pub train_idx: Vec<usize>,
    pub test_idx: Vec<usize>,
}

/// The first `⌊C·fraction⌋` class ids train, the rest test.
pub fn zsl_split(dataset: &Dataset, train_fraction: f64) -> Result<ZslSplit> {
    let c = dataset.num_classes();
    if c < 2 {
        return Err(Error::Protocol(format!("a class-disjoint split needs two classes, got {c}")));
    }
    let cut = (c as f64 * train_fraction).floor() as usize;
    if !(train_fraction > 0.0) || cut == 0 || cut >= c {
        return Err(Error::Protocol(format!(
            "train fraction {train_fraction} over {c} classes leaves one side empty"
        )));
    }
    let (train_idx, test_idx) = (0..dataset.len()).partition(|&i| dataset.labels[i] < cut);
    Ok(ZslSplit {
        train_classes: (0..cut).collect(),
        test_classes: (cut..c).collect(),
        train_idx,
        test_idx,
    })
}

/// Moves about `fraction` of each class in `idx` to a validation list,
/// keeping at least two training samples per class.
pub fn holdout<R: Rng + ?Sized>(
    idx: &[usize],
    labels: &[usize],
    fraction: f64,
    rng: &mut R,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::Config(format!("validation fraction {fraction} outside [0, 1)")));
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &i in idx {
        by_class.entry(labels[i]).or_default().push(i);
    }
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (_, mut members) in by_class {
        members.shuffle(rng);
        let take = ((members.len() as f64 * fraction).round() as usize).min(members.len().saturating_sub(2));
        val.extend_from_slice(&members[..take]);
        train.extend_from_slice(&members[take..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    Ok((train, val))
}

fn default_input_dim() -> usize {
    48
}
fn default_active() -> usize {
    8
}
fn default_nuisance() -> usize {
    6
}
fn default_classes() -> usize {
    20
}
fn default_per_class() -> usize {
    50
}
fn default_nuisance_scale() -> f64 {
    2.0
}
fn default_noise() -> f64 {
    0.8
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    #[serde(default = "default_classes")]
    pub classes: usize,
    #[serde(default = "default_per_class")]
    pub per_class: usize,
    #[serde(default = "default_input_dim")]
    pub input_dim: usize,
    /// Nonzero coordinates in each class pattern.
    #[serde(default = "default_active")]
    pub active: usize,
    /// Shared directions along which every sample varies.
    #[serde(default = "default_nuisance")]
    pub nuisance_dims: usize,
    /// Nuisance amplitude relative to `noise`.
    #[serde(default = "default_nuisance_scale")]
    pub nuisance_scale: f64,
    #[serde(default = "default_noise")]
    pub noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            classes: default_classes(),
            per_class: default_per_class(),
            input_dim: default_input_dim(),
            active: default_active(),
            nuisance_dims: default_nuisance(),
            nuisance_scale: default_nuisance_scale(),
            noise: default_noise(),
        }
    }
}

/// Class prototypes built from a sparse class pattern; samples add shared
/// nuisance variation and isotropic Gaussian noise, both scaled by `noise`.
pub fn synth_dataset<R: Rng + ?Sized>(cfg: &SynthConfig, rng: &mut R) -> Result<Dataset> {
    if cfg.per_class < 2 {
        return Err(Error::Parameter(format!("per_class must be at least 2, got {}", cfg.per_class)));
    }
    if cfg.classes < 2 || cfg.input_dim == 0 || cfg.active == 0 || cfg.active > cfg.input_dim {
        return Err(Error::Parameter(format!("invalid synthetic geometry: {cfg:?}")));
    }
    if !(cfg.noise >= 0.0 && cfg.nuisance_scale >= 0.0) {
        return Err(Error::Parameter("noise levels must be non-negative".into()));
    }
    let d = cfg.input_dim;
    let std = Normal::new(0.0, 1.0).expect("unit normal");
    let mut dims: Vec<usize> = (0..d).collect();
    let prototypes: Vec<Vec<f64>> = (0..cfg.classes)
        .map(|_| {
            dims.shuffle(rng);
            let mut p = vec![0.0; d];
            for &j in &dims[..cfg.active] {
                let s: f64 = std.sample(rng);
                p[j] = s.signum() * (1.0 + s.abs());
            }
            p
        })
        .collect();
    let nuisance: Vec<Vec<f64>> = (0..cfg.nuisance_dims)
        .map(|_| {
            let v: Vec<f64> = (0..d).map(|_| std.sample(rng)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / n).collect()
        })
        .collect();
    let n = cfg.classes * cfg.per_class;
    let mut data = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for (c, p) in prototypes.iter().enumerate() {
        for _ in 0..cfg.per_class {
            let mut x = p.clone();
            for u in &nuisance {
                let a = cfg.noise * cfg.nuisance_scale * std.sample(rng);
                x.iter_mut().zip(u).for_each(|(xi, ui)| *xi += a * ui);
            }
            x.iter_mut().for_each(|xi| *xi += cfg.noise * std.sample(rng));
            data.extend(x);
            labels.push(c);
        }
    }
    Dataset::new(Tensor::matrix(n, d, data)?, labels)
}

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;

fn fmt_err(offset: usize, msg: impl Into<String>) -> Error {
    Error::Format {
        offset: offset as u64,
        msg: msg.into(),
    }
}

fn be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| fmt_err(at, "unexpected end of file"))
}

/// Parses an IDX byte stream with the expected magic; returns dims and the
/// offset of the payload.
fn idx_header(bytes: &[u8], magic: u32, ndim: usize) -> Result<(Vec<usize>, usize)> {
    let m = be_u32(bytes, 0)?;
    if m != magic {
        return Err(fmt_err(0, format!("bad magic {m:#010x}, expected {magic:#010x}")));
    }
    let dims = (0..ndim)
        .map(|i| be_u32(bytes, 4 + 4 * i).map(|v| v as usize))
        .collect::<Result<Vec<_>>>()?;
    let start = 4 + 4 * ndim;
    let count: usize = dims.iter().product();
    if bytes.len() != start + count {
        return Err(fmt_err(
            bytes.len().min(start + count),
            format!("payload holds {} bytes, header promises {count}", bytes.len() - start.min(bytes.len())),
        ));
    }
    Ok((dims, start))
}

/// Where samples come from: the built-in generator or a pair of IDX files.
#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Synth,
    Idx { images: PathBuf, labels: PathBuf },
}

impl std::str::FromStr for DataSource {
    type Err = Error;

    /// `synth` or `idx:IMAGES,LABELS`.
    fn from_str(s: &str) -> Result<Self> {
        if s == "synth" {
            return Ok(DataSource::Synth);
        }
        let paths = s
            .strip_prefix("idx:")
            .and_then(|rest| rest.split_once(','))
            .ok_or_else(|| Error::Config(format!("data source {s:?} is neither synth nor idx:IMAGES,LABELS")))?;
        Ok(DataSource::Idx {
            images: PathBuf::from(paths.0),
            labels: PathBuf::from(paths.1),
        })
    }
}

impl DataSource {
    /// Synthetic data is drawn from its own stream of `seed`.
    pub fn load(&self, synth: &SynthConfig, seed: u64) -> Result<Dataset> {
        match self {
            DataSource::Synth => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(0);
                synth_dataset(synth, &mut rng)
            }
            DataSource::Idx { images, labels } => load_idx(images, labels),
        }
    }
}

/// Loads an IDX image file (`0x00000803`, `n × rows × cols` unsigned
/// bytes) and its label file (`0x00000801`). Pixels are scaled to `[0, 1]`.
pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let ib = std::fs::read(images)?;
    let lb = std::fs::read(labels)?;
    let (idims, istart) = idx_header(&ib, IDX_IMAGES, 3)?;
    let (ldims, lstart) = idx_header(&lb, IDX_LABELS, 1)?;
    if idims[0] != ldims[0] {
        return Err(fmt_err(4, format!("{} images but {} labels", idims[0], ldims[0])));
    }
    let (n, d) = (idims[0], idims[1] * idims[2]);
    if n == 0 || d == 0 {
        return Err(fmt_err(4, "empty image set"));
    }
    let pixels = ib[istart..].iter().map(|&b| b as f64 / 255.0).collect();
    let y: Vec<usize> = lb[lstart..].iter().map(|&b| b as usize).collect();
    Dataset::new(Tensor::matrix(n, d, pixels)?, y).map_err(|e| fmt_err(lstart, e.to_string()))
}

/// IDX encoding of `(rows × cols)` byte images and their labels.
pub fn write_idx(images: &Path, labels: &Path, pixels: &[Vec<u8>], rows: usize, cols: usize, y: &[u8]) -> Result<()> {
    let mut ib = IDX_IMAGES.to_be_bytes().to_vec();
    for v in [pixels.len(), rows, cols] {
        ib.extend((v as u32).to_be_bytes());
    }
    for p in pixels {
        if p.len() != rows * cols {
            return Err(Error::dim("write_idx", &[p.len()], &[rows, cols]));
        }
        ib.extend_from_slice(p);
    }
    let mut lb = IDX_LABELS.to_be_bytes().to_vec();
    lb.extend((y.len() as u32).to_be_bytes());
    lb.extend_from_slice(y);
    std::fs::write(images, ib)?;
    std::fs::write(labels, lb)?;
    Ok(())
}
