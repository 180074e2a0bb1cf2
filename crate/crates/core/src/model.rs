//! Extractor plus embedding head, with optional per-class proxies.

use rand::Rng;

use crate::error::{Error, Result};
use crate::extractor::{Extractor, ExtractorConfig, ExtractorVars};
use crate::gradcore::{Tape, Tensor, Var};
use crate::nn::{glorot_uniform, BoundVars, Dense, DenseVars, Module};

/// Learning-rate group a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    Backbone,
    /// Attention scorers and the embedding map.
    Head,
    Proxy,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricModel {
    pub extractor: Extractor,
    pub embedding: Dense,
    /// L2-normalize embedding rows.
    pub normalize: bool,
    /// `(classes, embedding_dim)`; present for proxy-based losses.
    pub proxies: Option<Tensor>,
}

pub struct MetricVars {
    pub extractor: ExtractorVars,
    pub embedding: DenseVars,
    pub proxies: Option<Var>,
}

impl BoundVars for MetricVars {
    fn vars(&self) -> Vec<Var> {
        let mut v = self.extractor.vars();
        v.extend(self.embedding.vars());
        v.extend(self.proxies);
        v
    }
}

pub struct MetricOutput {
    pub features: Var,
    pub embeddings: Var,
}

impl MetricModel {
    pub fn new<R: Rng + ?Sized>(
        config: ExtractorConfig,
        embedding_dim: usize,
        normalize: bool,
        proxy_classes: Option<usize>,
        rng: &mut R,
    ) -> Result<Self> {
        if embedding_dim == 0 {
            return Err(Error::Config("embedding dimension must be positive".into()));
        }
        let extractor = Extractor::new(config, rng)?;
        let embedding = Dense::new(rng, extractor.feature_dim(), embedding_dim)?;
        let proxies = match proxy_classes {
            Some(c) if c < 2 => return Err(Error::Config("proxy losses need at least two classes".into())),
            Some(c) => Some(glorot_uniform(rng, c, embedding_dim, &[c, embedding_dim])?),
            None => None,
        };
        Ok(MetricModel {
            extractor,
            embedding,
            normalize,
            proxies,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.extractor.feature_dim()
    }

    pub fn embedding_dim(&self) -> usize {
        self.embedding.output_dim()
    }

    pub fn forward(&self, tape: &mut Tape, vars: &MetricVars, x: Var) -> Result<MetricOutput> {
        let out = self.extractor.forward(tape, &vars.extractor, x)?;
        let mut e = vars.embedding.forward(tape, out.features)?;
        if self.normalize {
            e = tape.l2_normalize(e)?;
        }
        Ok(MetricOutput {
            features: out.features,
            embeddings: e,
        })
    }

    /// Inference-mode embeddings for `(n, input_dim)` inputs.
    pub fn embed(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let out = self.forward(&mut tape, &vars, xv)?;
        Ok(tape.value(out.embeddings).clone())
    }

    /// Group of every parameter, aligned with `params`.
    pub fn groups(&self) -> Vec<ParamGroup> {
        let mut g = Vec::new();
        g.extend(self.extractor.backbone.params().iter().map(|_| ParamGroup::Backbone));
        g.extend(
            self.extractor
                .attention
                .iter()
                .flat_map(|a| a.params_named(""))
                .map(|_| ParamGroup::Head),
        );
        g.extend([ParamGroup::Head, ParamGroup::Head]);
        if self.proxies.is_some() {
            g.push(ParamGroup::Proxy);
        }
        g
    }
}

impl Module for MetricModel {
    type Bound = MetricVars;

    fn bind_with(&self, leaf: &mut dyn FnMut(&Tensor) -> Var) -> MetricVars {
        MetricVars {
            extractor: self.extractor.bind_with(leaf),
            embedding: self.embedding.bind_with(leaf),
            proxies: self.proxies.as_ref().map(leaf),
        }
    }

    fn params(&self) -> Vec<(String, &Tensor)> {
        let mut out = self.extractor.params();
        out.extend(self.embedding.params_named("embedding"));
        if let Some(p) = &self.proxies {
            out.push(("proxies".into(), p));
        }
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.extractor.params_mut();
        out.extend(self.embedding.params_mut());
        if let Some(p) = &mut self.proxies {
            out.push(p);
        }
        out
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::extractor::{AttentionKind, BackboneConfig, MultidimAxis, StageShape};
    use crate::nn::Activation;

    pub(crate) fn tiny_extractor(input_dim: usize, kind: AttentionKind) -> ExtractorConfig {
        ExtractorConfig {
            backbone: BackboneConfig {
                input_dim,
                stages: vec![StageShape::new(3, 2, 2), StageShape::new(4, 1, 2)],
                hidden_dim: 4,
                activation: Activation::Tanh,
            },
            attention: kind,
            sigma: Activation::Tanh,
            multidim_axis: MultidimAxis::Features,
            include_u: false,
        }
    }

    #[test]
    fn groups_align_with_params() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for kind in AttentionKind::ALL {
            let m = MetricModel::new(tiny_extractor(6, kind), 5, true, Some(3), &mut rng).unwrap();
            let params = m.params();
            let groups = m.groups();
            assert_eq!(params.len(), groups.len());
            for ((name, _), g) in params.iter().zip(&groups) {
                let expect = if name.starts_with("backbone") {
                    ParamGroup::Backbone
                } else if name == "proxies" {
                    ParamGroup::Proxy
                } else {
                    ParamGroup::Head
                };
                assert_eq!(*g, expect, "{name}");
            }
            let mut tape = Tape::new();
            assert_eq!(m.bind(&mut tape, true).vars().len(), params.len());
        }
    }

    #[test]
    fn embeddings_are_unit_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = MetricModel::new(tiny_extractor(6, AttentionKind::AdditiveSimple), 5, true, None, &mut rng).unwrap();
        let x = glorot_uniform(&mut rng, 1, 1, &[4, 6]).unwrap();
        let e = m.embed(&x).unwrap();
        assert_eq!(e.shape(), &[4, 5]);
        for r in 0..4 {
            let n: f64 = e.row(r).iter().map(|v| v * v).sum();
            assert!((n - 1.0).abs() < 1e-12);
        }
    }
}
