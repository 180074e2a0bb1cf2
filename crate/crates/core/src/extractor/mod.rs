//! Feature extractor: a blocked backbone whose intermediate maps are
//! attention-pooled against the last-hidden vector and fused by
//! concatenation.

mod attention;
mod backbone;
mod heatmap;

pub use attention::{
    attend_pool, fuse, location_vectors, normalize_scores, Attention, AttentionKind, AttentionVars,
    MultidimAxis,
};
pub use backbone::{Backbone, BackboneConfig, BackboneOutput, BackboneVars, StageOutput, StageShape};
pub use heatmap::{export_attention, read_attention_csv};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::gradcore::{Tape, Tensor, Var};
use crate::nn::{Activation, BoundVars, Module};

fn default_sigma() -> Activation {
    Activation::Tanh
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtractorConfig {
    #[serde(default)]
    pub backbone: BackboneConfig,
    #[serde(default)]
    pub attention: AttentionKind,
    /// Nonlinearity inside the additive and multi-dimensional scores.
    #[serde(default = "default_sigma")]
    pub sigma: Activation,
    #[serde(default)]
    pub multidim_axis: MultidimAxis,
    /// Append `u` after the pooled vectors.
    #[serde(default)]
    pub include_u: bool,
}

impl ExtractorConfig {
    pub fn feature_dim(&self) -> usize {
        let pooled: usize = self.backbone.stages.iter().map(|s| s.channels).sum();
        pooled + if self.include_u { self.backbone.hidden_dim } else { 0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Extractor {
    pub config: ExtractorConfig,
    pub backbone: Backbone,
    pub attention: Vec<Attention>,
}

pub struct ExtractorVars {
    pub backbone: BackboneVars,
    pub attention: Vec<AttentionVars>,
}

impl BoundVars for ExtractorVars {
    fn vars(&self) -> Vec<Var> {
        let mut v = self.backbone.vars();
        v.extend(self.attention.iter().flat_map(BoundVars::vars));
        v
    }
}

pub struct ExtractorOutput {
    /// `(n, feature_dim)`
    pub features: Var,
    /// Normalized attention weights per stage: `(n, H·V)` or `(n, H·V, C)`.
    pub weights: Vec<Var>,
    pub u: Var,
}

impl Extractor {
    pub fn new<R: Rng + ?Sized>(config: ExtractorConfig, rng: &mut R) -> Result<Self> {
        let backbone = Backbone::new(config.backbone.clone(), rng)?;
        let attention = config
            .backbone
            .stages
            .iter()
            .map(|s| {
                let mut a = Attention::new(
                    config.attention,
                    s.channels,
                    config.backbone.hidden_dim,
                    config.sigma,
                    rng,
                )?;
                a.multidim_axis = config.multidim_axis;
                Ok(a)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Extractor {
            config,
            backbone,
            attention,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim()
    }

    /// Forward a batch `x` of shape `(n, input_dim)`.
    pub fn forward(&self, tape: &mut Tape, vars: &ExtractorVars, x: Var) -> Result<ExtractorOutput> {
        let bb = self.backbone.forward(tape, &vars.backbone, x)?;
        let mut pooled = Vec::with_capacity(bb.maps.len());
        let mut weights = Vec::with_capacity(bb.maps.len());
        for (((map, shape), att), av) in bb
            .maps
            .iter()
            .zip(&self.config.backbone.stages)
            .zip(&self.attention)
            .zip(&vars.attention)
        {
            let q = location_vectors(tape, *map, shape.channels, shape.locations())?;
            let s = att.scores(tape, av, q, bb.u)?;
            let w = att.normalize(tape, s)?;
            pooled.push(attend_pool(tape, q, w)?);
            weights.push(w);
        }
        let features = fuse(tape, &pooled, bb.u, self.config.include_u)?;
        Ok(ExtractorOutput {
            features,
            weights,
            u: bb.u,
        })
    }

    /// Inference-mode features for a batch of inputs.
    pub fn features(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let out = self.forward(&mut tape, &vars, xv)?;
        Ok(tape.value(out.features).clone())
    }

    /// Per-stage attention weights for a single input.
    pub fn attention_weights(&self, x: &[f64]) -> Result<Vec<Tensor>> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let xv = tape.constant(Tensor::matrix(1, x.len(), x.to_vec())?);
        let out = self.forward(&mut tape, &vars, xv)?;
        Ok(out.weights.iter().map(|w| tape.value(*w).clone()).collect())
    }
}

impl Module for Extractor {
    type Bound = ExtractorVars;

    fn bind_with(&self, leaf: &mut dyn FnMut(&Tensor) -> Var) -> ExtractorVars {
        ExtractorVars {
            backbone: self.backbone.bind_with(leaf),
            attention: self.attention.iter().map(|a| a.bind_with(leaf)).collect(),
        }
    }

    fn params(&self) -> Vec<(String, &Tensor)> {
        let mut out = self.backbone.params();
        for (i, a) in self.attention.iter().enumerate() {
            out.extend(a.params_named(&format!("attention{i}")));
        }
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.backbone.params_mut();
        out.extend(self.attention.iter_mut().flat_map(Attention::params_mut));
        out
    }
}
