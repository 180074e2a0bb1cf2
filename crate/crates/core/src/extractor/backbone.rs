use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradcore::{Tape, Tensor, Var};
use crate::nn::{Activation, BoundVars, Dense, DenseVars, Module};

/// Geometry `C × H × V` of one stage's feature map.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl StageShape {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        StageShape {
            channels,
            height,
            width,
        }
    }

    pub fn locations(&self) -> usize {
        self.height * self.width
    }

    pub fn len(&self) -> usize {
        self.channels * self.locations()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    pub input_dim: usize,
    pub stages: Vec<StageShape>,
    /// Length `l` of the last-hidden vector `u`.
    pub hidden_dim: usize,
    pub activation: Activation,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            input_dim: 48,
            stages: vec![StageShape::new(8, 2, 2), StageShape::new(16, 1, 2)],
            hidden_dim: 16,
            activation: Activation::Tanh,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::Config("backbone needs at least one stage".into()));
        }
        if self.input_dim == 0 || self.hidden_dim == 0 {
            return Err(Error::Config("backbone extents must be positive".into()));
        }
        if self.stages.iter().any(|s| s.channels == 0 || s.height == 0 || s.width == 0) {
            return Err(Error::Config(format!(
                "stage extents must be positive: {:?}",
                self.stages
            )));
        }
        Ok(())
    }
}

/// Blocked dense network: each stage is an affine map plus activation on the
/// previous stage's flattened output, read as a `C × H × V` map. A final
/// dense head on the last map produces `u`.
#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub stages: Vec<Dense>,
    pub head: Dense,
}

pub struct BackboneVars {
    pub stages: Vec<DenseVars>,
    pub head: DenseVars,
}

impl BoundVars for BackboneVars {
    fn vars(&self) -> Vec<Var> {
        self.stages
            .iter()
            .chain(std::iter::once(&self.head))
            .flat_map(BoundVars::vars)
            .collect()
    }
}

/// Batched backbone output. Each map is `(n, C·H·V)` in channel-major order.
pub struct BackboneOutput {
    pub maps: Vec<Var>,
    pub u: Var,
}

/// One sample's stage output viewed as a `C × H × V` block.
#[derive(Clone, Debug, PartialEq)]
pub struct StageOutput {
    pub map: Tensor,
    pub u: Tensor,
}

impl StageOutput {
    /// Location vectors `q_j ∈ R^C`, `j = 0..H·V`, as an `(H·V, C)` matrix.
    pub fn channel_vectors(&self) -> Result<Tensor> {
        let [c, h, v] = *self.map.shape() else {
            return Err(Error::dim("channel_vectors", self.map.shape(), &[]));
        };
        let hv = h * v;
        let src = self.map.data();
        let mut out = vec![0.0; c * hv];
        for ch in 0..c {
            for j in 0..hv {
                out[j * c + ch] = src[ch * hv + j];
            }
        }
        Tensor::matrix(hv, c, out)
    }
}

impl Backbone {
    pub fn new<R: Rng + ?Sized>(config: BackboneConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut stages = Vec::with_capacity(config.stages.len());
        let mut width = config.input_dim;
        for s in &config.stages {
            stages.push(Dense::new(rng, width, s.len())?);
            width = s.len();
        }
        let head = Dense::new(rng, width, config.hidden_dim)?;
        Ok(Backbone {
            config,
            stages,
            head,
        })
    }

    /// Forward a batch `x` of shape `(n, input_dim)`.
    pub fn forward(&self, tape: &mut Tape, vars: &BackboneVars, x: Var) -> Result<BackboneOutput> {
        match tape.shape(x) {
            [_, d] if *d == self.config.input_dim => {}
            s => {
                return Err(Error::Config(format!(
                    "backbone expects inputs of width {}, got shape {s:?}",
                    self.config.input_dim
                )))
            }
        }
        let act = self.config.activation;
        let mut h = x;
        let mut maps = Vec::with_capacity(vars.stages.len());
        for stage in &vars.stages {
            let z = stage.forward(tape, h)?;
            h = act.apply(tape, z)?;
            maps.push(h);
        }
        let z = vars.head.forward(tape, h)?;
        let u = act.apply(tape, z)?;
        Ok(BackboneOutput { maps, u })
    }

    /// Single-sample forward returning each stage as a `C × H × V` tensor.
    pub fn forward_single(&self, x: &[f64]) -> Result<(Vec<StageOutput>, Tensor)> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let xv = tape.constant(Tensor::matrix(1, x.len(), x.to_vec())?);
        let out = self.forward(&mut tape, &vars, xv)?;
        let u = tape.value(out.u).reshape([self.config.hidden_dim])?;
        let stages = out
            .maps
            .iter()
            .zip(&self.config.stages)
            .map(|(m, s)| {
                Ok(StageOutput {
                    map: tape.value(*m).reshape([s.channels, s.height, s.width])?,
                    u: u.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((stages, u))
    }
}

impl Module for Backbone {
    type Bound = BackboneVars;

    fn bind_with(&self, leaf: &mut dyn FnMut(&Tensor) -> Var) -> BackboneVars {
        BackboneVars {
            stages: self.stages.iter().map(|s| s.bind_with(leaf)).collect(),
            head: self.head.bind_with(leaf),
        }
    }

    fn params(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<_> = self
            .stages
            .iter()
            .enumerate()
            .flat_map(|(i, s)| s.params_named(&format!("backbone.stage{i}")))
            .collect();
        out.extend(self.head.params_named("backbone.head"));
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = self.stages.iter_mut().flat_map(Dense::params_mut).collect();
        out.extend(self.head.params_mut());
        out
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn config(stages: Vec<StageShape>, input_dim: usize, hidden: usize, act: Activation) -> BackboneConfig {
        BackboneConfig {
            input_dim,
            stages,
            hidden_dim: hidden,
            activation: act,
        }
    }

    #[test]
    fn identity_stage_reproduces_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = config(vec![StageShape::new(4, 2, 2)], 16, 3, Activation::Identity);
        let mut bb = Backbone::new(cfg, &mut rng).unwrap();
        bb.stages[0] = Dense::from_parts(Tensor::eye(16).unwrap(), Tensor::zeros([16]).unwrap()).unwrap();
        let x: Vec<f64> = (0..16).map(|i| i as f64 * 0.1 - 0.7).collect();
        let (stages, _) = bb.forward_single(&x).unwrap();
        assert_eq!(stages[0].map, Tensor::new([4, 2, 2], x).unwrap());
    }

    #[test]
    fn shape_contract() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = config(vec![StageShape::new(4, 2, 2)], 16, 8, Activation::Relu);
        let bb = Backbone::new(cfg, &mut rng).unwrap();
        let (stages, u) = bb.forward_single(&[0.3; 16]).unwrap();
        assert_eq!(stages[0].map.shape(), &[4, 2, 2]);
        assert_eq!(u.shape(), &[8]);
        assert!(bb.forward_single(&[0.3; 15]).is_err());
    }

    #[test]
    fn deterministic_under_seed() {
        let cfg = config(
            vec![StageShape::new(3, 2, 2), StageShape::new(5, 1, 2)],
            7,
            4,
            Activation::Tanh,
        );
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(42);
            let bb = Backbone::new(cfg.clone(), &mut rng).unwrap();
            bb.forward_single(&[0.1, 0.2, -0.3, 0.4, 0.5, -0.6, 0.7]).unwrap()
        };
        let (a, ua) = run();
        let (b, ub) = run();
        assert_eq!(a, b);
        assert_eq!(ua, ub);
    }

    #[test]
    fn channel_vectors_layout() {
        let map = Tensor::new([2, 1, 3], vec![1.0, 2.0, 3.0, 10.0, 20.0, 30.0]).unwrap();
        let so = StageOutput {
            map,
            u: Tensor::vector(vec![0.0]).unwrap(),
        };
        let q = so.channel_vectors().unwrap();
        assert_eq!(q.shape(), &[3, 2]);
        assert_eq!(q.row(1), &[2.0, 20.0]);
    }

    #[test]
    fn rejects_bad_config() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(Backbone::new(config(vec![], 4, 2, Activation::Relu), &mut rng).is_err());
        assert!(Backbone::new(config(vec![StageShape::new(0, 1, 1)], 4, 2, Activation::Relu), &mut rng).is_err());
    }
}
