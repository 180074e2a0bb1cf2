//! Attention over the location vectors of one feature map, guided by the
//! last-hidden vector `u`.
//!
//! Inputs are batched: location vectors arrive as `(n, L, C)` with
//! `L = H·V`, and `u` as `(n, l)`. Scalar-score kinds produce `(n, L)`
//! scores; the multi-dimensional kind produces `(n, L, C)`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradcore::{Tape, Tensor, Var};
use crate::nn::{glorot_uniform, Activation, BoundVars};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AttentionKind {
    /// `⟨W1 q, W2 u⟩`
    Multiplicative,
    /// `⟨W1 q, u⟩`
    MultiplicativeSimple,
    /// `wᵀ σ(W1 q + W2 u)`
    Additive,
    /// `wᵀ σ(W1 q + u)`
    #[default]
    AdditiveSimple,
    /// `Wᵀ σ(W1 q + u)`, one score per feature.
    Multidim,
}

impl AttentionKind {
    pub const ALL: [AttentionKind; 5] = [
        AttentionKind::Multiplicative,
        AttentionKind::MultiplicativeSimple,
        AttentionKind::Additive,
        AttentionKind::AdditiveSimple,
        AttentionKind::Multidim,
    ];

    fn has_w2(self) -> bool {
        matches!(self, AttentionKind::Multiplicative | AttentionKind::Additive)
    }

    fn has_w(self) -> bool {
        matches!(self, AttentionKind::Additive | AttentionKind::AdditiveSimple)
    }

    fn has_wmd(self) -> bool {
        self == AttentionKind::Multidim
    }

    pub fn is_scalar(self) -> bool {
        self != AttentionKind::Multidim
    }
}

/// Which axis the multi-dimensional scores are normalized over.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MultidimAxis {
    /// Over the `C` features within each location.
    #[default]
    Features,
    /// Over the `H·V` locations for each feature.
    Locations,
}

/// Parameters of one stage's attention block. Matrices use the
/// mathematical orientation: `w1` and `wmd` are `l × C`, `w2` is `l × l`.
#[derive(Clone, Debug, PartialEq)]
pub struct Attention {
    pub kind: AttentionKind,
    pub w1: Tensor,
    pub w2: Option<Tensor>,
    pub w: Option<Tensor>,
    pub wmd: Option<Tensor>,
    pub sigma: Activation,
    pub multidim_axis: MultidimAxis,
}

#[derive(Clone, Debug)]
pub struct AttentionVars {
    kind: AttentionKind,
    w1: Var,
    w2: Option<Var>,
    w: Option<Var>,
    wmd: Option<Var>,
}

impl BoundVars for AttentionVars {
    fn vars(&self) -> Vec<Var> {
        let mut v = vec![self.w1];
        v.extend(self.w2);
        v.extend(self.w);
        v.extend(self.wmd);
        v
    }
}

impl Attention {
    pub fn new<R: Rng + ?Sized>(
        kind: AttentionKind,
        channels: usize,
        hidden: usize,
        sigma: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        let w1 = glorot_uniform(rng, channels, hidden, &[hidden, channels])?;
        let w2 = kind
            .has_w2()
            .then(|| glorot_uniform(rng, hidden, hidden, &[hidden, hidden]))
            .transpose()?;
        let w = kind
            .has_w()
            .then(|| glorot_uniform(rng, hidden, 1, &[hidden]))
            .transpose()?;
        let wmd = kind
            .has_wmd()
            .then(|| glorot_uniform(rng, hidden, channels, &[hidden, channels]))
            .transpose()?;
        Ok(Attention {
            kind,
            w1,
            w2,
            w,
            wmd,
            sigma,
            multidim_axis: MultidimAxis::default(),
        })
    }

    pub fn channels(&self) -> usize {
        self.w1.shape()[1]
    }

    pub fn hidden(&self) -> usize {
        self.w1.shape()[0]
    }

    /// Checks that exactly the parameters demanded by `kind` are present and
    /// correctly shaped.
    pub fn validate(&self) -> Result<()> {
        let [l, c] = *self.w1.shape() else {
            return Err(Error::Config(format!("W1 must be a matrix, got {:?}", self.w1.shape())));
        };
        let check = |name: &str, want: bool, t: &Option<Tensor>, shape: &[usize]| -> Result<()> {
            match (want, t) {
                (true, Some(t)) if t.shape() == shape => Ok(()),
                (true, Some(t)) => Err(Error::Config(format!(
                    "{name} has shape {:?}, expected {shape:?}",
                    t.shape()
                ))),
                (true, None) => Err(Error::Config(format!("{:?} attention requires {name}", self.kind))),
                (false, Some(_)) => Err(Error::Config(format!("{:?} attention takes no {name}", self.kind))),
                (false, None) => Ok(()),
            }
        };
        check("W2", self.kind.has_w2(), &self.w2, &[l, l])?;
        check("w", self.kind.has_w(), &self.w, &[l])?;
        check("Wmd", self.kind.has_wmd(), &self.wmd, &[l, c])
    }

    pub fn bind(&self, tape: &mut Tape, tracked: bool) -> AttentionVars {
        self.bind_with(&mut |t| tape.leaf(t.clone(), tracked))
    }

    pub fn bind_with(&self, leaf: &mut dyn FnMut(&Tensor) -> Var) -> AttentionVars {
        AttentionVars {
            kind: self.kind,
            w1: leaf(&self.w1),
            w2: self.w2.as_ref().map(&mut *leaf),
            w: self.w.as_ref().map(&mut *leaf),
            wmd: self.wmd.as_ref().map(&mut *leaf),
        }
    }

    pub fn params_named(&self, prefix: &str) -> Vec<(String, &Tensor)> {
        let mut out = vec![(format!("{prefix}.w1"), &self.w1)];
        out.extend(self.w2.as_ref().map(|t| (format!("{prefix}.w2"), t)));
        out.extend(self.w.as_ref().map(|t| (format!("{prefix}.w"), t)));
        out.extend(self.wmd.as_ref().map(|t| (format!("{prefix}.wmd"), t)));
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.w1];
        out.extend(self.w2.as_mut());
        out.extend(self.w.as_mut());
        out.extend(self.wmd.as_mut());
        out
    }

    /// Raw attention scores for location vectors `q: (n, L, C)` and `u: (n, l)`.
    pub fn scores(&self, tape: &mut Tape, vars: &AttentionVars, q: Var, u: Var) -> Result<Var> {
        if vars.kind != self.kind {
            return Err(Error::Config("attention variables bound for another kind".into()));
        }
        let (n, locs, c) = match *tape.shape(q) {
            [n, locs, c] if c == self.channels() => (n, locs, c),
            ref s => return Err(Error::dim("attention_scores", s, &[self.channels()])),
        };
        let l = self.hidden();
        match *tape.shape(u) {
            [un, ul] if un == n && ul == l => {}
            ref s => return Err(Error::dim("attention_scores", s, &[n, l])),
        }

        let rows = tape.reshape(q, [n * locs, c])?;
        let w1t = tape.transpose(vars.w1)?;
        let projected = tape.matmul(rows, w1t)?; // (n·L, l): rows are (W1 q_j)ᵀ
        let repeat: Vec<usize> = (0..n).flat_map(|i| std::iter::repeat_n(i, locs)).collect();

        // The u-side term, (n·L, l), either u itself or (W2 u)ᵀ.
        let guide = match vars.w2 {
            Some(w2) => {
                let w2t = tape.transpose(w2)?;
                let mixed = tape.matmul(u, w2t)?;
                tape.gather_rows(mixed, &repeat)?
            }
            None => tape.gather_rows(u, &repeat)?,
        };

        match self.kind {
            AttentionKind::Multiplicative | AttentionKind::MultiplicativeSimple => {
                let prod = tape.mul(projected, guide)?;
                let s = tape.sum_axis(prod, 1)?;
                tape.reshape(s, [n, locs])
            }
            AttentionKind::Additive | AttentionKind::AdditiveSimple => {
                let z = tape.add(projected, guide)?;
                let h = self.sigma.apply(tape, z)?;
                let w = vars.w.expect("validated kind carries w");
                let wcol = tape.reshape(w, [l, 1])?;
                let s = tape.matmul(h, wcol)?;
                tape.reshape(s, [n, locs])
            }
            AttentionKind::Multidim => {
                let z = tape.add(projected, guide)?;
                let h = self.sigma.apply(tape, z)?;
                let wmd = vars.wmd.expect("validated kind carries Wmd");
                let s = tape.matmul(h, wmd)?; // rows are (Wmdᵀ σ(..))ᵀ
                tape.reshape(s, [n, locs, c])
            }
        }
    }

    /// Softmax-normalized attention weights.
    pub fn normalize(&self, tape: &mut Tape, scores: Var) -> Result<Var> {
        normalize_scores(tape, scores, self.kind, self.multidim_axis)
    }
}

/// Scalar scores `(n, L)` are normalized over locations. Multi-dimensional
/// scores `(n, L, C)` are normalized over features by default, or over
/// locations when configured.
pub fn normalize_scores(
    tape: &mut Tape,
    scores: Var,
    kind: AttentionKind,
    axis: MultidimAxis,
) -> Result<Var> {
    match (kind.is_scalar(), tape.shape(scores).len(), axis) {
        (true, 2, _) => tape.softmax(scores, 1),
        (false, 3, MultidimAxis::Features) => tape.softmax(scores, 2),
        (false, 3, MultidimAxis::Locations) => tape.softmax(scores, 1),
        (_, _, _) => Err(Error::dim("normalize_scores", tape.shape(scores), &[])),
    }
}

/// Weighted pooling of location vectors `q: (n, L, C)`.
///
/// Scalar weights `(n, L)` give `p = Σ_j α_j q_j`; per-feature weights
/// `(n, L, C)` give `p_k = Σ_j A_jk q_jk`. Output is `(n, C)`.
pub fn attend_pool(tape: &mut Tape, q: Var, weights: Var) -> Result<Var> {
    let qs = tape.shape(q).to_vec();
    let [n, locs, c] = qs[..] else {
        return Err(Error::dim("attend_pool", &qs, &[]));
    };
    let ws = tape.shape(weights).to_vec();
    if ws == [n, locs] {
        let row = tape.reshape(weights, [n, 1, locs])?;
        let p = tape.matmul(row, q)?;
        tape.reshape(p, [n, c])
    } else if ws == qs {
        let prod = tape.mul(weights, q)?;
        tape.sum_axis(prod, 1)
    } else {
        Err(Error::dim("attend_pool", &qs, &ws))
    }
}

/// Concatenates the pooled vectors in stage order, then `u` when requested.
pub fn fuse(tape: &mut Tape, pooled: &[Var], u: Var, include_u: bool) -> Result<Var> {
    let mut parts = pooled.to_vec();
    if include_u {
        parts.push(u);
    }
    tape.concat(&parts, 1)
}

/// Reorders a batched channel-major map `(n, C·H·V)` into location vectors
/// `(n, H·V, C)`.
pub fn location_vectors(tape: &mut Tape, map: Var, channels: usize, locations: usize) -> Result<Var> {
    let n = tape.shape(map)[0];
    let cube = tape.reshape(map, [n, channels, locations])?;
    tape.transpose(cube)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn run_scores(att: &Attention, q: &Tensor, u: &Tensor) -> Tensor {
        let mut tape = Tape::new();
        let vars = att.bind(&mut tape, false);
        let qv = tape.constant(q.clone());
        let uv = tape.constant(u.clone());
        let s = att.scores(&mut tape, &vars, qv, uv).unwrap();
        tape.value(s).clone()
    }

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        glorot_uniform(rng, 1, 1, shape).unwrap()
    }

    #[test]
    fn multiplicative_simple_with_identity_is_dot_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut att = Attention::new(AttentionKind::MultiplicativeSimple, 3, 3, Activation::Tanh, &mut rng).unwrap();
        att.w1 = Tensor::eye(3).unwrap();
        let q = random(&mut rng, &[1, 4, 3]);
        let u = random(&mut rng, &[1, 3]);
        let s = run_scores(&att, &q, &u);
        for j in 0..4 {
            let dot: f64 = (0..3).map(|k| q.data()[j * 3 + k] * u.data()[k]).sum();
            assert!((s.data()[j] - dot).abs() < 1e-15);
        }
    }

    #[test]
    fn additive_with_zero_w_scores_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut att = Attention::new(AttentionKind::Additive, 3, 5, Activation::Tanh, &mut rng).unwrap();
        att.w = Some(Tensor::zeros([5]).unwrap());
        let s = run_scores(&att, &random(&mut rng, &[2, 4, 3]), &random(&mut rng, &[2, 5]));
        assert!(s.data().iter().all(|&v| v == 0.0));
    }

    /// Direct loop evaluation of `wᵀ σ(W1 q_j + W2 u)`.
    #[test]
    fn additive_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (n, locs, c, l) = (2, 3, 4, 5);
        let att = Attention::new(AttentionKind::Additive, c, l, Activation::Tanh, &mut rng).unwrap();
        let q = random(&mut rng, &[n, locs, c]);
        let u = random(&mut rng, &[n, l]);
        let s = run_scores(&att, &q, &u);
        let (w1, w2, w) = (att.w1.data(), att.w2.as_ref().unwrap().data(), att.w.as_ref().unwrap().data());
        for b in 0..n {
            for j in 0..locs {
                let mut score = 0.0;
                for r in 0..l {
                    let mut z = 0.0;
                    for k in 0..c {
                        z += w1[r * c + k] * q.data()[(b * locs + j) * c + k];
                    }
                    for k in 0..l {
                        z += w2[r * l + k] * u.data()[b * l + k];
                    }
                    score += w[r] * z.tanh();
                }
                assert!((s.data()[b * locs + j] - score).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn multiplicative_and_multidim_match_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (n, locs, c, l) = (2, 3, 4, 5);
        let q = random(&mut rng, &[n, locs, c]);
        let u = random(&mut rng, &[n, l]);

        let att = Attention::new(AttentionKind::Multiplicative, c, l, Activation::Tanh, &mut rng).unwrap();
        let s = run_scores(&att, &q, &u);
        let (w1, w2) = (att.w1.data(), att.w2.as_ref().unwrap().data());
        for b in 0..n {
            for j in 0..locs {
                let mut score = 0.0;
                for r in 0..l {
                    let a: f64 = (0..c).map(|k| w1[r * c + k] * q.data()[(b * locs + j) * c + k]).sum();
                    let v: f64 = (0..l).map(|k| w2[r * l + k] * u.data()[b * l + k]).sum();
                    score += a * v;
                }
                assert!((s.data()[b * locs + j] - score).abs() < 1e-12);
            }
        }

        let att = Attention::new(AttentionKind::Multidim, c, l, Activation::Sigmoid, &mut rng).unwrap();
        let s = run_scores(&att, &q, &u);
        assert_eq!(s.shape(), &[n, locs, c]);
        let (w1, wmd) = (att.w1.data(), att.wmd.as_ref().unwrap().data());
        for b in 0..n {
            for j in 0..locs {
                let h: Vec<f64> = (0..l)
                    .map(|r| {
                        let z: f64 = (0..c).map(|k| w1[r * c + k] * q.data()[(b * locs + j) * c + k]).sum::<f64>()
                            + u.data()[b * l + r];
                        1.0 / (1.0 + (-z).exp())
                    })
                    .collect();
                for k in 0..c {
                    let a: f64 = (0..l).map(|r| wmd[r * c + k] * h[r]).sum();
                    assert!((s.data()[(b * locs + j) * c + k] - a).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn normalization_symmetry() {
        let mut tape = Tape::new();
        let eq = tape.constant(Tensor::full([1, 4], 0.7).unwrap());
        let w = normalize_scores(&mut tape, eq, AttentionKind::Additive, MultidimAxis::Features).unwrap();
        assert!(tape.value(w).data().iter().all(|&v| (v - 0.25).abs() < 1e-15));

        let rows = Tensor::new([1, 3, 8], (0..24).map(|i| (i / 8) as f64).collect()).unwrap();
        let md = tape.constant(rows);
        let w = normalize_scores(&mut tape, md, AttentionKind::Multidim, MultidimAxis::Features).unwrap();
        assert!(tape.value(w).data().iter().all(|&v| (v - 0.125).abs() < 1e-15));

        let w = normalize_scores(&mut tape, md, AttentionKind::Multidim, MultidimAxis::Locations).unwrap();
        for k in 0..8 {
            let s: f64 = (0..3).map(|j| tape.value(w).data()[j * 8 + k]).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn pool_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let q = random(&mut rng, &[1, 3, 2]);
        let mut tape = Tape::new();
        let qv = tape.constant(q.clone());

        let uniform = tape.constant(Tensor::full([1, 3], 1.0 / 3.0).unwrap());
        let p = attend_pool(&mut tape, qv, uniform).unwrap();
        for k in 0..2 {
            let mean = (0..3).map(|j| q.data()[j * 2 + k]).sum::<f64>() / 3.0;
            assert!((tape.value(p).data()[k] - mean).abs() < 1e-15);
        }

        let one_hot = tape.constant(Tensor::matrix(1, 3, vec![0.0, 1.0, 0.0]).unwrap());
        let p = attend_pool(&mut tape, qv, one_hot).unwrap();
        assert_eq!(tape.value(p).data(), &q.data()[2..4]);

        let a = [0.2, 0.5, 0.3];
        let wv = tape.constant(Tensor::matrix(1, 3, a.to_vec()).unwrap());
        let p = attend_pool(&mut tape, qv, wv).unwrap();
        for k in 0..2 {
            let expect: f64 = (0..3).map(|j| a[j] * q.data()[j * 2 + k]).sum();
            assert!((tape.value(p).data()[k] - expect).abs() < 1e-12);
        }

        let md = random(&mut rng, &[1, 3, 2]);
        let mdv = tape.constant(md.clone());
        let p = attend_pool(&mut tape, qv, mdv).unwrap();
        for k in 0..2 {
            let expect: f64 = (0..3).map(|j| md.data()[j * 2 + k] * q.data()[j * 2 + k]).sum();
            assert!((tape.value(p).data()[k] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn fuse_order_and_length() {
        let mut tape = Tape::new();
        let p1 = tape.constant(Tensor::matrix(1, 4, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let p2 = tape.constant(Tensor::matrix(1, 6, (5..11).map(f64::from).collect()).unwrap());
        let u = tape.constant(Tensor::matrix(1, 8, (11..19).map(f64::from).collect()).unwrap());
        let only = fuse(&mut tape, &[p1], u, false).unwrap();
        assert_eq!(tape.value(only).data(), tape.value(p1).data());
        let f = fuse(&mut tape, &[p1, p2], u, true).unwrap();
        assert_eq!(tape.shape(f), &[1, 18]);
        // Index bookkeeping: stage i occupies [offset_i, offset_i + C_i), then u.
        let expect: Vec<f64> = (1..19).map(f64::from).collect();
        assert_eq!(tape.value(f).data(), &expect[..]);
    }

    #[test]
    fn validate_rejects_mismatched_params() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for kind in AttentionKind::ALL {
            let att = Attention::new(kind, 3, 4, Activation::Tanh, &mut rng).unwrap();
            att.validate().unwrap();
        }
        let mut att = Attention::new(AttentionKind::AdditiveSimple, 3, 4, Activation::Tanh, &mut rng).unwrap();
        att.w2 = Some(Tensor::zeros([4, 4]).unwrap());
        assert!(matches!(att.validate(), Err(Error::Config(_))));
        let mut att = Attention::new(AttentionKind::Multidim, 3, 4, Activation::Tanh, &mut rng).unwrap();
        att.wmd = None;
        assert!(matches!(att.validate(), Err(Error::Config(_))));
    }
}
