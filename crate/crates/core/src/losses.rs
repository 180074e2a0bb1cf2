//! Metric losses over sampled tuples, the energy-confusion term, and the
//! plain metric-learning step.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradcore::{Tape, Tensor, Var};
use crate::model::MetricModel;
use crate::nn::{BoundVars, Module};
use crate::optim::{collect_grads, Adam};
use crate::tuples::{
    sample_easy, sample_hard, sample_npair, sample_semihard, FeatureBatch, NTuple, SamplerWarning, Triplet,
};

/// Eq-4 constant from the Siamese energy formulation.
const CONTRASTIVE_DECAY: f64 = 2.77;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Contrastive,
    #[serde(alias = "triplet")]
    TripletHinge,
    Npair,
    Angular,
    ProxyNca,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mining {
    Easy,
    Hard,
    #[default]
    Semihard,
}

fn default_margin() -> f64 {
    0.01
}
fn default_q() -> f64 {
    2.0
}
fn default_angle() -> f64 {
    45.0
}
fn default_true() -> bool {
    true
}
fn default_per_anchor() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricLossConfig {
    pub kind: LossKind,
    #[serde(default = "default_margin")]
    pub margin: f64,
    /// Scale of the contrastive energy.
    #[serde(default = "default_q")]
    pub q: f64,
    #[serde(default = "default_angle")]
    pub angle_deg: f64,
    /// Triplet selection for the triplet and contrastive losses.
    #[serde(default)]
    pub mining: Mining,
    /// Mine on L2-normalized rows.
    #[serde(default = "default_true")]
    pub mine_normalized: bool,
    #[serde(default = "default_per_anchor")]
    pub easy_per_anchor: usize,
}

impl MetricLossConfig {
    pub fn new(kind: LossKind) -> Self {
        MetricLossConfig {
            kind,
            margin: default_margin(),
            q: default_q(),
            angle_deg: default_angle(),
            mining: Mining::default(),
            mine_normalized: true,
            easy_per_anchor: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.margin > 0.0) {
            return Err(Error::Parameter(format!("margin must be positive, got {}", self.margin)));
        }
        if !(self.q > 0.0) {
            return Err(Error::Parameter(format!("Q must be positive, got {}", self.q)));
        }
        check_angle(self.angle_deg)?;
        if self.easy_per_anchor == 0 {
            return Err(Error::Parameter("easy_per_anchor must be at least 1".into()));
        }
        Ok(())
    }

    pub fn uses_proxies(&self) -> bool {
        self.kind == LossKind::ProxyNca
    }
}

fn check_angle(deg: f64) -> Result<()> {
    if deg > 0.0 && deg < 90.0 {
        Ok(())
    } else {
        Err(Error::Parameter(format!("angle must lie in (0, 90) degrees, got {deg}")))
    }
}

/// Constraints mined from one batch.
#[derive(Clone, Debug, PartialEq)]
pub enum Tuples {
    Triplets(Vec<Triplet>),
    NTuples(Vec<NTuple>),
    /// Every row acts as an anchor against the class proxies.
    Anchors(Vec<usize>),
}

impl Tuples {
    pub fn len(&self) -> usize {
        match self {
            Tuples::Triplets(t) => t.len(),
            Tuples::NTuples(t) => t.len(),
            Tuples::Anchors(a) => a.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mined {
    pub tuples: Tuples,
    pub fallback: usize,
    pub warning: Option<SamplerWarning>,
}

/// Mines the tuples `config.kind` needs from embedding values.
pub fn mine<R: Rng + ?Sized>(batch: &FeatureBatch, config: &MetricLossConfig, rng: &mut R) -> Result<Mined> {
    let view = if config.mine_normalized {
        batch.l2_normalized()
    } else {
        batch.clone()
    };
    Ok(match config.kind {
        LossKind::Contrastive | LossKind::TripletHinge => {
            let s = match config.mining {
                Mining::Easy => sample_easy(&view, config.easy_per_anchor, rng),
                Mining::Hard => sample_hard(&view, rng),
                Mining::Semihard => sample_semihard(&view, config.margin, rng)?,
            };
            Mined {
                fallback: s.fallback.len(),
                tuples: Tuples::Triplets(s.all()),
                warning: s.warning,
            }
        }
        LossKind::Npair | LossKind::Angular => {
            let t = sample_npair(&view, rng);
            let warning = t.is_empty().then_some(SamplerWarning::NoPositives);
            Mined {
                tuples: Tuples::NTuples(t),
                fallback: 0,
                warning,
            }
        }
        LossKind::ProxyNca => Mined {
            tuples: Tuples::Anchors((0..batch.len()).collect()),
            fallback: 0,
            warning: None,
        },
    })
}

fn sq_row_dist(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let d = tape.sub(a, b)?;
    let d2 = tape.mul(d, d)?;
    tape.sum_axis(d2, 1)
}

fn row_dist(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let d = tape.sub(a, b)?;
    tape.row_norms(d)
}

fn row_dot(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let m = tape.mul(a, b)?;
    tape.sum_axis(m, 1)
}

/// Per-pair contrastive energy for rows of `e1`, `e2` (both `(t, d)`);
/// `y[i] = 0` marks a genuine pair and `1` an impostor pair.
pub fn contrastive(tape: &mut Tape, e1: Var, e2: Var, y: &[f64], q: f64) -> Result<Var> {
    if !(q > 0.0) {
        return Err(Error::Parameter(format!("Q must be positive, got {q}")));
    }
    let t = tape.shape(e1)[0];
    if y.len() != t {
        return Err(Error::dim("contrastive", tape.shape(e1), &[y.len()]));
    }
    let e_sq = sq_row_dist(tape, e1, e2)?;
    let e = row_dist(tape, e1, e2)?;
    let genuine = tape.constant(Tensor::vector(y.iter().map(|v| 1.0 - v).collect())?);
    let impostor = tape.constant(Tensor::vector(y.to_vec())?);
    let pull = tape.mul_scalar(e_sq, 2.0 / q)?;
    let pull = tape.mul(pull, genuine)?;
    let push = tape.mul_scalar(e, -CONTRASTIVE_DECAY / q)?;
    let push = tape.exp(push)?;
    let push = tape.mul_scalar(push, 2.0 * q)?;
    let push = tape.mul(push, impostor)?;
    tape.add(pull, push)
}

/// `max(0, margin - (d- - d+))` per row.
pub fn triplet_hinge(tape: &mut Tape, a: Var, p: Var, n: Var, margin: f64) -> Result<Var> {
    let dp = row_dist(tape, a, p)?;
    let dn = row_dist(tape, a, n)?;
    let gap = tape.sub(dp, dn)?;
    let z = tape.add_scalar(gap, margin)?;
    tape.relu(z)
}

/// `ln(1 + Σ_j exp(x_j))` along axis 1 of a `(t, k)` matrix.
fn softplus_sum(tape: &mut Tape, x: Var) -> Result<Var> {
    let t = tape.shape(x)[0];
    let zero = tape.constant(Tensor::zeros([t, 1])?);
    let z = tape.concat(&[zero, x], 1)?;
    tape.logsumexp(z, 1)
}

/// `(t, k)` similarities `⟨lhs_i, n_ij⟩` for `lhs (t, d)` and `negs (t, k, d)`.
fn neg_similarities(tape: &mut Tape, lhs: Var, negs: Var) -> Result<Var> {
    let (t, k, d) = match tape.shape(negs) {
        [t, k, d] => (*t, *k, *d),
        s => return Err(Error::dim("neg_similarities", s, &[])),
    };
    let col = tape.reshape(lhs, [t, d, 1])?;
    let s = tape.matmul(negs, col)?;
    tape.reshape(s, [t, k])
}

/// Repeats a `(t,)` vector across `k` columns.
fn expand_cols(tape: &mut Tape, v: Var, k: usize) -> Result<Var> {
    let t = tape.shape(v)[0];
    let col = tape.reshape(v, [t, 1])?;
    let ones = tape.constant(Tensor::ones([1, k])?);
    tape.matmul(col, ones)
}

/// `ln(1 + Σ_j exp(S_j- - S+))` per tuple with dot-product similarities.
/// `negs` is `(t, k, d)`.
pub fn npair(tape: &mut Tape, a: Var, p: Var, negs: Var) -> Result<Var> {
    let k = tape.shape(negs)[1];
    let s_pos = row_dot(tape, a, p)?;
    let s_neg = neg_similarities(tape, a, negs)?;
    let s_pos = expand_cols(tape, s_pos, k)?;
    let x = tape.sub(s_neg, s_pos)?;
    softplus_sum(tape, x)
}

/// Exponent terms `4tan²α (a+p)ᵀn_j - 2(1+tan²α) aᵀp`, shape `(t, k)`.
pub fn angular_exponents(tape: &mut Tape, a: Var, p: Var, negs: Var, angle_deg: f64) -> Result<Var> {
    check_angle(angle_deg)?;
    let tan2 = angle_deg.to_radians().tan().powi(2);
    let k = tape.shape(negs)[1];
    let ap = tape.add(a, p)?;
    let s_neg = neg_similarities(tape, ap, negs)?;
    let s_neg = tape.mul_scalar(s_neg, 4.0 * tan2)?;
    let s_pos = row_dot(tape, a, p)?;
    let s_pos = tape.mul_scalar(s_pos, 2.0 * (1.0 + tan2))?;
    let s_pos = expand_cols(tape, s_pos, k)?;
    tape.sub(s_neg, s_pos)
}

/// Angular N-pair objective `ln(1 + Σ_j exp(exponent_j))` per tuple.
pub fn angular(tape: &mut Tape, a: Var, p: Var, negs: Var, angle_deg: f64) -> Result<Var> {
    let x = angular_exponents(tape, a, p, negs, angle_deg)?;
    softplus_sum(tape, x)
}

/// Proxy-NCA per row: `d(f, p_y)² + ln Σ_{z≠y} exp(-d(f, p_z)²)` with rows of
/// `f (n, d)` and `proxies (C, d)` L2-normalized first.
pub fn proxy_nca(tape: &mut Tape, f: Var, labels: &[usize], proxies: Var) -> Result<Var> {
    let classes = tape.shape(proxies)[0];
    let n = tape.shape(f)[0];
    if labels.len() != n {
        return Err(Error::dim("proxy_nca", tape.shape(f), &[labels.len()]));
    }
    if classes < 2 {
        return Err(Error::Contract("proxy_nca needs at least two proxies".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::Contract(format!("label {bad} has no proxy (only {classes})")));
    }
    let fu = tape.l2_normalize(f)?;
    let pu = tape.l2_normalize(proxies)?;
    let pt = tape.transpose(pu)?;
    let sim = tape.matmul(fu, pt)?;
    // Unit rows: ‖f - p‖² = 2 - 2 fᵀp.
    let d2 = tape.mul_scalar(sim, -2.0)?;
    let d2 = tape.add_scalar(d2, 2.0)?;
    let pos = tape.take_cols(d2, labels, 1)?;
    let pos = tape.reshape(pos, [n])?;
    let others: Vec<usize> = labels
        .iter()
        .flat_map(|&y| (0..classes).filter(move |&z| z != y))
        .collect();
    let neg = tape.neg(d2)?;
    let neg = tape.take_cols(neg, &others, classes - 1)?;
    let lse = tape.logsumexp(neg, 1)?;
    tape.add(pos, lse)
}

/// Mean squared distance over all cross pairs of rows from classes `i`, `j`.
pub fn energy_confusion(tape: &mut Tape, x: Var, labels: &[usize], i: usize, j: usize) -> Result<Var> {
    if i == j {
        return Err(Error::Contract("energy confusion needs two distinct classes".into()));
    }
    let rows_i: Vec<usize> = (0..labels.len()).filter(|&r| labels[r] == i).collect();
    let rows_j: Vec<usize> = (0..labels.len()).filter(|&r| labels[r] == j).collect();
    if rows_i.is_empty() || rows_j.is_empty() {
        return Err(Error::Contract(format!("class {i} or {j} missing from batch")));
    }
    let left: Vec<usize> = rows_i.iter().flat_map(|&a| rows_j.iter().map(move |_| a)).collect();
    let right: Vec<usize> = rows_i.iter().flat_map(|_| rows_j.iter().copied()).collect();
    let xl = tape.gather_rows(x, &left)?;
    let xr = tape.gather_rows(x, &right)?;
    let d = tape.sub(xl, xr)?;
    let s = tape.squared_norm(d)?;
    tape.div_scalar(s, left.len() as f64)
}

/// Per-tuple losses for `tuples` over embedding rows `e (n, d)`.
pub fn tuple_losses(
    tape: &mut Tape,
    e: Var,
    labels: &[usize],
    tuples: &Tuples,
    config: &MetricLossConfig,
    proxies: Option<Var>,
) -> Result<Var> {
    if tuples.is_empty() {
        return Err(Error::Contract("no tuples to score".into()));
    }
    match (config.kind, tuples) {
        (LossKind::TripletHinge | LossKind::Contrastive, Tuples::Triplets(ts)) => {
            let ai: Vec<usize> = ts.iter().map(|t| t.anchor).collect();
            let pi: Vec<usize> = ts.iter().map(|t| t.positive).collect();
            let ni: Vec<usize> = ts.iter().map(|t| t.negative).collect();
            if config.kind == LossKind::TripletHinge {
                let a = tape.gather_rows(e, &ai)?;
                let p = tape.gather_rows(e, &pi)?;
                let n = tape.gather_rows(e, &ni)?;
                triplet_hinge(tape, a, p, n, config.margin)
            } else {
                // Each triplet yields one genuine and one impostor pair.
                let left: Vec<usize> = ai.iter().chain(&ai).copied().collect();
                let right: Vec<usize> = pi.iter().chain(&ni).copied().collect();
                let y: Vec<f64> = (0..2 * ts.len()).map(|i| if i < ts.len() { 0.0 } else { 1.0 }).collect();
                let e1 = tape.gather_rows(e, &left)?;
                let e2 = tape.gather_rows(e, &right)?;
                contrastive(tape, e1, e2, &y, config.q)
            }
        }
        (LossKind::Npair | LossKind::Angular, Tuples::NTuples(ts)) => {
            let k = ts[0].negatives.len();
            if k == 0 || ts.iter().any(|t| t.negatives.len() != k) {
                return Err(Error::Contract("n-tuples must share a nonzero negative count".into()));
            }
            let ai: Vec<usize> = ts.iter().map(|t| t.anchor).collect();
            let pi: Vec<usize> = ts.iter().map(|t| t.positive).collect();
            let ni: Vec<usize> = ts.iter().flat_map(|t| t.negatives.iter().copied()).collect();
            let a = tape.gather_rows(e, &ai)?;
            let p = tape.gather_rows(e, &pi)?;
            let n = tape.gather_rows(e, &ni)?;
            let d = tape.shape(e)[1];
            let n = tape.reshape(n, [ts.len(), k, d])?;
            if config.kind == LossKind::Npair {
                npair(tape, a, p, n)
            } else {
                angular(tape, a, p, n, config.angle_deg)
            }
        }
        (LossKind::ProxyNca, Tuples::Anchors(rows)) => {
            let proxies = proxies.ok_or_else(|| Error::Contract("proxy loss without proxies".into()))?;
            let f = tape.gather_rows(e, rows)?;
            let y: Vec<usize> = rows.iter().map(|&r| labels[r]).collect();
            proxy_nca(tape, f, &y, proxies)
        }
        (kind, _) => Err(Error::Contract(format!("tuple type does not match loss {kind:?}"))),
    }
}

/// Mean of [`tuple_losses`].
pub fn metric_loss(
    tape: &mut Tape,
    e: Var,
    labels: &[usize],
    tuples: &Tuples,
    config: &MetricLossConfig,
    proxies: Option<Var>,
) -> Result<Var> {
    let per = tuple_losses(tape, e, labels, tuples, config, proxies)?;
    tape.mean(per)
}

/// Mines tuples from inference-mode embeddings of the batch `x`.
pub fn mine_batch<R: Rng + ?Sized>(
    model: &MetricModel,
    x: &Tensor,
    labels: &[usize],
    config: &MetricLossConfig,
    rng: &mut R,
) -> Result<Mined> {
    let batch = FeatureBatch::new(model.embed(x)?, labels.to_vec())?;
    mine(&batch, config, rng)
}

/// Energy-confusion term between two classes of the batch, scaled by
/// `weight` and added to the metric loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EnergyTerm {
    pub weight: f64,
    pub classes: (usize, usize),
}

/// Loss values measured before the update.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MetricStep {
    pub l_m: Option<f64>,
    pub l_ec: Option<f64>,
}

/// One optimizer step on the mean tuple loss through the embedding layer and
/// the extractor. Empty `tuples` leave everything untouched.
pub fn minimize_metric(
    model: &mut MetricModel,
    optimizer: &mut Adam,
    x: &Tensor,
    labels: &[usize],
    tuples: &Tuples,
    config: &MetricLossConfig,
) -> Result<Option<f64>> {
    Ok(metric_step(model, optimizer, x, labels, tuples, config, None)?.l_m)
}

/// [`minimize_metric`] with an optional energy-confusion term.
pub fn metric_step(
    model: &mut MetricModel,
    optimizer: &mut Adam,
    x: &Tensor,
    labels: &[usize],
    tuples: &Tuples,
    config: &MetricLossConfig,
    energy: Option<EnergyTerm>,
) -> Result<MetricStep> {
    if tuples.is_empty() {
        return Ok(MetricStep::default());
    }
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape, true);
    let xv = tape.constant(x.clone());
    let out = model.forward(&mut tape, &vars, xv)?;
    let mut loss = metric_loss(&mut tape, out.embeddings, labels, tuples, config, vars.proxies)?;
    let mut report = MetricStep {
        l_m: Some(tape.value(loss).item()?),
        l_ec: None,
    };
    if let Some(term) = energy {
        let (i, j) = term.classes;
        let ec = energy_confusion(&mut tape, out.embeddings, labels, i, j)?;
        report.l_ec = Some(tape.value(ec).item()?);
        let scaled = tape.mul_scalar(ec, term.weight)?;
        loss = tape.add(loss, scaled)?;
    }
    let mut grads = tape.backward(loss)?;
    let like: Vec<&Tensor> = model.params().into_iter().map(|(_, t)| t).collect();
    let g = collect_grads(&mut grads, &vars.vars(), &like)?;
    optimizer.step(model.params_mut(), &g)?;
    Ok(report)
}
