//! Classification module over extracted features and the two ways of
//! coupling it to metric learning: a label-smoothed auxiliary loss, and an
//! adaptive adversarial game through gradient reversal.

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradcore::{Tape, Tensor, Var};
use crate::losses::{metric_loss, MetricLossConfig, Tuples};
use crate::model::MetricModel;
use crate::nn::{Activation, BoundVars, Dense, DenseVars, Module};
use crate::optim::{collect_grads, Adam};

/// Floor applied to probabilities before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

/// Feed-forward classifier: affine, activation, dropout, affine, softmax.
#[derive(Clone, Debug, PartialEq)]
pub struct Classifier {
    pub hidden: Dense,
    pub output: Dense,
    pub activation: Activation,
    pub dropout: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct ClassifierVars {
    pub hidden: DenseVars,
    pub output: DenseVars,
}

impl BoundVars for ClassifierVars {
    fn vars(&self) -> Vec<Var> {
        let mut v = self.hidden.vars();
        v.extend(self.output.vars());
        v
    }
}

impl Classifier {
    pub fn new<R: Rng + ?Sized>(
        feature_dim: usize,
        hidden_dim: usize,
        classes: usize,
        dropout: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if classes < 2 {
            return Err(Error::Config("classifier needs at least two classes".into()));
        }
        if feature_dim == 0 || hidden_dim == 0 {
            return Err(Error::Config("classifier widths must be positive".into()));
        }
        if !(0.0..1.0).contains(&dropout) {
            return Err(Error::Parameter(format!("dropout rate {dropout} outside [0, 1)")));
        }
        Ok(Classifier {
            hidden: Dense::new(rng, feature_dim, hidden_dim)?,
            output: Dense::new(rng, hidden_dim, classes)?,
            activation: Activation::Relu,
            dropout,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.hidden.input_dim()
    }

    pub fn classes(&self) -> usize {
        self.output.output_dim()
    }

    /// Logits `(n, C)` for features `f (n, feature_dim)`.
    pub fn logits<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        vars: &ClassifierVars,
        f: Var,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        match tape.shape(f) {
            [_, d] if *d == self.feature_dim() => {}
            s => {
                return Err(Error::Contract(format!(
                    "classifier expects width {}, got shape {s:?}",
                    self.feature_dim()
                )))
            }
        }
        let h = vars.hidden.forward(tape, f)?;
        let h = self.activation.apply(tape, h)?;
        let h = tape.dropout(h, self.dropout, training, rng)?;
        vars.output.forward(tape, h)
    }

    /// Class probabilities `(n, C)`.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        vars: &ClassifierVars,
        f: Var,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        let z = self.logits(tape, vars, f, training, rng)?;
        tape.softmax(z, 1)
    }

    pub fn classify<R: Rng + ?Sized>(&self, f: &Tensor, training: bool, rng: &mut R) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let fv = tape.constant(f.clone());
        let p = self.forward(&mut tape, &vars, fv, training, rng)?;
        Ok(tape.value(p).clone())
    }
}

impl Module for Classifier {
    type Bound = ClassifierVars;

    fn bind_with(&self, leaf: &mut dyn FnMut(&Tensor) -> Var) -> ClassifierVars {
        ClassifierVars {
            hidden: self.hidden.bind_with(leaf),
            output: self.output.bind_with(leaf),
        }
    }

    fn params(&self) -> Vec<(String, &Tensor)> {
        let mut out = self.hidden.params_named("classifier.hidden");
        out.extend(self.output.params_named("classifier.output"));
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.hidden.params_mut();
        out.extend(self.output.params_mut());
        out
    }
}

fn check_labels(labels: &[usize], classes: usize, n: usize) -> Result<()> {
    if labels.len() != n {
        return Err(Error::Contract(format!("{} labels for {n} rows", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::Contract(format!("label {bad} outside [0, {classes})")));
    }
    Ok(())
}

/// `-ln p[y]` per row of `probs (n, C)`.
pub fn cross_entropy(tape: &mut Tape, probs: Var, labels: &[usize]) -> Result<Var> {
    let (n, c) = match tape.shape(probs) {
        [n, c] => (*n, *c),
        s => return Err(Error::dim("cross_entropy", s, &[labels.len()])),
    };
    check_labels(labels, c, n)?;
    let p = tape.take_cols(probs, labels, 1)?;
    let p = tape.reshape(p, [n])?;
    let p = tape.clamp_min(p, PROB_FLOOR)?;
    let lp = tape.log(p)?;
    tape.neg(lp)
}

/// `(1 - α)·onehot(y) + α/C`.
pub fn smooth_labels(y: usize, alpha: f64, classes: usize) -> Result<Vec<f64>> {
    if !(0.0..1.0).contains(&alpha) {
        return Err(Error::Parameter(format!("smoothing {alpha} outside [0, 1)")));
    }
    if classes < 2 {
        return Err(Error::Parameter("smoothing needs at least two classes".into()));
    }
    if y >= classes {
        return Err(Error::Contract(format!("label {y} outside [0, {classes})")));
    }
    let base = alpha / classes as f64;
    let mut v = vec![base; classes];
    v[y] = (1.0 - alpha) + base;
    Ok(v)
}

/// Smoothed targets for a batch, `(n, C)`.
pub fn smoothed_targets(labels: &[usize], alpha: f64, classes: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(labels.len() * classes);
    for &y in labels {
        data.extend(smooth_labels(y, alpha, classes)?);
    }
    Tensor::matrix(labels.len(), classes, data)
}

/// `-Σ_k t[k]·ln p[k]` per row.
pub fn soft_ce(tape: &mut Tape, probs: Var, targets: &Tensor) -> Result<Var> {
    if tape.shape(probs) != targets.shape() {
        return Err(Error::dim("soft_ce", tape.shape(probs), targets.shape()));
    }
    let p = tape.clamp_min(probs, PROB_FLOOR)?;
    let lp = tape.log(p)?;
    let t = tape.constant(targets.clone());
    let w = tape.mul(lp, t)?;
    let s = tape.sum_axis(w, 1)?;
    tape.neg(s)
}

/// `l_m + λ·l_c`.
pub fn soft_adv_loss(tape: &mut Tape, l_m: Var, l_c: Var, lambda: f64) -> Result<Var> {
    let c = tape.mul_scalar(l_c, lambda)?;
    tape.add(l_m, c)
}

/// `l_m - λ·l_c`.
pub fn adapt_adv_loss(tape: &mut Tape, l_m: Var, l_c: Var, lambda: f64) -> Result<Var> {
    let c = tape.mul_scalar(l_c, lambda)?;
    tape.sub(l_m, c)
}

/// `-tanh(l_c - l_thresh)·λ0`.
pub fn lambda_schedule(l_c: f64, l_thresh: f64, lambda0: f64) -> Result<f64> {
    if !(lambda0 > 0.0) {
        return Err(Error::Parameter(format!("lambda0 must be positive, got {lambda0}")));
    }
    Ok(-(l_c - l_thresh).tanh() * lambda0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdversarialMode {
    SoftAdv,
    AdaptAdv,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdversarialSchedule {
    pub mode: AdversarialMode,
    pub lambda0: f64,
    pub l_thresh: f64,
    pub lambda: f64,
}

impl AdversarialSchedule {
    /// Soft mode holds `λ = λ0`; adaptive mode starts at 0 until the first
    /// [`AdversarialSchedule::update`].
    pub fn new(mode: AdversarialMode, lambda0: f64, l_thresh: f64) -> Result<Self> {
        if !(lambda0 > 0.0 && lambda0 <= 1.0) {
            return Err(Error::Parameter(format!("lambda0 must lie in (0, 1], got {lambda0}")));
        }
        let lambda = match mode {
            AdversarialMode::SoftAdv => lambda0,
            AdversarialMode::AdaptAdv => 0.0,
        };
        Ok(AdversarialSchedule {
            mode,
            lambda0,
            l_thresh,
            lambda,
        })
    }

    /// Feeds the epoch-mean classification loss; returns the new λ.
    pub fn update(&mut self, mean_l_c: f64) -> Result<f64> {
        if self.mode == AdversarialMode::AdaptAdv {
            self.lambda = lambda_schedule(mean_l_c, self.l_thresh, self.lambda0)?;
        }
        Ok(self.lambda)
    }
}

/// Loss values measured before the update.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct AdvStep {
    pub l_m: Option<f64>,
    pub l_c: f64,
}

fn classes_ok(labels: &[usize], clf: &Classifier, x: &Tensor) -> Result<()> {
    if labels.is_empty() || x.ndim() != 2 || x.rows() == 0 {
        return Err(Error::Contract("empty batch".into()));
    }
    check_labels(labels, clf.classes(), x.rows())
}

/// Joint step on `l_m + λ·soft_ce` over extractor, embedding, and
/// classifier with fixed `λ`.
#[allow(clippy::too_many_arguments)]
pub fn train_step_soft<R: Rng + ?Sized>(
    model: &mut MetricModel,
    classifier: &mut Classifier,
    opt_model: &mut Adam,
    opt_classifier: &mut Adam,
    x: &Tensor,
    labels: &[usize],
    tuples: &Tuples,
    config: &MetricLossConfig,
    smoothing: f64,
    lambda: f64,
    rng: &mut R,
) -> Result<AdvStep> {
    classes_ok(labels, classifier, x)?;
    let mut tape = Tape::new();
    let mv = model.bind(&mut tape, true);
    let cv = classifier.bind(&mut tape, true);
    let xv = tape.constant(x.clone());
    let out = model.forward(&mut tape, &mv, xv)?;
    let probs = classifier.forward(&mut tape, &cv, out.features, true, rng)?;
    let targets = smoothed_targets(labels, smoothing, classifier.classes())?;
    let lc = soft_ce(&mut tape, probs, &targets)?;
    let l_c = tape.mean(lc)?;
    let mut step = AdvStep {
        l_m: None,
        l_c: tape.value(l_c).item()?,
    };
    let loss = if tuples.is_empty() {
        tape.mul_scalar(l_c, lambda)?
    } else {
        let l_m = metric_loss(&mut tape, out.embeddings, labels, tuples, config, mv.proxies)?;
        step.l_m = Some(tape.value(l_m).item()?);
        soft_adv_loss(&mut tape, l_m, l_c, lambda)?
    };
    let mut grads = tape.backward(loss)?;
    let like: Vec<&Tensor> = model.params().into_iter().map(|(_, t)| t).collect();
    let gm = collect_grads(&mut grads, &mv.vars(), &like)?;
    let like: Vec<&Tensor> = classifier.params().into_iter().map(|(_, t)| t).collect();
    let gc = collect_grads(&mut grads, &cv.vars(), &like)?;
    opt_model.step(model.params_mut(), &gm)?;
    opt_classifier.step(classifier.params_mut(), &gc)?;
    Ok(step)
}

/// Adaptive adversarial step.
///
/// Phase 1 updates extractor and embedding on `l_m + mean l_c` with the
/// classifier frozen and its input routed through a gradient-reversal layer,
/// so the extractor sees `-λ·∇l_c`. Phase 2 recomputes features with the
/// updated extractor and updates the classifier alone on `λ·mean l_c`
/// (plain `mean l_c` while `λ ≤ 0`).
#[allow(clippy::too_many_arguments)]
pub fn train_step_adversarial<R: Rng + ?Sized>(
    model: &mut MetricModel,
    classifier: &mut Classifier,
    opt_model: &mut Adam,
    opt_classifier: &mut Adam,
    x: &Tensor,
    labels: &[usize],
    tuples: &Tuples,
    config: &MetricLossConfig,
    schedule: &AdversarialSchedule,
    rng: &mut R,
) -> Result<AdvStep> {
    if schedule.mode != AdversarialMode::AdaptAdv {
        return Err(Error::Contract("adversarial step requires the adaptive schedule".into()));
    }
    classes_ok(labels, classifier, x)?;
    let lambda = schedule.lambda;

    let mut tape = Tape::new();
    let mv = model.bind(&mut tape, true);
    let cv = classifier.bind(&mut tape, false);
    let xv = tape.constant(x.clone());
    let out = model.forward(&mut tape, &mv, xv)?;
    let reversed = tape.grad_reverse(out.features, lambda)?;
    let probs = classifier.forward(&mut tape, &cv, reversed, true, rng)?;
    let lc = cross_entropy(&mut tape, probs, labels)?;
    let l_c = tape.mean(lc)?;
    let mut step = AdvStep {
        l_m: None,
        l_c: tape.value(l_c).item()?,
    };
    let loss = if tuples.is_empty() {
        l_c
    } else {
        let l_m = metric_loss(&mut tape, out.embeddings, labels, tuples, config, mv.proxies)?;
        step.l_m = Some(tape.value(l_m).item()?);
        tape.add(l_m, l_c)?
    };
    let mut grads = tape.backward(loss)?;
    let like: Vec<&Tensor> = model.params().into_iter().map(|(_, t)| t).collect();
    let gm = collect_grads(&mut grads, &mv.vars(), &like)?;
    opt_model.step(model.params_mut(), &gm)?;

    let features = model.extractor.features(x)?;
    let mut tape = Tape::new();
    let cv = classifier.bind(&mut tape, true);
    let fv = tape.constant(features);
    let probs = classifier.forward(&mut tape, &cv, fv, true, rng)?;
    let lc = cross_entropy(&mut tape, probs, labels)?;
    let l_c = tape.mean(lc)?;
    let scale = if lambda > 0.0 { lambda } else { 1.0 };
    let loss = tape.mul_scalar(l_c, scale)?;
    let mut grads = tape.backward(loss)?;
    let like: Vec<&Tensor> = classifier.params().into_iter().map(|(_, t)| t).collect();
    let gc = collect_grads(&mut grads, &cv.vars(), &like)?;
    opt_classifier.step(classifier.params_mut(), &gc)?;
    Ok(step)
}

/// Mean classification loss with hard labels over features of `x`,
/// dropout off.
pub fn mean_classification_loss(
    model: &MetricModel,
    classifier: &Classifier,
    x: &Tensor,
    labels: &[usize],
) -> Result<f64> {
    classes_ok(labels, classifier, x)?;
    let f = model.extractor.features(x)?;
    let mut tape = Tape::new();
    let cv = classifier.bind(&mut tape, false);
    let fv = tape.constant(f);
    // Dropout is off, so the generator is never drawn from.
    let mut idle = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let probs = classifier.forward(&mut tape, &cv, fv, false, &mut idle)?;
    let lc = cross_entropy(&mut tape, probs, labels)?;
    let m = tape.mean(lc)?;
    tape.value(m).item()
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::extractor::AttentionKind;
    use crate::gradcore::{grad_check, grad_check_many};
    use crate::losses::{mine_batch, minimize_metric, LossKind, Mining};
    use crate::model::tests::tiny_extractor;
    use crate::nn::glorot_uniform;

    fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        glorot_uniform(rng, 1, 1, shape).unwrap()
    }

    #[test]
    fn classifier_outputs_probabilities() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut clf = Classifier::new(5, 3, 4, 0.1, &mut rng).unwrap();
        let f = rand_t(&mut rng, &[6, 5]);
        for training in [false, true] {
            let p = clf.classify(&f, training, &mut rng).unwrap();
            for r in 0..6 {
                assert!((p.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
        let a = clf.classify(&f, false, &mut rng).unwrap();
        let b = clf.classify(&f, false, &mut rng).unwrap();
        assert_eq!(a, b);
        clf.output.weight = Tensor::zeros([3, 4]).unwrap();
        let p = clf.classify(&f, false, &mut rng).unwrap();
        assert!(p.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
        assert!(matches!(
            clf.classify(&rand_t(&mut rng, &[2, 4]), false, &mut rng),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn cross_entropy_examples() {
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::matrix(2, 4, vec![0.0, 1.0, 0.0, 0.0, 0.25, 0.25, 0.25, 0.25]).unwrap());
        let l = cross_entropy(&mut tape, p, &[1, 2]).unwrap();
        assert_eq!(tape.value(l).data()[0], 0.0);
        assert!((tape.value(l).data()[1] - 1.38629436111989062).abs() < 1e-15);
        assert!(matches!(cross_entropy(&mut tape, p, &[1, 4]), Err(Error::Contract(_))));
    }

    /// d CE(softmax(z)) / dz = softmax(z) - onehot.
    #[test]
    fn cross_entropy_logit_gradient_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10 {
            let mut tape = Tape::new();
            let z = tape.param(rand_t(&mut rng, &[3, 5]));
            let p = tape.softmax(z, 1).unwrap();
            let l = cross_entropy(&mut tape, p, &[0, 4, 2]).unwrap();
            let s = tape.sum(l).unwrap();
            let g = tape.backward(s).unwrap();
            let probs = tape.value(p).clone();
            for (r, y) in [0usize, 4, 2].into_iter().enumerate() {
                for k in 0..5 {
                    let expect = probs.row(r)[k] - if k == y { 1.0 } else { 0.0 };
                    assert!((g.get(z).unwrap().row(r)[k] - expect).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn smoothing_examples() {
        assert_eq!(smooth_labels(1, 0.0, 3).unwrap(), vec![0.0, 1.0, 0.0]);
        let v = smooth_labels(0, 0.15, 3).unwrap();
        for (a, b) in v.iter().zip([0.9, 0.05, 0.05]) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(matches!(smooth_labels(0, 1.0, 3), Err(Error::Parameter(_))));
        assert!(matches!(smooth_labels(0, -0.1, 3), Err(Error::Parameter(_))));
    }

    #[test]
    fn soft_ce_examples() {
        let mut tape = Tape::new();
        let t = Tensor::matrix(1, 3, vec![0.9, 0.05, 0.05]).unwrap();
        let p = tape.constant(t.clone());
        let l = soft_ce(&mut tape, p, &t).unwrap();
        assert!((tape.value(l).data()[0] - 0.394397691447442770).abs() < 1e-14);

        let probs = Tensor::matrix(1, 3, vec![0.2, 0.5, 0.3]).unwrap();
        let p = tape.constant(probs);
        let onehot = Tensor::matrix(1, 3, vec![0.0, 1.0, 0.0]).unwrap();
        let a = soft_ce(&mut tape, p, &onehot).unwrap();
        let b = cross_entropy(&mut tape, p, &[1]).unwrap();
        assert_eq!(tape.value(a).data(), tape.value(b).data());
    }

    #[test]
    fn losses_through_classifier_pass_grad_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut clf = Classifier::new(4, 3, 3, 0.0, &mut rng).unwrap();
        clf.activation = Activation::Tanh;
        let targets = smoothed_targets(&[0, 2], 0.15, 3).unwrap();
        for _ in 0..10 {
            let f = rand_t(&mut rng, &[2, 4]);
            let mut inputs: Vec<Tensor> = clf.params().into_iter().map(|(_, t)| t.clone()).collect();
            inputs.push(f);
            let err = grad_check_many(
                |tape, v| {
                    let (pv, fv) = v.split_at(v.len() - 1);
                    let cv = clf.bind_to(pv);
                    let mut r = ChaCha8Rng::seed_from_u64(0);
                    let p = clf.forward(tape, &cv, fv[0], false, &mut r)?;
                    let a = soft_ce(tape, p, &targets)?;
                    let b = cross_entropy(tape, p, &[1, 0])?;
                    let s = tape.add(a, b)?;
                    tape.sum(s)
                },
                &inputs,
                1e-6,
            )
            .unwrap();
            assert!(err < 1e-4, "{err}");
        }
    }

    /// Finite differences see the identity forward pass, so the plain
    /// branch is checked numerically and the reversed branch must equal -λ
    /// times it.
    #[test]
    fn grl_composition_grad_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut clf = Classifier::new(4, 3, 3, 0.0, &mut rng).unwrap();
        clf.activation = Activation::Tanh;
        for lambda in [-1.0, 0.0, 0.5, 1.0] {
            let x = rand_t(&mut rng, &[3, 4]);
            let branch = |tape: &mut Tape, x: Var, reverse: bool| -> Result<Var> {
                let cv = clf.bind(tape, false);
                let f = if reverse { tape.grad_reverse(x, lambda)? } else { x };
                let mut r = ChaCha8Rng::seed_from_u64(0);
                let p = clf.forward(tape, &cv, f, false, &mut r)?;
                let l = cross_entropy(tape, p, &[0, 1, 2])?;
                tape.mean(l)
            };
            let err = grad_check(|tape, x| branch(tape, x, false), &x, 1e-6).unwrap();
            assert!(err < 1e-4, "{err}");
            let grad = |reverse: bool| {
                let mut tape = Tape::new();
                let xv = tape.param(x.clone());
                let l = branch(&mut tape, xv, reverse).unwrap();
                tape.backward(l).unwrap().get(xv).unwrap().clone()
            };
            let (plain, rev) = (grad(false), grad(true));
            for (r, p) in rev.data().iter().zip(plain.data()) {
                assert_eq!(*r, -lambda * p);
            }
        }
    }

    #[test]
    fn soft_adv_examples() {
        let mut tape = Tape::new();
        let lm = tape.constant(Tensor::scalar(0.2));
        let lc = tape.constant(Tensor::scalar(0.3));
        let a = soft_adv_loss(&mut tape, lm, lc, 0.0).unwrap();
        assert_eq!(tape.value(a).data()[0], 0.2);
        let b = soft_adv_loss(&mut tape, lm, lc, 1.0).unwrap();
        assert!((tape.value(b).data()[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn schedule_examples() {
        assert_eq!(lambda_schedule(1.5, 1.5, 1.0).unwrap(), 0.0);
        assert!((lambda_schedule(0.5, 1.5, 1.0).unwrap() - 0.761594155955764888).abs() < 1e-15);
        assert!((lambda_schedule(1e6, 1.5, 0.5).unwrap() + 0.5).abs() < 1e-15);
        assert!((lambda_schedule(0.0, 1.5, 0.5).unwrap() - 1.5f64.tanh() * 0.5).abs() < 1e-15);
        assert!(lambda_schedule(0.0, 1.5, 0.0).is_err());

        let mut s = AdversarialSchedule::new(AdversarialMode::AdaptAdv, 0.5, 1.5).unwrap();
        assert_eq!(s.lambda, 0.0);
        assert_eq!(s.update(0.5).unwrap(), -(0.5f64 - 1.5).tanh() * 0.5);
        let mut soft = AdversarialSchedule::new(AdversarialMode::SoftAdv, 0.5, 1.5).unwrap();
        assert_eq!(soft.update(0.1).unwrap(), 0.5);
    }

    struct Setup {
        model: MetricModel,
        clf: Classifier,
        x: Tensor,
        labels: Vec<usize>,
        cfg: MetricLossConfig,
        tuples: Tuples,
    }

    fn setup(seed: u64, dropout: f64) -> Setup {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = MetricModel::new(tiny_extractor(6, AttentionKind::AdditiveSimple), 4, true, None, &mut rng).unwrap();
        let clf = Classifier::new(model.feature_dim(), 4, 3, dropout, &mut rng).unwrap();
        let x = rand_t(&mut rng, &[9, 6]);
        let labels: Vec<usize> = (0..9).map(|i| i % 3).collect();
        let cfg = MetricLossConfig {
            mining: Mining::Easy,
            margin: 0.3,
            ..MetricLossConfig::new(LossKind::TripletHinge)
        };
        let tuples = mine_batch(&model, &x, &labels, &cfg, &mut rng).unwrap().tuples;
        Setup {
            model,
            clf,
            x,
            labels,
            cfg,
            tuples,
        }
    }

    fn adam_for<M: Module>(m: &M, lr: f64) -> Adam {
        Adam::new(vec![lr; m.params().len()]).unwrap()
    }

    #[test]
    fn lambda_zero_phase_one_equals_metric_step() {
        let s = setup(4, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let sched = AdversarialSchedule::new(AdversarialMode::AdaptAdv, 0.5, 1.5).unwrap();
        assert_eq!(sched.lambda, 0.0);
        let (mut m1, mut c1) = (s.model.clone(), s.clf.clone());
        let (mut om, mut oc) = (adam_for(&m1, 1e-3), adam_for(&c1, 1e-3));
        train_step_adversarial(&mut m1, &mut c1, &mut om, &mut oc, &s.x, &s.labels, &s.tuples, &s.cfg, &sched, &mut rng)
            .unwrap();
        let mut m2 = s.model.clone();
        let mut om2 = adam_for(&m2, 1e-3);
        minimize_metric(&mut m2, &mut om2, &s.x, &s.labels, &s.tuples, &s.cfg).unwrap();
        assert_eq!(m1, m2);
    }

    #[test]
    fn phases_freeze_the_other_block() {
        let s = setup(5, 0.1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut sched = AdversarialSchedule::new(AdversarialMode::AdaptAdv, 0.5, 1.5).unwrap();
        sched.update(0.8).unwrap();
        let (mut m, mut c) = (s.model.clone(), s.clf.clone());
        let (mut om, mut oc) = (adam_for(&m, 1e-3), adam_for(&c, 1e-3));
        train_step_adversarial(&mut m, &mut c, &mut om, &mut oc, &s.x, &s.labels, &s.tuples, &s.cfg, &sched, &mut rng)
            .unwrap();
        assert_ne!(m, s.model);
        assert_ne!(c, s.clf);

        // Replay: the classifier after the full step must equal a lone
        // classifier update on features of the phase-1 model, so phase 1
        // did not touch it; the model must match the first run.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (mut m2, mut c2) = (s.model.clone(), s.clf.clone());
        let (mut om2, mut oc2) = (adam_for(&m2, 1e-3), adam_for(&c2, 1e-3));
        let snapshot_c = c2.clone();
        let r = train_step_adversarial(
            &mut m2, &mut c2, &mut om2, &mut oc2, &s.x, &s.labels, &s.tuples, &s.cfg, &sched, &mut rng,
        );
        assert!(r.is_ok());
        // Phase-2 reference: classifier step on features of the updated model.
        let feats = m2.extractor.features(&s.x).unwrap();
        let mut c_ref = snapshot_c.clone();
        let mut oc_ref = adam_for(&c_ref, 1e-3);
        let mut tape = Tape::new();
        let cv = c_ref.bind(&mut tape, true);
        let fv = tape.constant(feats);
        // Phase 1 consumed one dropout mask of the same size.
        let mut rr = ChaCha8Rng::seed_from_u64(0);
        let dummy = tape.constant(Tensor::zeros([9, 4]).unwrap());
        tape.dropout(dummy, 0.1, true, &mut rr).unwrap();
        let p = c_ref.forward(&mut tape, &cv, fv, true, &mut rr).unwrap();
        let l = cross_entropy(&mut tape, p, &s.labels).unwrap();
        let l = tape.mean(l).unwrap();
        let l = tape.mul_scalar(l, sched.lambda).unwrap();
        let mut g = tape.backward(l).unwrap();
        let like: Vec<&Tensor> = c_ref.params().into_iter().map(|(_, t)| t).collect();
        let gc = collect_grads(&mut g, &cv.vars(), &like).unwrap();
        oc_ref.step(c_ref.params_mut(), &gc).unwrap();
        assert_eq!(c2, c_ref);
        assert_eq!(m2, m);
    }

    /// R_adv = mean l_m - λ·mean l_c does not increase after phase 1 with a
    /// small step on a smooth instance.
    #[test]
    fn phase_one_descends_on_r_adv() {
        let s = setup(6, 0.0);
        let mut sched = AdversarialSchedule::new(AdversarialMode::AdaptAdv, 1.0, 1.5).unwrap();
        sched.update(0.9).unwrap();
        let r_adv = |m: &MetricModel| {
            let mut tape = Tape::new();
            let e = tape.constant(m.embed(&s.x).unwrap());
            let lm = metric_loss(&mut tape, e, &s.labels, &s.tuples, &s.cfg, None).unwrap();
            let lm = tape.value(lm).item().unwrap();
            lm - sched.lambda * mean_classification_loss(m, &s.clf, &s.x, &s.labels).unwrap()
        };
        let before = r_adv(&s.model);
        let (mut m, mut c) = (s.model.clone(), s.clf.clone());
        let mut om = adam_for(&m, 1e-3);
        let mut oc = adam_for(&c, 1e-3);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        train_step_adversarial(&mut m, &mut c, &mut om, &mut oc, &s.x, &s.labels, &s.tuples, &s.cfg, &sched, &mut rng)
            .unwrap();
        let after = r_adv(&m);
        assert!(after <= before + 1e-6, "{before} -> {after}");
    }

    /// Through the classifier branch, the GRL gradient on extractor
    /// parameters equals -λ times the plain gradient of mean l_c.
    #[test]
    fn reversed_branch_gradient_matches_two_pass() {
        let s = setup(7, 0.0);
        let lambda = 0.7;
        let branch = |reverse: bool| {
            let mut tape = Tape::new();
            let mv = s.model.bind(&mut tape, true);
            let cv = s.clf.bind(&mut tape, false);
            let xv = tape.constant(s.x.clone());
            let out = s.model.forward(&mut tape, &mv, xv).unwrap();
            let f = if reverse {
                tape.grad_reverse(out.features, lambda).unwrap()
            } else {
                out.features
            };
            let mut r = ChaCha8Rng::seed_from_u64(0);
            let p = s.clf.forward(&mut tape, &cv, f, false, &mut r).unwrap();
            let l = cross_entropy(&mut tape, p, &s.labels).unwrap();
            let l = tape.mean(l).unwrap();
            let mut g = tape.backward(l).unwrap();
            let like: Vec<&Tensor> = s.model.params().into_iter().map(|(_, t)| t).collect();
            collect_grads(&mut g, &mv.vars(), &like).unwrap()
        };
        let rev = branch(true);
        let plain = branch(false);
        for (a, b) in rev.iter().zip(&plain) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x + lambda * y).abs() <= 1e-12 * (1.0 + y.abs()));
            }
        }
    }

    #[test]
    fn soft_step_updates_everything() {
        let s = setup(8, 0.1);
        let (mut m, mut c) = (s.model.clone(), s.clf.clone());
        let (mut om, mut oc) = (adam_for(&m, 1e-3), adam_for(&c, 1e-3));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = train_step_soft(
            &mut m, &mut c, &mut om, &mut oc, &s.x, &s.labels, &s.tuples, &s.cfg, 0.15, 0.5, &mut rng,
        )
        .unwrap();
        assert!(r.l_m.is_some() && r.l_c > 0.0);
        assert_ne!(m, s.model);
        assert_ne!(c, s.clf);
        let sched = AdversarialSchedule::new(AdversarialMode::SoftAdv, 0.5, 1.5).unwrap();
        assert!(train_step_adversarial(
            &mut m, &mut c, &mut om, &mut oc, &s.x, &s.labels, &s.tuples, &s.cfg, &sched, &mut rng
        )
        .is_err());
        assert!(train_step_soft(
            &mut m, &mut c, &mut om, &mut oc, &s.x, &[0, 1], &s.tuples, &s.cfg, 0.15, 0.5, &mut rng
        )
        .is_err());
    }
}
