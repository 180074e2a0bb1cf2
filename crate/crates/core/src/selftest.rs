//! Built-in verification: finite-difference gradient checks for every
//! differentiable component and small exhaustive oracles for the rest.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::adversary::{cross_entropy, lambda_schedule, smoothed_targets, soft_ce, Classifier};
use crate::error::Result;
use crate::extractor::{AttentionKind, BackboneConfig, Extractor, ExtractorConfig, MultidimAxis, StageShape};
use crate::gradcore::{grad_check_many, Tape, Tensor, Var};
use crate::losses::{angular, contrastive, energy_confusion, npair, proxy_nca, triplet_hinge};
use crate::metrics::{nmi, recall_at_k};
use crate::nn::{Activation, Module};
use crate::tuples::{sample_hard, sample_semihard, FeatureBatch};

pub const GRAD_TOL: f64 = 1e-4;
const EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    /// Largest error observed (0 for exact checks that passed).
    pub worst: f64,
    pub passed: bool,
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{tag} {} (worst {:.3e})", self.name, self.worst)
    }
}

fn graded(name: impl Into<String>, worst: f64) -> Check {
    Check {
        name: name.into(),
        worst,
        passed: worst < GRAD_TOL,
    }
}

fn exact(name: impl Into<String>, mismatches: usize) -> Check {
    Check {
        name: name.into(),
        worst: mismatches as f64,
        passed: mismatches == 0,
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("shape matches data")
}

pub fn small_extractor(kind: AttentionKind, axis: MultidimAxis, input_dim: usize) -> ExtractorConfig {
    ExtractorConfig {
        backbone: BackboneConfig {
            input_dim,
            stages: vec![StageShape::new(2, 1, 3), StageShape::new(3, 2, 1)],
            hidden_dim: 3,
            activation: Activation::Tanh,
        },
        attention: kind,
        sigma: Activation::Tanh,
        multidim_axis: axis,
        include_u: true,
    }
}

fn extractor_cases() -> Vec<(String, AttentionKind, MultidimAxis)> {
    let mut v: Vec<_> = AttentionKind::ALL
        .iter()
        .map(|&k| (format!("extractor/{k:?}"), k, MultidimAxis::Features))
        .collect();
    v.push(("extractor/Multidim(locations)".into(), AttentionKind::Multidim, MultidimAxis::Locations));
    v
}

/// Central-difference gradient of a scalar function of several tensors.
fn numeric_grad<F>(f: &F, inputs: &[Tensor]) -> Result<Vec<Tensor>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |points: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = points.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        tape.value(out).item()
    };
    let mut probe = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for k in 0..inputs.len() {
        let mut g = Tensor::zeros(inputs[k].shape().to_vec())?;
        for i in 0..inputs[k].numel() {
            let x0 = inputs[k].data()[i];
            probe[k].data_mut()[i] = x0 + EPS;
            let up = eval(&probe)?;
            probe[k].data_mut()[i] = x0 - EPS;
            let down = eval(&probe)?;
            probe[k].data_mut()[i] = x0;
            g.data_mut()[i] = (up - down) / (2.0 * EPS);
        }
        out.push(g);
    }
    Ok(out)
}

/// Finite-difference checks at `points` random draws per component.
pub fn gradient_suite(points: usize, seed: u64) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut checks = Vec::new();

    for (name, kind, axis) in extractor_cases() {
        let mut worst = 0.0_f64;
        for _ in 0..points {
            let ex = Extractor::new(small_extractor(kind, axis, 4), &mut rng)?;
            let x = uniform(&mut rng, &[2, 4]);
            let probe = uniform(&mut rng, &[2, ex.feature_dim()]);
            let mut inputs: Vec<Tensor> = ex.params().into_iter().map(|(_, t)| t.clone()).collect();
            inputs.push(x);
            let err = grad_check_many(
                |tape, vars| {
                    let (pv, xv) = vars.split_at(vars.len() - 1);
                    let bound = ex.bind_to(pv);
                    let out = ex.forward(tape, &bound, xv[0])?;
                    let p = tape.constant(probe.clone());
                    let m = tape.mul(out.features, p)?;
                    tape.sum(m)
                },
                &inputs,
                EPS,
            )?;
            worst = worst.max(err);
        }
        checks.push(graded(name, worst));
    }

    let (t, k, d) = (3, 2, 4);
    let mut run = |name: &str, rng: &mut ChaCha8Rng, f: &dyn Fn(&mut ChaCha8Rng) -> Result<f64>| -> Result<()> {
        let mut worst = 0.0_f64;
        for _ in 0..points {
            worst = worst.max(f(rng)?);
        }
        checks.push(graded(name, worst));
        Ok(())
    };

    run("loss/contrastive", &mut rng, &|rng| {
        let y: Vec<f64> = (0..t).map(|i| (i % 2) as f64).collect();
        grad_check_many(
            |tape, v| {
                let l = contrastive(tape, v[0], v[1], &y, 2.0)?;
                tape.sum(l)
            },
            &[uniform(rng, &[t, d]), uniform(rng, &[t, d])],
            EPS,
        )
    })?;
    run("loss/triplet_hinge", &mut rng, &|rng| {
        grad_check_many(
            |tape, v| {
                let l = triplet_hinge(tape, v[0], v[1], v[2], 0.5)?;
                tape.sum(l)
            },
            &[uniform(rng, &[t, d]), uniform(rng, &[t, d]), uniform(rng, &[t, d])],
            EPS,
        )
    })?;
    run("loss/npair", &mut rng, &|rng| {
        grad_check_many(
            |tape, v| {
                let l = npair(tape, v[0], v[1], v[2])?;
                tape.sum(l)
            },
            &[uniform(rng, &[t, d]), uniform(rng, &[t, d]), uniform(rng, &[t, k, d])],
            EPS,
        )
    })?;
    run("loss/angular", &mut rng, &|rng| {
        grad_check_many(
            |tape, v| {
                let l = angular(tape, v[0], v[1], v[2], 45.0)?;
                tape.sum(l)
            },
            &[uniform(rng, &[t, d]), uniform(rng, &[t, d]), uniform(rng, &[t, k, d])],
            EPS,
        )
    })?;
    run("loss/proxy_nca", &mut rng, &|rng| {
        let labels = [0, 2, 1, 2];
        grad_check_many(
            |tape, v| {
                let l = proxy_nca(tape, v[0], &labels, v[1])?;
                tape.sum(l)
            },
            &[uniform(rng, &[4, d]), uniform(rng, &[3, d])],
            EPS,
        )
    })?;
    run("loss/energy_confusion", &mut rng, &|rng| {
        let labels = [0, 1, 0, 2, 1];
        grad_check_many(|tape, v| energy_confusion(tape, v[0], &labels, 0, 1), &[uniform(rng, &[5, d])], EPS)
    })?;
    run("loss/soft_ce", &mut rng, &|rng| {
        let targets = smoothed_targets(&[0, 2, 1], 0.15, 3)?;
        grad_check_many(
            |tape, v| {
                let p = tape.softmax(v[0], 1)?;
                let l = soft_ce(tape, p, &targets)?;
                tape.sum(l)
            },
            &[uniform(rng, &[3, 3])],
            EPS,
        )
    })?;
    run("classifier", &mut rng, &|rng| {
        let clf = Classifier::new(d, 3, 3, 0.1, rng)?;
        let labels = [0, 2, 1];
        let mut inputs: Vec<Tensor> = clf.params().into_iter().map(|(_, t)| t.clone()).collect();
        inputs.push(uniform(rng, &[3, d]));
        grad_check_many(
            |tape, v| {
                let (pv, fv) = v.split_at(v.len() - 1);
                let bound = clf.bind_to(pv);
                let mut off = ChaCha8Rng::seed_from_u64(0);
                let p = clf.forward(tape, &bound, fv[0], false, &mut off)?;
                let l = cross_entropy(tape, p, &labels)?;
                tape.mean(l)
            },
            &inputs,
            EPS,
        )
    })?;
    run("grl_composition", &mut rng, &|rng| grl_composition_error(rng, d))?;
    Ok(checks)
}

/// `L(f, θ) = Σ f⊙w + mean CE(clf(GRL_λ(f)))`: the tape gradient must equal
/// the finite-difference gradient of the plain branch minus `λ` times that
/// of the classifier branch.
fn grl_composition_error(rng: &mut ChaCha8Rng, d: usize) -> Result<f64> {
    let clf = Classifier::new(d, 3, 3, 0.1, rng)?;
    let labels = [1, 0, 2];
    let w = uniform(rng, &[3, d]);
    let lambda = rng.random_range(-1.0..1.0);
    let np = clf.params().len();
    let mut inputs: Vec<Tensor> = clf.params().into_iter().map(|(_, t)| t.clone()).collect();
    inputs.push(uniform(rng, &[3, d]));

    let branch = |tape: &mut Tape, v: &[Var], rev: Option<f64>| -> Result<Var> {
        let (pv, fv) = v.split_at(v.len() - 1);
        let bound = clf.bind_to(pv);
        let f = match rev {
            Some(l) => tape.grad_reverse(fv[0], l)?,
            None => fv[0],
        };
        let mut off = ChaCha8Rng::seed_from_u64(0);
        let p = clf.forward(tape, &bound, f, false, &mut off)?;
        let l = cross_entropy(tape, p, &labels)?;
        tape.mean(l)
    };
    let plain = |tape: &mut Tape, v: &[Var]| -> Result<Var> {
        let wv = tape.constant(w.clone());
        let m = tape.mul(v[v.len() - 1], wv)?;
        tape.sum(m)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let a = plain(&mut tape, &vars)?;
    let b = branch(&mut tape, &vars, Some(lambda))?;
    let total = tape.add(a, b)?;
    let grads = tape.backward(total)?;

    let g_plain = numeric_grad(&plain, &inputs)?;
    let g_branch = numeric_grad(&|t: &mut Tape, v: &[Var]| branch(t, v, None), &inputs)?;
    let mut worst = 0.0_f64;
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).expect("tracked leaf");
        let scale = if i == np { -lambda } else { 1.0 };
        for j in 0..analytic.numel() {
            let num = g_plain[i].data()[j] + scale * g_branch[i].data()[j];
            let a = analytic.data()[j];
            worst = worst.max((a - num).abs() / a.abs().max(1.0));
        }
    }
    Ok(worst)
}

fn naive_dist(x: &Tensor, i: usize, j: usize) -> f64 {
    x.row(i).iter().zip(x.row(j)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
}

fn brute_recall(x: &Tensor, labels: &[usize], q: usize, k: usize) -> bool {
    let mut order: Vec<(f64, usize)> = (0..labels.len())
        .filter(|&j| j != q)
        .map(|j| (naive_dist(x, q, j), j))
        .collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    order.iter().take(k).any(|&(_, j)| labels[j] == labels[q])
}

/// Exact checks of the non-differentiable components on small instances.
pub fn oracle_suite(draws: usize, seed: u64) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut checks = Vec::new();

    let mut bad = 0;
    for lambda in [-1.0, 0.0, 0.5, 1.0] {
        let x = uniform(&mut rng, &[3, 4]);
        let up = uniform(&mut rng, &[3, 4]);
        let mut tape = Tape::new();
        let xv = tape.param(x.clone());
        let r = tape.grad_reverse(xv, lambda)?;
        if tape.value(r) != &x {
            bad += 1;
        }
        let uv = tape.constant(up.clone());
        let m = tape.mul(r, uv)?;
        let s = tape.sum(m)?;
        let g = tape.backward(s)?;
        let got = g.get(xv).expect("tracked");
        bad += got.data().iter().zip(up.data()).filter(|(g, u)| **g != -lambda * **u).count();
    }
    checks.push(exact("grl_contract", bad));

    let mut bad = 0;
    for i in 0..100 {
        let l_c = 3.0 * i as f64 / 99.0;
        let got = lambda_schedule(l_c, 1.5, 0.5)?;
        let e2 = ((l_c - 1.5) * 2.0).exp();
        let want = -0.5 * (e2 - 1.0) / (e2 + 1.0);
        if (got - want).abs() > 1e-15 || got.abs() > 0.5 || (l_c < 1.5 && got <= 0.0) || (l_c > 1.5 && got >= 0.0) {
            bad += 1;
        }
    }
    if lambda_schedule(1.5, 1.5, 0.5)? != 0.0 {
        bad += 1;
    }
    checks.push(exact("lambda_schedule", bad));

    let mut worst = 0.0_f64;
    for c in 2..8 {
        let t = smoothed_targets(&(0..c).collect::<Vec<_>>(), 0.15, c)?;
        for r in 0..c {
            worst = worst.max((t.row(r).iter().sum::<f64>() - 1.0).abs());
            let floor = t.row(r).iter().copied().fold(f64::INFINITY, f64::min);
            worst = worst.max((floor - 0.15 / c as f64).abs());
        }
    }
    checks.push(Check {
        name: "label_smoothing".into(),
        worst,
        passed: worst <= 1e-12,
    });

    let mut worst = 0.0_f64;
    for (_, kind, axis) in extractor_cases() {
        let ex = Extractor::new(small_extractor(kind, axis, 4), &mut rng)?;
        let x: Vec<f64> = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
        for w in ex.attention_weights(&x)? {
            let s = w.shape().to_vec();
            let sums: Vec<f64> = match (kind.is_scalar(), axis) {
                (true, _) => vec![w.data().iter().sum()],
                (false, MultidimAxis::Features) => w.data().chunks(s[2]).map(|c| c.iter().sum()).collect(),
                (false, MultidimAxis::Locations) => (0..s[2])
                    .map(|f| (0..s[1]).map(|l| w.data()[l * s[2] + f]).sum())
                    .collect(),
            };
            for v in sums {
                worst = worst.max((v - 1.0).abs());
            }
        }
    }
    checks.push(Check {
        name: "attention_normalization".into(),
        worst,
        passed: worst <= 1e-12,
    });

    let mut bad = 0;
    for _ in 0..draws {
        let n = rng.random_range(2..=12);
        let c = rng.random_range(1..=4);
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
        let x = uniform(&mut rng, &[n, 2]);
        let ks: Vec<usize> = (1..n).collect();
        let got = recall_at_k(&x, &labels, &ks)?;
        for &k in &ks {
            let want = (0..n).filter(|&q| brute_recall(&x, &labels, q, k)).count() as f64 / n as f64;
            if got[&k] != want {
                bad += 1;
            }
        }
        let mixed = labels.iter().any(|&y| y != labels[0]);
        if nmi(&labels, &labels)? != 1.0 || (mixed && nmi(&vec![0; n], &labels)? != 0.0) {
            bad += 1;
        }
    }
    checks.push(exact("recall_and_nmi", bad));

    let mut bad = 0;
    for _ in 0..draws {
        let n = rng.random_range(4..=12);
        let labels: Vec<usize> = (0..n).map(|i| i % rng.random_range(2..=3)).collect();
        let x = uniform(&mut rng, &[n, 3]);
        let batch = FeatureBatch::new(x.clone(), labels.clone())?;
        for t in sample_hard(&batch, &mut rng).triplets {
            if naive_dist(&x, t.anchor, t.negative) >= naive_dist(&x, t.anchor, t.positive) {
                bad += 1;
            }
        }
        for t in sample_semihard(&batch, 0.3, &mut rng)?.triplets {
            let (dp, dn) = (naive_dist(&x, t.anchor, t.positive), naive_dist(&x, t.anchor, t.negative));
            if !(dp < dn && dn - dp < 0.3) {
                bad += 1;
            }
        }
    }
    checks.push(exact("sampler_inequalities", bad));
    Ok(checks)
}

/// Gradient and oracle suites at their default sizes.
pub fn run(seed: u64) -> Result<Vec<Check>> {
    let mut checks = gradient_suite(10, seed)?;
    checks.extend(oracle_suite(200, seed)?);
    Ok(checks)
}
