use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::checkpoint::save_model;
use super::config::{ExperimentConfig, Mode};
use super::data::{holdout, zsl_split, Dataset, ZslSplit};
use crate::adversary::{
    mean_classification_loss, train_step_adversarial, train_step_soft, AdversarialMode, AdversarialSchedule,
    Classifier,
};
use crate::error::{Error, Result};
use crate::gradcore::Tape;
use crate::losses::{energy_confusion, metric_loss, metric_step, mine_batch, EnergyTerm};
use crate::metrics::{assert_disjoint, evaluate, evaluate_embeddings, EvalReport, CSV_HEADER};
use crate::model::{MetricModel, ParamGroup};
use crate::nn::Module;
use crate::optim::Adam;

/// Independent random streams of one run.
struct Streams {
    init: ChaCha8Rng,
    holdout: ChaCha8Rng,
    batches: ChaCha8Rng,
    mining: ChaCha8Rng,
    dropout: ChaCha8Rng,
    eval: ChaCha8Rng,
}

impl Streams {
    fn new(seed: u64) -> Self {
        let s = |k: u64| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(k);
            r
        };
        Streams {
            init: s(1),
            holdout: s(2),
            batches: s(3),
            mining: s(4),
            dropout: s(5),
            eval: s(6),
        }
    }
}

/// Class-balanced batches covering about one pass over `idx`: each batch
/// holds up to `classes_per_batch` classes with `per_class` distinct
/// samples each (fewer when a class is smaller).
pub fn balanced_batches<R: Rng + ?Sized>(
    idx: &[usize],
    labels: &[usize],
    batch_size: usize,
    per_class: usize,
    rng: &mut R,
) -> Result<Vec<Vec<usize>>> {
    let mut members: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &i in idx {
        members.entry(labels[i]).or_default().push(i);
    }
    if members.len() < 2 {
        return Err(Error::Contract("balanced batches need two classes".into()));
    }
    if let Some((c, m)) = members.iter().find(|(_, m)| m.len() < 2) {
        return Err(Error::Contract(format!("class {c} has {} sample(s); two are needed", m.len())));
    }
    let p = (batch_size / per_class).min(members.len());
    let n_batches = idx.len().div_ceil(batch_size);
    let classes: Vec<usize> = members.keys().copied().collect();
    let mut queues: BTreeMap<usize, VecDeque<usize>> = BTreeMap::new();
    let mut order: VecDeque<usize> = VecDeque::new();
    let mut batches = Vec::with_capacity(n_batches);
    for _ in 0..n_batches {
        let mut picked = Vec::with_capacity(p);
        while picked.len() < p {
            if order.is_empty() {
                let mut o = classes.clone();
                o.shuffle(rng);
                order.extend(o);
            }
            let c = order.pop_front().expect("refilled");
            if !picked.contains(&c) {
                picked.push(c);
            }
        }
        let mut batch = Vec::with_capacity(p * per_class);
        for c in picked {
            let m = &members[&c];
            let want = per_class.min(m.len());
            let q = queues.entry(c).or_default();
            let mut taken: Vec<usize> = Vec::with_capacity(want);
            while taken.len() < want {
                if q.is_empty() {
                    let mut fresh = m.clone();
                    fresh.shuffle(rng);
                    q.extend(fresh);
                }
                let i = q.pop_front().expect("refilled");
                if !taken.contains(&i) {
                    taken.push(i);
                }
            }
            batch.extend(taken);
        }
        batches.push(batch);
    }
    Ok(batches)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub epoch: usize,
    pub l_m: f64,
    pub l_c: Option<f64>,
    pub l_ec: Option<f64>,
    /// Weight produced from this row's `l_c`, used during the next epoch.
    pub lambda: Option<f64>,
}

pub fn log_header(mode: Mode) -> &'static str {
    match mode {
        Mode::Base => "epoch,l_m",
        Mode::Energy => "epoch,l_m,l_ec",
        Mode::SoftAdv | Mode::AdaptAdv => "epoch,l_m,l_c,lambda",
    }
}

pub fn log_csv(mode: Mode, rows: &[LogRow]) -> String {
    let mut s = String::from(log_header(mode));
    s.push('\n');
    for r in rows {
        let _ = write!(s, "{},{:?}", r.epoch, r.l_m);
        match mode {
            Mode::Base => {}
            Mode::Energy => {
                let _ = write!(s, ",{:?}", r.l_ec.unwrap_or(0.0));
            }
            Mode::SoftAdv | Mode::AdaptAdv => {
                let _ = write!(s, ",{:?},{:?}", r.l_c.unwrap_or(0.0), r.lambda.unwrap_or(0.0));
            }
        }
        s.push('\n');
    }
    s
}

pub fn metrics_csv(reports: &[EvalReport]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in reports {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

pub struct TrainOutcome {
    /// Configuration with the input width resolved from the data.
    pub config: ExperimentConfig,
    pub model: MetricModel,
    pub classifier: Option<Classifier>,
    pub log: Vec<LogRow>,
    pub reports: Vec<EvalReport>,
    pub split: ZslSplit,
    pub train_idx: Vec<usize>,
    pub val_idx: Vec<usize>,
}

impl TrainOutcome {
    /// Latest report for `split_id`.
    pub fn last_report(&self, split_id: &str) -> Option<&EvalReport> {
        self.reports.iter().rev().find(|r| r.split_id == split_id)
    }

    /// Writes `train_log.csv`, `metrics.csv`, `report.json`, `config.toml`,
    /// and `model.ckpt` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("train_log.csv"), log_csv(self.config.mode, &self.log))?;
        std::fs::write(dir.join("metrics.csv"), metrics_csv(&self.reports))?;
        std::fs::write(dir.join("config.toml"), self.config.to_toml()?)?;
        if let Some(r) = self.last_report(UNSEEN) {
            std::fs::write(dir.join("report.json"), r.to_json()?)?;
        }
        save_model(&dir.join("model.ckpt"), &self.config, &self.model, self.classifier.as_ref())
    }
}

pub const SEEN: &str = "seen_val";
pub const UNSEEN: &str = "unseen_test";

/// Builds the model (and classifier, when the mode uses one) for `config`.
pub fn build_models<R: Rng + ?Sized>(
    config: &ExperimentConfig,
    train_classes: usize,
    rng: &mut R,
) -> Result<(MetricModel, Option<Classifier>)> {
    let proxies = config.loss.uses_proxies().then_some(train_classes);
    let model = MetricModel::new(
        config.extractor.clone(),
        config.embedding_dim,
        config.normalize_embeddings,
        proxies,
        rng,
    )?;
    let classifier = if config.mode.uses_classifier() {
        let hidden = config.classifier_hidden.unwrap_or((model.feature_dim() / 2).max(1));
        Some(Classifier::new(model.feature_dim(), hidden, train_classes, config.dropout, rng)?)
    } else {
        None
    };
    Ok((model, classifier))
}

fn model_optimizer(config: &ExperimentConfig, model: &MetricModel) -> Result<Adam> {
    Adam::new(
        model
            .groups()
            .into_iter()
            .map(|g| match g {
                ParamGroup::Backbone => config.backbone_lr,
                ParamGroup::Head => config.embedding_lr,
                ParamGroup::Proxy => config.proxy_lr,
            })
            .collect(),
    )
}

fn diverged(epoch: usize, step: usize) -> impl FnOnce(Error) -> Error {
    move |e| match e {
        Error::NonFinite { .. } | Error::Domain { .. } => Error::Divergence {
            epoch,
            step,
            source: Box::new(e),
        },
        other => other,
    }
}

fn pick_pair<R: Rng + ?Sized>(labels: &[usize], rng: &mut R) -> Option<(usize, usize)> {
    let classes: Vec<usize> = labels.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    if classes.len() < 2 {
        return None;
    }
    let two: Vec<&usize> = classes.choose_multiple(rng, 2).collect();
    Some((*two[0], *two[1]))
}

#[derive(Default)]
struct Means {
    l_m: f64,
    l_c: f64,
    l_ec: f64,
    n_m: usize,
    n_c: usize,
    n_ec: usize,
}

impl Means {
    fn finish(&self) -> (f64, f64, f64) {
        let avg = |s: f64, n: usize| if n == 0 { 0.0 } else { s / n as f64 };
        (avg(self.l_m, self.n_m), avg(self.l_c, self.n_c), avg(self.l_ec, self.n_ec))
    }
}

/// Runs the configured experiment on `dataset`: class-disjoint split, seen
/// validation holdout, per-epoch training and evaluation.
pub fn train(config: &ExperimentConfig, dataset: &Dataset) -> Result<TrainOutcome> {
    let mut cfg = config.clone();
    cfg.extractor.backbone.input_dim = dataset.input_dim();
    cfg.validate()?;
    let mut rs = Streams::new(cfg.seed);

    let split = zsl_split(dataset, cfg.train_fraction)?;
    assert_disjoint(&split.train_classes, &dataset.labels_of(&split.test_idx))?;
    let (train_idx, val_idx) = holdout(&split.train_idx, &dataset.labels, cfg.val_fraction, &mut rs.holdout)?;
    let n_train_classes = split.train_classes.len();

    let (mut model, mut classifier) = build_models(&cfg, n_train_classes, &mut rs.init)?;
    let mut opt_m = model_optimizer(&cfg, &model)?;
    let mut opt_c = match &classifier {
        Some(c) => Some(Adam::new(vec![cfg.classifier_lr; c.params().len()])?),
        None => None,
    };
    let mut schedule = match cfg.mode {
        Mode::SoftAdv => Some(AdversarialSchedule::new(AdversarialMode::SoftAdv, cfg.lambda0, cfg.l_thresh)?),
        Mode::AdaptAdv => Some(AdversarialSchedule::new(AdversarialMode::AdaptAdv, cfg.lambda0, cfg.l_thresh)?),
        _ => None,
    };

    let x_val = dataset.rows(&val_idx)?;
    let y_val = dataset.labels_of(&val_idx);
    let x_test = dataset.rows(&split.test_idx)?;
    let y_test = dataset.labels_of(&split.test_idx);
    let mut reports = Vec::new();
    let mut eval_epoch = |model: &MetricModel, epoch: usize, rng: &mut ChaCha8Rng| -> Result<()> {
        if val_idx.len() > 1 {
            let e = model.embed(&x_val)?;
            let ks: Vec<usize> = cfg.eval_ks.iter().copied().filter(|&k| k < y_val.len()).collect();
            if y_val.len() > 5 {
                reports.push(evaluate_embeddings(SEEN, epoch, &e, &y_val, &ks, rng)?);
            }
        }
        reports.push(evaluate(model, &x_test, &y_test, &split.train_classes, &cfg.eval_ks, UNSEEN, epoch, rng)?);
        Ok(())
    };

    // Epoch 0 measures the untrained model over one batch pass.
    let mut log = Vec::with_capacity(cfg.epochs + 1);
    {
        let batches = balanced_batches(&train_idx, &dataset.labels, cfg.batch_size, cfg.samples_per_class, &mut rs.batches)?;
        let mut m = Means::default();
        for b in &batches {
            let x = dataset.rows(b)?;
            let y = dataset.labels_of(b);
            let mined = mine_batch(&model, &x, &y, &cfg.loss, &mut rs.mining)?;
            let mut tape = Tape::new();
            let e = tape.constant(model.embed(&x)?);
            let proxies = model.proxies.clone().map(|p| tape.constant(p));
            if !mined.tuples.is_empty() {
                let l = metric_loss(&mut tape, e, &y, &mined.tuples, &cfg.loss, proxies)?;
                m.l_m += tape.value(l).item()?;
                m.n_m += 1;
            }
            if let Some(c) = &classifier {
                m.l_c += mean_classification_loss(&model, c, &x, &y)?;
                m.n_c += 1;
            }
            if cfg.mode == Mode::Energy {
                if let Some((i, j)) = pick_pair(&y, &mut rs.mining) {
                    let l = energy_confusion(&mut tape, e, &y, i, j)?;
                    m.l_ec += tape.value(l).item()?;
                    m.n_ec += 1;
                }
            }
        }
        let (l_m, l_c, l_ec) = m.finish();
        log.push(row(&cfg, 0, l_m, l_c, l_ec, schedule.as_mut())?);
        eval_epoch(&model, 0, &mut rs.eval)?;
    }

    for epoch in 1..=cfg.epochs {
        let batches = balanced_batches(&train_idx, &dataset.labels, cfg.batch_size, cfg.samples_per_class, &mut rs.batches)?;
        let mut m = Means::default();
        for (step, b) in batches.iter().enumerate() {
            let x = dataset.rows(b)?;
            let y = dataset.labels_of(b);
            let mined = mine_batch(&model, &x, &y, &cfg.loss, &mut rs.mining)?;
            let on_err = diverged(epoch, step);
            match cfg.mode {
                Mode::Base | Mode::Energy => {
                    let energy = if cfg.mode == Mode::Energy {
                        pick_pair(&y, &mut rs.mining).map(|classes| EnergyTerm {
                            weight: cfg.lambda0,
                            classes,
                        })
                    } else {
                        None
                    };
                    let r = metric_step(&mut model, &mut opt_m, &x, &y, &mined.tuples, &cfg.loss, energy)
                        .map_err(on_err)?;
                    if let Some(l) = r.l_m {
                        m.l_m += l;
                        m.n_m += 1;
                    }
                    if let Some(l) = r.l_ec {
                        m.l_ec += l;
                        m.n_ec += 1;
                    }
                }
                Mode::SoftAdv | Mode::AdaptAdv => {
                    let clf = classifier.as_mut().expect("classifier built for adversarial modes");
                    let oc = opt_c.as_mut().expect("classifier optimizer");
                    let sched = schedule.as_ref().expect("schedule built for adversarial modes");
                    let r = if cfg.mode == Mode::SoftAdv {
                        train_step_soft(
                            &mut model,
                            clf,
                            &mut opt_m,
                            oc,
                            &x,
                            &y,
                            &mined.tuples,
                            &cfg.loss,
                            cfg.smoothing,
                            sched.lambda,
                            &mut rs.dropout,
                        )
                    } else {
                        train_step_adversarial(
                            &mut model,
                            clf,
                            &mut opt_m,
                            oc,
                            &x,
                            &y,
                            &mined.tuples,
                            &cfg.loss,
                            sched,
                            &mut rs.dropout,
                        )
                    }
                    .map_err(on_err)?;
                    if let Some(l) = r.l_m {
                        m.l_m += l;
                        m.n_m += 1;
                    }
                    m.l_c += r.l_c;
                    m.n_c += 1;
                }
            }
        }
        let (l_m, l_c, l_ec) = m.finish();
        if !(l_m.is_finite() && l_c.is_finite() && l_ec.is_finite()) {
            return Err(Error::Divergence {
                epoch,
                step: batches.len(),
                source: Box::new(Error::NonFinite { op: "epoch mean" }),
            });
        }
        log.push(row(&cfg, epoch, l_m, l_c, l_ec, schedule.as_mut())?);
        eval_epoch(&model, epoch, &mut rs.eval)?;
    }

    Ok(TrainOutcome {
        config: cfg,
        model,
        classifier,
        log,
        reports,
        split,
        train_idx,
        val_idx,
    })
}

fn row(
    cfg: &ExperimentConfig,
    epoch: usize,
    l_m: f64,
    l_c: f64,
    l_ec: f64,
    schedule: Option<&mut AdversarialSchedule>,
) -> Result<LogRow> {
    let mut r = LogRow {
        epoch,
        l_m,
        l_c: None,
        l_ec: None,
        lambda: None,
    };
    match cfg.mode {
        Mode::Base => {}
        Mode::Energy => r.l_ec = Some(l_ec),
        Mode::SoftAdv | Mode::AdaptAdv => {
            let s = schedule.expect("schedule built for adversarial modes");
            r.l_c = Some(l_c);
            r.lambda = Some(s.update(l_c)?);
        }
    }
    Ok(r)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridRow {
    pub lambda0: f64,
    pub seed: u64,
    pub report: EvalReport,
}

pub const GRID_HEADER: &str = "lambda0,seed,nmi,r@1,r@2,r@4,r@8,knn_acc";

/// Trains once per `(λ0, seed)` and keeps the final unseen-class report.
/// Modes without a classifier are run as the adaptive adversarial mode.
pub fn grid(config: &ExperimentConfig, dataset: &Dataset, seeds: &[u64]) -> Result<Vec<GridRow>> {
    let mut rows = Vec::new();
    for &lambda0 in &config.lambda_grid {
        for &seed in seeds {
            let mut c = config.clone();
            c.lambda0 = lambda0;
            c.seed = seed;
            if !c.mode.uses_classifier() {
                c.mode = Mode::AdaptAdv;
            }
            let out = train(&c, dataset)?;
            let report = out
                .last_report(UNSEEN)
                .cloned()
                .ok_or_else(|| Error::Contract("run produced no unseen-class report".into()))?;
            rows.push(GridRow { lambda0, seed, report });
        }
    }
    Ok(rows)
}

pub fn grid_csv(rows: &[GridRow]) -> String {
    let mut s = String::from(GRID_HEADER);
    s.push('\n');
    for r in rows {
        // Reuse the report row, replacing its split id and epoch.
        let line = r.report.csv_row();
        let tail: Vec<&str> = line.splitn(3, ',').collect();
        let _ = writeln!(s, "{:?},{},{}", r.lambda0, r.seed, tail[2]);
    }
    s
}
