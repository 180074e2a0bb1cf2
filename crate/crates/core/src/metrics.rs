//! Retrieval and clustering quality on held-out classes.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradcore::Tensor;
use crate::model::MetricModel;

pub const DEFAULT_KS: [usize; 4] = [1, 2, 4, 8];
pub const CSV_HEADER: &str = "split_id,epoch,nmi,r@1,r@2,r@4,r@8,knn_acc";

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Other rows ordered by distance to `q`, ties by lower index.
fn ranked_neighbors(x: &Tensor, q: usize) -> Vec<usize> {
    let qrow = x.row(q);
    let mut cand: Vec<(f64, usize)> = (0..x.rows())
        .filter(|&j| j != q)
        .map(|j| (sq_dist(qrow, x.row(j)).sqrt(), j))
        .collect();
    cand.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    cand.into_iter().map(|(_, j)| j).collect()
}

fn check_rows(x: &Tensor, labels: &[usize]) -> Result<()> {
    if x.ndim() != 2 || x.rows() != labels.len() {
        return Err(Error::dim("metrics", x.shape(), &[labels.len()]));
    }
    Ok(())
}

/// Fraction of queries with at least one same-label item among their `k`
/// nearest other points, for each `k`.
pub fn recall_at_k(x: &Tensor, labels: &[usize], ks: &[usize]) -> Result<BTreeMap<usize, f64>> {
    check_rows(x, labels)?;
    let n = labels.len();
    if n < 2 {
        return Err(Error::Parameter("recall needs at least two points".into()));
    }
    if let Some(&bad) = ks.iter().find(|&&k| k == 0 || k >= n) {
        return Err(Error::Parameter(format!("k = {bad} must lie in [1, {n})")));
    }
    let mut hits: BTreeMap<usize, usize> = ks.iter().map(|&k| (k, 0)).collect();
    for q in 0..n {
        let ranked = ranked_neighbors(x, q);
        let first = ranked.iter().position(|&j| labels[j] == labels[q]);
        for (&k, h) in hits.iter_mut() {
            if first.is_some_and(|p| p < k) {
                *h += 1;
            }
        }
    }
    Ok(hits.into_iter().map(|(k, h)| (k, h as f64 / n as f64)).collect())
}

/// Fraction of queries for which a strict majority of the `k` nearest other
/// points share the query's label (3 of 5 for `k = 5`).
pub fn knn_acc(x: &Tensor, labels: &[usize], k: usize) -> Result<f64> {
    check_rows(x, labels)?;
    let n = labels.len();
    if k == 0 || n <= k {
        return Err(Error::Parameter(format!("knn with k = {k} needs more than {k} points, got {n}")));
    }
    let need = k / 2 + 1;
    let correct = (0..n)
        .filter(|&q| {
            ranked_neighbors(x, q)
                .iter()
                .take(k)
                .filter(|&&j| labels[j] == labels[q])
                .count()
                >= need
        })
        .count();
    Ok(correct as f64 / n as f64)
}

fn entropy(counts: impl Iterator<Item = usize>, n: f64) -> f64 {
    counts
        .filter(|&c| c > 0)
        .map(|c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// `2·I(Y;C) / (H(Y) + H(C))` from empirical counts, natural log.
pub fn nmi(assignments: &[usize], labels: &[usize]) -> Result<f64> {
    if assignments.len() != labels.len() {
        return Err(Error::Contract(format!(
            "nmi of {} assignments against {} labels",
            assignments.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::Contract("nmi of an empty partition".into()));
    }
    let n = labels.len() as f64;
    let mut cy: BTreeMap<usize, usize> = BTreeMap::new();
    let mut cc: BTreeMap<usize, usize> = BTreeMap::new();
    let mut joint: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    for (&c, &y) in assignments.iter().zip(labels) {
        *cy.entry(y).or_default() += 1;
        *cc.entry(c).or_default() += 1;
        *joint.entry((y, c)).or_default() += 1;
    }
    let hy = entropy(cy.values().copied(), n);
    let hc = entropy(cc.values().copied(), n);
    // Identical partitions, including two single-block ones.
    if joint.len() == cy.len() && joint.len() == cc.len() {
        return Ok(1.0);
    }
    if hy == 0.0 || hc == 0.0 {
        return Ok(0.0);
    }
    let mi: f64 = joint
        .iter()
        .map(|(&(y, c), &nyc)| {
            let pyc = nyc as f64 / n;
            pyc * (pyc * n * n / (cy[&y] as f64 * cc[&c] as f64)).ln()
        })
        .sum();
    Ok((2.0 * mi / (hy + hc)).clamp(0.0, 1.0))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KMeansConfig {
    pub restarts: usize,
    pub max_iter: usize,
    /// Stop when WCSS improves by less than this fraction.
    pub tol: f64,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        KMeansConfig {
            restarts: 8,
            max_iter: 100,
            tol: 1e-6,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Clustering {
    pub assignments: Vec<usize>,
    pub centers: Vec<Vec<f64>>,
    pub wcss: f64,
    /// WCSS after each Lloyd iteration of the winning restart.
    pub history: Vec<f64>,
}

fn seed_plus_plus<R: Rng + ?Sized>(x: &Tensor, k: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let n = x.rows();
    let mut centers = vec![x.row(rng.random_range(0..n)).to_vec()];
    let mut best: Vec<f64> = (0..n).map(|i| sq_dist(x.row(i), &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = best.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &d) in best.iter().enumerate() {
                if r < d {
                    chosen = i;
                    break;
                }
                r -= d;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        let c = x.row(pick).to_vec();
        for (i, b) in best.iter_mut().enumerate() {
            *b = b.min(sq_dist(x.row(i), &c));
        }
        centers.push(c);
    }
    centers
}

fn assign(x: &Tensor, centers: &[Vec<f64>]) -> (Vec<usize>, f64) {
    let mut wcss = 0.0;
    let a = (0..x.rows())
        .map(|i| {
            let (c, d) = centers
                .iter()
                .enumerate()
                .map(|(c, m)| (c, sq_dist(x.row(i), m)))
                .fold((0, f64::INFINITY), |acc, v| if v.1 < acc.1 { v } else { acc });
            wcss += d;
            c
        })
        .collect();
    (a, wcss)
}

fn lloyd<R: Rng + ?Sized>(x: &Tensor, k: usize, cfg: &KMeansConfig, rng: &mut R) -> Clustering {
    let d = x.row_len();
    let mut centers = seed_plus_plus(x, k, rng);
    let (mut assignments, mut wcss) = assign(x, &centers);
    let mut history = vec![wcss];
    for _ in 0..cfg.max_iter {
        let mut sums = vec![vec![0.0; d]; k];
        let mut counts = vec![0usize; k];
        for (i, &c) in assignments.iter().enumerate() {
            counts[c] += 1;
            for (s, v) in sums[c].iter_mut().zip(x.row(i)) {
                *s += v;
            }
        }
        for c in 0..k {
            // Empty clusters keep their previous center.
            if counts[c] > 0 {
                centers[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
        let (a, w) = assign(x, &centers);
        let improved = wcss - w;
        assignments = a;
        history.push(w);
        let done = improved <= cfg.tol * wcss.max(f64::MIN_POSITIVE);
        wcss = w;
        if done {
            break;
        }
    }
    Clustering {
        assignments,
        centers,
        wcss,
        history,
    }
}

/// Lloyd's algorithm from k-means++ seeds; the restart with the lowest
/// within-cluster sum of squares wins.
pub fn kmeans<R: Rng + ?Sized>(x: &Tensor, k: usize, cfg: &KMeansConfig, rng: &mut R) -> Result<Clustering> {
    if x.ndim() != 2 {
        return Err(Error::dim("kmeans", x.shape(), &[k]));
    }
    if k == 0 || k > x.rows() {
        return Err(Error::Parameter(format!("k = {k} must lie in [1, {}]", x.rows())));
    }
    let mut best: Option<Clustering> = None;
    for _ in 0..cfg.restarts.max(1) {
        let c = lloyd(x, k, cfg, rng);
        if best.as_ref().is_none_or(|b| c.wcss < b.wcss) {
            best = Some(c);
        }
    }
    Ok(best.expect("at least one restart"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split_id: String,
    pub epoch: usize,
    pub recall_at: BTreeMap<usize, f64>,
    pub nmi: f64,
    pub knn_acc: f64,
    pub n_queries: usize,
}

impl EvalReport {
    pub fn recall(&self, k: usize) -> Option<f64> {
        self.recall_at.get(&k).copied()
    }

    /// Ranges and monotonicity.
    pub fn check(&self) -> Result<()> {
        let in_unit = |v: f64| (0.0..=1.0).contains(&v);
        if !in_unit(self.nmi) || !in_unit(self.knn_acc) || !self.recall_at.values().all(|&v| in_unit(v)) {
            return Err(Error::Contract(format!("metric outside [0, 1]: {self:?}")));
        }
        let r: Vec<f64> = self.recall_at.values().copied().collect();
        if r.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Contract(format!("recall not monotone in k: {r:?}")));
        }
        Ok(())
    }

    pub fn csv_row(&self) -> String {
        let r = |k| self.recall(k).map(|v| format!("{v:?}")).unwrap_or_default();
        format!(
            "{},{},{:?},{},{},{},{},{:?}",
            self.split_id,
            self.epoch,
            self.nmi,
            r(1),
            r(2),
            r(4),
            r(8),
            self.knn_acc
        )
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Contract(format!("report serialization: {e}")))
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Format {
            offset: e.column() as u64,
            msg: e.to_string(),
        })
    }
}

/// Appends `rows` to a metrics CSV, writing the header when the file is new.
pub fn append_csv(path: &Path, reports: &[EvalReport]) -> Result<()> {
    let fresh = !path.exists() || std::fs::metadata(path)?.len() == 0;
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    if fresh {
        writeln!(f, "{CSV_HEADER}")?;
    }
    for r in reports {
        writeln!(f, "{}", r.csv_row())?;
    }
    Ok(())
}

/// Metrics on already-computed embeddings. NMI clusters with one cluster per
/// distinct label.
pub fn evaluate_embeddings<R: Rng + ?Sized>(
    split_id: &str,
    epoch: usize,
    embeddings: &Tensor,
    labels: &[usize],
    ks: &[usize],
    rng: &mut R,
) -> Result<EvalReport> {
    check_rows(embeddings, labels)?;
    let classes: BTreeSet<usize> = labels.iter().copied().collect();
    let clustering = kmeans(embeddings, classes.len(), &KMeansConfig::default(), rng)?;
    let report = EvalReport {
        split_id: split_id.to_string(),
        epoch,
        recall_at: recall_at_k(embeddings, labels, ks)?,
        nmi: nmi(&clustering.assignments, labels)?,
        knn_acc: knn_acc(embeddings, labels, 5)?,
        n_queries: labels.len(),
    };
    report.check()?;
    Ok(report)
}

/// Fails unless the evaluated classes are disjoint from the training ones.
pub fn assert_disjoint(train_classes: &[usize], test_labels: &[usize]) -> Result<()> {
    let train: HashMap<usize, ()> = train_classes.iter().map(|&c| (c, ())).collect();
    if let Some(c) = test_labels.iter().find(|c| train.contains_key(c)) {
        return Err(Error::Protocol(format!("class {c} appears in both training and test sets")));
    }
    Ok(())
}

/// Embeds `x` in inference mode and scores it. The evaluated classes must
/// be disjoint from `train_classes`. Cut-offs `k ≥ n` are dropped.
#[allow(clippy::too_many_arguments)]
pub fn evaluate<R: Rng + ?Sized>(
    model: &MetricModel,
    x: &Tensor,
    labels: &[usize],
    train_classes: &[usize],
    ks: &[usize],
    split_id: &str,
    epoch: usize,
    rng: &mut R,
) -> Result<EvalReport> {
    assert_disjoint(train_classes, labels)?;
    let e = model.embed(x)?;
    let ks: Vec<usize> = ks.iter().copied().filter(|&k| k < labels.len()).collect();
    evaluate_embeddings(split_id, epoch, &e, labels, &ks, rng)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn pts(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn recall_examples() {
        let x = pts(&[&[0.0], &[0.1], &[5.0], &[5.1], &[9.0], &[9.2]]);
        let y = [0, 0, 1, 1, 2, 2];
        let r = recall_at_k(&x, &y, &[1, 5]).unwrap();
        assert_eq!(r[&1], 1.0);
        assert_eq!(r[&5], 1.0);
        assert!(matches!(recall_at_k(&x, &y, &[6]), Err(Error::Parameter(_))));

        // First same-label rank per query: 0, 0 (tie at 1.0 goes to row 0),
        // 3 (tie at 2.0 goes to row 0), 1, none, 1.
        let x = pts(&[&[0.0], &[1.0], &[2.0], &[2.5], &[10.0], &[4.0]]);
        let y = [0, 0, 1, 0, 2, 1];
        let r = recall_at_k(&x, &y, &[1, 2, 4]).unwrap();
        assert_eq!(r[&1], 2.0 / 6.0);
        assert_eq!(r[&2], 4.0 / 6.0);
        assert_eq!(r[&4], 5.0 / 6.0);
    }

    #[test]
    fn knn_examples() {
        // Query 0 has exactly two same-label items among its 5 nearest.
        let x = pts(&[&[0.0], &[0.1], &[0.2], &[0.3], &[0.4], &[0.5], &[9.0]]);
        let y = [0, 0, 0, 1, 1, 1, 0];
        let a = knn_acc(&x, &y, 5).unwrap();
        let oracle = {
            let mut ok = 0;
            for q in 0..7 {
                let mut d: Vec<(f64, usize)> = (0..7)
                    .filter(|&j| j != q)
                    .map(|j| ((x.row(q)[0] - x.row(j)[0]).abs(), j))
                    .collect();
                d.sort_by(|a, b| a.partial_cmp(b).unwrap());
                if d[..5].iter().filter(|(_, j)| y[*j] == y[q]).count() >= 3 {
                    ok += 1;
                }
            }
            ok as f64 / 7.0
        };
        assert_eq!(a, oracle);
        // Query 0: neighbours 1,2 (same), 3,4,5 (other) -> 2 of 5: incorrect.
        assert!(a < 1.0);
        assert!(matches!(knn_acc(&x, &y, 7), Err(Error::Parameter(_))));
    }

    #[test]
    fn nmi_examples() {
        assert_eq!(nmi(&[0, 0, 1, 1, 2], &[0, 0, 1, 1, 2]).unwrap(), 1.0);
        assert_eq!(nmi(&[0, 0, 0, 0], &[0, 0, 1, 1]).unwrap(), 0.0);
        assert_eq!(nmi(&[0, 1, 0, 1], &[0, 0, 1, 1]).unwrap(), 0.0);
        assert_eq!(nmi(&[3, 3], &[1, 1]).unwrap(), 1.0);
        assert!(matches!(nmi(&[0], &[0, 1]), Err(Error::Contract(_))));
        let a = nmi(&[5, 5, 7, 7, 7, 9], &[0, 1, 1, 2, 2, 2]).unwrap();
        let b = nmi(&[0, 1, 1, 2, 2, 2], &[5, 5, 7, 7, 7, 9]).unwrap();
        assert!((a - b).abs() < 1e-15);
    }

    #[test]
    fn kmeans_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = pts(&[&[0.0, 1.0], &[2.0, 3.0], &[5.0, -1.0]]);
        let c = kmeans(&x, 3, &KMeansConfig::default(), &mut rng).unwrap();
        assert_eq!(c.wcss, 0.0);
        let set: BTreeSet<usize> = c.assignments.iter().copied().collect();
        assert_eq!(set.len(), 3);
        assert!(kmeans(&x, 4, &KMeansConfig::default(), &mut rng).is_err());

        let mut rows = Vec::new();
        for i in 0..20 {
            let off = if i < 10 { 0.0 } else { 100.0 };
            rows.push(vec![off + rng.random_range(-1.0..1.0), off + rng.random_range(-1.0..1.0)]);
        }
        let x = Tensor::from_rows(&rows).unwrap();
        let c = kmeans(&x, 2, &KMeansConfig::default(), &mut rng).unwrap();
        assert!(c.assignments[..10].iter().all(|&a| a == c.assignments[0]));
        assert!(c.assignments[10..].iter().all(|&a| a == c.assignments[10]));
        assert_ne!(c.assignments[0], c.assignments[10]);
        assert!(c.history.windows(2).all(|w| w[1] <= w[0] + 1e-12));
    }

    #[test]
    fn kmeans_is_deterministic_under_seed() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let rows: Vec<Vec<f64>> = (0..30).map(|_| vec![rng.random::<f64>(), rng.random::<f64>()]).collect();
        let x = Tensor::from_rows(&rows).unwrap();
        let run = |s| kmeans(&x, 4, &KMeansConfig::default(), &mut ChaCha8Rng::seed_from_u64(s)).unwrap();
        assert_eq!(run(3), run(3));
    }

    #[test]
    fn report_round_trip_and_csv() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let rows: Vec<Vec<f64>> = (0..12).map(|i| vec![(i / 3) as f64 + 0.01 * rng.random::<f64>()]).collect();
        let labels: Vec<usize> = (0..12).map(|i| i / 3).collect();
        let x = Tensor::from_rows(&rows).unwrap();
        let r = evaluate_embeddings("unseen", 3, &x, &labels, &DEFAULT_KS, &mut rng).unwrap();
        assert_eq!(r.recall(1), Some(1.0));
        assert_eq!(r.nmi, 1.0);
        assert_eq!(EvalReport::from_json(&r.to_json().unwrap()).unwrap(), r);
        assert_eq!(r.csv_row().split(',').count(), CSV_HEADER.split(',').count());

        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        append_csv(&p, &[r.clone()]).unwrap();
        append_csv(&p, &[r]).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0], CSV_HEADER);
    }

    #[test]
    fn disjointness_is_enforced() {
        assert!(assert_disjoint(&[0, 1], &[2, 3, 2]).is_ok());
        assert!(matches!(assert_disjoint(&[0, 1], &[2, 1]), Err(Error::Protocol(_))));
    }
}
