//! Training-constraint construction from a labelled feature batch: easy,
//! hard, and semi-hard triplets, and N-pair tuples.

use std::collections::BTreeMap;

use rand::seq::IndexedRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::gradcore::Tensor;

/// Rows `f_i` with class labels `y_i`.
#[derive(Clone, Debug)]
pub struct FeatureBatch {
    features: Tensor,
    labels: Vec<usize>,
}

impl FeatureBatch {
    pub fn new(features: Tensor, labels: Vec<usize>) -> Result<Self> {
        if features.ndim() != 2 {
            return Err(Error::dim("feature_batch", features.shape(), &[labels.len()]));
        }
        if features.rows() != labels.len() {
            return Err(Error::dim("feature_batch", features.shape(), &[labels.len()]));
        }
        if labels.len() < 2 {
            return Err(Error::Contract("a feature batch needs at least two rows".into()));
        }
        if !features.is_finite() {
            return Err(Error::Contract("feature batch contains non-finite values".into()));
        }
        Ok(FeatureBatch { features, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Row indices per class, classes in ascending order.
    pub fn class_members(&self) -> BTreeMap<usize, Vec<usize>> {
        let mut m: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, &y) in self.labels.iter().enumerate() {
            m.entry(y).or_default().push(i);
        }
        m
    }

    /// Copy with every row scaled to unit norm (zero rows are left as is).
    pub fn l2_normalized(&self) -> FeatureBatch {
        let mut f = self.features.clone();
        let d = f.row_len();
        for row in f.data_mut().chunks_mut(d) {
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 0.0 {
                row.iter_mut().for_each(|x| *x /= n);
            }
        }
        FeatureBatch {
            features: f,
            labels: self.labels.clone(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NTuple {
    pub anchor: usize,
    pub positive: usize,
    /// One row per non-anchor class present in the batch, ascending by class.
    pub negatives: Vec<usize>,
}

impl Triplet {
    pub fn is_valid(&self, labels: &[usize]) -> bool {
        let n = labels.len();
        self.anchor < n
            && self.positive < n
            && self.negative < n
            && self.anchor != self.positive
            && labels[self.anchor] == labels[self.positive]
            && labels[self.anchor] != labels[self.negative]
    }
}

impl NTuple {
    pub fn is_valid(&self, labels: &[usize]) -> bool {
        let n = labels.len();
        if self.anchor >= n || self.positive >= n || self.anchor == self.positive {
            return false;
        }
        let ya = labels[self.anchor];
        if labels[self.positive] != ya {
            return false;
        }
        let mut seen = std::collections::BTreeSet::new();
        self.negatives
            .iter()
            .all(|&j| j < n && labels[j] != ya && seen.insert(labels[j]))
    }
}

/// Warning raised by a sampler that could not produce anything meaningful.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum SamplerWarning {
    SingleClass,
    NoPositives,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Sampled {
    pub triplets: Vec<Triplet>,
    /// Triplets substituted by easy sampling because no negative met the
    /// requested condition. Only the semi-hard sampler fills this.
    pub fallback: Vec<Triplet>,
    pub warning: Option<SamplerWarning>,
}

impl Sampled {
    /// Mined and fallback triplets together.
    pub fn all(&self) -> Vec<Triplet> {
        self.triplets.iter().chain(&self.fallback).copied().collect()
    }
}

/// Euclidean distance matrix between all rows.
pub fn pairwise_distances(batch: &FeatureBatch) -> Tensor {
    let n = batch.len();
    let f = batch.features();
    let mut d = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let s: f64 = f.row(i).iter().zip(f.row(j)).map(|(a, b)| (a - b) * (a - b)).sum();
            let v = s.sqrt();
            d[i * n + j] = v;
            d[j * n + i] = v;
        }
    }
    Tensor::matrix(n, n, d).expect("n×n by construction")
}

/// Ordered `(anchor, positive)` pairs with `anchor != positive`.
fn positive_pairs(batch: &FeatureBatch) -> Vec<(usize, usize)> {
    let members = batch.class_members();
    let labels = batch.labels();
    let mut pairs = Vec::new();
    for a in 0..batch.len() {
        for &p in &members[&labels[a]] {
            if p != a {
                pairs.push((a, p));
            }
        }
    }
    pairs
}

fn precheck(batch: &FeatureBatch) -> Option<SamplerWarning> {
    let members = batch.class_members();
    if members.len() < 2 {
        Some(SamplerWarning::SingleClass)
    } else if members.values().all(|m| m.len() < 2) {
        Some(SamplerWarning::NoPositives)
    } else {
        None
    }
}

/// Random triplets drawn from class labels only: `per_anchor` draws for each
/// anchor that has a positive, with uniform positive and uniform negative.
pub fn sample_easy<R: Rng + ?Sized>(batch: &FeatureBatch, per_anchor: usize, rng: &mut R) -> Sampled {
    if let Some(w) = precheck(batch) {
        return Sampled {
            warning: Some(w),
            ..Sampled::default()
        };
    }
    let labels = batch.labels();
    let members = batch.class_members();
    let mut triplets = Vec::new();
    for a in 0..batch.len() {
        let positives: Vec<usize> = members[&labels[a]].iter().copied().filter(|&p| p != a).collect();
        if positives.is_empty() {
            continue;
        }
        let negatives: Vec<usize> = (0..batch.len()).filter(|&j| labels[j] != labels[a]).collect();
        for _ in 0..per_anchor {
            triplets.push(Triplet {
                anchor: a,
                positive: *positives.choose(rng).expect("nonempty"),
                negative: *negatives.choose(rng).expect("two classes present"),
            });
        }
    }
    Sampled {
        triplets,
        ..Sampled::default()
    }
}

/// For every `(anchor, positive)` pair, one negative drawn uniformly among
/// those strictly closer to the anchor than the positive. Pairs without such
/// a negative are skipped.
pub fn sample_hard<R: Rng + ?Sized>(batch: &FeatureBatch, rng: &mut R) -> Sampled {
    if let Some(w) = precheck(batch) {
        return Sampled {
            warning: Some(w),
            ..Sampled::default()
        };
    }
    let d = pairwise_distances(batch);
    let n = batch.len();
    let labels = batch.labels();
    let triplets = positive_pairs(batch)
        .into_iter()
        .filter_map(|(a, p)| {
            let dp = d.data()[a * n + p];
            let cands: Vec<usize> = (0..n)
                .filter(|&j| labels[j] != labels[a] && d.data()[a * n + j] < dp)
                .collect();
            cands.choose(rng).map(|&neg| Triplet {
                anchor: a,
                positive: p,
                negative: neg,
            })
        })
        .collect();
    Sampled {
        triplets,
        ..Sampled::default()
    }
}

/// Eligible semi-hard negatives for every `(anchor, positive)` pair:
/// `d+ < d-` and `d- - d+ < margin`, both strict.
pub fn semihard_candidates(batch: &FeatureBatch, margin: f64) -> Result<Vec<((usize, usize), Vec<usize>)>> {
    if margin.is_nan() || margin <= 0.0 {
        return Err(Error::Parameter(format!("semi-hard margin must be positive, got {margin}")));
    }
    let d = pairwise_distances(batch);
    let n = batch.len();
    let labels = batch.labels();
    Ok(positive_pairs(batch)
        .into_iter()
        .map(|(a, p)| {
            let dp = d.data()[a * n + p];
            let cands = (0..n)
                .filter(|&j| {
                    let dn = d.data()[a * n + j];
                    labels[j] != labels[a] && dp < dn && dn - dp < margin
                })
                .collect();
            ((a, p), cands)
        })
        .collect())
}

/// Semi-hard mining with easy-sampling fallback for pairs that have no
/// eligible negative. Fallback triplets are reported separately.
pub fn sample_semihard<R: Rng + ?Sized>(batch: &FeatureBatch, margin: f64, rng: &mut R) -> Result<Sampled> {
    let cands = semihard_candidates(batch, margin)?;
    if let Some(w) = precheck(batch) {
        return Ok(Sampled {
            warning: Some(w),
            ..Sampled::default()
        });
    }
    let labels = batch.labels();
    let mut out = Sampled::default();
    for ((a, p), c) in cands {
        match c.choose(rng) {
            Some(&neg) => out.triplets.push(Triplet {
                anchor: a,
                positive: p,
                negative: neg,
            }),
            None => {
                let others: Vec<usize> = (0..batch.len()).filter(|&j| labels[j] != labels[a]).collect();
                out.fallback.push(Triplet {
                    anchor: a,
                    positive: p,
                    negative: *others.choose(rng).expect("two classes present"),
                });
            }
        }
    }
    Ok(out)
}

/// One tuple per anchor that has a positive: a random positive and one
/// random member of every other class in the batch.
pub fn sample_npair<R: Rng + ?Sized>(batch: &FeatureBatch, rng: &mut R) -> Vec<NTuple> {
    let members = batch.class_members();
    if members.len() < 2 {
        return Vec::new();
    }
    let labels = batch.labels();
    let mut out = Vec::new();
    for a in 0..batch.len() {
        let positives: Vec<usize> = members[&labels[a]].iter().copied().filter(|&p| p != a).collect();
        let Some(&positive) = positives.choose(rng) else {
            continue;
        };
        let negatives = members
            .iter()
            .filter(|(&c, _)| c != labels[a])
            .map(|(_, m)| *m.choose(rng).expect("class has members"))
            .collect();
        out.push(NTuple {
            anchor: a,
            positive,
            negatives,
        });
    }
    out
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn batch(rows: &[Vec<f64>], labels: &[usize]) -> FeatureBatch {
        FeatureBatch::new(Tensor::from_rows(rows).unwrap(), labels.to_vec()).unwrap()
    }

    fn naive_dist(a: &[f64], b: &[f64]) -> f64 {
        let mut s = 0.0;
        for i in 0..a.len() {
            s += (a[i] - b[i]).powi(2);
        }
        s.sqrt()
    }

    fn random_batch(rng: &mut ChaCha8Rng, n: usize, d: usize, classes: usize) -> FeatureBatch {
        let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
        batch(&rows, &labels)
    }

    #[test]
    fn distance_examples() {
        let b = batch(&[vec![1.0, 2.0], vec![1.0, 2.0]], &[0, 1]);
        assert!(pairwise_distances(&b).data().iter().all(|&v| v == 0.0));
        let b = batch(&[vec![1.0, 0.0], vec![0.0, 1.0]], &[0, 1]);
        let d = pairwise_distances(&b);
        assert_eq!(d.data(), &[0.0, 2f64.sqrt(), 2f64.sqrt(), 0.0]);

        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = random_batch(&mut rng, 5, 3, 2);
        let d = pairwise_distances(&b);
        for i in 0..5 {
            for j in 0..5 {
                let o = naive_dist(b.features().row(i), b.features().row(j));
                assert!((d.data()[i * 5 + j] - o).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn batch_validation() {
        assert!(FeatureBatch::new(Tensor::matrix(1, 2, vec![0.0, 1.0]).unwrap(), vec![0]).is_err());
        assert!(FeatureBatch::new(Tensor::matrix(2, 1, vec![0.0, 1.0]).unwrap(), vec![0]).is_err());
    }

    #[test]
    fn easy_single_class_is_empty_with_warning() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = batch(&[vec![0.0], vec![1.0], vec![2.0]], &[4, 4, 4]);
        let s = sample_easy(&b, 3, &mut rng);
        assert!(s.triplets.is_empty());
        assert_eq!(s.warning, Some(SamplerWarning::SingleClass));
    }

    #[test]
    fn easy_two_by_two_contract() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let b = batch(&[vec![0.0], vec![0.1], vec![5.0], vec![5.1]], &[0, 0, 1, 1]);
        let s = sample_easy(&b, 5, &mut rng);
        assert_eq!(s.triplets.len(), 20);
        assert!(s.triplets.iter().all(|t| t.is_valid(b.labels())));
    }

    /// Each eligible negative of anchor 0 appears with frequency 1/#eligible
    /// within three binomial standard deviations.
    #[test]
    fn easy_negatives_are_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let labels = [0, 0, 1, 1, 2, 3];
        let rows: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64]).collect();
        let b = batch(&rows, &labels);
        let draws = 10_000;
        let s = sample_easy(&b, draws, &mut rng);
        let mut counts = [0usize; 6];
        for t in s.triplets.iter().filter(|t| t.anchor == 0) {
            counts[t.negative] += 1;
        }
        let p = 0.25;
        let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
        for neg in 2..6 {
            let dev = (counts[neg] as f64 - draws as f64 * p).abs();
            assert!(dev < 3.0 * sigma, "negative {neg}: {} draws", counts[neg]);
        }
    }

    #[test]
    fn hard_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let sep = batch(&[vec![0.0], vec![0.1], vec![10.0], vec![10.1]], &[0, 0, 1, 1]);
        assert!(sample_hard(&sep, &mut rng).triplets.is_empty());

        // a=0, p=1.0, n1=0.5, n2=2.0: only n1 is closer than the positive.
        let b = batch(&[vec![0.0], vec![1.0], vec![0.5], vec![2.0]], &[0, 0, 1, 2]);
        for _ in 0..50 {
            let s = sample_hard(&b, &mut rng);
            for t in s.triplets.iter().filter(|t| t.anchor == 0 && t.positive == 1) {
                assert_eq!(t.negative, 2);
            }
            assert!(s.triplets.iter().any(|t| t.anchor == 0 && t.positive == 1));
        }
    }

    #[test]
    fn hard_triplets_recheck_with_naive_distances() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let b = random_batch(&mut rng, 12, 3, 3);
            for t in sample_hard(&b, &mut rng).triplets {
                assert!(t.is_valid(b.labels()));
                let f = b.features();
                let dp = naive_dist(f.row(t.anchor), f.row(t.positive));
                let dn = naive_dist(f.row(t.anchor), f.row(t.negative));
                assert!(dn < dp);
            }
        }
    }

    #[test]
    fn semihard_margin_example() {
        // d+ = 0.5, candidates at d- = 0.502 and 0.6 with margin 0.01.
        let b = batch(&[vec![0.0], vec![0.5], vec![0.502], vec![0.6]], &[0, 0, 1, 2]);
        let c = semihard_candidates(&b, 0.01).unwrap();
        let (_, eligible) = c.iter().find(|(pair, _)| *pair == (0, 1)).unwrap();
        assert_eq!(eligible, &vec![2]);
        // A huge margin leaves only d+ < d-.
        let c = semihard_candidates(&b, 1e9).unwrap();
        let (_, eligible) = c.iter().find(|(pair, _)| *pair == (0, 1)).unwrap();
        assert_eq!(eligible, &vec![2, 3]);
        assert!(matches!(semihard_candidates(&b, 0.0), Err(Error::Parameter(_))));
        assert!(matches!(semihard_candidates(&b, -1.0), Err(Error::Parameter(_))));
    }

    /// Exhaustive enumeration on a 6-point batch: every (a,p,n) combination
    /// is tested directly against both inequalities.
    #[test]
    fn semihard_matches_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..50 {
            let b = random_batch(&mut rng, 6, 2, 3);
            let margin = 0.3;
            let f = b.features();
            let y = b.labels();
            let cands = semihard_candidates(&b, margin).unwrap();
            let mut expected = Vec::new();
            for a in 0..6 {
                for p in 0..6 {
                    if a == p || y[a] != y[p] {
                        continue;
                    }
                    let dp = naive_dist(f.row(a), f.row(p));
                    let ns: Vec<usize> = (0..6)
                        .filter(|&n| {
                            let dn = naive_dist(f.row(a), f.row(n));
                            y[n] != y[a] && dp < dn && dn - dp < margin
                        })
                        .collect();
                    expected.push(((a, p), ns));
                }
            }
            assert_eq!(cands, expected);
            let s = sample_semihard(&b, margin, &mut rng).unwrap();
            for t in &s.triplets {
                let (_, ns) = expected.iter().find(|(k, _)| *k == (t.anchor, t.positive)).unwrap();
                assert!(ns.contains(&t.negative));
            }
            for t in &s.fallback {
                let (_, ns) = expected.iter().find(|(k, _)| *k == (t.anchor, t.positive)).unwrap();
                assert!(ns.is_empty());
                assert!(t.is_valid(y));
            }
            assert_eq!(s.triplets.len() + s.fallback.len(), expected.len());
        }
    }

    #[test]
    fn npair_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let b = batch(
            &[vec![0.0], vec![0.1], vec![1.0], vec![1.1], vec![2.0], vec![2.1]],
            &[0, 0, 1, 1, 2, 2],
        );
        let t = sample_npair(&b, &mut rng);
        assert_eq!(t.len(), 6);
        assert!(t.iter().all(|t| t.negatives.len() == 2 && t.is_valid(b.labels())));

        let b = batch(&[vec![0.0], vec![0.1], vec![1.0], vec![1.1]], &[0, 0, 1, 1]);
        let t = sample_npair(&b, &mut rng);
        assert!(t.iter().all(|t| t.negatives.len() == 1));

        // Singleton classes cannot anchor but still serve as negatives.
        let b = batch(&[vec![0.0], vec![0.1], vec![1.0]], &[0, 0, 1]);
        let t = sample_npair(&b, &mut rng);
        assert_eq!(t.len(), 2);
        assert!(t.iter().all(|t| t.negatives == vec![2]));
    }

    #[test]
    fn npair_negative_labels_cover_other_classes() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..100 {
            let classes = rng.random_range(2..6);
            let b = random_batch(&mut rng, 3 * classes, 2, classes);
            for t in sample_npair(&b, &mut rng) {
                let mut got: Vec<usize> = t.negatives.iter().map(|&j| b.labels()[j]).collect();
                got.sort_unstable();
                let want: Vec<usize> = (0..classes).filter(|&c| c != b.labels()[t.anchor]).collect();
                assert_eq!(got, want);
            }
        }
    }

    #[test]
    fn fixed_seed_gives_identical_streams() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let b = random_batch(&mut rng, 16, 3, 4);
        let run = |seed| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            (
                sample_easy(&b, 2, &mut r),
                sample_semihard(&b, 0.2, &mut r).unwrap(),
                sample_npair(&b, &mut r),
            )
        };
        assert_eq!(run(11), run(11));
    }
}
