//! Online selection of triplets and quadruplets inside a batch.
//!
//! Distances are squared Euclidean, the same quantity the hinge losses use.
//! Ties are broken by the lowest batch index.

use crate::encoder::{MetricConfig, MetricMode, Mining};
use crate::error::{invalid, Result};
use crate::linalg::sq_dist;
use crate::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MinedTuple {
    Triplet {
        anchor: usize,
        positive: usize,
        negative: usize,
    },
    /// `(i, j)` share a class, `k` and `l` come from two further classes.
    Quadruplet {
        i: usize,
        j: usize,
        k: usize,
        l: usize,
    },
}

fn argmin_by<T: Scalar>(candidates: impl Iterator<Item = usize>, key: impl Fn(usize) -> T) -> Option<usize> {
    let mut best: Option<(usize, T)> = None;
    for c in candidates {
        let v = key(c);
        if best.is_none_or(|(_, b)| v < b) {
            best = Some((c, v));
        }
    }
    best.map(|(c, _)| c)
}

/// Mines tuples from the batch `embeddings` (one row per sample) with class
/// `labels`.
///
/// Hard mining yields one tuple per anchor: its farthest positive and closest
/// negative. Semi-hard mining yields one tuple per (anchor, positive) pair,
/// choosing the closest negative with `d(a,p) < d(a,n) < d(a,p) + margin`
/// and falling back to the closest negative overall. For quadruplets the
/// extra sample `l` is the one nearest to `k` among classes other than those
/// of the anchor and of `k`.
pub fn mine_pairs<T: Scalar>(
    embeddings: &[Vec<T>],
    labels: &[usize],
    config: &MetricConfig,
) -> Result<Vec<MinedTuple>> {
    let n = embeddings.len();
    if labels.len() != n {
        return Err(invalid(format!("{n} embeddings but {} labels", labels.len())));
    }
    let mut classes: Vec<usize> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    let need = if config.mode == MetricMode::Quadruplet { 3 } else { 2 };
    if classes.len() < need {
        return Err(invalid(format!("batch holds {} classes, {:?} mining needs {need}", classes.len(), config.mode)));
    }
    let has_pair = classes.iter().any(|&c| labels.iter().filter(|&&l| l == c).count() >= 2);
    if !has_pair {
        return Err(invalid("batch has no class with two samples"));
    }

    let d = |a: usize, b: usize| sq_dist(&embeddings[a], &embeddings[b]);
    let margin = T::lit(match config.mode {
        MetricMode::Triplet => config.alpha_margin,
        MetricMode::Quadruplet => config.alpha1,
    });

    let mut triplets = Vec::new();
    for a in 0..n {
        let positives = (0..n).filter(|&p| p != a && labels[p] == labels[a]);
        let negatives = || (0..n).filter(|&x| labels[x] != labels[a]);
        let hardest_negative = argmin_by(negatives(), |x| d(a, x)).expect("class diversity checked");
        match config.mining {
            Mining::Hard => {
                if let Some(p) = argmin_by(positives, |p| -d(a, p)) {
                    triplets.push((a, p, hardest_negative));
                }
            }
            Mining::SemiHard => {
                for p in positives {
                    let dap = d(a, p);
                    let semi = argmin_by(
                        negatives().filter(|&x| {
                            let dan = d(a, x);
                            dap < dan && dan < dap + margin
                        }),
                        |x| d(a, x),
                    );
                    triplets.push((a, p, semi.unwrap_or(hardest_negative)));
                }
            }
        }
    }

    Ok(match config.mode {
        MetricMode::Triplet => triplets
            .into_iter()
            .map(|(anchor, positive, negative)| MinedTuple::Triplet { anchor, positive, negative })
            .collect(),
        MetricMode::Quadruplet => triplets
            .into_iter()
            .map(|(i, j, k)| {
                let l = argmin_by((0..n).filter(|&x| labels[x] != labels[i] && labels[x] != labels[k]), |x| d(k, x))
                    .expect("three classes checked");
                MinedTuple::Quadruplet { i, j, k, l }
            })
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(mode: MetricMode, mining: Mining) -> MetricConfig {
        MetricConfig { mode, mining, ..MetricConfig::default() }
    }

    #[test]
    fn semi_hard_picks_the_negative_inside_the_band() {
        // anchor at 0, positive at d² = 0.5, negatives at d² = 1 and 4.
        let e = vec![vec![0.0], vec![0.5f64.sqrt()], vec![1.0], vec![2.0]];
        let labels = [0, 0, 1, 1];
        let cfg = MetricConfig { alpha_margin: 2.0, ..config(MetricMode::Triplet, Mining::SemiHard) };
        let mined = mine_pairs(&e, &labels, &cfg).unwrap();
        assert_eq!(mined[0], MinedTuple::Triplet { anchor: 0, positive: 1, negative: 2 });
    }

    #[test]
    fn semi_hard_falls_back_to_hardest_negative() {
        // Only negative lies closer than the positive.
        let e = vec![vec![0.0], vec![3.0], vec![1.0], vec![10.0]];
        let labels = [0, 0, 1, 1];
        let mined = mine_pairs(&e, &labels, &config(MetricMode::Triplet, Mining::SemiHard)).unwrap();
        assert_eq!(mined[0], MinedTuple::Triplet { anchor: 0, positive: 1, negative: 2 });
    }

    #[test]
    fn hard_mining_gives_one_tuple_per_anchor() {
        let e: Vec<Vec<f64>> = (0..12).map(|i| vec![(i % 4) as f64, (i / 4) as f64 * 0.1]).collect();
        let labels: Vec<usize> = (0..12).map(|i| i / 4).collect();
        let mined = mine_pairs(&e, &labels, &config(MetricMode::Triplet, Mining::Hard)).unwrap();
        assert_eq!(mined.len(), 12);
        // anchor 0 at (0,0): farthest positive is 3 at (3,0); closest negative
        // is 4 at (0,0.1).
        assert_eq!(mined[0], MinedTuple::Triplet { anchor: 0, positive: 3, negative: 4 });
    }

    #[test]
    fn ties_resolve_to_lowest_index() {
        let e = vec![vec![0.0], vec![1.0], vec![-1.0], vec![2.0], vec![-2.0]];
        let labels = [0, 0, 0, 1, 1];
        let mined = mine_pairs(&e, &labels, &config(MetricMode::Triplet, Mining::Hard)).unwrap();
        assert_eq!(mined[0], MinedTuple::Triplet { anchor: 0, positive: 1, negative: 3 });
    }

    #[test]
    fn quadruplet_second_pair_avoids_anchor_and_negative_classes() {
        let e: Vec<Vec<f64>> = (0..9).map(|i| vec![i as f64]).collect();
        let labels = [0, 0, 0, 1, 1, 1, 2, 2, 2];
        for mining in [Mining::Hard, Mining::SemiHard] {
            for t in mine_pairs(&e, &labels, &config(MetricMode::Quadruplet, mining)).unwrap() {
                let MinedTuple::Quadruplet { i, j, k, l } = t else { panic!("expected quadruplet") };
                assert_eq!(labels[i], labels[j]);
                assert_ne!(labels[i], labels[k]);
                assert_ne!(labels[i], labels[l]);
                assert_ne!(labels[k], labels[l]);
            }
        }
    }

    #[test]
    fn rejects_batches_without_diversity() {
        let e = vec![vec![0.0]; 4];
        assert!(mine_pairs(&e, &[0, 0, 0, 0], &config(MetricMode::Triplet, Mining::Hard)).is_err());
        assert!(mine_pairs(&e, &[0, 0, 1, 1], &config(MetricMode::Quadruplet, Mining::Hard)).is_err());
        assert!(mine_pairs(&e, &[0, 1, 2, 3], &config(MetricMode::Triplet, Mining::Hard)).is_err());
    }
}
