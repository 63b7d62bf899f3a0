//! Dynamic-threshold Byzantine filtering of node gradients.
//!
//! Each round computes a scale `ε = mean + ω·std` of all pairwise gradient
//! distances, then tries a strict threshold `2ε·√(V/B)` with
//! `V = 2 ln(2N/δ)` and, if too few nodes pass, the lenient threshold `2ε`.
//! At a given threshold, candidates are nodes with more than `N/2`
//! neighbors (self included), the median is the candidate closest to the
//! candidates' mean, and the good set is every node within the threshold of
//! that median.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::GradientVector;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterConfig {
    pub delta: f64,
    pub omega_eps: f64,
    pub byz_fraction_bound: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            delta: 0.5,
            omega_eps: 1.0,
            byz_fraction_bound: 0.4,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::InvalidArgument(format!("delta must be in (0, 1), got {}", self.delta)));
        }
        if !(0.0..0.5).contains(&self.byz_fraction_bound) {
            return Err(Error::InvalidArgument(format!(
                "byzantine fraction bound must be in [0, 0.5), got {}",
                self.byz_fraction_bound
            )));
        }
        if !(self.omega_eps >= 0.0) {
            return Err(Error::InvalidArgument("omega_eps must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterReport {
    pub good_set: Vec<usize>,
    pub threshold_used: f64,
    pub epsilon: f64,
    pub median_index: Option<usize>,
    /// 1 for the strict threshold, 2 for the lenient one.
    pub stage: u8,
    pub candidate_set: Vec<usize>,
}

fn check_dims(grads: &[GradientVector]) -> Result<()> {
    if grads.len() < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 gradients, got {}", grads.len())));
    }
    let d = grads[0].dim();
    if let Some(g) = grads.iter().find(|g| g.dim() != d) {
        return Err(Error::DimensionMismatch {
            expected: d,
            actual: g.dim(),
        });
    }
    Ok(())
}

/// Symmetric `N × N` Euclidean distance matrix.
pub fn distance_matrix(grads: &[GradientVector]) -> Result<Vec<Vec<f64>>> {
    check_dims(grads)?;
    let n = grads.len();
    let upper: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| (i + 1..n).map(|j| grads[i].distance(&grads[j])).collect())
        .collect();
    let mut m = vec![vec![0.0; n]; n];
    for (i, row) in upper.iter().enumerate() {
        for (off, &d) in row.iter().enumerate() {
            let j = i + 1 + off;
            m[i][j] = d;
            m[j][i] = d;
        }
    }
    Ok(m)
}

/// Distances over unordered pairs `(i, j)`, `i < j`, in lexicographic order.
pub fn pairwise_distances(grads: &[GradientVector]) -> Result<Vec<f64>> {
    let m = distance_matrix(grads)?;
    let n = grads.len();
    Ok((0..n)
        .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
        .map(|(i, j)| m[i][j])
        .collect())
}

fn bound_from_distances(d: &[f64], omega: f64) -> f64 {
    let n = d.len() as f64;
    let mean = d.iter().sum::<f64>() / n;
    let var = d.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    mean + omega * var.sqrt()
}

/// `mean + ω·std` (population) of the pairwise distances.
pub fn dynamic_bound(grads: &[GradientVector], omega: f64) -> Result<f64> {
    Ok(bound_from_distances(&pairwise_distances(grads)?, omega))
}

/// Strict threshold `2ε·√(V/B)` with `V = 2 ln(2N/δ)`.
pub fn threshold(epsilon: f64, batch_size: usize, n_nodes: usize, delta: f64) -> f64 {
    let v = 2.0 * (2.0 * n_nodes as f64 / delta).ln();
    2.0 * epsilon * (v / batch_size as f64).sqrt()
}

/// One pass of candidate selection, median, and good-set at `thr`.
fn filter_at(grads: &[GradientVector], dist: &[Vec<f64>], thr: f64) -> (Vec<usize>, Option<usize>, Vec<usize>) {
    let n = grads.len();
    let candidates: Vec<usize> = (0..n)
        .filter(|&i| {
            let neighbors = dist[i].iter().filter(|&&d| d <= thr).count();
            2 * neighbors > n
        })
        .collect();
    if candidates.is_empty() {
        return (candidates, None, Vec::new());
    }
    let members: Vec<GradientVector> = candidates.iter().map(|&i| grads[i].clone()).collect();
    let mean = GradientVector::mean(&members).expect("non-empty, equal dims");
    let mut median = candidates[0];
    let mut best = f64::INFINITY;
    for &i in &candidates {
        let d = grads[i].distance(&mean);
        if d < best {
            best = d;
            median = i;
        }
    }
    let good: Vec<usize> = (0..n).filter(|&i| dist[median][i] <= thr).collect();
    (candidates, Some(median), good)
}

/// Runs the two-stage filter with a caller-supplied `ε` (the static-bound
/// variant passes a fixed value here).
pub fn dtbf_with_epsilon(
    grads: &[GradientVector],
    batch_size: usize,
    cfg: &FilterConfig,
    epsilon: f64,
) -> Result<FilterReport> {
    cfg.validate()?;
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    let dist = distance_matrix(grads)?;
    let n = grads.len();
    let needed = (1.0 - cfg.byz_fraction_bound) * n as f64;
    let stages = [
        (1u8, threshold(epsilon, batch_size, n, cfg.delta)),
        (2u8, 2.0 * epsilon),
    ];
    let mut report = None;
    for (stage, thr) in stages {
        let (candidate_set, median_index, good_set) = filter_at(grads, &dist, thr);
        let done = good_set.len() as f64 + 1e-9 >= needed;
        report = Some(FilterReport {
            good_set,
            threshold_used: thr,
            epsilon,
            median_index,
            stage,
            candidate_set,
        });
        if done {
            break;
        }
    }
    Ok(report.expect("two stages always run at least once"))
}

pub fn dtbf(grads: &[GradientVector], batch_size: usize, cfg: &FilterConfig) -> Result<FilterReport> {
    let epsilon = dynamic_bound(grads, cfg.omega_eps)?;
    dtbf_with_epsilon(grads, batch_size, cfg, epsilon)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn scalars(xs: &[f64]) -> Vec<GradientVector> {
        xs.iter().map(|&x| GradientVector::new(vec![x])).collect()
    }

    #[test]
    fn distance_examples() {
        assert_eq!(pairwise_distances(&scalars(&[2.0, 2.0])).unwrap(), vec![0.0]);
        assert_eq!(pairwise_distances(&scalars(&[0.0, 0.0, 10.0])).unwrap(), vec![0.0, 10.0, 10.0]);
        assert_eq!(
            pairwise_distances(&scalars(&[3.0, 3.0, 13.0])).unwrap(),
            vec![0.0, 10.0, 10.0]
        );
        assert!(pairwise_distances(&scalars(&[1.0])).is_err());
        let bad = vec![GradientVector::new(vec![1.0]), GradientVector::new(vec![1.0, 2.0])];
        assert!(matches!(pairwise_distances(&bad), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn bound_examples() {
        let g = scalars(&[0.0, 0.0, 10.0]);
        assert_relative_eq!(dynamic_bound(&g, 1.0).unwrap(), 11.380_711_874_576_984, max_relative = 1e-12);
        assert_relative_eq!(dynamic_bound(&g, 0.0).unwrap(), 20.0 / 3.0, max_relative = 1e-14);
        assert_eq!(dynamic_bound(&scalars(&[4.0; 4]), 1.0).unwrap(), 0.0);
    }

    #[test]
    fn threshold_examples() {
        assert_relative_eq!(threshold(1.0, 100, 5, 0.5), 0.489_549_366_136, max_relative = 1e-11);
        assert_eq!(threshold(0.0, 100, 5, 0.5), 0.0);
        assert_relative_eq!(
            threshold(3.0, 400, 5, 0.5),
            threshold(3.0, 100, 5, 0.5) / 2.0,
            max_relative = 1e-14
        );
    }

    #[test]
    fn outliers_are_dropped() {
        let cfg = FilterConfig::default();
        let r = dtbf(&scalars(&[1.0, 1.1, 0.9, 100.0, -80.0]), 100, &cfg).unwrap();
        assert_eq!(r.good_set, vec![0, 1, 2]);
        assert_eq!(r.stage, 1);
        assert_eq!(r.median_index, Some(0));
        assert_eq!(r.candidate_set, vec![0, 1, 2]);
        // ε = 108.68 puts the strict threshold at 53.2, which reaches -50.
        let near = dtbf(&scalars(&[1.0, 1.1, 0.9, 100.0, -50.0]), 100, &cfg).unwrap();
        assert_eq!(near.candidate_set, vec![0, 1, 2, 4]);
        assert_eq!(near.median_index, Some(2));
        assert_eq!(near.good_set, vec![0, 1, 2, 4]);
        assert_relative_eq!(near.threshold_used, 53.204_017_776_956_85, max_relative = 1e-12);
    }

    #[test]
    fn identical_gradients_all_pass_at_stage_one() {
        let r = dtbf(&scalars(&[0.5; 5]), 16, &FilterConfig::default()).unwrap();
        assert_eq!(r.good_set, vec![0, 1, 2, 3, 4]);
        assert_eq!(r.stage, 1);
    }

    #[test]
    fn permutation_relabels_good_set() {
        let cfg = FilterConfig::default();
        let xs = [1.0, 100.0, 1.1, -80.0, 0.9];
        let r = dtbf(&scalars(&xs), 100, &cfg).unwrap();
        assert_eq!(r.good_set, vec![0, 2, 4]);
        let again = dtbf(&scalars(&xs), 100, &cfg).unwrap();
        assert_eq!(r, again);
    }

    #[test]
    fn noisy_minority_is_identified() {
        let cfg = FilterConfig::default();
        let mut rng = stream(11, &[]);
        let dim = 200;
        let mut hits = 0;
        for _ in 0..100 {
            let center: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            let grads: Vec<GradientVector> = (0..5)
                .map(|n| {
                    let sigma = if n < 3 { 0.1 } else { 10.0 };
                    GradientVector::new(
                        center
                            .iter()
                            .map(|c| {
                                let z: f64 = StandardNormal.sample(&mut rng);
                                c + sigma * z
                            })
                            .collect(),
                    )
                })
                .collect();
            let r = dtbf(&grads, 128, &cfg).unwrap();
            hits += (r.good_set == vec![0, 1, 2]) as usize;
        }
        assert!(hits >= 99, "{hits}");
    }
}
