//! Discounted returns, per-trajectory advantage normalization, and the
//! GPOMDP-style gradient estimate.
//!
//! Gradients here point uphill on expected return: a trajectory contributes
//! `Σ_t A(t)·∇ log π(a_t | o_t)`. The reported training loss is the
//! descent-signed surrogate `−(1/B)·Σ_τ Σ_t A(t)·log π(a_t | o_t)`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{log_prob_and_grad, policy_log_prob, ActionFractions, Observation, PolicyParams};

/// Flat gradient (or update direction) over all policy parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientVector {
    pub values: Vec<f64>,
}

impl GradientVector {
    pub fn new(values: Vec<f64>) -> Self {
        Self { values }
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            values: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &GradientVector, scale: f64) {
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += scale * b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.values.iter_mut().for_each(|v| *v *= factor);
    }

    pub fn sub(&self, other: &GradientVector) -> GradientVector {
        GradientVector::new(self.values.iter().zip(&other.values).map(|(a, b)| a - b).collect())
    }

    pub fn dot(&self, other: &GradientVector) -> f64 {
        self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn distance(&self, other: &GradientVector) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    /// Mean of equally sized vectors, summed in slice order.
    pub fn mean(vectors: &[GradientVector]) -> Result<GradientVector> {
        let first = vectors.first().ok_or(Error::EmptyBatch)?;
        let mut out = GradientVector::zeros(first.dim());
        for v in vectors {
            if v.dim() != first.dim() {
                return Err(Error::DimensionMismatch {
                    expected: first.dim(),
                    actual: v.dim(),
                });
            }
            out.add_scaled(v, 1.0);
        }
        out.scale(1.0 / vectors.len() as f64);
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimatorConfig {
    pub discount: f64,
    pub advantage_eps: f64,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            discount: 0.9,
            advantage_eps: 1e-8,
        }
    }
}

impl EstimatorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.discount > 0.0 && self.discount <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "discount must be in (0, 1], got {}",
                self.discount
            )));
        }
        if !(self.advantage_eps > 0.0) {
            return Err(Error::InvalidArgument("advantage_eps must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub observation: Observation,
    pub action: ActionFractions,
    pub reward: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub steps: Vec<Step>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn rewards(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.reward).collect()
    }

    pub fn total_reward(&self) -> f64 {
        self.steps.iter().map(|s| s.reward).sum()
    }

    /// `Σ_t log π(a_t | o_t)` under `params`.
    pub fn log_prob(&self, params: &PolicyParams) -> Result<f64> {
        self.steps
            .iter()
            .map(|s| policy_log_prob(params, &s.observation, &s.action))
            .sum()
    }
}

/// Discounted return from each step through the end of the trajectory.
pub fn returns(rewards: &[f64], discount: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for (t, r) in rewards.iter().enumerate().rev() {
        acc = r + discount * acc;
        out[t] = acc;
    }
    out
}

/// Standardizes returns with the population std, floored at `eps`.
pub fn advantages(returns: &[f64], eps: f64) -> Vec<f64> {
    if returns.is_empty() {
        return Vec::new();
    }
    let n = returns.len() as f64;
    let mean = returns.iter().sum::<f64>() / n;
    let var = returns.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    if std <= eps {
        return vec![0.0; returns.len()];
    }
    returns.iter().map(|r| (r - mean) / std).collect()
}

pub fn trajectory_advantages(traj: &Trajectory, cfg: &EstimatorConfig) -> Vec<f64> {
    advantages(&returns(&traj.rewards(), cfg.discount), cfg.advantage_eps)
}

/// `Σ_t A(t)·∇ log π` and `Σ_t A(t)·log π` for fixed advantages.
pub fn weighted_score(
    traj: &Trajectory,
    params: &PolicyParams,
    adv: &[f64],
) -> Result<(GradientVector, f64)> {
    if adv.len() != traj.len() {
        return Err(Error::DimensionMismatch {
            expected: traj.len(),
            actual: adv.len(),
        });
    }
    let mut g = GradientVector::zeros(params.dim());
    let mut surrogate = 0.0;
    for (step, &a) in traj.steps.iter().zip(adv) {
        if a == 0.0 {
            continue;
        }
        let (lp, grad) = log_prob_and_grad(params, &step.observation, &step.action)?;
        g.add_scaled(&grad, a);
        surrogate += a * lp;
    }
    Ok((g, surrogate))
}

pub fn trajectory_gradient(
    traj: &Trajectory,
    params: &PolicyParams,
    cfg: &EstimatorConfig,
) -> Result<GradientVector> {
    if traj.is_empty() {
        return Err(Error::EmptyBatch);
    }
    Ok(weighted_score(traj, params, &trajectory_advantages(traj, cfg))?.0)
}

/// Batch estimate and loss metric, as returned by [`batch_gradient_with_loss`].
#[derive(Debug, Clone, PartialEq)]
pub struct BatchEstimate {
    pub gradient: GradientVector,
    pub loss: f64,
    pub mean_total_reward: f64,
}

/// Per-trajectory work runs in parallel; the reduction is in batch order.
pub fn batch_gradient_with_loss(
    trajs: &[Trajectory],
    params: &PolicyParams,
    cfg: &EstimatorConfig,
) -> Result<BatchEstimate> {
    if trajs.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let parts: Vec<(GradientVector, f64)> = trajs
        .par_iter()
        .map(|t| weighted_score(t, params, &trajectory_advantages(t, cfg)))
        .collect::<Result<_>>()?;
    let b = trajs.len() as f64;
    let mut gradient = GradientVector::zeros(params.dim());
    let mut surrogate = 0.0;
    for (g, s) in &parts {
        gradient.add_scaled(g, 1.0 / b);
        surrogate += s;
    }
    Ok(BatchEstimate {
        gradient,
        loss: -surrogate / b,
        mean_total_reward: trajs.iter().map(Trajectory::total_reward).sum::<f64>() / b,
    })
}

pub fn batch_gradient(
    trajs: &[Trajectory],
    params: &PolicyParams,
    cfg: &EstimatorConfig,
) -> Result<GradientVector> {
    Ok(batch_gradient_with_loss(trajs, params, cfg)?.gradient)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::sample_action;
    use crate::rng::stream;
    use approx::assert_relative_eq;
    use rand::Rng;

    #[test]
    fn return_examples() {
        assert_eq!(returns(&[1.0, 1.0], 0.9), vec![1.9, 1.0]);
        assert_eq!(returns(&[3.0, -2.0, 5.0], 0.0), vec![3.0, -2.0, 5.0]);
        assert_eq!(returns(&[4.0], 0.5), vec![4.0]);
        let r = returns(&[0.3, -1.2, 2.5, 0.7], 0.95);
        for t in 0..3 {
            assert_relative_eq!(r[t], [0.3, -1.2, 2.5][t] + 0.95 * r[t + 1], max_relative = 1e-12);
        }
    }

    #[test]
    fn advantage_examples() {
        assert_eq!(advantages(&[1.0, 3.0], 1e-8), vec![-1.0, 1.0]);
        assert_eq!(advantages(&[2.0; 5], 1e-8), vec![0.0; 5]);
        let a = advantages(&[1.0, 4.0, -2.0, 7.5], 1e-8);
        let n = a.len() as f64;
        let mean = a.iter().sum::<f64>() / n;
        let std = (a.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt();
        assert!(mean.abs() < 1e-12);
        assert!((std - 1.0).abs() < 1e-9);
        let shifted = advantages(&[11.0, 14.0, 8.0, 17.5], 1e-8);
        for (x, y) in a.iter().zip(&shifted) {
            assert_relative_eq!(x, y, max_relative = 1e-12);
        }
    }

    fn random_traj(params: &PolicyParams, len: usize, seed: u64) -> Trajectory {
        let mut rng = stream(seed, &[]);
        let steps = (0..len)
            .map(|_| {
                let mut o = Observation::zeros(params.n_hotspots, params.n_services);
                o.features.iter_mut().for_each(|x| *x = rng.random_range(0.0..1.5));
                let a = params.forward(&o).unwrap();
                let action = sample_action(&a, params.n_hotspots, params.n_services, &mut rng).unwrap();
                Step {
                    observation: o,
                    action,
                    reward: rng.random_range(-5.0..5.0),
                }
            })
            .collect();
        Trajectory { steps }
    }

    #[test]
    fn single_step_and_duplicates() {
        let p = PolicyParams::new(2, 1, 8, 1);
        let cfg = EstimatorConfig::default();
        let t1 = random_traj(&p, 1, 3);
        // One step: advantage is 0 by the zero-variance convention.
        assert_eq!(trajectory_gradient(&t1, &p, &cfg).unwrap(), GradientVector::zeros(p.dim()));
        let t = random_traj(&p, 4, 4);
        let g1 = batch_gradient(std::slice::from_ref(&t), &p, &cfg).unwrap();
        assert_eq!(g1, trajectory_gradient(&t, &p, &cfg).unwrap());
        let g2 = batch_gradient(&[t.clone(), t.clone()], &p, &cfg).unwrap();
        for (a, b) in g1.values.iter().zip(&g2.values) {
            assert_relative_eq!(a, b, max_relative = 1e-12, epsilon = 1e-300);
        }
        assert!(matches!(batch_gradient(&[], &p, &cfg), Err(Error::EmptyBatch)));
    }

    #[test]
    fn batch_is_linear_in_sub_batches() {
        let p = PolicyParams::new(2, 2, 8, 2);
        let cfg = EstimatorConfig::default();
        let trajs: Vec<Trajectory> = (0..5).map(|s| random_traj(&p, 3, 10 + s)).collect();
        let all = batch_gradient(&trajs, &p, &cfg).unwrap();
        let mut combo = batch_gradient(&trajs[..2], &p, &cfg).unwrap();
        combo.scale(2.0 / 5.0);
        combo.add_scaled(&batch_gradient(&trajs[2..], &p, &cfg).unwrap(), 3.0 / 5.0);
        assert!(all.distance(&combo) <= 1e-12 * all.norm().max(1.0));
    }

    #[test]
    fn trajectory_gradient_matches_frozen_advantage_fd() {
        let cfg = EstimatorConfig::default();
        for seed in 0..5 {
            let p = PolicyParams::new(2, 2, 6, seed);
            let t = random_traj(&p, 4, 100 + seed);
            let adv = trajectory_advantages(&t, &cfg);
            let g = trajectory_gradient(&t, &p, &cfg).unwrap();
            let step = 1e-5;
            let fd: Vec<f64> = (0..p.dim())
                .map(|i| {
                    let mut a = p.values.clone();
                    a[i] += step;
                    let mut b = p.values.clone();
                    b[i] -= step;
                    let sp = weighted_score(&t, &p.with_values(a).unwrap(), &adv).unwrap().1;
                    let sm = weighted_score(&t, &p.with_values(b).unwrap(), &adv).unwrap().1;
                    (sp - sm) / (2.0 * step)
                })
                .collect();
            let fd = GradientVector::new(fd);
            let err = g.sub(&fd).norm() / g.norm().max(fd.norm());
            assert!(err < 1e-4, "{err}");
        }
    }
}
