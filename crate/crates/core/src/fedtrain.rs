//! Federated training loop with Byzantine-resilient aggregation.
//!
//! Each epoch every node rolls out the broadcast policy in joint auctions,
//! sends a batch gradient to the master (Byzantine nodes send a noisy one),
//! the master filters and averages the messages into an anchor gradient
//! `μ`, then runs a geometric number of variance-reduced steps on
//! minibatches from virtual auctions against the epoch's snapshot policy.
//!
//! All randomness comes from streams derived from the run seed and the
//! (epoch, episode, node) path, so runs are reproducible regardless of how
//! rayon schedules the episodes.

use std::fmt::Write as _;
use std::io::Write;

use rand::Rng;
use rand_distr::{Distribution, Geometric, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::auction::{run_honest_auction, sp_utility, AuctionResult};
use crate::env::{sample_hotspots, DemandSummary, ScenarioConfig};
use crate::error::{Error, Result};
use crate::estimator::{
    batch_gradient_with_loss, trajectory_advantages, weighted_score, EstimatorConfig, GradientVector,
    Step, Trajectory,
};
use crate::filter::{dtbf_with_epsilon, dynamic_bound, pairwise_distances, FilterConfig, FilterReport};
use crate::policy::{encode_demand, sample_action, to_bid, ObservationScales, PolicyParams, DEFAULT_HIDDEN};
use crate::rng::{stream, SimRng};

const TAG_BATCH: u64 = 1;
const TAG_LOCAL_ENV: u64 = 2;
const TAG_LOCAL_ACT: u64 = 3;
const TAG_BYZ: u64 = 4;
const TAG_INNER: u64 = 5;
const TAG_VIRTUAL_ENV: u64 = 6;
const TAG_VIRTUAL_ACT: u64 = 7;
const TAG_EVAL_ENV: u64 = 8;
const TAG_EVAL_ACT: u64 = 9;
const TAG_INIT: u64 = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FilterMode {
    /// Dynamic-threshold filtering with a fresh `ε` every epoch.
    Dtbf,
    /// Same filter with `ε` frozen at its epoch-0 value.
    Static,
    /// Average every message.
    None,
    /// No federation: every node updates its own policy from its own gradient.
    NoFed,
}

impl std::str::FromStr for FilterMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dtbf" => Ok(Self::Dtbf),
            "static" => Ok(Self::Static),
            "none" => Ok(Self::None),
            "no-fed" => Ok(Self::NoFed),
            _ => Err(Error::InvalidArgument(format!("unknown filter mode `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerMode {
    Plain,
    Adam,
}

impl std::str::FromStr for OptimizerMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plain" => Ok(Self::Plain),
            "adam" => Ok(Self::Adam),
            _ => Err(Error::InvalidArgument(format!("unknown optimizer `{s}`"))),
        }
    }
}

/// Which policy sits in the numerator of the importance weight.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RatioDirection {
    /// `p(τ | θ_Re) / p(τ | θ_m)`, the unbiased snapshot correction.
    Unbiased,
    /// `p(τ | θ_m) / p(τ | θ_Re)`.
    PaperLiteral,
}

impl std::str::FromStr for RatioDirection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unbiased" => Ok(Self::Unbiased),
            "paper-literal" => Ok(Self::PaperLiteral),
            _ => Err(Error::InvalidArgument(format!("unknown ratio direction `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Inclusive range for the per-epoch batch size.
    pub batch_range: (usize, usize),
    pub mini_batch: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerMode,
    pub byz_node_ids: Vec<usize>,
    pub byz_noise_scale: f64,
    pub filter_mode: FilterMode,
    pub estimator: EstimatorConfig,
    pub filter: FilterConfig,
    pub ratio: RatioDirection,
    pub weight_clip: f64,
    pub hidden_dim: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_range: (120, 130),
            mini_batch: 64,
            learning_rate: 9e-5,
            optimizer: OptimizerMode::Adam,
            byz_node_ids: Vec::new(),
            byz_noise_scale: 10.0,
            filter_mode: FilterMode::Dtbf,
            estimator: EstimatorConfig::default(),
            filter: FilterConfig::default(),
            ratio: RatioDirection::Unbiased,
            weight_clip: 10.0,
            hidden_dim: DEFAULT_HIDDEN,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, n_sps: usize) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        let (lo, hi) = self.batch_range;
        if lo == 0 || lo > hi {
            return bad(format!("batch range [{lo}, {hi}] is empty or starts at 0"));
        }
        if self.mini_batch == 0 || self.mini_batch > lo {
            return bad(format!("mini batch {} must be in [1, {lo}]", self.mini_batch));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning rate must be positive".into());
        }
        if let Some(id) = self.byz_node_ids.iter().find(|&&i| i >= n_sps) {
            return bad(format!("byzantine id {id} out of range for {n_sps} nodes"));
        }
        let mut ids = self.byz_node_ids.clone();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != self.byz_node_ids.len() {
            return bad("byzantine ids contain duplicates".into());
        }
        if 2 * ids.len() >= n_sps {
            return bad(format!(
                "{} byzantine nodes out of {n_sps}: honest nodes must be a strict majority",
                ids.len()
            ));
        }
        if !(self.byz_noise_scale >= 0.0) {
            return bad("byzantine noise scale must be non-negative".into());
        }
        if !(self.weight_clip > 0.0) {
            return bad("weight clip must be positive".into());
        }
        if self.hidden_dim == 0 {
            return bad("hidden width must be positive".into());
        }
        self.estimator.validate()?;
        self.filter.validate()
    }

    fn is_byzantine(&self, n: usize) -> bool {
        self.byz_node_ids.contains(&n)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NodeKind {
    Honest,
    Byzantine,
}

#[derive(Debug, Clone)]
pub struct NodeState {
    pub node_id: usize,
    pub kind: NodeKind,
    pub params: PolicyParams,
}

/// Per-epoch metrics. Optional fields are empty when the filter did not run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub batch_size: usize,
    pub inner_steps: usize,
    pub loss: f64,
    pub mean_total_reward: f64,
    pub total_reward_per_sp: Vec<f64>,
    pub mean_pairwise_grad_distance: f64,
    pub epsilon: Option<f64>,
    pub threshold: Option<f64>,
    pub filter_stage: Option<u8>,
    pub good_count: usize,
    pub good_set: Vec<usize>,
    pub messages: usize,
}

/// Adam-style or plain ascent state.
#[derive(Debug, Clone)]
pub struct Optimizer {
    pub mode: OptimizerMode,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u32,
}

impl Optimizer {
    pub fn new(mode: OptimizerMode, learning_rate: f64, dim: usize) -> Self {
        Self {
            mode,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            t: 0,
        }
    }

    /// One ascent step along `direction`.
    pub fn update(&mut self, params: &PolicyParams, direction: &GradientVector) -> Result<PolicyParams> {
        if direction.dim() != params.dim() {
            return Err(Error::DimensionMismatch {
                expected: params.dim(),
                actual: direction.dim(),
            });
        }
        let lr = self.learning_rate;
        let values: Vec<f64> = match self.mode {
            OptimizerMode::Plain => params
                .values
                .iter()
                .zip(&direction.values)
                .map(|(p, g)| p + lr * g)
                .collect(),
            OptimizerMode::Adam => {
                self.t += 1;
                let c1 = 1.0 - self.beta1.powi(self.t as i32);
                let c2 = 1.0 - self.beta2.powi(self.t as i32);
                let mut out = params.values.clone();
                for i in 0..out.len() {
                    let g = direction.values[i];
                    self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
                    self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
                    out[i] += lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + self.eps);
                }
                out
            }
        };
        params.with_values(values)
    }
}

/// Adds isotropic Gaussian noise with per-coordinate std `scale·‖g‖/√dim`.
pub fn byz_corrupt<R: Rng + ?Sized>(grad: &GradientVector, scale: f64, rng: &mut R) -> GradientVector {
    let dim = grad.dim().max(1);
    let std = scale * grad.norm() / (dim as f64).sqrt();
    if !(std > 0.0) {
        return grad.clone();
    }
    let noise = Normal::new(0.0, std).expect("positive finite std");
    GradientVector::new(grad.values.iter().map(|g| g + noise.sample(rng)).collect())
}

/// Arithmetic mean of the accepted messages.
pub fn aggregate(good: &[&GradientVector]) -> Result<GradientVector> {
    let first = good.first().ok_or(Error::EmptyBatch)?;
    let mut out = GradientVector::zeros(first.dim());
    for g in good {
        out.add_scaled(g, 1.0 / good.len() as f64);
    }
    Ok(out)
}

/// `M ~ Geom(B / (B + b))` on `{1, 2, ...}`.
pub fn sample_inner_steps<R: Rng + ?Sized>(batch: usize, mini_batch: usize, rng: &mut R) -> usize {
    let p = batch as f64 / (batch + mini_batch) as f64;
    let failures = Geometric::new(p).expect("p in (0, 1]").sample(rng);
    1 + failures as usize
}

/// Clipped trajectory likelihood ratio between the master and snapshot
/// policies. NaN log-ratios map to 0, `+∞` to the clip.
pub fn importance_weight(
    traj: &Trajectory,
    master: &PolicyParams,
    snapshot: &PolicyParams,
    direction: RatioDirection,
    clip: f64,
) -> Result<f64> {
    let lm = traj.log_prob(master)?;
    let ls = traj.log_prob(snapshot)?;
    let log_ratio = match direction {
        RatioDirection::Unbiased => ls - lm,
        RatioDirection::PaperLiteral => lm - ls,
    };
    Ok(clip_weight(log_ratio, clip))
}

pub fn clip_weight(log_ratio: f64, clip: f64) -> f64 {
    if log_ratio.is_nan() {
        return 0.0;
    }
    log_ratio.exp().clamp(0.0, clip)
}

/// `(1/b)·Σ_j [g(τ_j | θ_m) − w_j·g(τ_j | θ_Re)] + μ`.
pub fn svrpg_step(
    master: &PolicyParams,
    snapshot: &PolicyParams,
    anchor: &GradientVector,
    trajs: &[Trajectory],
    cfg: &TrainConfig,
) -> Result<GradientVector> {
    if trajs.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let parts: Vec<GradientVector> = trajs
        .par_iter()
        .map(|t| {
            let adv = trajectory_advantages(t, &cfg.estimator);
            let (gm, _) = weighted_score(t, master, &adv)?;
            let (gs, _) = weighted_score(t, snapshot, &adv)?;
            let w = importance_weight(t, master, snapshot, cfg.ratio, cfg.weight_clip)?;
            let mut d = gm;
            d.add_scaled(&gs, -w);
            Ok(d)
        })
        .collect::<Result<_>>()?;
    let mut v = anchor.clone();
    for d in &parts {
        v.add_scaled(d, 1.0 / trajs.len() as f64);
    }
    Ok(v)
}

/// One joint episode: every player picks a bid each step from its own
/// observation, the auction resolves, and each player logs its reward.
pub fn play_episode(
    scenario: &ScenarioConfig,
    players: &[&PolicyParams],
    scales: &ObservationScales,
    env_rng: &mut SimRng,
    act_rngs: &mut [SimRng],
) -> Result<(Vec<Trajectory>, Vec<AuctionResult>)> {
    let (hh, kk) = (scenario.n_hotspots, scenario.n_services);
    let n = players.len();
    let mut trajs: Vec<Trajectory> = (0..n)
        .map(|_| Trajectory {
            steps: Vec::with_capacity(scenario.horizon),
        })
        .collect();
    let mut prev_wins = vec![vec![false; hh * kk]; n];
    let mut results = Vec::with_capacity(scenario.horizon);
    for t in 0..scenario.horizon {
        let hotspots = sample_hotspots(scenario, t, env_rng);
        let demand = DemandSummary::from_hotspots(&hotspots, kk)?;
        let mut observations = Vec::with_capacity(n);
        let mut actions = Vec::with_capacity(n);
        let mut bids = Vec::with_capacity(n);
        for (i, p) in players.iter().enumerate() {
            let obs = encode_demand(&demand, &prev_wins[i], t, scales)?;
            let alpha = p.forward(&obs)?;
            let action = sample_action(&alpha, hh, kk, &mut act_rngs[i])?;
            bids.push(to_bid(
                &action,
                &scenario.budgets_compute_hz[i],
                &scenario.budgets_bandwidth_hz[i],
            ));
            observations.push(obs);
            actions.push(action);
        }
        let result = run_honest_auction(&bids, &demand, &scenario.channel)?;
        for (i, (observation, action)) in observations.into_iter().zip(actions).enumerate() {
            trajs[i].steps.push(Step {
                observation,
                action,
                reward: sp_utility(&result, i, &scenario.utility),
            });
            prev_wins[i] = result.wins_of(i);
        }
        results.push(result);
    }
    Ok((trajs, results))
}

/// `batch` joint episodes among `nodes`; returns each node's trajectories.
pub fn local_rollout(
    nodes: &[NodeState],
    scenario: &ScenarioConfig,
    batch: usize,
    seed: u64,
    epoch: usize,
) -> Result<Vec<Vec<Trajectory>>> {
    let scales = ObservationScales::from_scenario(scenario);
    let players: Vec<&PolicyParams> = nodes.iter().map(|n| &n.params).collect();
    let episodes: Vec<Vec<Trajectory>> = (0..batch)
        .into_par_iter()
        .map(|e| {
            let mut env = stream(seed, &[TAG_LOCAL_ENV, epoch as u64, e as u64]);
            let mut acts: Vec<SimRng> = (0..nodes.len())
                .map(|i| stream(seed, &[TAG_LOCAL_ACT, epoch as u64, e as u64, i as u64]))
                .collect();
            play_episode(scenario, &players, &scales, &mut env, &mut acts).map(|r| r.0)
        })
        .collect::<Result<_>>()?;
    let mut per_node: Vec<Vec<Trajectory>> = vec![Vec::with_capacity(batch); nodes.len()];
    for ep in episodes {
        for (i, t) in ep.into_iter().enumerate() {
            per_node[i].push(t);
        }
    }
    Ok(per_node)
}

/// Master (seat 0) against `N−1` copies of the snapshot; returns the
/// master's trajectories only.
pub fn virtual_rollout(
    master: &PolicyParams,
    snapshot: &PolicyParams,
    scenario: &ScenarioConfig,
    mini_batch: usize,
    seed: u64,
    tags: &[u64],
) -> Result<Vec<Trajectory>> {
    if scenario.n_sps < 2 {
        return Err(Error::InvalidArgument("virtual auctions need N >= 2".into()));
    }
    let scales = ObservationScales::from_scenario(scenario);
    let mut players = vec![snapshot; scenario.n_sps];
    players[0] = master;
    (0..mini_batch)
        .into_par_iter()
        .map(|j| {
            let path = |tag: u64, extra: Option<u64>| {
                let mut p = vec![tag];
                p.extend_from_slice(tags);
                p.push(j as u64);
                p.extend(extra);
                p
            };
            let mut env = stream(seed, &path(TAG_VIRTUAL_ENV, None));
            let mut acts: Vec<SimRng> = (0..scenario.n_sps)
                .map(|i| stream(seed, &path(TAG_VIRTUAL_ACT, Some(i as u64))))
                .collect();
            play_episode(scenario, &players, &scales, &mut env, &mut acts)
                .map(|(mut t, _)| t.swap_remove(0))
        })
        .collect()
}

struct LocalEstimate {
    gradient: GradientVector,
    loss: f64,
    reward: f64,
}

fn local_gradients(
    trajs: &[Vec<Trajectory>],
    nodes: &[NodeState],
    cfg: &TrainConfig,
) -> Result<Vec<LocalEstimate>> {
    trajs
        .par_iter()
        .zip(nodes)
        .map(|(t, node)| {
            let est = batch_gradient_with_loss(t, &node.params, &cfg.estimator)?;
            Ok(LocalEstimate {
                gradient: est.gradient,
                loss: est.loss,
                reward: est.mean_total_reward,
            })
        })
        .collect()
}

/// The honest gradient for honest nodes, a corrupted copy for Byzantine ones.
pub fn local_gradient(
    node: &NodeState,
    trajs: &[Trajectory],
    cfg: &TrainConfig,
    rng: &mut SimRng,
) -> Result<GradientVector> {
    let g = batch_gradient_with_loss(trajs, &node.params, &cfg.estimator)?.gradient;
    Ok(match node.kind {
        NodeKind::Honest => g,
        NodeKind::Byzantine => byz_corrupt(&g, cfg.byz_noise_scale, rng),
    })
}

/// Inner variance-reduced loop for one learner starting from `snapshot`.
fn inner_loop(
    snapshot: &PolicyParams,
    anchor: &GradientVector,
    steps: usize,
    scenario: &ScenarioConfig,
    cfg: &TrainConfig,
    optimizer: &mut Optimizer,
    tags: &[u64],
) -> Result<PolicyParams> {
    let mut master = snapshot.clone();
    for m in 0..steps {
        let mut path = tags.to_vec();
        path.push(m as u64);
        let trajs = virtual_rollout(&master, snapshot, scenario, cfg.mini_batch, cfg.seed, &path)?;
        let v = svrpg_step(&master, snapshot, anchor, &trajs, cfg)?;
        master = optimizer.update(&master, &v)?;
    }
    Ok(master)
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

/// Runs training and calls `observer` after every epoch with the record and
/// the global policy (node 0's policy in no-fed mode).
pub fn train_with_observer<F>(
    scenario: &ScenarioConfig,
    cfg: &TrainConfig,
    mut observer: F,
) -> Result<(Vec<EpochRecord>, PolicyParams)>
where
    F: FnMut(&EpochRecord, &PolicyParams) -> Result<()>,
{
    scenario.validate()?;
    cfg.validate(scenario.n_sps)?;
    let n = scenario.n_sps;
    let init = PolicyParams::new(
        scenario.n_hotspots,
        scenario.n_services,
        cfg.hidden_dim,
        crate::rng::derive_seed(cfg.seed, &[TAG_INIT]),
    );
    let mut nodes: Vec<NodeState> = (0..n)
        .map(|i| NodeState {
            node_id: i,
            kind: if cfg.is_byzantine(i) {
                NodeKind::Byzantine
            } else {
                NodeKind::Honest
            },
            params: init.clone(),
        })
        .collect();
    let federated = cfg.filter_mode != FilterMode::NoFed;
    let mut optimizers: Vec<Optimizer> = (0..if federated { 1 } else { n })
        .map(|_| Optimizer::new(cfg.optimizer, cfg.learning_rate, init.dim()))
        .collect();
    let mut global = init;
    let mut anchor = GradientVector::zeros(global.dim());
    let mut static_eps: Option<f64> = None;
    let mut records = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let e = epoch as u64;
        let mut rec = EpochRecord {
            epoch,
            batch_size: 0,
            inner_steps: 0,
            loss: 0.0,
            mean_total_reward: 0.0,
            total_reward_per_sp: vec![],
            mean_pairwise_grad_distance: 0.0,
            epsilon: None,
            threshold: None,
            filter_stage: None,
            good_count: 0,
            good_set: vec![],
            messages: 0,
        };
        if federated {
            for node in nodes.iter_mut() {
                node.params = global.clone();
            }
        }
        let (lo, hi) = cfg.batch_range;
        let batch = stream(cfg.seed, &[TAG_BATCH, e]).random_range(lo..=hi);
        rec.batch_size = batch;
        let step = (|| -> Result<()> {
            let trajs = local_rollout(&nodes, scenario, batch, cfg.seed, epoch)?;
            let locals = local_gradients(&trajs, &nodes, cfg)?;
            rec.total_reward_per_sp = locals.iter().map(|l| l.reward).collect();
            rec.mean_total_reward = mean(&rec.total_reward_per_sp);
            rec.loss = mean(&locals.iter().map(|l| l.loss).collect::<Vec<_>>());
            let mut inner_rng = stream(cfg.seed, &[TAG_INNER, e]);
            let inner = sample_inner_steps(batch, cfg.mini_batch, &mut inner_rng);
            rec.inner_steps = inner;

            if !federated {
                let grads: Vec<GradientVector> = locals.into_iter().map(|l| l.gradient).collect();
                rec.mean_pairwise_grad_distance = mean(&pairwise_distances(&grads)?);
                rec.good_count = n;
                rec.good_set = (0..n).collect();
                let updated: Vec<PolicyParams> = nodes
                    .par_iter()
                    .zip(optimizers.par_iter_mut())
                    .zip(&grads)
                    .map(|((node, opt), g)| {
                        inner_loop(&node.params, g, inner, scenario, cfg, opt, &[e, node.node_id as u64])
                    })
                    .collect::<Result<_>>()?;
                for (node, p) in nodes.iter_mut().zip(updated) {
                    node.params = p;
                }
                global = nodes[0].params.clone();
                return Ok(());
            }

            let messages: Vec<GradientVector> = locals
                .into_iter()
                .enumerate()
                .map(|(i, l)| match nodes[i].kind {
                    NodeKind::Honest => l.gradient,
                    NodeKind::Byzantine => byz_corrupt(
                        &l.gradient,
                        cfg.byz_noise_scale,
                        &mut stream(cfg.seed, &[TAG_BYZ, e, i as u64]),
                    ),
                })
                .collect();
            rec.messages = messages.len();
            rec.mean_pairwise_grad_distance = mean(&pairwise_distances(&messages)?);
            let report: Option<FilterReport> = match cfg.filter_mode {
                FilterMode::Dtbf => {
                    let eps = dynamic_bound(&messages, cfg.filter.omega_eps)?;
                    Some(dtbf_with_epsilon(&messages, batch, &cfg.filter, eps)?)
                }
                FilterMode::Static => {
                    let eps = match static_eps {
                        Some(v) => v,
                        None => *static_eps.insert(dynamic_bound(&messages, cfg.filter.omega_eps)?),
                    };
                    Some(dtbf_with_epsilon(&messages, batch, &cfg.filter, eps)?)
                }
                FilterMode::None | FilterMode::NoFed => None,
            };
            let good: Vec<usize> = match &report {
                Some(r) => r.good_set.clone(),
                None => (0..n).collect(),
            };
            if let Some(r) = &report {
                rec.epsilon = Some(r.epsilon);
                rec.threshold = Some(r.threshold_used);
                rec.filter_stage = Some(r.stage);
            }
            rec.good_count = good.len();
            if !good.is_empty() {
                let accepted: Vec<&GradientVector> = good.iter().map(|&i| &messages[i]).collect();
                anchor = aggregate(&accepted)?;
            }
            rec.good_set = good;
            global = inner_loop(&global, &anchor, inner, scenario, cfg, &mut optimizers[0], &[e, u64::MAX])?;
            Ok(())
        })();
        step.map_err(|source| Error::Epoch {
            epoch,
            source: Box::new(source),
        })?;
        observer(&rec, &global)?;
        records.push(rec);
    }
    Ok((records, global))
}

pub fn train(scenario: &ScenarioConfig, cfg: &TrainConfig) -> Result<(Vec<EpochRecord>, PolicyParams)> {
    train_with_observer(scenario, cfg, |_, _| Ok(()))
}

/// Column names of the metrics CSV for `n_sps` SPs.
pub fn metrics_header(n_sps: usize) -> String {
    let mut h = String::from(
        "epoch,batch_size,inner_steps,loss,mean_total_reward,mean_pairwise_grad_distance,epsilon,threshold,filter_stage,good_count,good_set,messages",
    );
    for n in 0..n_sps {
        let _ = write!(h, ",reward_sp{n}");
    }
    h
}

fn opt<T: std::fmt::Display>(x: &Option<T>) -> String {
    x.as_ref().map(|v| v.to_string()).unwrap_or_default()
}

/// One CSV row; floats use Rust's shortest round-trip formatting.
pub fn metrics_row(r: &EpochRecord) -> String {
    let good: Vec<String> = r.good_set.iter().map(|i| i.to_string()).collect();
    let mut row = format!(
        "{},{},{},{},{},{},{},{},{},{},{},{}",
        r.epoch,
        r.batch_size,
        r.inner_steps,
        r.loss,
        r.mean_total_reward,
        r.mean_pairwise_grad_distance,
        opt(&r.epsilon),
        opt(&r.threshold),
        opt(&r.filter_stage),
        r.good_count,
        good.join(";"),
        r.messages
    );
    for v in &r.total_reward_per_sp {
        let _ = write!(row, ",{v}");
    }
    row
}

pub fn write_metrics_csv<W: Write>(records: &[EpochRecord], n_sps: usize, mut w: W) -> Result<()> {
    writeln!(w, "{}", metrics_header(n_sps))?;
    for r in records {
        writeln!(w, "{}", metrics_row(r))?;
    }
    Ok(())
}

/// Per-episode evaluation of a frozen policy shared by every SP.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeEval {
    pub episode: usize,
    /// `−Σ_t r_n(t)` per SP.
    pub negative_utility_per_sp: Vec<f64>,
    pub results: Vec<AuctionResult>,
}

impl EpisodeEval {
    pub fn mean_negative_utility(&self) -> f64 {
        mean(&self.negative_utility_per_sp)
    }
}

/// Replays `params` for every SP over `episodes` fresh seeded episodes.
pub fn evaluate(
    scenario: &ScenarioConfig,
    params: &PolicyParams,
    episodes: usize,
    seed: u64,
) -> Result<Vec<EpisodeEval>> {
    if params.n_hotspots != scenario.n_hotspots || params.n_services != scenario.n_services {
        return Err(Error::Snapshot(format!(
            "policy is for H={}, K={}; scenario has H={}, K={}",
            params.n_hotspots, params.n_services, scenario.n_hotspots, scenario.n_services
        )));
    }
    let scales = ObservationScales::from_scenario(scenario);
    let players = vec![params; scenario.n_sps];
    (0..episodes)
        .into_par_iter()
        .map(|e| {
            let mut env = stream(seed, &[TAG_EVAL_ENV, e as u64]);
            let mut acts: Vec<SimRng> = (0..scenario.n_sps)
                .map(|i| stream(seed, &[TAG_EVAL_ACT, e as u64, i as u64]))
                .collect();
            let (trajs, results) = play_episode(scenario, &players, &scales, &mut env, &mut acts)?;
            Ok(EpisodeEval {
                episode: e,
                negative_utility_per_sp: trajs.iter().map(|t| -t.total_reward()).collect(),
                results,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn desk() -> (ScenarioConfig, TrainConfig) {
        let scenario = ScenarioConfig::reference(3, 2, 2, 4, 1);
        let cfg = TrainConfig {
            epochs: 2,
            batch_range: (4, 4),
            mini_batch: 2,
            learning_rate: 1e-3,
            hidden_dim: 8,
            seed: 5,
            ..TrainConfig::default()
        };
        (scenario, cfg)
    }

    #[test]
    fn corruption_scales_with_gradient_norm() {
        let g = GradientVector::new((0..1000).map(|i| (i as f64).sin()).collect());
        let mut rng = stream(1, &[]);
        assert_eq!(byz_corrupt(&g, 0.0, &mut rng), g);
        for _ in 0..100 {
            let c = byz_corrupt(&g, 10.0, &mut rng);
            let ratio = c.distance(&g) / g.norm();
            assert!((8.0..=12.0).contains(&ratio), "{ratio}");
        }
        let a = byz_corrupt(&g, 3.0, &mut stream(9, &[]));
        let b = byz_corrupt(&g, 3.0, &mut stream(9, &[]));
        assert_eq!(a, b);
    }

    #[test]
    fn aggregate_examples() {
        let v = GradientVector::new(vec![1.0, -2.0]);
        let neg = GradientVector::new(vec![-1.0, 2.0]);
        assert_eq!(aggregate(&[&v, &v, &v]).unwrap(), v);
        assert_eq!(aggregate(&[&v, &neg]).unwrap(), GradientVector::zeros(2));
        assert!(aggregate(&[]).is_err());
    }

    #[test]
    fn inner_steps_are_geometric() {
        let mut rng = stream(2, &[]);
        let n = 100_000;
        let total: usize = (0..n).map(|_| sample_inner_steps(128, 64, &mut rng)).sum();
        let m = total as f64 / n as f64;
        assert!((m - 1.5).abs() < 0.05 * 1.5, "{m}");
        assert!((0..1000).all(|_| sample_inner_steps(10, 0, &mut rng) == 1));
    }

    #[test]
    fn weight_clipping() {
        assert_eq!(clip_weight(1e3, 10.0), 10.0);
        assert_eq!(clip_weight(f64::INFINITY, 10.0), 10.0);
        assert_eq!(clip_weight(f64::NAN, 10.0), 0.0);
        assert_eq!(clip_weight(0.0, 10.0), 1.0);
    }

    #[test]
    fn identical_policies_collapse_the_correction() {
        let (scenario, cfg) = desk();
        let p = PolicyParams::new(2, 2, 8, 3);
        let trajs = virtual_rollout(&p, &p, &scenario, 3, 1, &[0]).unwrap();
        assert!(trajs.iter().all(|t| t.len() == scenario.horizon));
        assert_eq!(importance_weight(&trajs[0], &p, &p, cfg.ratio, 10.0).unwrap(), 1.0);
        let mu = GradientVector::new(vec![0.5; p.dim()]);
        assert_eq!(svrpg_step(&p, &p, &mu, &trajs, &cfg).unwrap(), mu);
    }

    #[test]
    fn single_step_weight_matches_log_prob() {
        let mut scenario = desk().0;
        scenario.horizon = 1;
        let a = PolicyParams::new(2, 2, 8, 3);
        let b = PolicyParams::new(2, 2, 8, 4);
        let t = &virtual_rollout(&a, &b, &scenario, 1, 1, &[0]).unwrap()[0];
        let s = &t.steps[0];
        let la = crate::policy::policy_log_prob(&a, &s.observation, &s.action).unwrap();
        let lb = crate::policy::policy_log_prob(&b, &s.observation, &s.action).unwrap();
        let w = importance_weight(t, &a, &b, RatioDirection::Unbiased, 1e300).unwrap();
        assert_relative_eq!(w, (lb - la).exp(), max_relative = 1e-12);
        let wp = importance_weight(t, &a, &b, RatioDirection::PaperLiteral, 1e300).unwrap();
        assert_relative_eq!(wp, (la - lb).exp(), max_relative = 1e-12);
    }

    #[test]
    fn plain_and_adam_updates() {
        let p = PolicyParams::new(1, 1, 2, 1);
        let v = GradientVector::new((0..p.dim()).map(|i| i as f64 - 3.0).collect());
        let mut plain = Optimizer::new(OptimizerMode::Plain, 9e-5, p.dim());
        let q = plain.update(&p, &v).unwrap();
        for i in 0..p.dim() {
            assert_eq!(q.values[i], p.values[i] + 9e-5 * v.values[i]);
        }
        assert_eq!(plain.update(&p, &GradientVector::zeros(p.dim())).unwrap(), p);
        let mut adam = Optimizer::new(OptimizerMode::Adam, 1e-3, p.dim());
        let q = adam.update(&p, &v).unwrap();
        for i in 0..p.dim() {
            // First step: m̂ = g, v̂ = g², so the step is lr·g/(|g| + eps).
            let g = v.values[i];
            assert_relative_eq!(q.values[i] - p.values[i], 1e-3 * g / (g.abs() + 1e-8), max_relative = 1e-9, epsilon = 1e-15);
        }
    }

    #[test]
    fn rewards_match_offline_utility() {
        let (scenario, _) = desk();
        let p = PolicyParams::new(2, 2, 8, 3);
        let scales = ObservationScales::from_scenario(&scenario);
        let mut env = stream(4, &[]);
        let mut acts: Vec<SimRng> = (0..3).map(|i| stream(4, &[i])).collect();
        let (trajs, results) = play_episode(&scenario, &[&p, &p, &p], &scales, &mut env, &mut acts).unwrap();
        for (t, r) in results.iter().enumerate() {
            for n in 0..3 {
                assert_eq!(trajs[n].steps[t].reward, sp_utility(r, n, &scenario.utility));
            }
        }
    }

    #[test]
    fn zero_epochs_return_initial_policy() {
        let (scenario, mut cfg) = desk();
        cfg.epochs = 0;
        let (records, params) = train(&scenario, &cfg).unwrap();
        assert!(records.is_empty());
        assert_eq!(params.dim(), PolicyParams::new(2, 2, 8, 0).dim());
    }

    #[test]
    fn training_is_deterministic() {
        let (scenario, cfg) = desk();
        let (a, pa) = train(&scenario, &cfg).unwrap();
        let (b, pb) = train(&scenario, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(pa, pb);
        let mut csv = Vec::new();
        write_metrics_csv(&a, 3, &mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.starts_with("epoch,"));
    }

    #[test]
    fn no_fed_sends_no_messages() {
        let (scenario, mut cfg) = desk();
        cfg.filter_mode = FilterMode::NoFed;
        cfg.byz_node_ids = vec![2];
        let (records, _) = train(&scenario, &cfg).unwrap();
        assert!(records.iter().all(|r| r.messages == 0));
    }

    #[test]
    fn config_validation() {
        let (_, mut cfg) = desk();
        cfg.byz_node_ids = vec![3];
        assert!(cfg.validate(3).is_err());
        cfg.byz_node_ids = vec![0, 1];
        assert!(cfg.validate(3).is_err());
        cfg.byz_node_ids = vec![1, 1];
        assert!(cfg.validate(5).is_err());
        cfg.byz_node_ids = vec![1];
        assert!(cfg.validate(3).is_ok());
        cfg.byz_node_ids = vec![];
        cfg.mini_batch = 5;
        assert!(cfg.validate(3).is_err());
    }
}
