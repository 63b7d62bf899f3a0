//! Dirichlet policy over per-(service, resource) budget splits.
//!
//! A small MLP (two `tanh` hidden layers, linear output, `softplus + 1e-3`)
//! maps the fixed-size observation to `2·K·H` concentrations. Output slot
//! `(k·2 + r)·H + h` holds the concentration of hotspot `h` in the Dirichlet
//! block for service `k` and resource `r` (0 = compute, 1 = bandwidth).
//! Gradients of the log-density are computed by hand-written backprop.

use std::io::{Read, Write};

use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::{digamma, ln_gamma};

use crate::auction::BidMatrix;
use crate::env::{DemandSummary, HotspotState, ScenarioConfig};
use crate::error::{Error, Result};
use crate::estimator::GradientVector;
use crate::rng::stream;

/// Floor added after the softplus so concentrations stay away from zero.
pub const CONCENTRATION_FLOOR: f64 = 1e-3;
/// Sampled fractions are clamped to at least this before renormalizing.
pub const FRACTION_FLOOR: f64 = 1e-8;
pub const DEFAULT_HIDDEN: usize = 64;

const SNAPSHOT_MAGIC: &[u8; 8] = b"SKYPOL01";

/// Input dimension for `H` hotspots and `K` services.
pub fn observation_dim(n_hotspots: usize, n_services: usize) -> usize {
    3 * n_hotspots * n_services + n_hotspots + 1
}

/// Reference constants that bring observation features to `O(1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObservationScales {
    pub cycles: f64,
    pub bits: f64,
    pub users: f64,
    pub horizon: usize,
}

impl ObservationScales {
    pub fn from_scenario(config: &ScenarioConfig) -> Self {
        let (cycles, bits) = config.max_cell_demand();
        let users = config.user_count_choices.iter().copied().max().unwrap_or(1) as f64;
        Self {
            cycles: cycles.max(f64::MIN_POSITIVE),
            bits: bits.max(f64::MIN_POSITIVE),
            users: users.max(1.0),
            horizon: config.horizon.max(1),
        }
    }
}

/// Encoded local observation: `[cycles, bits]` per cell, users per hotspot,
/// previous win flags per cell, then `t / T`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub n_hotspots: usize,
    pub n_services: usize,
    pub features: Vec<f64>,
}

impl Observation {
    pub fn zeros(n_hotspots: usize, n_services: usize) -> Self {
        Self {
            n_hotspots,
            n_services,
            features: vec![0.0; observation_dim(n_hotspots, n_services)],
        }
    }

    /// `[cycles, bits]` feature pair of one cell.
    pub fn demand(&self, h: usize, k: usize) -> (f64, f64) {
        let i = 2 * (h * self.n_services + k);
        (self.features[i], self.features[i + 1])
    }
}

pub fn encode_demand(
    demand: &DemandSummary,
    prev_wins: &[bool],
    t: usize,
    scales: &ObservationScales,
) -> Result<Observation> {
    let (hh, kk) = (demand.n_hotspots, demand.n_services);
    let cells = hh * kk;
    if prev_wins.len() != cells {
        return Err(Error::DimensionMismatch {
            expected: cells,
            actual: prev_wins.len(),
        });
    }
    let mut features = Vec::with_capacity(observation_dim(hh, kk));
    for c in 0..cells {
        features.push(demand.required_cycles[c] / scales.cycles);
        features.push(demand.total_bits[c] / scales.bits);
    }
    features.extend(demand.user_counts.iter().map(|&u| u as f64 / scales.users));
    features.extend(prev_wins.iter().map(|&w| if w { 1.0 } else { 0.0 }));
    features.push(t as f64 / scales.horizon as f64);
    Ok(Observation {
        n_hotspots: hh,
        n_services: kk,
        features,
    })
}

pub fn encode_observation(
    hotspots: &[HotspotState],
    n_services: usize,
    prev_wins: &[bool],
    t: usize,
    scales: &ObservationScales,
) -> Result<Observation> {
    let demand = DemandSummary::from_hotspots(hotspots, n_services)?;
    encode_demand(&demand, prev_wins, t, scales)
}

/// Budget fractions, laid out like the policy output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionFractions {
    pub n_hotspots: usize,
    pub n_services: usize,
    pub values: Vec<f64>,
}

impl ActionFractions {
    pub fn uniform(n_hotspots: usize, n_services: usize) -> Self {
        Self {
            n_hotspots,
            n_services,
            values: vec![1.0 / n_hotspots as f64; 2 * n_hotspots * n_services],
        }
    }

    /// Simplex block of service `k`, resource `r`.
    pub fn block(&self, k: usize, r: usize) -> &[f64] {
        let start = (k * 2 + r) * self.n_hotspots;
        &self.values[start..start + self.n_hotspots]
    }

    pub fn validate(&self) -> Result<()> {
        if self.values.len() != 2 * self.n_hotspots * self.n_services {
            return Err(Error::DimensionMismatch {
                expected: 2 * self.n_hotspots * self.n_services,
                actual: self.values.len(),
            });
        }
        for block in self.values.chunks(self.n_hotspots) {
            let sum: f64 = block.iter().sum();
            if block.iter().any(|&x| !(x > 0.0)) || (sum - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidArgument("fractions off the simplex".into()));
            }
        }
        Ok(())
    }
}

/// Flat MLP parameters, stored as `W1, b1, W2, b2, W3, b3` with row-major
/// weights (`out × in`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub n_hotspots: usize,
    pub n_services: usize,
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub output_dim: usize,
    pub init_seed: u64,
    pub values: Vec<f64>,
}

/// Activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub input: Vec<f64>,
    pub hidden1: Vec<f64>,
    pub hidden2: Vec<f64>,
    pub logits: Vec<f64>,
    pub concentrations: Vec<f64>,
}

struct Layout {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    w3: usize,
    b3: usize,
    end: usize,
}

fn param_count(input: usize, hidden: usize, output: usize) -> usize {
    hidden * input + hidden + hidden * hidden + hidden + output * hidden + output
}

fn softplus(z: f64) -> f64 {
    if z > 30.0 {
        z
    } else if z < -30.0 {
        z.exp()
    } else {
        z.exp().ln_1p()
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `out = W x + b` for a row-major `W`.
fn affine(w: &[f64], b: &[f64], x: &[f64], out: &mut Vec<f64>) {
    out.clear();
    out.extend(
        w.chunks_exact(x.len())
            .zip(b)
            .map(|(row, bias)| row.iter().zip(x).map(|(a, v)| a * v).sum::<f64>() + bias),
    );
}

impl PolicyParams {
    /// Uniform init in `±1/√fan_in`, seeded.
    pub fn new(n_hotspots: usize, n_services: usize, hidden_dim: usize, seed: u64) -> Self {
        let mut p = Self::zeros(n_hotspots, n_services, hidden_dim);
        p.init_seed = seed;
        let mut rng = stream(seed, &[0x1417]);
        let l = p.layout();
        let (i, hd) = (p.input_dim, p.hidden_dim);
        for (range, fan_in) in [
            (l.w1..l.w2, i),
            (l.w2..l.w3, hd),
            (l.w3..l.end, hd),
        ] {
            let bound = 1.0 / (fan_in as f64).sqrt();
            for v in &mut p.values[range] {
                *v = rng.random_range(-bound..=bound);
            }
        }
        p
    }

    pub fn zeros(n_hotspots: usize, n_services: usize, hidden_dim: usize) -> Self {
        let input_dim = observation_dim(n_hotspots, n_services);
        let output_dim = 2 * n_hotspots * n_services;
        Self {
            n_hotspots,
            n_services,
            input_dim,
            hidden_dim,
            output_dim,
            init_seed: 0,
            values: vec![0.0; param_count(input_dim, hidden_dim, output_dim)],
        }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    /// Same architecture, new values.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        if values.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                actual: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("policy parameters".into()));
        }
        Ok(Self {
            values,
            ..self.clone()
        })
    }

    fn layout(&self) -> Layout {
        let (i, h, o) = (self.input_dim, self.hidden_dim, self.output_dim);
        let w1 = 0;
        let b1 = w1 + h * i;
        let w2 = b1 + h;
        let b2 = w2 + h * h;
        let w3 = b2 + h;
        let b3 = w3 + o * h;
        Layout {
            w1,
            b1,
            w2,
            b2,
            w3,
            b3,
            end: b3 + o,
        }
    }

    /// Offset of the final-layer bias inside [`PolicyParams::values`].
    pub fn output_bias_offset(&self) -> usize {
        self.layout().b3
    }

    pub fn forward_cached(&self, obs: &Observation) -> Result<ForwardCache> {
        if obs.features.len() != self.input_dim {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim,
                actual: obs.features.len(),
            });
        }
        let l = self.layout();
        let v = &self.values;
        let mut hidden1 = Vec::with_capacity(self.hidden_dim);
        affine(&v[l.w1..l.b1], &v[l.b1..l.w2], &obs.features, &mut hidden1);
        hidden1.iter_mut().for_each(|x| *x = x.tanh());
        let mut hidden2 = Vec::with_capacity(self.hidden_dim);
        affine(&v[l.w2..l.b2], &v[l.b2..l.w3], &hidden1, &mut hidden2);
        hidden2.iter_mut().for_each(|x| *x = x.tanh());
        let mut logits = Vec::with_capacity(self.output_dim);
        affine(&v[l.w3..l.b3], &v[l.b3..l.end], &hidden2, &mut logits);
        let concentrations: Vec<f64> =
            logits.iter().map(|&z| softplus(z) + CONCENTRATION_FLOOR).collect();
        if concentrations.iter().any(|a| !a.is_finite()) {
            return Err(Error::NonFinite("policy forward pass".into()));
        }
        Ok(ForwardCache {
            input: obs.features.clone(),
            hidden1,
            hidden2,
            logits,
            concentrations,
        })
    }

    /// Dirichlet concentrations for `obs`, all `> 0`.
    pub fn forward(&self, obs: &Observation) -> Result<Vec<f64>> {
        Ok(self.forward_cached(obs)?.concentrations)
    }

    /// Pulls a gradient w.r.t. the concentrations back to the parameters.
    pub fn backward(&self, cache: &ForwardCache, d_alpha: &[f64]) -> GradientVector {
        let l = self.layout();
        let v = &self.values;
        let (i_dim, h_dim) = (self.input_dim, self.hidden_dim);
        let mut g = vec![0.0; self.dim()];

        let d3: Vec<f64> = d_alpha
            .iter()
            .zip(&cache.logits)
            .map(|(d, &z)| d * sigmoid(z))
            .collect();
        for (o, &d) in d3.iter().enumerate() {
            g[l.b3 + o] = d;
            let row = &mut g[l.w3 + o * h_dim..l.w3 + (o + 1) * h_dim];
            for (gw, &h) in row.iter_mut().zip(&cache.hidden2) {
                *gw = d * h;
            }
        }

        let mut d2 = vec![0.0; h_dim];
        for (o, &d) in d3.iter().enumerate() {
            let row = &v[l.w3 + o * h_dim..l.w3 + (o + 1) * h_dim];
            for (acc, w) in d2.iter_mut().zip(row) {
                *acc += d * w;
            }
        }
        for (d, h) in d2.iter_mut().zip(&cache.hidden2) {
            *d *= 1.0 - h * h;
        }
        for (j, &d) in d2.iter().enumerate() {
            g[l.b2 + j] = d;
            let row = &mut g[l.w2 + j * h_dim..l.w2 + (j + 1) * h_dim];
            for (gw, &h) in row.iter_mut().zip(&cache.hidden1) {
                *gw = d * h;
            }
        }

        let mut d1 = vec![0.0; h_dim];
        for (j, &d) in d2.iter().enumerate() {
            let row = &v[l.w2 + j * h_dim..l.w2 + (j + 1) * h_dim];
            for (acc, w) in d1.iter_mut().zip(row) {
                *acc += d * w;
            }
        }
        for (d, h) in d1.iter_mut().zip(&cache.hidden1) {
            *d *= 1.0 - h * h;
        }
        for (j, &d) in d1.iter().enumerate() {
            g[l.b1 + j] = d;
            let row = &mut g[l.w1 + j * i_dim..l.w1 + (j + 1) * i_dim];
            for (gw, &x) in row.iter_mut().zip(&cache.input) {
                *gw = d * x;
            }
        }
        GradientVector::new(g)
    }

    /// Writes the snapshot: magic, six little-endian `u64` header fields
    /// (`H, K, input, hidden, output, seed`), the value count, then the
    /// values as little-endian `f64`.
    pub fn write_snapshot<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(SNAPSHOT_MAGIC)?;
        for field in [
            self.n_hotspots as u64,
            self.n_services as u64,
            self.input_dim as u64,
            self.hidden_dim as u64,
            self.output_dim as u64,
            self.init_seed,
            self.values.len() as u64,
        ] {
            w.write_all(&field.to_le_bytes())?;
        }
        for v in &self.values {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_snapshot<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != SNAPSHOT_MAGIC {
            return Err(Error::Snapshot("bad magic".into()));
        }
        let mut word = [0u8; 8];
        let mut header = [0u64; 7];
        for field in header.iter_mut() {
            r.read_exact(&mut word)?;
            *field = u64::from_le_bytes(word);
        }
        let [h, k, input, hidden, output, seed, count] = header.map(|x| x as usize);
        let mut p = Self::zeros(h, k, hidden);
        if p.input_dim != input || p.output_dim != output || p.dim() != count {
            return Err(Error::Snapshot("header dimensions are inconsistent".into()));
        }
        p.init_seed = seed as u64;
        for v in p.values.iter_mut() {
            r.read_exact(&mut word)?;
            *v = f64::from_le_bytes(word);
        }
        if p.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Snapshot("non-finite parameter".into()));
        }
        Ok(p)
    }
}

/// Draws one Dirichlet sample per `H`-block via normalized gamma variates.
pub fn sample_action<R: Rng + ?Sized>(
    concentrations: &[f64],
    n_hotspots: usize,
    n_services: usize,
    rng: &mut R,
) -> Result<ActionFractions> {
    let expected = 2 * n_hotspots * n_services;
    if concentrations.len() != expected {
        return Err(Error::DimensionMismatch {
            expected,
            actual: concentrations.len(),
        });
    }
    let mut values = Vec::with_capacity(expected);
    for block in concentrations.chunks(n_hotspots) {
        let mut draws = block
            .iter()
            .map(|&a| {
                Gamma::new(a, 1.0)
                    .map(|g| g.sample(rng))
                    .map_err(|e| Error::InvalidArgument(format!("concentration {a}: {e}")))
            })
            .collect::<Result<Vec<f64>>>()?;
        let sum: f64 = draws.iter().sum();
        if !(sum > 0.0) || !sum.is_finite() {
            draws.iter_mut().for_each(|x| *x = 1.0);
        }
        let sum: f64 = draws.iter().sum();
        draws.iter_mut().for_each(|x| *x = (*x / sum).max(FRACTION_FLOOR));
        let sum: f64 = draws.iter().sum();
        values.extend(draws.iter().map(|x| x / sum));
    }
    Ok(ActionFractions {
        n_hotspots,
        n_services,
        values,
    })
}

/// Scales fractions by the per-service budgets. The last hotspot takes the
/// remainder so every column sums to its budget.
pub fn to_bid(fractions: &ActionFractions, compute_budget: &[f64], bandwidth_budget: &[f64]) -> BidMatrix {
    let (hh, kk) = (fractions.n_hotspots, fractions.n_services);
    let mut bid = BidMatrix::zeros(hh, kk);
    for k in 0..kk {
        for (r, budget) in [compute_budget[k], bandwidth_budget[k]].into_iter().enumerate() {
            let block = fractions.block(k, r);
            let target = if r == 0 {
                &mut bid.compute_hz
            } else {
                &mut bid.bandwidth_hz
            };
            let mut used = 0.0;
            for (h, x) in block.iter().enumerate() {
                let v = if h + 1 == hh {
                    (budget - used).max(0.0)
                } else {
                    budget * x
                };
                used += v;
                target[h * kk + k] = v;
            }
        }
    }
    bid
}

/// Sum of Dirichlet log-densities over all `2K` blocks.
pub fn log_prob(concentrations: &[f64], fractions: &ActionFractions) -> Result<f64> {
    if concentrations.len() != fractions.values.len() {
        return Err(Error::DimensionMismatch {
            expected: fractions.values.len(),
            actual: concentrations.len(),
        });
    }
    let h = fractions.n_hotspots;
    let mut total = 0.0;
    for (alpha, x) in concentrations.chunks(h).zip(fractions.values.chunks(h)) {
        let a0: f64 = alpha.iter().sum();
        total += ln_gamma(a0);
        for (&a, &xi) in alpha.iter().zip(x) {
            total += (a - 1.0) * xi.max(FRACTION_FLOOR).ln() - ln_gamma(a);
        }
    }
    if !total.is_finite() {
        return Err(Error::NonFinite("log-density".into()));
    }
    Ok(total)
}

/// `∂ log p / ∂ α_i = ψ(Σα) − ψ(α_i) + ln x_i`, per block.
pub fn log_prob_grad_concentrations(concentrations: &[f64], fractions: &ActionFractions) -> Vec<f64> {
    let h = fractions.n_hotspots;
    let mut out = Vec::with_capacity(concentrations.len());
    for (alpha, x) in concentrations.chunks(h).zip(fractions.values.chunks(h)) {
        let psi0 = digamma(alpha.iter().sum());
        out.extend(
            alpha
                .iter()
                .zip(x)
                .map(|(&a, &xi)| psi0 - digamma(a) + xi.max(FRACTION_FLOOR).ln()),
        );
    }
    out
}

/// `log π(a | o)` under `params`.
pub fn policy_log_prob(params: &PolicyParams, obs: &Observation, fractions: &ActionFractions) -> Result<f64> {
    log_prob(&params.forward(obs)?, fractions)
}

/// Exact gradient of `log π(a | o)` w.r.t. every parameter.
pub fn grad_log_prob(
    params: &PolicyParams,
    obs: &Observation,
    fractions: &ActionFractions,
) -> Result<GradientVector> {
    Ok(log_prob_and_grad(params, obs, fractions)?.1)
}

/// Log-density and its parameter gradient from a single forward pass.
pub fn log_prob_and_grad(
    params: &PolicyParams,
    obs: &Observation,
    fractions: &ActionFractions,
) -> Result<(f64, GradientVector)> {
    let cache = params.forward_cached(obs)?;
    let lp = log_prob(&cache.concentrations, fractions)?;
    let d_alpha = log_prob_grad_concentrations(&cache.concentrations, fractions);
    let g = params.backward(&cache, &d_alpha);
    if !g.is_finite() {
        return Err(Error::NonFinite("log-density gradient".into()));
    }
    Ok((lp, g))
}
