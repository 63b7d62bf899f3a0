//! Channel, computing, and task-generation models.
//!
//! Each SP serves a hotspot from a logical UAV hovering directly above it, so
//! the UAV-hotspot distance equals the flight altitude and the elevation
//! angle is 90 degrees. Delays follow the usual split into a computing part
//! (required cycles over allocated CPU rate) and a communication part (bits
//! over the average large-scale-fading rate).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::auction::UtilityParams;
use crate::error::{Error, Result};

/// Speed of light used by the free-space term (m/s).
pub const LIGHT_SPEED_MPS: f64 = 2.998e8;

/// Bits per megabyte (decimal convention).
pub const BITS_PER_MB: f64 = 8.0e6;

/// Converts a power in dBm to watts.
pub fn dbm_to_watts(dbm: f64) -> f64 {
    10f64.powf((dbm - 30.0) / 10.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelParams {
    pub carrier_freq_hz: f64,
    pub altitude_m: f64,
    pub eta_los_db: f64,
    pub eta_nlos_db: f64,
    pub env_a: f64,
    pub env_b: f64,
    pub noise_power_w: f64,
    pub avg_tx_power_w: f64,
    pub light_speed_mps: f64,
}

impl ChannelParams {
    /// Suburban air-to-ground profile: 2.5 GHz carrier, 100 m altitude,
    /// -95 dBm noise, 0.1 W user transmit power.
    pub fn suburban() -> Self {
        Self {
            carrier_freq_hz: 2.5e9,
            altitude_m: 100.0,
            eta_los_db: 0.1,
            eta_nlos_db: 21.0,
            env_a: 4.88,
            env_b: 0.43,
            noise_power_w: dbm_to_watts(-95.0),
            avg_tx_power_w: 0.1,
            light_speed_mps: LIGHT_SPEED_MPS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("carrier_freq_hz", self.carrier_freq_hz),
            ("altitude_m", self.altitude_m),
            ("eta_nlos_db", self.eta_nlos_db),
            ("env_a", self.env_a),
            ("env_b", self.env_b),
            ("noise_power_w", self.noise_power_w),
            ("avg_tx_power_w", self.avg_tx_power_w),
            ("light_speed_mps", self.light_speed_mps),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!("{name} must be > 0, got {v}")));
            }
        }
        if !(self.eta_los_db >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "eta_los_db must be >= 0, got {}",
                self.eta_los_db
            )));
        }
        Ok(())
    }

    /// Path loss of the hover geometry: distance = altitude, elevation = 90 degrees.
    pub fn hover_loss_db(&self) -> f64 {
        let p = los_probability(90.0, self);
        path_loss_db(self.altitude_m, p, self).expect("altitude validated positive")
    }

    /// Spectral efficiency (bits/s/Hz) of the hover link.
    pub fn hover_spectral_efficiency(&self) -> f64 {
        avg_rate_bps(1.0, self.hover_loss_db(), self).expect("unit bandwidth")
    }
}

/// Probability that the UAV-ground link is line-of-sight.
pub fn los_probability(elevation_deg: f64, params: &ChannelParams) -> f64 {
    let a = params.env_a;
    let b = params.env_b;
    1.0 / (1.0 + a * (-b * (elevation_deg - a)).exp())
}

/// Mean path loss in dB: free-space term plus the LoS/NLoS excess loss mix.
pub fn path_loss_db(distance_m: f64, p_los: f64, params: &ChannelParams) -> Result<f64> {
    if !(distance_m > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "distance must be > 0, got {distance_m}"
        )));
    }
    let fspl = 20.0
        * (4.0 * std::f64::consts::PI * params.carrier_freq_hz * distance_m
            / params.light_speed_mps)
            .log10();
    Ok(fspl + p_los * params.eta_los_db + (1.0 - p_los) * params.eta_nlos_db)
}

/// Average rate in bits/s over `bandwidth_hz` at the given loss.
pub fn avg_rate_bps(bandwidth_hz: f64, loss_db: f64, params: &ChannelParams) -> Result<f64> {
    if !(bandwidth_hz > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "bandwidth must be > 0, got {bandwidth_hz}"
        )));
    }
    let snr = params.avg_tx_power_w * 10f64.powf(-loss_db / 10.0) / params.noise_power_w;
    Ok(bandwidth_hz * (1.0 + snr).log2())
}

fn ratio_delay(load: f64, rate: f64) -> Result<f64> {
    if load == 0.0 {
        return Ok(0.0);
    }
    if rate <= 0.0 {
        return Err(Error::ZeroAllocation { demand: load });
    }
    Ok(load / rate)
}

/// Computing delay Λ/F. Zero demand never costs time, even with no allocation.
pub fn comp_delay_s(required_cycles: f64, alloc_compute_hz: f64) -> Result<f64> {
    ratio_delay(required_cycles, alloc_compute_hz)
}

/// Communication delay: total bits over the average rate.
pub fn comm_delay_s(total_bits: f64, rate_bps: f64) -> Result<f64> {
    ratio_delay(total_bits, rate_bps)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub data_bits: f64,
    pub cycles_per_bit: f64,
    pub service_type: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HotspotState {
    pub hotspot_id: usize,
    pub tasks: Vec<TaskSpec>,
    pub time_index: usize,
}

/// One hotspot's per-service demand.
#[derive(Debug, Clone, PartialEq)]
pub struct DemandRow {
    pub required_cycles: Vec<f64>,
    pub total_bits: Vec<f64>,
    pub user_count: usize,
}

/// Per-(hotspot, service) demand, stored row-major as `h * K + k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemandSummary {
    pub n_hotspots: usize,
    pub n_services: usize,
    pub required_cycles: Vec<f64>,
    pub total_bits: Vec<f64>,
    pub user_counts: Vec<usize>,
}

impl DemandSummary {
    pub fn zeros(n_hotspots: usize, n_services: usize) -> Self {
        Self {
            n_hotspots,
            n_services,
            required_cycles: vec![0.0; n_hotspots * n_services],
            total_bits: vec![0.0; n_hotspots * n_services],
            user_counts: vec![0; n_hotspots],
        }
    }

    /// Aggregates a full time step. Hotspot `i` of the slice becomes row `i`.
    pub fn from_hotspots(hotspots: &[HotspotState], n_services: usize) -> Result<Self> {
        let mut out = Self::zeros(hotspots.len(), n_services);
        for (h, state) in hotspots.iter().enumerate() {
            let row = aggregate_demand(state, n_services)?;
            out.required_cycles[h * n_services..(h + 1) * n_services]
                .copy_from_slice(&row.required_cycles);
            out.total_bits[h * n_services..(h + 1) * n_services].copy_from_slice(&row.total_bits);
            out.user_counts[h] = row.user_count;
        }
        Ok(out)
    }

    #[inline]
    pub fn cycles(&self, h: usize, k: usize) -> f64 {
        self.required_cycles[h * self.n_services + k]
    }

    #[inline]
    pub fn bits(&self, h: usize, k: usize) -> f64 {
        self.total_bits[h * self.n_services + k]
    }
}

/// Sums one hotspot's tasks into per-service cycle and bit totals.
pub fn aggregate_demand(state: &HotspotState, n_services: usize) -> Result<DemandRow> {
    let mut required_cycles = vec![0.0; n_services];
    let mut total_bits = vec![0.0; n_services];
    for task in &state.tasks {
        if task.service_type >= n_services {
            return Err(Error::InvalidArgument(format!(
                "service index {} out of range for K = {n_services}",
                task.service_type
            )));
        }
        required_cycles[task.service_type] += task.data_bits * task.cycles_per_bit;
        total_bits[task.service_type] += task.data_bits;
    }
    Ok(DemandRow {
        required_cycles,
        total_bits,
        user_count: state.tasks.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub n_sps: usize,
    pub n_hotspots: usize,
    pub n_services: usize,
    pub horizon: usize,
    pub channel: ChannelParams,
    pub user_count_choices: Vec<usize>,
    pub data_size_choices_bits: Vec<f64>,
    pub cycles_per_bit_choices: Vec<f64>,
    /// `F_max` indexed `[n][k]` (Hz).
    pub budgets_compute_hz: Vec<Vec<f64>>,
    /// `B_max` indexed `[n][k]` (Hz).
    pub budgets_bandwidth_hz: Vec<Vec<f64>>,
    pub utility: UtilityParams,
    pub seed: u64,
}

impl ScenarioConfig {
    /// Builds a scenario with the suburban channel and the reference task,
    /// budget, and energy constants, at the requested sizes. The penalty
    /// delay is derived with [`ScenarioConfig::default_penalty_delay`].
    pub fn reference(
        n_sps: usize,
        n_hotspots: usize,
        n_services: usize,
        horizon: usize,
        seed: u64,
    ) -> Self {
        let mut cfg = Self {
            n_sps,
            n_hotspots,
            n_services,
            horizon,
            channel: ChannelParams::suburban(),
            user_count_choices: vec![20, 30, 40, 50],
            data_size_choices_bits: [2.5, 3.0, 3.5, 4.0, 4.5, 5.0]
                .iter()
                .map(|mb| mb * BITS_PER_MB)
                .collect(),
            cycles_per_bit_choices: vec![1000.0, 1200.0, 1400.0, 1600.0],
            budgets_compute_hz: vec![vec![800e9; n_services]; n_sps],
            budgets_bandwidth_hz: vec![vec![800e6; n_services]; n_sps],
            utility: UtilityParams::uniform(n_sps, n_services, 381.0, 3000.0, 0.0),
            seed,
        };
        cfg.utility.penalty_delay_s = 100.0 * cfg.max_reference_delay_s();
        cfg
    }

    /// Five SPs, six hotspots, four services, horizon 30.
    pub fn table1_suburban() -> Self {
        Self::reference(5, 6, 4, 30, 0)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.n_sps < 2 {
            return bad(format!("n_sps must be >= 2, got {}", self.n_sps));
        }
        if self.n_hotspots == 0 || self.n_services == 0 || self.horizon == 0 {
            return bad("n_hotspots, n_services and horizon must be >= 1".into());
        }
        self.channel.validate()?;
        if self.user_count_choices.is_empty()
            || self.data_size_choices_bits.is_empty()
            || self.cycles_per_bit_choices.is_empty()
        {
            return bad("task choice sets must be non-empty".into());
        }
        if self.data_size_choices_bits.iter().any(|&d| !(d > 0.0))
            || self.cycles_per_bit_choices.iter().any(|&c| !(c > 0.0))
        {
            return bad("task sizes and cycles/bit must be > 0".into());
        }
        for (name, budgets) in [
            ("budgets_compute_hz", &self.budgets_compute_hz),
            ("budgets_bandwidth_hz", &self.budgets_bandwidth_hz),
        ] {
            if budgets.len() != self.n_sps || budgets.iter().any(|r| r.len() != self.n_services) {
                return bad(format!("{name} must be {}x{}", self.n_sps, self.n_services));
            }
            if budgets.iter().flatten().any(|&b| !(b > 0.0)) {
                return bad(format!("{name} entries must be > 0"));
            }
        }
        self.utility.validate(self.n_sps, self.n_services)?;
        let cap = self.max_reference_delay_s();
        if !(self.utility.penalty_delay_s > cap) {
            return bad(format!(
                "penalty_delay_s ({}) must exceed the delay cap ({cap})",
                self.utility.penalty_delay_s
            ));
        }
        Ok(())
    }

    /// Largest single-cell demand: every user of a maximally loaded hotspot
    /// asks for the same service with the largest task.
    pub fn max_cell_demand(&self) -> (f64, f64) {
        let users = *self.user_count_choices.iter().max().unwrap_or(&0) as f64;
        let d = self.data_size_choices_bits.iter().cloned().fold(0.0, f64::max);
        let l = self.cycles_per_bit_choices.iter().cloned().fold(0.0, f64::max);
        (users * d * l, users * d)
    }

    /// Delay of the maximal cell demand served with an even split of the
    /// smallest budgets across hotspots. Used as the delay cap that the
    /// penalty delay must dominate.
    pub fn max_reference_delay_s(&self) -> f64 {
        let (cycles, bits) = self.max_cell_demand();
        let h = self.n_hotspots as f64;
        let f = self.budgets_compute_hz.iter().flatten().cloned().fold(f64::INFINITY, f64::min) / h;
        let b =
            self.budgets_bandwidth_hz.iter().flatten().cloned().fold(f64::INFINITY, f64::min) / h;
        let rate = b * self.channel.hover_spectral_efficiency();
        cycles / f + bits / rate
    }

    pub fn default_penalty_delay(&self) -> f64 {
        100.0 * self.max_reference_delay_s()
    }
}

fn pick<'a, T, R: Rng + ?Sized>(choices: &'a [T], rng: &mut R) -> &'a T {
    &choices[rng.random_range(0..choices.len())]
}

/// Draws one time step of hotspot task sets.
pub fn sample_hotspots<R: Rng + ?Sized>(
    config: &ScenarioConfig,
    time_index: usize,
    rng: &mut R,
) -> Vec<HotspotState> {
    (0..config.n_hotspots)
        .map(|hotspot_id| {
            let users = *pick(&config.user_count_choices, rng);
            let tasks = (0..users)
                .map(|_| TaskSpec {
                    data_bits: *pick(&config.data_size_choices_bits, rng),
                    cycles_per_bit: *pick(&config.cycles_per_bit_choices, rng),
                    service_type: rng.random_range(0..config.n_services),
                })
                .collect();
            HotspotState {
                hotspot_id,
                tasks,
                time_index,
            }
        })
        .collect()
}
