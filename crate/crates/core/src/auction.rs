//! Sealed-bid winner determination, overbid verification, and SP utilities.
//!
//! Every (hotspot, service) cell is an independent reverse auction: the SP
//! whose declared allocation implies the lowest delay wins. The winner keeps
//! its bonus only if the delay it actually delivers is no worse than the one
//! it committed to.

use serde::{Deserialize, Serialize};

use crate::env::{avg_rate_bps, comm_delay_s, comp_delay_s, ChannelParams, DemandSummary};
use crate::error::{Error, Result};

/// One SP's allocation over all cells, row-major `h * K + k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BidMatrix {
    pub n_hotspots: usize,
    pub n_services: usize,
    pub compute_hz: Vec<f64>,
    pub bandwidth_hz: Vec<f64>,
}

impl BidMatrix {
    pub fn zeros(n_hotspots: usize, n_services: usize) -> Self {
        Self {
            n_hotspots,
            n_services,
            compute_hz: vec![0.0; n_hotspots * n_services],
            bandwidth_hz: vec![0.0; n_hotspots * n_services],
        }
    }

    #[inline]
    pub fn compute(&self, h: usize, k: usize) -> f64 {
        self.compute_hz[h * self.n_services + k]
    }

    #[inline]
    pub fn bandwidth(&self, h: usize, k: usize) -> f64 {
        self.bandwidth_hz[h * self.n_services + k]
    }

    /// Column sums over hotspots, `(compute, bandwidth)` per service.
    pub fn service_totals(&self) -> (Vec<f64>, Vec<f64>) {
        let mut f = vec![0.0; self.n_services];
        let mut b = vec![0.0; self.n_services];
        for h in 0..self.n_hotspots {
            for k in 0..self.n_services {
                f[k] += self.compute(h, k);
                b[k] += self.bandwidth(h, k);
            }
        }
        (f, b)
    }

    /// Checks non-negativity and the per-service budget constraints, with a
    /// relative slack for floating-point summation.
    pub fn is_feasible(&self, compute_budget: &[f64], bandwidth_budget: &[f64]) -> bool {
        if self.compute_hz.iter().chain(&self.bandwidth_hz).any(|&x| !(x >= 0.0)) {
            return false;
        }
        let (f, b) = self.service_totals();
        (0..self.n_services).all(|k| {
            f[k] <= compute_budget[k] * (1.0 + 1e-12) && b[k] <= bandwidth_budget[k] * (1.0 + 1e-12)
        })
    }

    /// Scales every entry by `factor` (used to build inflated declarations).
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            n_hotspots: self.n_hotspots,
            n_services: self.n_services,
            compute_hz: self.compute_hz.iter().map(|x| x * factor).collect(),
            bandwidth_hz: self.bandwidth_hz.iter().map(|x| x * factor).collect(),
        }
    }
}

/// Energy interpretation of the utility: `C` in W (energy per second of
/// service), `V` in J, and the penalty delay in seconds. Indexed `[n][k]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtilityParams {
    pub unit_cost_w: Vec<Vec<f64>>,
    pub winner_bonus_j: Vec<Vec<f64>>,
    pub penalty_delay_s: f64,
}

impl UtilityParams {
    pub fn uniform(n_sps: usize, n_services: usize, cost: f64, bonus: f64, penalty: f64) -> Self {
        Self {
            unit_cost_w: vec![vec![cost; n_services]; n_sps],
            winner_bonus_j: vec![vec![bonus; n_services]; n_sps],
            penalty_delay_s: penalty,
        }
    }

    pub fn validate(&self, n_sps: usize, n_services: usize) -> Result<()> {
        for m in [&self.unit_cost_w, &self.winner_bonus_j] {
            if m.len() != n_sps || m.iter().any(|r| r.len() != n_services) {
                return Err(Error::InvalidArgument(format!(
                    "utility coefficients must be {n_sps}x{n_services}"
                )));
            }
        }
        if !(self.penalty_delay_s > 0.0) {
            return Err(Error::InvalidArgument("penalty_delay_s must be > 0".into()));
        }
        Ok(())
    }

    /// Per-SP cost if it is constant across services.
    pub fn constant_cost(&self, n: usize) -> Option<f64> {
        let row = &self.unit_cost_w[n];
        let c = *row.first()?;
        row.iter().all(|&x| x == c).then_some(c)
    }
}

/// Delay of serving `(cycles, bits)` with `(compute_hz, bandwidth_hz)` given
/// the link's spectral efficiency in bits/s/Hz.
pub fn delay_with_efficiency(
    compute_hz: f64,
    bandwidth_hz: f64,
    cycles: f64,
    bits: f64,
    spectral_efficiency: f64,
) -> Result<f64> {
    let comp = comp_delay_s(cycles, compute_hz)?;
    let comm = comm_delay_s(bits, bandwidth_hz * spectral_efficiency)?;
    Ok(comm + comp)
}

/// Communication plus computing delay of one cell.
pub fn total_delay(
    compute_hz: f64,
    bandwidth_hz: f64,
    cycles: f64,
    bits: f64,
    channel: &ChannelParams,
) -> Result<f64> {
    let comp = comp_delay_s(cycles, compute_hz)?;
    let rate = if bandwidth_hz > 0.0 {
        avg_rate_bps(bandwidth_hz, channel.hover_loss_db(), channel)?
    } else {
        0.0
    };
    let comm = comm_delay_s(bits, rate)?;
    Ok(comm + comp)
}

/// Like [`delay_with_efficiency`], but a zero allocation facing positive
/// demand is a non-bid and maps to an infinite delay.
pub fn bid_delay(
    compute_hz: f64,
    bandwidth_hz: f64,
    cycles: f64,
    bits: f64,
    spectral_efficiency: f64,
) -> f64 {
    delay_with_efficiency(compute_hz, bandwidth_hz, cycles, bits, spectral_efficiency).unwrap_or(f64::INFINITY)
}

/// Lowest committed delay wins; ties go to the lowest SP index. Returns
/// `None` when nobody placed a finite bid.
pub fn resolve(committed: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (n, &d) in committed.iter().enumerate() {
        if !d.is_finite() {
            continue;
        }
        match best {
            Some((_, bd)) if d >= bd => {}
            _ => best = Some((n, d)),
        }
    }
    best.map(|(n, _)| n)
}

/// Win flags for one cell.
pub fn win_flags(committed: &[f64]) -> Vec<bool> {
    let w = resolve(committed);
    (0..committed.len()).map(|n| Some(n) == w).collect()
}

/// Overbid check: the bid is verified when the delivered delay does not
/// exceed the committed one.
#[inline]
pub fn verify(committed: f64, actual: f64) -> bool {
    actual <= committed
}

/// Outcome of all `H*K` auctions at one time step. Tensors are `n*H*K + h*K + k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuctionResult {
    pub n_sps: usize,
    pub n_hotspots: usize,
    pub n_services: usize,
    pub committed_delay_s: Vec<f64>,
    pub actual_delay_s: Vec<f64>,
    pub win: Vec<bool>,
    pub verified: Vec<bool>,
    pub winner_index: Vec<Option<usize>>,
}

impl AuctionResult {
    #[inline]
    fn idx(&self, n: usize, h: usize, k: usize) -> usize {
        (n * self.n_hotspots + h) * self.n_services + k
    }

    #[inline]
    pub fn committed(&self, n: usize, h: usize, k: usize) -> f64 {
        self.committed_delay_s[self.idx(n, h, k)]
    }

    #[inline]
    pub fn actual(&self, n: usize, h: usize, k: usize) -> f64 {
        self.actual_delay_s[self.idx(n, h, k)]
    }

    #[inline]
    pub fn won(&self, n: usize, h: usize, k: usize) -> bool {
        self.win[self.idx(n, h, k)]
    }

    #[inline]
    pub fn is_verified(&self, n: usize, h: usize, k: usize) -> bool {
        self.verified[self.idx(n, h, k)]
    }

    #[inline]
    pub fn winner(&self, h: usize, k: usize) -> Option<usize> {
        self.winner_index[h * self.n_services + k]
    }

    /// SP `n`'s win flags as an `H*K` row.
    pub fn wins_of(&self, n: usize) -> Vec<bool> {
        let cells = self.n_hotspots * self.n_services;
        self.win[n * cells..(n + 1) * cells].to_vec()
    }

    /// Builds the result from per-SP delay tensors `[n][h*K + k]`.
    /// Cells with no demand hold no auction and have no winner.
    pub fn from_delays(
        committed: &[Vec<f64>],
        actual: &[Vec<f64>],
        demand: &DemandSummary,
    ) -> Self {
        let n_sps = committed.len();
        let (hh, kk) = (demand.n_hotspots, demand.n_services);
        let cells = hh * kk;
        let mut res = Self {
            n_sps,
            n_hotspots: hh,
            n_services: kk,
            committed_delay_s: committed.iter().flatten().copied().collect(),
            actual_delay_s: actual.iter().flatten().copied().collect(),
            win: vec![false; n_sps * cells],
            verified: vec![false; n_sps * cells],
            winner_index: vec![None; cells],
        };
        let mut column = vec![0.0; n_sps];
        for c in 0..cells {
            for n in 0..n_sps {
                column[n] = committed[n][c];
                res.verified[n * cells + c] = verify(committed[n][c], actual[n][c]);
            }
            let has_demand = demand.required_cycles[c] > 0.0 || demand.total_bits[c] > 0.0;
            let w = if has_demand { resolve(&column) } else { None };
            res.winner_index[c] = w;
            if let Some(w) = w {
                res.win[w * cells + c] = true;
            }
        }
        res
    }
}

/// Per-cell delays of one SP's bid, with non-bids mapped to infinity.
pub fn bid_delays(bid: &BidMatrix, demand: &DemandSummary, spectral_efficiency: f64) -> Vec<f64> {
    (0..demand.n_hotspots * demand.n_services)
        .map(|c| {
            bid_delay(
                bid.compute_hz[c],
                bid.bandwidth_hz[c],
                demand.required_cycles[c],
                demand.total_bits[c],
                spectral_efficiency,
            )
        })
        .collect()
}

/// Runs the auction with declared bids (`committed`) and realized
/// deployments (`actual`).
pub fn run_auction(
    committed: &[BidMatrix],
    actual: &[BidMatrix],
    demand: &DemandSummary,
    channel: &ChannelParams,
) -> Result<AuctionResult> {
    if committed.len() != actual.len() {
        return Err(Error::DimensionMismatch {
            expected: committed.len(),
            actual: actual.len(),
        });
    }
    let cells = demand.n_hotspots * demand.n_services;
    for b in committed.iter().chain(actual) {
        if b.compute_hz.len() != cells || b.bandwidth_hz.len() != cells {
            return Err(Error::DimensionMismatch {
                expected: cells,
                actual: b.compute_hz.len(),
            });
        }
    }
    let se = channel.hover_spectral_efficiency();
    let c: Vec<Vec<f64>> = committed.iter().map(|b| bid_delays(b, demand, se)).collect();
    let a: Vec<Vec<f64>> = actual.iter().map(|b| bid_delays(b, demand, se)).collect();
    Ok(AuctionResult::from_delays(&c, &a, demand))
}

/// Auction where every SP deploys exactly what it declared.
pub fn run_honest_auction(
    bids: &[BidMatrix],
    demand: &DemandSummary,
    channel: &ChannelParams,
) -> Result<AuctionResult> {
    run_auction(bids, bids, demand, channel)
}

/// Original SP utility: delay cost on actual delay for every cell, plus the
/// bonus on cells won with a verified bid.
pub fn sp_utility(result: &AuctionResult, n: usize, params: &UtilityParams) -> f64 {
    let mut total = 0.0;
    for h in 0..result.n_hotspots {
        for k in 0..result.n_services {
            let cost = params.unit_cost_w[n][k] * result.actual(n, h, k);
            let bonus = if result.won(n, h, k) && result.is_verified(n, h, k) {
                params.winner_bonus_j[n][k]
            } else {
                0.0
            };
            total -= cost - bonus;
        }
    }
    total
}

/// Penalty-reformulated utility: winners pay for their delay, losers pay
/// for the penalty delay.
pub fn modified_utility(result: &AuctionResult, n: usize, params: &UtilityParams) -> f64 {
    let mut total = 0.0;
    for h in 0..result.n_hotspots {
        for k in 0..result.n_services {
            let t = if result.won(n, h, k) {
                result.actual(n, h, k)
            } else {
                params.penalty_delay_s
            };
            total -= params.unit_cost_w[n][k] * t;
        }
    }
    total
}

/// Weighted potential candidate `-Σ_n Σ_cells [W·T + (1-W)·T_pen]` (seconds).
pub fn potential_value(result: &AuctionResult, params: &UtilityParams) -> f64 {
    let mut total = 0.0;
    for n in 0..result.n_sps {
        for h in 0..result.n_hotspots {
            for k in 0..result.n_services {
                total += if result.won(n, h, k) {
                    result.actual(n, h, k)
                } else {
                    params.penalty_delay_s
                };
            }
        }
    }
    -total
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn one_cell(delays: &[f64], won: Option<usize>) -> AuctionResult {
        let committed: Vec<Vec<f64>> = delays.iter().map(|&d| vec![d]).collect();
        let mut demand = DemandSummary::zeros(1, 1);
        demand.required_cycles[0] = 1.0;
        let mut r = AuctionResult::from_delays(&committed, &committed, &demand);
        if let Some(w) = won {
            r.win = (0..delays.len()).map(|n| n == w).collect();
            r.winner_index = vec![Some(w)];
        }
        r
    }

    #[test]
    fn delay_example() {
        let ch = ChannelParams::suburban();
        let d = total_delay(100e9, 1e6, 2e10, 2e7, &ch).unwrap();
        // 0.2 s computing + 2e7 / 11_459_050.106 s communication.
        assert_relative_eq!(d, 1.945_345_365_889, max_relative = 1e-9);
        assert_eq!(total_delay(0.0, 0.0, 0.0, 0.0, &ch).unwrap(), 0.0);
        let d2 = total_delay(200e9, 2e6, 2e10, 2e7, &ch).unwrap();
        assert_relative_eq!(d2, d / 2.0, max_relative = 1e-12);
        assert!(total_delay(0.0, 1e6, 2e10, 2e7, &ch).is_err());
    }

    #[test]
    fn resolve_examples() {
        assert_eq!(resolve(&[0.5, 0.3, 0.9]), Some(1));
        assert_eq!(resolve(&[0.3, 0.3]), Some(0));
        assert_eq!(resolve(&[f64::INFINITY, f64::INFINITY]), None);
        assert_eq!(win_flags(&[f64::INFINITY; 3]), vec![false; 3]);
        assert_eq!(win_flags(&[2.0, 1.0]), vec![false, true]);
    }

    #[test]
    fn verify_examples() {
        assert!(verify(1.0, 1.0));
        assert!(!verify(1.0, 1.2));
        assert!(verify(1.0, 0.8));
    }

    fn params(penalty: f64) -> UtilityParams {
        UtilityParams::uniform(2, 1, 381.0, 3000.0, penalty)
    }

    #[test]
    fn utility_examples() {
        let p = params(100.0);
        let won = one_cell(&[2.0, 5.0], None);
        assert_relative_eq!(sp_utility(&won, 0, &p), 2238.0);
        assert_relative_eq!(sp_utility(&won, 1, &p), -381.0 * 5.0);

        let lost = one_cell(&[2.0, 1.0], None);
        assert_relative_eq!(sp_utility(&lost, 0, &p), -762.0);

        // Committed 1.0 but delivered 2.0: wins, fails verification.
        let committed = vec![vec![1.0], vec![5.0]];
        let actual = vec![vec![2.0], vec![5.0]];
        let mut demand = DemandSummary::zeros(1, 1);
        demand.total_bits[0] = 1.0;
        let overbid = AuctionResult::from_delays(&committed, &actual, &demand);
        assert!(overbid.won(0, 0, 0) && !overbid.is_verified(0, 0, 0));
        assert_relative_eq!(sp_utility(&overbid, 0, &p), -762.0);
    }

    #[test]
    fn modified_utility_examples() {
        let p = params(100.0);
        let r = one_cell(&[2.0, 5.0], None);
        assert_relative_eq!(modified_utility(&r, 0, &p), -762.0);
        assert_relative_eq!(modified_utility(&r, 1, &p), -38100.0);

        let committed = vec![vec![2.0, 7.0], vec![5.0, 3.0]];
        let mut demand = DemandSummary::zeros(1, 2);
        demand.required_cycles = vec![1.0, 1.0];
        let two = AuctionResult::from_delays(&committed, &committed, &demand);
        let p2 = UtilityParams::uniform(2, 2, 381.0, 3000.0, 100.0);
        assert_relative_eq!(modified_utility(&two, 0, &p2), -38862.0);
    }

    #[test]
    fn potential_examples() {
        let p = params(100.0);
        let r = one_cell(&[2.0, 5.0], None);
        assert_relative_eq!(potential_value(&r, &p), -102.0);

        let mut none = DemandSummary::zeros(1, 1);
        none.required_cycles[0] = 0.0;
        let nobody = AuctionResult::from_delays(&[vec![0.0], vec![0.0]], &[vec![0.0], vec![0.0]], &none);
        assert_relative_eq!(potential_value(&nobody, &p), -2.0 * 100.0);

        let better = one_cell(&[1.5, 5.0], None);
        assert_relative_eq!(potential_value(&better, &p) - potential_value(&r, &p), 0.5);
    }

    #[test]
    fn zero_demand_cells_hold_no_auction() {
        let demand = DemandSummary::zeros(1, 1);
        let r = AuctionResult::from_delays(&[vec![0.0], vec![0.0]], &[vec![0.0], vec![0.0]], &demand);
        assert_eq!(r.winner(0, 0), None);
        assert!(r.win.iter().all(|w| !w));
    }

    #[test]
    fn honest_auction_end_to_end() {
        let ch = ChannelParams::suburban();
        let mut demand = DemandSummary::zeros(1, 1);
        demand.required_cycles[0] = 2e10;
        demand.total_bits[0] = 2e7;
        let mk = |f: f64, b: f64| BidMatrix {
            n_hotspots: 1,
            n_services: 1,
            compute_hz: vec![f],
            bandwidth_hz: vec![b],
        };
        let bids = vec![mk(100e9, 1e6), mk(200e9, 2e6), BidMatrix::zeros(1, 1)];
        let r = run_honest_auction(&bids, &demand, &ch).unwrap();
        assert_eq!(r.winner(0, 0), Some(1));
        assert!(r.committed(2, 0, 0).is_infinite());
        assert!(r.verified.iter().all(|&v| v));
    }

    proptest! {
        #[test]
        fn exactly_one_winner_and_affine_invariance(
            delays in prop::collection::vec(0.0f64..100.0, 2..8),
            scale in 0.01f64..100.0,
            shift in 0.0f64..10.0,
        ) {
            let flags = win_flags(&delays);
            prop_assert_eq!(flags.iter().filter(|&&w| w).count(), 1);
            let rescaled: Vec<f64> = delays.iter().map(|d| d * scale + shift).collect();
            let w = resolve(&delays).unwrap();
            let w2 = resolve(&rescaled).unwrap();
            // Rescaling can merge near-ties; the winner's delay must still be minimal.
            let min = rescaled.iter().cloned().fold(f64::INFINITY, f64::min);
            prop_assert_eq!(rescaled[w2], min);
            if rescaled.iter().filter(|&&d| d == min).count() == 1 {
                prop_assert_eq!(w, w2);
            }
        }
    }
}
