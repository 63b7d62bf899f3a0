//! Exhaustive verification of the auction game's properties on small,
//! discretized instances, plus best-response dynamics to locate pure Nash
//! equilibria.
//!
//! A [`DiscreteGame`] fixes the demand of one time step and gives every SP a
//! finite list of budget-feasible bids. Honest delays are precomputed per
//! (SP, action, cell), so each joint profile is evaluated in `O(N·H·K)`.
//! Enumeration over opponents' profiles runs on rayon; results are collected
//! in index order and merged sequentially, so reports do not depend on the
//! thread schedule.

use rand::seq::index::sample;
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::auction::{
    bid_delays, modified_utility, potential_value, AuctionResult, BidMatrix, UtilityParams,
};
use crate::env::{sample_hotspots, ChannelParams, DemandSummary, ScenarioConfig};
use crate::error::{Error, Result};
use crate::rng::stream;

/// Default cap on the number of joint profiles an exhaustive check may visit.
pub const DEFAULT_PROFILE_CAP: u128 = 1_000_000;

/// Utility rule used when scoring a profile. `Standard` is the real
/// mechanism; the other two are deliberately broken variants used as
/// negative controls.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum Mechanism {
    Standard,
    /// Pays the winner's bonus without checking for overbids.
    UnverifiedBonus,
    /// Replaces the fixed bonus with `per_second * actual_delay`.
    DelayScaledBonus { per_second: f64 },
}

impl Mechanism {
    pub fn utility(&self, result: &AuctionResult, n: usize, params: &UtilityParams) -> f64 {
        let mut total = 0.0;
        for h in 0..result.n_hotspots {
            for k in 0..result.n_services {
                total += self.cell_utility(result, n, h, k, params);
            }
        }
        total
    }

    fn cell_utility(
        &self,
        r: &AuctionResult,
        n: usize,
        h: usize,
        k: usize,
        params: &UtilityParams,
    ) -> f64 {
        let t = r.actual(n, h, k);
        let cost = params.unit_cost_w[n][k] * t;
        let won = r.won(n, h, k);
        let bonus = match self {
            Mechanism::Standard if won && r.is_verified(n, h, k) => params.winner_bonus_j[n][k],
            Mechanism::UnverifiedBonus if won => params.winner_bonus_j[n][k],
            Mechanism::DelayScaledBonus { per_second } if won && r.is_verified(n, h, k) => {
                per_second * t
            }
            _ => 0.0,
        };
        bonus - cost
    }
}

/// How candidate bids are laid out for each SP.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum GridSpec {
    /// Single hotspot: every (F, B) budget-fraction pair `(i/f_levels, j/b_levels)`
    /// per service.
    Levels { f_levels: usize, b_levels: usize },
    /// Single hotspot: the same fraction `i/levels` for both resources.
    Diagonal { levels: usize },
    /// Any `H`: each (service, resource) budget split into `units` positive
    /// integer parts over the hotspots. With `sample`, each SP keeps a random
    /// subset of that size.
    Compositions { units: usize, sample: Option<usize> },
}

/// Recipe for a random small game.
#[derive(Debug, Clone, Serialize)]
pub struct GameSpec {
    pub n_sps: usize,
    pub n_hotspots: usize,
    pub n_services: usize,
    pub grid: GridSpec,
    /// SP `n` pays `381 * (1 + cost_spread * n)` W, the same for every service.
    pub cost_spread: f64,
    pub seed: u64,
}

impl GameSpec {
    pub fn new(n_sps: usize, n_hotspots: usize, n_services: usize, grid: GridSpec, seed: u64) -> Self {
        Self {
            n_sps,
            n_hotspots,
            n_services,
            grid,
            cost_spread: 0.25,
            seed,
        }
    }

    pub fn build(&self) -> Result<DiscreteGame> {
        let scenario =
            ScenarioConfig::reference(self.n_sps, self.n_hotspots, self.n_services, 1, self.seed);
        let hotspots = sample_hotspots(&scenario, 0, &mut stream(self.seed, &[0xD0]));
        let demand = DemandSummary::from_hotspots(&hotspots, self.n_services)?;
        let fractions = match &self.grid {
            GridSpec::Levels { f_levels, b_levels } => {
                self.single_hotspot()?;
                let pairs: Vec<(f64, f64)> = (1..=*f_levels)
                    .flat_map(|i| {
                        (1..=*b_levels)
                            .map(move |j| (i as f64 / *f_levels as f64, j as f64 / *b_levels as f64))
                    })
                    .collect();
                vec![per_service_product(&pairs, self.n_services); self.n_sps]
            }
            GridSpec::Diagonal { levels } => {
                self.single_hotspot()?;
                let pairs: Vec<(f64, f64)> = (1..=*levels)
                    .map(|i| (i as f64 / *levels as f64, i as f64 / *levels as f64))
                    .collect();
                vec![per_service_product(&pairs, self.n_services); self.n_sps]
            }
            GridSpec::Compositions { units, sample: keep } => {
                let all = composition_grid(self.n_hotspots, self.n_services, *units)?;
                (0..self.n_sps)
                    .map(|n| match keep {
                        Some(m) if *m < all.len() => {
                            let mut rng = stream(self.seed, &[0x6D, n as u64]);
                            let mut idx = sample(&mut rng, all.len(), *m).into_vec();
                            idx.sort_unstable();
                            idx.into_iter().map(|i| all[i].clone()).collect()
                        }
                        _ => all.clone(),
                    })
                    .collect()
            }
        };
        let costs: Vec<f64> = (0..self.n_sps)
            .map(|n| 381.0 * (1.0 + self.cost_spread * n as f64))
            .collect();
        let mut utility = UtilityParams::uniform(self.n_sps, self.n_services, 381.0, 3000.0, 1.0);
        for (n, c) in costs.iter().enumerate() {
            utility.unit_cost_w[n] = vec![*c; self.n_services];
        }
        let grid: Vec<Vec<BidMatrix>> = fractions
            .iter()
            .enumerate()
            .map(|(n, sp)| {
                sp.iter()
                    .map(|fr| {
                        fr.to_bid(
                            &scenario.budgets_compute_hz[n],
                            &scenario.budgets_bandwidth_hz[n],
                        )
                    })
                    .collect()
            })
            .collect();
        let mut game = DiscreteGame::new(
            grid,
            demand,
            scenario.channel.clone(),
            utility,
            &scenario.budgets_compute_hz,
            &scenario.budgets_bandwidth_hz,
        )?;
        game.utility.penalty_delay_s = 100.0 * game.max_finite_delay().max(1e-9);
        Ok(game)
    }

    fn single_hotspot(&self) -> Result<()> {
        if self.n_hotspots != 1 {
            return Err(Error::InvalidArgument(
                "level grids need a single hotspot; use compositions".into(),
            ));
        }
        Ok(())
    }
}

/// Budget fractions per cell, `h * K + k`.
#[derive(Debug, Clone, PartialEq)]
struct CellFractions {
    n_hotspots: usize,
    n_services: usize,
    compute: Vec<f64>,
    bandwidth: Vec<f64>,
}

impl CellFractions {
    fn to_bid(&self, f_budget: &[f64], b_budget: &[f64]) -> BidMatrix {
        let k_of = |c: usize| c % self.n_services;
        BidMatrix {
            n_hotspots: self.n_hotspots,
            n_services: self.n_services,
            compute_hz: self.compute.iter().enumerate().map(|(c, x)| x * f_budget[k_of(c)]).collect(),
            bandwidth_hz: self
                .bandwidth
                .iter()
                .enumerate()
                .map(|(c, x)| x * b_budget[k_of(c)])
                .collect(),
        }
    }
}

fn per_service_product(pairs: &[(f64, f64)], n_services: usize) -> Vec<CellFractions> {
    let mut out = vec![CellFractions {
        n_hotspots: 1,
        n_services,
        compute: vec![],
        bandwidth: vec![],
    }];
    for _ in 0..n_services {
        out = out
            .into_iter()
            .flat_map(|base| {
                pairs.iter().map(move |&(f, b)| {
                    let mut next = base.clone();
                    next.compute.push(f);
                    next.bandwidth.push(b);
                    next
                })
            })
            .collect();
    }
    out
}

/// All ways to write `units` as an ordered sum of `parts` positive integers.
pub fn compositions(units: usize, parts: usize) -> Vec<Vec<usize>> {
    if parts == 0 {
        return if units == 0 { vec![vec![]] } else { vec![] };
    }
    if parts == 1 {
        return if units >= 1 { vec![vec![units]] } else { vec![] };
    }
    let mut out = Vec::new();
    for first in 1..=units.saturating_sub(parts - 1) {
        for mut rest in compositions(units - first, parts - 1) {
            rest.insert(0, first);
            out.push(rest);
        }
    }
    out
}

fn composition_grid(n_hotspots: usize, n_services: usize, units: usize) -> Result<Vec<CellFractions>> {
    let splits = compositions(units, n_hotspots);
    if splits.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "cannot split {units} units over {n_hotspots} hotspots"
        )));
    }
    let cells = n_hotspots * n_services;
    let mut out = vec![CellFractions {
        n_hotspots,
        n_services,
        compute: vec![0.0; cells],
        bandwidth: vec![0.0; cells],
    }];
    for k in 0..n_services {
        for resource in 0..2 {
            out = out
                .into_iter()
                .flat_map(|base| {
                    splits.iter().map(move |split| {
                        let mut next = base.clone();
                        for (h, &u) in split.iter().enumerate() {
                            let v = u as f64 / units as f64;
                            let c = h * n_services + k;
                            if resource == 0 {
                                next.compute[c] = v;
                            } else {
                                next.bandwidth[c] = v;
                            }
                        }
                        next
                    })
                })
                .collect();
        }
    }
    Ok(out)
}

/// A stage game over finite per-SP action lists.
#[derive(Debug, Clone)]
pub struct DiscreteGame {
    pub n_sps: usize,
    pub grid: Vec<Vec<BidMatrix>>,
    pub demand: DemandSummary,
    pub channel: ChannelParams,
    pub utility: UtilityParams,
    pub profile_cap: u128,
    spectral_efficiency: f64,
    /// `[n][action][cell]` honest delays.
    delays: Vec<Vec<Vec<f64>>>,
}

impl DiscreteGame {
    /// Every grid entry must satisfy the budgets of its SP (`[n][k]`).
    pub fn new(
        grid: Vec<Vec<BidMatrix>>,
        demand: DemandSummary,
        channel: ChannelParams,
        utility: UtilityParams,
        budgets_compute_hz: &[Vec<f64>],
        budgets_bandwidth_hz: &[Vec<f64>],
    ) -> Result<Self> {
        let n_sps = grid.len();
        if n_sps < 2 {
            return Err(Error::InvalidArgument("a game needs at least two SPs".into()));
        }
        let cells = demand.n_hotspots * demand.n_services;
        for (n, actions) in grid.iter().enumerate() {
            if actions.is_empty() {
                return Err(Error::InvalidArgument(format!("SP {n} has an empty grid")));
            }
            for a in actions {
                if a.compute_hz.len() != cells {
                    return Err(Error::DimensionMismatch {
                        expected: cells,
                        actual: a.compute_hz.len(),
                    });
                }
                if !a.is_feasible(&budgets_compute_hz[n], &budgets_bandwidth_hz[n]) {
                    return Err(Error::InvalidArgument(format!(
                        "SP {n} grid contains a bid over budget"
                    )));
                }
            }
        }
        let spectral_efficiency = channel.hover_spectral_efficiency();
        let delays = grid
            .iter()
            .map(|actions| {
                actions
                    .iter()
                    .map(|a| bid_delays(a, &demand, spectral_efficiency))
                    .collect()
            })
            .collect();
        Ok(Self {
            n_sps,
            grid,
            demand,
            channel,
            utility,
            profile_cap: DEFAULT_PROFILE_CAP,
            spectral_efficiency,
            delays,
        })
    }

    pub fn n_cells(&self) -> usize {
        self.demand.n_hotspots * self.demand.n_services
    }

    pub fn grid_sizes(&self) -> Vec<usize> {
        self.grid.iter().map(|g| g.len()).collect()
    }

    pub fn n_profiles(&self) -> u128 {
        self.grid.iter().map(|g| g.len() as u128).product()
    }

    fn ensure_enumerable(&self) -> Result<()> {
        let profiles = self.n_profiles();
        if profiles > self.profile_cap {
            return Err(Error::EnumerationCap {
                profiles,
                cap: self.profile_cap,
            });
        }
        Ok(())
    }

    pub fn max_finite_delay(&self) -> f64 {
        self.delays
            .iter()
            .flatten()
            .flatten()
            .copied()
            .filter(|d| d.is_finite())
            .fold(0.0, f64::max)
    }

    /// Honest delays of SP `n` playing `action`.
    pub fn delays_of(&self, n: usize, action: usize) -> &[f64] {
        &self.delays[n][action]
    }

    /// Decodes a mixed-radix joint-profile index.
    pub fn profile_at(&self, mut index: u128) -> Vec<usize> {
        self.grid
            .iter()
            .map(|g| {
                let len = g.len() as u128;
                let a = (index % len) as usize;
                index /= len;
                a
            })
            .collect()
    }

    pub fn random_profile<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<usize> {
        self.grid.iter().map(|g| rng.random_range(0..g.len())).collect()
    }

    /// Auction outcome when everyone deploys what they declared.
    pub fn outcome(&self, profile: &[usize]) -> AuctionResult {
        let d: Vec<Vec<f64>> = profile
            .iter()
            .enumerate()
            .map(|(n, &a)| self.delays[n][a].clone())
            .collect();
        AuctionResult::from_delays(&d, &d, &self.demand)
    }

    /// Outcome when SP `n` declares `declared` but deploys its grid action
    /// `profile[n]`; everyone else is honest.
    pub fn outcome_with_declaration(
        &self,
        profile: &[usize],
        n: usize,
        declared: &BidMatrix,
    ) -> AuctionResult {
        let actual: Vec<Vec<f64>> = profile
            .iter()
            .enumerate()
            .map(|(m, &a)| self.delays[m][a].clone())
            .collect();
        let mut committed = actual.clone();
        committed[n] = bid_delays(declared, &self.demand, self.spectral_efficiency);
        AuctionResult::from_delays(&committed, &actual, &self.demand)
    }

    pub fn modified_utility(&self, profile: &[usize], n: usize) -> f64 {
        modified_utility(&self.outcome(profile), n, &self.utility)
    }

    pub fn potential(&self, profile: &[usize]) -> f64 {
        potential_value(&self.outcome(profile), &self.utility)
    }

    /// Per-SP, per-cell penalized delay `W·T + (1-W)·T_pen`.
    fn penalized_delays(&self, profile: &[usize]) -> Vec<Vec<f64>> {
        let r = self.outcome(profile);
        let cells = self.n_cells();
        (0..self.n_sps)
            .map(|n| {
                (0..cells)
                    .map(|c| {
                        if r.win[n * cells + c] {
                            r.actual_delay_s[n * cells + c]
                        } else {
                            self.utility.penalty_delay_s
                        }
                    })
                    .collect()
            })
            .collect()
    }

    /// Best modified-utility response of SP `n`. Keeps the current action
    /// when it is already among the maximizers; otherwise the lowest index.
    pub fn best_response(&self, profile: &[usize], n: usize) -> (usize, f64) {
        let current = self.modified_utility(profile, n);
        let mut best = (profile[n], current);
        let mut trial = profile.to_vec();
        for a in 0..self.grid[n].len() {
            trial[n] = a;
            let u = self.modified_utility(&trial, n);
            if u > best.1 {
                best = (a, u);
            }
        }
        best
    }

    /// Largest gain any SP can get by deviating unilaterally from `profile`.
    pub fn max_unilateral_gain(&self, profile: &[usize]) -> f64 {
        (0..self.n_sps)
            .map(|n| self.best_response(profile, n).1 - self.modified_utility(profile, n))
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn is_nash(&self, profile: &[usize]) -> bool {
        self.max_unilateral_gain(profile) <= 0.0
    }

    /// Opponent profiles of SP `n`, as full profiles with `n`'s slot at 0.
    fn opponent_profiles(&self, n: usize) -> Vec<Vec<usize>> {
        let mut radix: Vec<usize> = self.grid_sizes();
        radix[n] = 1;
        let total: usize = radix.iter().product();
        (0..total)
            .map(|mut idx| {
                radix
                    .iter()
                    .map(|&r| {
                        let a = idx % r;
                        idx /= r;
                        a
                    })
                    .collect()
            })
            .collect()
    }
}

/// Which side of the win/lose boundary a false bid moved one cell to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum FalseBidCase {
    /// Loses with both the true and the false bid.
    StillLoses,
    /// Loses truthfully, wins with the false bid.
    LoseToWin,
    /// Wins with both.
    StillWins,
    /// Wins truthfully, loses with the inflated bid (should be impossible).
    WinToLose,
}

#[derive(Debug, Clone, Serialize)]
pub struct Counterexample {
    pub sp: usize,
    pub profile: Vec<usize>,
    pub inflation: f64,
    pub cell: usize,
    pub case: FalseBidCase,
    pub utility_true: f64,
    pub utility_false: f64,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct CaseTally {
    pub cells: u64,
    pub equal: u64,
    pub false_lower: u64,
    pub false_higher: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct AuthenticityReport {
    pub mechanism: Mechanism,
    pub false_bids_checked: u64,
    pub profitable_false_bids: u64,
    pub still_loses: CaseTally,
    pub lose_to_win: CaseTally,
    pub still_wins: CaseTally,
    pub win_to_lose: CaseTally,
    /// Cases 1-2 all equal and case 3 all strictly lower, per cell.
    pub pattern_matches: bool,
    pub first_counterexample: Option<Counterexample>,
    pub passed: bool,
}

impl AuthenticityReport {
    fn empty(mechanism: Mechanism) -> Self {
        Self {
            mechanism,
            false_bids_checked: 0,
            profitable_false_bids: 0,
            still_loses: CaseTally::default(),
            lose_to_win: CaseTally::default(),
            still_wins: CaseTally::default(),
            win_to_lose: CaseTally::default(),
            pattern_matches: true,
            first_counterexample: None,
            passed: true,
        }
    }

    fn tally(&mut self, case: FalseBidCase) -> &mut CaseTally {
        match case {
            FalseBidCase::StillLoses => &mut self.still_loses,
            FalseBidCase::LoseToWin => &mut self.lose_to_win,
            FalseBidCase::StillWins => &mut self.still_wins,
            FalseBidCase::WinToLose => &mut self.win_to_lose,
        }
    }

    fn merge(&mut self, other: AuthenticityReport) {
        self.false_bids_checked += other.false_bids_checked;
        self.profitable_false_bids += other.profitable_false_bids;
        for (a, b) in [
            (&mut self.still_loses, other.still_loses),
            (&mut self.lose_to_win, other.lose_to_win),
            (&mut self.still_wins, other.still_wins),
            (&mut self.win_to_lose, other.win_to_lose),
        ] {
            a.cells += b.cells;
            a.equal += b.equal;
            a.false_lower += b.false_lower;
            a.false_higher += b.false_higher;
        }
        if self.first_counterexample.is_none() {
            self.first_counterexample = other.first_counterexample;
        }
    }

    fn finish(mut self) -> Self {
        let eq_only = |t: &CaseTally| t.equal == t.cells;
        self.pattern_matches = eq_only(&self.still_loses)
            && eq_only(&self.lose_to_win)
            && self.still_wins.false_lower == self.still_wins.cells
            && self.win_to_lose.cells == 0;
        self.passed = self.profitable_false_bids == 0;
        self
    }
}

/// Sweeps every SP, opponent profile, true grid action, and inflation
/// factor `> 1` (declared = true allocation × factor), comparing the
/// utility of the false bid with the truthful one.
pub fn check_authenticity(
    game: &DiscreteGame,
    inflations: &[f64],
    mechanism: Mechanism,
) -> Result<AuthenticityReport> {
    game.ensure_enumerable()?;
    let factors: Vec<f64> = inflations.iter().copied().filter(|&f| f > 1.0).collect();
    let cells = game.n_cells();
    let params = &game.utility;
    let mut report = AuthenticityReport::empty(mechanism);
    for n in 0..game.n_sps {
        let parts: Vec<AuthenticityReport> = game
            .opponent_profiles(n)
            .par_iter()
            .map(|opp| {
                let mut part = AuthenticityReport::empty(mechanism);
                let mut profile = opp.clone();
                for a in 0..game.grid[n].len() {
                    profile[n] = a;
                    let truthful = game.outcome(&profile);
                    let u_true = mechanism.utility(&truthful, n, params);
                    for &f in &factors {
                        let declared = game.grid[n][a].scaled(f);
                        let lie = game.outcome_with_declaration(&profile, n, &declared);
                        let u_false = mechanism.utility(&lie, n, params);
                        part.false_bids_checked += 1;
                        let profitable = u_false > u_true;
                        if profitable {
                            part.profitable_false_bids += 1;
                        }
                        for c in 0..cells {
                            let (h, k) = (c / game.demand.n_services, c % game.demand.n_services);
                            let case = match (truthful.won(n, h, k), lie.won(n, h, k)) {
                                (false, false) => FalseBidCase::StillLoses,
                                (false, true) => FalseBidCase::LoseToWin,
                                (true, true) => FalseBidCase::StillWins,
                                (true, false) => FalseBidCase::WinToLose,
                            };
                            let ct = mechanism.cell_utility(&truthful, n, h, k, params);
                            let cf = mechanism.cell_utility(&lie, n, h, k, params);
                            let t = part.tally(case);
                            t.cells += 1;
                            if cf == ct {
                                t.equal += 1;
                            } else if cf < ct {
                                t.false_lower += 1;
                            } else {
                                t.false_higher += 1;
                                if profitable && part.first_counterexample.is_none() {
                                    part.first_counterexample = Some(Counterexample {
                                        sp: n,
                                        profile: profile.clone(),
                                        inflation: f,
                                        cell: c,
                                        case,
                                        utility_true: u_true,
                                        utility_false: u_false,
                                    });
                                }
                            }
                        }
                    }
                }
                part
            })
            .collect();
        for p in parts {
            report.merge(p);
        }
    }
    Ok(report.finish())
}

#[derive(Debug, Clone, Serialize)]
pub struct OrderViolation {
    pub sp: usize,
    pub profile: Vec<usize>,
    pub worse_action: usize,
    pub better_action: usize,
    pub original_diff: f64,
    pub modified_diff: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct OrderReport {
    pub mechanism: Mechanism,
    pub pairs_checked: u64,
    pub original_violations: u64,
    pub modified_violations: u64,
    pub first_violation: Option<OrderViolation>,
    pub passed: bool,
}

/// For every unilateral pair `(a, a')` where `a'` gives SP `n` a delay no
/// larger than `a` in every cell, both the original utility and the
/// penalty-reformulated utility must be at least as high under `a'`.
pub fn check_order_equivalence(game: &DiscreteGame, mechanism: Mechanism) -> Result<OrderReport> {
    game.ensure_enumerable()?;
    let params = &game.utility;
    let mut report = OrderReport {
        mechanism,
        pairs_checked: 0,
        original_violations: 0,
        modified_violations: 0,
        first_violation: None,
        passed: true,
    };
    for n in 0..game.n_sps {
        let m = game.grid[n].len();
        let dominated: Vec<(usize, usize)> = (0..m)
            .flat_map(|a| (0..m).map(move |b| (a, b)))
            .filter(|&(a, b)| {
                game.delays[n][a]
                    .iter()
                    .zip(&game.delays[n][b])
                    .all(|(ta, tb)| ta >= tb)
            })
            .collect();
        let parts: Vec<OrderReport> = game
            .opponent_profiles(n)
            .par_iter()
            .map(|opp| {
                let mut part = OrderReport {
                    mechanism,
                    pairs_checked: 0,
                    original_violations: 0,
                    modified_violations: 0,
                    first_violation: None,
                    passed: true,
                };
                let mut p = opp.clone();
                let scored: Vec<(f64, f64)> = (0..m)
                    .map(|a| {
                        p[n] = a;
                        let r = game.outcome(&p);
                        (mechanism.utility(&r, n, params), modified_utility(&r, n, params))
                    })
                    .collect();
                for &(a, b) in &dominated {
                    part.pairs_checked += 1;
                    let du = scored[b].0 - scored[a].0;
                    let dm = scored[b].1 - scored[a].1;
                    let bad_u = du < 0.0;
                    let bad_m = dm < 0.0;
                    part.original_violations += bad_u as u64;
                    part.modified_violations += bad_m as u64;
                    if (bad_u || bad_m) && part.first_violation.is_none() {
                        let mut profile = opp.clone();
                        profile[n] = a;
                        part.first_violation = Some(OrderViolation {
                            sp: n,
                            profile,
                            worse_action: a,
                            better_action: b,
                            original_diff: du,
                            modified_diff: dm,
                        });
                    }
                }
                part
            })
            .collect();
        for part in parts {
            report.pairs_checked += part.pairs_checked;
            report.original_violations += part.original_violations;
            report.modified_violations += part.modified_violations;
            if report.first_violation.is_none() {
                report.first_violation = part.first_violation;
            }
        }
    }
    report.passed = report.original_violations == 0 && report.modified_violations == 0;
    Ok(report)
}

/// Residual statistics of `ΔŪ_n - C_n·ΔΦ` over a set of deviations.
#[derive(Debug, Clone, Default, Serialize)]
pub struct ResidualStats {
    pub deviations: u64,
    pub max_abs_residual: f64,
    pub max_rel_residual: f64,
}

impl ResidualStats {
    fn add(&mut self, abs: f64, rel: f64) {
        self.deviations += 1;
        self.max_abs_residual = self.max_abs_residual.max(abs);
        self.max_rel_residual = self.max_rel_residual.max(rel);
    }

    fn merge(&mut self, o: &ResidualStats) {
        self.deviations += o.deviations;
        self.max_abs_residual = self.max_abs_residual.max(o.max_abs_residual);
        self.max_rel_residual = self.max_rel_residual.max(o.max_rel_residual);
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct PotentialDeviation {
    pub sp: usize,
    pub profile: Vec<usize>,
    pub new_action: usize,
    pub delta_utility: f64,
    pub weighted_delta_potential: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct PotentialReport {
    pub all: ResidualStats,
    /// Deviations after which every cell keeps its winner.
    pub winner_preserving: ResidualStats,
    /// Deviations that move at least one cell's win to or from the deviator.
    pub winner_changing: ResidualStats,
    pub worst: Option<PotentialDeviation>,
    pub tolerance: f64,
    pub passed: bool,
}

/// Relative tolerance of the weighted-potential identity.
pub const POTENTIAL_TOLERANCE: f64 = 1e-9;

struct DeviationEval {
    abs: f64,
    rel: f64,
    winner_preserving: bool,
    delta_u: f64,
    weighted_dphi: f64,
}

fn evaluate_deviation(
    game: &DiscreteGame,
    profile: &[usize],
    n: usize,
    new_action: usize,
    cost: f64,
) -> DeviationEval {
    let mut next = profile.to_vec();
    next[n] = new_action;
    let before = game.penalized_delays(profile);
    let after = game.penalized_delays(&next);
    let ra = game.outcome(profile);
    let rb = game.outcome(&next);
    // Cell-wise differences keep unchanged terms exactly zero.
    let mut delta_own = 0.0;
    let mut delta_phi = 0.0;
    for c in 0..game.n_cells() {
        delta_own -= after[n][c] - before[n][c];
        for m in 0..game.n_sps {
            delta_phi -= after[m][c] - before[m][c];
        }
    }
    let delta_u = cost * delta_own;
    let weighted = cost * delta_phi;
    let abs = (delta_u - weighted).abs();
    let scale = delta_u.abs().max(weighted.abs());
    let rel = if scale > 0.0 { abs / scale } else { 0.0 };
    DeviationEval {
        abs,
        rel,
        winner_preserving: ra.winner_index == rb.winner_index,
        delta_u,
        weighted_dphi: weighted,
    }
}

fn constant_costs(game: &DiscreteGame) -> Result<Vec<f64>> {
    (0..game.n_sps)
        .map(|n| {
            game.utility.constant_cost(n).ok_or_else(|| {
                Error::Precondition(format!("SP {n} unit cost varies across services"))
            })
        })
        .collect()
}

fn potential_report(parts: Vec<(ResidualStats, ResidualStats, ResidualStats, Option<PotentialDeviation>, f64)>) -> PotentialReport {
    let mut all = ResidualStats::default();
    let mut keep = ResidualStats::default();
    let mut change = ResidualStats::default();
    let mut worst: Option<(f64, PotentialDeviation)> = None;
    for (a, k, c, w, wr) in parts {
        all.merge(&a);
        keep.merge(&k);
        change.merge(&c);
        if let Some(w) = w {
            if worst.as_ref().is_none_or(|(r, _)| wr > *r) {
                worst = Some((wr, w));
            }
        }
    }
    let passed = all.max_rel_residual <= POTENTIAL_TOLERANCE;
    PotentialReport {
        all,
        winner_preserving: keep,
        winner_changing: change,
        worst: worst.map(|(_, w)| w),
        tolerance: POTENTIAL_TOLERANCE,
        passed,
    }
}

type Part = (ResidualStats, ResidualStats, ResidualStats, Option<PotentialDeviation>, f64);

fn accumulate(part: &mut Part, game: &DiscreteGame, profile: &[usize], n: usize, a: usize, cost: f64) {
    let e = evaluate_deviation(game, profile, n, a, cost);
    part.0.add(e.abs, e.rel);
    if e.winner_preserving {
        part.1.add(e.abs, e.rel);
    } else {
        part.2.add(e.abs, e.rel);
    }
    if part.3.is_none() || e.rel > part.4 {
        part.4 = e.rel;
        part.3 = Some(PotentialDeviation {
            sp: n,
            profile: profile.to_vec(),
            new_action: a,
            delta_utility: e.delta_u,
            weighted_delta_potential: e.weighted_dphi,
        });
    }
}

/// Checks `ΔŪ_n = C_n·ΔΦ` over every unilateral deviation of every profile.
/// Requires each SP's unit cost to be constant across services.
pub fn check_potential_identity(game: &DiscreteGame) -> Result<PotentialReport> {
    let costs = constant_costs(game)?;
    game.ensure_enumerable()?;
    let total = game.n_profiles() as usize;
    let parts: Vec<Part> = (0..total)
        .into_par_iter()
        .map(|idx| {
            let profile = game.profile_at(idx as u128);
            let mut part: Part = Default::default();
            for n in 0..game.n_sps {
                for a in 0..game.grid[n].len() {
                    accumulate(&mut part, game, &profile, n, a, costs[n]);
                }
            }
            part
        })
        .collect();
    Ok(potential_report(parts))
}

/// Same identity over `samples` random (profile, SP, alternative action) draws.
pub fn sample_potential_identity(
    game: &DiscreteGame,
    samples: usize,
    seed: u64,
) -> Result<PotentialReport> {
    let costs = constant_costs(game)?;
    let parts: Vec<Part> = (0..samples)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream(seed, &[0x707, i as u64]);
            let profile = game.random_profile(&mut rng);
            let n = rng.random_range(0..game.n_sps);
            let a = rng.random_range(0..game.grid[n].len());
            let mut part: Part = Default::default();
            accumulate(&mut part, game, &profile, n, a, costs[n]);
            part
        })
        .collect();
    Ok(potential_report(parts))
}

#[derive(Debug, Clone, Serialize)]
pub struct NeCertificate {
    pub profile: Vec<usize>,
    pub improvement_path_len: usize,
    pub max_unilateral_gain: f64,
    /// Potential after each step, starting with the initial profile.
    pub potential_path: Vec<f64>,
    pub potential_non_decreasing: bool,
}

/// Round-robin best responses on the modified utility until a full round
/// passes without a strict improvement.
pub fn best_response_dynamics(
    game: &DiscreteGame,
    start: &[usize],
    max_iters: usize,
) -> Result<NeCertificate> {
    if start.len() != game.n_sps {
        return Err(Error::DimensionMismatch {
            expected: game.n_sps,
            actual: start.len(),
        });
    }
    let mut profile = start.to_vec();
    let mut potential_path = vec![game.potential(&profile)];
    let mut steps = 0usize;
    let mut quiet = 0usize;
    let mut n = 0usize;
    while quiet < game.n_sps {
        let (best, _) = game.best_response(&profile, n);
        if best != profile[n] {
            if steps == max_iters {
                return Err(Error::MaxIterations(max_iters));
            }
            profile[n] = best;
            steps += 1;
            quiet = 0;
            potential_path.push(game.potential(&profile));
        } else {
            quiet += 1;
        }
        n = (n + 1) % game.n_sps;
    }
    let potential_non_decreasing = potential_path.windows(2).all(|w| w[1] >= w[0]);
    Ok(NeCertificate {
        max_unilateral_gain: game.max_unilateral_gain(&profile),
        profile,
        improvement_path_len: steps,
        potential_path,
        potential_non_decreasing,
    })
}

/// Outcome of best-response dynamics from many random starts.
#[derive(Debug, Clone, Default, Serialize)]
pub struct BrdSummary {
    pub starts: usize,
    pub converged: usize,
    /// Converged runs whose endpoint has no improving deviation.
    pub at_nash: usize,
    /// Converged runs whose potential never decreased.
    pub monotone: usize,
    /// Runs that hit the iteration cap.
    pub hit_cap: usize,
    pub max_path_len: usize,
    pub passed: bool,
}

/// Runs BRD from `starts` uniformly drawn profiles and tallies
/// termination, equilibrium, and potential monotonicity.
pub fn brd_from_random_starts(
    game: &DiscreteGame,
    starts: usize,
    seed: u64,
    max_iters: usize,
) -> BrdSummary {
    let runs: Vec<Option<NeCertificate>> = (0..starts)
        .into_par_iter()
        .map(|i| {
            let start = game.random_profile(&mut stream(seed, &[0xB7D, i as u64]));
            best_response_dynamics(game, &start, max_iters).ok()
        })
        .collect();
    let mut s = BrdSummary {
        starts,
        ..Default::default()
    };
    for run in runs {
        match run {
            Some(c) => {
                s.converged += 1;
                s.at_nash += (c.max_unilateral_gain <= 0.0) as usize;
                s.monotone += c.potential_non_decreasing as usize;
                s.max_path_len = s.max_path_len.max(c.improvement_path_len);
            }
            None => s.hit_cap += 1,
        }
    }
    s.passed = s.converged == starts && s.at_nash == starts && s.monotone == starts;
    s
}

#[derive(Debug, Clone, Serialize)]
pub struct StagewiseReport {
    pub stages: usize,
    pub equilibria: Vec<Vec<usize>>,
    /// Σ_t Ū_n at the per-stage equilibria, per SP.
    pub equilibrium_totals: Vec<f64>,
    pub sequences_checked: u64,
    pub violations: u64,
    pub passed: bool,
}

fn stage_totals_exceed(game_seq: &[DiscreteGame], ne: &[Vec<usize>], n: usize) -> (u64, u64, f64) {
    let base: f64 = game_seq
        .iter()
        .zip(ne)
        .map(|(g, p)| g.modified_utility(p, n))
        .sum();
    // Per-stage utility of each alternative action, then every sequence.
    let per_stage: Vec<Vec<f64>> = game_seq
        .iter()
        .zip(ne)
        .map(|(g, p)| {
            let mut q = p.clone();
            (0..g.grid[n].len())
                .map(|a| {
                    q[n] = a;
                    g.modified_utility(&q, n)
                })
                .collect()
        })
        .collect();
    let radix: Vec<usize> = per_stage.iter().map(|v| v.len()).collect();
    let total: usize = radix.iter().product();
    let mut violations = 0u64;
    for mut idx in 0..total {
        let mut sum = 0.0;
        for (t, r) in radix.iter().enumerate() {
            sum += per_stage[t][idx % r];
            idx /= r;
        }
        if sum > base {
            violations += 1;
        }
    }
    (total as u64, violations, base)
}

/// Computes a pure NE per stage by best-response dynamics from the all-zero
/// profile, then checks that no SP gains from any sequence of unilateral
/// per-stage alternatives.
pub fn check_stagewise_optimality(stages: &[DiscreteGame]) -> Result<StagewiseReport> {
    if stages.is_empty() {
        return Err(Error::InvalidArgument("need at least one stage".into()));
    }
    let n_sps = stages[0].n_sps;
    if stages.iter().any(|g| g.n_sps != n_sps) {
        return Err(Error::InvalidArgument("stages disagree on N".into()));
    }
    for n in 0..n_sps {
        let seqs: u128 = stages.iter().map(|g| g.grid[n].len() as u128).product();
        if seqs > stages[0].profile_cap {
            return Err(Error::EnumerationCap {
                profiles: seqs,
                cap: stages[0].profile_cap,
            });
        }
    }
    let equilibria: Vec<Vec<usize>> = stages
        .iter()
        .map(|g| best_response_dynamics(g, &vec![0; n_sps], 10_000).map(|c| c.profile))
        .collect::<Result<_>>()?;
    let mut checked = 0u64;
    let mut violations = 0u64;
    let mut totals = Vec::with_capacity(n_sps);
    for n in 0..n_sps {
        let (c, v, base) = stage_totals_exceed(stages, &equilibria, n);
        checked += c;
        violations += v;
        totals.push(base);
    }
    Ok(StagewiseReport {
        stages: stages.len(),
        equilibria,
        equilibrium_totals: totals,
        sequences_checked: checked,
        violations,
        passed: violations == 0,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct DominatedStageControl {
    pub sp: usize,
    pub stage: usize,
    pub replaced_action: usize,
    pub equilibrium_total: f64,
    pub perturbed_total: f64,
    pub strictly_lower: bool,
}

/// Replaces SP `sp`'s equilibrium action at `stage` by its worst response
/// and reports whether the stage-summed utility strictly drops.
pub fn dominated_stage_control(
    stages: &[DiscreteGame],
    report: &StagewiseReport,
    sp: usize,
    stage: usize,
) -> DominatedStageControl {
    let g = &stages[stage];
    let ne = &report.equilibria[stage];
    let mut q = ne.clone();
    let (worst, _) = (0..g.grid[sp].len())
        .map(|a| {
            q[sp] = a;
            (a, g.modified_utility(&q, sp))
        })
        .fold((ne[sp], f64::INFINITY), |acc, x| if x.1 < acc.1 { x } else { acc });
    let mut perturbed = report.equilibrium_totals[sp];
    q[sp] = worst;
    perturbed += g.modified_utility(&q, sp) - g.modified_utility(ne, sp);
    DominatedStageControl {
        sp,
        stage,
        replaced_action: worst,
        equilibrium_total: report.equilibrium_totals[sp],
        perturbed_total: perturbed,
        strictly_lower: perturbed < report.equilibrium_totals[sp],
    }
}

/// Inflation levels `1.1, 1.2, ..., 1 + levels/10`.
pub fn inflation_levels(levels: usize) -> Vec<f64> {
    (1..=levels).map(|i| 1.0 + i as f64 / 10.0).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_cell(levels: usize, seed: u64) -> DiscreteGame {
        GameSpec::new(2, 1, 1, GridSpec::Diagonal { levels }, seed).build().unwrap()
    }

    #[test]
    fn compositions_enumerate() {
        assert_eq!(compositions(4, 2), vec![vec![1, 3], vec![2, 2], vec![3, 1]]);
        assert_eq!(compositions(3, 3), vec![vec![1, 1, 1]]);
        assert!(compositions(2, 3).is_empty());
    }

    #[test]
    fn grids_respect_budgets() {
        let g = GameSpec::new(3, 2, 2, GridSpec::Compositions { units: 4, sample: None }, 1)
            .build()
            .unwrap();
        assert_eq!(g.grid[0].len(), 81);
        for a in &g.grid[1] {
            let (f, b) = a.service_totals();
            for k in 0..2 {
                assert!((f[k] - 800e9).abs() < 1e-3);
                assert!((b[k] - 800e6).abs() < 1e-6);
            }
        }
        let levels = GameSpec::new(2, 1, 1, GridSpec::Levels { f_levels: 10, b_levels: 10 }, 1)
            .build()
            .unwrap();
        assert_eq!(levels.grid_sizes(), vec![100, 100]);
        assert!(levels.utility.penalty_delay_s > levels.max_finite_delay());
    }

    #[test]
    fn authenticity_vacuous_without_false_bids() {
        let g = single_cell(5, 3);
        let r = check_authenticity(&g, &[1.0], Mechanism::Standard).unwrap();
        assert_eq!(r.false_bids_checked, 0);
        assert!(r.passed);
    }

    #[test]
    fn authenticity_negative_control_finds_lose_to_win_gain() {
        let g = single_cell(10, 3);
        let r = check_authenticity(&g, &inflation_levels(10), Mechanism::UnverifiedBonus).unwrap();
        assert!(!r.passed);
        let cx = r.first_counterexample.unwrap();
        assert_eq!(cx.case, FalseBidCase::LoseToWin);
        assert!(cx.utility_false > cx.utility_true);
    }

    #[test]
    fn order_equivalence_small() {
        let g = single_cell(10, 5);
        let r = check_order_equivalence(&g, Mechanism::Standard).unwrap();
        assert!(r.passed, "{r:?}");
        assert!(r.pairs_checked > 0);
        let bad = check_order_equivalence(&g, Mechanism::DelayScaledBonus { per_second: 4000.0 })
            .unwrap();
        assert!(!bad.passed);
        assert!(bad.original_violations > 0);
    }

    #[test]
    fn identity_holds_on_winner_preserving_deviations() {
        let g = GameSpec::new(3, 2, 2, GridSpec::Compositions { units: 4, sample: Some(4) }, 9)
            .build()
            .unwrap();
        let r = check_potential_identity(&g).unwrap();
        assert!(r.winner_preserving.deviations > 0);
        assert_eq!(r.winner_preserving.max_abs_residual, 0.0);
        // Self-deviations are in the preserving set and contribute zeros.
        assert_eq!(r.all.deviations, 64 * 3 * 4);
    }

    #[test]
    fn identity_rejects_service_dependent_cost() {
        let mut g = single_cell(3, 1);
        g.utility.unit_cost_w[0] = vec![381.0];
        check_potential_identity(&g).unwrap();
        let mut g2 = GameSpec::new(2, 1, 2, GridSpec::Diagonal { levels: 2 }, 1).build().unwrap();
        g2.utility.unit_cost_w[1] = vec![381.0, 400.0];
        assert!(matches!(check_potential_identity(&g2), Err(Error::Precondition(_))));
    }

    #[test]
    fn scaled_cost_keeps_preserving_identity() {
        let mut g = GameSpec::new(3, 2, 2, GridSpec::Compositions { units: 4, sample: Some(4) }, 2)
            .build()
            .unwrap();
        g.utility.unit_cost_w[1] = vec![3810.0; 2];
        let r = check_potential_identity(&g).unwrap();
        assert_eq!(r.winner_preserving.max_rel_residual, 0.0);
    }

    #[test]
    fn brd_from_equilibrium_has_empty_path() {
        let g = single_cell(10, 4);
        let c = best_response_dynamics(&g, &[0, 0], 1000).unwrap();
        assert!(c.max_unilateral_gain <= 0.0);
        let again = best_response_dynamics(&g, &c.profile, 1000).unwrap();
        assert_eq!(again.improvement_path_len, 0);
        assert_eq!(again.profile, c.profile);
    }

    #[test]
    fn brd_reports_iteration_cap() {
        let g = single_cell(10, 4);
        // The top action is never a best response to itself for SP 1 at index tie,
        // so any start that needs moves fails with a zero budget.
        let start = vec![0, 0];
        let c = best_response_dynamics(&g, &start, 1000).unwrap();
        if c.improvement_path_len > 0 {
            assert!(matches!(
                best_response_dynamics(&g, &start, 0),
                Err(Error::MaxIterations(0))
            ));
        }
    }

    #[test]
    fn stagewise_single_stage_is_nash_check() {
        let g = single_cell(5, 8);
        let r = check_stagewise_optimality(std::slice::from_ref(&g)).unwrap();
        assert!(r.passed);
        assert!(g.is_nash(&r.equilibria[0]));
    }

    #[test]
    fn enumeration_cap_is_enforced() {
        let mut g = single_cell(10, 1);
        g.profile_cap = 10;
        assert!(matches!(
            check_order_equivalence(&g, Mechanism::Standard),
            Err(Error::EnumerationCap { .. })
        ));
    }
}
