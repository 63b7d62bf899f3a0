//! Subcommand implementations.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::Args;
use serde::Serialize;
use skybid_core::fedtrain::{evaluate, metrics_header, metrics_row, train_with_observer};
use skybid_core::game_oracle::{
    brd_from_random_starts, check_authenticity, check_order_equivalence,
    check_stagewise_optimality, dominated_stage_control, inflation_levels,
    sample_potential_identity, AuthenticityReport, BrdSummary, DiscreteGame,
    DominatedStageControl, GameSpec, GridSpec, Mechanism, OrderReport, PotentialReport,
    StagewiseReport,
};
use skybid_core::policy::PolicyParams;

use crate::config::RunConfig;
use crate::manifest::{RunManifest, RunStatus};
use crate::CliError;

pub const METRICS_FILE: &str = "metrics.csv";
pub const PARAMS_FILE: &str = "params.bin";
pub const CONFIG_FILE: &str = "config.toml";
pub const VALIDATION_FILE: &str = "validation.csv";
pub const SUMMARY_FILE: &str = "summary.csv";

/// Epochs averaged for the "final" columns of a sweep summary.
const SUMMARY_TAIL: usize = 10;

pub fn default_run_dir(root: &Path, cfg: &RunConfig) -> PathBuf {
    root.join(format!("{}-seed{}-{}", cfg.preset, cfg.seed, &cfg.hash()[..8]))
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(CliError::io(dir))
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    std::fs::write(path, contents).map_err(CliError::io(path))
}

fn write_params(path: &Path, params: &PolicyParams) -> Result<(), CliError> {
    let file = File::create(path).map_err(CliError::io(path))?;
    let mut w = BufWriter::new(file);
    params.write_snapshot(&mut w)?;
    w.flush().map_err(CliError::io(path))
}

/// Trains one run into `dir`. Returns a one-line summary.
pub fn train(cfg: &RunConfig, dir: &Path) -> Result<String, CliError> {
    let (scenario, train_cfg) = cfg.to_core()?;
    create_dir(dir)?;
    write_file(&dir.join(CONFIG_FILE), &cfg.to_toml())?;
    let mut manifest = RunManifest::start("train", cfg);
    manifest.write(dir)?;

    let metrics_path = dir.join(METRICS_FILE);
    let mut outputs = vec![PathBuf::from(CONFIG_FILE), PathBuf::from(METRICS_FILE)];
    let mut final_reward = f64::NAN;
    let result = (|| -> Result<(), CliError> {
        let file = File::create(&metrics_path).map_err(CliError::io(&metrics_path))?;
        let mut metrics = BufWriter::new(file);
        writeln!(metrics, "{}", metrics_header(cfg.n_sps)).map_err(CliError::io(&metrics_path))?;
        let (_, params) = train_with_observer(&scenario, &train_cfg, |record, params| {
            // Rows are flushed as they arrive so an interrupted run keeps its history.
            writeln!(metrics, "{}", metrics_row(record))?;
            metrics.flush()?;
            final_reward = record.mean_total_reward;
            let epoch = record.epoch + 1;
            if cfg.snapshot_every > 0 && epoch % cfg.snapshot_every == 0 && epoch < cfg.epochs {
                let name = format!("params_epoch{epoch:04}.bin");
                let file = File::create(dir.join(&name))?;
                params.write_snapshot(BufWriter::new(file))?;
                outputs.push(PathBuf::from(name));
            }
            Ok(())
        })?;
        write_params(&dir.join(PARAMS_FILE), &params)?;
        outputs.push(PathBuf::from(PARAMS_FILE));
        Ok(())
    })();
    manifest.outputs = outputs;
    manifest.finish(&result);
    manifest.write(dir)?;
    result?;
    Ok(format!(
        "{}: {} epochs, final mean episode reward {final_reward:.3}",
        dir.display(),
        cfg.epochs
    ))
}

#[derive(Debug, Clone, Args)]
pub struct OracleArgs {
    /// Compute and bandwidth grid levels of the authenticity game.
    #[arg(long, default_value_t = 10)]
    pub levels: usize,
    /// Inflation factors 1.1, 1.2, ... tried per true bid.
    #[arg(long, default_value_t = 10)]
    pub inflations: usize,
    /// Grid levels of the single-cell order-equivalence and BRD games.
    #[arg(long, default_value_t = 10)]
    pub diagonal: usize,
    /// Random deviations checked against the weighted-potential identity.
    #[arg(long, default_value_t = 10_000)]
    pub samples: usize,
    #[arg(long, default_value_t = 100)]
    pub brd_starts: usize,
    #[arg(long, default_value_t = 10_000)]
    pub brd_max_iters: usize,
    /// Stages of the stagewise-optimality check.
    #[arg(long, default_value_t = 2)]
    pub stages: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also run the broken mechanisms and require the checks to catch them.
    #[arg(long)]
    pub negative_controls: bool,
    /// Write the JSON report here as well as to stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
struct NegativeControls {
    unverified_bonus: AuthenticityReport,
    delay_scaled_bonus: OrderReport,
    dominated_stage: DominatedStageControl,
    detected: bool,
}

#[derive(Debug, Serialize)]
struct OracleReport {
    seed: u64,
    authenticity: AuthenticityReport,
    order_equivalence: OrderReport,
    potential_identity: PotentialReport,
    brd_single_cell: BrdSummary,
    brd_multi_cell: BrdSummary,
    stagewise: StagewiseReport,
    negative_controls: Option<NegativeControls>,
    passed: bool,
}

fn build(spec: GameSpec) -> Result<DiscreteGame, CliError> {
    Ok(spec.build()?)
}

/// Per-property games: single-cell grids where exhaustive enumeration is
/// cheap, and a 3-SP, 2-hotspot, 2-service game for the sampled checks.
pub fn oracle(args: &OracleArgs) -> Result<(), CliError> {
    if args.levels == 0 || args.diagonal == 0 || args.stages == 0 {
        return Err(CliError::Config("grid sizes and stage count must be positive".into()));
    }
    let seed = args.seed;
    let levels = build(GameSpec::new(
        2,
        1,
        1,
        GridSpec::Levels {
            f_levels: args.levels,
            b_levels: args.levels,
        },
        seed,
    ))?;
    let diagonal = build(GameSpec::new(2, 1, 1, GridSpec::Diagonal { levels: args.diagonal }, seed))?;
    let multi = build(GameSpec::new(
        3,
        2,
        2,
        GridSpec::Compositions {
            units: 4,
            sample: Some(4),
        },
        seed,
    ))?;
    let stages = (0..args.stages)
        .map(|t| build(GameSpec::new(2, 1, 1, GridSpec::Diagonal { levels: 5 }, seed + t as u64)))
        .collect::<Result<Vec<_>, _>>()?;

    let factors = inflation_levels(args.inflations);
    let authenticity = check_authenticity(&levels, &factors, Mechanism::Standard)?;
    let order_equivalence = check_order_equivalence(&diagonal, Mechanism::Standard)?;
    let potential_identity = sample_potential_identity(&multi, args.samples, seed)?;
    let brd_single_cell = brd_from_random_starts(&diagonal, args.brd_starts, seed, args.brd_max_iters);
    let brd_multi_cell = brd_from_random_starts(&multi, args.brd_starts, seed, args.brd_max_iters);
    let stagewise = check_stagewise_optimality(&stages)?;

    let negative_controls = if args.negative_controls {
        let unverified_bonus = check_authenticity(&levels, &factors, Mechanism::UnverifiedBonus)?;
        let delay_scaled_bonus =
            check_order_equivalence(&diagonal, Mechanism::DelayScaledBonus { per_second: 4000.0 })?;
        // Losers pay the penalty under every losing action; the stage winner
        // is the SP with a strictly worse alternative.
        let winner = stages[0]
            .outcome(&stagewise.equilibria[0])
            .winner(0, 0)
            .unwrap_or(0);
        let dominated_stage = dominated_stage_control(&stages, &stagewise, winner, 0);
        let detected =
            !unverified_bonus.passed && !delay_scaled_bonus.passed && dominated_stage.strictly_lower;
        Some(NegativeControls {
            unverified_bonus,
            delay_scaled_bonus,
            dominated_stage,
            detected,
        })
    } else {
        None
    };

    let passed = authenticity.passed
        && order_equivalence.passed
        && potential_identity.passed
        && brd_single_cell.passed
        && brd_multi_cell.passed
        && stagewise.passed
        && negative_controls.as_ref().is_none_or(|c| c.detected);
    let report = OracleReport {
        seed,
        authenticity,
        order_equivalence,
        potential_identity,
        brd_single_cell,
        brd_multi_cell,
        stagewise,
        negative_controls,
        passed,
    };
    let json = serde_json::to_string_pretty(&report).map_err(|e| CliError::Runtime(e.to_string()))?;
    println!("{json}");
    if let Some(path) = &args.out {
        write_file(path, &(json + "\n"))?;
    }
    let failed: Vec<&str> = [
        ("authenticity", report.authenticity.passed),
        ("order_equivalence", report.order_equivalence.passed),
        ("potential_identity", report.potential_identity.passed),
        ("brd_single_cell", report.brd_single_cell.passed),
        ("brd_multi_cell", report.brd_multi_cell.passed),
        ("stagewise", report.stagewise.passed),
        (
            "negative_controls",
            report.negative_controls.as_ref().is_none_or(|c| c.detected),
        ),
    ]
    .into_iter()
    .filter(|(_, ok)| !ok)
    .map(|(name, _)| name)
    .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Check(failed.join(", ")))
    }
}

/// Replays a frozen policy and writes per-episode negative utilities.
pub fn validate(
    cfg: &RunConfig,
    params_path: &Path,
    episodes: usize,
    seed: u64,
    dir: &Path,
) -> Result<(), CliError> {
    let (scenario, _) = cfg.to_core()?;
    let file = File::open(params_path).map_err(CliError::io(params_path))?;
    let params = PolicyParams::read_snapshot(std::io::BufReader::new(file))?;
    let evals = evaluate(&scenario, &params, episodes, seed)?;
    create_dir(dir)?;

    let mut csv = String::from("episode,mean_negative_utility");
    for n in 0..cfg.n_sps {
        csv.push_str(&format!(",neg_utility_sp{n}"));
    }
    csv.push('\n');
    for e in &evals {
        csv.push_str(&format!("{},{}", e.episode, e.mean_negative_utility()));
        for v in &e.negative_utility_per_sp {
            csv.push_str(&format!(",{v}"));
        }
        csv.push('\n');
    }
    write_file(&dir.join(VALIDATION_FILE), &csv)?;

    let means: Vec<f64> = evals.iter().map(|e| e.mean_negative_utility()).collect();
    if means.is_empty() {
        println!("episodes 0");
    } else {
        let mean = means.iter().sum::<f64>() / means.len() as f64;
        let lo = means.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = means.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        println!("episodes {} mean_negative_utility {mean:.6} min {lo:.6} max {hi:.6}", means.len());
    }
    Ok(())
}

fn sweep_dir(root: &Path, preset: &str, seed: u64) -> PathBuf {
    root.join(preset).join(format!("seed{seed}"))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub final_reward: f64,
    pub final_loss: f64,
    pub mean_good_count: f64,
    pub epochs: usize,
}

/// Tail means of a metrics file's reward and loss columns.
pub fn summarize_metrics(path: &Path) -> Result<RunSummary, CliError> {
    let text = std::fs::read_to_string(path).map_err(CliError::io(path))?;
    let mut lines = text.lines();
    let header: Vec<&str> = lines
        .next()
        .ok_or_else(|| CliError::Runtime(format!("{}: empty metrics file", path.display())))?
        .split(',')
        .collect();
    let col = |name: &str| {
        header
            .iter()
            .position(|h| *h == name)
            .ok_or_else(|| CliError::Runtime(format!("{}: no `{name}` column", path.display())))
    };
    let (reward, loss, good) = (col("mean_total_reward")?, col("loss")?, col("good_count")?);
    let rows: Vec<Vec<f64>> = lines
        .map(|line| {
            let fields: Vec<&str> = line.split(',').collect();
            [reward, loss, good]
                .iter()
                .map(|&c| fields.get(c).and_then(|f| f.parse().ok()).unwrap_or(f64::NAN))
                .collect()
        })
        .collect();
    let tail = &rows[rows.len().saturating_sub(SUMMARY_TAIL)..];
    let mean_of = |rows: &[Vec<f64>], i: usize| {
        rows.iter().map(|r| r[i]).sum::<f64>() / rows.len().max(1) as f64
    };
    Ok(RunSummary {
        final_reward: mean_of(tail, 0),
        final_loss: mean_of(tail, 1),
        mean_good_count: mean_of(&rows, 2),
        epochs: rows.len(),
    })
}

/// Runs every preset × seed into `root/<preset>/seed<seed>`, skipping runs
/// whose manifest is complete for the same configuration, then writes
/// `root/summary.csv`.
pub fn sweep(
    presets: &[String],
    seeds: &[u64],
    overrides: &[String],
    root: &Path,
) -> Result<(), CliError> {
    let mut configs = Vec::new();
    for preset in presets {
        for &seed in seeds {
            let mut o = overrides.to_vec();
            o.push(format!("seed={seed}"));
            configs.push(RunConfig::resolve(Some(preset), None, &o)?);
        }
    }
    create_dir(root)?;
    let mut summary = String::from(
        "preset,seed,config_hash,epochs,final_mean_total_reward,final_loss,mean_good_count\n",
    );
    for cfg in &configs {
        let dir = sweep_dir(root, &cfg.preset, cfg.seed);
        let done = RunManifest::read(&dir)
            .is_some_and(|m| m.status == RunStatus::Complete && m.config_hash == cfg.hash());
        if done {
            eprintln!("skip {} (complete)", dir.display());
        } else {
            eprintln!("{}", train(cfg, &dir)?);
        }
        let s = summarize_metrics(&dir.join(METRICS_FILE))?;
        summary.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            cfg.preset,
            cfg.seed,
            cfg.hash(),
            s.epochs,
            s.final_reward,
            s.final_loss,
            s.mean_good_count
        ));
    }
    write_file(&root.join(SUMMARY_FILE), &summary)?;
    println!("{}", root.join(SUMMARY_FILE).display());
    Ok(())
}
