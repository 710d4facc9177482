mod config;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use splitinf_core::scenario::{
    bandwidth_csv, compression_csv, layer_series, simulate_profiles, sweep_bandwidth, sweep_compression,
};
use splitinf_core::{
    accuracy, build_reference_model, compression_ratio, cost_profile, eliminate_neurons, load_model, prune, save_model,
    train, Dataset, ModelGraph, SimReport,
};

use config::RunConfig;

#[derive(Parser)]
#[command(name = "splitinf", version, about = "Energy-optimal split inference simulator")]
struct Cli {
    /// TOML run configuration; built-in defaults are used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides both the training and the simulation seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (overrides `output_dir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the reference CNN with the L1-regularized objective.
    Train,
    /// Magnitude-prune a model and drop dead neurons.
    Prune {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Per-layer operation counts and energies, dense and masked.
    Profile {
        #[arg(long)]
        model: PathBuf,
    },
    /// Run every policy along the configured trajectory.
    Simulate {
        #[arg(long)]
        compressed: PathBuf,
        #[arg(long)]
        dense: PathBuf,
    },
    /// Parameter sweeps.
    Sweep {
        #[command(subcommand)]
        kind: SweepKind,
    },
}

#[derive(Subcommand)]
enum SweepKind {
    /// Compression ratio, accuracy and PS energy per pruning threshold.
    Compression {
        #[arg(long)]
        model: PathBuf,
    },
    /// Mean energy of every policy per bandwidth at the reference distance.
    Bandwidth {
        #[arg(long)]
        compressed: PathBuf,
        #[arg(long)]
        dense: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
        cfg.seed = seed;
    }
    if let Some(out) = cli.out {
        cfg.output_dir = out;
    }
    let out = cfg.output_dir.clone();
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    match cli.command {
        Command::Train => cmd_train(&cfg, &out),
        Command::Prune { model, threshold } => {
            if let Some(t) = threshold {
                cfg.prune.threshold = t;
            }
            cmd_prune(&cfg, &model, &out)
        }
        Command::Profile { model } => cmd_profile(&cfg, &model, &out),
        Command::Simulate { compressed, dense } => cmd_simulate(&cfg, &compressed, &dense, &out),
        Command::Sweep {
            kind: SweepKind::Compression { model },
        } => cmd_sweep_compression(&cfg, &model, &out),
        Command::Sweep {
            kind: SweepKind::Bandwidth { compressed, dense },
        } => cmd_sweep_bandwidth(&cfg, &compressed, &dense, &out),
    }
}

fn write(path: PathBuf, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
    println!("wrote {}", path.display());
    Ok(())
}

fn load(path: &Path) -> Result<ModelGraph> {
    load_model(path).with_context(|| format!("loading model {}", path.display()))
}

fn load_split(images: &Path, labels: &Path, limit: Option<usize>) -> Result<Dataset> {
    let mut data = Dataset::load(images, labels)?;
    if let Some(n) = limit {
        data.truncate(n);
    }
    Ok(data)
}

fn load_test(cfg: &RunConfig) -> Result<Dataset> {
    let d = &cfg.dataset;
    load_split(&d.test_images, &d.test_labels, d.test_limit)
}

fn cmd_train(cfg: &RunConfig, out: &Path) -> Result<()> {
    let tc = cfg.train_config()?;
    let d = &cfg.dataset;
    let data = load_split(&d.train_images, &d.train_labels, d.train_limit)?;
    let test = load_test(cfg)?;
    let mut model = build_reference_model(tc.seed);
    let curve = train(&mut model, &data, &tc)?;
    let mut csv = String::from("epoch,objective,loss,l1_term\n");
    for e in &curve {
        writeln!(csv, "{},{:.9e},{:.9e},{:.9e}", e.epoch, e.objective, e.loss, e.l1_term)?;
    }
    let acc = accuracy(&model, &test)?;
    save_model(&model, out.join("model_dense.splitnn"))?;
    println!("wrote {}", out.join("model_dense.splitnn").display());
    write(out.join("loss.csv"), csv)?;
    println!("test accuracy {:.2}% on {} images", 100.0 * acc, test.len());
    Ok(())
}

fn cmd_prune(cfg: &RunConfig, model_in: &Path, out: &Path) -> Result<()> {
    let dense = load(model_in)?;
    let mut model = dense.clone();
    let removed = prune(&mut model, &cfg.prune_config())?;
    eliminate_neurons(&mut model);
    let report = compression_ratio(&dense, &model)?;
    save_model(&model, out.join("model_pruned.splitnn"))?;
    println!("wrote {}", out.join("model_pruned.splitnn").display());
    write(
        out.join("compression.json"),
        serde_json::to_string_pretty(&report)? + "\n",
    )?;
    println!(
        "threshold {:e}: {removed} parameters below threshold, {} of {} retained, C_r = {:.4}",
        cfg.prune.threshold, report.nonzero_compressed, report.nonzero_original, report.ratio
    );
    Ok(())
}

fn cmd_profile(cfg: &RunConfig, model_in: &Path, out: &Path) -> Result<()> {
    let model = load(model_in)?;
    let k = cfg.energy_constants();
    let masked = cost_profile(&model, &k);
    let dense = cost_profile(&model.dense_view(), &k);
    write(out.join("profile_dense.csv"), dense.to_csv())?;
    write(out.join("profile_masked.csv"), masked.to_csv())?;
    write(out.join("layers.dat"), layer_series(&dense, &masked))?;
    let gamma = |p: &splitinf_core::CostProfile| p.per_layer.iter().map(|l| l.cost.gamma).sum::<u64>();
    println!(
        "parameters: dense {}, masked {}; full local E_p: dense {:.5e} J, masked {:.5e} J",
        gamma(&dense),
        gamma(&masked),
        dense.prefix_e_p[dense.depth()],
        masked.prefix_e_p[masked.depth()]
    );
    Ok(())
}

fn print_summary(report: &SimReport) {
    let fmt = |s: Option<splitinf_core::scenario::Stat>| match s {
        Some(s) => format!("{:.5e} ± {:.2e}", s.mean, s.stderr),
        None => "n/a".to_string(),
    };
    for p in &report.policies {
        println!(
            "W = {:e} Hz  {:<8} E = {} J  CO2 = {} kg  completed {}  dead links {}",
            report.bandwidth,
            p.policy.name(),
            fmt(p.e),
            fmt(p.co2),
            p.completed,
            p.dead_links
        );
    }
}

fn cmd_simulate(cfg: &RunConfig, compressed: &Path, dense: &Path, out: &Path) -> Result<()> {
    let sim = cfg.sim_config()?;
    let traj = cfg.trajectory()?;
    let pc = cost_profile(&load(compressed)?, &sim.energy);
    let pd = cost_profile(&load(dense)?, &sim.energy);
    let mut log = String::new();
    let report = simulate_profiles(&pc, &pd, &traj, &sim, Some(&mut log))?;
    write(out.join("report.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    write(out.join("report.csv"), report.to_csv())?;
    write(out.join("decisions.csv"), log)?;
    write(out.join("trajectory.dat"), report.trajectory_series())?;
    print_summary(&report);
    Ok(())
}

fn cmd_sweep_compression(cfg: &RunConfig, model_in: &Path, out: &Path) -> Result<()> {
    let sim = cfg.sim_config()?;
    let dense = load(model_in)?;
    let test = load_test(cfg)?;
    let rows = sweep_compression(&dense, &cfg.sweep.thresholds, &test, cfg.sweep.draws, &sim)?;
    write(out.join("sweep_compression.csv"), compression_csv(&rows))?;
    for r in &rows {
        println!(
            "threshold {:e}: C_r = {:.4}, test accuracy {:.2}%, PS E = {:.5e} J",
            r.threshold,
            r.c_r,
            100.0 * r.test_accuracy,
            r.mean_e.mean
        );
    }
    Ok(())
}

fn cmd_sweep_bandwidth(cfg: &RunConfig, compressed: &Path, dense: &Path, out: &Path) -> Result<()> {
    let sim = cfg.sim_config()?;
    let pc = cost_profile(&load(compressed)?, &sim.energy);
    let pd = cost_profile(&load(dense)?, &sim.energy);
    let reports = sweep_bandwidth(&pc, &pd, &cfg.bandwidths(), cfg.sweep.draws, &sim)?;
    write(out.join("sweep_bandwidth.csv"), bandwidth_csv(&reports))?;
    write(
        out.join("sweep_bandwidth.json"),
        serde_json::to_string_pretty(&reports)? + "\n",
    )?;
    for r in &reports {
        print_summary(r);
    }
    Ok(())
}
