use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::Instant;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use smap_core::config::ExperimentConfig;
use smap_core::env::make_split;
use smap_core::eval::{generalization_report, normalize_return, render_episode, report_csv, report_table};
use smap_core::paths::check_alpha;
use smap_core::ppo::{evaluate_levels, train, MetricsRow};
use smap_core::run::{existing_runs, load_config, load_policy, run_name, CONFIG_FILE, METRICS_FILE, TIMING_FILE};
use smap_core::{gradcheck, oracle, DType, Fault, Scalar};

#[derive(Parser)]
#[command(name = "smap", version, about = "Sparse masked attention agents on procedural gridworlds")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train one agent and write a run directory.
    Train(TrainArgs),
    /// Greedy evaluation of a finished run on one split.
    Evaluate {
        #[arg(long)]
        run: PathBuf,
        #[arg(long, value_enum)]
        split: Split,
    },
    /// One training run per α (and seed), then a generalization report.
    Sweep(SweepArgs),
    /// Export importance maps for a greedy episode of a finished run.
    Visualize {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        level: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        frames: usize,
        #[arg(long)]
        force: bool,
    },
    /// Finite-difference check of every backward rule at 64-bit.
    Gradcheck {
        #[arg(long, default_value_t = 100)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Corrupt one backward rule to confirm the check notices.
        #[arg(long)]
        inject_fault: Option<String>,
    },
    /// Brute-force path, level and masking oracles.
    Oracle {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Replace existing runs with the same env, policy, α and seed.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, value_delimiter = ',', num_args = 0..)]
    alphas: Vec<String>,
    /// Seeds to run per α; defaults to the config seed.
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    /// Launch every run as its own process at once.
    #[arg(long)]
    parallel: bool,
    #[arg(long)]
    force: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Test,
}

/// Bad invocation or input; exits with 2.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<UsageError>().is_some() {
        return 2;
    }
    match err.downcast_ref::<smap_core::Error>() {
        Some(
            smap_core::Error::Config(_)
            | smap_core::Error::Usage(_)
            | smap_core::Error::Schema { .. }
            | smap_core::Error::Io { .. },
        ) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Cmd::Train(args) => cmd_train(&args).map(|dir| {
            println!("{}", dir.display());
            true
        }),
        Cmd::Evaluate { run, split } => cmd_evaluate(&run, split).map(|_| true),
        Cmd::Sweep(args) => cmd_sweep(&args).map(|_| true),
        Cmd::Visualize {
            run,
            level,
            out,
            frames,
            force,
        } => cmd_visualize(&run, level, &out, frames, force).map(|_| true),
        Cmd::Gradcheck {
            instances,
            seed,
            inject_fault,
        } => cmd_gradcheck(instances, seed, inject_fault.as_deref()),
        Cmd::Oracle { seed } => cmd_oracle(seed),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn load_train_config(path: &Path, seed: Option<u64>) -> anyhow::Result<ExperimentConfig> {
    if !path.is_file() {
        return Err(usage(format!("config file not found: {}", path.display())));
    }
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(s) = seed {
        cfg.ppo.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Claims a fresh run directory, clearing older runs of the same identity
/// only when `force` is set.
fn prepare_run_dir(cfg: &ExperimentConfig, force: bool) -> anyhow::Result<PathBuf> {
    let existing = existing_runs(cfg)?;
    if !existing.is_empty() {
        if !force {
            return Err(usage(format!(
                "run already exists: {} (pass --force to replace it)",
                existing[0].display()
            )));
        }
        for dir in &existing {
            std::fs::remove_dir_all(dir).with_context(|| format!("removing {}", dir.display()))?;
        }
    }
    let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%S").to_string();
    let dir = cfg.out_dir.join(run_name(cfg, &stamp));
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    cfg.save(dir.join(CONFIG_FILE))?;
    Ok(dir)
}

fn run_training(cfg: &ExperimentConfig, force: bool) -> anyhow::Result<PathBuf> {
    let dir = prepare_run_dir(cfg, force)?;
    let t0 = Instant::now();
    let mut log = |r: &MetricsRow| {
        eprintln!(
            "[{:>6.0}s] step {:>8} {:<5} return {:>8.3} paths {:.4}",
            t0.elapsed().as_secs_f64(),
            r.step,
            r.split,
            r.mean_return,
            r.path_fraction
        );
    };
    match cfg.precision {
        DType::F32 => train::<f32>(cfg, Some(&dir), &mut log).map(drop)?,
        DType::F64 => train::<f64>(cfg, Some(&dir), &mut log).map(drop)?,
    }
    std::fs::write(dir.join(TIMING_FILE), format!("{:.1}\n", t0.elapsed().as_secs_f64()))?;
    Ok(dir)
}

fn cmd_train(args: &TrainArgs) -> anyhow::Result<PathBuf> {
    let cfg = load_train_config(&args.config, args.seed)?;
    run_training(&cfg, args.force)
}

fn evaluate_run<F: Scalar>(run: &Path, cfg: &ExperimentConfig, seeds: &[u64]) -> anyhow::Result<(f64, f64, f64)> {
    let (policy, store) = load_policy::<F>(run, cfg)?;
    let s = evaluate_levels(&policy, &store, cfg.env, seeds)?;
    Ok((s.mean_return(), s.std_return(), s.path_fraction()))
}

fn cmd_evaluate(run: &Path, split: Split) -> anyhow::Result<()> {
    let cfg = load_config(run)?;
    let (train_seeds, test_seeds) = make_split(cfg.env, cfg.n_train, cfg.n_test)?;
    let (name, seeds) = match split {
        Split::Train => ("train", train_seeds),
        Split::Test => ("test", test_seeds),
    };
    let (mean, std, pf) = match cfg.precision {
        DType::F32 => evaluate_run::<f32>(run, &cfg, &seeds)?,
        DType::F64 => evaluate_run::<f64>(run, &cfg, &seeds)?,
    };
    println!("split,levels,mean_return,std_return,normalized_return,path_fraction");
    println!(
        "{name},{},{mean:.6},{std:.6},{:.6},{pf:.6}",
        seeds.len(),
        normalize_return(mean, cfg.env)?
    );
    Ok(())
}

fn parse_alphas(raw: &[String]) -> anyhow::Result<Vec<f64>> {
    let alphas: Vec<f64> = raw
        .iter()
        .filter(|s| !s.trim().is_empty())
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| usage(format!("invalid alpha '{s}'")))
        })
        .collect::<anyhow::Result<_>>()?;
    if alphas.is_empty() {
        return Err(usage("--alphas needs at least one value"));
    }
    for &a in &alphas {
        check_alpha(a).map_err(|e| usage(e.to_string()))?;
    }
    Ok(alphas)
}

fn cmd_sweep(args: &SweepArgs) -> anyhow::Result<()> {
    let alphas = parse_alphas(&args.alphas)?;
    let base = load_train_config(&args.config, None)?;
    let seeds = if args.seeds.is_empty() { vec![base.ppo.seed] } else { args.seeds.clone() };
    let mut plans = Vec::new();
    for &alpha in &alphas {
        for &seed in &seeds {
            let mut cfg = base.clone();
            cfg.ppo.alpha = alpha;
            cfg.ppo.seed = seed;
            if !args.force {
                if let Some(dir) = existing_runs(&cfg)?.first() {
                    bail!(UsageError(format!(
                        "run already exists: {} (pass --force to replace it)",
                        dir.display()
                    )));
                }
            }
            plans.push(cfg);
        }
    }
    let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%S").to_string();
    let sweep_dir = base.out_dir.join(format!("sweep_{}_{}_{stamp}", base.env, base.policy));
    std::fs::create_dir_all(&sweep_dir).with_context(|| format!("creating {}", sweep_dir.display()))?;

    let runs = if args.parallel {
        launch_parallel(&plans, &sweep_dir, args.force)?
    } else {
        plans
            .iter()
            .map(|cfg| run_training(cfg, args.force))
            .collect::<anyhow::Result<Vec<_>>>()?
    };
    let files: Vec<PathBuf> = runs.iter().map(|d| d.join(METRICS_FILE)).collect();
    let rows = generalization_report(&files, base.env)?;
    let report = sweep_dir.join("report.csv");
    std::fs::write(&report, report_csv(&rows)).with_context(|| format!("writing {}", report.display()))?;
    let list: String = runs.iter().map(|d| format!("{}\n", d.display())).collect();
    std::fs::write(sweep_dir.join("runs.txt"), list)?;
    print!("{}", report_table(&rows));
    println!("report: {}", report.display());
    Ok(())
}

/// Each run in its own `smap train` process; waits for all of them.
fn launch_parallel(plans: &[ExperimentConfig], sweep_dir: &Path, force: bool) -> anyhow::Result<Vec<PathBuf>> {
    let exe = std::env::current_exe()?;
    let mut children = Vec::new();
    for (i, cfg) in plans.iter().enumerate() {
        let path = sweep_dir.join(format!("run_{i:02}.cfg"));
        cfg.save(&path)?;
        let mut cmd = Command::new(&exe);
        cmd.arg("train").arg("--config").arg(&path);
        if force {
            cmd.arg("--force");
        }
        let log = std::fs::File::create(sweep_dir.join(format!("run_{i:02}.log")))?;
        cmd.stderr(log).stdout(std::process::Stdio::piped());
        children.push(cmd.spawn().context("launching training process")?);
    }
    let mut runs = Vec::new();
    for (i, child) in children.into_iter().enumerate() {
        let out = child.wait_with_output()?;
        if !out.status.success() {
            bail!("run {i} failed; see {}", sweep_dir.join(format!("run_{i:02}.log")).display());
        }
        let stdout = String::from_utf8_lossy(&out.stdout);
        let dir = stdout.lines().last().context("training process printed no run directory")?;
        runs.push(PathBuf::from(dir.trim()));
    }
    Ok(runs)
}

fn cmd_visualize(run: &Path, level: u64, out: &Path, frames: usize, force: bool) -> anyhow::Result<()> {
    let cfg = load_config(run)?;
    if out.exists() && std::fs::read_dir(out)?.next().is_some() && !force {
        return Err(usage(format!(
            "output directory {} is not empty (pass --force to write into it)",
            out.display()
        )));
    }
    let maps = match cfg.precision {
        DType::F32 => {
            let (p, s) = load_policy::<f32>(run, &cfg)?;
            render_episode(&p, &s, cfg.env, level, frames, out)?
        }
        DType::F64 => {
            let (p, s) = load_policy::<f64>(run, &cfg)?;
            render_episode(&p, &s, cfg.env, level, frames, out)?
        }
    };
    println!("wrote {} frames to {}", maps.len(), out.display());
    Ok(())
}

fn cmd_gradcheck(instances: usize, seed: u64, fault: Option<&str>) -> anyhow::Result<bool> {
    let fault = fault
        .map(|f| {
            Fault::parse(f).ok_or_else(|| {
                let names: Vec<&str> = Fault::ALL.iter().map(|f| f.name()).collect();
                usage(format!("unknown fault '{f}' (one of {})", names.join(", ")))
            })
        })
        .transpose()?;
    let report = gradcheck::run(&gradcheck::Options {
        instances,
        seed,
        fault,
        only: Vec::new(),
    })?;
    print!("{}", report.render());
    Ok(report.passed())
}

fn cmd_oracle(seed: u64) -> anyhow::Result<bool> {
    let outcomes = oracle::run_all(seed)?;
    print!("{}", oracle::render(&outcomes));
    Ok(outcomes.iter().all(|o| o.passed()))
}
