use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use deceptive_vis::actors::{Scheme, StageTimes};
use deceptive_vis::classifier::{desk_architecture, train, Model};
use deceptive_vis::exec::{with_workers, Execution, WORKERS_ENV};
use deceptive_vis::harness::{
    calibrate_pls_baseline, default_coding_rate, export_report, run_monte_carlo, simulate, sweep, write_timing,
    BenchmarkSettings, ExperimentConfig, ExperimentReport, SceneConfig,
};
use deceptive_vis::poisoner::{build_poison_cache, plan_pairs};

#[derive(Parser)]
#[command(name = "dvsim", version, about = "Deceptive visual encryption simulator")]
struct Cli {
    /// Experiment TOML; the bundled defaults are used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads for the parallel stages.
    #[arg(long, global = true, env = WORKERS_ENV)]
    workers: Option<usize>,
    /// Run every stage on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the victim classifier and save it to `model_path`.
    Train,
    /// Build the poison cache against the trained model.
    Poison,
    /// Benchmark all four schemes on each selected scene.
    Simulate(RunArgs),
    /// Sweep the mixing ratio over `alpha_grid`.
    Sweep(RunArgs),
    /// Find the NVE power that matches a target Bob accuracy.
    Calibrate {
        #[command(flatten)]
        run: RunArgs,
        /// Target accuracy; defaults to the VENENA Bob accuracy at the
        /// benchmark mixing ratio.
        #[arg(long)]
        target: Option<f64>,
    },
    /// Print saved JSON reports and optionally re-export them as CSV.
    Report {
        reports: Vec<PathBuf>,
        /// Directory for re-exported CSV files.
        #[arg(long)]
        csv_dir: Option<PathBuf>,
    },
    /// Print the effective configuration as TOML.
    Config,
}

#[derive(Args)]
struct RunArgs {
    /// Scene label or 1-based index; all scenes when omitted.
    #[arg(long)]
    scene: Option<String>,
    /// Trials per point, overriding the configuration.
    #[arg(long)]
    trials: Option<usize>,
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path).with_context(|| format!("loading {}", path.display()))?,
        None => ExperimentConfig::default(),
    };
    let exec = if cli.sequential { Execution::Sequential } else { Execution::Parallel };
    let workers = cli.workers;
    with_workers(workers, move || run(cli.command, &cfg, exec))
}

fn run(command: Command, cfg: &ExperimentConfig, exec: Execution) -> Result<()> {
    match command {
        Command::Train => cmd_train(cfg, exec),
        Command::Poison => cmd_poison(cfg, exec),
        Command::Simulate(args) => cmd_simulate(cfg, &args, exec),
        Command::Sweep(args) => cmd_sweep(cfg, &args, exec),
        Command::Calibrate { run, target } => cmd_calibrate(cfg, &run, target, exec),
        Command::Report { reports, csv_dir } => cmd_report(&reports, csv_dir.as_deref()),
        Command::Config => {
            print!("{}", cfg.to_toml()?);
            Ok(())
        }
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

fn scenes<'a>(cfg: &'a ExperimentConfig, key: Option<&str>) -> Result<Vec<&'a SceneConfig>> {
    Ok(match key {
        Some(k) => vec![cfg.scene(k)?],
        None => cfg.scenes.iter().collect(),
    })
}

fn print_times(label: &str, t: &StageTimes) {
    println!(
        "{label} stage times: poisoning {:.2} s, phy {:.2} s, classification {:.2} s",
        t.poisoning.as_secs_f64(),
        t.phy.as_secs_f64(),
        t.classification.as_secs_f64()
    );
}

fn print_report(report: &ExperimentReport) {
    println!(
        "{} (seed {}, config {}, coding rate {:.6e})",
        report.scene.label, report.seed, report.config_hash, report.coding_rate
    );
    println!(
        "  {:<18} {:>6} {:>10} {:>8} {:>10} {:>10} {:>10}",
        "scheme", "alpha", "power_w", "bob", "eve_full", "eve_part", "eve_decv"
    );
    for p in &report.points {
        let m = &p.metrics;
        println!(
            "  {:<18} {:>6.3} {:>10.4e} {:>8.4} {:>10.4} {:>10.4} {:>10.4}",
            p.scheme.kind.name(),
            p.scheme.alpha,
            p.total_power,
            m.bob.accuracy,
            m.eve_full.accuracy,
            m.eve_partial.accuracy,
            m.eve_full.deception_rate
        );
    }
}

fn cmd_train(cfg: &ExperimentConfig, exec: Execution) -> Result<()> {
    let db = cfg.dataset.load()?;
    let start = Instant::now();
    let out = train(&desk_architecture(), &db, &cfg.train, exec)?;
    let secs = start.elapsed().as_secs_f64();
    ensure_parent(&cfg.model_path)?;
    out.model.save(&cfg.model_path)?;
    println!(
        "trained {} parameters on {} images in {secs:.1} s; held-out accuracy {:.4}",
        out.model.parameter_count(),
        out.train_ids.len(),
        out.held_out_accuracy
    );
    println!("model written to {}", cfg.model_path.display());
    Ok(())
}

fn cmd_poison(cfg: &ExperimentConfig, exec: Execution) -> Result<()> {
    let db = cfg.dataset.load()?;
    let model = Model::load(&cfg.model_path).with_context(|| "run `dvsim train` first")?;
    let plan = plan_pairs(&db, cfg.poison.per_pair, cfg.poison.config.seed);
    let start = Instant::now();
    let cache = build_poison_cache(&model, &db, &plan, &cfg.poison.config, exec)?;
    let secs = start.elapsed().as_secs_f64();
    ensure_parent(&cfg.poison.cache_path)?;
    cache.save(&cfg.poison.cache_path)?;
    println!(
        "poisoned {} images in {secs:.1} s ({:.2} s each); success rate {:.4}",
        cache.entries.len(),
        secs / cache.entries.len().max(1) as f64,
        cache.success_rate()
    );
    println!("cache written to {}", cfg.poison.cache_path.display());
    Ok(())
}

fn cmd_simulate(cfg: &ExperimentConfig, args: &RunArgs, exec: Execution) -> Result<()> {
    let ctx = cfg.load_pipeline().context("loading model and poison cache")?;
    let settings = BenchmarkSettings {
        n_trials: args.trials.unwrap_or(cfg.trials.benchmark()),
        calibration_trials: args.trials.unwrap_or(cfg.trials.calibration),
        ..cfg.benchmark
    };
    for scene in scenes(cfg, args.scene.as_deref())? {
        let (outcome, csv) = simulate(&ctx, scene, &settings, cfg.seed, exec, &cfg.output_dir)?;
        print_report(&outcome.report);
        let c = &outcome.calibration;
        println!(
            "  PLS calibration: {:.4e} W, accuracy {:.4} after {} iterations (ceiling {:.4})",
            c.power, c.accuracy, c.iterations, c.ceiling
        );
        print_times(&scene.label, &outcome.times);
        write_timing(cfg.output_dir.join(format!("{}-benchmark.timing.csv", scene.label)), &outcome.times)?;
        println!("  wrote {}", csv.display());
    }
    Ok(())
}

fn cmd_sweep(cfg: &ExperimentConfig, args: &RunArgs, exec: Execution) -> Result<()> {
    let ctx = cfg.load_pipeline().context("loading model and poison cache")?;
    let n = args.trials.unwrap_or(cfg.trials.sweep());
    for scene in scenes(cfg, args.scene.as_deref())? {
        let (report, times, csv) = sweep(&ctx, scene, &cfg.alpha_grid, n, cfg.seed, exec, &cfg.output_dir)?;
        print_report(&report);
        print_times(&scene.label, &times);
        write_timing(cfg.output_dir.join(format!("{}-sweep.timing.csv", scene.label)), &times)?;
        println!("  wrote {}", csv.display());
    }
    Ok(())
}

fn cmd_calibrate(cfg: &ExperimentConfig, args: &RunArgs, target: Option<f64>, exec: Execution) -> Result<()> {
    let ctx = cfg.load_pipeline().context("loading model and poison cache")?;
    let n = args.trials.unwrap_or(cfg.trials.calibration);
    for scene in scenes(cfg, args.scene.as_deref())? {
        let target = match target {
            Some(t) => t,
            None => {
                let venena = Scheme::venena(cfg.benchmark.alpha)?;
                run_monte_carlo(&ctx, scene, &venena, n, cfg.seed, exec)?.bob.accuracy
            }
        };
        let c = calibrate_pls_baseline(&ctx, scene, target, n, cfg.seed, exec)?;
        println!(
            "{}: target {target:.4} -> {:.4e} W ({:+.2} dB vs total), accuracy {:.4}, {} iterations, ceiling {:.4}",
            scene.label,
            c.power,
            10.0 * (c.power / scene.total_power).log10(),
            c.accuracy,
            c.iterations,
            c.ceiling
        );
    }
    Ok(())
}

fn cmd_report(reports: &[PathBuf], csv_dir: Option<&Path>) -> Result<()> {
    if reports.is_empty() {
        println!("coding rate of the default image format: {:.6e} bit/bit", default_coding_rate());
        return Ok(());
    }
    for path in reports {
        let report = ExperimentReport::load_json(path).with_context(|| format!("reading {}", path.display()))?;
        print_report(&report);
        if let Some(dir) = csv_dir {
            std::fs::create_dir_all(dir)?;
            let Some(stem) = path.file_stem() else {
                bail!("report path {} has no file name", path.display());
            };
            let (csv, plot) = export_report(&report, dir.join(stem).with_extension("csv"))?;
            println!("  wrote {} and {}", csv.display(), plot.display());
        }
    }
    Ok(())
}
