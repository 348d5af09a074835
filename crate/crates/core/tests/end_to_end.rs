//! Small end-to-end runs through the public API: config on disk, training,
//! cache, benchmark export and calibration.

use deceptive_vis::actors::{Scheme, SchemeKind};
use deceptive_vis::classifier::{desk_architecture, train};
use deceptive_vis::exec::Execution;
use deceptive_vis::harness::{
    calibrate_pls_baseline, read_report_csv, run_trials, simulate, BenchmarkSettings, DatasetConfig,
    ExperimentConfig, Party, SceneConfig,
};
use deceptive_vis::poisoner::{build_poison_cache, plan_pairs};
use deceptive_vis::seed;
use std::path::Path;
use std::sync::OnceLock;
use tempfile::TempDir;

const REPORT_HEADER: &str = "scene,scheme,alpha,total_power_w,party,n_trials,correct,deceived,failed,accuracy,\
deception_rate,failure_rate,ci_halfwidth,seed,config_hash";

/// Writes a reduced config into `dir`, trains and poisons against it.
fn small_setup(dir: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.dataset = DatasetConfig::Synthetic { n_per_class: 40, seed: 4 };
    cfg.train.total_steps = 600;
    cfg.train.warmup_steps = 30;
    cfg.poison.per_pair = 1;
    cfg.poison.config.n_iter = 40;
    cfg.poison.config.step_size = 0.03;
    let path = dir.join("experiment.toml");
    std::fs::write(&path, cfg.to_toml().unwrap()).unwrap();
    let cfg = ExperimentConfig::load(&path).unwrap();
    assert!(cfg.model_path.starts_with(dir), "relative paths resolve against the file");

    let db = cfg.dataset.load().unwrap();
    let trained = train(&desk_architecture(), &db, &cfg.train, Execution::Parallel).unwrap();
    std::fs::create_dir_all(cfg.model_path.parent().unwrap()).unwrap();
    trained.model.save(&cfg.model_path).unwrap();
    let plan = plan_pairs(&db, cfg.poison.per_pair, 0);
    let cache = build_poison_cache(&trained.model, &db, &plan, &cfg.poison.config, Execution::Parallel).unwrap();
    cache.save(&cfg.poison.cache_path).unwrap();
    cfg
}

/// Shared by every test in this file; trained once.
fn setup() -> &'static (TempDir, ExperimentConfig) {
    static SETUP: OnceLock<(TempDir, ExperimentConfig)> = OnceLock::new();
    SETUP.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_setup(dir.path());
        (dir, cfg)
    })
}

#[test]
fn simulate_writes_stable_schema() {
    let (dir, cfg) = setup();
    let ctx = cfg.load_pipeline().unwrap();
    let settings = BenchmarkSettings {
        n_trials: 60,
        calibration_trials: 60,
        ..cfg.benchmark
    };
    let scene = cfg.scene("1").unwrap();
    let (outcome, csv) = simulate(&ctx, scene, &settings, cfg.seed, Execution::Parallel, &cfg.output_dir).unwrap();

    let text = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().next().unwrap(), REPORT_HEADER);
    let rows = read_report_csv(&csv).unwrap();
    assert_eq!(rows.len(), 4 * Party::ALL.len());
    let kinds: Vec<SchemeKind> = rows.iter().step_by(3).map(|r| r.scheme).collect();
    assert_eq!(kinds, SchemeKind::ALL);
    for r in &rows {
        assert_eq!(r.n_trials, 60);
        assert_eq!(r.correct + r.deceived + r.failed, r.n_trials);
        assert_eq!(r.scene, "scene-1");
    }
    assert!(csv.with_extension("plot.csv").exists());
    assert!(cfg.output_dir.join("scene-1-benchmark.json").exists());
    assert_eq!(outcome.report.points.len(), 4);

    // Same config, same seed, other execution mode.
    let (_, again) = simulate(&ctx, scene, &settings, cfg.seed, Execution::Sequential, dir.path().join("seq")).unwrap();
    assert_eq!(std::fs::read(&csv).unwrap(), std::fs::read(again).unwrap());
}

#[test]
fn calibrated_power_remeasures_within_tolerance() {
    let (_, cfg) = setup();
    let ctx = cfg.load_pipeline().unwrap();
    let scene = SceneConfig::preset(1).unwrap();
    let n = 200;
    let full = run_trials(&ctx, &scene, &Scheme::nve_full_power(), n, scene.master_seed(cfg.seed), Execution::Parallel)
        .unwrap()
        .metrics
        .bob
        .accuracy;
    let target = 0.8 * full;
    let cal = calibrate_pls_baseline(&ctx, &scene, target, n, cfg.seed, Execution::Parallel).unwrap();
    assert!((cal.accuracy - target).abs() <= 0.02, "{cal:?} for target {target}");

    let master = seed::derive(scene.master_seed(cfg.seed), &[seed::stream::CALIBRATION]);
    let again = run_trials(&ctx, &scene, &Scheme::nve_pls_baseline(cal.power).unwrap(), n, master, Execution::Sequential)
        .unwrap()
        .metrics
        .bob
        .accuracy;
    assert_eq!(again, cal.accuracy);
    assert!(cal.power < scene.total_power);
}

#[test]
fn eve_on_bobs_channel_statistics_matches_bob() {
    let (_, cfg) = setup();
    let ctx = cfg.load_pipeline().unwrap();
    let mut scene = SceneConfig::preset(1).unwrap();
    scene.eve_mean_gain_db = scene.bob_mean_gain_db;
    let out = run_trials(&ctx, &scene, &Scheme::venena(0.75).unwrap(), 800, 99, Execution::Parallel).unwrap();
    let (bob, eve) = (out.metrics.bob, out.metrics.eve_full);
    let tol = 1.5 * (bob.ci_halfwidth + eve.ci_halfwidth);
    assert!((bob.accuracy - eve.accuracy).abs() <= tol, "bob {bob:?} eve {eve:?}");
}
