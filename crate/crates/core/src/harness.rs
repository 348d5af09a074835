//! Experiment orchestration: scene presets, Monte-Carlo runs, mixing-ratio
//! sweeps, baseline power calibration, metrics and CSV export.

use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::actors::{alice_transmit, run_trial_timed, Pipeline, Scheme, SchemeKind, StageTimes, TrialRecord, TrialSeed};
use crate::classifier::{Model, TrainConfig};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::phy::{db_to_linear, ChannelSpec, Fading, LinkBudget};
use crate::poisoner::{PoisonCache, PoisonConfig};
use crate::seed::{self, stream};
use crate::semantics::{
    generate_synthetic_dataset, load_cifar10, ImageDatabase, MappingTable, Message, CHANNELS, IMAGE_SIDE, NUM_CLASSES,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub label: String,
    /// Watts.
    pub total_power: f64,
    pub bob_mean_gain_db: f64,
    pub eve_mean_gain_db: f64,
    /// Hz.
    pub bandwidth: f64,
    pub noise_psd_dbw_per_hz: f64,
    /// bit/s.
    pub bit_rate: f64,
    #[serde(default)]
    pub fading: Fading,
}

impl SceneConfig {
    /// Scenes 1–3: 100 mW / −95 dB, 200 mW / −95 dB, 100 mW / −90 dB for
    /// Eve, with Bob at −85 dB, 1 MHz, 1 Mbit/s and −174 dBW/Hz throughout.
    pub fn preset(n: u8) -> Result<Self> {
        let (total_power, eve_mean_gain_db) = match n {
            1 => (0.1, -95.0),
            2 => (0.2, -95.0),
            3 => (0.1, -90.0),
            _ => return Err(Error::InvalidConfig(format!("no scene preset {n}"))),
        };
        Ok(SceneConfig {
            label: format!("scene-{n}"),
            total_power,
            bob_mean_gain_db: -85.0,
            eve_mean_gain_db,
            bandwidth: 1e6,
            noise_psd_dbw_per_hz: -174.0,
            bit_rate: 1e6,
            fading: Fading::RayleighBlock,
        })
    }

    pub fn presets() -> Vec<SceneConfig> {
        (1..=3).map(|n| SceneConfig::preset(n).expect("preset exists")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.label.is_empty() || self.label.contains([',', '"', '\n', '\r']) {
            return Err(Error::InvalidConfig(format!("scene label {:?} is not CSV-safe", self.label)));
        }
        self.budget(1.0, self.total_power).map(|_| ())
    }

    /// W/Hz.
    pub fn noise_psd(&self) -> f64 {
        db_to_linear(self.noise_psd_dbw_per_hz)
    }

    pub fn budget(&self, alpha: f64, total_power: f64) -> Result<LinkBudget> {
        LinkBudget::new(total_power, alpha, self.bandwidth, self.noise_psd(), self.bit_rate)
    }

    pub fn bob_channel(&self) -> ChannelSpec {
        ChannelSpec {
            mean_gain_db: self.bob_mean_gain_db,
            fading: self.fading,
        }
    }

    pub fn eve_channel(&self) -> ChannelSpec {
        ChannelSpec {
            mean_gain_db: self.eve_mean_gain_db,
            fading: self.fading,
        }
    }

    /// Master seed of every trial in this scene. Schemes and mixing ratios
    /// deliberately share it.
    pub fn master_seed(&self, seed: u64) -> u64 {
        seed::derive(seed, &[seed::label(&self.label)])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Party {
    Bob,
    EveFull,
    EvePartial,
}

impl Party {
    pub const ALL: [Party; 3] = [Party::Bob, Party::EveFull, Party::EvePartial];

    fn perceived(self, r: &TrialRecord) -> Message {
        match self {
            Party::Bob => r.perceived_bob,
            Party::EveFull => r.perceived_eve_full,
            Party::EvePartial => r.perceived_eve_partial,
        }
    }
}

/// 95% normal-approximation half-width of a binomial proportion.
pub fn binomial_halfwidth(p: f64, n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    1.96 * (p * (1.0 - p) / n as f64).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PartyMetrics {
    pub n_trials: usize,
    /// Trials where the party perceived the true message.
    pub correct: usize,
    /// Trials where it perceived the falsified message.
    pub deceived: usize,
    pub failed: usize,
    pub accuracy: f64,
    pub deception_rate: f64,
    pub failure_rate: f64,
    pub ci_halfwidth: f64,
}

impl PartyMetrics {
    pub fn from_counts(correct: usize, deceived: usize, failed: usize) -> Self {
        let n = correct + deceived + failed;
        let frac = |k: usize| if n == 0 { 0.0 } else { k as f64 / n as f64 };
        let accuracy = frac(correct);
        PartyMetrics {
            n_trials: n,
            correct,
            deceived,
            failed,
            accuracy,
            deception_rate: frac(deceived),
            failure_rate: frac(failed),
            ci_halfwidth: binomial_halfwidth(accuracy, n),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub bob: PartyMetrics,
    pub eve_full: PartyMetrics,
    pub eve_partial: PartyMetrics,
}

impl Metrics {
    pub fn from_records(records: &[TrialRecord]) -> Self {
        let party = |p: Party| {
            let (mut c, mut d, mut f) = (0, 0, 0);
            for r in records {
                let seen = p.perceived(r);
                if seen == r.true_message {
                    c += 1;
                } else if Some(seen) == r.falsified_message {
                    d += 1;
                } else {
                    f += 1;
                }
            }
            PartyMetrics::from_counts(c, d, f)
        };
        Metrics {
            bob: party(Party::Bob),
            eve_full: party(Party::EveFull),
            eve_partial: party(Party::EvePartial),
        }
    }

    pub fn party(&self, p: Party) -> &PartyMetrics {
        match p {
            Party::Bob => &self.bob,
            Party::EveFull => &self.eve_full,
            Party::EvePartial => &self.eve_partial,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MonteCarloOutcome {
    pub metrics: Metrics,
    pub records: Vec<TrialRecord>,
    pub times: StageTimes,
}

/// Trials `0..n` under `master`; per-trial seeds make the outcome independent
/// of the worker count.
pub fn run_trials(
    ctx: &Pipeline,
    scene: &SceneConfig,
    scheme: &Scheme,
    n_trials: usize,
    master: u64,
    exec: Execution,
) -> Result<MonteCarloOutcome> {
    if n_trials == 0 {
        return Err(Error::InvalidConfig("n_trials must be at least 1".into()));
    }
    scheme.budget(scene)?;
    let results = exec.map_range(n_trials, |t| {
        run_trial_timed(None, scheme, scene, ctx, TrialSeed {
            master,
            trial: t as u64,
        })
    });
    let mut records = Vec::with_capacity(n_trials);
    let mut times = StageTimes::default();
    for r in results {
        let (rec, t) = r?;
        records.push(rec);
        times += t;
    }
    Ok(MonteCarloOutcome {
        metrics: Metrics::from_records(&records),
        records,
        times,
    })
}

pub fn run_monte_carlo(
    ctx: &Pipeline,
    scene: &SceneConfig,
    scheme: &Scheme,
    n_trials: usize,
    seed: u64,
    exec: Execution,
) -> Result<Metrics> {
    run_trials(ctx, scene, scheme, n_trials, scene.master_seed(seed), exec).map(|o| o.metrics)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportPoint {
    pub scheme: Scheme,
    /// Effective total power in watts.
    pub total_power: f64,
    pub metrics: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub scene: SceneConfig,
    pub seed: u64,
    pub config_hash: String,
    pub coding_rate: f64,
    pub points: Vec<ReportPoint>,
}

impl ExperimentReport {
    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn alphas(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.scheme.alpha).collect()
    }

    pub fn series(&self, party: Party, f: impl Fn(&PartyMetrics) -> f64) -> Vec<f64> {
        self.points.iter().map(|p| f(p.metrics.party(party))).collect()
    }
}

/// Short SHA-256 digest of the JSON form of `value`.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_vec(value).expect("serializable config");
    hex::encode(&Sha256::digest(&json)[..8])
}

/// `log2(n_tags)` bits per image of `height·width·channels·bits` raw bits.
pub fn coding_rate(height: usize, width: usize, channels: usize, bits_per_channel: usize, n_tags: usize) -> f64 {
    (n_tags as f64).log2() / (height * width * channels * bits_per_channel) as f64
}

pub fn default_coding_rate() -> f64 {
    coding_rate(IMAGE_SIDE, IMAGE_SIDE, CHANNELS, 8, NUM_CLASSES)
}

/// 0.50, 0.55, …, 0.95.
pub fn default_alpha_grid() -> Vec<f64> {
    (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

/// VENENA at every α of `grid` (sorted ascending), common trials per point.
pub fn sweep_alpha(
    ctx: &Pipeline,
    scene: &SceneConfig,
    grid: &[f64],
    n_trials_per_point: usize,
    seed: u64,
    exec: Execution,
) -> Result<(ExperimentReport, StageTimes)> {
    let mut grid = grid.to_vec();
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    let master = scene.master_seed(seed);
    let mut points = Vec::with_capacity(grid.len());
    let mut times = StageTimes::default();
    for &alpha in &grid {
        let scheme = Scheme::venena(alpha)?;
        let out = run_trials(ctx, scene, &scheme, n_trials_per_point, master, exec)?;
        times += out.times;
        points.push(ReportPoint {
            scheme,
            total_power: scene.total_power,
            metrics: out.metrics,
        });
    }
    let hash = config_hash(&(scene, &grid, n_trials_per_point, seed, "sweep"));
    Ok((
        ExperimentReport {
            scene: scene.clone(),
            seed,
            config_hash: hash,
            coding_rate: default_coding_rate(),
            points,
        },
        times,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub power: f64,
    pub accuracy: f64,
    pub iterations: usize,
    /// Share of the calibration batch the classifier gets right on clean images.
    pub ceiling: f64,
}

/// Share of NVE trials under `master` whose clean image classifies to the
/// true message: the accuracy any transmit power can at most reach.
pub fn clean_ceiling(ctx: &Pipeline, scene: &SceneConfig, n_trials: usize, master: u64, exec: Execution) -> Result<f64> {
    let scheme = Scheme::nve_full_power();
    let hits = exec.map_range(n_trials, |t| -> Result<bool> {
        let ts = |purpose| seed::rng(master, &[purpose, t as u64]);
        let m = Message::random(&mut ts(stream::MESSAGE));
        let tx = alice_transmit(m, &scheme, scene, ctx, &mut ts(stream::IMAGE))?;
        Ok(ctx.table.tag_to_message(ctx.model.classify(&tx.original)) == m)
    });
    let mut n = 0;
    for h in hits {
        n += usize::from(h?);
    }
    Ok(n as f64 / n_trials.max(1) as f64)
}

/// Log-domain bisection on the NVE transmit power until Bob's accuracy on a
/// calibration batch is within one point of `target_accuracy`.
pub fn calibrate_pls_baseline(
    ctx: &Pipeline,
    scene: &SceneConfig,
    target_accuracy: f64,
    n_trials: usize,
    seed: u64,
    exec: Execution,
) -> Result<Calibration> {
    const TOLERANCE: f64 = 0.01;
    const MAX_ITER: usize = 20;
    if !(target_accuracy > 0.0 && target_accuracy < 1.0) {
        return Err(Error::InvalidConfig(format!("target accuracy {target_accuracy} outside (0, 1)")));
    }
    let master = seed::derive(scene.master_seed(seed), &[stream::CALIBRATION]);
    let ceiling = clean_ceiling(ctx, scene, n_trials, master, exec)?;
    if target_accuracy > ceiling {
        return Err(Error::Unreachable {
            target: target_accuracy,
            ceiling,
        });
    }
    let accuracy_at = |power: f64| -> Result<f64> {
        let scheme = Scheme::nve_pls_baseline(power)?;
        Ok(run_trials(ctx, scene, &scheme, n_trials, master, exec)?.metrics.bob.accuracy)
    };

    let (mut lo, mut hi) = (scene.total_power.log10() - 4.0, scene.total_power.log10() + 4.0);
    let top = accuracy_at(10f64.powf(hi))?;
    if top < target_accuracy - TOLERANCE {
        return Err(Error::Unreachable {
            target: target_accuracy,
            ceiling: top,
        });
    }
    let mut best = Calibration {
        power: 10f64.powf(hi),
        accuracy: top,
        iterations: 0,
        ceiling,
    };
    for it in 1..=MAX_ITER {
        let mid = 0.5 * (lo + hi);
        let power = 10f64.powf(mid);
        let acc = accuracy_at(power)?;
        if (acc - target_accuracy).abs() < (best.accuracy - target_accuracy).abs() {
            best = Calibration {
                power,
                accuracy: acc,
                iterations: it,
                ceiling,
            };
        }
        if (acc - target_accuracy).abs() <= TOLERANCE {
            return Ok(Calibration { iterations: it, ..best });
        }
        if acc < target_accuracy {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(Calibration {
        iterations: MAX_ITER,
        ..best
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkSettings {
    pub alpha: f64,
    /// NVE fixed-power level as a share of the scene's total power.
    pub fixed_power_fraction: f64,
    pub n_trials: usize,
    pub calibration_trials: usize,
}

impl Default for BenchmarkSettings {
    fn default() -> Self {
        BenchmarkSettings {
            alpha: 0.75,
            fixed_power_fraction: 0.75,
            n_trials: 1000,
            calibration_trials: 1000,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BenchmarkOutcome {
    /// Points in [`SchemeKind::ALL`] order.
    pub report: ExperimentReport,
    pub calibration: Calibration,
    pub times: StageTimes,
}

/// All four schemes on one scene. The PLS baseline is calibrated to the
/// VENENA Bob accuracy first; every scheme then runs on the same trial seeds.
pub fn run_benchmark(
    ctx: &Pipeline,
    scene: &SceneConfig,
    settings: &BenchmarkSettings,
    seed: u64,
    exec: Execution,
) -> Result<BenchmarkOutcome> {
    let master = scene.master_seed(seed);
    let mut times = StageTimes::default();
    let mut points = Vec::with_capacity(4);
    let mut measure = |scheme: Scheme, points: &mut Vec<ReportPoint>| -> Result<Metrics> {
        let out = run_trials(ctx, scene, &scheme, settings.n_trials, master, exec)?;
        times += out.times;
        points.push(ReportPoint {
            scheme,
            total_power: scheme.power_override.unwrap_or(scene.total_power),
            metrics: out.metrics,
        });
        Ok(out.metrics)
    };
    let venena = measure(Scheme::venena(settings.alpha)?, &mut points)?;
    measure(Scheme::nve_full_power(), &mut points)?;
    measure(
        Scheme::nve_fixed_power(settings.fixed_power_fraction * scene.total_power)?,
        &mut points,
    )?;
    let calibration = calibrate_pls_baseline(ctx, scene, venena.bob.accuracy, settings.calibration_trials, seed, exec)?;
    measure(Scheme::nve_pls_baseline(calibration.power)?, &mut points)?;
    let hash = config_hash(&(scene, settings, seed, "benchmark"));
    Ok(BenchmarkOutcome {
        report: ExperimentReport {
            scene: scene.clone(),
            seed,
            config_hash: hash,
            coding_rate: default_coding_rate(),
            points,
        },
        calibration,
        times,
    })
}

/// The `simulate` command: benchmark one scene and write its CSV, plot data
/// and JSON report under `out_dir` as `<scene>-benchmark.*`.
pub fn simulate(
    ctx: &Pipeline,
    scene: &SceneConfig,
    settings: &BenchmarkSettings,
    seed: u64,
    exec: Execution,
    out_dir: impl AsRef<Path>,
) -> Result<(BenchmarkOutcome, PathBuf)> {
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let outcome = run_benchmark(ctx, scene, settings, seed, exec)?;
    let csv_path = out_dir.join(format!("{}-benchmark.csv", scene.label));
    export_report(&outcome.report, &csv_path)?;
    outcome
        .report
        .save_json(out_dir.join(format!("{}-benchmark.json", scene.label)))?;
    Ok((outcome, csv_path))
}

/// The `sweep` command for one scene: `<scene>-sweep.*` under `out_dir`.
pub fn sweep(
    ctx: &Pipeline,
    scene: &SceneConfig,
    grid: &[f64],
    n_trials_per_point: usize,
    seed: u64,
    exec: Execution,
    out_dir: impl AsRef<Path>,
) -> Result<(ExperimentReport, StageTimes, PathBuf)> {
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let (report, times) = sweep_alpha(ctx, scene, grid, n_trials_per_point, seed, exec)?;
    let csv_path = out_dir.join(format!("{}-sweep.csv", scene.label));
    export_report(&report, &csv_path)?;
    report.save_json(out_dir.join(format!("{}-sweep.json", scene.label)))?;
    Ok((report, times, csv_path))
}

/// One row of the report CSV, one per (point, party).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvRow {
    pub scene: String,
    pub scheme: SchemeKind,
    pub alpha: f64,
    pub total_power_w: f64,
    pub party: Party,
    pub n_trials: usize,
    pub correct: usize,
    pub deceived: usize,
    pub failed: usize,
    pub accuracy: f64,
    pub deception_rate: f64,
    pub failure_rate: f64,
    pub ci_halfwidth: f64,
    pub seed: u64,
    pub config_hash: String,
}

/// One row of the plot-data CSV, one per point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotRow {
    pub scheme: SchemeKind,
    pub alpha: f64,
    pub bob_accuracy: f64,
    pub eve_full_accuracy: f64,
    pub eve_partial_accuracy: f64,
    pub bob_deception: f64,
    pub eve_full_deception: f64,
    pub eve_partial_deception: f64,
}

pub fn report_rows(report: &ExperimentReport) -> Vec<CsvRow> {
    let mut rows = Vec::with_capacity(report.points.len() * 3);
    for p in &report.points {
        for party in Party::ALL {
            let m = p.metrics.party(party);
            rows.push(CsvRow {
                scene: report.scene.label.clone(),
                scheme: p.scheme.kind,
                alpha: p.scheme.alpha,
                total_power_w: p.total_power,
                party,
                n_trials: m.n_trials,
                correct: m.correct,
                deceived: m.deceived,
                failed: m.failed,
                accuracy: m.accuracy,
                deception_rate: m.deception_rate,
                failure_rate: m.failure_rate,
                ci_halfwidth: m.ci_halfwidth,
                seed: report.seed,
                config_hash: report.config_hash.clone(),
            });
        }
    }
    rows
}

pub fn plot_rows(report: &ExperimentReport) -> Vec<PlotRow> {
    report
        .points
        .iter()
        .map(|p| PlotRow {
            scheme: p.scheme.kind,
            alpha: p.scheme.alpha,
            bob_accuracy: p.metrics.bob.accuracy,
            eve_full_accuracy: p.metrics.eve_full.accuracy,
            eve_partial_accuracy: p.metrics.eve_partial.accuracy,
            bob_deception: p.metrics.bob.deception_rate,
            eve_full_deception: p.metrics.eve_full.deception_rate,
            eve_partial_deception: p.metrics.eve_partial.deception_rate,
        })
        .collect()
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_report_csv(path: impl AsRef<Path>) -> Result<Vec<CsvRow>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Writes `path` (metrics CSV) and `<stem>.plot.csv` next to it. Returns
/// both paths.
pub fn export_report(report: &ExperimentReport, path: impl AsRef<Path>) -> Result<(PathBuf, PathBuf)> {
    let path = path.as_ref();
    let plot = path.with_extension("plot.csv");
    write_csv(path, &report_rows(report))?;
    write_csv(&plot, &plot_rows(report))?;
    Ok((path.to_path_buf(), plot))
}

/// Spearman rank correlation with a two-sided p-value from the t
/// approximation. Ties get average ranks.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<(f64, f64)> {
    if x.len() != y.len() {
        return Err(Error::LengthMismatch {
            expected: x.len(),
            actual: y.len(),
        });
    }
    let n = x.len();
    if n < 3 {
        return Err(Error::InvalidConfig("spearman needs at least 3 points".into()));
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let mean = (n as f64 + 1.0) / 2.0;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mean) * (b - mean);
        sxx += (a - mean) * (a - mean);
        syy += (b - mean) * (b - mean);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok((0.0, 1.0));
    }
    let rho = sxy / (sxx * syy).sqrt();
    if rho.abs() >= 1.0 {
        return Ok((rho.signum(), 0.0));
    }
    let df = (n - 2) as f64;
    let t = rho * (df / (1.0 - rho * rho)).sqrt();
    let dist = StudentsT::new(0.0, 1.0, df).expect("df > 0");
    Ok((rho, 2.0 * (1.0 - dist.cdf(t.abs()))))
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DatasetConfig {
    Synthetic { n_per_class: usize, seed: u64 },
    Cifar10 { path: PathBuf },
}

impl DatasetConfig {
    pub fn load(&self) -> Result<ImageDatabase> {
        match self {
            DatasetConfig::Synthetic { n_per_class, seed } => generate_synthetic_dataset(*n_per_class, *seed),
            DatasetConfig::Cifar10 { path } => load_cifar10(path),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrialCounts {
    pub benchmark: usize,
    pub sweep: usize,
    pub calibration: usize,
    /// Use 10 000 benchmark and 1 000 sweep trials instead.
    #[serde(default)]
    pub full_scale: bool,
}

impl TrialCounts {
    pub fn benchmark(&self) -> usize {
        if self.full_scale {
            10_000
        } else {
            self.benchmark
        }
    }

    pub fn sweep(&self) -> usize {
        if self.full_scale {
            1_000
        } else {
            self.sweep
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoisonSettings {
    /// Originals poisoned per ordered (source, target) tag pair.
    pub per_pair: usize,
    pub cache_path: PathBuf,
    #[serde(flatten)]
    pub config: PoisonConfig,
}

/// Everything the command-line tool reads from its TOML file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub model_path: PathBuf,
    pub output_dir: PathBuf,
    pub dataset: DatasetConfig,
    pub train: TrainConfig,
    pub poison: PoisonSettings,
    pub trials: TrialCounts,
    pub benchmark: BenchmarkSettings,
    pub alpha_grid: Vec<f64>,
    pub scenes: Vec<SceneConfig>,
}

pub const DEFAULT_CONFIG: &str = include_str!("../presets/default.toml");

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        // Relative paths in the file are relative to the file itself.
        if let Some(dir) = path.parent() {
            cfg.rebase(dir);
        }
        Ok(cfg)
    }

    fn rebase(&mut self, dir: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        };
        fix(&mut self.model_path);
        fix(&mut self.output_dir);
        fix(&mut self.poison.cache_path);
        if let DatasetConfig::Cifar10 { path } = &mut self.dataset {
            fix(path);
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.poison.config.validate()?;
        if self.scenes.is_empty() {
            return Err(Error::InvalidConfig("at least one scene is required".into()));
        }
        for s in &self.scenes {
            s.validate()?;
        }
        if self.alpha_grid.iter().any(|&a| !(a > 0.0 && a < 1.0)) {
            return Err(Error::InvalidConfig("alpha grid values must lie in (0, 1)".into()));
        }
        Scheme::venena(self.benchmark.alpha)?;
        if self.trials.benchmark == 0 || self.trials.sweep == 0 || self.trials.calibration == 0 {
            return Err(Error::InvalidConfig("trial counts must be positive".into()));
        }
        Ok(())
    }

    /// Dataset, trained model and poison cache named by this configuration.
    pub fn load_pipeline(&self) -> Result<Pipeline> {
        let db = self.dataset.load()?;
        let model = Model::load(&self.model_path)?;
        let cache = PoisonCache::load(&self.poison.cache_path)?;
        Pipeline::with_cache(db, MappingTable::standard(), model, cache)
    }

    /// Scene by label (`scene-2`) or by 1-based position (`2`).
    pub fn scene(&self, key: &str) -> Result<&SceneConfig> {
        if let Some(s) = self.scenes.iter().find(|s| s.label == key) {
            return Ok(s);
        }
        key.parse::<usize>()
            .ok()
            .and_then(|i| i.checked_sub(1))
            .and_then(|i| self.scenes.get(i))
            .ok_or_else(|| Error::InvalidConfig(format!("unknown scene {key:?}")))
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::from_toml(DEFAULT_CONFIG).expect("bundled config is valid")
    }
}

/// Writes `rows` of timing information as `stage,seconds` lines.
pub fn write_timing(path: impl AsRef<Path>, times: &StageTimes) -> Result<()> {
    let path = path.as_ref();
    let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
    let body = format!(
        "stage,seconds\npoisoning,{}\nphy,{}\nclassification,{}\n",
        times.poisoning.as_secs_f64(),
        times.phy.as_secs_f64(),
        times.classification.as_secs_f64()
    );
    f.write_all(body.as_bytes()).map_err(|e| Error::io(path, e))
}
