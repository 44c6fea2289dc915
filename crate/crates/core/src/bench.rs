//! End-to-end measurements: baseline vs. planned runs, threshold sweeps and
//! calibration-size studies.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::backbone::{build_backbone, Backbone, BackboneConfig};
use crate::error::{Error, Result};
use crate::plan_io::StatsRow;
use crate::planner::{
    compute_cuts, initial_plan_with_cuts, resample_correct, CachePlan, PlannerOptions, Provenance, ThresholdSet,
};
use crate::presets::{Bundle, BUNDLES, DEFAULT_SEED, TAU_STEP_SWEEP};
use crate::rates::{collect_rates, fan_out, CalibrationStats};
use crate::sampler::{run_full, RunStats, SampleInput, SampleSchedule, Trajectory};
use crate::scheduler::{compare_runs, default_peak, execute_plan, simulate_plan, ExecuteOptions};

/// Offset between calibration seeds and held-out evaluation seeds.
const HELD_OUT_OFFSET: u64 = 1_000_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub backbone: BackboneConfig,
    pub steps: usize,
    /// Number of calibration inputs.
    pub calibration_inputs: usize,
    /// Number of held-out evaluation inputs.
    pub eval_inputs: usize,
    pub seed: u64,
    /// Timed repetitions per operating point.
    pub repeats: usize,
    #[serde(default)]
    pub jobs: Option<usize>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::toy_dit(6, 64, 64, 4, DEFAULT_SEED),
            steps: 28,
            calibration_inputs: 5,
            eval_inputs: 1,
            seed: DEFAULT_SEED,
            repeats: 3,
            jobs: None,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.repeats == 0 || self.calibration_inputs == 0 || self.eval_inputs == 0 {
            return Err(Error::InvalidArgument(
                "repeats, calibration_inputs and eval_inputs must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Median and coefficient of variation of timing samples.
pub fn median_and_cv(samples: &[f64]) -> (f64, f64) {
    if samples.is_empty() {
        return (0.0, 0.0);
    }
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    let median = if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    };
    let mean = s.iter().sum::<f64>() / n as f64;
    let var = s.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
    let cv = if mean > 0.0 { var.sqrt() / mean } else { 0.0 };
    (median, cv)
}

/// Shared state of a benchmark session: the backbone, the baseline
/// trajectories of the held-out inputs and their timing.
pub struct Bench {
    cfg: BenchConfig,
    backbone: Box<dyn Backbone>,
    schedule: SampleSchedule,
    calibration: Vec<SampleInput>,
    eval: Vec<SampleInput>,
    baseline: Vec<Trajectory>,
    baseline_row: StatsRow,
    opts: PlannerOptions,
    phase1: Option<CalibrationStats>,
}

impl Bench {
    pub fn new(cfg: BenchConfig) -> Result<Self> {
        cfg.validate()?;
        let backbone = build_backbone(&cfg.backbone)?;
        let schedule = SampleSchedule::linear(cfg.steps, 1.0, 0.0)?;
        let calibration = SampleInput::batch(backbone.as_ref(), cfg.seed, cfg.calibration_inputs);
        let eval = SampleInput::batch(backbone.as_ref(), cfg.seed + HELD_OUT_OFFSET, cfg.eval_inputs);
        let baseline = eval
            .iter()
            .map(|i| run_full(backbone.as_ref(), &schedule, i))
            .collect::<Result<Vec<_>>>()?;
        let mut opts = PlannerOptions::default();
        opts.calibration.jobs = cfg.jobs;
        let mut bench = Self {
            cfg,
            backbone,
            schedule,
            calibration,
            eval,
            baseline,
            baseline_row: placeholder_row(),
            opts,
            phase1: None,
        };
        let zero = CachePlan::zeros_for(bench.backbone.as_ref(), &bench.schedule);
        let timing = bench.time_plan(&zero, false)?;
        let (lat, cv) = median_and_cv(&timing.latency);
        let stats = &timing.runs[0].stats;
        bench.baseline_row = bench.row("baseline", stats, lat, cv, lat, stats.flops, 0.0, crate::tensor::PSNR_CAP);
        Ok(bench)
    }

    pub fn backbone(&self) -> &dyn Backbone {
        self.backbone.as_ref()
    }

    pub fn schedule(&self) -> &SampleSchedule {
        &self.schedule
    }

    pub fn config(&self) -> &BenchConfig {
        &self.cfg
    }

    pub fn calibration_inputs(&self) -> &[SampleInput] {
        &self.calibration
    }

    pub fn baseline_row(&self) -> &StatsRow {
        &self.baseline_row
    }

    pub fn planner_options(&self) -> &PlannerOptions {
        &self.opts
    }

    /// Replaces the planner options; cached Phase-1 statistics are dropped.
    pub fn set_planner_options(&mut self, opts: PlannerOptions) {
        self.opts = opts;
        self.phase1 = None;
    }

    /// Phase-1 statistics on the calibration inputs, computed once.
    pub fn phase1_stats(&mut self) -> Result<&CalibrationStats> {
        if self.phase1.is_none() {
            let stats = collect_rates(self.backbone.as_ref(), &self.schedule, &self.calibration, &self.opts.calibration)?;
            self.phase1 = Some(stats);
        }
        Ok(self.phase1.as_ref().expect("just filled"))
    }

    /// Phase-1 plan for `thresholds` from the cached statistics.
    pub fn initial_plan(&mut self, thresholds: &ThresholdSet) -> Result<CachePlan> {
        let registry = self.backbone.registry().clone();
        let pooling = self.opts.pooling;
        let stats = self.phase1_stats()?;
        let cuts = compute_cuts(stats, thresholds, &registry, pooling)?;
        let mut plan = initial_plan_with_cuts(&stats.mean.layer, &stats.mean.step, thresholds, &registry, cuts)?;
        plan.provenance = Provenance::new(self.backbone.as_ref(), &self.schedule, &self.calibration);
        Ok(plan)
    }

    /// Both calibration phases for `thresholds`; returns `(initial, corrected)`.
    pub fn calibrate(&mut self, thresholds: &ThresholdSet) -> Result<(CachePlan, CachePlan)> {
        let initial = self.initial_plan(thresholds)?;
        let corrected = resample_correct(self.backbone.as_ref(), &self.schedule, &self.calibration, &initial, &self.opts)?;
        Ok((initial, corrected))
    }

    /// Runs `plan` on every held-out input once per repeat. With `paired`,
    /// baseline passes bracket every planned pass and each repeat's ratio
    /// uses the mean of its two neighbours, so drift in machine speed
    /// cancels.
    fn time_plan(&self, plan: &CachePlan, paired: bool) -> Result<Timing> {
        let zero = CachePlan::zeros_for(self.backbone.as_ref(), &self.schedule);
        let mut timing = Timing::default();
        let mut before = if paired { Some(self.timed_pass(&zero)?.0) } else { None };
        for rep in 0..self.cfg.repeats {
            let (secs, runs) = self.timed_pass(plan)?;
            timing.latency.push(secs);
            if let Some(b0) = before {
                let b1 = self.timed_pass(&zero)?.0;
                timing.ratios.push(0.5 * (b0 + b1) / secs);
                before = Some(b1);
            }
            if rep == 0 {
                timing.runs = runs;
            }
        }
        Ok(timing)
    }

    fn timed_pass(&self, plan: &CachePlan) -> Result<(f64, Vec<Trajectory>)> {
        let mut runs = Vec::with_capacity(self.eval.len());
        let start = Instant::now();
        for input in &self.eval {
            let run = execute_plan(self.backbone.as_ref(), &self.schedule, plan, input, ExecuteOptions::any_phase())?;
            runs.push(run.trajectory);
        }
        Ok((start.elapsed().as_secs_f64() / self.eval.len() as f64, runs))
    }

    #[allow(clippy::too_many_arguments)]
    fn row(
        &self,
        name: &str,
        stats: &RunStats,
        latency: f64,
        cv: f64,
        base_latency: f64,
        base_flops: u64,
        final_mse: f64,
        final_psnr: f64,
    ) -> StatsRow {
        StatsRow {
            operating_point: name.to_string(),
            flops: stats.flops,
            speedup_vs_baseline: base_latency / latency,
            latency_s: latency,
            skip_fractions: stats
                .families
                .iter()
                .enumerate()
                .map(|(f, fam)| (fam.clone(), stats.family_skip_fraction(f)))
                .collect(),
            step_skip_fraction: stats.step_skip_fraction(),
            final_psnr,
            final_mse,
            latency_cv: cv,
            flop_speedup: base_flops as f64 / stats.flops as f64,
        }
    }

    /// Times `plan` on the held-out inputs and scores it against the
    /// baseline. Speedup is the median of paired baseline/plan ratios;
    /// fidelity is averaged over inputs.
    pub fn evaluate(&self, name: &str, plan: &CachePlan) -> Result<StatsRow> {
        let timing = self.time_plan(plan, true)?;
        let stats = &timing.runs[0].stats;
        let simulated = simulate_plan(self.backbone.as_ref(), plan)?;
        if simulated.flops != stats.flops {
            return Err(Error::InvalidArgument(format!(
                "executed FLOPs {} differ from the plan's analytic count {}",
                stats.flops, simulated.flops
            )));
        }
        let (mse, psnr) = self.score(&timing.runs)?;
        let (lat, cv) = median_and_cv(&timing.latency);
        let mut row = self.row(name, stats, lat, cv, lat, self.baseline_row.flops, mse, psnr);
        row.speedup_vs_baseline = median_and_cv(&timing.ratios).0;
        Ok(row)
    }

    /// Mean final MSE and PSNR of `plan` against the baseline.
    pub fn fidelity(&self, plan: &CachePlan) -> Result<(f64, f64)> {
        let runs = self
            .eval
            .iter()
            .map(|input| {
                execute_plan(self.backbone.as_ref(), &self.schedule, plan, input, ExecuteOptions::any_phase())
                    .map(|r| r.trajectory)
            })
            .collect::<Result<Vec<_>>>()?;
        self.score(&runs)
    }

    fn score(&self, runs: &[Trajectory]) -> Result<(f64, f64)> {
        let mut mse = 0.0;
        let mut psnr = 0.0;
        for (run, base) in runs.iter().zip(&self.baseline) {
            let rep = compare_runs(base, run, default_peak(base))?;
            mse += rep.final_mse;
            psnr += rep.final_psnr;
        }
        let n = runs.len() as f64;
        Ok((mse / n, psnr / n))
    }
}

#[derive(Default)]
struct Timing {
    latency: Vec<f64>,
    ratios: Vec<f64>,
    runs: Vec<Trajectory>,
}

fn placeholder_row() -> StatsRow {
    StatsRow {
        operating_point: String::new(),
        flops: 0,
        speedup_vs_baseline: 1.0,
        latency_s: 0.0,
        skip_fractions: Vec::new(),
        step_skip_fraction: 0.0,
        final_psnr: 0.0,
        final_mse: 0.0,
        latency_cv: 0.0,
        flop_speedup: 1.0,
    }
}

/// Calibrates (both phases) and measures one operating point. Returns the
/// baseline row followed by the point's row.
pub fn run_benchmark(cfg: BenchConfig, thresholds: &ThresholdSet) -> Result<Vec<StatsRow>> {
    let mut bench = Bench::new(cfg)?;
    let (_, plan) = bench.calibrate(thresholds)?;
    let row = bench.evaluate("planned", &plan)?;
    Ok(vec![bench.baseline_row().clone(), row])
}

/// One named threshold configuration of a sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct OperatingPoint {
    pub name: String,
    pub bundle: Option<usize>,
    pub thresholds: ThresholdSet,
}

/// The bundle x `tau_step` grid, bundle-major. `project` maps the five-family
/// bundles onto the two-family backbone.
pub fn bundle_grid(project: bool) -> Vec<OperatingPoint> {
    let mut out = Vec::with_capacity(BUNDLES.len() * TAU_STEP_SWEEP.len());
    for b in BUNDLES {
        for ts in TAU_STEP_SWEEP {
            out.push(point(&b, ts, project));
        }
    }
    out
}

fn point(b: &Bundle, tau_step: f64, project: bool) -> OperatingPoint {
    OperatingPoint {
        name: format!("b{}_step{:.2}", b.index, tau_step),
        bundle: Some(b.index),
        thresholds: if project { b.projected(tau_step) } else { b.dual(tau_step) },
    }
}

#[derive(Debug, Clone)]
pub struct SweepPoint {
    pub point: OperatingPoint,
    pub plan: CachePlan,
    pub row: StatsRow,
}

#[derive(Debug, Clone)]
pub struct SweepResult {
    pub baseline: StatsRow,
    pub points: Vec<SweepPoint>,
}

impl SweepResult {
    pub fn rows(&self) -> Vec<StatsRow> {
        self.points.iter().map(|p| p.row.clone()).collect()
    }
}

/// Calibrates and measures every operating point. Phase-1 statistics are
/// shared; each point gets its own correction pass. Calibration fans out
/// over points, timing runs sequentially.
pub fn sweep(bench: &mut Bench, grid: &[OperatingPoint]) -> Result<SweepResult> {
    if grid.is_empty() {
        return Err(Error::InvalidArgument("empty sweep grid".into()));
    }
    let initial = grid
        .iter()
        .map(|p| bench.initial_plan(&p.thresholds))
        .collect::<Result<Vec<_>>>()?;
    let (backbone, schedule, inputs) = (bench.backbone.as_ref(), &bench.schedule, &bench.calibration);
    let mut opts = bench.opts;
    opts.calibration.jobs = Some(1);
    let corrected = fan_out(bench.cfg.jobs, grid.len(), |i| {
        resample_correct(backbone, schedule, inputs, &initial[i], &opts)
    })?;
    let mut points = Vec::with_capacity(grid.len());
    for (p, plan) in grid.iter().zip(corrected) {
        let row = bench.evaluate(&p.name, &plan)?;
        points.push(SweepPoint {
            point: p.clone(),
            plan,
            row,
        });
    }
    Ok(SweepResult {
        baseline: bench.baseline_row.clone(),
        points,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizeStudyRow {
    pub k: usize,
    pub cached_fraction: f64,
    pub step_skip_fraction: f64,
    pub final_psnr: f64,
    pub final_mse: f64,
}

/// For each `K`, calibrates on the first `K` inputs of the calibration pool
/// and scores the corrected plan on the held-out inputs.
pub fn calibration_size_study(cfg: BenchConfig, thresholds: &ThresholdSet, k_list: &[usize]) -> Result<Vec<SizeStudyRow>> {
    if k_list.contains(&0) {
        return Err(Error::InvalidArgument("calibration size must be at least 1".into()));
    }
    let pool = k_list.iter().copied().max().unwrap_or(1).max(cfg.calibration_inputs);
    let cfg = BenchConfig {
        calibration_inputs: pool,
        repeats: 1,
        ..cfg
    };
    let bench = Bench::new(cfg)?;
    let mut rows = Vec::with_capacity(k_list.len());
    for &k in k_list {
        let inputs = &bench.calibration[..k];
        let cal = crate::planner::calibrate(bench.backbone(), &bench.schedule, inputs, thresholds, &bench.opts)?;
        let plan = &cal.corrected;
        let (mse, psnr) = bench.fidelity(plan)?;
        let sites = (plan.steps() * plan.layers() * plan.families().len()) as f64;
        rows.push(SizeStudyRow {
            k,
            cached_fraction: plan.cached_total() as f64 / sites,
            step_skip_fraction: plan.step_skips().len() as f64 / plan.steps() as f64,
            final_psnr: psnr,
            final_mse: mse,
        });
    }
    Ok(rows)
}
