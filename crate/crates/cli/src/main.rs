//! `reuseplan` command-line driver.

mod config;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use reuseplan::backbone::{build_backbone, Backbone, FamilyId};
use reuseplan::bench::{bundle_grid, sweep, Bench};
use reuseplan::plan_io::{load_plan, plan_to_json, write_stats, StatsRow};
use reuseplan::planner::{calibrate, calibrate_initial, CachePlan, PlanPhase};
use reuseplan::rates::{collect_rates, export_heatmap, load_rate_csv, save_rate_csv, HeatmapMode};
use reuseplan::sampler::{run_full, SampleInput, SampleSchedule};
use reuseplan::scheduler::{compare_runs, default_peak, execute_plan, ExecuteOptions};

use config::{ConfigFile, Overrides, Settings};

#[derive(Parser)]
#[command(name = "reuseplan", version, about = "Calibrate, inspect and execute activation-reuse plans")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// JSON config file (backbone, steps, thresholds, ...).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Threshold preset: dit-fast, dit-slow, flux-fast, flux-slow.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    /// Base seed of the sample inputs.
    #[arg(long)]
    seed: Option<u64>,
    /// Number of calibration inputs.
    #[arg(long = "inputs")]
    inputs: Option<usize>,
    /// Worker threads for calibration fan-out.
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long)]
    repeats: Option<usize>,
}

impl Common {
    fn settings(&self) -> Result<Settings> {
        let file = match &self.config {
            Some(p) => ConfigFile::load(p)?,
            None => ConfigFile::default(),
        };
        let flags = Overrides {
            preset: self.preset.clone(),
            steps: self.steps,
            layers: self.layers,
            seed: self.seed,
            inputs: self.inputs,
            repeats: self.repeats,
            jobs: self.jobs,
        };
        Settings::resolve(file, &flags)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Calibrate a plan and write it as a plan file.
    Calibrate {
        #[command(flatten)]
        common: Common,
        /// Output path; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Stop after the first phase and emit the uncorrected plan.
        #[arg(long)]
        phase1_only: bool,
    },
    /// Print a summary of a plan file.
    PlanInspect {
        plan: PathBuf,
    },
    /// Execute one trajectory and print its output checksum.
    Run {
        #[command(flatten)]
        common: Common,
        /// Plan file to follow.
        #[arg(long, required_unless_present = "baseline")]
        plan: Option<PathBuf>,
        /// Compute everything instead of following a plan.
        #[arg(long, conflicts_with = "plan")]
        baseline: bool,
        /// Accept plans that were never corrected.
        #[arg(long)]
        accept_initial: bool,
        /// Write the run report (JSON) here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Calibrate one operating point and compare it with the baseline.
    Bench {
        #[command(flatten)]
        common: Common,
        /// Stats CSV path; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Measure the bundle x tau_step grid.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Stats CSV path; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render one family's rate matrix as CSV + PGM.
    Heatmap {
        #[command(flatten)]
        common: Common,
        /// Family to render; the first family when omitted.
        #[arg(long)]
        family: Option<String>,
        /// rho (log2), mse or cos.
        #[arg(long, default_value = "rho")]
        mode: String,
        /// Read the matrix from this rate CSV instead of calibrating.
        #[arg(long)]
        from: Option<PathBuf>,
        /// Output stem; `.csv` and `.pgm` are appended.
        #[arg(long)]
        out: PathBuf,
    },
    /// Measure rate matrices and write one CSV per family.
    Rates {
        #[command(flatten)]
        common: Common,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Calibrate {
            common,
            out,
            phase1_only,
        } => cmd_calibrate(&common.settings()?, out.as_deref(), phase1_only),
        Command::PlanInspect { plan } => {
            let plan = load_plan(&plan)?;
            print!("{}", describe_plan(&plan));
            Ok(())
        }
        Command::Run {
            common,
            plan,
            baseline,
            accept_initial,
            out,
        } => cmd_run(&common.settings()?, plan.as_deref(), baseline, accept_initial, out.as_deref()),
        Command::Bench { common, out } => cmd_bench(&common.settings()?, out.as_deref()),
        Command::Sweep { common, out } => cmd_sweep(&common.settings()?, out.as_deref()),
        Command::Heatmap {
            common,
            family,
            mode,
            from,
            out,
        } => cmd_heatmap(&common, family, &mode, from.as_deref(), &out),
        Command::Rates { common, out } => cmd_rates(&common.settings()?, &out),
    }
}

fn setup(s: &Settings) -> Result<(Box<dyn Backbone>, SampleSchedule)> {
    let backbone = build_backbone(&s.backbone)?;
    let schedule = SampleSchedule::linear(s.steps, 1.0, 0.0)?;
    Ok((backbone, schedule))
}

fn write_output(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            std::io::stdout().write_all(text.as_bytes())?;
            Ok(())
        }
    }
}

fn cmd_calibrate(s: &Settings, out: Option<&Path>, phase1_only: bool) -> Result<()> {
    let (backbone, schedule) = setup(s)?;
    let thresholds = s.thresholds()?;
    let inputs = SampleInput::batch(backbone.as_ref(), s.seed, s.inputs);
    let plan = if phase1_only {
        calibrate_initial(backbone.as_ref(), &schedule, &inputs, thresholds, &s.planner)?.0
    } else {
        calibrate(backbone.as_ref(), &schedule, &inputs, thresholds, &s.planner)?.corrected
    };
    write_output(out, &(plan_to_json(&plan)? + "\n"))?;
    eprint!("{}", describe_plan(&plan));
    Ok(())
}

fn phase_name(p: PlanPhase) -> &'static str {
    match p {
        PlanPhase::Initial => "initial",
        PlanPhase::Corrected => "corrected",
    }
}

fn fmt_cut(v: f64) -> String {
    if v == f64::NEG_INFINITY {
        "-inf".into()
    } else {
        format!("{v:.6}")
    }
}

fn describe_plan(plan: &CachePlan) -> String {
    let mut s = String::new();
    let p = &plan.provenance;
    s += &format!("steps: {}  layers: {}  phase: {}\n", plan.steps(), plan.layers(), phase_name(p.phase));
    s += &format!("backbone: {}\n", p.backbone);
    s += &format!("schedule: {}\n", p.schedule_hash);
    s += &format!("calibration inputs ({}): {}\n", p.calibration_inputs.len(), p.calibration_inputs.join(" "));
    let th = &plan.thresholds;
    s += &format!("tau_step: {}  tau_warmup: {}", th.tau_step, th.tau_warmup);
    for (fam, tau) in &th.families {
        s += &format!("  tau_{}: {tau}", fam.as_str());
    }
    s += "\n";
    s += &format!("cut step: {}", fmt_cut(plan.cuts.step));
    for (fam, cut) in &plan.cuts.families {
        s += &format!("  {}: {}", fam.as_str(), fmt_cut(*cut));
    }
    s += "\n";
    s += &format!("warm-up steps: {}\n", plan.warmup_steps());
    let skips = plan.step_skips();
    s += &format!(
        "step skips: {} ({:.1}%) {:?}\n",
        skips.len(),
        100.0 * skips.len() as f64 / plan.steps() as f64,
        skips
    );
    for (f, fam) in plan.families().iter().enumerate() {
        s += &format!(
            "reuse {}: {}/{} sites ({:.1}%)\n",
            fam.as_str(),
            plan.cached_sites(f),
            plan.steps() * plan.layers(),
            100.0 * plan.family_fraction(f)
        );
    }
    s
}

fn cmd_run(s: &Settings, plan: Option<&Path>, baseline: bool, accept_initial: bool, out: Option<&Path>) -> Result<()> {
    let (backbone, schedule) = setup(s)?;
    let input = SampleInput::batch(backbone.as_ref(), s.seed, 1).remove(0);
    let full = run_full(backbone.as_ref(), &schedule, &input)?;
    let (traj, fidelity) = if baseline {
        (full, None)
    } else {
        let path = plan.context("--plan or --baseline is required")?;
        let plan = load_plan(path)?;
        let opts = ExecuteOptions {
            accept_initial,
            ..Default::default()
        };
        let run = execute_plan(backbone.as_ref(), &schedule, &plan, &input, opts)?;
        let report = compare_runs(&full, &run.trajectory, default_peak(&full))?;
        (run.trajectory, Some(report))
    };
    let checksum = format!("{:016x}", traj.x_final.checksum());
    let st = &traj.stats;
    println!("checksum: {checksum}");
    println!(
        "input: {}  flops: {}  step skips: {}  computed: {}  reused: {}",
        input.describe(),
        st.flops,
        st.step_skips,
        st.computed_total(),
        st.reused_total()
    );
    if let Some(r) = &fidelity {
        println!("final psnr: {:.3} dB  final mse: {:.6e}", r.final_psnr, r.final_mse);
    }
    if let Some(path) = out {
        let report = serde_json::json!({
            "checksum": checksum,
            "input": input.describe(),
            "stats": st,
            "final_psnr": fidelity.as_ref().map(|r| r.final_psnr),
            "final_mse": fidelity.as_ref().map(|r| r.final_mse),
        });
        fs::write(path, serde_json::to_string_pretty(&report)? + "\n")
            .with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn stats_text(rows: &[StatsRow]) -> Result<String> {
    let mut buf = Vec::new();
    write_stats(rows, &mut buf)?;
    Ok(String::from_utf8(buf)?)
}

fn new_bench(s: &Settings) -> Result<Bench> {
    let mut bench = Bench::new(s.bench_config())?;
    bench.set_planner_options(s.planner);
    Ok(bench)
}

fn cmd_bench(s: &Settings, out: Option<&Path>) -> Result<()> {
    let thresholds = s.thresholds()?;
    let mut bench = new_bench(s)?;
    let (_, plan) = bench.calibrate(thresholds)?;
    let row = bench.evaluate("planned", &plan)?;
    write_output(out, &stats_text(&[bench.baseline_row().clone(), row])?)
}

fn cmd_sweep(s: &Settings, out: Option<&Path>) -> Result<()> {
    let mut bench = new_bench(s)?;
    let grid = bundle_grid(s.projected_bundles());
    let res = sweep(&mut bench, &grid)?;
    let b = &res.baseline;
    eprintln!("baseline: {:.4}s per trajectory, {} FLOPs", b.latency_s, b.flops);
    write_output(out, &stats_text(&res.rows())?)
}

fn cmd_heatmap(common: &Common, family: Option<String>, mode: &str, from: Option<&Path>, out: &Path) -> Result<()> {
    let mode: HeatmapMode = mode.parse()?;
    let matrix = match from {
        Some(path) => {
            let fam = family.unwrap_or_else(|| "rates".into());
            load_rate_csv(path, FamilyId::new(fam))?
        }
        None => {
            let s = common.settings()?;
            let (backbone, schedule) = setup(&s)?;
            let inputs = SampleInput::batch(backbone.as_ref(), s.seed, s.inputs);
            let stats = collect_rates(backbone.as_ref(), &schedule, &inputs, &s.planner.calibration)?;
            let reg = backbone.registry();
            let f = match &family {
                Some(name) => reg.index_of(name).with_context(|| format!("unknown family `{name}`"))?,
                None => 0,
            };
            match mode {
                HeatmapMode::Log2Rho => stats.mean.layer[f].clone(),
                HeatmapMode::Mse => stats.mean.mse_maps[f].clone(),
                HeatmapMode::Cos => stats.mean.cos_maps[f].clone(),
            }
        }
    };
    let files = export_heatmap(&matrix, mode, out)?;
    println!("{}", files.csv.display());
    println!("{}", files.pgm.display());
    Ok(())
}

fn cmd_rates(s: &Settings, out: &Path) -> Result<()> {
    let (backbone, schedule) = setup(s)?;
    let inputs = SampleInput::batch(backbone.as_ref(), s.seed, s.inputs);
    let stats = collect_rates(backbone.as_ref(), &schedule, &inputs, &s.planner.calibration)?;
    if out.exists() && !out.is_dir() {
        bail!("{} exists and is not a directory", out.display());
    }
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    for m in &stats.mean.layer {
        let path = out.join(format!("{}.csv", m.family.as_str()));
        save_rate_csv(m, &path)?;
        println!("{}", path.display());
    }
    let path = out.join("step.csv");
    save_rate_csv(&stats.mean.step.as_matrix(), &path)?;
    println!("{}", path.display());
    Ok(())
}
