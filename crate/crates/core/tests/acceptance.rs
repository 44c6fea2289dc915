//! Acceptance suite. Prints one PASS/FAIL line per criterion and fails if
//! any criterion fails. Criteria run sequentially inside one test so the
//! timing checks do not compete with other tests for the CPU.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use reuseplan::backbone::{
    build_backbone, scripted_rates, Backbone, BackboneConfig, RatioSchedule, Scripted, ScriptedProfile, SiteAction,
};
use reuseplan::bench::{bundle_grid, sweep, Bench, BenchConfig};
use reuseplan::error::Error;
use reuseplan::plan_io::{plan_from_json, plan_to_json};
use reuseplan::planner::{
    calibrate, correct_from_rates, quantile_cut, resample_correct, CachePlan, CorrectionMode, PlannerOptions,
    ThresholdSet,
};
use reuseplan::rates::{
    collect_rates, collect_shadow_rates, read_rate_csv, write_rate_csv, CalibrationOptions, ReuseMask,
};
use reuseplan::sampler::{run_full, SampleInput, SampleSchedule};
use reuseplan::scheduler::{execute_plan, simulate_plan, ExecuteOptions};
use reuseplan::tensor::TokenTensor;

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

/// Ratios stay within 0.7..1.25 so first differences never shrink to the
/// scale of the rate regularizer.
fn scripted_profile() -> ScriptedProfile {
    ScriptedProfile::constant(0.8)
        .with_family("ffn", RatioSchedule::Piecewise { switch_at: 8, before: 1.25, after: 0.7 })
        .with_site("mhsa", 1, RatioSchedule::Constant(0.9))
}

fn scripted_rate_exactness() -> Outcome {
    let start = Instant::now();
    let (steps, layers) = (20, 3);
    let profile = scripted_profile();
    let cfg = BackboneConfig::scripted(layers, 4, 32, profile.clone());
    let m = build_backbone(&cfg).map_err(|e| e.to_string())?;
    let s = SampleSchedule::linear(steps, 1.0, 0.0).map_err(|e| e.to_string())?;
    let inputs = SampleInput::batch(m.as_ref(), 7, 3);
    let stats = collect_rates(m.as_ref(), &s, &inputs, &CalibrationOptions::default()).map_err(|e| e.to_string())?;
    let want = scripted_rates(&profile, m.registry(), steps, layers).map_err(|e| e.to_string())?;
    let mut worst: f64 = 0.0;
    for (f, w) in want.iter().enumerate() {
        let got = &stats.mean.layer[f];
        for l in 0..layers {
            check(got.get(0, l).is_none() && got.get(steps - 1, l).is_none(), || {
                format!("boundary column defined at family {f} layer {l}")
            })?;
            check(got.painted(0, l) == 1.0 && got.painted(steps - 1, l) == 1.0, || {
                "boundary columns do not paint as log2 = 0".into()
            })?;
            check(stats.mean.mse_maps[f].get(0, l) == Some(0.0), || "mse column 0 is not 0".into())?;
            for t in 1..steps - 1 {
                let g = got.get(t, l).ok_or_else(|| format!("interior ({t},{l}) undefined"))?;
                let e = w.get(t, l).expect("analytic interior");
                worst = worst.max((g - e).abs());
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(worst <= 1e-9, || format!("max deviation {worst:e}"))?;
    check(secs < 5.0, || format!("took {secs:.2}s"))?;
    Ok(format!("max |rho - r| = {worst:.1e}, {secs:.2}s"))
}

fn no_cache_identity() -> Outcome {
    let m = build_backbone(&BackboneConfig::toy_dit(6, 64, 64, 4, 42)).map_err(|e| e.to_string())?;
    let s = SampleSchedule::linear(20, 1.0, 0.0).map_err(|e| e.to_string())?;
    let input = SampleInput::from_seed(11, 3, 64, 64);
    let base = run_full(m.as_ref(), &s, &input).map_err(|e| e.to_string())?;
    let plan = CachePlan::zeros_for(m.as_ref(), &s);
    let run = execute_plan(m.as_ref(), &s, &plan, &input, ExecuteOptions::default()).map_err(|e| e.to_string())?;
    let st = run.stats();
    check(run.trajectory.x_final.data() == base.x_final.data(), || "final latent differs".into())?;
    check(run.trajectory.outputs == base.outputs, || "per-step outputs differ".into())?;
    check(st.step_skips == 0 && st.reused_total() == 0 && st.degraded_reuse == 0, || {
        format!("skips recorded: {} steps, {} reused", st.step_skips, st.reused_total())
    })?;
    Ok(format!("checksum {:016x}, 0 skips", run.trajectory.x_final.checksum()))
}

fn quantile_semantics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1000);
    let mut vals: Vec<f64> = (0..1000).map(|_| rng.random_range(0.5..1.5)).collect();
    vals.sort_by(f64::total_cmp);
    vals.dedup();
    check(vals.len() == 1000, || "synthetic values not distinct".into())?;
    let mut parts = Vec::new();
    for tau in [0.22, 0.5, 0.63] {
        let cut = quantile_cut(&vals, tau).map_err(|e| e.to_string())?;
        let frac = vals.iter().filter(|v| **v <= cut).count() as f64 / 1000.0;
        check(frac >= tau && frac <= tau + 0.002, || format!("tau {tau}: fraction {frac}"))?;
        parts.push(format!("{tau}->{frac}"));
    }
    Ok(parts.join(", "))
}

fn phase2_identity_and_fixed_point() -> Outcome {
    // identity on a learned backbone
    let m = build_backbone(&BackboneConfig::toy_dit(3, 16, 32, 4, 5)).map_err(|e| e.to_string())?;
    let s = SampleSchedule::linear(16, 1.0, 0.0).map_err(|e| e.to_string())?;
    let inputs = SampleInput::batch(m.as_ref(), 42, 3);
    let th = ThresholdSet::new(0.6, 0.1, &[("mhsa", 0.5), ("ffn", 0.4)]);
    let opts = PlannerOptions::default();
    let cal = calibrate(m.as_ref(), &s, &inputs, &th, &opts).map_err(|e| e.to_string())?;
    let shadow = collect_shadow_rates(m.as_ref(), &s, &inputs, &ReuseMask::none(16, 3, 2), &opts.calibration)
        .map_err(|e| e.to_string())?;
    check(shadow.mean == cal.stats.mean, || "empty-mask shadow rates differ from Phase-1 rates".into())?;
    let mut zero = cal.initial.clone();
    for t in 0..16 {
        zero.set_step(t, false);
        for l in 0..3 {
            for f in 0..2 {
                zero.set_site(t, l, f, false);
            }
        }
    }
    let via_resample = resample_correct(
        m.as_ref(),
        &s,
        &inputs,
        &zero,
        &PlannerOptions {
            correction: CorrectionMode::Rethreshold,
            ..opts
        },
    )
    .map_err(|e| e.to_string())?;
    check(
        via_resample.reuse_mask() == cal.initial.reuse_mask() && via_resample.step_gate() == cal.initial.step_gate(),
        || "zero-plan correction does not reproduce the Phase-1 plan".into(),
    )?;
    let direct = correct_from_rates(&zero, &shadow.mean, CorrectionMode::Rethreshold).map_err(|e| e.to_string())?;
    check(direct == via_resample, || "rate-level and run-level correction disagree".into())?;

    // fixed point on scripted backbones
    let mut configs = 0;
    for (i, r) in [0.3, 0.5, 0.8, 0.95].into_iter().enumerate() {
        let profile = ScriptedProfile::constant(r)
            .with_family("ffn", RatioSchedule::Piecewise { switch_at: 5 + i, before: 1.2, after: r });
        let m = build_backbone(&BackboneConfig::scripted(3, 4, 24, profile)).map_err(|e| e.to_string())?;
        let s = SampleSchedule::linear(18, 1.0, 0.0).map_err(|e| e.to_string())?;
        let inputs = SampleInput::batch(m.as_ref(), i as u64, 2);
        for th in [
            ThresholdSet::new(0.6, 0.1, &[("mhsa", 0.7), ("ffn", 0.5)]),
            ThresholdSet::new(0.9, 0.0, &[("mhsa", 1.0), ("ffn", 0.9)]),
        ] {
            let cal = calibrate(m.as_ref(), &s, &inputs, &th, &opts).map_err(|e| e.to_string())?;
            let again = resample_correct(m.as_ref(), &s, &inputs, &cal.corrected, &opts).map_err(|e| e.to_string())?;
            check(again == cal.corrected, || format!("scripted r={r}: second pass changed the plan"))?;
            configs += 1;
        }
    }
    Ok(format!("identity holds; fixed point on {configs} scripted configs"))
}

fn random_plan(backbone: &dyn Backbone, schedule: &SampleSchedule, rng: &mut ChaCha8Rng) -> CachePlan {
    let mut plan = CachePlan::zeros_for(backbone, schedule);
    let (p_step, p_site) = (rng.random_range(0.0..0.5), rng.random_range(0.0..0.9));
    for t in 1..plan.steps() - 1 {
        plan.set_step(t, rng.random_bool(p_step));
        for l in 0..plan.layers() {
            for f in 0..plan.families().len() {
                plan.set_site(t, l, f, rng.random_bool(p_site));
            }
        }
    }
    plan
}

fn scheduler_contract() -> Outcome {
    let backbones = [
        BackboneConfig::toy_dit(2, 8, 16, 2, 1),
        BackboneConfig::toy_dual(2, 8, 16, 2, 2),
        BackboneConfig::scripted(3, 4, 16, scripted_profile()),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut plans = 0;
    let mut step_skips = 0;
    for i in 0..120 {
        let m = build_backbone(&backbones[i % backbones.len()]).map_err(|e| e.to_string())?;
        let steps = rng.random_range(3..16);
        let s = SampleSchedule::linear(steps, 1.0, 0.0).map_err(|e| e.to_string())?;
        let plan = random_plan(m.as_ref(), &s, &mut rng);
        let (n, d) = m.latent_shape();
        let input = SampleInput::from_seed(i as u64, i % m.config().cond_classes, n, d);
        let run = execute_plan(m.as_ref(), &s, &plan, &input, ExecuteOptions::default().recording())
            .map_err(|e| e.to_string())?;
        let z = &run.trajectory.outputs;
        for t in 1..steps {
            if plan.step(t) {
                step_skips += 1;
                check(z[t].data() == z[t - 1].data(), || format!("plan {i}: z_{t} != z_{}", t - 1))?;
            }
            let prev_skipped = run.steps[t - 1].skipped;
            let tr = &run.steps[t];
            if prev_skipped && !tr.skipped {
                check(tr.masked, || format!("plan {i}: step {t} not masked"))?;
                check(tr.touched.iter().all(|x| x.action == SiteAction::Compute), || {
                    format!("plan {i}: step {t} reused after a step skip")
                })?;
            }
        }
        let st = run.stats();
        let total = (steps * plan.layers()) as u64 * st.hooks_per_layer() as u64;
        check(st.computed_total() + st.reused_total() + st.skipped_hooks == total, || {
            format!("plan {i}: work accounting broken")
        })?;
        check(run.empty_reads == 0, || format!("plan {i}: read an empty slot"))?;
        let sim = simulate_plan(m.as_ref(), &plan).map_err(|e| e.to_string())?;
        check(sim.flops == st.flops, || format!("plan {i}: simulated FLOPs differ"))?;
        plans += 1;
    }
    Ok(format!("{plans} plans, {step_skips} step skips checked"))
}

/// Replays a plan on a scripted backbone with explicit substitution: each
/// site remembers which step it was last computed at.
fn replay(m: &Scripted, schedule: &SampleSchedule, plan: &CachePlan, input: &SampleInput) -> TokenTensor {
    let (layers, fams) = (plan.layers(), plan.families().len());
    let mut x = input.x_init.clone();
    let mut last_z: Option<TokenTensor> = None;
    let mut source: Vec<Option<usize>> = vec![None; layers * fams];
    let mut masked = false;
    for t in 0..plan.steps() {
        let z = if plan.step(t) {
            masked = true;
            last_z.clone().expect("step 0 computes")
        } else {
            if masked {
                source.iter_mut().for_each(|s| *s = None);
                masked = false;
            }
            let mut acc = TokenTensor::zeros(x.rows(), x.cols());
            for l in 0..layers {
                for f in 0..fams {
                    let k = match source[l * fams + f] {
                        Some(k) if plan.site(t, l, f) => k,
                        _ => t,
                    };
                    source[l * fams + f] = Some(k);
                    acc.add_assign(&m.site_output(l, f, k)).unwrap();
                }
            }
            acc.scaled(1.0 / (layers * fams) as f64)
        };
        x.add_scaled(&z, schedule.delta(t)).unwrap();
        last_z = Some(z);
    }
    x
}

fn plan_replay_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    for i in 0..50 {
        let r = rng.random_range(0.3..1.3);
        let layers = rng.random_range(1..4);
        let cfg = BackboneConfig::scripted(layers, 3, 24, ScriptedProfile::constant(r));
        let sm = Scripted::new(cfg.clone()).map_err(|e| e.to_string())?;
        let m = build_backbone(&cfg).map_err(|e| e.to_string())?;
        let s = SampleSchedule::linear(rng.random_range(3..20), 1.0, 0.0).map_err(|e| e.to_string())?;
        let plan = random_plan(m.as_ref(), &s, &mut rng);
        let input = SampleInput::from_seed(i, 0, 3, 24);
        let run = execute_plan(m.as_ref(), &s, &plan, &input, ExecuteOptions::default()).map_err(|e| e.to_string())?;
        let want = replay(&sm, &s, &plan, &input);
        check(run.trajectory.x_final.data() == want.data(), || format!("plan {i}: output differs from replay"))?;
    }
    Ok("50 plans bit-identical".into())
}

struct SweepOutcome {
    line: Outcome,
    plans: Vec<CachePlan>,
}

fn speed_quality_sweep() -> SweepOutcome {
    let start = Instant::now();
    let cfg = BenchConfig {
        calibration_inputs: 3,
        repeats: 5,
        ..BenchConfig::default()
    };
    let result = Bench::new(cfg).and_then(|mut bench| {
        let grid = bundle_grid(true);
        let res = sweep(&mut bench, &grid)?;
        let initial = grid
            .iter()
            .map(|p| bench.initial_plan(&p.thresholds).and_then(|pl| simulate_plan(bench.backbone(), &pl)))
            .collect::<reuseplan::Result<Vec<_>>>()?;
        Ok((res, initial))
    });
    let (res, initial) = match result {
        Ok(v) => v,
        Err(e) => {
            return SweepOutcome {
                line: Err(e.to_string()),
                plans: Vec::new(),
            }
        }
    };
    let secs = start.elapsed().as_secs_f64();
    let plans = res.points.iter().map(|p| p.plan.clone()).collect();
    let mut problems = Vec::new();
    if res.points.len() != 35 {
        problems.push(format!("{} rows", res.points.len()));
    }
    let mut rises = Vec::new();
    let mut phase1_rises = 0;
    for (i, w) in res.points.windows(2).enumerate() {
        if w[0].point.bundle != w[1].point.bundle {
            continue;
        }
        if w[1].row.flops > w[0].row.flops {
            rises.push(format!("{}->{}", w[0].point.name, w[1].point.name));
        }
        if initial[i + 1].flops > initial[i].flops {
            phase1_rises += 1;
        }
    }
    if !rises.is_empty() {
        problems.push(format!(
            "corrected-plan FLOPs rise with tau_step at {} of 28 pairs (e.g. {}); Phase-1 plans rise at {phase1_rises}",
            rises.len(),
            rises[0]
        ));
    }
    let worst = res
        .points
        .iter()
        .map(|p| (p.row.speedup_vs_baseline / p.row.flop_speedup - 1.0).abs())
        .fold(0.0, f64::max);
    if worst > 0.15 {
        problems.push(format!("wall/FLOP speedup deviation {worst:.3}"));
    }
    if secs >= 180.0 {
        problems.push(format!("took {secs:.0}s"));
    }
    let summary = format!("35 points, worst wall/FLOP deviation {worst:.3}, {secs:.0}s");
    SweepOutcome {
        line: if problems.is_empty() {
            Ok(summary)
        } else {
            Err(format!("{}; {summary}", problems.join("; ")))
        },
        plans,
    }
}

fn forced_compute(plan: &CachePlan, warmup: usize) -> Result<(), String> {
    let t_last = plan.steps() - 1;
    for t in (0..warmup.max(1)).chain([t_last]) {
        check(!plan.step(t), || format!("step gate set at {t}"))?;
        for l in 0..plan.layers() {
            for f in 0..plan.families().len() {
                check(!plan.site(t, l, f), || format!("site ({t},{l},{f}) cached"))?;
            }
        }
    }
    plan.validate().map_err(|e| e.to_string())
}

fn forced_compute_and_warmup(sweep_plans: &[CachePlan]) -> Outcome {
    for p in sweep_plans {
        forced_compute(p, p.warmup_steps())?;
    }
    let m = build_backbone(&BackboneConfig::toy_dit(2, 8, 16, 2, 3)).map_err(|e| e.to_string())?;
    let s = SampleSchedule::linear(28, 1.0, 0.0).map_err(|e| e.to_string())?;
    let inputs = SampleInput::batch(m.as_ref(), 42, 2);
    for (tw, expect) in [(0.10, 3), (0.22, 7)] {
        let th = ThresholdSet::new(1.0, tw, &[("mhsa", 1.0), ("ffn", 1.0)]);
        let cal = calibrate(m.as_ref(), &s, &inputs, &th, &PlannerOptions::default()).map_err(|e| e.to_string())?;
        for plan in [&cal.initial, &cal.corrected] {
            check(plan.warmup_steps() == expect, || {
                format!("tau_warmup {tw}: {} warm-up steps", plan.warmup_steps())
            })?;
            forced_compute(plan, expect)?;
            // with every threshold at 1 the first free step is cached somewhere
            let first_free = (0..28).find(|&t| plan.step(t) || (0..2).any(|f| plan.site(t, 0, f) || plan.site(t, 1, f)));
            check(first_free.is_some_and(|t| t >= expect), || {
                format!("tau_warmup {tw}: first cached step {first_free:?}")
            })?;
        }
    }
    Ok(format!("{} sweep plans and warm-up 3/7 at T=28", sweep_plans.len()))
}

fn format_round_trips() -> Outcome {
    let m = build_backbone(&BackboneConfig::toy_dual(2, 8, 16, 2, 9)).map_err(|e| e.to_string())?;
    let s = SampleSchedule::linear(12, 1.0, 0.0).map_err(|e| e.to_string())?;
    let inputs = SampleInput::batch(m.as_ref(), 42, 2);
    let th = reuseplan::presets::preset("flux-slow").map_err(|e| e.to_string())?;
    let cal = calibrate(m.as_ref(), &s, &inputs, &th, &PlannerOptions::default()).map_err(|e| e.to_string())?;
    for plan in [&cal.initial, &cal.corrected] {
        let text = plan_to_json(plan).map_err(|e| e.to_string())?;
        let back = plan_from_json(&text).map_err(|e| e.to_string())?;
        check(&back == plan, || "plan differs after round trip".into())?;
        check(plan_to_json(&back).map_err(|e| e.to_string())? == text, || "re-serialized text differs".into())?;
    }
    for mat in cal.stats.mean.layer.iter().chain(cal.stats.mean.mse_maps.iter()) {
        let mut buf = Vec::new();
        write_rate_csv(mat, &mut buf).map_err(|e| e.to_string())?;
        let back = read_rate_csv(&buf[..], mat.family.clone()).map_err(|e| e.to_string())?;
        let same = (0..mat.steps()).all(|t| {
            (0..mat.layers()).all(|l| back.get(t, l).map(f64::to_bits) == mat.get(t, l).map(f64::to_bits))
        });
        check(same, || format!("rate CSV for {} not bit-exact", mat.family.as_str()))?;
    }

    let good = plan_to_json(&cal.corrected).map_err(|e| e.to_string())?;
    let mut value: serde_json::Value = serde_json::from_str(&good).map_err(|e| e.to_string())?;
    value["step_gate"][0] = 1.into();
    let forced = plan_from_json(&value.to_string());
    check(matches!(forced, Err(Error::PlanInvariant { .. })), || format!("forced-step violation: {forced:?}"))?;
    let mut value: serde_json::Value = serde_json::from_str(&good).map_err(|e| e.to_string())?;
    value["format_version"] = 99.into();
    let version = plan_from_json(&value.to_string());
    check(matches!(version, Err(Error::UnsupportedVersion { found: 99, .. })), || format!("version: {version:?}"))?;
    let truncated = plan_from_json(&good[..good.len() / 2]);
    check(matches!(truncated, Err(Error::Malformed { .. })), || format!("truncated: {truncated:?}"))?;
    let mut value: serde_json::Value = serde_json::from_str(&good).map_err(|e| e.to_string())?;
    value["extra"] = 1.into();
    let unknown = plan_from_json(&value.to_string());
    check(matches!(unknown, Err(Error::Malformed { .. })), || format!("unknown field: {unknown:?}"))?;
    let csv = "t,l,value\n0,0,\n0,0,1.0\n";
    let dup = read_rate_csv(csv.as_bytes(), cal.stats.mean.layer[0].family.clone());
    check(matches!(dup, Err(Error::Malformed { .. })), || format!("duplicate CSV entry: {dup:?}"))?;
    Ok("plans and rate CSVs bit-exact; 5 corruptions rejected".into())
}

#[test]
fn acceptance() {
    let mut failed = Vec::new();
    let mut report = |name: &str, outcome: Outcome| match outcome {
        Ok(detail) => println!("PASS  {name}: {detail}"),
        Err(detail) => {
            println!("FAIL  {name}: {detail}");
            failed.push(name.to_string());
        }
    };
    report("scripted rate exactness", scripted_rate_exactness());
    report("no-cache identity", no_cache_identity());
    report("quantile semantics", quantile_semantics());
    report("phase-2 identity and fixed point", phase2_identity_and_fixed_point());
    report("scheduler contract", scheduler_contract());
    report("plan-replay oracle", plan_replay_oracle());
    let sw = speed_quality_sweep();
    report("toy speed-quality sweep", sw.line);
    report("forced compute and warm-up", forced_compute_and_warmup(&sw.plans));
    report("format round trips", format_round_trips());
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
