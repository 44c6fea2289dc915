//! Plan-following execution.
//!
//! Each step first consults the step gate. A gated step returns the previous
//! network output without calling the backbone and arms a one-shot mask; the
//! next computed step starts by emptying every layer slot. Otherwise each
//! `(layer, family)` site reuses its slot when the plan says so and the slot
//! is filled, and computes (overwriting the slot) in every other case.

use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, GateDirective, SiteAction, Touch};
pub use crate::cache::ModuleCache;
use crate::error::{Error, Result};
use crate::planner::{CachePlan, PlanPhase};
use crate::sampler::{run_trajectory, RunStats, SampleInput, SampleSchedule, StepExecutor, Trajectory};
use crate::tensor::{mse, psnr_from_mse, TokenTensor};

/// What happened at one step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepTrace {
    pub t: usize,
    pub skipped: bool,
    /// Layer slots were emptied before this step ran.
    pub masked: bool,
    pub touched: Vec<Touch>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ExecuteOptions {
    /// Run plans still tagged `initial`.
    pub accept_initial: bool,
    /// Keep a [`StepTrace`] per step.
    pub record_steps: bool,
}

impl ExecuteOptions {
    pub fn any_phase() -> Self {
        Self {
            accept_initial: true,
            ..Self::default()
        }
    }

    pub fn recording(mut self) -> Self {
        self.record_steps = true;
        self
    }
}

/// [`StepExecutor`] that follows a plan verbatim.
pub struct PlanExecutor<'a> {
    plan: &'a CachePlan,
    cache: Option<ModuleCache>,
    record: bool,
    steps: Vec<StepTrace>,
}

impl<'a> PlanExecutor<'a> {
    pub fn new(plan: &'a CachePlan, record: bool) -> Self {
        Self {
            plan,
            cache: None,
            record,
            steps: Vec::new(),
        }
    }

    pub fn cache(&self) -> Option<&ModuleCache> {
        self.cache.as_ref()
    }
}

impl StepExecutor for PlanExecutor<'_> {
    fn step(
        &mut self,
        backbone: &dyn Backbone,
        x: &TokenTensor,
        cond: usize,
        t: usize,
        stats: &mut RunStats,
    ) -> Result<TokenTensor> {
        let plan = self.plan;
        let cache = self.cache.get_or_insert_with(|| backbone.new_cache());
        if plan.step(t) {
            let z = cache
                .last_net()
                .cloned()
                .ok_or_else(|| Error::invariant("first_step_computes", format!("step_gate[{t}]")))?;
            stats.record_step_skip();
            cache.set_mask_pending(true);
            if self.record {
                self.steps.push(StepTrace {
                    t,
                    skipped: true,
                    masked: false,
                    touched: Vec::new(),
                });
            }
            return Ok(z);
        }
        let masked = cache.mask_pending();
        if masked {
            cache.clear_layers();
            cache.set_mask_pending(false);
        }
        let reg = backbone.registry();
        let mut gate = GateDirective::all_compute(plan.layers(), reg.len());
        for l in 0..plan.layers() {
            for f in 0..reg.len() {
                if !plan.site(t, l, f) {
                    continue;
                }
                let off = reg.hook_offset(f);
                if (0..reg.hooks(f)).all(|h| cache.is_filled(l, off + h)) {
                    gate.set(l, f, SiteAction::Reuse);
                } else {
                    stats.degraded_reuse += 1;
                }
            }
        }
        let out = backbone.forward_step(x, cond, t, &gate, cache)?;
        stats.record_forward(&out.touched, backbone.flop_table());
        cache.set_last_net(out.z.clone());
        if self.record {
            self.steps.push(StepTrace {
                t,
                skipped: false,
                masked,
                touched: out.touched,
            });
        }
        Ok(out.z)
    }
}

#[derive(Debug, Clone)]
pub struct ScheduledRun {
    pub trajectory: Trajectory,
    /// Empty unless recording was requested.
    pub steps: Vec<StepTrace>,
    /// Attempted reads of empty cache slots; always 0 for a sound run.
    pub empty_reads: u64,
}

impl ScheduledRun {
    pub fn stats(&self) -> &RunStats {
        &self.trajectory.stats
    }
}

/// Runs one trajectory under `plan`.
pub fn execute_plan(
    backbone: &dyn Backbone,
    schedule: &SampleSchedule,
    plan: &CachePlan,
    input: &SampleInput,
    opts: ExecuteOptions,
) -> Result<ScheduledRun> {
    plan.check_dims(backbone, schedule)?;
    plan.validate()?;
    if plan.provenance.phase != PlanPhase::Corrected && !opts.accept_initial {
        return Err(Error::InvalidArgument(
            "plan is tagged `initial`; correct it first or accept initial plans explicitly".into(),
        ));
    }
    let mut exec = PlanExecutor::new(plan, opts.record_steps);
    let trajectory = run_trajectory(backbone, schedule, input, &mut exec)?;
    let empty_reads = exec.cache().map_or(0, ModuleCache::empty_reads);
    Ok(ScheduledRun {
        trajectory,
        steps: exec.steps,
        empty_reads,
    })
}

/// Counts the work `plan` will do without running the backbone. The result
/// matches the stats of an executed run except for wall time.
pub fn simulate_plan(backbone: &dyn Backbone, plan: &CachePlan) -> Result<RunStats> {
    let reg = backbone.registry();
    if plan.layers() != backbone.layers() || plan.families() != reg.families() {
        return Err(Error::DimensionMismatch("plan does not fit the backbone".into()));
    }
    plan.validate()?;
    let flops = backbone.flop_table();
    let mut stats = RunStats::new(reg, plan.layers());
    stats.steps = plan.steps();
    let mut filled = vec![false; plan.layers() * reg.len()];
    let mut mask_pending = false;
    for t in 0..plan.steps() {
        if plan.step(t) {
            stats.record_step_skip();
            mask_pending = true;
            continue;
        }
        if mask_pending {
            filled.iter_mut().for_each(|s| *s = false);
            mask_pending = false;
        }
        stats.flops += flops.step_overhead;
        for l in 0..plan.layers() {
            for f in 0..reg.len() {
                let slot = &mut filled[l * reg.len() + f];
                let hooks = reg.hooks(f) as u64;
                if plan.site(t, l, f) && *slot {
                    stats.reused[f] += hooks;
                } else {
                    if plan.site(t, l, f) {
                        stats.degraded_reuse += 1;
                    }
                    stats.computed[f] += hooks;
                    stats.flops += flops.site(f);
                    *slot = true;
                }
            }
        }
    }
    Ok(stats)
}

/// Analytic FLOPs of one run under `plan`.
pub fn plan_flops(backbone: &dyn Backbone, plan: &CachePlan) -> Result<u64> {
    Ok(simulate_plan(backbone, plan)?.flops)
}

/// Output fidelity of a cached run against the full-compute reference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidelityReport {
    pub peak: f64,
    /// `mse(z_t cached, z_t full)` per step.
    pub step_mse: Vec<f64>,
    pub step_psnr: Vec<f64>,
    /// On the final latent.
    pub final_mse: f64,
    pub final_psnr: f64,
}

impl FidelityReport {
    /// Steps whose outputs differ from the reference.
    pub fn differing_steps(&self) -> Vec<usize> {
        (0..self.step_mse.len()).filter(|&t| self.step_mse[t] > 0.0).collect()
    }
}

/// Peak used for PSNR when none is given: the largest magnitude of the
/// reference final latent (1 if it is all zeros).
pub fn default_peak(full: &Trajectory) -> f64 {
    let m = full.x_final.max_abs();
    if m > 0.0 {
        m
    } else {
        1.0
    }
}

pub fn compare_runs(full: &Trajectory, cached: &Trajectory, peak: f64) -> Result<FidelityReport> {
    if !(peak > 0.0 && peak.is_finite()) {
        return Err(Error::InvalidArgument(format!("PSNR peak must be positive, got {peak}")));
    }
    if full.outputs.len() != cached.outputs.len() {
        return Err(Error::DimensionMismatch(format!(
            "trajectories have {} and {} steps",
            full.outputs.len(),
            cached.outputs.len()
        )));
    }
    let step_mse = full
        .outputs
        .iter()
        .zip(&cached.outputs)
        .map(|(a, b)| mse(a, b))
        .collect::<Result<Vec<_>>>()?;
    let final_mse = mse(&full.x_final, &cached.x_final)?;
    Ok(FidelityReport {
        peak,
        step_psnr: step_mse.iter().map(|m| psnr_from_mse(*m, peak)).collect(),
        step_mse,
        final_mse,
        final_psnr: psnr_from_mse(final_mse, peak),
    })
}
