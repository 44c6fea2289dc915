//! Deterministic Euler sampling loop.
//!
//! The loop owns the latent update only; what happens inside a step (full
//! compute, recording, plan-driven reuse) is delegated to a
//! [`StepExecutor`].

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{Backbone, FamilyId, FamilyRegistry, FlopTable, GateDirective, SiteAction, Touch};
use crate::cache::ModuleCache;
use crate::error::{Error, Result};
use crate::tensor::TokenTensor;

/// Noise levels `sigma_0 .. sigma_T`; inference step `t` moves from
/// `sigma_t` to `sigma_{t+1}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleSchedule {
    sigmas: Vec<f64>,
}

impl SampleSchedule {
    pub const MIN_STEPS: usize = 3;

    /// `steps + 1` evenly spaced levels from `start` to `end`.
    pub fn linear(steps: usize, start: f64, end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidSchedule("steps must be positive".into()));
        }
        let sigmas = (0..=steps)
            .map(|i| start + (end - start) * i as f64 / steps as f64)
            .collect();
        Self::new(sigmas)
    }

    pub fn new(sigmas: Vec<f64>) -> Result<Self> {
        let steps = sigmas.len().saturating_sub(1);
        if steps < Self::MIN_STEPS {
            return Err(Error::InvalidSchedule(format!(
                "need at least {} steps, got {steps}",
                Self::MIN_STEPS
            )));
        }
        if sigmas.iter().any(|s| !s.is_finite()) {
            return Err(Error::InvalidSchedule("non-finite sigma".into()));
        }
        let increasing = sigmas.windows(2).all(|w| w[1] > w[0]);
        let decreasing = sigmas.windows(2).all(|w| w[1] < w[0]);
        if !increasing && !decreasing {
            return Err(Error::InvalidSchedule("sigmas must be strictly monotone".into()));
        }
        Ok(Self { sigmas })
    }

    pub fn steps(&self) -> usize {
        self.sigmas.len() - 1
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    pub fn delta(&self, t: usize) -> f64 {
        self.sigmas[t + 1] - self.sigmas[t]
    }

    /// Hex SHA-256 over the sigma bit patterns.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for s in &self.sigmas {
            h.update(s.to_bits().to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

/// Initial latent and class label of one trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleInput {
    pub x_init: TokenTensor,
    pub cond: usize,
    /// Seed the latent was drawn from, when known.
    pub seed: Option<u64>,
}

impl SampleInput {
    /// Standard-normal latent drawn from `seed`.
    pub fn from_seed(seed: u64, cond: usize, rows: usize, cols: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x_init = TokenTensor::from_fn(rows, cols, |_, _| StandardNormal.sample(&mut rng));
        Self {
            x_init,
            cond,
            seed: Some(seed),
        }
    }

    /// `count` inputs with seeds `base_seed..` and classes cycling through
    /// `cond_classes`.
    pub fn batch(backbone: &dyn Backbone, base_seed: u64, count: usize) -> Vec<Self> {
        let (n, d) = backbone.latent_shape();
        let classes = backbone.config().cond_classes;
        (0..count)
            .map(|i| Self::from_seed(base_seed + i as u64, i % classes, n, d))
            .collect()
    }

    pub fn describe(&self) -> String {
        match self.seed {
            Some(s) => format!("seed={s},class={}", self.cond),
            None => format!("class={}", self.cond),
        }
    }
}

/// Work and timing counters of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunStats {
    pub steps: usize,
    pub layers: usize,
    pub families: Vec<FamilyId>,
    /// Hooks per family, in registry order.
    pub hooks: Vec<usize>,
    pub step_skips: usize,
    /// Computed hooks per family.
    pub computed: Vec<u64>,
    /// Reused hooks per family.
    pub reused: Vec<u64>,
    /// Hooks that were not visited because their step was skipped.
    pub skipped_hooks: u64,
    /// Reuse requests served by computing because the slot was empty.
    pub degraded_reuse: u64,
    pub flops: u64,
    pub wall_time_s: f64,
}

impl RunStats {
    pub fn new(registry: &FamilyRegistry, layers: usize) -> Self {
        let f = registry.len();
        Self {
            steps: 0,
            layers,
            families: registry.families().to_vec(),
            hooks: (0..f).map(|i| registry.hooks(i)).collect(),
            step_skips: 0,
            computed: vec![0; f],
            reused: vec![0; f],
            skipped_hooks: 0,
            degraded_reuse: 0,
            flops: 0,
            wall_time_s: 0.0,
        }
    }

    pub fn record_forward(&mut self, touched: &[Touch], flops: &FlopTable) {
        self.flops += flops.step_overhead;
        for t in touched {
            match t.action {
                SiteAction::Compute => {
                    self.computed[t.family] += 1;
                    self.flops += flops.hook(t.family, t.hook);
                }
                SiteAction::Reuse => self.reused[t.family] += 1,
            }
        }
    }

    pub fn record_step_skip(&mut self) {
        self.step_skips += 1;
        self.skipped_hooks += (self.layers * self.hooks.iter().sum::<usize>()) as u64;
    }

    pub fn hooks_per_layer(&self) -> usize {
        self.hooks.iter().sum()
    }

    /// `steps * layers * hooks_per_layer`.
    pub fn total_hooks(&self) -> u64 {
        (self.steps * self.layers * self.hooks_per_layer()) as u64
    }

    pub fn computed_total(&self) -> u64 {
        self.computed.iter().sum()
    }

    pub fn reused_total(&self) -> u64 {
        self.reused.iter().sum()
    }

    /// Reused fraction of family `f`'s hooks over the whole run.
    pub fn family_skip_fraction(&self, f: usize) -> f64 {
        let total = (self.steps * self.layers * self.hooks[f]) as f64;
        if total == 0.0 {
            0.0
        } else {
            self.reused[f] as f64 / total
        }
    }

    pub fn step_skip_fraction(&self) -> f64 {
        if self.steps == 0 {
            0.0
        } else {
            self.step_skips as f64 / self.steps as f64
        }
    }
}

/// Produces the network output `z_t` for one step.
pub trait StepExecutor {
    fn step(
        &mut self,
        backbone: &dyn Backbone,
        x: &TokenTensor,
        cond: usize,
        t: usize,
        stats: &mut RunStats,
    ) -> Result<TokenTensor>;
}

/// Computes every hook at every step.
#[derive(Debug)]
pub struct FullCompute {
    cache: Option<ModuleCache>,
}

impl FullCompute {
    pub fn new() -> Self {
        Self { cache: None }
    }

    /// Module outputs of the last step, `(layer, hook)` indexed.
    pub fn cache(&self) -> Option<&ModuleCache> {
        self.cache.as_ref()
    }
}

impl Default for FullCompute {
    fn default() -> Self {
        Self::new()
    }
}

impl StepExecutor for FullCompute {
    fn step(
        &mut self,
        backbone: &dyn Backbone,
        x: &TokenTensor,
        cond: usize,
        t: usize,
        stats: &mut RunStats,
    ) -> Result<TokenTensor> {
        let cache = self.cache.get_or_insert_with(|| backbone.new_cache());
        let gate = GateDirective::all_compute(backbone.layers(), backbone.registry().len());
        let out = backbone.forward_step(x, cond, t, &gate, cache)?;
        stats.record_forward(&out.touched, backbone.flop_table());
        Ok(out.z)
    }
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    /// Network outputs `z_0 .. z_{T-1}`.
    pub outputs: Vec<TokenTensor>,
    pub x_final: TokenTensor,
    pub stats: RunStats,
}

/// Runs `T` Euler steps `x_{t+1} = x_t + (sigma_{t+1} - sigma_t) * z_t`.
pub fn run_trajectory(
    backbone: &dyn Backbone,
    schedule: &SampleSchedule,
    input: &SampleInput,
    executor: &mut dyn StepExecutor,
) -> Result<Trajectory> {
    let (n, d) = backbone.latent_shape();
    if input.x_init.shape() != (n, d) {
        return Err(Error::ShapeMismatch {
            left_rows: input.x_init.rows(),
            left_cols: input.x_init.cols(),
            right_rows: n,
            right_cols: d,
        });
    }
    let steps = schedule.steps();
    let mut stats = RunStats::new(backbone.registry(), backbone.layers());
    stats.steps = steps;
    let mut x = input.x_init.clone();
    let mut outputs = Vec::with_capacity(steps);
    let start = Instant::now();
    for t in 0..steps {
        let z = executor.step(backbone, &x, input.cond, t, &mut stats)?;
        if z.shape() != (n, d) {
            return Err(Error::ShapeMismatch {
                left_rows: z.rows(),
                left_cols: z.cols(),
                right_rows: n,
                right_cols: d,
            });
        }
        x.add_scaled(&z, schedule.delta(t))?;
        if !z.is_finite() || !x.is_finite() {
            return Err(Error::NonFinite(t));
        }
        outputs.push(z);
    }
    stats.wall_time_s = start.elapsed().as_secs_f64();
    Ok(Trajectory {
        outputs,
        x_final: x,
        stats,
    })
}

/// Baseline run with every hook computed.
pub fn run_full(backbone: &dyn Backbone, schedule: &SampleSchedule, input: &SampleInput) -> Result<Trajectory> {
    run_trajectory(backbone, schedule, input, &mut FullCompute::new())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{build_backbone, BackboneConfig, ScriptedProfile};

    #[test]
    fn schedule_validation() {
        assert!(SampleSchedule::linear(2, 1.0, 0.0).is_err());
        assert!(SampleSchedule::new(vec![1.0, 0.5, 0.5, 0.0]).is_err());
        assert!(SampleSchedule::new(vec![1.0, 0.5, 0.7, 0.0]).is_err());
        let s = SampleSchedule::linear(4, 1.0, 0.0).unwrap();
        assert_eq!(s.steps(), 4);
        assert_eq!(s.sigmas(), &[1.0, 0.75, 0.5, 0.25, 0.0]);
        assert_eq!(s.digest(), SampleSchedule::linear(4, 1.0, 0.0).unwrap().digest());
        assert_ne!(s.digest(), SampleSchedule::linear(5, 1.0, 0.0).unwrap().digest());
    }

    #[test]
    fn baseline_is_deterministic_and_stores_t_outputs() {
        let m = build_backbone(&BackboneConfig::toy_dit(2, 8, 16, 2, 5)).unwrap();
        let s = SampleSchedule::linear(6, 1.0, 0.0).unwrap();
        let input = SampleInput::from_seed(42, 3, 8, 16);
        let a = run_full(m.as_ref(), &s, &input).unwrap();
        let b = run_full(m.as_ref(), &s, &input).unwrap();
        assert_eq!(a.outputs.len(), 6);
        assert_eq!(a.outputs, b.outputs);
        assert_eq!(a.x_final.checksum(), b.x_final.checksum());
        assert_eq!(a.stats.computed_total(), 6 * 2 * 2);
        assert_eq!(a.stats.flops, 6 * m.flop_table().full_step(2));
    }

    #[test]
    fn scripted_three_steps_match_hand_unroll() {
        let m = build_backbone(&BackboneConfig::scripted(1, 2, 4, ScriptedProfile::constant(0.5))).unwrap();
        let s = SampleSchedule::linear(3, 1.0, 0.0).unwrap();
        let input = SampleInput::from_seed(1, 0, 2, 4);
        let tr = run_full(m.as_ref(), &s, &input).unwrap();
        let mut x = input.x_init.clone();
        for t in 0..3 {
            let z = m.reference_forward(&x, 0, t).unwrap();
            let dt = s.sigmas()[t + 1] - s.sigmas()[t];
            let mut next = x.clone();
            for (v, zv) in next.data_mut().iter_mut().zip(z.data()) {
                *v += dt * zv;
            }
            x = next;
        }
        assert_eq!(tr.x_final, x);
    }

    /// Skips step `skip` by repeating the previous output.
    struct SkipOne {
        skip: usize,
        inner: FullCompute,
        last: Option<TokenTensor>,
    }

    impl StepExecutor for SkipOne {
        fn step(
            &mut self,
            backbone: &dyn Backbone,
            x: &TokenTensor,
            cond: usize,
            t: usize,
            stats: &mut RunStats,
        ) -> Result<TokenTensor> {
            let z = if t == self.skip {
                stats.record_step_skip();
                self.last.clone().unwrap()
            } else {
                self.inner.step(backbone, x, cond, t, stats)?
            };
            self.last = Some(z.clone());
            Ok(z)
        }
    }

    #[test]
    fn step_substitution_matches_reference_loop() {
        let m = build_backbone(&BackboneConfig::toy_dit(2, 4, 8, 2, 9)).unwrap();
        let s = SampleSchedule::linear(5, 1.0, 0.0).unwrap();
        let input = SampleInput::from_seed(7, 1, 4, 8);
        let mut exec = SkipOne {
            skip: 2,
            inner: FullCompute::new(),
            last: None,
        };
        let tr = run_trajectory(m.as_ref(), &s, &input, &mut exec).unwrap();

        let mut x = input.x_init.clone();
        let mut prev: Option<TokenTensor> = None;
        for t in 0..5 {
            let z = if t == 2 {
                prev.clone().unwrap()
            } else {
                m.reference_forward(&x, 1, t).unwrap()
            };
            x.add_scaled(&z, s.delta(t)).unwrap();
            prev = Some(z);
        }
        assert_eq!(tr.x_final, x);
        assert_eq!(tr.outputs[2], tr.outputs[1]);
        assert_eq!(tr.stats.step_skips, 1);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let m = build_backbone(&BackboneConfig::toy_dit(1, 4, 8, 2, 0)).unwrap();
        let s = SampleSchedule::linear(3, 1.0, 0.0).unwrap();
        let bad = SampleInput::from_seed(0, 0, 5, 8);
        assert!(run_full(m.as_ref(), &s, &bad).is_err());
    }
}
