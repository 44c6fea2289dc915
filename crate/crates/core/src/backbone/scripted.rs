//! A backbone whose module outputs follow a closed-form sequence.
//!
//! For each site `(l, s)` the first difference between consecutive steps
//! shrinks or grows by a prescribed ratio `r(t)`:
//!
//! ```text
//! Z_{t+1} - Z_t = a * g_t * u  (placed in column t mod d)
//! g_0 = 1,  g_t = g_{t-1} * r(t)
//! ```
//!
//! so the change rate at every interior step equals `r(t)` exactly. Each
//! increment lands in its own column (for `T <= d`), which keeps the
//! differences free of cancellation and makes every entry non-decreasing
//! in `t`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    check_input, gated_hook, Backbone, BackboneConfig, FamilyId, FamilyRegistry, FlopTable,
    GateDirective, StepOutput,
};
use crate::cache::ModuleCache;
use crate::error::{Error, Result};
use crate::rates::RateMatrix;
use crate::tensor::TokenTensor;

/// Ratio between consecutive first differences as a function of `t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RatioSchedule {
    Constant(f64),
    /// `before` for `t < switch_at`, `after` otherwise.
    Piecewise { switch_at: usize, before: f64, after: f64 },
}

impl RatioSchedule {
    pub fn at(&self, t: usize) -> f64 {
        match *self {
            RatioSchedule::Constant(r) => r,
            RatioSchedule::Piecewise {
                switch_at,
                before,
                after,
            } => {
                if t < switch_at {
                    before
                } else {
                    after
                }
            }
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = |r: f64| r > 0.0 && r.is_finite();
        let valid = match *self {
            RatioSchedule::Constant(r) => ok(r),
            RatioSchedule::Piecewise { before, after, .. } => ok(before) && ok(after),
        };
        if valid {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!(
                "scripted ratios must be positive and finite: {self:?}"
            )))
        }
    }
}

/// Ratio applied to one family, optionally restricted to one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteRatio {
    pub family: FamilyId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layer: Option<usize>,
    pub schedule: RatioSchedule,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptedProfile {
    pub default: RatioSchedule,
    /// First matching entry wins.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub overrides: Vec<SiteRatio>,
}

impl ScriptedProfile {
    pub fn constant(r: f64) -> Self {
        Self {
            default: RatioSchedule::Constant(r),
            overrides: Vec::new(),
        }
    }

    pub fn with_family(mut self, family: &str, schedule: RatioSchedule) -> Self {
        self.overrides.push(SiteRatio {
            family: FamilyId::new(family),
            layer: None,
            schedule,
        });
        self
    }

    pub fn with_site(mut self, family: &str, layer: usize, schedule: RatioSchedule) -> Self {
        self.overrides.push(SiteRatio {
            family: FamilyId::new(family),
            layer: Some(layer),
            schedule,
        });
        self
    }

    pub fn schedule_for(&self, family: &str, layer: usize) -> RatioSchedule {
        self.overrides
            .iter()
            .find(|o| o.family.as_str() == family && o.layer.is_none_or(|l| l == layer))
            .map_or(self.default, |o| o.schedule)
    }

    pub fn validate(&self) -> Result<()> {
        self.default.validate()?;
        for o in &self.overrides {
            o.schedule.validate()?;
        }
        Ok(())
    }
}

/// Families of the scripted backbone.
pub const SCRIPTED_FAMILIES: [&str; 2] = ["mhsa", "ffn"];

#[derive(Debug, Clone)]
pub struct Scripted {
    cfg: BackboneConfig,
    registry: FamilyRegistry,
    flops: FlopTable,
    profile: ScriptedProfile,
    /// `[layer][family]`
    schedules: Vec<Vec<RatioSchedule>>,
    amplitudes: Vec<Vec<f64>>,
    directions: Vec<Vec<Vec<f64>>>,
}

impl Scripted {
    pub fn new(cfg: BackboneConfig) -> Result<Self> {
        cfg.validate()?;
        let profile = cfg
            .profile
            .clone()
            .ok_or_else(|| Error::InvalidConfig("scripted backbone needs a profile".into()))?;
        profile.validate()?;
        let registry = FamilyRegistry::new(
            SCRIPTED_FAMILIES.iter().map(|f| (FamilyId::new(*f), 1)).collect(),
            cfg.tie_groups.clone(),
        )?;
        let (n, d, layers) = (cfg.tokens, cfg.channels, cfg.layers);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5c41_0000_0000_0003);
        let mut amplitudes = Vec::with_capacity(layers);
        let mut directions = Vec::with_capacity(layers);
        let mut schedules = Vec::with_capacity(layers);
        for l in 0..layers {
            let mut a = Vec::new();
            let mut u = Vec::new();
            let mut s = Vec::new();
            for f in SCRIPTED_FAMILIES {
                a.push(rng.random_range(0.5..1.5));
                u.push((0..n).map(|_| rng.random_range(0.5..1.5)).collect());
                s.push(profile.schedule_for(f, l));
            }
            amplitudes.push(a);
            directions.push(u);
            schedules.push(s);
        }
        let flops = FlopTable {
            per_hook: vec![vec![2 * (n * d * d) as u64]; SCRIPTED_FAMILIES.len()],
            step_overhead: 2 * (n * d) as u64,
        };
        Ok(Self {
            cfg,
            registry,
            flops,
            profile,
            schedules,
            amplitudes,
            directions,
        })
    }

    pub fn profile(&self) -> &ScriptedProfile {
        &self.profile
    }

    /// `g_k` for `k = 0..count`.
    fn increments(&self, layer: usize, family: usize, count: usize) -> Vec<f64> {
        let sched = self.schedules[layer][family];
        let mut g = Vec::with_capacity(count);
        let mut cur = 1.0;
        for k in 0..count {
            if k > 0 {
                cur *= sched.at(k);
            }
            g.push(cur);
        }
        g
    }

    /// Module output of site `(layer, family)` at step `t`; independent of
    /// the latent and the class.
    pub fn site_output(&self, layer: usize, family: usize, t: usize) -> TokenTensor {
        let (n, d) = (self.cfg.tokens, self.cfg.channels);
        let a = self.amplitudes[layer][family];
        let u = &self.directions[layer][family];
        let mut z = TokenTensor::zeros(n, d);
        let data = z.data_mut();
        for (k, g) in self.increments(layer, family, t).into_iter().enumerate() {
            let col = k % d;
            let scale = a * g;
            for (row, &un) in u.iter().enumerate() {
                data[row * d + col] += scale * un;
            }
        }
        z
    }

    fn site_count(&self) -> f64 {
        (self.cfg.layers * self.registry.len()) as f64
    }
}

impl Backbone for Scripted {
    fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    fn registry(&self) -> &FamilyRegistry {
        &self.registry
    }

    fn flop_table(&self) -> &FlopTable {
        &self.flops
    }

    /// `z_t` is the mean of all (computed or reused) module outputs.
    fn forward_step(
        &self,
        x: &TokenTensor,
        cond: usize,
        t: usize,
        gate: &GateDirective,
        cache: &mut ModuleCache,
    ) -> Result<StepOutput> {
        check_input(self, x, cond, Some(gate), Some(cache), t)?;
        let mut acc = TokenTensor::zeros(self.cfg.tokens, self.cfg.channels);
        let mut touched = Vec::with_capacity(self.cfg.layers * self.registry.len());
        for l in 0..self.cfg.layers {
            for f in 0..self.registry.len() {
                gated_hook(&mut acc, (l, f, 0), gate.action(l, f), t, &self.registry, cache, &mut touched, |_| {
                    self.site_output(l, f, t)
                })?;
            }
        }
        Ok(StepOutput {
            z: acc.scaled(1.0 / self.site_count()),
            touched,
        })
    }

    fn reference_forward(&self, x: &TokenTensor, cond: usize, t: usize) -> Result<TokenTensor> {
        check_input(self, x, cond, None, None, t)?;
        let mut acc = TokenTensor::zeros(self.cfg.tokens, self.cfg.channels);
        for l in 0..self.cfg.layers {
            for f in 0..self.registry.len() {
                acc.add_assign(&self.site_output(l, f, t))?;
            }
        }
        Ok(acc.scaled(1.0 / self.site_count()))
    }

    fn parameters(&self) -> Vec<&TokenTensor> {
        Vec::new()
    }
}

/// Analytic change-rate matrices of a scripted profile: `r_{l,s}(t)` at
/// every interior step, undefined at `t = 0` and `t = T - 1`.
pub fn scripted_rates(
    profile: &ScriptedProfile,
    registry: &FamilyRegistry,
    steps: usize,
    layers: usize,
) -> Result<Vec<RateMatrix>> {
    profile.validate()?;
    registry
        .families()
        .iter()
        .map(|fam| {
            let mut m = RateMatrix::undefined(fam.clone(), steps, layers);
            for t in 1..steps.saturating_sub(1) {
                for l in 0..layers {
                    m.set(t, l, profile.schedule_for(fam.as_str(), l).at(t));
                }
            }
            Ok(m)
        })
        .collect()
}
