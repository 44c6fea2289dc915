//! From rate statistics to a binary reuse plan.
//!
//! Phase 1 cuts each family's pooled rates at a quantile and marks an entry
//! reusable when the rate governing it falls at or below the cut. Phase 2
//! re-runs full compute while tracking what the plan would have served
//! (shadow sequences) and drops entries whose chained-reuse rate exceeds the
//! frozen Phase-1 cut.

use std::collections::BTreeMap;

use serde::de::Error as _;
use serde::ser::SerializeMap;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::backbone::{Backbone, FamilyId, FamilyRegistry};
use crate::error::{Error, Result};
use crate::rates::{
    collect_rates, collect_shadow_rates, CalibrationOptions, CalibrationStats, InputRates, RateMatrix,
    RatePooling, ReuseMask, StepRateVector,
};
use crate::sampler::{SampleInput, SampleSchedule};

/// Rounding guard for `ceil(tau * n)`, so that e.g. `0.1 * 30` lands on 3.
const CEIL_GUARD: f64 = 1e-9;

fn guarded_ceil(x: f64) -> usize {
    (x - CEIL_GUARD).ceil().max(0.0) as usize
}

/// Per-family quantile fractions plus the step and warm-up fractions.
///
/// Serialized as a flat object with keys `tau_step`, `tau_warmup` and
/// `tau_<family>`. `tau_attn` is accepted as an alias of `tau_mhsa`.
#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdSet {
    pub tau_step: f64,
    pub tau_warmup: f64,
    pub families: BTreeMap<FamilyId, f64>,
}

impl ThresholdSet {
    pub fn new(tau_step: f64, tau_warmup: f64, families: &[(&str, f64)]) -> Self {
        Self {
            tau_step,
            tau_warmup,
            families: families.iter().map(|(f, t)| (FamilyId::new(*f), *t)).collect(),
        }
    }

    /// All fractions zero for the given families: a full-compute plan.
    pub fn zeros(registry: &FamilyRegistry) -> Self {
        Self {
            tau_step: 0.0,
            tau_warmup: 0.0,
            families: registry.families().iter().map(|f| (f.clone(), 0.0)).collect(),
        }
    }

    pub fn tau(&self, family: &str) -> Option<f64> {
        self.families
            .iter()
            .find(|(f, _)| f.as_str() == family)
            .map(|(_, t)| *t)
    }

    /// Checks ranges, coverage of `registry`, and equality within ties.
    pub fn validate(&self, registry: &FamilyRegistry) -> Result<()> {
        let check = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::InvalidThresholds(format!("{name} = {v} is outside [0, 1]")))
            }
        };
        check("tau_step", self.tau_step)?;
        check("tau_warmup", self.tau_warmup)?;
        for (f, v) in &self.families {
            check(&format!("tau_{f}"), *v)?;
            if registry.index_of(f.as_str()).is_none() {
                return Err(Error::InvalidThresholds(format!(
                    "tau_{f} names a family the backbone does not have"
                )));
            }
        }
        for f in registry.families() {
            if !self.families.contains_key(f) {
                return Err(Error::InvalidThresholds(format!("missing tau_{f}")));
            }
        }
        for group in registry.tie_groups() {
            let vals: Vec<f64> = group.iter().map(|f| self.families[f]).collect();
            if vals.iter().any(|v| *v != vals[0]) {
                let names: Vec<String> = group.iter().map(|f| f.to_string()).collect();
                return Err(Error::InvalidThresholds(format!(
                    "tied families {} carry different thresholds {vals:?}",
                    names.join(", ")
                )));
            }
        }
        Ok(())
    }

    /// Number of leading steps forced to full compute.
    pub fn warmup_steps(&self, steps: usize) -> usize {
        guarded_ceil(self.tau_warmup * steps as f64).min(steps)
    }
}

impl Serialize for ThresholdSet {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let mut m = s.serialize_map(Some(2 + self.families.len()))?;
        m.serialize_entry("tau_step", &self.tau_step)?;
        m.serialize_entry("tau_warmup", &self.tau_warmup)?;
        for (f, v) in &self.families {
            m.serialize_entry(&format!("tau_{f}"), v)?;
        }
        m.end()
    }
}

impl<'de> Deserialize<'de> for ThresholdSet {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let raw = BTreeMap::<String, f64>::deserialize(d)?;
        let mut tau_step = None;
        let mut tau_warmup = None;
        let mut families = BTreeMap::new();
        for (k, v) in raw {
            let name = k
                .strip_prefix("tau_")
                .ok_or_else(|| D::Error::custom(format!("unexpected threshold key `{k}`")))?;
            match name {
                "step" => tau_step = Some(v),
                "warmup" => tau_warmup = Some(v),
                "" => return Err(D::Error::custom("empty family name in `tau_`")),
                other => {
                    let fam = FamilyId::new(if other == "attn" { "mhsa" } else { other });
                    if let Some(prev) = families.insert(fam.clone(), v) {
                        if prev != v {
                            return Err(D::Error::custom(format!(
                                "tau_attn and tau_mhsa disagree ({prev} vs {v})"
                            )));
                        }
                    }
                }
            }
        }
        Ok(Self {
            tau_step: tau_step.ok_or_else(|| D::Error::missing_field("tau_step"))?,
            tau_warmup: tau_warmup.unwrap_or(0.0),
            families,
        })
    }
}

/// Nearest-rank quantile: the `ceil(tau * n)`-th smallest value (1-based).
/// `tau = 0` yields `-inf`, which no rate satisfies.
pub fn quantile_cut(values: &[f64], tau: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::InvalidArgument("quantile of an empty set".into()));
    }
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::InvalidThresholds(format!("quantile fraction {tau} outside [0, 1]")));
    }
    if tau == 0.0 {
        return Ok(f64::NEG_INFINITY);
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let k = guarded_ceil(tau * sorted.len() as f64).clamp(1, sorted.len());
    Ok(sorted[k - 1])
}

/// Index of the rate that governs the reuse decision at step `t`.
///
/// `rho_{t-1}` compares `|Z_t - Z_{t-1}|` with the difference before it, so
/// a small value says `Z_{t-1}` can stand in for `Z_t`.
pub fn governing_rate_index(t: usize) -> Option<usize> {
    t.checked_sub(1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanPhase {
    Initial,
    Corrected,
}

/// Quantile cut values. `-inf` means nothing is reused.
#[derive(Debug, Clone, PartialEq)]
pub struct CutValues {
    pub step: f64,
    pub families: BTreeMap<FamilyId, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub backbone: String,
    pub schedule_hash: String,
    pub calibration_inputs: Vec<String>,
    pub phase: PlanPhase,
}

impl Provenance {
    pub fn new(backbone: &dyn Backbone, schedule: &SampleSchedule, inputs: &[SampleInput]) -> Self {
        Self {
            backbone: backbone.config().id(),
            schedule_hash: schedule.digest(),
            calibration_inputs: inputs.iter().map(SampleInput::describe).collect(),
            phase: PlanPhase::Initial,
        }
    }

    fn unknown() -> Self {
        Self {
            backbone: String::new(),
            schedule_hash: String::new(),
            calibration_inputs: Vec::new(),
            // an all-zero plan is left unchanged by correction
            phase: PlanPhase::Corrected,
        }
    }
}

/// Binary reuse plan: `C[t, l, f]` (1 = reuse the cached output of that
/// site) and the step gate `c_step[t]` (1 = reuse the whole network output).
#[derive(Debug, Clone, PartialEq)]
pub struct CachePlan {
    steps: usize,
    layers: usize,
    registry: FamilyRegistry,
    sites: Vec<bool>,
    step_gate: Vec<bool>,
    pub cuts: CutValues,
    pub thresholds: ThresholdSet,
    pub provenance: Provenance,
}

impl CachePlan {
    /// Full-compute plan.
    pub fn zeros(steps: usize, layers: usize, registry: FamilyRegistry) -> Self {
        let thresholds = ThresholdSet::zeros(&registry);
        let cuts = CutValues {
            step: f64::NEG_INFINITY,
            families: registry
                .families()
                .iter()
                .map(|f| (f.clone(), f64::NEG_INFINITY))
                .collect(),
        };
        Self {
            steps,
            layers,
            sites: vec![false; steps * layers * registry.len()],
            step_gate: vec![false; steps],
            registry,
            cuts,
            thresholds,
            provenance: Provenance::unknown(),
        }
    }

    /// Full-compute plan shaped for `backbone` and `schedule`.
    pub fn zeros_for(backbone: &dyn Backbone, schedule: &SampleSchedule) -> Self {
        let mut p = Self::zeros(schedule.steps(), backbone.layers(), backbone.registry().clone());
        p.provenance = Provenance {
            phase: PlanPhase::Corrected,
            ..Provenance::new(backbone, schedule, &[])
        };
        p
    }

    /// Assembles a plan from its parts and checks every invariant.
    /// `sites` is `[t][l][f]` row-major.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        steps: usize,
        layers: usize,
        registry: FamilyRegistry,
        sites: Vec<bool>,
        step_gate: Vec<bool>,
        cuts: CutValues,
        thresholds: ThresholdSet,
        provenance: Provenance,
    ) -> Result<Self> {
        let plan = Self {
            steps,
            layers,
            registry,
            sites,
            step_gate,
            cuts,
            thresholds,
            provenance,
        };
        plan.validate()?;
        Ok(plan)
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn registry(&self) -> &FamilyRegistry {
        &self.registry
    }

    pub fn families(&self) -> &[FamilyId] {
        self.registry.families()
    }

    #[inline]
    fn idx(&self, t: usize, l: usize, f: usize) -> usize {
        (t * self.layers + l) * self.registry.len() + f
    }

    pub fn site(&self, t: usize, l: usize, f: usize) -> bool {
        self.sites[self.idx(t, l, f)]
    }

    pub fn set_site(&mut self, t: usize, l: usize, f: usize, reuse: bool) {
        let i = self.idx(t, l, f);
        self.sites[i] = reuse;
    }

    pub fn step(&self, t: usize) -> bool {
        self.step_gate[t]
    }

    pub fn set_step(&mut self, t: usize, reuse: bool) {
        self.step_gate[t] = reuse;
    }

    pub fn step_gate(&self) -> &[bool] {
        &self.step_gate
    }

    pub fn warmup_steps(&self) -> usize {
        self.thresholds.warmup_steps(self.steps)
    }

    /// First step, last step and warm-up steps always compute.
    pub fn is_forced(&self, t: usize) -> bool {
        t == 0 || t + 1 >= self.steps || t < self.warmup_steps()
    }

    /// Clears every entry on forced steps.
    pub fn apply_forcing(&mut self) {
        for t in 0..self.steps {
            if self.is_forced(t) {
                self.step_gate[t] = false;
                for l in 0..self.layers {
                    for f in 0..self.registry.len() {
                        self.set_site(t, l, f, false);
                    }
                }
            }
        }
    }

    /// Reused `(t, l)` entries of family `f`.
    pub fn cached_sites(&self, f: usize) -> usize {
        let fams = self.registry.len();
        self.sites.iter().skip(f).step_by(fams).filter(|b| **b).count()
    }

    pub fn cached_total(&self) -> usize {
        self.sites.iter().filter(|b| **b).count()
    }

    pub fn step_skips(&self) -> Vec<usize> {
        (0..self.steps).filter(|&t| self.step_gate[t]).collect()
    }

    /// Reused fraction of family `f`'s `(t, l)` entries.
    pub fn family_fraction(&self, f: usize) -> f64 {
        self.cached_sites(f) as f64 / (self.steps * self.layers) as f64
    }

    pub fn check_dims(&self, backbone: &dyn Backbone, schedule: &SampleSchedule) -> Result<()> {
        if self.steps != schedule.steps()
            || self.layers != backbone.layers()
            || self.registry.families() != backbone.registry().families()
        {
            return Err(Error::DimensionMismatch(format!(
                "plan is T={} L={} families {:?}; run is T={} L={} families {:?}",
                self.steps,
                self.layers,
                self.registry.families(),
                schedule.steps(),
                backbone.layers(),
                backbone.registry().families()
            )));
        }
        Ok(())
    }

    /// Checks every structural invariant; the error names the violated
    /// rule and the offending field.
    pub fn validate(&self) -> Result<()> {
        if self.steps < SampleSchedule::MIN_STEPS {
            return Err(Error::invariant("min_steps", "dims.steps"));
        }
        if self.layers == 0 {
            return Err(Error::invariant("positive_layers", "dims.layers"));
        }
        if self.sites.len() != self.steps * self.layers * self.registry.len()
            || self.step_gate.len() != self.steps
        {
            return Err(Error::invariant("dims_consistent", "grids"));
        }
        self.thresholds
            .validate(&self.registry)
            .map_err(|e| Error::invariant(format!("thresholds_valid ({e})"), "thresholds"))?;
        if self.cuts.families.len() != self.registry.len()
            || self.registry.families().iter().any(|f| !self.cuts.families.contains_key(f))
        {
            return Err(Error::invariant("cuts_cover_families", "cut_values.families"));
        }
        let cuts = std::iter::once(self.cuts.step).chain(self.cuts.families.values().copied());
        if cuts.into_iter().any(|c| c.is_nan() || c == f64::INFINITY) {
            return Err(Error::invariant("cuts_finite_or_minus_inf", "cut_values"));
        }
        for t in 0..self.steps {
            if !self.is_forced(t) {
                continue;
            }
            let rule = if t == 0 {
                "first_step_computes"
            } else if t + 1 == self.steps {
                "last_step_computes"
            } else {
                "warmup_computes"
            };
            if self.step_gate[t] {
                return Err(Error::invariant(rule, format!("step_gate[{t}]")));
            }
            for l in 0..self.layers {
                for (f, fam) in self.registry.families().iter().enumerate() {
                    if self.site(t, l, f) {
                        return Err(Error::invariant(rule, format!("grids.{fam}[{t}][{l}]")));
                    }
                }
            }
        }
        Ok(())
    }

    /// The plan as a shadow mask for the correction pass.
    pub fn reuse_mask(&self) -> ReuseMask {
        let mut m = ReuseMask::none(self.steps, self.layers, self.registry.len());
        for t in 0..self.steps {
            m.set_step(t, self.step_gate[t]);
            for l in 0..self.layers {
                for f in 0..self.registry.len() {
                    m.set_site(t, l, f, self.site(t, l, f));
                }
            }
        }
        m
    }
}

/// Quantile cuts over the pooled rates. Tied families pool their entries
/// together and share one cut.
pub fn compute_cuts(
    stats: &CalibrationStats,
    thresholds: &ThresholdSet,
    registry: &FamilyRegistry,
    pooling: RatePooling,
) -> Result<CutValues> {
    thresholds.validate(registry)?;
    let sources: Vec<&InputRates> = match pooling {
        RatePooling::Mean => vec![&stats.mean],
        RatePooling::Concatenate => stats.per_input.iter().collect(),
    };
    cuts_from(&sources, thresholds, registry)
}

fn cuts_from(sources: &[&InputRates], thresholds: &ThresholdSet, registry: &FamilyRegistry) -> Result<CutValues> {
    let mut families = BTreeMap::new();
    for (f, fam) in registry.families().iter().enumerate() {
        let tau = thresholds.families[fam];
        let mut pool = Vec::new();
        for src in sources {
            for g in registry.tied_with(f) {
                pool.extend(src.layer[g].defined_values());
            }
        }
        families.insert(fam.clone(), cut_or_none(&pool, tau)?);
    }
    let mut pool = Vec::new();
    for src in sources {
        pool.extend(src.step.defined_values());
    }
    Ok(CutValues {
        step: cut_or_none(&pool, thresholds.tau_step)?,
        families,
    })
}

fn cut_or_none(pool: &[f64], tau: f64) -> Result<f64> {
    if tau == 0.0 || pool.is_empty() {
        Ok(f64::NEG_INFINITY)
    } else {
        quantile_cut(pool, tau)
    }
}

fn check_rate_dims(rates: &[RateMatrix], step: &StepRateVector, registry: &FamilyRegistry) -> Result<(usize, usize)> {
    if rates.len() != registry.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} rate matrices for {} families",
            rates.len(),
            registry.len()
        )));
    }
    let (steps, layers) = (step.steps(), rates[0].layers());
    for (m, fam) in rates.iter().zip(registry.families()) {
        if &m.family != fam || m.steps() != steps || m.layers() != layers {
            return Err(Error::DimensionMismatch(format!(
                "rate matrix `{}` ({}x{}) does not fit family `{fam}` at {steps}x{layers}",
                m.family,
                m.steps(),
                m.layers()
            )));
        }
    }
    Ok((steps, layers))
}

/// Phase 1 with explicit cut values.
pub fn initial_plan_with_cuts(
    rates: &[RateMatrix],
    step_rates: &StepRateVector,
    thresholds: &ThresholdSet,
    registry: &FamilyRegistry,
    cuts: CutValues,
) -> Result<CachePlan> {
    thresholds.validate(registry)?;
    let (steps, layers) = check_rate_dims(rates, step_rates, registry)?;
    let mut plan = CachePlan::zeros(steps, layers, registry.clone());
    plan.thresholds = thresholds.clone();
    for t in 0..steps {
        let Some(r) = governing_rate_index(t) else { continue };
        if step_rates.get(r).is_some_and(|v| v <= cuts.step) {
            plan.set_step(t, true);
        }
        for (f, fam) in registry.families().iter().enumerate() {
            let cut = cuts.families[fam];
            for l in 0..layers {
                if rates[f].get(r, l).is_some_and(|v| v <= cut) {
                    plan.set_site(t, l, f, true);
                }
            }
        }
    }
    plan.cuts = cuts;
    plan.provenance.phase = PlanPhase::Initial;
    plan.apply_forcing();
    Ok(plan)
}

/// Phase 1: cuts from the given (already averaged) rates, then thresholding.
pub fn initial_plan(
    rates: &[RateMatrix],
    step_rates: &StepRateVector,
    thresholds: &ThresholdSet,
    registry: &FamilyRegistry,
) -> Result<CachePlan> {
    thresholds.validate(registry)?;
    check_rate_dims(rates, step_rates, registry)?;
    let src = InputRates {
        layer: rates.to_vec(),
        step: step_rates.clone(),
        mse_maps: Vec::new(),
        cos_maps: Vec::new(),
    };
    let cuts = cuts_from(&[&src], thresholds, registry)?;
    initial_plan_with_cuts(rates, step_rates, thresholds, registry, cuts)
}

/// How the correction pass may change the initial plan.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrectionMode {
    /// Keep an entry only if its shadow rate also passes the cut.
    #[default]
    RemoveOnly,
    /// Rebuild every entry from the shadow rates; entries may be added.
    Rethreshold,
}

/// Applies shadow rates (averaged over inputs) to `plan0` against its
/// frozen cuts.
pub fn correct_from_rates(plan0: &CachePlan, shadow: &InputRates, mode: CorrectionMode) -> Result<CachePlan> {
    check_rate_dims(&shadow.layer, &shadow.step, plan0.registry())?;
    if shadow.step.steps() != plan0.steps() || shadow.layer[0].layers() != plan0.layers() {
        return Err(Error::DimensionMismatch("shadow rates do not match the plan".into()));
    }
    let mut plan = plan0.clone();
    let keep = |old: bool, rate: Option<f64>, cut: f64| {
        let pass = rate.is_some_and(|v| v <= cut);
        match mode {
            CorrectionMode::RemoveOnly => old && pass,
            CorrectionMode::Rethreshold => pass,
        }
    };
    for t in 0..plan.steps() {
        let r = governing_rate_index(t);
        let rate_step = r.and_then(|r| shadow.step.get(r));
        plan.set_step(t, keep(plan0.step(t), rate_step, plan0.cuts.step));
        for (f, fam) in plan0.families().iter().enumerate() {
            let cut = plan0.cuts.families[fam];
            for l in 0..plan.layers() {
                let rate = r.and_then(|r| shadow.layer[f].get(r, l));
                plan.set_site(t, l, f, keep(plan0.site(t, l, f), rate, cut));
            }
        }
    }
    plan.apply_forcing();
    plan.provenance.phase = PlanPhase::Corrected;
    Ok(plan)
}

/// Phase 2: shadow-rate calibration under `plan0`, then correction.
pub fn resample_correct(
    backbone: &dyn Backbone,
    schedule: &SampleSchedule,
    inputs: &[SampleInput],
    plan0: &CachePlan,
    opts: &PlannerOptions,
) -> Result<CachePlan> {
    plan0.check_dims(backbone, schedule)?;
    plan0.validate()?;
    let shadow = collect_shadow_rates(backbone, schedule, inputs, &plan0.reuse_mask(), &opts.calibration)?;
    correct_from_rates(plan0, &shadow.mean, opts.correction)
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PlannerOptions {
    pub calibration: CalibrationOptions,
    pub pooling: RatePooling,
    pub correction: CorrectionMode,
}

/// Both phases' plans plus the Phase-1 statistics.
#[derive(Debug, Clone)]
pub struct Calibration {
    pub initial: CachePlan,
    pub corrected: CachePlan,
    pub stats: CalibrationStats,
}

/// Phase 1 only.
pub fn calibrate_initial(
    backbone: &dyn Backbone,
    schedule: &SampleSchedule,
    inputs: &[SampleInput],
    thresholds: &ThresholdSet,
    opts: &PlannerOptions,
) -> Result<(CachePlan, CalibrationStats)> {
    let registry = backbone.registry();
    thresholds.validate(registry)?;
    let stats = collect_rates(backbone, schedule, inputs, &opts.calibration)?;
    let cuts = compute_cuts(&stats, thresholds, registry, opts.pooling)?;
    let mut plan = initial_plan_with_cuts(&stats.mean.layer, &stats.mean.step, thresholds, registry, cuts)?;
    plan.provenance = Provenance::new(backbone, schedule, inputs);
    Ok((plan, stats))
}

/// Phase 1 followed by Phase 2 on the same inputs.
pub fn calibrate(
    backbone: &dyn Backbone,
    schedule: &SampleSchedule,
    inputs: &[SampleInput],
    thresholds: &ThresholdSet,
    opts: &PlannerOptions,
) -> Result<Calibration> {
    let (initial, stats) = calibrate_initial(backbone, schedule, inputs, thresholds, opts)?;
    let corrected = resample_correct(backbone, schedule, inputs, &initial, opts)?;
    Ok(Calibration {
        initial,
        corrected,
        stats,
    })
}
