//! Change-rate statistics.
//!
//! For a site output sequence `Z_0 .. Z_{T-1}` the change rate at step `t` is
//!
//! ```text
//! rho_t = |Z_{t+1} - Z_t|_1 / (|Z_t - Z_{t-1}|_1 + eps)
//! ```
//!
//! defined for `1 <= t <= T - 2`. The same formula over the network output
//! gives the step rate. Calibration keeps one rolling previous tensor per
//! site plus a handful of per-step scalars; full traces are never stored.
//!
//! The collector can also maintain a *shadow* sequence in which some steps
//! hold the last kept value instead of the fresh one (chained reuse). The
//! numerator then measures `|Z_{t+1} - shadow_t|_1` while the denominator
//! stays the fresh difference. With no shadow steps both coincide.

mod export;

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, FamilyId};
use crate::error::{Error, Result};
use crate::sampler::{run_trajectory, FullCompute, RunStats, SampleInput, SampleSchedule, StepExecutor};
use crate::tensor::{cosine_sim, l1_diff_norm, mse, TokenTensor};

pub use export::{
    export_heatmap, heatmap_pixels, load_rate_csv, read_rate_csv, save_rate_csv, write_rate_csv,
    HeatmapFiles, HeatmapMode,
};

/// Denominator guard of the change rate.
pub const RATE_EPS: f64 = 1e-12;

/// `d_next / (d_prev + eps)`, with `0` when both differences vanish.
pub fn rho_layer(d_next: f64, d_prev: f64, eps: f64) -> f64 {
    if d_next == 0.0 && d_prev == 0.0 {
        0.0
    } else {
        d_next / (d_prev + eps)
    }
}

/// `steps x layers` grid of one family's rates. `None` marks entries where
/// the rate is undefined (the first and last step).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateMatrix {
    pub family: FamilyId,
    steps: usize,
    layers: usize,
    /// Row-major `[t][l]`.
    values: Vec<Option<f64>>,
}

impl RateMatrix {
    pub fn undefined(family: FamilyId, steps: usize, layers: usize) -> Self {
        Self {
            family,
            steps,
            layers,
            values: vec![None; steps * layers],
        }
    }

    /// Every entry defined, `value(t, l)`.
    pub fn from_fn(family: FamilyId, steps: usize, layers: usize, mut value: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Self::undefined(family, steps, layers);
        for t in 0..steps {
            for l in 0..layers {
                m.set(t, l, value(t, l));
            }
        }
        m
    }

    /// Interior steps defined by `value(t, l)`, boundaries undefined.
    pub fn interior(family: FamilyId, steps: usize, layers: usize, mut value: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Self::undefined(family, steps, layers);
        for t in 1..steps.saturating_sub(1) {
            for l in 0..layers {
                m.set(t, l, value(t, l));
            }
        }
        m
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn get(&self, t: usize, l: usize) -> Option<f64> {
        self.values[t * self.layers + l]
    }

    pub fn set(&mut self, t: usize, l: usize, v: f64) {
        self.values[t * self.layers + l] = Some(v);
    }

    pub fn unset(&mut self, t: usize, l: usize) {
        self.values[t * self.layers + l] = None;
    }

    pub fn is_defined(&self, t: usize, l: usize) -> bool {
        self.get(t, l).is_some()
    }

    /// Defined values in `(t, l)` order.
    pub fn defined_values(&self) -> Vec<f64> {
        self.values.iter().flatten().copied().collect()
    }

    pub fn defined_count(&self) -> usize {
        self.values.iter().filter(|v| v.is_some()).count()
    }

    /// Value used for display: undefined entries are painted as `1`.
    pub fn painted(&self, t: usize, l: usize) -> f64 {
        self.get(t, l).unwrap_or(1.0)
    }

    fn same_layout(&self, other: &Self) -> Result<()> {
        if self.family != other.family {
            return Err(Error::DimensionMismatch(format!(
                "rate matrices belong to different families (`{}` vs `{}`)",
                self.family, other.family
            )));
        }
        if (self.steps, self.layers) != (other.steps, other.layers) {
            return Err(Error::DimensionMismatch(format!(
                "rate matrix `{}` is {}x{}, other is {}x{}",
                self.family, self.steps, self.layers, other.steps, other.layers
            )));
        }
        Ok(())
    }

    /// Entrywise arithmetic mean. An entry is defined only if it is defined
    /// in every input.
    pub fn mean(mats: &[RateMatrix]) -> Result<RateMatrix> {
        let first = mats
            .first()
            .ok_or_else(|| Error::InvalidArgument("mean of zero rate matrices".into()))?;
        for m in &mats[1..] {
            first.same_layout(m)?;
        }
        let k = mats.len() as f64;
        let mut out = RateMatrix::undefined(first.family.clone(), first.steps, first.layers);
        for i in 0..first.values.len() {
            let mut sum = 0.0;
            let mut all = true;
            for m in mats {
                match m.values[i] {
                    Some(v) => sum += v,
                    None => all = false,
                }
            }
            if all {
                out.values[i] = Some(sum / k);
            }
        }
        Ok(out)
    }
}

/// Length-`T` step rates of the network output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRateVector {
    values: Vec<Option<f64>>,
}

impl StepRateVector {
    pub fn undefined(steps: usize) -> Self {
        Self {
            values: vec![None; steps],
        }
    }

    pub fn interior(steps: usize, mut value: impl FnMut(usize) -> f64) -> Self {
        let mut v = Self::undefined(steps);
        for t in 1..steps.saturating_sub(1) {
            v.set(t, value(t));
        }
        v
    }

    pub fn steps(&self) -> usize {
        self.values.len()
    }

    pub fn get(&self, t: usize) -> Option<f64> {
        self.values[t]
    }

    pub fn set(&mut self, t: usize, v: f64) {
        self.values[t] = Some(v);
    }

    pub fn defined_values(&self) -> Vec<f64> {
        self.values.iter().flatten().copied().collect()
    }

    /// As a one-layer [`RateMatrix`] named `step`, for export.
    pub fn as_matrix(&self) -> RateMatrix {
        RateMatrix {
            family: FamilyId::new("step"),
            steps: self.values.len(),
            layers: 1,
            values: self.values.clone(),
        }
    }

    pub fn mean(vecs: &[StepRateVector]) -> Result<StepRateVector> {
        let mats: Vec<RateMatrix> = vecs.iter().map(|v| v.as_matrix()).collect();
        Ok(StepRateVector {
            values: RateMatrix::mean(&mats)?.values,
        })
    }
}

/// Mean squared difference over entries defined in both matrices.
pub fn compare_rate_matrices(a: &RateMatrix, b: &RateMatrix) -> Result<f64> {
    a.same_layout(b)?;
    let mut sum = 0.0;
    let mut n = 0usize;
    for (x, y) in a.values.iter().zip(&b.values) {
        if let (Some(x), Some(y)) = (x, y) {
            sum += (x - y) * (x - y);
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::InvalidArgument(format!(
            "rate matrices for `{}` share no defined entries",
            a.family
        )));
    }
    Ok(sum / n as f64)
}

/// Statistic turned into a per-entry rate. Only [`RateOperator::ChangeRate`]
/// is used for planning by default; the others exist for ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RateOperator {
    /// `|Z_{t+1} - Z_t|_1 / (|Z_t - Z_{t-1}|_1 + eps)`
    #[default]
    ChangeRate,
    /// `mse(Z_{t+1}, Z_t)`
    Mse,
    /// `1 - cos(Z_{t+1}, Z_t)`
    CosineDistance,
    /// `|Z_{t+1}|_1 / (|Z_t|_1 + eps)`
    NormRatio,
}

impl RateOperator {
    pub const ALL: [RateOperator; 4] = [
        RateOperator::ChangeRate,
        RateOperator::Mse,
        RateOperator::CosineDistance,
        RateOperator::NormRatio,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            RateOperator::ChangeRate => "change_rate",
            RateOperator::Mse => "mse",
            RateOperator::CosineDistance => "cosine_distance",
            RateOperator::NormRatio => "norm_ratio",
        }
    }
}

impl fmt::Display for RateOperator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RateOperator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|op| op.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown rate operator `{s}`")))
    }
}

/// How per-input rates are pooled before quantile cuts are taken.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RatePooling {
    /// Average the matrices entrywise, then pool the averaged entries.
    #[default]
    Mean,
    /// Pool every input's entries. Decisions still use the averaged matrix.
    Concatenate,
}

/// Steps at which a shadow sequence keeps its previous value.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReuseMask {
    steps: usize,
    layers: usize,
    families: usize,
    sites: Vec<bool>,
    step: Vec<bool>,
}

impl ReuseMask {
    pub fn none(steps: usize, layers: usize, families: usize) -> Self {
        Self {
            steps,
            layers,
            families,
            sites: vec![false; steps * layers * families],
            step: vec![false; steps],
        }
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.steps, self.layers, self.families)
    }

    pub fn site(&self, t: usize, l: usize, f: usize) -> bool {
        self.sites[(t * self.layers + l) * self.families + f]
    }

    pub fn set_site(&mut self, t: usize, l: usize, f: usize, reuse: bool) {
        self.sites[(t * self.layers + l) * self.families + f] = reuse;
    }

    pub fn step(&self, t: usize) -> bool {
        self.step[t]
    }

    pub fn set_step(&mut self, t: usize, reuse: bool) {
        self.step[t] = reuse;
    }
}

/// Per-step scalars of one site. Index `t` holds quantities involving
/// `Z_t` and its predecessor; index 0 of the difference series is 0.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SiteTrace {
    /// `|Z_t - Z_{t-1}|_1`
    pub fresh_l1: Vec<f64>,
    /// `mse(Z_t, Z_{t-1})`
    pub fresh_mse: Vec<f64>,
    /// `cos(Z_t, Z_{t-1})`
    pub fresh_cos: Vec<f64>,
    /// `|Z_t - shadow_{t-1}|_1`
    pub shadow_l1: Vec<f64>,
    pub shadow_mse: Vec<f64>,
    pub shadow_cos: Vec<f64>,
    /// `|Z_t|_1`
    pub norm: Vec<f64>,
    /// `|shadow_t|_1`
    pub shadow_norm: Vec<f64>,
}

impl SiteTrace {
    fn with_steps(steps: usize) -> Self {
        let z = vec![0.0; steps];
        Self {
            fresh_l1: z.clone(),
            fresh_mse: z.clone(),
            fresh_cos: z.clone(),
            shadow_l1: z.clone(),
            shadow_mse: z.clone(),
            shadow_cos: z.clone(),
            norm: z.clone(),
            shadow_norm: z,
        }
    }

    pub fn steps(&self) -> usize {
        self.norm.len()
    }

    /// Rate at interior step `t`.
    pub fn rate(&self, op: RateOperator, t: usize, eps: f64) -> f64 {
        match op {
            RateOperator::ChangeRate => rho_layer(self.shadow_l1[t + 1], self.fresh_l1[t], eps),
            RateOperator::Mse => self.shadow_mse[t + 1],
            RateOperator::CosineDistance => 1.0 - self.shadow_cos[t + 1],
            RateOperator::NormRatio => rho_layer(self.norm[t + 1], self.shadow_norm[t], eps),
        }
    }
}

/// Online recorder for one site: one previous tensor, one shadow tensor.
#[derive(Debug)]
struct SiteTracker {
    trace: SiteTrace,
    prev: Option<TokenTensor>,
    shadow: Option<TokenTensor>,
    /// Shadow currently differs from `prev` (it kept an older value).
    stale: bool,
}

impl SiteTracker {
    fn new(steps: usize) -> Self {
        Self {
            trace: SiteTrace::with_steps(steps),
            prev: None,
            shadow: None,
            stale: false,
        }
    }

    fn push(&mut self, t: usize, z: TokenTensor, keep_shadow: bool) -> Result<()> {
        let tr = &mut self.trace;
        if let Some(prev) = &self.prev {
            tr.fresh_l1[t] = l1_diff_norm(&z, prev)?;
            tr.fresh_mse[t] = mse(&z, prev)?;
            tr.fresh_cos[t] = cosine_sim(&z, prev)?;
            match (&self.shadow, self.stale) {
                (Some(sh), true) => {
                    tr.shadow_l1[t] = l1_diff_norm(&z, sh)?;
                    tr.shadow_mse[t] = mse(&z, sh)?;
                    tr.shadow_cos[t] = cosine_sim(&z, sh)?;
                }
                _ => {
                    tr.shadow_l1[t] = tr.fresh_l1[t];
                    tr.shadow_mse[t] = tr.fresh_mse[t];
                    tr.shadow_cos[t] = tr.fresh_cos[t];
                }
            }
        }
        tr.norm[t] = z.l1_norm();
        if keep_shadow && self.shadow.is_some() {
            self.stale = true;
        } else {
            self.shadow = Some(z.clone());
            self.stale = false;
        }
        tr.shadow_norm[t] = if self.stale {
            self.shadow.as_ref().map_or(0.0, TokenTensor::l1_norm)
        } else {
            tr.norm[t]
        };
        self.prev = Some(z);
        Ok(())
    }
}

/// Full-compute executor that records site traces as it goes.
struct Recorder<'a> {
    inner: FullCompute,
    mask: Option<&'a ReuseMask>,
    /// `[family][layer]`
    sites: Vec<Vec<SiteTracker>>,
    net: SiteTracker,
}

impl<'a> Recorder<'a> {
    fn new(backbone: &dyn Backbone, steps: usize, mask: Option<&'a ReuseMask>) -> Self {
        let f = backbone.registry().len();
        let l = backbone.layers();
        Self {
            inner: FullCompute::new(),
            mask,
            sites: (0..f).map(|_| (0..l).map(|_| SiteTracker::new(steps)).collect()).collect(),
            net: SiteTracker::new(steps),
        }
    }
}

impl StepExecutor for Recorder<'_> {
    fn step(
        &mut self,
        backbone: &dyn Backbone,
        x: &TokenTensor,
        cond: usize,
        t: usize,
        stats: &mut RunStats,
    ) -> Result<TokenTensor> {
        let z = self.inner.step(backbone, x, cond, t, stats)?;
        let cache = self
            .inner
            .cache()
            .ok_or_else(|| Error::InvalidArgument("recorder cache missing after step".into()))?;
        let reg = backbone.registry();
        for (f, per_layer) in self.sites.iter_mut().enumerate() {
            let off = reg.hook_offset(f);
            for (l, tracker) in per_layer.iter_mut().enumerate() {
                let parts = (0..reg.hooks(f))
                    .map(|h| {
                        cache.peek(l, off + h).ok_or_else(|| {
                            Error::InvalidArgument(format!("hook {h} of `{}` not computed", reg.families()[f]))
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                let site = if parts.len() == 1 {
                    parts[0].clone()
                } else {
                    TokenTensor::vstack(&parts)?
                };
                let keep = self.mask.is_some_and(|m| m.site(t, l, f));
                tracker.push(t, site, keep)?;
            }
        }
        let keep = self.mask.is_some_and(|m| m.step(t));
        self.net.push(t, z.clone(), keep)?;
        Ok(z)
    }
}

/// Traces of one calibration trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct InputTrace {
    pub families: Vec<FamilyId>,
    /// `[family][layer]`
    pub sites: Vec<Vec<SiteTrace>>,
    pub net: SiteTrace,
}

impl InputTrace {
    pub fn steps(&self) -> usize {
        self.net.steps()
    }

    pub fn layers(&self) -> usize {
        self.sites.first().map_or(0, Vec::len)
    }

    pub fn rates(&self, op: RateOperator, eps: f64) -> InputRates {
        let (steps, layers) = (self.steps(), self.layers());
        let layer = self
            .families
            .iter()
            .zip(&self.sites)
            .map(|(fam, per_layer)| {
                RateMatrix::interior(fam.clone(), steps, layers, |t, l| per_layer[l].rate(op, t, eps))
            })
            .collect();
        let step = StepRateVector::interior(steps, |t| self.net.rate(op, t, eps));
        // first column of the maps is 0 by convention
        let map = |pick: fn(&SiteTrace) -> &Vec<f64>| -> Vec<RateMatrix> {
            self.families
                .iter()
                .zip(&self.sites)
                .map(|(fam, per_layer)| {
                    RateMatrix::from_fn(fam.clone(), steps, layers, |t, l| {
                        if t == 0 {
                            0.0
                        } else {
                            pick(&per_layer[l])[t]
                        }
                    })
                })
                .collect()
        };
        InputRates {
            layer,
            step,
            mse_maps: map(|s| &s.fresh_mse),
            cos_maps: map(|s| &s.fresh_cos),
        }
    }
}

/// Rate statistics of one input (or the mean over inputs).
#[derive(Debug, Clone, PartialEq)]
pub struct InputRates {
    /// One matrix per family, registry order.
    pub layer: Vec<RateMatrix>,
    pub step: StepRateVector,
    /// `mse(Z_t, Z_{t-1})` per family; column 0 is 0.
    pub mse_maps: Vec<RateMatrix>,
    /// `cos(Z_t, Z_{t-1})` per family; column 0 is 0.
    pub cos_maps: Vec<RateMatrix>,
}

impl InputRates {
    /// Entrywise mean over inputs.
    pub fn mean(all: &[InputRates]) -> Result<InputRates> {
        let first = all
            .first()
            .ok_or_else(|| Error::InvalidArgument("need at least one calibration input".into()))?;
        let fams = first.layer.len();
        let column = |pick: fn(&InputRates) -> &Vec<RateMatrix>, f: usize| -> Result<RateMatrix> {
            let mats: Vec<RateMatrix> = all.iter().map(|r| pick(r)[f].clone()).collect();
            RateMatrix::mean(&mats)
        };
        let mut layer = Vec::with_capacity(fams);
        let mut mse_maps = Vec::with_capacity(fams);
        let mut cos_maps = Vec::with_capacity(fams);
        for f in 0..fams {
            layer.push(column(|r| &r.layer, f)?);
            mse_maps.push(column(|r| &r.mse_maps, f)?);
            cos_maps.push(column(|r| &r.cos_maps, f)?);
        }
        let steps: Vec<StepRateVector> = all.iter().map(|r| r.step.clone()).collect();
        Ok(InputRates {
            layer,
            step: StepRateVector::mean(&steps)?,
            mse_maps,
            cos_maps,
        })
    }

    pub fn family(&self, name: &str) -> Option<&RateMatrix> {
        self.layer.iter().find(|m| m.family.as_str() == name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibrationOptions {
    pub eps: f64,
    pub operator: RateOperator,
    /// Worker threads for the fan-out over inputs; `None` uses the global
    /// pool, `Some(1)` runs inline.
    pub jobs: Option<usize>,
}

impl Default for CalibrationOptions {
    fn default() -> Self {
        Self {
            eps: RATE_EPS,
            operator: RateOperator::ChangeRate,
            jobs: None,
        }
    }
}

/// Output of a calibration pass.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationStats {
    pub per_input: Vec<InputRates>,
    pub mean: InputRates,
    pub inputs: Vec<String>,
}

/// Runs `f(i)` for `i in 0..n`, possibly in parallel, keeping input order.
pub(crate) fn fan_out<T: Send>(
    jobs: Option<usize>,
    n: usize,
    f: impl Fn(usize) -> Result<T> + Sync + Send,
) -> Result<Vec<T>> {
    match jobs {
        Some(1) => (0..n).map(f).collect(),
        Some(j) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(j)
                .build()
                .map_err(|e| Error::InvalidArgument(format!("cannot build thread pool: {e}")))?;
            pool.install(|| (0..n).into_par_iter().map(&f).collect())
        }
        None => (0..n).into_par_iter().map(f).collect(),
    }
}

/// Records the traces of one full-compute trajectory.
pub fn trace_input(
    backbone: &dyn Backbone,
    schedule: &SampleSchedule,
    input: &SampleInput,
    mask: Option<&ReuseMask>,
) -> Result<InputTrace> {
    let steps = schedule.steps();
    if let Some(m) = mask {
        let want = (steps, backbone.layers(), backbone.registry().len());
        if m.dims() != want {
            return Err(Error::DimensionMismatch(format!(
                "reuse mask is {:?}, run needs {want:?}",
                m.dims()
            )));
        }
    }
    let mut rec = Recorder::new(backbone, steps, mask);
    run_trajectory(backbone, schedule, input, &mut rec)?;
    Ok(InputTrace {
        families: backbone.registry().families().to_vec(),
        sites: rec
            .sites
            .into_iter()
            .map(|per_layer| per_layer.into_iter().map(|s| s.trace).collect())
            .collect(),
        net: rec.net.trace,
    })
}

fn collect(
    backbone: &dyn Backbone,
    schedule: &SampleSchedule,
    inputs: &[SampleInput],
    mask: Option<&ReuseMask>,
    opts: &CalibrationOptions,
) -> Result<CalibrationStats> {
    if inputs.is_empty() {
        return Err(Error::InvalidArgument("need at least one calibration input".into()));
    }
    let per_input = fan_out(opts.jobs, inputs.len(), |i| {
        let trace = trace_input(backbone, schedule, &inputs[i], mask)?;
        Ok(trace.rates(opts.operator, opts.eps))
    })?;
    let mean = InputRates::mean(&per_input)?;
    Ok(CalibrationStats {
        per_input,
        mean,
        inputs: inputs.iter().map(SampleInput::describe).collect(),
    })
}

/// Full-compute calibration: rates of every family and of the network
/// output, averaged entrywise over `inputs`.
pub fn collect_rates(
    backbone: &dyn Backbone,
    schedule: &SampleSchedule,
    inputs: &[SampleInput],
    opts: &CalibrationOptions,
) -> Result<CalibrationStats> {
    collect(backbone, schedule, inputs, None, opts)
}

/// Like [`collect_rates`], but the numerators are measured against shadow
/// sequences that hold their last value wherever `mask` says reuse.
pub fn collect_shadow_rates(
    backbone: &dyn Backbone,
    schedule: &SampleSchedule,
    inputs: &[SampleInput],
    mask: &ReuseMask,
    opts: &CalibrationOptions,
) -> Result<CalibrationStats> {
    collect(backbone, schedule, inputs, Some(mask), opts)
}
