//! Published threshold presets and sweep bundles.

use crate::backbone::DUAL_FAMILIES;
use crate::error::{Error, Result};
use crate::planner::ThresholdSet;

/// Default seed of the published configurations.
pub const DEFAULT_SEED: u64 = 42;

/// `tau_step` values swept for every bundle.
pub const TAU_STEP_SWEEP: [f64; 5] = [0.40, 0.50, 0.60, 0.70, 0.75];

pub const PRESET_NAMES: [&str; 4] = ["dit-fast", "dit-slow", "flux-fast", "flux-slow"];

/// Named threshold preset. DiT presets use the families `mhsa`/`ffn`; FLUX
/// presets use the five dual/single-stream families.
pub fn preset(name: &str) -> Result<ThresholdSet> {
    Ok(match name {
        "dit-fast" => ThresholdSet::new(0.63, 0.00, &[("mhsa", 0.22), ("ffn", 0.22)]),
        "dit-slow" => ThresholdSet::new(0.61, 0.00, &[("mhsa", 0.20), ("ffn", 0.20)]),
        "flux-fast" => dual(0.70, 0.10, [0.68, 0.68, 0.68, 0.68, 0.68]),
        "flux-slow" => dual(0.72, 0.22, [0.68, 0.66, 0.00, 0.68, 0.62]),
        _ => return Err(Error::UnknownPreset(name.to_string())),
    })
}

fn dual(tau_step: f64, warmup: f64, taus: [f64; 5]) -> ThresholdSet {
    let fams: Vec<(&str, f64)> = DUAL_FAMILIES.iter().copied().zip(taus).collect();
    ThresholdSet::new(tau_step, warmup, &fams)
}

/// Module-threshold bundle of the speed/quality sweep: warm-up plus one
/// fraction per dual/single-stream family.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bundle {
    pub index: usize,
    pub warmup: f64,
    pub dual_attn: f64,
    pub dual_ff: f64,
    pub dual_context_ff: f64,
    pub single_attn: f64,
    pub single_ff: f64,
}

impl Bundle {
    /// Thresholds for the five-family backbone.
    pub fn dual(&self, tau_step: f64) -> ThresholdSet {
        dual(
            tau_step,
            self.warmup,
            [self.dual_attn, self.dual_ff, self.dual_context_ff, self.single_attn, self.single_ff],
        )
    }

    /// Thresholds for a two-family backbone: attention takes `dual_attn`,
    /// feed-forward takes `dual_ff`.
    pub fn projected(&self, tau_step: f64) -> ThresholdSet {
        ThresholdSet::new(tau_step, self.warmup, &[("mhsa", self.dual_attn), ("ffn", self.dual_ff)])
    }
}

const fn bundle(index: usize, w: f64, da: f64, df: f64, dc: f64, sa: f64, sf: f64) -> Bundle {
    Bundle {
        index,
        warmup: w,
        dual_attn: da,
        dual_ff: df,
        dual_context_ff: dc,
        single_attn: sa,
        single_ff: sf,
    }
}

pub const BUNDLES: [Bundle; 7] = [
    bundle(1, 0.10, 0.68, 0.68, 0.68, 0.68, 0.68),
    bundle(2, 0.10, 0.68, 0.00, 0.00, 0.68, 0.00),
    bundle(3, 0.15, 0.68, 0.00, 0.00, 0.70, 0.00),
    bundle(4, 0.22, 0.68, 0.66, 0.00, 0.68, 0.62),
    bundle(5, 0.22, 0.68, 0.40, 0.00, 0.68, 0.20),
    bundle(6, 0.25, 0.68, 0.00, 0.00, 0.68, 0.00),
    bundle(7, 0.25, 0.50, 0.00, 0.00, 0.50, 0.00),
];
