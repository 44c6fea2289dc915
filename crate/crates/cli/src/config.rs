//! Run settings: defaults, then the JSON config file, then flags.

use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::Deserialize;

use reuseplan::backbone::{BackboneConfig, BackboneKind};
use reuseplan::bench::BenchConfig;
use reuseplan::planner::{CorrectionMode, PlannerOptions, ThresholdSet};
use reuseplan::presets::{preset, DEFAULT_SEED};
use reuseplan::rates::{RateOperator, RatePooling};

/// Planner knobs accepted in the config file.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlannerSection {
    pub correction: Option<CorrectionMode>,
    pub pooling: Option<RatePooling>,
    pub operator: Option<RateOperator>,
}

/// Config file. Every field is optional; thresholds use the same flat
/// `tau_*` keys as plan files.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub backbone: Option<BackboneConfig>,
    pub steps: Option<usize>,
    pub preset: Option<String>,
    pub thresholds: Option<ThresholdSet>,
    pub seed: Option<u64>,
    pub inputs: Option<usize>,
    pub eval_inputs: Option<usize>,
    pub repeats: Option<usize>,
    pub jobs: Option<usize>,
    #[serde(default)]
    pub planner: PlannerSection,
}

impl ConfigFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }
}

/// Flags that override the config file.
#[derive(Debug, Default, Clone)]
pub struct Overrides {
    pub preset: Option<String>,
    pub steps: Option<usize>,
    pub layers: Option<usize>,
    pub seed: Option<u64>,
    pub inputs: Option<usize>,
    pub repeats: Option<usize>,
    pub jobs: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct Settings {
    pub backbone: BackboneConfig,
    pub steps: usize,
    pub thresholds: Option<ThresholdSet>,
    pub seed: u64,
    pub inputs: usize,
    pub eval_inputs: usize,
    pub repeats: usize,
    pub jobs: Option<usize>,
    pub planner: PlannerOptions,
}

impl Settings {
    pub fn resolve(file: ConfigFile, flags: &Overrides) -> Result<Self> {
        let preset_name = flags.preset.clone().or(file.preset);
        let dual_preset = preset_name.as_deref().is_some_and(|p| p.starts_with("flux"));
        let mut backbone = file.backbone.unwrap_or_else(|| {
            if dual_preset {
                BackboneConfig::toy_dual(6, 32, 64, 4, DEFAULT_SEED)
            } else {
                BackboneConfig::toy_dit(6, 64, 64, 4, DEFAULT_SEED)
            }
        });
        if let Some(l) = flags.layers {
            backbone.layers = l;
        }
        let thresholds = match (flags.preset.as_deref(), file.thresholds, preset_name.as_deref()) {
            // an explicit flag beats thresholds from the file
            (Some(p), _, _) => Some(preset(p)?),
            (None, Some(t), _) => Some(t),
            (None, None, Some(p)) => Some(preset(p)?),
            (None, None, None) => None,
        };
        let mut planner = PlannerOptions::default();
        if let Some(c) = file.planner.correction {
            planner.correction = c;
        }
        if let Some(p) = file.planner.pooling {
            planner.pooling = p;
        }
        if let Some(o) = file.planner.operator {
            planner.calibration.operator = o;
        }
        let jobs = flags.jobs.or(file.jobs);
        if jobs == Some(0) {
            bail!("--jobs must be at least 1");
        }
        planner.calibration.jobs = jobs;
        let settings = Self {
            backbone,
            steps: flags.steps.or(file.steps).unwrap_or(28),
            thresholds,
            seed: flags.seed.or(file.seed).unwrap_or(DEFAULT_SEED),
            inputs: flags.inputs.or(file.inputs).unwrap_or(5),
            eval_inputs: file.eval_inputs.unwrap_or(1),
            repeats: flags.repeats.or(file.repeats).unwrap_or(3),
            jobs,
            planner,
        };
        settings.backbone.validate()?;
        if settings.inputs == 0 || settings.repeats == 0 || settings.eval_inputs == 0 {
            bail!("inputs, eval_inputs and repeats must be at least 1");
        }
        Ok(settings)
    }

    pub fn thresholds(&self) -> Result<&ThresholdSet> {
        self.thresholds
            .as_ref()
            .context("no thresholds given: pass --preset or set `thresholds` in the config file")
    }

    pub fn bench_config(&self) -> BenchConfig {
        BenchConfig {
            backbone: self.backbone.clone(),
            steps: self.steps,
            calibration_inputs: self.inputs,
            eval_inputs: self.eval_inputs,
            seed: self.seed,
            repeats: self.repeats,
            jobs: self.jobs,
        }
    }

    /// Two-family backbones take the projected bundles.
    pub fn projected_bundles(&self) -> bool {
        self.backbone.kind != BackboneKind::ToyDual
    }
}
