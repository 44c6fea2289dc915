//! Plan files (JSON) and run statistics (CSV).
//!
//! The plan schema is described in `docs/plan-format.md`.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::{FamilyId, FamilyRegistry};
use crate::error::{Error, Result};
use crate::planner::{CachePlan, CutValues, Provenance, ThresholdSet};

pub const FORMAT_VERSION: u32 = 1;
pub const SUPPORTED_VERSIONS: [u32; 1] = [FORMAT_VERSION];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Dims {
    steps: usize,
    layers: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FamilyEntry {
    name: FamilyId,
    hooks: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Cuts {
    /// `null` encodes `-inf` (nothing reused).
    step: Option<f64>,
    families: BTreeMap<FamilyId, Option<f64>>,
}

/// On-disk layout of a plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PlanFile {
    format_version: u32,
    dims: Dims,
    families: Vec<FamilyEntry>,
    #[serde(default)]
    tie_groups: Vec<Vec<FamilyId>>,
    /// `family -> [hook][t][l]`, entries 0 or 1.
    grids: BTreeMap<FamilyId, Vec<Vec<Vec<u8>>>>,
    step_gate: Vec<u8>,
    cut_values: Cuts,
    thresholds: ThresholdSet,
    provenance: Provenance,
}

fn encode_cut(c: f64) -> Option<f64> {
    (c != f64::NEG_INFINITY).then_some(c)
}

fn decode_cut(c: Option<f64>) -> f64 {
    c.unwrap_or(f64::NEG_INFINITY)
}

fn to_file(plan: &CachePlan) -> PlanFile {
    let reg = plan.registry();
    let (steps, layers) = (plan.steps(), plan.layers());
    let grids = reg
        .families()
        .iter()
        .enumerate()
        .map(|(f, fam)| {
            let grid: Vec<Vec<u8>> = (0..steps)
                .map(|t| (0..layers).map(|l| u8::from(plan.site(t, l, f))).collect())
                .collect();
            (fam.clone(), vec![grid; reg.hooks(f)])
        })
        .collect();
    PlanFile {
        format_version: FORMAT_VERSION,
        dims: Dims { steps, layers },
        families: reg
            .families()
            .iter()
            .enumerate()
            .map(|(f, name)| FamilyEntry {
                name: name.clone(),
                hooks: reg.hooks(f),
            })
            .collect(),
        tie_groups: reg.tie_groups().to_vec(),
        grids,
        step_gate: plan.step_gate().iter().map(|b| u8::from(*b)).collect(),
        cut_values: Cuts {
            step: encode_cut(plan.cuts.step),
            families: plan
                .cuts
                .families
                .iter()
                .map(|(f, c)| (f.clone(), encode_cut(*c)))
                .collect(),
        },
        thresholds: plan.thresholds.clone(),
        provenance: plan.provenance.clone(),
    }
}

fn bit(v: u8, field: impl FnOnce() -> String) -> Result<bool> {
    match v {
        0 => Ok(false),
        1 => Ok(true),
        _ => Err(Error::invariant("binary_entries", field())),
    }
}

fn from_file(pf: PlanFile) -> Result<CachePlan> {
    let Dims { steps, layers } = pf.dims;
    let registry = FamilyRegistry::new(
        pf.families.iter().map(|e| (e.name.clone(), e.hooks)).collect(),
        pf.tie_groups,
    )
    .map_err(|e| Error::invariant(format!("registry_valid ({e})"), "families"))?;
    let fams = registry.len();
    if pf.grids.len() != fams {
        return Err(Error::invariant("grid_per_family", "grids"));
    }
    let mut sites = vec![false; steps * layers * fams];
    for (f, fam) in registry.families().iter().enumerate() {
        let hooks = pf
            .grids
            .get(fam)
            .ok_or_else(|| Error::invariant("grid_per_family", format!("grids.{fam}")))?;
        if hooks.len() != registry.hooks(f) {
            return Err(Error::invariant("grid_per_hook", format!("grids.{fam}")));
        }
        for (h, grid) in hooks.iter().enumerate() {
            if grid.len() != steps {
                return Err(Error::invariant("grid_dims", format!("grids.{fam}[{h}]")));
            }
            for (t, row) in grid.iter().enumerate() {
                if row.len() != layers {
                    return Err(Error::invariant("grid_dims", format!("grids.{fam}[{h}][{t}]")));
                }
            }
            if h > 0 && grid != &hooks[0] {
                return Err(Error::invariant("tied sub-site slices differ", format!("grids.{fam}[{h}]")));
            }
        }
        for t in 0..steps {
            for l in 0..layers {
                sites[(t * layers + l) * fams + f] =
                    bit(hooks[0][t][l], || format!("grids.{fam}[0][{t}][{l}]"))?;
            }
        }
    }
    if pf.step_gate.len() != steps {
        return Err(Error::invariant("grid_dims", "step_gate"));
    }
    let step_gate = pf
        .step_gate
        .iter()
        .enumerate()
        .map(|(t, v)| bit(*v, || format!("step_gate[{t}]")))
        .collect::<Result<Vec<_>>>()?;
    let cuts = CutValues {
        step: decode_cut(pf.cut_values.step),
        families: pf
            .cut_values
            .families
            .into_iter()
            .map(|(f, c)| (f, decode_cut(c)))
            .collect(),
    };
    CachePlan::from_parts(steps, layers, registry, sites, step_gate, cuts, pf.thresholds, pf.provenance)
}

/// Serializes a plan to pretty-printed JSON.
pub fn plan_to_json(plan: &CachePlan) -> Result<String> {
    plan.validate()?;
    serde_json::to_string_pretty(&to_file(plan)).map_err(|e| Error::malformed("plan file", e.to_string()))
}

/// Parses and validates a plan. Any input yields either a valid plan or a
/// structured error.
pub fn plan_from_json(text: &str) -> Result<CachePlan> {
    let value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| Error::malformed("plan file", e.to_string()))?;
    let version = value
        .get("format_version")
        .ok_or_else(|| Error::malformed("plan file", "missing field `format_version`"))?;
    let version = version
        .as_u64()
        .and_then(|v| u32::try_from(v).ok())
        .ok_or_else(|| Error::malformed("plan file", format!("format_version must be an integer, got {version}")))?;
    if !SUPPORTED_VERSIONS.contains(&version) {
        return Err(Error::UnsupportedVersion {
            found: version,
            supported: SUPPORTED_VERSIONS.to_vec(),
        });
    }
    let pf: PlanFile = serde_json::from_value(value).map_err(|e| Error::malformed("plan file", e.to_string()))?;
    from_file(pf)
}

pub fn save_plan(plan: &CachePlan, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut text = plan_to_json(plan)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_plan(path: impl AsRef<Path>) -> Result<CachePlan> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    plan_from_json(&text)
}

/// One row of a stats table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsRow {
    pub operating_point: String,
    pub flops: u64,
    /// Baseline median latency over this point's median latency.
    pub speedup_vs_baseline: f64,
    /// Median wall time of one trajectory in seconds.
    pub latency_s: f64,
    /// Reused fraction per family, registry order.
    pub skip_fractions: Vec<(FamilyId, f64)>,
    pub step_skip_fraction: f64,
    pub final_psnr: f64,
    pub final_mse: f64,
    /// Coefficient of variation of the latency samples.
    pub latency_cv: f64,
    /// Baseline FLOPs over this point's FLOPs.
    pub flop_speedup: f64,
}

fn stats_header(families: &[FamilyId]) -> Vec<String> {
    let mut h: Vec<String> = ["operating_point", "flops", "speedup_vs_baseline", "latency_s"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    h.extend(families.iter().map(|f| format!("skip_{f}")));
    h.extend(
        ["step_skip_fraction", "final_psnr", "final_mse", "latency_cv", "flop_speedup"]
            .iter()
            .map(|s| s.to_string()),
    );
    h
}

/// Writes rows as CSV. All rows must report the same families.
pub fn write_stats(rows: &[StatsRow], out: impl Write) -> Result<()> {
    let families: Vec<FamilyId> = rows
        .first()
        .map(|r| r.skip_fractions.iter().map(|(f, _)| f.clone()).collect())
        .unwrap_or_default();
    let wrap = |e: csv::Error| Error::malformed("stats csv", e.to_string());
    let mut w = csv::Writer::from_writer(out);
    w.write_record(stats_header(&families)).map_err(wrap)?;
    for r in rows {
        let fams: Vec<&FamilyId> = r.skip_fractions.iter().map(|(f, _)| f).collect();
        if fams.len() != families.len() || fams.iter().zip(&families).any(|(a, b)| *a != b) {
            return Err(Error::InvalidArgument(format!(
                "row `{}` reports different families",
                r.operating_point
            )));
        }
        let mut rec = vec![
            r.operating_point.clone(),
            r.flops.to_string(),
            r.speedup_vs_baseline.to_string(),
            r.latency_s.to_string(),
        ];
        rec.extend(r.skip_fractions.iter().map(|(_, v)| v.to_string()));
        rec.extend([
            r.step_skip_fraction.to_string(),
            r.final_psnr.to_string(),
            r.final_mse.to_string(),
            r.latency_cv.to_string(),
            r.flop_speedup.to_string(),
        ]);
        w.write_record(rec).map_err(wrap)?;
    }
    w.flush().map_err(|e| Error::malformed("stats csv", e.to_string()))?;
    Ok(())
}

pub fn save_stats(rows: &[StatsRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_stats(rows, BufWriter::new(file))
}
