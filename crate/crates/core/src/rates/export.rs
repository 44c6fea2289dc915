//! CSV and PGM export of rate matrices.

use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::RateMatrix;
use crate::backbone::FamilyId;
use crate::error::{Error, Result};

const HEADER: [&str; 3] = ["t", "l", "value"];

/// Writes `t,l,value` rows; undefined entries have an empty value. Values
/// carry 17 significant digits so they parse back to the same bits.
pub fn write_rate_csv(m: &RateMatrix, out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let wrap = |e: csv::Error| Error::malformed("rate csv", e.to_string());
    w.write_record(HEADER).map_err(wrap)?;
    for t in 0..m.steps() {
        for l in 0..m.layers() {
            let v = m.get(t, l).map(|v| format!("{v:.16e}")).unwrap_or_default();
            w.write_record([t.to_string(), l.to_string(), v]).map_err(wrap)?;
        }
    }
    w.flush().map_err(|e| Error::malformed("rate csv", e.to_string()))?;
    Ok(())
}

pub fn save_rate_csv(m: &RateMatrix, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_rate_csv(m, BufWriter::new(file))
}

/// Parses a rate CSV. Dimensions are inferred from the largest indices and
/// every `(t, l)` must appear exactly once.
pub fn read_rate_csv(input: impl Read, family: FamilyId) -> Result<RateMatrix> {
    let mut r = csv::Reader::from_reader(input);
    let headers = r
        .headers()
        .map_err(|e| Error::malformed("rate csv", e.to_string()))?
        .clone();
    if headers.iter().collect::<Vec<_>>() != HEADER {
        return Err(Error::malformed(
            "rate csv",
            format!("expected header t,l,value, found {}", headers.iter().collect::<Vec<_>>().join(",")),
        ));
    }
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| Error::malformed("rate csv", format!("line {line}: {e}")))?;
        let field = |k: usize| rec.get(k).unwrap_or("").trim();
        let idx = |k: usize| -> Result<usize> {
            field(k).parse().map_err(|_| {
                Error::malformed("rate csv", format!("line {line}: bad {} index `{}`", HEADER[k], field(k)))
            })
        };
        let (t, l) = (idx(0)?, idx(1)?);
        let value = match field(2) {
            "" => None,
            s => {
                let v: f64 = s
                    .parse()
                    .map_err(|_| Error::malformed("rate csv", format!("line {line}: bad value `{s}`")))?;
                if !v.is_finite() {
                    return Err(Error::malformed("rate csv", format!("line {line}: non-finite value")));
                }
                Some(v)
            }
        };
        rows.push((t, l, value));
    }
    if rows.is_empty() {
        return Err(Error::malformed("rate csv", "no data rows"));
    }
    let steps = rows.iter().map(|r| r.0).max().unwrap_or(0) + 1;
    let layers = rows.iter().map(|r| r.1).max().unwrap_or(0) + 1;
    let mut seen = vec![false; steps * layers];
    let mut m = RateMatrix::undefined(family, steps, layers);
    for (t, l, v) in rows {
        let i = t * layers + l;
        if seen[i] {
            return Err(Error::malformed("rate csv", format!("duplicate entry t={t}, l={l}")));
        }
        seen[i] = true;
        if let Some(v) = v {
            m.set(t, l, v);
        }
    }
    if let Some(i) = seen.iter().position(|s| !s) {
        return Err(Error::malformed(
            "rate csv",
            format!("missing entry t={}, l={}", i / layers, i % layers),
        ));
    }
    Ok(m)
}

pub fn load_rate_csv(path: impl AsRef<Path>, family: FamilyId) -> Result<RateMatrix> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_rate_csv(file, family)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeatmapMode {
    /// `log2` of the rate; undefined entries painted as 1.
    Log2Rho,
    /// `log2` of the MSE map.
    Mse,
    /// Cosine map on a linear scale.
    Cos,
}

impl HeatmapMode {
    pub fn name(&self) -> &'static str {
        match self {
            HeatmapMode::Log2Rho => "rho",
            HeatmapMode::Mse => "mse",
            HeatmapMode::Cos => "cos",
        }
    }
}

impl fmt::Display for HeatmapMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for HeatmapMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rho" | "log2-rho" => Ok(HeatmapMode::Log2Rho),
            "mse" => Ok(HeatmapMode::Mse),
            "cos" => Ok(HeatmapMode::Cos),
            _ => Err(Error::InvalidArgument(format!("unknown heatmap mode `{s}`"))),
        }
    }
}

/// Display value of every entry, `[t][l]` row-major.
fn display_values(m: &RateMatrix, mode: HeatmapMode) -> Vec<f64> {
    let raw: Vec<f64> = (0..m.steps())
        .flat_map(|t| (0..m.layers()).map(move |l| (t, l)))
        .map(|(t, l)| match mode {
            HeatmapMode::Cos => m.get(t, l).unwrap_or(0.0),
            _ => m.painted(t, l),
        })
        .collect();
    match mode {
        HeatmapMode::Cos => raw,
        HeatmapMode::Log2Rho | HeatmapMode::Mse => {
            // zeros have no logarithm; floor them at the smallest positive value
            let floor = raw
                .iter()
                .copied()
                .filter(|v| *v > 0.0)
                .fold(f64::INFINITY, f64::min);
            let floor = if floor.is_finite() { floor } else { 1.0 };
            raw.iter().map(|v| v.max(floor).log2()).collect()
        }
    }
}

/// Gray levels laid out with `t` along x and `l` along y (layer 0 on top).
pub fn heatmap_pixels(m: &RateMatrix, mode: HeatmapMode) -> Vec<u8> {
    let vals = display_values(m, mode);
    let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let (steps, layers) = (m.steps(), m.layers());
    let mut px = vec![128u8; steps * layers];
    if span > 0.0 && span.is_finite() {
        for t in 0..steps {
            for l in 0..layers {
                let v = vals[t * layers + l];
                px[l * steps + t] = (((v - lo) / span) * 255.0).round() as u8;
            }
        }
    }
    px
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HeatmapFiles {
    pub csv: PathBuf,
    pub pgm: PathBuf,
}

/// Writes `<stem>.csv` (exact values) and `<stem>.pgm` (8-bit P5).
pub fn export_heatmap(m: &RateMatrix, mode: HeatmapMode, stem: impl AsRef<Path>) -> Result<HeatmapFiles> {
    if m.defined_values().iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument(format!("rate matrix `{}` has non-finite entries", m.family)));
    }
    let stem = stem.as_ref();
    let files = HeatmapFiles {
        csv: stem.with_extension("csv"),
        pgm: stem.with_extension("pgm"),
    };
    save_rate_csv(m, &files.csv)?;
    let px = heatmap_pixels(m, mode);
    let mut out = format!("P5\n{} {}\n255\n", m.steps(), m.layers()).into_bytes();
    out.extend_from_slice(&px);
    std::fs::write(&files.pgm, out).map_err(|e| Error::io(&files.pgm, e))?;
    Ok(files)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn fam() -> FamilyId {
        FamilyId::new("mhsa")
    }

    #[test]
    fn rho_boundaries_paint_as_log2_one() {
        let m = RateMatrix::interior(fam(), 6, 2, |_, _| 0.5);
        let px = heatmap_pixels(&m, HeatmapMode::Log2Rho);
        for l in 0..2 {
            assert_eq!(px[l * 6], 255);
            assert_eq!(px[l * 6 + 5], 255);
            for t in 1..5 {
                assert_eq!(px[l * 6 + t], 0);
            }
        }
    }

    #[test]
    fn constant_matrix_is_uniform_gray() {
        let m = RateMatrix::from_fn(fam(), 4, 3, |_, _| 0.25);
        let px = heatmap_pixels(&m, HeatmapMode::Cos);
        assert!(px.iter().all(|&p| p == px[0]));
        let m = RateMatrix::interior(fam(), 5, 2, |_, _| 1.0);
        assert!(heatmap_pixels(&m, HeatmapMode::Log2Rho).iter().all(|&p| p == 128));
    }

    #[test]
    fn export_writes_both_files() {
        let dir = tempfile::tempdir().unwrap();
        let m = RateMatrix::interior(fam(), 5, 3, |t, l| (t + l) as f64 / 3.0);
        let files = export_heatmap(&m, HeatmapMode::Log2Rho, dir.path().join("mhsa")).unwrap();
        let pgm = std::fs::read(&files.pgm).unwrap();
        assert!(pgm.starts_with(b"P5\n5 3\n255\n"));
        assert_eq!(pgm.len(), b"P5\n5 3\n255\n".len() + 15);
        let back = load_rate_csv(&files.csv, fam()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn corrupted_csv_is_rejected() {
        let bad_header = "t,layer,value\n0,0,1\n";
        assert!(read_rate_csv(bad_header.as_bytes(), fam()).is_err());
        let dup = "t,l,value\n0,0,1\n0,0,2\n";
        assert!(read_rate_csv(dup.as_bytes(), fam()).is_err());
        let missing = "t,l,value\n0,0,1\n1,1,2\n";
        let err = read_rate_csv(missing.as_bytes(), fam()).unwrap_err().to_string();
        assert!(err.contains("missing entry"), "{err}");
        let nan = "t,l,value\n0,0,NaN\n";
        assert!(read_rate_csv(nan.as_bytes(), fam()).is_err());
        let junk = "t,l,value\n0,x,1\n";
        assert!(read_rate_csv(junk.as_bytes(), fam()).is_err());
        assert!(read_rate_csv("t,l,value\n".as_bytes(), fam()).is_err());
    }

    proptest! {
        #[test]
        fn csv_round_trip_is_bit_exact(
            vals in proptest::collection::vec(prop_oneof![Just(None), any::<f64>().prop_filter("finite", |v| v.is_finite()).prop_map(Some)], 12)
        ) {
            let mut m = RateMatrix::undefined(fam(), 4, 3);
            for (i, v) in vals.iter().enumerate() {
                if let Some(v) = v {
                    m.set(i / 3, i % 3, *v);
                }
            }
            let mut buf = Vec::new();
            write_rate_csv(&m, &mut buf).unwrap();
            let back = read_rate_csv(buf.as_slice(), fam()).unwrap();
            for t in 0..4 {
                for l in 0..3 {
                    prop_assert_eq!(m.get(t, l).map(f64::to_bits), back.get(t, l).map(f64::to_bits));
                }
            }
        }
    }
}
