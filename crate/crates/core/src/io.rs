//! Field, trace and history files and the run manifest.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::PipelineConfig;
use crate::driver::{Phase, ResidualEntry};
use crate::error::{Error, Result};
use crate::grid::{GridSpec, ScalarField};
use crate::transport::BoundaryFluxTrace;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FieldFormat {
    Raw,
    Csv,
    Pgm,
}

impl FieldFormat {
    pub fn extension(self) -> &'static str {
        match self {
            FieldFormat::Raw => "raw",
            FieldFormat::Csv => "csv",
            FieldFormat::Pgm => "pgm",
        }
    }
}

/// JSON sidecar of a raw field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldHeader {
    pub nx: usize,
    pub ny: usize,
    pub dx: f64,
    pub units: String,
    pub dtype: String,
    pub order: String,
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Writes `field`; returns the files created (the raw format adds a sidecar).
pub fn write_field(
    field: &ScalarField,
    grid: &GridSpec,
    units: &str,
    path: &Path,
    format: FieldFormat,
) -> Result<Vec<PathBuf>> {
    if !field.is_finite() {
        return Err(Error::NonFinite(format!("field written to {}", path.display())));
    }
    if field.nx != grid.nx || field.ny != grid.ny {
        return Err(Error::Mismatch("field does not match the grid".into()));
    }
    match format {
        FieldFormat::Raw => {
            let bytes: Vec<u8> = field.data.iter().flat_map(|v| v.to_le_bytes()).collect();
            std::fs::write(path, bytes)?;
            let header = FieldHeader {
                nx: grid.nx,
                ny: grid.ny,
                dx: grid.dx,
                units: units.to_string(),
                dtype: "f64le".into(),
                order: "row-major, x fastest".into(),
            };
            let side = sidecar_path(path);
            std::fs::write(&side, serde_json::to_string_pretty(&header)? + "\n")?;
            Ok(vec![path.to_path_buf(), side])
        }
        FieldFormat::Csv => {
            let mut out = String::new();
            for iy in 0..field.ny {
                let row: Vec<String> = (0..field.nx).map(|ix| format!("{:e}", field.get(ix, iy))).collect();
                out.push_str(&row.join(","));
                out.push('\n');
            }
            std::fs::write(path, out)?;
            Ok(vec![path.to_path_buf()])
        }
        FieldFormat::Pgm => {
            std::fs::write(path, pgm_bytes(field))?;
            Ok(vec![path.to_path_buf()])
        }
    }
}

/// Binary PGM, linear min-max scaling, top row first.
fn pgm_bytes(field: &ScalarField) -> Vec<u8> {
    let (lo, hi) = (field.min(), field.max());
    let mut out = format!("P5\n{} {}\n255\n", field.nx, field.ny).into_bytes();
    for iy in (0..field.ny).rev() {
        for ix in 0..field.nx {
            let v = field.get(ix, iy);
            let g = if hi > lo { ((v - lo) / (hi - lo) * 255.0).round() } else { 128.0 };
            out.push(g.clamp(0.0, 255.0) as u8);
        }
    }
    out
}

/// Reads a raw field through its sidecar.
pub fn read_raw_field(path: &Path) -> Result<(FieldHeader, ScalarField)> {
    let header: FieldHeader = serde_json::from_str(&std::fs::read_to_string(sidecar_path(path))?)?;
    let bytes = std::fs::read(path)?;
    if bytes.len() != 8 * header.nx * header.ny {
        return Err(Error::Mismatch(format!(
            "{} holds {} bytes, sidecar expects {}",
            path.display(),
            bytes.len(),
            8 * header.nx * header.ny
        )));
    }
    let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    Ok((header.clone(), ScalarField { nx: header.nx, ny: header.ny, data }))
}

/// 0/1 field of a mask.
pub fn mask_field(mask: &[bool], grid: &GridSpec) -> ScalarField {
    ScalarField {
        nx: grid.nx,
        ny: grid.ny,
        data: mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect(),
    }
}

/// One row per receiver and recorded step: `receiver,ix,iy,arc_cm,step,t,value`.
/// Steps outside the window are omitted.
pub fn write_trace_csv(trace: &BoundaryFluxTrace, path: &Path) -> Result<()> {
    let mut out = String::from("receiver,ix,iy,arc_cm,step,t,value\n");
    for r in 0..trace.n_receivers() {
        let (ix, iy) = trace.pixels[r];
        for m in 1..=trace.n_rec {
            if trace.window[m - 1] {
                let t = m as f64 * trace.dt_rec;
                writeln!(out, "{r},{ix},{iy},{},{m},{t},{:e}", trace.arcs[r], trace.get(r, m)).unwrap();
            }
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// `phase,step,sweep,source,norm` per Kaczmarz step.
pub fn write_history_csv(history: &[ResidualEntry], path: &Path) -> Result<()> {
    let mut out = String::from("phase,step,sweep,source,norm\n");
    for e in history {
        let phase = match e.phase {
            Phase::Tbt => "tbt",
            Phase::Levelset => "levelset",
        };
        writeln!(out, "{phase},{},{},{},{:e}", e.step, e.sweep, e.source, e.norm).unwrap();
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_history_csv(path: &Path) -> Result<Vec<ResidualEntry>> {
    let text = std::fs::read_to_string(path)?;
    let bad = |line: usize, what: &str| Error::config(path.display().to_string(), format!("line {line}: {what}"));
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 5 {
            return Err(bad(i + 1, "expected 5 columns"));
        }
        let phase = match f[0] {
            "tbt" => Phase::Tbt,
            "levelset" => Phase::Levelset,
            _ => return Err(bad(i + 1, "unknown phase")),
        };
        let num = |s: &str| s.parse::<usize>().map_err(|_| bad(i + 1, "bad integer"));
        out.push(ResidualEntry {
            phase,
            step: num(f[1])?,
            sweep: num(f[2])?,
            source: num(f[3])?,
            norm: f[4].parse().map_err(|_| bad(i + 1, "bad norm"))?,
        });
    }
    Ok(out)
}

/// All-source residual norm per sweep: `phase,sweep,norm`.
pub fn write_sweep_norms_csv(rows: &[(Phase, usize, f64)], path: &Path) -> Result<()> {
    let mut out = String::from("phase,sweep,norm\n");
    for (phase, sweep, norm) in rows {
        let p = if *phase == Phase::Tbt { "tbt" } else { "levelset" };
        writeln!(out, "{p},{sweep},{norm:e}").unwrap();
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Per-sweep norms from a per-step history: root of the summed squares of
/// the entries of each `(phase, sweep)`.
pub fn sweep_norms(history: &[ResidualEntry]) -> Vec<(Phase, usize, f64)> {
    let mut acc: Vec<(Phase, usize, f64)> = Vec::new();
    for e in history {
        match acc.last_mut() {
            Some(last) if last.0 == e.phase && last.1 == e.sweep => last.2 += e.norm * e.norm,
            _ => acc.push((e.phase, e.sweep, e.norm * e.norm)),
        }
    }
    acc.into_iter().map(|(p, s, v)| (p, s, v.sqrt())).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestFile {
    /// Relative to the output directory.
    pub path: String,
    pub kind: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub status: String,
    pub package_version: String,
    pub config_hash: String,
    pub config: PipelineConfig,
    /// Constants derived from the config or fixed during the run.
    pub derived: BTreeMap<String, serde_json::Value>,
    pub files: Vec<ManifestFile>,
    /// Wall-clock seconds per stage.
    pub timings: BTreeMap<String, f64>,
}

impl RunManifest {
    pub fn new(command: &str, config: &PipelineConfig) -> Result<Self> {
        let mut derived = BTreeMap::new();
        let tg = config.time;
        derived.insert("dt_sub".into(), serde_json::json!(tg.dt_sub()));
        derived.insert("substeps".into(), serde_json::json!(tg.substeps));
        derived.insert("courant".into(), serde_json::json!(tg.courant(&config.grid)));
        derived.insert("horizon_s".into(), serde_json::json!(tg.horizon()));
        Ok(RunManifest {
            command: command.to_string(),
            status: "running".into(),
            package_version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash: config.hash()?,
            config: config.clone(),
            derived,
            files: Vec::new(),
            timings: BTreeMap::new(),
        })
    }

    pub fn add(&mut self, out_dir: &Path, path: &Path, kind: &str) {
        let rel = path.strip_prefix(out_dir).unwrap_or(path);
        self.files.push(ManifestFile {
            path: rel.display().to_string(),
            kind: kind.to_string(),
        });
    }

    pub fn write(&self, out_dir: &Path) -> Result<PathBuf> {
        let path = out_dir.join("manifest.json");
        std::fs::write(&path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(path)
    }
}
