//! Run configuration, shipped presets and the config hash.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::driver::{LevelSetParams, Problem};
use crate::error::{Error, Result};
use crate::grid::{build_phantom, make_quadrature, GridSpec, MediumFields, PhantomSpec, TimeGrid};
use crate::sensitivity::SensitivityRequest;
use crate::tbt::TbtParams;
use crate::transport::{standard_sources, ReceiverRule, SourceSpec};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransportConfig {
    pub n_dirs: usize,
    /// Henyey-Greenstein anisotropy.
    pub g: f64,
}

/// Standard boundary source layout.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceLayout {
    pub per_side: usize,
    pub width_px: usize,
    /// Illuminated central span of each side (cm).
    pub span_cm: f64,
    #[serde(default = "one")]
    pub amplitude: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensitivityConfig {
    pub source: SourceSpec,
    pub requests: Vec<SensitivityRequest>,
    /// Recorded steps of the sensitivity time grid; the step length and
    /// substeps follow the main time grid.
    pub n_rec: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub name: String,
    pub grid: GridSpec,
    pub transport: TransportConfig,
    pub time: TimeGrid,
    /// Truth phantom. Its obstacle-free version is the known background.
    pub phantom: PhantomSpec,
    pub sources: SourceLayout,
    #[serde(default)]
    pub receivers: ReceiverRule,
    pub tbt: TbtParams,
    pub levelset: LevelSetParams,
    #[serde(default)]
    pub sensitivity: Option<SensitivityConfig>,
}

pub const PRESET_NAMES: [&str; 3] = ["exp1", "exp2", "exp3"];

fn preset_text(name: &str) -> Option<&'static str> {
    match name {
        "exp1" => Some(include_str!("../presets/exp1.json")),
        "exp2" => Some(include_str!("../presets/exp2.json")),
        "exp3" => Some(include_str!("../presets/exp3.json")),
        _ => None,
    }
}

/// Wraps a serde error with the JSON path it occurred at.
fn json_error(e: serde_json::Error, source: &str) -> Error {
    Error::config(source, format!("line {} column {}: {e}", e.line(), e.column()))
}

impl PipelineConfig {
    pub fn from_json(text: &str, source: &str) -> Result<Self> {
        let cfg: PipelineConfig = serde_json::from_str(text).map_err(|e| json_error(e, source))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn preset(name: &str) -> Result<Self> {
        let text = preset_text(name).ok_or_else(|| {
            Error::config("preset", format!("unknown preset `{name}` (expected one of {})", PRESET_NAMES.join(", ")))
        })?;
        Self::from_json(text, &format!("preset {name}"))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Checks every invariant that does not need a solve, reporting the field path.
    pub fn validate(&self) -> Result<()> {
        let tag = |path: &str, e: Error| match e {
            Error::Config { .. } => e,
            other => Error::config(path, other.to_string()),
        };
        self.grid.validate().map_err(|e| tag("grid", e))?;
        let quad = make_quadrature(self.transport.n_dirs).map_err(|e| tag("transport.n_dirs", e))?;
        if !(self.transport.g > -1.0 && self.transport.g < 1.0) {
            return Err(Error::config("transport.g", format!("must lie in (-1, 1), got {}", self.transport.g)));
        }
        self.phantom.validate().map_err(|e| tag("phantom", e))?;
        let truth = build_phantom(&self.phantom, &self.grid).map_err(|e| tag("phantom", e))?;
        self.time
            .check_cfl(&self.grid, &quad, truth.a_max())
            .map_err(|e| tag("time", e))?;
        if self.sources.amplitude < 0.0 || !self.sources.amplitude.is_finite() {
            return Err(Error::config("sources.amplitude", "must be finite and >= 0"));
        }
        standard_sources(
            &self.grid,
            self.sources.per_side,
            self.sources.width_px,
            self.sources.span_cm,
            self.sources.amplitude,
        )
        .map_err(|e| tag("sources", e))?;
        if !(self.receivers.min_arc_cm >= 0.0) {
            return Err(Error::config("receivers.min_arc_cm", "must be >= 0"));
        }
        self.tbt.validate()?;
        self.levelset.validate()?;
        if let Some(s) = &self.sensitivity {
            if s.n_rec == 0 {
                return Err(Error::config("sensitivity.n_rec", "must be positive"));
            }
            s.source.pixels(&self.grid).map_err(|e| tag("sensitivity.source", e))?;
        }
        Ok(())
    }

    pub fn truth(&self) -> Result<MediumFields> {
        build_phantom(&self.phantom, &self.grid)
    }

    pub fn background(&self) -> Result<MediumFields> {
        build_phantom(&self.phantom.without_obstacles(), &self.grid)
    }

    pub fn source_list(&self) -> Result<Vec<SourceSpec>> {
        standard_sources(
            &self.grid,
            self.sources.per_side,
            self.sources.width_px,
            self.sources.span_cm,
            self.sources.amplitude,
        )
    }

    pub fn problem(&self) -> Result<Problem> {
        Problem::new(
            self.background()?,
            self.transport.n_dirs,
            self.transport.g,
            self.time,
            self.source_list()?,
            &self.receivers,
        )
    }

    /// Time grid of the sensitivity tool.
    pub fn sensitivity_time(&self) -> Option<TimeGrid> {
        self.sensitivity.as_ref().map(|s| TimeGrid { n_rec: s.n_rec, ..self.time })
    }

    /// Hex SHA-256 of the config serialized with sorted keys and no whitespace.
    pub fn hash(&self) -> Result<String> {
        let value = serde_json::to_value(self)?;
        let canonical = serde_json::to_string(&value)?;
        Ok(hex(&Sha256::digest(canonical.as_bytes())))
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Parses a config file.
pub fn parse_config(path: &std::path::Path) -> Result<PipelineConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::config(path.display().to_string(), format!("cannot read: {e}")))?;
    PipelineConfig::from_json(&text, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::obstacle_mask;

    #[test]
    fn exp1_parameters() {
        let c = PipelineConfig::preset("exp1").unwrap();
        assert_eq!((c.grid.nx, c.grid.ny, c.grid.dx), (50, 50, 0.1));
        assert_eq!((c.transport.n_dirs, c.transport.g), (12, 0.9));
        assert_eq!(c.source_list().unwrap().len(), 16);
        assert_eq!(c.receivers.window_start_s, 8.0);
        assert!((c.time.horizon() - 20.0).abs() < 1e-12);
        assert_eq!(c.levelset.shape.a_hat, 0.5);
        assert_eq!(c.phantom.obstacles.len(), 3);
        assert!(c.phantom.obstacles.iter().all(|o| o.a == 0.5));
        assert_eq!(c.tbt.sweeps, 20);
        assert_eq!(c.levelset.sweeps, 1);
        assert_eq!(c.tbt.snapshot_sweeps, vec![5, 20]);
        assert_eq!(c.levelset.snapshot_steps, vec![6, 16]);
    }

    #[test]
    fn exp2_differs_only_in_a_hat() {
        let c1 = PipelineConfig::preset("exp1").unwrap();
        let mut c2 = PipelineConfig::preset("exp2").unwrap();
        assert_eq!(c2.levelset.shape.a_hat, 0.55);
        assert_eq!(c2.phantom, c1.phantom);
        c2.levelset.shape.a_hat = 0.5;
        c2.name = c1.name.clone();
        assert_eq!(c2, c1);
    }

    #[test]
    fn exp3_contrasts() {
        let c = PipelineConfig::preset("exp3").unwrap();
        assert_eq!(c.phantom.clear_discs.len(), 2);
        let mut a: Vec<f64> = c.phantom.obstacles.iter().map(|o| o.a).collect();
        a.sort_by(f64::total_cmp);
        assert_eq!(a, vec![0.4, 0.5, 0.6]);
        assert_eq!(c.levelset.shape.a_hat, 0.4);
        // clear discs and obstacles do not overlap
        let truth = c.truth().unwrap();
        let obs = obstacle_mask(&c.phantom, &c.grid);
        assert!(obs.iter().zip(&truth.clear_mask).all(|(o, cl)| !(*o && *cl)));
        assert!(truth.clear_mask.iter().filter(|c| **c).count() > 0);
    }

    #[test]
    fn round_trip_is_fixed_point() {
        for name in PRESET_NAMES {
            let c = PipelineConfig::preset(name).unwrap();
            let text = c.to_json().unwrap();
            let back = PipelineConfig::from_json(&text, "rt").unwrap();
            assert_eq!(back, c);
            assert_eq!(back.to_json().unwrap(), text);
        }
    }

    #[test]
    fn hash_ignores_key_order() {
        let c = PipelineConfig::preset("exp1").unwrap();
        let mut v: serde_json::Value = serde_json::to_value(&c).unwrap();
        let obj = v.as_object_mut().unwrap();
        let mut entries: Vec<(String, serde_json::Value)> = std::mem::take(obj).into_iter().collect();
        entries.reverse();
        let text = format!(
            "{{{}}}",
            entries
                .iter()
                .map(|(k, v)| format!("{}:{}", serde_json::to_string(k).unwrap(), v))
                .collect::<Vec<_>>()
                .join(",")
        );
        let reordered = PipelineConfig::from_json(&text, "reordered").unwrap();
        assert_eq!(reordered.hash().unwrap(), c.hash().unwrap());
        let other = PipelineConfig::preset("exp2").unwrap();
        assert_ne!(other.hash().unwrap(), c.hash().unwrap());
    }

    #[test]
    fn unknown_key_rejected() {
        let c = PipelineConfig::preset("exp1").unwrap();
        let mut v = serde_json::to_value(&c).unwrap();
        v["tbt"]["bogus"] = serde_json::json!(1);
        let err = PipelineConfig::from_json(&v.to_string(), "x").unwrap_err();
        assert!(err.is_config());
        assert!(err.to_string().contains("bogus"));
    }

    #[test]
    fn missing_key_rejected() {
        let c = PipelineConfig::preset("exp1").unwrap();
        let mut v = serde_json::to_value(&c).unwrap();
        v.as_object_mut().unwrap().remove("grid");
        let err = PipelineConfig::from_json(&v.to_string(), "x").unwrap_err();
        assert!(err.to_string().contains("grid"));
    }

    #[test]
    fn invalid_values_name_their_field() {
        let c = PipelineConfig::preset("exp1").unwrap();
        let mut v = serde_json::to_value(&c).unwrap();
        v["transport"]["n_dirs"] = serde_json::json!(7);
        let err = PipelineConfig::from_json(&v.to_string(), "x").unwrap_err();
        assert!(err.is_config() && err.to_string().contains("transport.n_dirs"), "{err}");

        let mut v = serde_json::to_value(&c).unwrap();
        v["time"]["substeps"] = serde_json::json!(1);
        let err = PipelineConfig::from_json(&v.to_string(), "x").unwrap_err();
        assert!(err.to_string().contains("`time`"), "{err}");

        let mut v = serde_json::to_value(&c).unwrap();
        v["levelset"]["gamma"] = serde_json::json!(1.5);
        let err = PipelineConfig::from_json(&v.to_string(), "x").unwrap_err();
        assert!(err.to_string().contains("levelset.gamma"), "{err}");
    }

    #[test]
    fn unknown_preset() {
        assert!(PipelineConfig::preset("exp9").unwrap_err().is_config());
    }
}
