//! Run configuration read from a TOML file, with command-line overrides.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::CliError;

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub grid: GridConfig,
    pub boundary: BoundaryConfig,
    pub extension: ExtensionSection,
    pub schedule: ScheduleConfig,
    pub iteration: IterationSection,
    pub step: StepSection,
    pub stage: StageSection,
    pub corrugation: CorrugationSection,
    pub calibration: CalibrationSection,
    pub output: OutputConfig,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            grid: GridConfig::default(),
            boundary: BoundaryConfig::default(),
            extension: ExtensionSection::default(),
            schedule: ScheduleConfig::default(),
            iteration: IterationSection::default(),
            step: StepSection::default(),
            stage: StageSection::default(),
            corrugation: CorrugationSection::default(),
            calibration: CalibrationSection::default(),
            output: OutputConfig::default(),
        }
    }
}

/// Chart `[-half_width, half_width] × [0, depth]` with `resolution` nodes.
#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub half_width: f64,
    pub depth: f64,
    pub resolution: [usize; 2],
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig { half_width: 0.06, depth: 0.1, resolution: [621, 517] }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BoundaryPreset {
    Arc,
    Line,
    File,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoundaryConfig {
    pub preset: BoundaryPreset,
    pub radius: f64,
    /// Normal pointing to the centre of the arc.
    pub inward: bool,
    /// CSV with columns `x1,f1,f2,f3,mu1,mu2,mu3`, one row per boundary node.
    pub file: Option<PathBuf>,
    /// Extension depth; defaults to the chart depth.
    pub d0: Option<f64>,
}

impl Default for BoundaryConfig {
    fn default() -> Self {
        BoundaryConfig { preset: BoundaryPreset::Arc, radius: 1.0, inward: true, file: None, d0: None }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtensionSection {
    pub k: f64,
    pub m: f64,
    pub gamma: f64,
    pub alpha0: f64,
    pub max_layer: Option<usize>,
}

impl Default for ExtensionSection {
    fn default() -> Self {
        ExtensionSection { k: 2.0, m: 1e4, gamma: 1e3, alpha0: 0.25, max_layer: None }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    /// Overrides `max(max ρ0², 1)`.
    pub eps0: Option<f64>,
    /// Sets `ε0 = max ρ0² / ratio`; ignored when `eps0` is given.
    pub eps0_ratio: Option<f64>,
    pub a: f64,
    pub big_a: f64,
    pub alpha: f64,
    pub tol: f64,
    pub q_max: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig { eps0: None, eps0_ratio: None, a: 0.4, big_a: 1.3, alpha: 0.05, tol: 1e-3, q_max: 4 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StartState {
    /// State bundle written by `extend`.
    Bundle,
    /// Exact conformal arc on the configured chart.
    ConformalArc,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IterationSection {
    pub start: StartState,
    pub bundle: Option<PathBuf>,
    pub k: f64,
    pub m: f64,
    pub gamma: f64,
    pub strict: bool,
    pub retries: usize,
    pub stop_on_stall: bool,
}

impl Default for IterationSection {
    fn default() -> Self {
        IterationSection {
            start: StartState::Bundle,
            bundle: None,
            k: 5.0,
            m: 256.0,
            gamma: 32.0,
            strict: true,
            retries: 3,
            stop_on_stall: true,
        }
    }
}

/// Flat-base step demo: `a = amplitude · sin(π x1)` on the unit square.
#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StepSection {
    pub resolution: usize,
    pub amplitude: f64,
    pub direction: [f64; 2],
    pub lambdas: Vec<f64>,
}

impl Default for StepSection {
    fn default() -> Self {
        StepSection { resolution: 257, amplitude: 0.2, direction: [1.0, 0.0], lambdas: vec![16.0, 32.0] }
    }
}

/// Flat-base stage demo: `ρ² Id` over the balanced frame with
/// `ρ = rho · sin²(π x1) sin²(π x2)` on the unit square.
#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageSection {
    pub resolution: usize,
    pub rho: f64,
    pub eps: f64,
    pub m: f64,
    pub gamma: f64,
    pub theta: f64,
    pub ks: Vec<f64>,
}

impl Default for StageSection {
    fn default() -> Self {
        StageSection { resolution: 257, rho: 0.05f64.sqrt(), eps: 0.2, m: 32.0, gamma: 2.0, theta: 1.0, ks: vec![5.0, 5.5] }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorrugationSection {
    pub s_samples: usize,
    pub t_samples: usize,
}

impl Default for CorrugationSection {
    fn default() -> Self {
        CorrugationSection { s_samples: 64, t_samples: 256 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CalibrationMode {
    /// Use the compiled-in constants without measuring.
    Frozen,
    /// Reuse a cached measurement when present.
    Cached,
    Recompute,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationSection {
    pub mode: CalibrationMode,
    pub resolution: usize,
    pub gamma: f64,
    pub m: f64,
}

impl Default for CalibrationSection {
    fn default() -> Self {
        CalibrationSection { mode: CalibrationMode::Frozen, resolution: 257, gamma: 2.0, m: 12.0 }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
    pub meshes: bool,
    /// Emit every `mesh_stride`-th node per axis.
    pub mesh_stride: usize,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig { dir: PathBuf::from("isoext-out"), meshes: true, mesh_stride: 1 }
    }
}

impl Config {
    pub fn load(path: Option<&Path>) -> Result<Config, CliError> {
        let Some(path) = path else { return Ok(Config::default()) };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::validation(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::validation(format!("config {}: {e}", path.display())))
    }

    /// Range checks that do not need the engine.
    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |s: String| Err(CliError::validation(s));
        let s = &self.schedule;
        if !(s.a > 0.0 && s.a < 0.5) {
            return bad(format!("schedule.a = {} outside (0, 1/2)", s.a));
        }
        if !(s.big_a > 1.0) {
            return bad(format!("schedule.big_a = {} must exceed 1", s.big_a));
        }
        if !(s.tol >= 0.0) {
            return bad(format!("schedule.tol = {} must be nonnegative", s.tol));
        }
        if let Some(e) = s.eps0 {
            if !(e > 0.0) {
                return bad(format!("schedule.eps0 = {e} must be positive"));
            }
        }
        if let Some(r) = s.eps0_ratio {
            if !(r > 0.0) {
                return bad(format!("schedule.eps0_ratio = {r} must be positive"));
            }
        }
        let g = &self.grid;
        if !(g.half_width > 0.0 && g.depth > 0.0) {
            return bad("grid.half_width and grid.depth must be positive".into());
        }
        if self.output.mesh_stride == 0 {
            return bad("output.mesh_stride must be at least 1".into());
        }
        if self.boundary.preset == BoundaryPreset::File && self.boundary.file.is_none() {
            return bad("boundary.file is required when boundary.preset = \"file\"".into());
        }
        Ok(())
    }
}
