//! Declarative experiment description, read from TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::truth::{AnalyticTruth, GpTruth, GroundTruthForce};
use crate::contact::SurfaceGeometry;
use crate::dynamics::RobotGeometry;
use crate::error::{Error, Result};
use crate::ocp::{tighten_output_box, ConstraintSet, OcpConfig, TighteningMode, TighteningPolicy};
use crate::pathref::PathDefinition;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Hook,
    Hertz,
    #[default]
    Hybrid,
}

impl ModelKind {
    pub fn name(&self) -> &'static str {
        match self {
            ModelKind::Hook => "hook",
            ModelKind::Hertz => "hertz",
            ModelKind::Hybrid => "hybrid",
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "hook" => Ok(ModelKind::Hook),
            "hertz" => Ok(ModelKind::Hertz),
            "hybrid" => Ok(ModelKind::Hybrid),
            other => Err(Error::Config(format!("unknown model `{other}` (expected hook, hertz or hybrid)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerSection {
    #[serde(default)]
    pub model: ModelKind,
    /// fitted model bundle (JSON); relative paths resolve against the scenario file
    #[serde(default)]
    pub model_file: Option<PathBuf>,
    #[serde(default)]
    pub ocp: OcpConfig,
    #[serde(default)]
    pub constraints: ConstraintSet,
}

/// Additive torque on one joint over a time window.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DisturbanceSpec {
    /// 1-based joint index
    pub joint: usize,
    /// [N·m]
    pub torque: f64,
    pub start: f64,
    pub end: f64,
}

impl DisturbanceSpec {
    pub fn validate(&self, duration: f64) -> Result<()> {
        if !(1..=3).contains(&self.joint) {
            return Err(Error::Config(format!("disturbance joint must be 1, 2 or 3, got {}", self.joint)));
        }
        if !self.torque.is_finite() || !(self.start >= 0.0 && self.start < self.end && self.end <= duration) {
            return Err(Error::Config(format!(
                "disturbance window [{}, {}] must lie inside [0, {duration}]",
                self.start, self.end
            )));
        }
        Ok(())
    }

    /// Torque vector at time `t` (window closed on the left, open on the right).
    pub fn torque_at(&self, t: f64) -> [f64; 3] {
        let mut d = [0.0; 3];
        if t >= self.start && t < self.end {
            d[self.joint - 1] = self.torque;
        }
        d
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TruthMode {
    #[default]
    Analytic,
    /// stiffness field interpolated by a GP fit on a dense grid of the analytic one
    DenseGp,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TruthSection {
    pub mode: TruthMode,
    pub analytic: AnalyticTruth,
    /// grid points per side for the dense GP (side² ≥ 500 recommended)
    pub grid_side: usize,
}

impl Default for TruthSection {
    fn default() -> Self {
        Self { mode: TruthMode::Analytic, analytic: AnalyticTruth::default(), grid_side: 23 }
    }
}

impl TruthSection {
    pub fn build(&self) -> Result<GroundTruthForce> {
        self.analytic.validate()?;
        Ok(match self.mode {
            TruthMode::Analytic => GroundTruthForce::Analytic(self.analytic),
            TruthMode::DenseGp => {
                let a = &self.analytic;
                let y = (a.y_ref - 2.0 * a.span, a.y_ref + 2.0 * a.span);
                let z = (a.z_ref - a.wavelength_z, a.z_ref + a.wavelength_z);
                GroundTruthForce::Gp(GpTruth::from_analytic(a, y, z, self.grid_side)?)
            }
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimSection {
    /// [s]
    pub duration: f64,
    /// plant integration step [s]; the controller runs every `ocp.dt`
    pub plant_dt: f64,
    /// initial path parameter
    pub theta0: f64,
    /// true normal force at the start [N]; 0 means just touching
    pub start_force: f64,
    /// inverse-kinematics seed selecting the arm branch
    pub ik_guess: [f64; 3],
    /// abort when `|q|` exceeds this multiple of the angle limits or any
    /// joint speed exceeds `max_speed`
    pub sanity_angle_factor: f64,
    pub max_speed: f64,
}

impl Default for SimSection {
    fn default() -> Self {
        Self {
            duration: 12.0,
            plant_dt: 1e-3,
            theta0: -1.0,
            start_force: 0.0,
            ik_guess: [1.67, 0.74, -1.48],
            sanity_angle_factor: 2.0,
            max_speed: 2.0,
        }
    }
}

/// Training-data protocol.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub runs: usize,
    pub eval_runs: usize,
    /// [s] per run
    pub duration: f64,
    /// standard deviation of the reference position jitter [m]
    pub position_jitter: f64,
    /// standard deviation of the reference force jitter [N]
    pub force_jitter: f64,
    /// force measurement noise [N]
    pub noise_sigma: f64,
    /// stiffness of the spring model used by the data-collection controller
    pub bootstrap_k_e: f64,
    /// SQP iterations per step of the data-collection controller
    pub bootstrap_sqp_iter: usize,
    /// GP input thinning distance [rad]
    pub min_dist: f64,
    pub gp_restarts: usize,
    /// exponent for the nonlinear spring fit; free when absent
    pub hertz_alpha_lock: Option<f64>,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            runs: 4,
            eval_runs: 2,
            duration: 6.0,
            position_jitter: 0.004,
            force_jitter: 0.6,
            noise_sigma: 0.0388,
            bootstrap_k_e: 400.0,
            bootstrap_sqp_iter: 1,
            min_dist: 0.015,
            gp_restarts: 8,
            hertz_alpha_lock: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Seeds {
    pub data: u64,
    pub fit: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Self { data: 1, fit: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { dir: PathBuf::from("out") }
    }
}

/// One reproducible experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub robot: RobotGeometry,
    pub surface: SurfaceGeometry,
    pub path: PathDefinition,
    pub controller: ControllerSection,
    #[serde(default)]
    pub tightening: TighteningPolicy,
    #[serde(default)]
    pub disturbance: Option<DisturbanceSpec>,
    #[serde(default)]
    pub truth: TruthSection,
    #[serde(default)]
    pub sim: SimSection,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub seeds: Seeds,
    #[serde(default)]
    pub output: OutputSection,
}

impl Default for Scenario {
    fn default() -> Self {
        Self {
            robot: RobotGeometry::default(),
            surface: SurfaceGeometry::default(),
            path: PathDefinition::default(),
            controller: ControllerSection {
                model: ModelKind::Hybrid,
                model_file: None,
                ocp: OcpConfig::default(),
                constraints: ConstraintSet::default(),
            },
            tightening: TighteningPolicy::default(),
            disturbance: None,
            truth: TruthSection::default(),
            sim: SimSection::default(),
            data: DataSection::default(),
            seeds: Seeds::default(),
            output: OutputSection::default(),
        }
    }
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        self.robot.validate()?;
        self.surface.validate()?;
        self.controller.ocp.validate()?;
        let c = &self.controller.constraints;
        c.validate()?;
        self.path.validate((c.force_lo, c.force_hi))?;
        self.tightening.validate()?;
        if self.tightening.mode == TighteningMode::Fixed {
            tighten_output_box(c.force_lo, c.force_hi, self.tightening.backoff)?;
        }
        self.truth.analytic.validate()?;
        let s = &self.sim;
        if !(s.duration > 0.0) || !(s.plant_dt > 0.0) || s.plant_dt > self.controller.ocp.dt {
            return Err(Error::Config("sim needs duration > 0 and 0 < plant_dt <= controller dt".into()));
        }
        let ratio = self.controller.ocp.dt / s.plant_dt;
        if (ratio - ratio.round()).abs() > 1e-9 {
            return Err(Error::Config("controller dt must be a whole multiple of plant_dt".into()));
        }
        if !(-1.0..=0.0).contains(&s.theta0) || !(s.start_force >= 0.0) {
            return Err(Error::Config("sim.theta0 must lie in [-1, 0] and start_force >= 0".into()));
        }
        if !(s.sanity_angle_factor >= 1.0) || !(s.max_speed > 0.0) {
            return Err(Error::Config("sanity box must contain the constraint box".into()));
        }
        if let Some(d) = &self.disturbance {
            d.validate(s.duration)?;
        }
        let d = &self.data;
        if d.runs == 0 || d.bootstrap_sqp_iter == 0 || !(d.duration > 0.0) || !(d.noise_sigma >= 0.0) || !(d.bootstrap_k_e > 0.0) || !(d.min_dist > 0.0) {
            return Err(Error::Config("data section needs runs >= 1, positive duration, stiffness and thinning distance".into()));
        }
        if !(d.position_jitter >= 0.0) || !(d.force_jitter >= 0.0) {
            return Err(Error::Config("jitter must be nonnegative".into()));
        }
        Ok(())
    }

    /// Parses TOML and validates. Relative `model_file` paths are resolved
    /// against `base_dir`.
    pub fn from_toml_str(text: &str, base_dir: Option<&Path>) -> Result<Self> {
        let mut s: Scenario = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string() + &span_hint(&e)))?;
        if let (Some(base), Some(f)) = (base_dir, &s.controller.model_file) {
            if f.is_relative() {
                s.controller.model_file = Some(base.join(f));
            }
        }
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text, path.parent())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Number of controller samples in a run of `duration` seconds.
    pub fn samples(&self, duration: f64) -> usize {
        (duration / self.controller.ocp.dt).round() as usize
    }

    pub fn substeps(&self) -> usize {
        (self.controller.ocp.dt / self.sim.plant_dt).round() as usize
    }
}

fn span_hint(e: &toml::de::Error) -> String {
    match e.span() {
        Some(r) => format!(" (at byte {})", r.start),
        None => String::new(),
    }
}
