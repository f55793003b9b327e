//! Run configuration, read from TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dynamics::{IntegratorConfig, Thermostat};
use crate::error::{Error, Result};
use crate::potentials::TriatomicBathModel;
use crate::rdm::{RdmGrid, SoftWalls};
use crate::ves::StationarityDetector;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Run1d,
    RunMany,
    RunRdm,
    Oracle,
    Analyze,
    Extrapolate,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Run1d => "run-1d",
            Mode::RunMany => "run-many",
            Mode::RunRdm => "run-rdm",
            Mode::Oracle => "oracle",
            Mode::Analyze => "analyze",
            Mode::Extrapolate => "extrapolate",
        }
    }

    pub fn samples(self) -> bool {
        matches!(self, Mode::Run1d | Mode::RunMany | Mode::RunRdm)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VesSettings {
    /// Even Chebyshev functions `T_2 ... T_2n` for the displacement bias.
    pub basis_size: usize,
    /// Reflective wall and basis domain for x.
    pub x_wall: f64,
    /// Product basis order for the endpoint bias.
    pub max_order: usize,
    pub rdm_half_width: f64,
    pub rdm_bins: usize,
    pub wall_stiffness: f64,
}

impl Default for VesSettings {
    fn default() -> Self {
        Self {
            basis_size: 10,
            x_wall: 2.0,
            max_order: 8,
            rdm_half_width: 1.8,
            rdm_bins: 73,
            wall_stiffness: 1.0,
        }
    }
}

impl VesSettings {
    pub fn rdm_grid(&self) -> Result<RdmGrid> {
        RdmGrid::new(self.rdm_half_width, self.rdm_bins)
    }

    pub fn walls(&self) -> SoftWalls {
        SoftWalls {
            bound: self.rdm_half_width,
            stiffness: self.wall_stiffness,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisSettings {
    /// Histogram bins for x over `[-x_wall, x_wall]` (odd).
    pub x_bins: usize,
    pub p_max: f64,
    pub p_points: usize,
    pub bootstrap: usize,
    /// Production blocks per walker.
    pub blocks_per_walker: usize,
    /// Average ñ(x) with ñ(-x).
    pub symmetrize: bool,
    pub eigenvalues: usize,
    pub stationarity: StationarityDetector,
}

impl Default for AnalysisSettings {
    fn default() -> Self {
        Self {
            x_bins: 201,
            p_max: 20.0,
            p_points: 201,
            bootstrap: 200,
            blocks_per_walker: 8,
            symmetrize: true,
            eigenvalues: 5,
            stationarity: StationarityDetector::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ExtrapolateSettings {
    /// Explicit `(β, λ)` pairs.
    pub pairs: Vec<[f64; 2]>,
    /// Analyzed RDM run directories; the leading eigenvalue of each is used.
    pub runs: Vec<PathBuf>,
    /// Eigenvalue index (1-based) taken from each run.
    pub index: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub mode: Mode,
    pub beta: f64,
    pub beads: usize,
    pub dt: f64,
    pub mu: f64,
    /// MD steps per walker for each variational step.
    pub md_steps: usize,
    pub variational_steps: usize,
    pub equilibration_steps: usize,
    /// MD steps per walker under the frozen bias after optimization.
    pub production_steps: usize,
    pub sample_stride: usize,
    pub walkers: usize,
    pub seed: u64,
    /// For run-rdm: sample the full model instead of the one-dimensional one.
    pub many_body: bool,
    /// Write a checkpoint every this many variational steps (0: only at the end).
    pub checkpoint_every: usize,
    pub com_removal: bool,
    pub out: PathBuf,
    /// Run directory read by analyze.
    pub input: Option<PathBuf>,
    pub model: TriatomicBathModel,
    pub thermostat: Thermostat,
    pub ves: VesSettings,
    pub analysis: AnalysisSettings,
    pub extrapolate: ExtrapolateSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Run1d,
            beta: 5000.0,
            beads: 400,
            dt: 10.0,
            mu: 1e-4,
            md_steps: 12500,
            variational_steps: 400,
            equilibration_steps: 2000,
            production_steps: 50000,
            sample_stride: 1,
            walkers: 16,
            seed: 1,
            many_body: false,
            checkpoint_every: 10,
            com_removal: true,
            out: PathBuf::from("run"),
            input: None,
            model: TriatomicBathModel::default(),
            thermostat: Thermostat::Pile {
                gamma0: 1e-3,
                gamma_x: None,
            },
            ves: VesSettings::default(),
            analysis: AnalysisSettings::default(),
            extrapolate: ExtrapolateSettings {
                index: 1,
                ..Default::default()
            },
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let c: RunConfig = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Parse(e.to_string()))
    }

    /// Whether the sampled system is the full model with mobile anchors.
    pub fn is_many_body(&self) -> bool {
        match self.mode {
            Mode::RunMany => true,
            Mode::RunRdm => self.many_body,
            _ => false,
        }
    }

    pub fn integrator(&self) -> IntegratorConfig {
        IntegratorConfig {
            dt: self.dt,
            wall: if self.mode == Mode::RunRdm {
                f64::INFINITY
            } else {
                self.ves.x_wall
            },
            com_removal: self.com_removal && self.is_many_body(),
            thermostat: self.thermostat.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("beta", self.beta),
            ("dt", self.dt),
            ("mu", self.mu),
            ("x_wall", self.ves.x_wall),
            ("p_max", self.analysis.p_max),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be positive and finite, got {v}")));
            }
        }
        if self.beads < 2 {
            return Err(Error::Config("beads must be at least 2".into()));
        }
        if self.walkers < 1 {
            return Err(Error::Config("walker count must be at least 1".into()));
        }
        if self.mode.samples() && (self.md_steps == 0 || self.sample_stride == 0) {
            return Err(Error::Config("md_steps and sample_stride must be positive".into()));
        }
        if self.analysis.x_bins % 2 == 0 || self.analysis.x_bins < 3 {
            return Err(Error::Config("x_bins must be odd and at least 3".into()));
        }
        if self.analysis.blocks_per_walker == 0 {
            return Err(Error::Config("blocks_per_walker must be positive".into()));
        }
        if self.ves.basis_size == 0 {
            return Err(Error::Config("basis_size must be positive".into()));
        }
        self.ves.rdm_grid()?;
        self.model.validate()?;
        Ok(())
    }
}
