//! Study configuration, read from TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::grid::DensityField;
use crate::kernel::{beta_bound, KernelSpec};
use crate::measures::{min_resolving_grid, TestFunction};
use crate::models::{build_energy_model, build_velocity_model, EnergySpec, VelocityModelSpec};
use crate::pde::LocalForm;
use crate::sde::{default_dt, LocalOrdering, ParticleSystem};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SystemKind {
    Nonlocal,
    Local,
}

/// Initial law `ρ̄` of the particles and initial datum of the PDE.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitialDensity {
    #[default]
    Uniform,
    /// `1 + a cos(2π k x_axis)`.
    Cosine {
        amplitude: f64,
        #[serde(default = "one_u32")]
        frequency: u32,
        #[serde(default)]
        axis: usize,
    },
}

fn one_u32() -> u32 {
    1
}
fn one_usize() -> usize {
    1
}
fn yes() -> bool {
    true
}

impl InitialDensity {
    pub fn value(&self, x: &[f64]) -> f64 {
        match *self {
            InitialDensity::Uniform => 1.0,
            InitialDensity::Cosine { amplitude, frequency, axis } => {
                1.0 + amplitude * (2.0 * std::f64::consts::PI * frequency as f64 * x[axis]).cos()
            }
        }
    }

    /// Nodal samples on an `M`-point grid.
    pub fn field(&self, dim: usize, m: usize) -> Result<DensityField> {
        self.validate(dim)?;
        Ok(DensityField::from_fn(dim, m, |x| self.value(x)))
    }

    /// `∫ ρ̄²`.
    pub fn l2_norm_sq(&self) -> f64 {
        match *self {
            InitialDensity::Uniform => 1.0,
            InitialDensity::Cosine { amplitude, .. } => 1.0 + amplitude * amplitude / 2.0,
        }
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        if let InitialDensity::Cosine { amplitude, frequency, axis } = *self {
            if !(amplitude.abs() <= 1.0) || frequency == 0 || axis >= dim {
                return Err(Error::Config(format!(
                    "cosine density needs |amplitude| <= 1, frequency >= 1 and axis < d; got {self:?}"
                )));
            }
        }
        Ok(())
    }
}

/// Grid used to draw i.i.d. initial samples, fine enough to stand in for the
/// continuous density.
pub fn sampling_grid(dim: usize) -> usize {
    match dim {
        1 => 4096,
        2 => 512,
        _ => 64,
    }
}

/// Default grid size per axis.
pub fn default_grid(dim: usize) -> usize {
    match dim {
        1 => 256,
        2 => 128,
        _ => 32,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyConfig {
    pub system: SystemKind,
    #[serde(default = "one_usize")]
    pub dim: usize,
    pub beta: f64,
    #[serde(default)]
    pub override_beta_bound: bool,
    pub n: Vec<usize>,
    #[serde(default)]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub seed_count: Option<usize>,
    #[serde(default)]
    pub base_seed: u64,
    pub horizon: f64,
    /// Particle time step; defaults to the diffusive heuristic.
    #[serde(default)]
    pub dt: Option<f64>,
    /// Base grid size; raised per `n` to resolve the kernel.
    #[serde(default)]
    pub m: Option<usize>,
    #[serde(default)]
    pub record_times: Vec<f64>,
    #[serde(default)]
    pub initial: InitialDensity,
    #[serde(default)]
    pub velocity: Option<VelocityModelSpec>,
    #[serde(default)]
    pub energy: Option<EnergySpec>,
    #[serde(default)]
    pub ordering: LocalOrdering,
    #[serde(default = "diffusion_form")]
    pub local_form: LocalForm,
    #[serde(default)]
    pub pde_dt: Option<f64>,
    #[serde(default)]
    pub diag_every: Option<u64>,
    #[serde(default = "yes")]
    pub write_snapshots: bool,
    #[serde(default)]
    pub observables: Vec<TestFunction>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

fn diffusion_form() -> LocalForm {
    LocalForm::Diffusion
}

impl StudyConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serialises");
        hex::encode(Sha256::digest(&json))
    }

    pub fn seeds(&self) -> Vec<u64> {
        if !self.seeds.is_empty() {
            return self.seeds.clone();
        }
        let count = self.seed_count.unwrap_or(1);
        (0..count as u64).map(|k| self.base_seed + k).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::Config("dim must be positive".into()));
        }
        if self.n.is_empty() || self.n.contains(&0) {
            return Err(Error::Config("n must list positive particle counts".into()));
        }
        if !(self.horizon >= 0.0 && self.horizon.is_finite()) {
            return Err(Error::Config(format!("horizon must be >= 0, got {}", self.horizon)));
        }
        if let Some(dt) = self.dt {
            if !(dt > 0.0) {
                return Err(Error::Config(format!("dt must be positive, got {dt}")));
            }
        }
        if self.beta > beta_bound(self.dim) + 1e-12 && !self.override_beta_bound {
            return Err(Error::BetaOutOfRange { beta: self.beta, bound: beta_bound(self.dim), dim: self.dim });
        }
        self.initial.validate(self.dim)?;
        self.particle_system()?;
        Ok(())
    }

    pub fn kernel(&self, n: usize) -> Result<KernelSpec> {
        if self.override_beta_bound {
            KernelSpec::exploratory(self.dim, self.beta, n as u64)
        } else {
            KernelSpec::new(self.dim, self.beta, n as u64)
        }
    }

    /// `max(M_base, ⌈8 n^{β/d}⌉)`, rounded up to a power of two.
    pub fn grid(&self, n: usize) -> Result<usize> {
        let kernel = self.kernel(n)?;
        let base = self.m.unwrap_or_else(|| default_grid(self.dim));
        Ok(base.max(min_resolving_grid(&kernel)).next_power_of_two())
    }

    pub fn particle_system(&self) -> Result<ParticleSystem> {
        match self.system {
            SystemKind::Nonlocal => {
                let spec = self
                    .velocity
                    .as_ref()
                    .ok_or_else(|| Error::Config("nonlocal system needs a [velocity] table".into()))?;
                Ok(ParticleSystem::NonLocal(build_velocity_model(self.dim, spec)?))
            }
            SystemKind::Local => {
                let spec = self
                    .energy
                    .ok_or_else(|| Error::Config("local system needs an [energy] table".into()))?;
                Ok(ParticleSystem::Local { energy: build_energy_model(spec)?, ordering: self.ordering })
            }
        }
    }

    /// Particle step for `n`: the configured one or the default heuristic.
    pub fn dt(&self, n: usize) -> Result<f64> {
        if let Some(dt) = self.dt {
            return Ok(dt);
        }
        let kernel = self.kernel(n)?;
        let m = self.grid(n)?;
        Ok(default_dt(&kernel, m, self.particle_system()?.drift_bound(&kernel)))
    }

    pub fn output_dir(&self) -> PathBuf {
        self.output_dir.clone().unwrap_or_else(|| PathBuf::from("out"))
    }
}
