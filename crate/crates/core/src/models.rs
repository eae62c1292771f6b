//! Built-in model ingredients: the adhesion velocity `(b, g)` of the non-local
//! system and the energy `u` of the local system, with validators for the
//! hypotheses the limit theorems rely on.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quadrature::advance;

const TWO_PI: f64 = 2.0 * std::f64::consts::PI;

/// Built-in smooth vector fields `b`, all truncated Fourier series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum VelocityFieldSpec {
    Zero,
    /// `b(x) = A sin(2π k x_axis) e_axis`.
    Sine {
        amplitude: f64,
        #[serde(default)]
        axis: usize,
        #[serde(default = "one")]
        frequency: i32,
    },
    /// `b = −∇V` with the even potential `V(x) = −(κ/2π) Σⱼ cos(2π xⱼ)`,
    /// i.e. `b(x) = −κ Σⱼ sin(2π xⱼ) eⱼ`, pointing towards the origin.
    Attraction { strength: f64 },
    /// General truncated series.
    Fourier { modes: Vec<FourierMode> },
}

fn one() -> i32 {
    1
}

/// `a cos(2π k·x) + s sin(2π k·x)` with vector coefficients `a`, `s`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FourierMode {
    pub wavevector: Vec<i32>,
    #[serde(default)]
    pub cos: Vec<f64>,
    #[serde(default)]
    pub sin: Vec<f64>,
}

/// Built-in Lipschitz nonlinearities `g: [0, ∞) → ℝ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InteractionSpec {
    Zero,
    /// `g(z) = min(z, cap)`.
    Truncated { cap: f64 },
    /// `g(z) = z / (1 + z)`.
    Saturating,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VelocityModelSpec {
    pub field: VelocityFieldSpec,
    pub interaction: InteractionSpec,
}

/// Velocity ingredients of the non-local system with verified constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdhesionVelocityModel {
    dim: usize,
    spec: VelocityModelSpec,
    modes: Vec<FourierMode>,
    b_sup: f64,
    lip_g: f64,
    growth_g: f64,
}

impl AdhesionVelocityModel {
    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn spec(&self) -> &VelocityModelSpec {
        &self.spec
    }
    /// `‖b‖_∞`.
    pub fn b_sup(&self) -> f64 {
        self.b_sup
    }
    /// `Lip(g)`.
    pub fn lip_g(&self) -> f64 {
        self.lip_g
    }
    /// `c` with `g(z) ≤ c(1 + z)`.
    pub fn growth_g(&self) -> f64 {
        self.growth_g
    }

    /// A-priori bound `2c‖b‖_∞` on the drift of a unit-mass configuration.
    pub fn drift_bound(&self) -> f64 {
        2.0 * self.growth_g * self.b_sup
    }

    pub fn is_trivial(&self) -> bool {
        self.modes.is_empty() || matches!(self.spec.interaction, InteractionSpec::Zero)
    }

    pub fn g(&self, z: f64) -> f64 {
        match self.spec.interaction {
            InteractionSpec::Zero => 0.0,
            InteractionSpec::Truncated { cap } => z.min(cap),
            InteractionSpec::Saturating => z / (1.0 + z),
        }
    }

    /// Evaluates `b(x)` into `out`.
    pub fn b(&self, x: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        for mode in &self.modes {
            let phase = TWO_PI
                * mode
                    .wavevector
                    .iter()
                    .zip(x)
                    .map(|(k, xi)| *k as f64 * xi)
                    .sum::<f64>();
            let (s, c) = phase.sin_cos();
            for j in 0..self.dim {
                out[j] += mode.cos.get(j).copied().unwrap_or(0.0) * c
                    + mode.sin.get(j).copied().unwrap_or(0.0) * s;
            }
        }
    }

    /// `∫ b` over the torus, read off the constant Fourier mode.
    pub fn b_mean(&self) -> Vec<f64> {
        let mut mean = vec![0.0; self.dim];
        for mode in self.modes.iter().filter(|m| m.wavevector.iter().all(|&k| k == 0)) {
            for (j, v) in mean.iter_mut().enumerate() {
                *v += mode.cos.get(j).copied().unwrap_or(0.0);
            }
        }
        mean
    }
}

fn max_abs_field(model: &AdhesionVelocityModel, per_axis: usize, offset: f64) -> f64 {
    let dim = model.dim;
    let mut idx = vec![0usize; dim];
    let mut x = vec![0.0; dim];
    let mut b = vec![0.0; dim];
    let mut sup: f64 = 0.0;
    loop {
        for (j, &i) in idx.iter().enumerate() {
            x[j] = -0.5 + (i as f64 + offset) / per_axis as f64;
        }
        model.b(&x, &mut b);
        sup = sup.max(b.iter().map(|v| v * v).sum::<f64>().sqrt());
        if !advance(&mut idx, per_axis) {
            break;
        }
    }
    sup
}

fn sup_grid(dim: usize) -> usize {
    match dim {
        1 => 4096,
        2 => 256,
        _ => 32,
    }
}

/// Builds a velocity model and computes its constants.
pub fn build_velocity_model(dim: usize, spec: &VelocityModelSpec) -> Result<AdhesionVelocityModel> {
    if dim == 0 {
        return Err(Error::InvalidParameter("dimension must be positive".into()));
    }
    let (lip_g, growth_g) = match spec.interaction {
        InteractionSpec::Zero => (0.0, 0.0),
        InteractionSpec::Truncated { cap } => {
            if !(cap > 0.0 && cap.is_finite()) {
                return Err(Error::InvalidParameter(format!(
                    "truncation cap must be positive and finite, got {cap}"
                )));
            }
            (1.0, 1.0)
        }
        InteractionSpec::Saturating => (1.0, 1.0),
    };
    let modes = match &spec.field {
        VelocityFieldSpec::Zero => Vec::new(),
        VelocityFieldSpec::Sine { amplitude, axis, frequency } => {
            if *axis >= dim {
                return Err(Error::InvalidParameter(format!("axis {axis} out of range for d = {dim}")));
            }
            let mut wavevector = vec![0; dim];
            wavevector[*axis] = *frequency;
            let mut sin = vec![0.0; dim];
            sin[*axis] = *amplitude;
            vec![FourierMode { wavevector, cos: vec![0.0; dim], sin }]
        }
        VelocityFieldSpec::Attraction { strength } => (0..dim)
            .map(|j| {
                let mut wavevector = vec![0; dim];
                wavevector[j] = 1;
                let mut sin = vec![0.0; dim];
                sin[j] = -strength;
                FourierMode { wavevector, cos: vec![0.0; dim], sin }
            })
            .collect(),
        VelocityFieldSpec::Fourier { modes } => {
            for m in modes {
                if m.wavevector.len() != dim || m.cos.len() > dim || m.sin.len() > dim {
                    return Err(Error::InvalidParameter(format!(
                        "Fourier mode {:?} does not match d = {dim}",
                        m.wavevector
                    )));
                }
            }
            modes.clone()
        }
    };
    if modes
        .iter()
        .any(|m| m.cos.iter().chain(&m.sin).any(|c| !c.is_finite()))
    {
        return Err(Error::InvalidParameter("non-finite Fourier coefficient".into()));
    }
    let mut model = AdhesionVelocityModel {
        dim,
        spec: spec.clone(),
        modes,
        b_sup: 0.0,
        lip_g,
        growth_g,
    };
    model.b_sup = max_abs_field(&model, sup_grid(dim), 0.0);
    Ok(model)
}

/// Sampled checks of the velocity model constants.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VelocityReport {
    pub b_sup: f64,
    /// `‖b‖_∞` re-sampled on a staggered grid.
    pub b_sup_resampled: f64,
    pub lip_g: f64,
    pub lip_g_sampled: f64,
    pub growth_g: f64,
    pub growth_violation: f64,
    pub passed: bool,
}

pub fn validate_velocity_model(model: &AdhesionVelocityModel) -> VelocityReport {
    let resampled = max_abs_field(model, sup_grid(model.dim), 0.5).max(model.b_sup);
    let zs: Vec<f64> = (0..=20_000).map(|i| i as f64 * 1e-3).collect();
    let mut lip_sampled: f64 = 0.0;
    let mut growth_violation: f64 = 0.0;
    for w in zs.windows(2) {
        let r = (model.g(w[1]) - model.g(w[0])).abs() / (w[1] - w[0]);
        lip_sampled = lip_sampled.max(r);
    }
    for &z in &zs {
        growth_violation = growth_violation.max(model.g(z) - model.growth_g * (1.0 + z));
    }
    let passed = lip_sampled <= model.lip_g + 1e-9
        && growth_violation <= 1e-12
        && (resampled - model.b_sup).abs() <= 1e-6 * model.b_sup.max(1.0);
    VelocityReport {
        b_sup: model.b_sup,
        b_sup_resampled: resampled,
        lip_g: model.lip_g,
        lip_g_sampled: lip_sampled,
        growth_g: model.growth_g,
        growth_violation,
        passed,
    }
}

/// Built-in energy families for the local system.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum EnergySpec {
    /// `u ≡ 0`: the limit is the heat equation.
    Zero,
    /// `u″(z) = c (1 − z)⁺` with `u(0) = u′(0) = 0`.
    Derouler { c: f64 },
}

/// Energy `u` with internal energy `F(z) = u(z) + z log z`, pressure
/// `P(z) = z u′(z) − u(z) + z` and `λ = sup |z u″(z)|`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyModel {
    spec: EnergySpec,
    lambda: f64,
}

pub fn build_energy_model(spec: EnergySpec) -> Result<EnergyModel> {
    let lambda = match spec {
        EnergySpec::Zero => 0.0,
        EnergySpec::Derouler { c } => {
            if !c.is_finite() {
                return Err(Error::InvalidParameter(format!("non-finite c = {c}")));
            }
            // c z (1 − z) peaks at z = 1/2
            c.abs() / 4.0
        }
    };
    if lambda >= 1.0 {
        return Err(Error::InvalidParameter(format!(
            "lambda = {lambda} violates sup |z u''(z)| < 1"
        )));
    }
    Ok(EnergyModel { spec, lambda })
}

impl EnergyModel {
    pub fn zero() -> Self {
        Self { spec: EnergySpec::Zero, lambda: 0.0 }
    }

    pub fn spec(&self) -> EnergySpec {
        self.spec
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn is_zero(&self) -> bool {
        match self.spec {
            EnergySpec::Zero => true,
            EnergySpec::Derouler { c } => c == 0.0,
        }
    }

    pub fn u(&self, z: f64) -> f64 {
        match self.spec {
            EnergySpec::Zero => 0.0,
            EnergySpec::Derouler { c } => {
                if z <= 1.0 {
                    c * (z * z / 2.0 - z * z * z / 6.0)
                } else {
                    c / 3.0 + c / 2.0 * (z - 1.0)
                }
            }
        }
    }

    pub fn du(&self, z: f64) -> f64 {
        match self.spec {
            EnergySpec::Zero => 0.0,
            EnergySpec::Derouler { c } => {
                if z <= 1.0 {
                    c * (z - z * z / 2.0)
                } else {
                    c / 2.0
                }
            }
        }
    }

    pub fn d2u(&self, z: f64) -> f64 {
        match self.spec {
            EnergySpec::Zero => 0.0,
            EnergySpec::Derouler { c } => c * (1.0 - z).max(0.0),
        }
    }

    /// `F(z) = u(z) + z log z`, with `F(0) = 0`.
    pub fn internal_energy(&self, z: f64) -> f64 {
        self.u(z) + xlogx(z)
    }

    /// `F′(z) = u′(z) + log z + 1`, with `z` floored at `floor`.
    pub fn internal_energy_deriv(&self, z: f64, floor: f64) -> f64 {
        self.du(z) + z.max(floor).ln() + 1.0
    }

    /// `P(z) = z u′(z) − u(z) + z`.
    pub fn pressure(&self, z: f64) -> f64 {
        z * self.du(z) - self.u(z) + z
    }

    /// `P′(z) = z u″(z) + 1`.
    pub fn pressure_deriv(&self, z: f64) -> f64 {
        z * self.d2u(z) + 1.0
    }
}

/// `z log z` with `0 log 0 = 0`.
#[inline]
pub fn xlogx(z: f64) -> f64 {
    if z > 0.0 {
        z * z.ln()
    } else {
        0.0
    }
}

/// Outcome of a single validator check.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub worst_residual: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnergyReport {
    pub dim: usize,
    pub lambda: f64,
    pub alpha: f64,
    /// Set when `λ` is within 5% of the bound 1.
    pub near_bound: bool,
    pub checks: Vec<Check>,
    pub passed: bool,
}

fn log_grid(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    let (a, b) = (lo.ln(), hi.ln());
    (0..count)
        .map(|i| (a + (b - a) * i as f64 / (count - 1) as f64).exp())
        .collect()
}

/// Worst violation of "slopes are non-decreasing" for samples of `f` on `xs`.
fn convexity_residual(xs: &[f64], ys: &[f64]) -> f64 {
    let slopes: Vec<f64> = xs
        .windows(2)
        .zip(ys.windows(2))
        .map(|(x, y)| (y[1] - y[0]) / (x[1] - x[0]))
        .collect();
    slopes
        .windows(2)
        .map(|s| {
            let scale = s[0].abs().max(s[1].abs()).max(1.0);
            ((s[0] - s[1]) / scale).max(0.0)
        })
        .fold(0.0, f64::max)
}

/// Checks the existence, uniqueness and `λ < 1` hypotheses on log-spaced grids
/// `z ∈ [1e-6, 1e3]`. `alpha` defaults to `d/(d+2) + 0.01`.
pub fn validate_energy_model(model: &EnergyModel, dim: usize, alpha: Option<f64>) -> EnergyReport {
    let alpha = alpha.unwrap_or(dim as f64 / (dim as f64 + 2.0) + 0.01);
    let tol = 1e-9;
    let zs = log_grid(1e-6, 1e3, 2001);
    let mut checks = Vec::new();

    checks.push(Check {
        name: "lambda_below_one".into(),
        passed: model.lambda < 1.0,
        worst_residual: model.lambda,
    });

    let mut worst: f64 = 0.0;
    for &z in &zs {
        let zu = (z * model.d2u(z)).abs();
        worst = worst.max(zu - model.lambda);
        let p = model.pressure_deriv(z);
        worst = worst.max((1.0 - model.lambda) - p).max(p - (1.0 + model.lambda));
    }
    checks.push(Check {
        name: "pressure_slope_in_band".into(),
        passed: worst <= tol,
        worst_residual: worst.max(0.0),
    });

    let mut fd_worst: f64 = 0.0;
    for &z in &zs {
        let e = 1e-5 * z;
        let fd = (model.pressure(z + e) - model.pressure(z - e)) / (2.0 * e);
        fd_worst = fd_worst.max((fd - model.pressure_deriv(z)).abs());
    }
    checks.push(Check {
        name: "pressure_closed_form".into(),
        passed: fd_worst <= 1e-6,
        worst_residual: fd_worst,
    });

    let fs: Vec<f64> = zs.iter().map(|&z| model.internal_energy(z)).collect();
    let conv = convexity_residual(&zs, &fs);
    checks.push(Check {
        name: "internal_energy_convex".into(),
        passed: conv <= tol,
        worst_residual: conv,
    });

    let at_zero = model.internal_energy(1e-12).abs().max(model.internal_energy(0.0).abs());
    checks.push(Check {
        name: "internal_energy_vanishes_at_zero".into(),
        passed: at_zero <= 1e-9,
        worst_residual: at_zero,
    });

    let tail: Vec<f64> = zs
        .iter()
        .filter(|&&z| z >= 10.0)
        .map(|&z| model.internal_energy(z) / z)
        .collect();
    let mut drop: f64 = 0.0;
    for w in tail.windows(2) {
        drop = drop.max(w[0] - w[1]);
    }
    let growth = tail.last().copied().unwrap_or(0.0) - tail.first().copied().unwrap_or(0.0);
    checks.push(Check {
        name: "internal_energy_superlinear".into(),
        passed: drop <= tol && growth > 0.0,
        worst_residual: drop,
    });

    let probe: Vec<(f64, f64)> = zs
        .iter()
        .filter(|&&z| z <= 1e-1)
        .map(|&z| (z, model.internal_energy(z) / z.powf(alpha)))
        .collect();
    let probe_min = probe.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
    let near_zero = probe.first().map(|p| p.1.abs()).unwrap_or(0.0);
    let at_milli = probe
        .iter()
        .min_by(|a, b| (a.0 - 1e-3).abs().total_cmp(&(b.0 - 1e-3).abs()))
        .map(|p| p.1.abs())
        .unwrap_or(0.0);
    checks.push(Check {
        name: "lower_power_bound_at_zero".into(),
        passed: alpha < 1.0 && probe_min.is_finite() && near_zero <= at_milli,
        worst_residual: -probe_min.min(0.0),
    });

    // s ↦ s^d F(s^{-d}) equals F(z)/z at z = s^{-d}
    let ss: Vec<f64> = zs.iter().rev().map(|&z| z.powf(-1.0 / dim as f64)).collect();
    let phis: Vec<f64> = zs.iter().rev().map(|&z| model.internal_energy(z) / z).collect();
    let mut rise: f64 = 0.0;
    for w in phis.windows(2) {
        rise = rise.max((w[1] - w[0]) / w[0].abs().max(1.0));
    }
    let conv_s = convexity_residual(&ss, &phis);
    checks.push(Check {
        name: "displacement_convexity".into(),
        passed: rise <= tol && conv_s <= 1e-7,
        worst_residual: rise.max(conv_s),
    });

    let passed = checks.iter().all(|c| c.passed);
    EnergyReport {
        dim,
        lambda: model.lambda,
        alpha,
        near_bound: model.lambda >= 0.95,
        checks,
        passed,
    }
}
