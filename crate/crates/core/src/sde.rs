//! Euler–Maruyama integration of the two particle systems with `σ = √2 Id`.

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::diagnostics::diagnose_field;
use crate::error::{Error, Result};
use crate::grid::{centered_gradient, sample_offsets, DensityField};
use crate::kernel::KernelSpec;
use crate::measures::{interpolate_values, mollify, KernelConvolver, MollifyMethod, ParticleConfig, TestFunction};
use crate::models::{AdhesionVelocityModel, EnergyModel};
use crate::parallel::CHUNK;
use crate::record::{Checkpoint, DiagnosticSample, ObservableTrace, RunRecord, Snapshot};
use crate::rng::{self, Purpose};
use crate::torus::wrap;

/// How `−∇wⁿ ∗ u′(μ̃)` is discretised.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LocalOrdering {
    /// Convolve `u′(μ̃)` with the sampled `−∇wⁿ`.
    #[default]
    KernelGradient,
    /// Convolve the centred-difference `−∇u′(μ̃)` with the sampled `wⁿ`.
    DensityGradient,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ParticleSystem {
    /// Drift `b ∗ g(μ ∗ wⁿ)`.
    NonLocal(AdhesionVelocityModel),
    /// Drift `−∇wⁿ ∗ u′(μ ∗ wⁿ)`.
    Local { energy: EnergyModel, ordering: LocalOrdering },
}

impl ParticleSystem {
    pub fn name(&self) -> &'static str {
        match self {
            ParticleSystem::NonLocal(_) => "nonlocal",
            ParticleSystem::Local { .. } => "local",
        }
    }

    pub fn is_driftless(&self) -> bool {
        match self {
            ParticleSystem::NonLocal(vm) => vm.is_trivial(),
            ParticleSystem::Local { energy, .. } => energy.is_zero(),
        }
    }

    /// A-priori bound on `|drift|`: `2c‖b‖_∞` for the non-local system,
    /// `‖∇wⁿ‖₁ sup|u′|` for the local one.
    pub fn drift_bound(&self, kernel: &KernelSpec) -> f64 {
        match self {
            ParticleSystem::NonLocal(vm) => vm.drift_bound(),
            ParticleSystem::Local { energy, .. } => {
                if energy.is_zero() {
                    0.0
                } else {
                    let sup_du = (0..=4000)
                        .map(|i| energy.du(i as f64 * 1e-3).abs())
                        .fold(0.0, f64::max);
                    kernel.grad_l1_norm() * sup_du
                }
            }
        }
    }

    /// Energy whose functionals are reported in diagnostics.
    pub fn diagnostic_energy(&self) -> EnergyModel {
        match self {
            ParticleSystem::NonLocal(_) => EnergyModel::zero(),
            ParticleSystem::Local { energy, .. } => *energy,
        }
    }
}

/// Default step `min(h²/4, 0.1 · half-width / drift bound)`.
pub fn default_dt(kernel: &KernelSpec, m: usize, drift_bound: f64) -> f64 {
    let h = 1.0 / m as f64;
    let diffusive = h * h / 4.0;
    if drift_bound > 0.0 {
        diffusive.min(0.1 * kernel.support_half_width() / drift_bound)
    } else {
        diffusive
    }
}

/// Evaluates the drift of a particle system on a fixed grid, reusing the
/// sampled kernel spectra between steps.
#[derive(Debug)]
pub struct DriftEngine {
    system: ParticleSystem,
    kernel: KernelSpec,
    m: usize,
    kc: KernelConvolver,
    b_spectra: Vec<Vec<Complex64>>,
}

impl DriftEngine {
    pub fn new(system: &ParticleSystem, kernel: &KernelSpec, m: usize) -> Result<Self> {
        let dim = kernel.dim();
        let kc = KernelConvolver::new(kernel, m)?;
        let b_spectra = match system {
            ParticleSystem::NonLocal(vm) => {
                if vm.dim() != dim {
                    return Err(Error::DimensionMismatch { expected: dim, got: vm.dim() });
                }
                let vol = (1.0 / m as f64).powi(dim as i32);
                let mut b = vec![0.0; dim];
                (0..dim)
                    .map(|axis| {
                        let sampled = sample_offsets(dim, m, |x| {
                            vm.b(x, &mut b);
                            vol * b[axis]
                        });
                        kc.convolver().spectrum(&sampled)
                    })
                    .collect()
            }
            ParticleSystem::Local { .. } => Vec::new(),
        };
        Ok(Self { system: system.clone(), kernel: kernel.clone(), m, kc, b_spectra })
    }

    pub fn kernel(&self) -> &KernelSpec {
        &self.kernel
    }
    pub fn m(&self) -> usize {
        self.m
    }
    pub fn system(&self) -> &ParticleSystem {
        &self.system
    }
    pub(crate) fn convolver(&self) -> &KernelConvolver {
        &self.kc
    }

    pub fn mollify(&self, particles: &ParticleConfig) -> Result<DensityField> {
        mollify(particles, &self.kernel, self.m, MollifyMethod::Direct)
    }

    /// Velocity field on the grid, one component per axis.
    pub fn velocity_grid(&self, field: &DensityField) -> Vec<Vec<f64>> {
        let dim = field.dim();
        let m = field.m();
        if self.system.is_driftless() {
            return vec![vec![0.0; field.len()]; dim];
        }
        match &self.system {
            ParticleSystem::NonLocal(vm) => {
                let gvals: Vec<f64> = field.values().iter().map(|&z| vm.g(z)).collect();
                self.b_spectra
                    .iter()
                    .map(|spec| self.kc.convolver().convolve_spectrum(&gvals, spec))
                    .collect()
            }
            ParticleSystem::Local { energy, ordering } => {
                let du: Vec<f64> = field.values().iter().map(|&z| energy.du(z)).collect();
                match ordering {
                    LocalOrdering::KernelGradient => self
                        .kc
                        .grad_smooth(&du)
                        .into_iter()
                        .map(|v| v.into_iter().map(|x| -x).collect())
                        .collect(),
                    LocalOrdering::DensityGradient => (0..dim)
                        .map(|axis| {
                            let g: Vec<f64> =
                                centered_gradient(&du, dim, m, axis).into_iter().map(|x| -x).collect();
                            self.kc.smooth(&g)
                        })
                        .collect(),
                }
            }
        }
    }

    /// Drift at the particles given their mollified density, as a flat `n × d` array.
    pub fn drift_with_field(&self, field: &DensityField, particles: &ParticleConfig) -> Vec<f64> {
        let dim = particles.dim();
        let n = particles.len();
        if self.system.is_driftless() {
            return vec![0.0; n * dim];
        }
        let grid = self.velocity_grid(field);
        let mut out = vec![0.0; n * dim];
        for (axis, comp) in grid.iter().enumerate() {
            let at = interpolate_values(comp, dim, field.m(), particles.positions());
            for (i, v) in at.into_iter().enumerate() {
                out[i * dim + axis] = v;
            }
        }
        out
    }

    pub fn drift(&self, particles: &ParticleConfig) -> Result<Vec<f64>> {
        if particles.dim() != self.kernel.dim() {
            return Err(Error::DimensionMismatch { expected: self.kernel.dim(), got: particles.dim() });
        }
        if self.system.is_driftless() {
            return Ok(vec![0.0; particles.positions().len()]);
        }
        let field = self.mollify(particles)?;
        Ok(self.drift_with_field(&field, particles))
    }
}

/// `b ∗ g(μ ∗ wⁿ)` at the particles.
pub fn drift_nonlocal(
    particles: &ParticleConfig,
    kernel: &KernelSpec,
    vm: &AdhesionVelocityModel,
    m: usize,
) -> Result<Vec<f64>> {
    DriftEngine::new(&ParticleSystem::NonLocal(vm.clone()), kernel, m)?.drift(particles)
}

/// `−∇wⁿ ∗ u′(μ ∗ wⁿ)` at the particles.
pub fn drift_local(
    particles: &ParticleConfig,
    kernel: &KernelSpec,
    em: &EnergyModel,
    m: usize,
    ordering: LocalOrdering,
) -> Result<Vec<f64>> {
    DriftEngine::new(&ParticleSystem::Local { energy: *em, ordering }, kernel, m)?.drift(particles)
}

/// Particle state; the noise of step `k` for particle `i` is drawn from the
/// stream `(seed, i, k)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimState {
    pub time: f64,
    pub step: u64,
    pub seed: u64,
    pub particles: ParticleConfig,
}

impl SimState {
    pub fn new(particles: ParticleConfig, seed: u64) -> Self {
        Self { time: 0.0, step: 0, seed, particles }
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint { time: self.time, step: self.step, seed: self.seed, particles: self.particles.clone() }
    }

    pub fn from_checkpoint(c: Checkpoint) -> Self {
        Self { time: c.time, step: c.step, seed: c.seed, particles: c.particles }
    }
}

/// `Xⁱ ← wrap(Xⁱ + driftⁱ dt + √(2dt) ξⁱ)` in place.
pub fn em_step_in_place(state: &mut SimState, drift: &[f64], dt: f64) -> Result<()> {
    if !(dt >= 0.0 && dt.is_finite()) {
        return Err(Error::InvalidParameter(format!("time step must be finite and >= 0, got {dt}")));
    }
    let dim = state.particles.dim();
    if drift.len() != state.particles.positions().len() {
        return Err(Error::DimensionMismatch { expected: state.particles.positions().len(), got: drift.len() });
    }
    if dt > 0.0 {
        let noise = (2.0 * dt).sqrt();
        let (seed, step) = (state.seed, state.step);
        state
            .particles
            .positions_mut()
            .par_chunks_mut(CHUNK * dim)
            .zip(drift.par_chunks(CHUNK * dim))
            .enumerate()
            .for_each(|(c, (x, b))| {
                let mut rng = rng::stream(seed, Purpose::Dynamics, c as u64, step);
                for (xj, bj) in x.iter_mut().zip(b) {
                    let xi: f64 = StandardNormal.sample(&mut rng);
                    *xj = wrap(*xj + bj * dt + noise * xi);
                }
            });
    }
    state.time += dt;
    state.step += 1;
    Ok(())
}

pub fn em_step(state: &SimState, drift: &[f64], dt: f64) -> Result<SimState> {
    let mut next = state.clone();
    em_step_in_place(&mut next, drift, dt)?;
    Ok(next)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimOptions {
    pub horizon: f64,
    pub dt: f64,
    /// Times in `[0, horizon]` at which snapshots, observables and
    /// checkpoints are recorded; `0` and `horizon` are always included.
    pub record_times: Vec<f64>,
    pub m: usize,
    /// Additional diagnostics every this many steps.
    pub diag_every: Option<u64>,
    /// Compute diagnostics at all (they need two extra convolutions).
    pub diagnostics: bool,
    pub snapshots: bool,
    pub checkpoints: bool,
    pub observables: Vec<TestFunction>,
    pub config_hash: String,
}

impl SimOptions {
    pub fn new(horizon: f64, dt: f64, m: usize) -> Self {
        Self {
            horizon,
            dt,
            record_times: Vec::new(),
            m,
            diag_every: None,
            diagnostics: true,
            snapshots: true,
            checkpoints: false,
            observables: Vec::new(),
            config_hash: String::new(),
        }
    }

    fn targets(&self, start: f64) -> Result<Vec<f64>> {
        if !(self.horizon >= 0.0 && self.horizon.is_finite()) {
            return Err(Error::InvalidParameter(format!("horizon must be >= 0, got {}", self.horizon)));
        }
        if !(self.dt > 0.0) {
            return Err(Error::InvalidParameter(format!("dt must be positive, got {}", self.dt)));
        }
        let mut t: Vec<f64> = self.record_times.clone();
        if let Some(bad) = t.iter().find(|&&x| !(0.0..=self.horizon).contains(&x)) {
            return Err(Error::InvalidParameter(format!(
                "record time {bad} outside [0, {}]",
                self.horizon
            )));
        }
        t.push(self.horizon);
        t.retain(|&x| x > start + 1e-12);
        t.sort_by(f64::total_cmp);
        t.dedup_by(|a, b| (*a - *b).abs() <= 1e-12);
        Ok(t)
    }
}

struct ObservableState {
    phi: TestFunction,
    initial: f64,
    compensator: f64,
    qv: f64,
    /// Length of the last completed step.
    last_dt: f64,
    trace: ObservableTrace,
}

impl ObservableState {
    fn new(phi: TestFunction, particles: &ParticleConfig) -> Self {
        let v = particles.integrate(|x| phi.value(x));
        Self {
            phi,
            initial: v,
            compensator: 0.0,
            qv: 0.0,
            last_dt: 0.0,
            trace: ObservableTrace {
                test_function: phi.id(),
                times: Vec::new(),
                values: Vec::new(),
                martingale: Vec::new(),
                quadratic_variation: Vec::new(),
            },
        }
    }

    /// `(∫(h·∇φ + Δφ) dμ, (2/n) ∫|∇φ|² dμ)` at the current state.
    fn rates(&self, particles: &ParticleConfig, drift: &[f64]) -> (f64, f64) {
        let dim = particles.dim();
        let n = particles.len();
        let phi = self.phi;
        let sums = crate::parallel::ordered_accumulate(n, 2, |range, buf| {
            let mut g = [0.0; 8];
            for i in range {
                let x = particles.point(i);
                phi.gradient(x, &mut g[..dim]);
                let adv: f64 = g[..dim].iter().zip(&drift[i * dim..(i + 1) * dim]).map(|(a, b)| a * b).sum();
                buf[0] += adv + phi.laplacian(x);
                buf[1] += g[..dim].iter().map(|v| v * v).sum::<f64>();
            }
        });
        let n = n as f64;
        (sums[0] / n, 2.0 * sums[1] / (n * n))
    }

    /// Trapezoidal time integration: the rates at the start of a step of
    /// length `dt` close the previous step and open this one.
    fn accumulate(&mut self, particles: &ParticleConfig, drift: &[f64], dt: f64) {
        let (gen, qv) = self.rates(particles, drift);
        let w = 0.5 * (self.last_dt + dt);
        self.compensator += w * gen;
        self.qv += w * qv;
        self.last_dt = dt;
    }

    fn record(&mut self, particles: &ParticleConfig, drift: &[f64], time: f64) {
        let (mut comp, mut qv) = (self.compensator, self.qv);
        if self.last_dt > 0.0 {
            let (g, q) = self.rates(particles, drift);
            comp += 0.5 * self.last_dt * g;
            qv += 0.5 * self.last_dt * q;
        }
        let v = particles.integrate(|x| self.phi.value(x));
        self.trace.times.push(time);
        self.trace.values.push(v);
        self.trace.martingale.push(v - self.initial - comp);
        self.trace.quadratic_variation.push(qv);
    }
}

/// Runs from `init` at time 0.
pub fn simulate(
    init: &ParticleConfig,
    system: &ParticleSystem,
    kernel: &KernelSpec,
    opts: &SimOptions,
    seed: u64,
) -> Result<RunRecord> {
    simulate_from(SimState::new(init.clone(), seed), system, kernel, opts).map(|(r, _)| r)
}

/// Runs from an arbitrary state (e.g. a checkpoint) up to `opts.horizon`.
pub fn simulate_from(
    mut state: SimState,
    system: &ParticleSystem,
    kernel: &KernelSpec,
    opts: &SimOptions,
) -> Result<(RunRecord, SimState)> {
    if state.particles.dim() != kernel.dim() {
        return Err(Error::DimensionMismatch { expected: kernel.dim(), got: state.particles.dim() });
    }
    let targets = opts.targets(state.time)?;
    let engine = DriftEngine::new(system, kernel, opts.m)?;
    let diag_energy = system.diagnostic_energy();
    let driftless = system.is_driftless();

    let mut record = RunRecord {
        config_hash: opts.config_hash.clone(),
        seed: state.seed,
        system: system.name().to_string(),
        n: state.particles.len(),
        dim: state.particles.dim(),
        dt: opts.dt,
        steps: 0,
        diagnostics: Vec::new(),
        snapshots: Vec::new(),
        distances: Vec::new(),
        observables: Vec::new(),
        checkpoints: Vec::new(),
    };
    let mut observables: Vec<ObservableState> = opts
        .observables
        .iter()
        .map(|&phi| ObservableState::new(phi, &state.particles))
        .collect();

    let observe = |state: &SimState, field: Option<&DensityField>, observables: &mut [ObservableState]| -> Result<()> {
        if observables.is_empty() {
            return Ok(());
        }
        let drift = match field {
            _ if driftless => vec![0.0; state.particles.positions().len()],
            Some(f) => engine.drift_with_field(f, &state.particles),
            None => engine.drift(&state.particles)?,
        };
        for o in observables.iter_mut() {
            o.record(&state.particles, &drift, state.time);
        }
        Ok(())
    };

    let record_point = |state: &SimState,
                        field: Option<&DensityField>,
                        record: &mut RunRecord,
                        observables: &mut [ObservableState],
                        full: bool|
     -> Result<()> {
        let owned;
        let field = match field {
            Some(f) => f,
            None => {
                owned = engine.mollify(&state.particles)?;
                &owned
            }
        };
        if opts.diagnostics {
            push_diag(&mut record.diagnostics, diagnose_field(engine.convolver(), field, &state.particles, &diag_energy, state.time));
        }
        if full {
            if opts.snapshots {
                record.snapshots.push(Snapshot { time: state.time, field: field.clone() });
            }
            if opts.checkpoints {
                record.checkpoints.push(state.checkpoint());
            }
            observe(state, Some(field), observables)?;
        }
        Ok(())
    };

    let needs_field_at_start = opts.diagnostics || opts.snapshots;
    if needs_field_at_start {
        record_point(&state, None, &mut record, &mut observables, true)?;
    } else {
        observe(&state, None, &mut observables)?;
        if opts.checkpoints {
            record.checkpoints.push(state.checkpoint());
        }
    }

    for &target in &targets {
        while state.time < target - 1e-12 {
            let h = opts.dt.min(target - state.time);
            let step_result = (|| -> Result<Option<DensityField>> {
                if driftless {
                    Ok(None)
                } else {
                    engine.mollify(&state.particles).map(Some)
                }
            })();
            let field = step_result.map_err(|e| Error::Step {
                time: state.time,
                step: state.step,
                source: Box::new(e),
            })?;
            let drift = match &field {
                Some(f) => engine.drift_with_field(f, &state.particles),
                None => vec![0.0; state.particles.positions().len()],
            };
            if drift.iter().any(|v| !v.is_finite()) {
                return Err(Error::Step {
                    time: state.time,
                    step: state.step,
                    source: Box::new(Error::Unstable {
                        time: state.time,
                        step: state.step,
                        reason: "non-finite drift".into(),
                    }),
                });
            }
            for o in observables.iter_mut() {
                o.accumulate(&state.particles, &drift, h);
            }
            em_step_in_place(&mut state, &drift, h).map_err(|e| Error::Step {
                time: state.time,
                step: state.step,
                source: Box::new(e),
            })?;
            if (state.time - target).abs() <= 1e-9 * opts.dt {
                state.time = target;
            }
            record.steps += 1;
            let at_target = state.time >= target - 1e-12;
            let periodic = opts.diagnostics
                && opts.diag_every.is_some_and(|k| k > 0 && record.steps % k == 0);
            if periodic && !at_target {
                record_point(&state, None, &mut record, &mut observables, false)?;
            }
        }
        if needs_field_at_start {
            record_point(&state, None, &mut record, &mut observables, true)?;
        } else {
            observe(&state, None, &mut observables)?;
            if opts.checkpoints {
                record.checkpoints.push(state.checkpoint());
            }
        }
    }
    record.observables = observables.into_iter().map(|o| o.trace).collect();
    Ok((record, state))
}

fn push_diag(out: &mut Vec<DiagnosticSample>, s: DiagnosticSample) {
    if out.last().is_none_or(|l| (l.time - s.time).abs() > 1e-12) {
        out.push(s);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measures::{field_distance, sample_iid, Metric};
    use crate::models::{
        build_energy_model, build_velocity_model, EnergySpec, InteractionSpec, VelocityFieldSpec, VelocityModelSpec,
    };
    use crate::quadrature::composite_gauss_legendre;
    use std::f64::consts::PI;

    fn sine_model(amplitude: f64, interaction: InteractionSpec) -> AdhesionVelocityModel {
        build_velocity_model(
            1,
            &VelocityModelSpec {
                field: VelocityFieldSpec::Sine { amplitude, axis: 0, frequency: 1 },
                interaction,
            },
        )
        .unwrap()
    }

    fn derouler() -> EnergyModel {
        build_energy_model(EnergySpec::Derouler { c: 0.6 }).unwrap()
    }

    #[test]
    fn zero_interaction_gives_zero_drift() {
        let kernel = KernelSpec::new(1, 1.0 / 3.0, 100).unwrap();
        let ps = ParticleConfig::new(1, vec![0.1, 0.2, -0.3]).unwrap();
        let vm = sine_model(0.5, InteractionSpec::Zero);
        assert!(drift_nonlocal(&ps, &kernel, &vm, 256).unwrap().iter().all(|&v| v == 0.0));
        let no_b = build_velocity_model(
            1,
            &VelocityModelSpec { field: VelocityFieldSpec::Zero, interaction: InteractionSpec::Saturating },
        )
        .unwrap();
        assert!(drift_nonlocal(&ps, &kernel, &no_b, 256).unwrap().iter().all(|&v| v == 0.0));
        let d = drift_local(&ps, &kernel, &EnergyModel::zero(), 256, LocalOrdering::KernelGradient).unwrap();
        assert!(d.iter().all(|&v| v == 0.0));
    }

    /// `∫ b(z) g(wⁿ(z)) dz`, the drift felt by a lone particle.
    fn lone_particle_oracle(kernel: &KernelSpec, vm: &AdhesionVelocityModel) -> f64 {
        let hw = kernel.support_half_width();
        let (nodes, weights) = composite_gauss_legendre(-hw, hw, 4000);
        nodes
            .iter()
            .zip(&weights)
            .map(|(z, w)| {
                let mut b = [0.0];
                vm.b(&[*z], &mut b);
                w * b[0] * vm.g(kernel.eval(&[*z]))
            })
            .sum()
    }

    #[test]
    fn single_particle_nonlocal_drift_matches_quadrature() {
        let kernel = KernelSpec::new(1, 1.0 / 3.0, 1000).unwrap();
        let ps = ParticleConfig::new(1, vec![0.1234]).unwrap();
        let sine = sine_model(0.5, InteractionSpec::Truncated { cap: 1.0 });
        let d = drift_nonlocal(&ps, &kernel, &sine, 2048).unwrap()[0];
        let oracle = lone_particle_oracle(&kernel, &sine);
        assert!(oracle.abs() < 1e-12);
        assert!(d.abs() < 1e-6, "{d}");

        let shifted = build_velocity_model(
            1,
            &VelocityModelSpec {
                field: VelocityFieldSpec::Fourier {
                    modes: vec![crate::models::FourierMode { wavevector: vec![1], cos: vec![0.5], sin: vec![0.5] }],
                },
                interaction: InteractionSpec::Truncated { cap: 1.0 },
            },
        )
        .unwrap();
        let d = drift_nonlocal(&ps, &kernel, &shifted, 2048).unwrap()[0];
        let oracle = lone_particle_oracle(&kernel, &shifted);
        assert!((d - oracle).abs() < 1e-4 * oracle.abs(), "{d} vs {oracle}");
    }

    #[test]
    fn single_particle_local_drift_vanishes() {
        let kernel = KernelSpec::new(1, 1.0 / 3.0, 1000).unwrap();
        for m in [256, 1024] {
            let ps = ParticleConfig::new(1, vec![0.5 / m as f64]).unwrap();
            for ordering in [LocalOrdering::KernelGradient, LocalOrdering::DensityGradient] {
                let d = drift_local(&ps, &kernel, &derouler(), m, ordering).unwrap()[0];
                assert!(d.abs() < 1e-8, "{ordering:?} {d}");
            }
        }
    }

    #[test]
    fn constant_density_has_no_local_drift() {
        let kernel = KernelSpec::new(1, 1.0 / 3.0, 1000).unwrap();
        let sys = ParticleSystem::Local { energy: derouler(), ordering: LocalOrdering::KernelGradient };
        let engine = DriftEngine::new(&sys, &kernel, 256).unwrap();
        let field = DensityField::constant(1, 256, 1.0);
        let ps = ParticleConfig::new(1, vec![-0.3, 0.0, 0.41]).unwrap();
        for v in engine.drift_with_field(&field, &ps) {
            assert!(v.abs() < 1e-12);
        }
    }

    #[test]
    fn local_orderings_agree_within_grid_error() {
        let kernel = KernelSpec::new(1, 1.0 / 3.0, 1000).unwrap();
        let rho = DensityField::from_fn(1, 64, |x| 1.0 + 0.7 * (2.0 * PI * x[0]).cos());
        let ps = sample_iid(&rho, 1000, 5).unwrap();
        let gap = |m: usize| {
            let a = drift_local(&ps, &kernel, &derouler(), m, LocalOrdering::KernelGradient).unwrap();
            let b = drift_local(&ps, &kernel, &derouler(), m, LocalOrdering::DensityGradient).unwrap();
            let scale = a.iter().map(|v| v.abs()).fold(0.0, f64::max);
            (a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max), scale)
        };
        let (coarse, scale) = gap(256);
        let (fine, _) = gap(1024);
        assert!(coarse < 0.1 * scale, "{coarse} vs {scale}");
        assert!(fine < 0.5 * coarse, "{fine} vs {coarse}");
    }

    #[test]
    fn nonlocal_drift_respects_a_priori_bound() {
        let kernel = KernelSpec::new(1, 1.0 / 3.0, 1000).unwrap();
        let vm = sine_model(0.25, InteractionSpec::Saturating);
        let rho = DensityField::from_fn(1, 64, |x| 1.0 + 0.9 * (2.0 * PI * x[0]).sin());
        let ps = sample_iid(&rho, 1000, 2).unwrap();
        let d = drift_nonlocal(&ps, &kernel, &vm, 256).unwrap();
        let max = d.iter().map(|v| v.abs()).fold(0.0, f64::max);
        assert!(max <= vm.drift_bound() + 1e-9);
        assert!(max > 0.0);
    }

    #[test]
    fn one_step_variance_is_two_dt() {
        let n = 100_000;
        let ps = ParticleConfig::new(1, vec![0.0; n]).unwrap();
        let dt = 1e-4;
        let state = em_step(&SimState::new(ps, 9), &vec![0.0; n], dt).unwrap();
        let xs = state.particles.positions();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        // Var of the sample variance of a Gaussian is 2σ⁴/(n−1)
        let se = (2.0 / (n - 1) as f64).sqrt() * 2.0 * dt;
        assert!((var - 2.0 * dt).abs() < 3.0 * se, "{var}");
    }

    #[test]
    fn zero_step_only_advances_the_counter() {
        let ps = ParticleConfig::new(1, vec![0.1, 0.2]).unwrap();
        let s0 = SimState::new(ps, 1);
        let s1 = em_step(&s0, &[0.0, 0.0], 0.0).unwrap();
        assert_eq!(s1.particles, s0.particles);
        assert_eq!(s1.step, 1);
        assert!(em_step(&s0, &[0.0, 0.0], -1.0).is_err());
    }

    #[test]
    fn same_seed_same_state() {
        let rho = DensityField::constant(1, 16, 1.0);
        let ps = sample_iid(&rho, 500, 3).unwrap();
        let kernel = KernelSpec::new(1, 1.0 / 3.0, 500).unwrap();
        let sys = ParticleSystem::NonLocal(sine_model(0.25, InteractionSpec::Truncated { cap: 1.0 }));
        let opts = SimOptions::new(0.02, 1e-3, 128);
        let a = simulate(&ps, &sys, &kernel, &opts, 42).unwrap();
        let b = simulate(&ps, &sys, &kernel, &opts, 42).unwrap();
        assert_eq!(a, b);
        let c = simulate(&ps, &sys, &kernel, &opts, 43).unwrap();
        assert_ne!(a.snapshots.last(), c.snapshots.last());
    }

    #[test]
    fn zero_horizon_records_only_the_initial_state() {
        let ps = ParticleConfig::new(1, vec![0.0; 10]).unwrap();
        let kernel = KernelSpec::new(1, 1.0 / 3.0, 10).unwrap();
        let sys = ParticleSystem::Local { energy: derouler(), ordering: LocalOrdering::KernelGradient };
        let r = simulate(&ps, &sys, &kernel, &SimOptions::new(0.0, 1e-3, 64), 0).unwrap();
        assert_eq!(r.snapshots.len(), 1);
        assert_eq!(r.diagnostics.len(), 1);
        assert_eq!(r.steps, 0);
    }

    #[test]
    fn resuming_from_a_checkpoint_reproduces_the_run() {
        let rho = DensityField::constant(1, 16, 1.0);
        let ps = sample_iid(&rho, 300, 3).unwrap();
        let kernel = KernelSpec::new(1, 1.0 / 3.0, 300).unwrap();
        let sys = ParticleSystem::Local { energy: derouler(), ordering: LocalOrdering::KernelGradient };
        let mut opts = SimOptions::new(0.02, 1e-3, 128);
        opts.diagnostics = false;
        let (_, full) = simulate_from(SimState::new(ps.clone(), 5), &sys, &kernel, &opts).unwrap();
        let mut half = opts.clone();
        half.horizon = 0.01;
        let (_, mid) = simulate_from(SimState::new(ps, 5), &sys, &kernel, &half).unwrap();
        let mut buf = Vec::new();
        mid.checkpoint().write_csv(&mut buf).unwrap();
        let resumed = SimState::from_checkpoint(Checkpoint::read_csv(buf.as_slice()).unwrap());
        let (_, end) = simulate_from(resumed, &sys, &kernel, &opts).unwrap();
        assert_eq!(end.step, full.step);
        for (a, b) in end.particles.positions().iter().zip(full.particles.positions()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn martingale_tracks_its_quadratic_variation() {
        let n = 1000;
        let rho = DensityField::constant(1, 16, 1.0);
        let mut opts = SimOptions::new(0.05, 1e-3, 128);
        opts.diagnostics = false;
        opts.snapshots = false;
        opts.observables = vec![TestFunction::Constant, TestFunction::Cosine { axis: 0, frequency: 1 }];
        let kernel = KernelSpec::new(1, 1.0 / 3.0, n as u64).unwrap();
        let sys = ParticleSystem::Local { energy: EnergyModel::zero(), ordering: LocalOrdering::KernelGradient };
        let mut m = Vec::new();
        for seed in 0..64 {
            let ps = sample_iid(&rho, n, 1000 + seed).unwrap();
            let r = simulate(&ps, &sys, &kernel, &opts, seed).unwrap();
            assert!(r.observables[0].values.iter().all(|&v| (v - 1.0).abs() < 1e-12));
            m.push(*r.observables[1].martingale.last().unwrap());
        }
        let var = m.iter().map(|v| v * v).sum::<f64>() / m.len() as f64;
        let predicted = 4.0 * PI * PI * 0.05 / n as f64;
        assert!((var / predicted - 1.0).abs() < 0.6, "{var} vs {predicted}");
    }

    #[test]
    fn driftless_uniform_run_stays_near_uniform() {
        let n = 20_000;
        let rho = DensityField::constant(1, 16, 1.0);
        let ps = sample_iid(&rho, n, 8).unwrap();
        let kernel = KernelSpec::new(1, 1.0 / 3.0, n as u64).unwrap();
        let sys = ParticleSystem::NonLocal(sine_model(0.5, InteractionSpec::Zero));
        let mut opts = SimOptions::new(0.05, 1e-2, 256);
        opts.diagnostics = false;
        let r = simulate(&ps, &sys, &kernel, &opts, 1).unwrap();
        let last = &r.final_snapshot().unwrap().field;
        let d = field_distance(last, &DensityField::constant(1, 256, 1.0), Metric::L2).unwrap();
        assert!(d < 0.15, "{d}");
    }
}
