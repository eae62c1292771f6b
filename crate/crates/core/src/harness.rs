//! Studies over ensembles of particle runs: convergence to the PDE, the i.i.d.
//! moment bound and fluctuation scaling. Each study can write its tables and a
//! JSON manifest to an output directory.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{sampling_grid, InitialDensity, StudyConfig};
use crate::diagnostics::{ensemble_stat, EnsembleStat};
use crate::error::{Error, Result};
use crate::grid::DensityField;
use crate::kernel::{kernel_norm, validate_kernel, KernelReport, KernelSpec};
use crate::measures::{field_distance, mollify, sample_iid, FluctuationRecord, KernelConvolver, Metric, MollifyMethod, TestFunction};
use crate::models::{validate_energy_model, validate_velocity_model, EnergyReport, VelocityReport};
use crate::pde::{solve_local, solve_nonlocal, FaceAverage, PdeManifest, PdeOptions, PdeRun};
use crate::record::{DistanceSample, RunRecord};
use crate::sde::{simulate, ParticleSystem, SimOptions};

/// Tolerance when matching particle record times to PDE output times.
const TIME_MATCH: f64 = 1e-9;

/// Runs `f` on a dedicated pool with `threads` workers.
pub fn with_threads<T, F>(threads: usize, f: F) -> Result<T>
where
    T: Send,
    F: FnOnce() -> T + Send,
{
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::InvalidParameter(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StudyCheck {
    pub name: String,
    pub value: f64,
    pub threshold: f64,
    pub passed: bool,
}

impl StudyCheck {
    fn at_most(name: &str, value: f64, threshold: f64) -> Self {
        Self { name: name.into(), value, threshold, passed: value <= threshold }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConstants {
    pub system: String,
    pub b_sup: Option<f64>,
    pub lip_g: Option<f64>,
    pub growth_g: Option<f64>,
    pub lambda: Option<f64>,
}

impl ModelConstants {
    pub fn of(system: &ParticleSystem) -> Self {
        match system {
            ParticleSystem::NonLocal(vm) => Self {
                system: system.name().into(),
                b_sup: Some(vm.b_sup()),
                lip_g: Some(vm.lip_g()),
                growth_g: Some(vm.growth_g()),
                lambda: None,
            },
            ParticleSystem::Local { energy, .. } => Self {
                system: system.name().into(),
                b_sup: None,
                lip_g: None,
                growth_g: None,
                lambda: Some(energy.lambda()),
            },
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ValidatorReports {
    pub kernels: Vec<KernelReport>,
    pub velocity: Option<VelocityReport>,
    pub energy: Option<EnergyReport>,
}

impl ValidatorReports {
    pub fn passed(&self) -> bool {
        self.kernels.iter().all(|k| k.passed)
            && self.velocity.as_ref().is_none_or(|v| v.passed)
            && self.energy.as_ref().is_none_or(|e| e.passed)
    }
}

/// Kernel, model and constant validation for every `n` of a config.
pub fn validate_study(cfg: &StudyConfig) -> Result<(ValidatorReports, ModelConstants)> {
    cfg.validate()?;
    if cfg.override_beta_bound {
        log::warn!("beta = {} exceeds the bound for d = {}; running uncertified", cfg.beta, cfg.dim);
    }
    let system = cfg.particle_system()?;
    let mut ns = cfg.n.clone();
    ns.sort_unstable();
    ns.dedup();
    let kernels = ns
        .iter()
        .map(|&n| validate_kernel(&cfg.kernel(n)?))
        .collect::<Result<Vec<_>>>()?;
    let (velocity, energy) = match &system {
        ParticleSystem::NonLocal(vm) => (Some(validate_velocity_model(vm)), None),
        ParticleSystem::Local { energy, .. } => (None, Some(validate_energy_model(energy, cfg.dim, None))),
    };
    Ok((ValidatorReports { kernels, velocity, energy }, ModelConstants::of(&system)))
}

/// Numerical parameters chosen for one particle count.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LevelInfo {
    pub n: usize,
    pub m: usize,
    pub dt: f64,
    pub kernel_c: f64,
    pub support_half_width: f64,
    pub drift_bound: f64,
}

fn level_info(cfg: &StudyConfig, system: &ParticleSystem, n: usize) -> Result<LevelInfo> {
    let kernel = cfg.kernel(n)?;
    Ok(LevelInfo {
        n,
        m: cfg.grid(n)?,
        dt: cfg.dt(n)?,
        kernel_c: kernel.grad_bound_c(),
        support_half_width: kernel.support_half_width(),
        drift_bound: system.drift_bound(&kernel),
    })
}

/// Deterministic limit from the configured initial density on an `M`-point grid.
pub fn solve_reference(cfg: &StudyConfig, m: usize) -> Result<PdeRun> {
    let rho0 = cfg.initial.field(cfg.dim, m)?;
    let mut opts = PdeOptions::new(cfg.horizon).with_record_times(cfg.record_times.clone());
    opts.dt = cfg.pde_dt;
    match cfg.particle_system()? {
        ParticleSystem::NonLocal(vm) => solve_nonlocal(&rho0, &vm, &opts),
        ParticleSystem::Local { energy, .. } => solve_local(&rho0, &energy, cfg.local_form, FaceAverage::Upwind, &opts),
    }
}

/// Simulation options for one member at particle count `n`.
pub fn member_options(cfg: &StudyConfig, n: usize) -> Result<SimOptions> {
    let mut opts = SimOptions::new(cfg.horizon, cfg.dt(n)?, cfg.grid(n)?);
    opts.record_times = cfg.record_times.clone();
    opts.diag_every = cfg.diag_every;
    opts.observables = cfg.observables.clone();
    opts.config_hash = cfg.hash();
    Ok(opts)
}

/// Particle run with i.i.d. initial data drawn from the configured density.
pub fn run_member_with(cfg: &StudyConfig, n: usize, seed: u64, opts: &SimOptions) -> Result<RunRecord> {
    let system = cfg.particle_system()?;
    let kernel = cfg.kernel(n)?;
    let sampler = cfg.initial.field(cfg.dim, sampling_grid(cfg.dim))?;
    let init = sample_iid(&sampler, n, seed)?;
    simulate(&init, &system, &kernel, opts, seed)
}

pub fn run_member(cfg: &StudyConfig, n: usize, seed: u64, snapshots: bool) -> Result<RunRecord> {
    let mut opts = member_options(cfg, n)?;
    opts.snapshots = snapshots;
    run_member_with(cfg, n, seed, &opts)
}

/// Runs every configured seed at particle count `n`, ordered by seed.
pub fn run_ensemble(cfg: &StudyConfig, n: usize) -> Result<Vec<RunRecord>> {
    let (_, seeds) = sorted_members(cfg);
    let mut opts = member_options(cfg, n)?;
    opts.snapshots = cfg.write_snapshots;
    seeds.par_iter().map(|&seed| run_member_with(cfg, n, seed, &opts)).collect()
}

fn reference_at(run: &PdeRun, time: f64) -> Result<&DensityField> {
    run.states
        .iter()
        .find(|s| (s.time - time).abs() <= TIME_MATCH)
        .map(|s| &s.field)
        .ok_or_else(|| Error::InvalidParameter(format!("reference has no state at t = {time}")))
}

fn distances_to(record: &RunRecord, reference: &PdeRun) -> Result<Vec<DistanceSample>> {
    record
        .snapshots
        .iter()
        .map(|s| {
            let r = reference_at(reference, s.time)?;
            Ok(DistanceSample {
                time: s.time,
                l1: field_distance(&s.field, r, Metric::L1)?,
                l2: field_distance(&s.field, r, Metric::L2)?,
                w1: if s.field.dim() == 1 { Some(field_distance(&s.field, r, Metric::W1)?) } else { None },
            })
        })
        .collect()
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = x
        .iter()
        .zip(y)
        .filter(|(a, b)| **a > 0.0 && **b > 0.0)
        .map(|(a, b)| (a.ln(), b.ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let k = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / k;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / k;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

fn sorted_members(cfg: &StudyConfig) -> (Vec<usize>, Vec<u64>) {
    let mut ns = cfg.n.clone();
    ns.sort_unstable();
    ns.dedup();
    let mut seeds = cfg.seeds();
    seeds.sort_unstable();
    seeds.dedup();
    (ns, seeds)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn create(dir: &Path, rel: &str, files: &mut Vec<String>) -> Result<BufWriter<File>> {
    let path = dir.join(rel);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    files.push(rel.to_string());
    Ok(BufWriter::new(File::create(path)?))
}

/// `time,x0,…,value` rows for a sequence of fields.
pub fn write_field_series<'a, W, I>(series: I, mut w: W) -> Result<()>
where
    W: Write,
    I: IntoIterator<Item = (f64, &'a DensityField)>,
{
    let mut header_written = false;
    for (time, field) in series {
        let dim = field.dim();
        if !header_written {
            let cols: Vec<String> = (0..dim).map(|j| format!("x{j}")).collect();
            writeln!(w, "time,{},value", cols.join(","))?;
            header_written = true;
        }
        let mut x = vec![0.0; dim];
        for (k, v) in field.values().iter().enumerate() {
            field.node_point(k, &mut x);
            write!(w, "{time}")?;
            for c in &x {
                write!(w, ",{c}")?;
            }
            writeln!(w, ",{v}")?;
        }
    }
    Ok(())
}

/// Pretty-printed JSON followed by a newline.
pub fn save_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn write_json<T: Serialize>(dir: &Path, rel: &str, value: &T, files: &mut Vec<String>) -> Result<()> {
    files.push(rel.to_string());
    save_json(&dir.join(rel), value)
}

// ---------------------------------------------------------------------------
// convergence

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StudyRow {
    pub n: usize,
    pub seed: u64,
    pub time: f64,
    pub l1: f64,
    pub l2: f64,
    pub w1: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SummaryRow {
    pub n: usize,
    pub time: f64,
    pub l1: EnsembleStat,
    pub l2: EnsembleStat,
    pub w1: Option<EnsembleStat>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StudyManifest {
    pub study: String,
    pub config_hash: String,
    pub config: StudyConfig,
    pub levels: Vec<LevelInfo>,
    pub model: ModelConstants,
    pub references: Vec<PdeManifest>,
    pub validators: ValidatorReports,
    pub certified: bool,
    pub checks: Vec<StudyCheck>,
    pub failures: Vec<String>,
    pub files: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub rows: Vec<StudyRow>,
    pub summary: Vec<SummaryRow>,
    /// Ensemble-mean final-time `L²` error per `n`.
    pub final_l2: Vec<(usize, EnsembleStat)>,
    /// Fitted exponent of the final-time error in `n`.
    pub rate: Option<f64>,
    pub checks: Vec<StudyCheck>,
    pub certified: bool,
    pub passed: bool,
    pub manifest: StudyManifest,
}

/// Particle ensembles against the PDE solution from the same initial density.
///
/// Checks that the final-time mean `L²` error strictly decreases along the
/// `n` ladder and, when the ladder spans a factor of 100, that the largest `n`
/// at least halves the error of the smallest.
pub fn run_convergence_study(cfg: &StudyConfig, out: Option<&Path>) -> Result<ConvergenceReport> {
    let (validators, model) = validate_study(cfg)?;
    let system = cfg.particle_system()?;
    let (ns, seeds) = sorted_members(cfg);
    if seeds.is_empty() {
        return Err(Error::Config("no seeds configured".into()));
    }
    let levels = ns.iter().map(|&n| level_info(cfg, &system, n)).collect::<Result<Vec<_>>>()?;

    let mut grids: Vec<usize> = levels.iter().map(|l| l.m).collect();
    grids.sort_unstable();
    grids.dedup();
    let refs: Vec<PdeRun> = grids
        .par_iter()
        .map(|&m| solve_reference(cfg, m))
        .collect::<Result<Vec<_>>>()?;
    let reference: BTreeMap<usize, &PdeRun> = grids.iter().copied().zip(refs.iter()).collect();

    let members: Vec<(usize, u64, usize)> = levels
        .iter()
        .flat_map(|l| seeds.iter().map(move |&s| (l.n, s, l.m)))
        .collect();
    let results: Vec<Result<RunRecord>> = members
        .par_iter()
        .map(|&(n, seed, m)| {
            let mut record = run_member(cfg, n, seed, true)?;
            record.distances = distances_to(&record, reference[&m])?;
            Ok(record)
        })
        .collect();

    let mut records = Vec::new();
    let mut failures = Vec::new();
    for ((n, seed, _), r) in members.iter().zip(results) {
        match r {
            Ok(rec) => records.push(rec),
            Err(e) => failures.push(format!("n={n} seed={seed}: {e}")),
        }
    }

    let rows: Vec<StudyRow> = records
        .iter()
        .flat_map(|r| {
            r.distances.iter().map(move |d| StudyRow { n: r.n, seed: r.seed, time: d.time, l1: d.l1, l2: d.l2, w1: d.w1 })
        })
        .collect();
    let summary = summarise(&ns, &records);
    let final_l2: Vec<(usize, EnsembleStat)> = ns
        .iter()
        .filter_map(|&n| summary.iter().rev().find(|s| s.n == n).map(|s| (n, s.l2)))
        .collect();
    let xs: Vec<f64> = final_l2.iter().map(|(n, _)| *n as f64).collect();
    let ys: Vec<f64> = final_l2.iter().map(|(_, s)| s.mean).collect();
    let rate = loglog_slope(&xs, &ys);

    let mut checks = Vec::new();
    let worst_step = final_l2
        .windows(2)
        .map(|w| w[1].1.mean / w[0].1.mean)
        .fold(0.0, f64::max);
    checks.push(StudyCheck {
        name: "final_l2_strictly_decreasing".into(),
        value: worst_step,
        threshold: 1.0,
        passed: final_l2.len() >= 2 && worst_step < 1.0,
    });
    if let (Some(first), Some(last)) = (final_l2.first(), final_l2.last()) {
        if last.0 >= 100 * first.0 {
            checks.push(StudyCheck::at_most("final_l2_halved", last.1.mean / first.1.mean, 0.5));
        }
    }
    if !failures.is_empty() {
        checks.push(StudyCheck::at_most("member_failures", failures.len() as f64, 0.0));
    }
    let certified = validators.passed();
    let passed = failures.is_empty() && checks.iter().all(|c| c.passed);

    let mut manifest = StudyManifest {
        study: "convergence".into(),
        config_hash: cfg.hash(),
        config: cfg.clone(),
        levels,
        model,
        references: refs.iter().map(|r| r.manifest.clone()).collect(),
        validators,
        certified,
        checks: checks.clone(),
        failures: failures.clone(),
        files: Vec::new(),
    };
    if let Some(dir) = out {
        write_convergence_outputs(dir, cfg, &rows, &summary, &records, &grids, &refs, &mut manifest)?;
    }
    if !failures.is_empty() {
        return Err(Error::Study(failures.join("; ")));
    }
    Ok(ConvergenceReport { rows, summary, final_l2, rate, checks, certified, passed, manifest })
}

fn summarise(ns: &[usize], records: &[RunRecord]) -> Vec<SummaryRow> {
    let mut out = Vec::new();
    for &n in ns {
        let group: Vec<&RunRecord> = records.iter().filter(|r| r.n == n).collect();
        let Some(first) = group.first() else { continue };
        for (j, d) in first.distances.iter().enumerate() {
            let col = |f: &dyn Fn(&DistanceSample) -> f64| -> Vec<f64> {
                group.iter().filter_map(|r| r.distances.get(j)).map(f).collect()
            };
            let w1 = d.w1.map(|_| ensemble_stat(&col(&|s| s.w1.unwrap_or(f64::NAN))));
            out.push(SummaryRow {
                n,
                time: d.time,
                l1: ensemble_stat(&col(&|s| s.l1)),
                l2: ensemble_stat(&col(&|s| s.l2)),
                w1,
            });
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn write_convergence_outputs(
    dir: &Path,
    cfg: &StudyConfig,
    rows: &[StudyRow],
    summary: &[SummaryRow],
    records: &[RunRecord],
    grids: &[usize],
    refs: &[PdeRun],
    manifest: &mut StudyManifest,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut files = Vec::new();

    let mut w = create(dir, "study.csv", &mut files)?;
    writeln!(w, "n,seed,t,L1,L2,W1")?;
    for r in rows {
        writeln!(w, "{},{},{},{},{},{}", r.n, r.seed, r.time, r.l1, r.l2, fmt_opt(r.w1))?;
    }
    w.flush()?;

    let mut w = create(dir, "summary.csv", &mut files)?;
    writeln!(w, "n,t,members,L1_mean,L1_se,L2_mean,L2_se,W1_mean,W1_se")?;
    for s in summary {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{}",
            s.n,
            s.time,
            s.l2.count,
            s.l1.mean,
            s.l1.se,
            s.l2.mean,
            s.l2.se,
            fmt_opt(s.w1.map(|x| x.mean)),
            fmt_opt(s.w1.map(|x| x.se))
        )?;
    }
    w.flush()?;

    for (m, run) in grids.iter().zip(refs) {
        let mut w = create(dir, &format!("reference/m{m}.csv"), &mut files)?;
        write_field_series(run.states.iter().map(|s| (s.time, &s.field)), &mut w)?;
        w.flush()?;
    }
    for r in records {
        let stem = format!("runs/n{}_s{}", r.n, r.seed);
        let mut w = create(dir, &format!("{stem}_diagnostics.csv"), &mut files)?;
        r.write_diagnostics_csv(&mut w)?;
        w.flush()?;
        if cfg.write_snapshots {
            let mut w = create(dir, &format!("{stem}_snapshots.csv"), &mut files)?;
            write_field_series(r.snapshots.iter().map(|s| (s.time, &s.field)), &mut w)?;
            w.flush()?;
        }
    }
    files.push("manifest.json".into());
    manifest.files = files;
    let mut scratch = Vec::new();
    write_json(dir, "manifest.json", manifest, &mut scratch)
}

// ---------------------------------------------------------------------------
// moment bound

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MomentRow {
    pub n: usize,
    pub m: usize,
    /// Monte Carlo `E[∫(μⁿ∗wⁿ)²]`.
    pub estimate: EnsembleStat,
    /// `‖w¹‖_∞ + ∫ρ̄²`.
    pub bound: f64,
    /// `((n−1)/n) ∫(ρ̄∗wⁿ)² + ‖w¹‖_∞ n^{β−1}`.
    pub intermediate: f64,
    pub within_bound: bool,
    pub within_intermediate: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SingleParticleCheck {
    pub value: f64,
    /// `‖w¹‖₂²` by quadrature.
    pub exact: f64,
    pub residual: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MomentBoundReport {
    pub dim: usize,
    pub beta: f64,
    pub w1_sup: f64,
    pub rho_bar_l2sq: f64,
    pub members: usize,
    pub rows: Vec<MomentRow>,
    pub single_particle: SingleParticleCheck,
    pub passed: bool,
}

/// Tolerance of the single-particle identity.
pub const SINGLE_PARTICLE_TOL: f64 = 1e-8;

/// Piecewise-constant refinement by an integer factor per axis.
fn refine(field: &DensityField, factor: usize) -> Result<DensityField> {
    let (dim, m) = (field.dim(), field.m());
    let mf = m * factor;
    let len = mf.pow(dim as u32);
    let mut values = Vec::with_capacity(len);
    for flat in 0..len {
        let mut rest = flat;
        let mut src = 0;
        let mut stride = 1;
        for _ in 0..dim {
            let i = rest % mf;
            rest /= mf;
            src += (i / factor) * stride;
            stride *= m;
        }
        values.push(field.values()[src]);
    }
    DensityField::new(dim, mf, values)
}

/// Grid per axis with at least 64 cells across the kernel support, a multiple of
/// the density grid.
fn moment_grid(kernel: &KernelSpec, base: usize) -> usize {
    let need = (32.0 / kernel.support_half_width()).ceil() as usize;
    let need = need.max(256);
    base * need.div_ceil(base)
}

/// Monte Carlo check of `E[∫(μⁿ∗wⁿ)²] ≤ ‖w¹‖_∞ + ∫ρ̄²` for i.i.d. samples of the
/// piecewise-constant density `rho_bar`, together with the sharper bound
/// `((n−1)/n)∫(ρ̄∗wⁿ)² + ‖w¹‖_∞ n^{β−1}`; both with a 3-SE allowance.
pub fn moment_bound_check(rho_bar: &DensityField, ns: &[usize], beta: f64, seeds: &[u64]) -> Result<MomentBoundReport> {
    if seeds.is_empty() || ns.is_empty() {
        return Err(Error::InvalidParameter("moment bound needs at least one n and one seed".into()));
    }
    let rho_bar = rho_bar.normalized()?;
    let dim = rho_bar.dim();
    let w1 = KernelSpec::new(dim, beta, 1)?;
    let w1_sup = w1.base_sup();
    let rho_l2sq = rho_bar.cell_volume() * rho_bar.values().iter().map(|v| v * v).sum::<f64>();
    let bound = w1_sup + rho_l2sq;

    let mut rows = Vec::new();
    for &n in ns {
        let kernel = KernelSpec::new(dim, beta, n as u64)?;
        let m = moment_grid(&kernel, rho_bar.m());
        let fine = refine(&rho_bar, m / rho_bar.m())?;
        let smoothed = KernelConvolver::new(&kernel, m)?.smooth(fine.values());
        let vol = fine.cell_volume();
        let smooth_l2sq = vol * smoothed.iter().map(|v| v * v).sum::<f64>();
        let intermediate = (n as f64 - 1.0) / n as f64 * smooth_l2sq + w1_sup * (n as f64).powf(beta - 1.0);
        let samples: Vec<f64> = seeds
            .par_iter()
            .map(|&seed| {
                let ps = sample_iid(&rho_bar, n, seed)?;
                let f = mollify(&ps, &kernel, m, MollifyMethod::Direct)?;
                Ok(f.cell_volume() * f.values().iter().map(|v| v * v).sum::<f64>())
            })
            .collect::<Result<Vec<_>>>()?;
        let estimate = ensemble_stat(&samples);
        rows.push(MomentRow {
            n,
            m,
            estimate,
            bound,
            intermediate,
            within_bound: estimate.mean <= bound + 3.0 * estimate.se,
            within_intermediate: estimate.mean <= intermediate + 3.0 * estimate.se,
        });
    }

    let m1 = moment_grid(&w1, rho_bar.m());
    let one = sample_iid(&rho_bar, 1, seeds[0])?;
    let f = mollify(&one, &w1, m1, MollifyMethod::Direct)?;
    let value = f.cell_volume() * f.values().iter().map(|v| v * v).sum::<f64>();
    let exact = kernel_norm(&w1, 2.0)?.powi(2);
    let residual = (value - exact).abs();
    let single_particle = SingleParticleCheck { value, exact, residual, passed: residual <= SINGLE_PARTICLE_TOL };

    let passed = single_particle.passed && rows.iter().all(|r| r.within_bound && r.within_intermediate);
    Ok(MomentBoundReport {
        dim,
        beta,
        w1_sup,
        rho_bar_l2sq: rho_l2sq,
        members: seeds.len(),
        rows,
        single_particle,
        passed,
    })
}

pub fn write_moment_outputs(dir: &Path, report: &MomentBoundReport) -> Result<Vec<String>> {
    fs::create_dir_all(dir)?;
    let mut files = Vec::new();
    let mut w = create(dir, "moment_bound.csv", &mut files)?;
    writeln!(w, "n,m,members,estimate,se,bound,intermediate,within_bound,within_intermediate")?;
    for r in &report.rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{}",
            r.n, r.m, r.estimate.count, r.estimate.mean, r.estimate.se, r.bound, r.intermediate, r.within_bound, r.within_intermediate
        )?;
    }
    w.flush()?;
    write_json(dir, "moment_bound.json", report, &mut files)?;
    Ok(files)
}

// ---------------------------------------------------------------------------
// fluctuations

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FluctuationRow {
    pub test_function: String,
    pub n: usize,
    pub time: f64,
    pub value_variance: f64,
    pub martingale_variance: f64,
    /// Ensemble mean of the accumulated `(1/n)∫₀ᵗ∫|σ∇φ|² dμ_s ds`.
    pub predicted_qv: f64,
    /// `4π²k² t / n` for `cos(2πk x)` under driftless uniform dynamics.
    pub analytic_qv: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FluctuationFit {
    pub test_function: String,
    /// Fitted exponent of the final-time value variance in `n`.
    pub slope: Option<f64>,
    pub slope_ok: bool,
    /// Largest `|martingale variance / analytic − 1|` over the ladder.
    pub worst_level_error: Option<f64>,
    pub level_ok: Option<bool>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FluctuationReport {
    pub config_hash: String,
    pub time: f64,
    pub members: usize,
    pub driftless_uniform: bool,
    pub rows: Vec<FluctuationRow>,
    pub fits: Vec<FluctuationFit>,
    /// Largest variance seen for the constant test function (must be 0).
    pub constant_variance: Option<f64>,
    pub records: Vec<(usize, FluctuationRecord)>,
    pub passed: bool,
}

pub const SLOPE_TARGET: f64 = -1.0;
pub const SLOPE_TOL: f64 = 0.2;
pub const LEVEL_TOL: f64 = 0.25;

/// Ensemble variance of `∫φ dμ_t` across the `n` ladder.
///
/// The variance must scale like `1/n`; for driftless dynamics started from the
/// uniform law, the variance of the martingale part must match `4π²k²t/n`.
pub fn fluctuation_scaling_study(cfg: &StudyConfig, tests: &[TestFunction], out: Option<&Path>) -> Result<FluctuationReport> {
    cfg.validate()?;
    let system = cfg.particle_system()?;
    let (ns, seeds) = sorted_members(cfg);
    let driftless_uniform = system.is_driftless() && cfg.initial == InitialDensity::Uniform;
    let mut cfg = cfg.clone();
    cfg.observables = tests.to_vec();
    cfg.diag_every = None;
    let sampler = cfg.initial.field(cfg.dim, sampling_grid(cfg.dim))?;
    let kernel_of = |n: usize| cfg.kernel(n);

    let members: Vec<(usize, u64)> = ns.iter().flat_map(|&n| seeds.iter().map(move |&s| (n, s))).collect();
    let traces = members
        .par_iter()
        .map(|&(n, seed)| {
            let init = sample_iid(&sampler, n, seed)?;
            let mut opts = SimOptions::new(cfg.horizon, cfg.dt(n)?, cfg.grid(n)?);
            opts.record_times = cfg.record_times.clone();
            opts.diagnostics = false;
            opts.snapshots = false;
            opts.observables = tests.to_vec();
            simulate(&init, &system, &kernel_of(n)?, &opts, seed).map(|r| r.observables)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut records = Vec::new();
    let mut rows = Vec::new();
    for &n in &ns {
        let group: Vec<&Vec<crate::record::ObservableTrace>> = members
            .iter()
            .zip(&traces)
            .filter(|((mn, _), _)| *mn == n)
            .map(|(_, t)| t)
            .collect();
        for (k, phi) in tests.iter().enumerate() {
            let first = &group[0][k];
            let rec = FluctuationRecord {
                test_function: phi.id(),
                times: first.times.clone(),
                member_values: group.iter().map(|t| t[k].values.clone()).collect(),
                member_martingale: group.iter().map(|t| t[k].martingale.clone()).collect(),
                predicted_qv: (0..first.times.len())
                    .map(|j| group.iter().map(|t| t[k].quadratic_variation[j]).sum::<f64>() / group.len() as f64)
                    .collect(),
            };
            let j = rec.times.len() - 1;
            let time = rec.times[j];
            let analytic = match (*phi, driftless_uniform) {
                (TestFunction::Cosine { frequency, .. }, true) => {
                    let kk = 2.0 * std::f64::consts::PI * frequency as f64;
                    Some(kk * kk * time / n as f64)
                }
                (TestFunction::Constant, _) => Some(0.0),
                _ => None,
            };
            rows.push(FluctuationRow {
                test_function: phi.id(),
                n,
                time,
                value_variance: rec.value_variance(j),
                martingale_variance: rec.martingale_variance(j),
                predicted_qv: rec.predicted_qv[j],
                analytic_qv: analytic,
            });
            records.push((n, rec));
        }
    }

    let mut fits = Vec::new();
    let mut constant_variance = None;
    for phi in tests {
        let id = phi.id();
        let sel: Vec<&FluctuationRow> = rows.iter().filter(|r| r.test_function == id).collect();
        if *phi == TestFunction::Constant {
            let worst = sel.iter().map(|r| r.value_variance.max(r.martingale_variance)).fold(0.0, f64::max);
            constant_variance = Some(constant_variance.unwrap_or(0.0f64).max(worst));
            continue;
        }
        let xs: Vec<f64> = sel.iter().map(|r| r.n as f64).collect();
        let ys: Vec<f64> = sel.iter().map(|r| r.value_variance).collect();
        let slope = loglog_slope(&xs, &ys);
        let worst_level_error = if driftless_uniform {
            sel.iter()
                .filter_map(|r| r.analytic_qv.map(|a| (r.martingale_variance / a - 1.0).abs()))
                .reduce(f64::max)
        } else {
            None
        };
        fits.push(FluctuationFit {
            test_function: id,
            slope,
            slope_ok: slope.is_some_and(|s| (s - SLOPE_TARGET).abs() <= SLOPE_TOL),
            worst_level_error,
            level_ok: worst_level_error.map(|e| e <= LEVEL_TOL),
        });
    }
    let passed = fits.iter().all(|f| f.slope_ok && f.level_ok.unwrap_or(true)) && constant_variance.is_none_or(|v| v == 0.0);
    let report = FluctuationReport {
        config_hash: cfg.hash(),
        time: cfg.horizon,
        members: seeds.len(),
        driftless_uniform,
        rows,
        fits,
        constant_variance,
        records,
        passed,
    };
    if let Some(dir) = out {
        write_fluctuation_outputs(dir, &report)?;
    }
    Ok(report)
}

fn write_fluctuation_outputs(dir: &Path, report: &FluctuationReport) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut files = Vec::new();
    let mut w = create(dir, "fluctuations.csv", &mut files)?;
    writeln!(w, "test_function,n,t,value_variance,martingale_variance,predicted_qv,analytic_qv")?;
    for r in &report.rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            r.test_function,
            r.n,
            r.time,
            r.value_variance,
            r.martingale_variance,
            r.predicted_qv,
            fmt_opt(r.analytic_qv)
        )?;
    }
    w.flush()?;
    let mut w = create(dir, "fluctuation_members.csv", &mut files)?;
    writeln!(w, "test_function,n,member,t,value,martingale")?;
    for (n, rec) in &report.records {
        for (s, (vals, mart)) in rec.member_values.iter().zip(&rec.member_martingale).enumerate() {
            for (j, t) in rec.times.iter().enumerate() {
                writeln!(w, "{},{},{},{},{},{}", rec.test_function, n, s, t, vals[j], mart[j])?;
            }
        }
    }
    w.flush()?;
    write_json(dir, "fluctuations.json", report, &mut files)
}
