use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use adhesion::config::{sampling_grid, StudyConfig};
use adhesion::harness::{
    fluctuation_scaling_study, member_options, moment_bound_check, run_convergence_study, run_member_with,
    save_json, solve_reference, validate_study, write_field_series, write_moment_outputs,
};
use adhesion::measures::TestFunction;
use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "adhesion-lab", version, about = "Particle systems with adhesion on the torus and their mean-field limits")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Study configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed of a single run, or first seed of a study's seed range.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory (overrides the config).
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Allow beta above d/(d+2); results are marked uncertified.
    #[arg(long, global = true)]
    override_beta_bound: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Kernel and model self-checks.
    Validate,
    /// One particle run.
    Simulate {
        /// Particle count (default: first entry of the config's list).
        #[arg(long)]
        n: Option<usize>,
    },
    /// Deterministic PDE solution from the configured initial density.
    SolvePde {
        /// Grid size per axis (default: the grid of the first particle count).
        #[arg(long)]
        m: Option<usize>,
    },
    /// Particle ensembles against the PDE over the n ladder.
    Converge,
    /// Monte Carlo check of the i.i.d. second-moment bound.
    MomentBound,
    /// Variance scaling of test-function observables.
    Fluctuations,
}

fn load(common: &Common) -> Result<StudyConfig> {
    let path = common.config.as_ref().context("--config is required")?;
    let mut cfg = StudyConfig::load(path).with_context(|| format!("reading {}", path.display()))?;
    if common.override_beta_bound {
        cfg.override_beta_bound = true;
    }
    if let Some(seed) = common.seed {
        let count = cfg.seeds().len().max(1);
        cfg.seeds = (seed..seed + count as u64).collect();
    }
    if let Some(dir) = &common.out_dir {
        cfg.output_dir = Some(dir.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn verdict(name: &str, passed: bool) -> bool {
    println!("{name}: {}", if passed { "PASS" } else { "FAIL" });
    passed
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn run(cli: Cli) -> Result<bool> {
    let cfg = load(&cli.common)?;
    let out = cfg.output_dir();
    match cli.command {
        Command::Validate => {
            let (reports, constants) = validate_study(&cfg)?;
            for k in &reports.kernels {
                println!(
                    "kernel n={} c={:.6} normalization={:.2e} drift={:.2e} violations={}",
                    k.n, k.grad_constant, k.normalization_residual, k.grad_constant_drift, k.bound_violations
                );
            }
            if let Some(v) = &reports.velocity {
                println!("velocity b_sup={} lip_g={} growth_g={}", v.b_sup, v.lip_g, v.growth_g);
            }
            if let Some(e) = &reports.energy {
                for c in &e.checks {
                    println!("energy {} residual={:.2e} {}", c.name, c.worst_residual, if c.passed { "ok" } else { "FAILED" });
                }
            }
            save_json(&out.join("validation.json"), &(&reports, &constants))?;
            Ok(verdict("validate", reports.passed()))
        }
        Command::Simulate { n } => {
            let n = n.unwrap_or(cfg.n[0]);
            let seed = cfg.seeds()[0];
            let mut opts = member_options(&cfg, n)?;
            opts.checkpoints = true;
            let record = run_member_with(&cfg, n, seed, &opts)?;
            let stem = out.join(format!("run_n{n}_s{seed}"));
            record.write_diagnostics_csv(create(&stem.with_extension("diagnostics.csv"))?)?;
            let mut w = create(&stem.with_extension("snapshots.csv"))?;
            write_field_series(record.snapshots.iter().map(|s| (s.time, &s.field)), &mut w)?;
            w.flush()?;
            if let Some(c) = record.checkpoints.last() {
                c.write_csv(create(&stem.with_extension("checkpoint.csv"))?)?;
            }
            save_json(&stem.with_extension("json"), &record)?;
            println!("simulated n={n} seed={seed} steps={} -> {}", record.steps, stem.display());
            Ok(true)
        }
        Command::SolvePde { m } => {
            let m = match m {
                Some(m) => m,
                None => cfg.grid(cfg.n[0])?,
            };
            let run = solve_reference(&cfg, m)?;
            let mut w = create(&out.join(format!("pde_m{m}.csv")))?;
            write_field_series(run.states.iter().map(|s| (s.time, &s.field)), &mut w)?;
            w.flush()?;
            save_json(&out.join(format!("pde_m{m}.json")), &run.manifest)?;
            println!(
                "solved {} on M={m}: dt={:.3e} steps={} mass drift={:.2e} clamps={}",
                run.manifest.equation, run.manifest.dt, run.manifest.steps, run.manifest.max_mass_drift, run.manifest.clamp_events
            );
            Ok(true)
        }
        Command::Converge => {
            let report = run_convergence_study(&cfg, Some(&out))?;
            for (n, s) in &report.final_l2 {
                println!("n={n} final L2 = {:.5e} ± {:.1e} ({} seeds)", s.mean, s.se, s.count);
            }
            if let Some(rate) = report.rate {
                println!("fitted rate n^{rate:.3}");
            }
            let mut ok = verdict("certified", report.certified);
            for c in &report.checks {
                ok &= verdict(&format!("{} ({:.4} vs {})", c.name, c.value, c.threshold), c.passed);
            }
            Ok(ok)
        }
        Command::MomentBound => {
            let rho = cfg.initial.field(cfg.dim, sampling_grid(cfg.dim))?;
            let report = moment_bound_check(&rho, &cfg.n, cfg.beta, &cfg.seeds())?;
            for r in &report.rows {
                println!(
                    "n={} E∫(μ∗w)² = {:.6} ± {:.1e}  bound {:.6}  intermediate {:.6}",
                    r.n, r.estimate.mean, r.estimate.se, r.bound, r.intermediate
                );
            }
            println!(
                "single particle: {:.12} vs {:.12}",
                report.single_particle.value, report.single_particle.exact
            );
            write_moment_outputs(&out, &report)?;
            Ok(verdict("moment-bound", report.passed))
        }
        Command::Fluctuations => {
            let tests = if cfg.observables.is_empty() {
                vec![TestFunction::Constant, TestFunction::Cosine { axis: 0, frequency: 1 }]
            } else {
                cfg.observables.clone()
            };
            let report = fluctuation_scaling_study(&cfg, &tests, Some(&out))?;
            for r in &report.rows {
                println!(
                    "{} n={} Var={:.4e} Var(M)={:.4e} QV={:.4e}",
                    r.test_function, r.n, r.value_variance, r.martingale_variance, r.predicted_qv
                );
            }
            for f in &report.fits {
                if let Some(s) = f.slope {
                    println!("{} slope {s:.3}", f.test_function);
                }
                if let Some(e) = f.worst_level_error {
                    println!("{} worst level error {:.1}%", f.test_function, 100.0 * e);
                }
            }
            Ok(verdict("fluctuations", report.passed))
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(t) = cli.common.threads {
        if let Err(e) = rayon_threads(t) {
            eprintln!("error: {e:#}");
            return ExitCode::from(2);
        }
    }
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn rayon_threads(threads: usize) -> Result<()> {
    if threads == 0 {
        bail!("--threads must be at least 1");
    }
    rayon::ThreadPoolBuilder::new().num_threads(threads).build_global()?;
    Ok(())
}
