//! Run records: diagnostic time series, density snapshots, distances to a
//! reference and particle checkpoints.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::DensityField;
use crate::measures::ParticleConfig;

/// Functionals of one mollified snapshot.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticSample {
    pub time: f64,
    /// `∫ ρ log ρ`.
    pub entropy: f64,
    /// `4 ∫ |∇√ρ|²`.
    pub fisher: f64,
    /// `∫ ρ²`.
    pub l2sq: f64,
    /// `∫ F(μ ∗ wⁿ)`.
    pub energy_n: f64,
    /// `∫ |∇wⁿ ∗ F′(μ̃)|² dμ`.
    pub grad_energy_sq: f64,
    /// `∫ |∇wⁿ ∗ u′(μ̃)|² dμ`, the adhesion part of the previous column.
    pub adhesion_grad_sq: f64,
    /// `∫ |∇ρ|²`.
    pub dirichlet: f64,
}

pub const DIAGNOSTIC_COLUMNS: [&str; 8] = [
    "time",
    "entropy",
    "fisher",
    "l2sq",
    "energy_n",
    "grad_energy_sq",
    "adhesion_grad_sq",
    "dirichlet",
];

impl DiagnosticSample {
    fn as_row(&self) -> [f64; 8] {
        [
            self.time,
            self.entropy,
            self.fisher,
            self.l2sq,
            self.energy_n,
            self.grad_energy_sq,
            self.adhesion_grad_sq,
            self.dirichlet,
        ]
    }
}

pub fn write_diagnostics_csv<W: Write>(samples: &[DiagnosticSample], mut w: W) -> Result<()> {
    writeln!(w, "{}", DIAGNOSTIC_COLUMNS.join(","))?;
    for s in samples {
        let row: Vec<String> = s.as_row().iter().map(|v| v.to_string()).collect();
        writeln!(w, "{}", row.join(","))?;
    }
    Ok(())
}

pub fn read_diagnostics_csv<R: BufRead>(r: R) -> Result<Vec<DiagnosticSample>> {
    let mut lines = r.lines();
    let header = lines.next().ok_or_else(|| Error::Parse("empty diagnostics file".into()))??;
    if header.trim() != DIAGNOSTIC_COLUMNS.join(",") {
        return Err(Error::Parse(format!("unexpected diagnostics header {header:?}")));
    }
    let mut out = Vec::new();
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let v: Vec<f64> = line
            .split(',')
            .map(|t| t.trim().parse::<f64>().map_err(|e| Error::Parse(format!("{t:?}: {e}"))))
            .collect::<Result<_>>()?;
        if v.len() != DIAGNOSTIC_COLUMNS.len() {
            return Err(Error::Parse(format!("expected 8 columns, got {}", v.len())));
        }
        out.push(DiagnosticSample {
            time: v[0],
            entropy: v[1],
            fisher: v[2],
            l2sq: v[3],
            energy_n: v[4],
            grad_energy_sq: v[5],
            adhesion_grad_sq: v[6],
            dirichlet: v[7],
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub time: f64,
    pub field: DensityField,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistanceSample {
    pub time: f64,
    pub l1: f64,
    pub l2: f64,
    pub w1: Option<f64>,
}

/// `∫φ dμ_t` along a run together with its martingale part and the
/// accumulated quadratic variation `(1/n) ∫₀ᵗ ∫ |σ∇φ|² dμ_s ds`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservableTrace {
    pub test_function: String,
    pub times: Vec<f64>,
    pub values: Vec<f64>,
    pub martingale: Vec<f64>,
    pub quadratic_variation: Vec<f64>,
}

/// Particle state with enough metadata to resume a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub time: f64,
    pub step: u64,
    pub seed: u64,
    pub particles: ParticleConfig,
}

impl Checkpoint {
    /// Header line `# n=…,d=…,t=…,step=…,seed=…` followed by the particle CSV.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(
            w,
            "# n={},d={},t={},step={},seed={}",
            self.particles.len(),
            self.particles.dim(),
            self.time,
            self.step,
            self.seed
        )?;
        self.particles.write_csv(w)
    }

    pub fn read_csv<R: BufRead>(mut r: R) -> Result<Self> {
        let mut header = String::new();
        r.read_line(&mut header)?;
        let body = header
            .trim()
            .strip_prefix('#')
            .ok_or_else(|| Error::Parse("checkpoint header missing".into()))?;
        let mut fields = std::collections::HashMap::new();
        for kv in body.split(',') {
            let (k, v) = kv
                .trim()
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("bad header field {kv:?}")))?;
            fields.insert(k.to_string(), v.to_string());
        }
        let get = |k: &str| {
            fields
                .get(k)
                .cloned()
                .ok_or_else(|| Error::Parse(format!("checkpoint header lacks {k}")))
        };
        let parse_err = |e: std::num::ParseIntError| Error::Parse(e.to_string());
        let n: usize = get("n")?.parse().map_err(parse_err)?;
        let dim: usize = get("d")?.parse().map_err(parse_err)?;
        let time: f64 = get("t")?.parse().map_err(|e| Error::Parse(format!("{e}")))?;
        let step: u64 = get("step")?.parse().map_err(parse_err)?;
        let seed: u64 = get("seed")?.parse().map_err(parse_err)?;
        let particles = ParticleConfig::read_csv(r)?;
        if particles.len() != n || particles.dim() != dim {
            return Err(Error::Parse(format!(
                "checkpoint declares n={n}, d={dim} but holds n={}, d={}",
                particles.len(),
                particles.dim()
            )));
        }
        Ok(Self { time, step, seed, particles })
    }
}

/// Output of one particle run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config_hash: String,
    pub seed: u64,
    pub system: String,
    pub n: usize,
    pub dim: usize,
    pub dt: f64,
    pub steps: u64,
    pub diagnostics: Vec<DiagnosticSample>,
    pub snapshots: Vec<Snapshot>,
    pub distances: Vec<DistanceSample>,
    pub observables: Vec<ObservableTrace>,
    pub checkpoints: Vec<Checkpoint>,
}

impl RunRecord {
    pub fn write_diagnostics_csv<W: Write>(&self, w: W) -> Result<()> {
        write_diagnostics_csv(&self.diagnostics, w)
    }

    pub fn final_snapshot(&self) -> Option<&Snapshot> {
        self.snapshots.last()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diagnostics_round_trip() {
        let s = DiagnosticSample {
            time: 0.1,
            entropy: 0.064,
            fisher: 1.5,
            l2sq: 1.125,
            energy_n: 0.07,
            grad_energy_sq: 0.3,
            adhesion_grad_sq: 1e-3,
            dirichlet: 4.9,
        };
        let mut buf = Vec::new();
        write_diagnostics_csv(&[s, s], &mut buf).unwrap();
        let back = read_diagnostics_csv(buf.as_slice()).unwrap();
        assert_eq!(back, vec![s, s]);
    }

    #[test]
    fn checkpoint_round_trip() {
        let particles = ParticleConfig::new(2, vec![0.1, -0.2, 0.3, 0.4, -0.5, 0.0]).unwrap();
        let c = Checkpoint { time: 0.25, step: 250, seed: 7, particles };
        let mut buf = Vec::new();
        c.write_csv(&mut buf).unwrap();
        assert!(String::from_utf8_lossy(&buf).starts_with("# n=3,d=2,t=0.25,step=250,seed=7"));
        assert_eq!(Checkpoint::read_csv(buf.as_slice()).unwrap(), c);
    }
}
