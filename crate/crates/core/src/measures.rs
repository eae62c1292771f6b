//! Particle configurations, mollified empirical densities and distances
//! between densities.

use std::io::{BufRead, Write};

use rand::Rng;
use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{sample_offsets, wrap_index, CircularConvolver, DensityField};
use crate::kernel::{bump_second, KernelSpec};
use crate::parallel::{ordered_accumulate, ordered_sum, CHUNK};
use crate::rng::{self, Purpose};
use crate::torus::{wrap, TorusPoint};

/// `n` points of the torus, stored as a flat `n × d` array of wrapped coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticleConfig {
    dim: usize,
    positions: Vec<f64>,
}

impl ParticleConfig {
    /// Wraps the given coordinates into the fundamental domain.
    pub fn new(dim: usize, mut positions: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidParameter("dimension must be positive".into()));
        }
        if positions.is_empty() || positions.len() % dim != 0 {
            return Err(Error::InvalidParameter(format!(
                "{} coordinates do not form a nonempty set of {dim}-dimensional points",
                positions.len()
            )));
        }
        for p in positions.iter_mut() {
            *p = wrap(*p);
        }
        Ok(Self { dim, positions })
    }

    pub fn from_points(points: &[TorusPoint]) -> Result<Self> {
        let dim = points.first().map(TorusPoint::dim).unwrap_or(0);
        if let Some(p) = points.iter().find(|p| p.dim() != dim) {
            return Err(Error::DimensionMismatch { expected: dim, got: p.dim() });
        }
        Self::new(dim, points.iter().flat_map(|p| p.coords().to_vec()).collect())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn len(&self) -> usize {
        self.positions.len() / self.dim
    }
    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
    pub fn positions(&self) -> &[f64] {
        &self.positions
    }
    pub fn point(&self, i: usize) -> &[f64] {
        &self.positions[i * self.dim..(i + 1) * self.dim]
    }

    pub(crate) fn positions_mut(&mut self) -> &mut [f64] {
        &mut self.positions
    }

    /// `∫ φ dμ = (1/n) Σ φ(Xⁱ)`.
    pub fn integrate<F: Fn(&[f64]) -> f64 + Sync>(&self, f: F) -> f64 {
        ordered_sum(self.len(), |i| f(self.point(i))) / self.len() as f64
    }

    /// One row per particle.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let header: Vec<String> = (0..self.dim).map(|j| format!("x{j}")).collect();
        writeln!(w, "{}", header.join(","))?;
        for p in self.positions.chunks(self.dim) {
            let row: Vec<String> = p.iter().map(|v| v.to_string()).collect();
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(r: R) -> Result<Self> {
        let mut dim = 0;
        let mut positions = Vec::new();
        for line in r.lines() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if line.starts_with('x') {
                dim = line.split(',').count();
                continue;
            }
            for field in line.split(',') {
                positions.push(
                    field
                        .trim()
                        .parse::<f64>()
                        .map_err(|e| Error::Parse(format!("bad coordinate {field:?}: {e}")))?,
                );
            }
        }
        if dim == 0 {
            return Err(Error::Parse("particle CSV has no header".into()));
        }
        Self::new(dim, positions)
    }
}

/// Draws `n` i.i.d. points from a piecewise-constant grid density: the cell is
/// chosen categorically, the position uniformly within it.
pub fn sample_iid(density: &DensityField, n: usize, seed: u64) -> Result<ParticleConfig> {
    if n == 0 {
        return Err(Error::InvalidParameter("n must be at least 1".into()));
    }
    if let Some(v) = density.values().iter().find(|v| !(**v >= 0.0)) {
        return Err(Error::InvalidDensity(format!("negative or NaN mass {v}")));
    }
    let total: f64 = density.values().iter().sum();
    if !(total > 0.0 && total.is_finite()) {
        return Err(Error::InvalidDensity("zero total mass".into()));
    }
    let mut cdf = Vec::with_capacity(density.len());
    let mut acc = 0.0;
    for v in density.values() {
        acc += v;
        cdf.push(acc / total);
    }
    let dim = density.dim();
    let m = density.m();
    let h = density.spacing();
    let positions: Vec<f64> = (0..n.div_ceil(CHUNK))
        .into_par_iter()
        .flat_map_iter(|c| {
            let mut rng = rng::stream(seed, Purpose::InitialSample, c as u64, 0);
            let count = CHUNK.min(n - c * CHUNK);
            let mut out = Vec::with_capacity(count * dim);
            for _ in 0..count {
                let u: f64 = rng.random();
                let mut cell = cdf.partition_point(|&c| c <= u);
                // skip empty cells that share the cumulative value
                while cell < cdf.len() - 1 && density.values()[cell] == 0.0 {
                    cell += 1;
                }
                let cell = cell.min(cdf.len() - 1);
                let start = out.len();
                out.resize(start + dim, 0.0);
                let mut rem = cell;
                for axis in (0..dim).rev() {
                    let k = rem % m;
                    rem /= m;
                    let offset: f64 = rng.random();
                    out[start + axis] = wrap(-0.5 + (k as f64 + offset) * h);
                }
            }
            out
        })
        .collect();
    ParticleConfig::new(dim, positions)
}

/// How the mollified density is evaluated on the grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MollifyMethod {
    /// Exact nodal values `(1/n) Σ wⁿ(Xⁱ − x)` summed over the kernel support.
    #[default]
    Direct,
    /// Cloud-in-cell deposition followed by circular convolution with the
    /// sampled kernel. Smears by roughly [`deposition_smearing_estimate`].
    Deposition,
}

/// Fails unless `h ≤ (support half-width)/4`.
pub fn check_resolution(kernel: &KernelSpec, m: usize) -> Result<()> {
    let half_width = kernel.support_half_width();
    let max_h = half_width / 4.0;
    let h = 1.0 / m as f64;
    if h > max_h * (1.0 + 1e-12) {
        return Err(Error::GridTooCoarse { m, half_width, max_h });
    }
    Ok(())
}

/// Smallest grid size resolving the kernel support with four cells per half-width.
pub fn min_resolving_grid(kernel: &KernelSpec) -> usize {
    (8.0 * kernel.scale() - 1e-9).ceil().max(1.0) as usize
}

/// Nodes along one axis within the kernel support of a particle coordinate,
/// as `(first node index, profile factors)`.
fn axis_stencil(kernel: &KernelSpec, scale: f64, m: usize, x: f64, out: &mut Vec<f64>) -> i64 {
    let h = 1.0 / m as f64;
    let hw = kernel.support_half_width();
    let u = (x + 0.5) / h - 0.5;
    let lo = (u - hw / h).ceil() as i64;
    let hi = (u + hw / h).floor() as i64;
    out.clear();
    for k in lo..=hi {
        let t = (k as f64 - u) * h;
        out.push(kernel.axis_factor(scale, t));
    }
    lo
}

/// Adds `weight · wⁿ(X − x_k)` for every node `k` in the support of particle `X`,
/// rescaled so the deposit has discrete mass `weight / height` exactly.
pub(crate) fn deposit_kernel(
    kernel: &KernelSpec,
    m: usize,
    point: &[f64],
    weight: f64,
    buf: &mut [f64],
    scratch: &mut [Vec<f64>],
) {
    let dim = point.len();
    let scale = kernel.scale();
    let h = 1.0 / m as f64;
    let mut starts = [0i64; 8];
    let mut mass = kernel.height();
    for axis in 0..dim {
        starts[axis] = axis_stencil(kernel, scale, m, point[axis], &mut scratch[axis]);
        mass *= h * scratch[axis].iter().sum::<f64>();
    }
    let weight = if mass > 0.0 { weight / mass } else { weight };
    tensor_scatter(dim, m, &starts, scratch, weight, buf);
}

fn tensor_scatter(dim: usize, m: usize, starts: &[i64], factors: &[Vec<f64>], weight: f64, buf: &mut [f64]) {
    match dim {
        1 => {
            for (i, f) in factors[0].iter().enumerate() {
                buf[wrap_index(starts[0] + i as i64, m)] += weight * f;
            }
        }
        2 => {
            for (i, fi) in factors[0].iter().enumerate() {
                if *fi == 0.0 {
                    continue;
                }
                let row = wrap_index(starts[0] + i as i64, m) * m;
                let wi = weight * fi;
                for (j, fj) in factors[1].iter().enumerate() {
                    buf[row + wrap_index(starts[1] + j as i64, m)] += wi * fj;
                }
            }
        }
        _ => {
            let lens: Vec<usize> = factors.iter().map(Vec::len).collect();
            if lens.contains(&0) {
                return;
            }
            let mut idx = vec![0usize; dim];
            loop {
                let mut flat = 0;
                let mut w = weight;
                for axis in 0..dim {
                    flat = flat * m + wrap_index(starts[axis] + idx[axis] as i64, m);
                    w *= factors[axis][idx[axis]];
                }
                buf[flat] += w;
                let mut axis = dim;
                loop {
                    if axis == 0 {
                        return;
                    }
                    axis -= 1;
                    idx[axis] += 1;
                    if idx[axis] < lens[axis] {
                        break;
                    }
                    idx[axis] = 0;
                }
            }
        }
    }
}

/// Cloud-in-cell deposition: each particle spreads unit weight over the `2^d`
/// surrounding nodes with multilinear weights.
pub fn deposit_cic(particles: &ParticleConfig, m: usize) -> Vec<f64> {
    let dim = particles.dim();
    let len = m.pow(dim as u32);
    let h = 1.0 / m as f64;
    ordered_accumulate(particles.len(), len, |range, buf| {
        let mut base = vec![0i64; dim];
        let mut frac = vec![0.0; dim];
        for i in range {
            let p = particles.point(i);
            for axis in 0..dim {
                let u = (p[axis] + 0.5) / h - 0.5;
                let fl = u.floor();
                base[axis] = fl as i64;
                frac[axis] = u - fl;
            }
            for corner in 0..(1usize << dim) {
                let mut flat = 0;
                let mut w = 1.0;
                for axis in 0..dim {
                    let up = (corner >> (dim - 1 - axis)) & 1;
                    flat = flat * m + wrap_index(base[axis] + up as i64, m);
                    w *= if up == 1 { frac[axis] } else { 1.0 - frac[axis] };
                }
                buf[flat] += w;
            }
        }
    })
}

/// Mollified empirical density `μ̃(x) = (1/n) Σ wⁿ(Xⁱ − x)` on an `M`-point grid.
pub fn mollify(
    particles: &ParticleConfig,
    kernel: &KernelSpec,
    m: usize,
    method: MollifyMethod,
) -> Result<DensityField> {
    if particles.dim() != kernel.dim() {
        return Err(Error::DimensionMismatch { expected: kernel.dim(), got: particles.dim() });
    }
    check_resolution(kernel, m)?;
    let dim = particles.dim();
    let n = particles.len();
    let len = m.pow(dim as u32);
    let values = match method {
        MollifyMethod::Direct => {
            let weight = kernel.height() / n as f64;
            ordered_accumulate(n, len, |range, buf| {
                let mut scratch = vec![Vec::new(); dim];
                for i in range {
                    deposit_kernel(kernel, m, particles.point(i), weight, buf, &mut scratch);
                }
            })
        }
        MollifyMethod::Deposition => {
            let counts = deposit_cic(particles, m);
            let mut sampled = sample_offsets(dim, m, |x| kernel.eval(x));
            let mass = sampled.iter().sum::<f64>() / len as f64;
            sampled.iter_mut().for_each(|v| *v /= mass);
            let conv = CircularConvolver::new(dim, m).convolve(&counts, &sampled);
            conv.into_iter().map(|v| (v / n as f64).max(0.0)).collect()
        }
    };
    DensityField::new(dim, m, values)
}

/// Leading-order `L¹` smearing of the deposition path relative to exact nodal
/// values: linear interpolation error `(h²/8) Σⱼ ∫|∂ⱼ² wⁿ|`.
pub fn deposition_smearing_estimate(kernel: &KernelSpec, m: usize) -> f64 {
    let h = 1.0 / m as f64;
    let dim = kernel.dim();
    let s = kernel.scale();
    let hw = kernel.support_half_width();
    let second = crate::quadrature::integrate_cube(dim, -hw, hw, 32, |x| {
        let mut total = 0.0;
        for j in 0..dim {
            let mut v = kernel.height() * s * s * bump_second(s * x[j]);
            for (k, &xk) in x.iter().enumerate() {
                if k != j {
                    v *= crate::kernel::bump(s * xk);
                }
            }
            total += v.abs();
        }
        total
    });
    h * h / 8.0 * second
}

/// Discrete convolutions with `wⁿ` and `∇wⁿ` on a fixed grid, with the kernel
/// spectra computed once.
#[derive(Debug)]
pub struct KernelConvolver {
    dim: usize,
    m: usize,
    conv: CircularConvolver,
    value_spectrum: Vec<Complex64>,
    grad_spectra: Vec<Vec<Complex64>>,
}

impl KernelConvolver {
    pub fn new(kernel: &KernelSpec, m: usize) -> Result<Self> {
        check_resolution(kernel, m)?;
        let dim = kernel.dim();
        let conv = CircularConvolver::new(dim, m);
        let vol = (1.0 / m as f64).powi(dim as i32);
        let values = sample_offsets(dim, m, |x| vol * kernel.eval(x));
        let value_spectrum = conv.spectrum(&values);
        let mut g = vec![0.0; dim];
        let grad_spectra = (0..dim)
            .map(|axis| {
                let sampled = sample_offsets(dim, m, |x| {
                    kernel.grad(x, &mut g);
                    vol * g[axis]
                });
                conv.spectrum(&sampled)
            })
            .collect();
        Ok(Self { dim, m, conv, value_spectrum, grad_spectra })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn m(&self) -> usize {
        self.m
    }
    pub fn convolver(&self) -> &CircularConvolver {
        &self.conv
    }

    /// `wⁿ ∗ f` on the grid.
    pub fn smooth(&self, values: &[f64]) -> Vec<f64> {
        self.conv.convolve_spectrum(values, &self.value_spectrum)
    }

    /// `(∂ⱼwⁿ) ∗ f` on the grid, one field per axis.
    pub fn grad_smooth(&self, values: &[f64]) -> Vec<Vec<f64>> {
        self.grad_spectra
            .iter()
            .map(|spec| self.conv.convolve_spectrum(values, spec))
            .collect()
    }
}

/// Mean over particles of `|v(Xⁱ)|²` for a vector field given per axis on the grid.
pub fn particle_mean_sq(fields: &[Vec<f64>], m: usize, particles: &ParticleConfig) -> f64 {
    let dim = particles.dim();
    let mut sq = vec![0.0; particles.len()];
    for field in fields {
        let at = interpolate_values(field, dim, m, particles.positions());
        for (s, v) in sq.iter_mut().zip(at) {
            *s += v * v;
        }
    }
    ordered_sum(sq.len(), |i| sq[i]) / particles.len() as f64
}

/// Multilinear periodic interpolation of grid values at flat `n × d` points.
pub fn eval_field_at(field: &DensityField, points: &[f64]) -> Vec<f64> {
    interpolate_values(field.values(), field.dim(), field.m(), points)
}

pub(crate) fn interpolate_values(values: &[f64], dim: usize, m: usize, points: &[f64]) -> Vec<f64> {
    let h = 1.0 / m as f64;
    points
        .par_chunks(dim)
        .map(|p| {
            let mut base = [0i64; 8];
            let mut frac = [0.0; 8];
            for axis in 0..dim {
                let u = (wrap(p[axis]) + 0.5) / h - 0.5;
                let fl = u.floor();
                base[axis] = fl as i64;
                frac[axis] = u - fl;
            }
            let mut acc = 0.0;
            for corner in 0..(1usize << dim) {
                let mut flat = 0;
                let mut w = 1.0;
                for axis in 0..dim {
                    let up = (corner >> (dim - 1 - axis)) & 1;
                    flat = flat * m + wrap_index(base[axis] + up as i64, m);
                    w *= if up == 1 { frac[axis] } else { 1.0 - frac[axis] };
                }
                if w != 0.0 {
                    acc += w * values[flat];
                }
            }
            acc
        })
        .collect()
}

/// Distances between densities sampled on the same grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    L1,
    L2,
    /// Exact 1-Wasserstein distance on the circle (d = 1 only), treating both
    /// fields as piecewise-constant probability densities.
    W1,
}

pub fn field_distance(f: &DensityField, g: &DensityField, metric: Metric) -> Result<f64> {
    f.same_grid(g)?;
    let vol = f.cell_volume();
    match metric {
        Metric::L1 => Ok(vol * f.values().iter().zip(g.values()).map(|(a, b)| (a - b).abs()).sum::<f64>()),
        Metric::L2 => Ok((vol
            * f.values()
                .iter()
                .zip(g.values())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>())
        .sqrt()),
        Metric::W1 => {
            if f.dim() != 1 {
                return Err(Error::InvalidParameter(format!(
                    "W1 is only available in d = 1, got d = {}",
                    f.dim()
                )));
            }
            circle_w1(f, g)
        }
    }
}

/// `min_α ∫ |F − G − α|` with `F`, `G` the piecewise-linear CDFs.
fn circle_w1(f: &DensityField, g: &DensityField) -> Result<f64> {
    let h = f.spacing();
    let fm = f.mass();
    let gm = g.mass();
    if !(fm > 0.0 && gm > 0.0) {
        return Err(Error::InvalidDensity("W1 needs positive mass".into()));
    }
    // CDF difference at the cell boundaries
    let mut knots = Vec::with_capacity(f.m() + 1);
    let mut d = 0.0;
    knots.push(0.0);
    for (a, b) in f.values().iter().zip(g.values()) {
        d += h * (a / fm - b / gm);
        knots.push(d);
    }
    // measure of {x : D(x) < α}, monotone in α
    let below = |alpha: f64| -> f64 {
        knots
            .windows(2)
            .map(|w| {
                let (lo, hi) = if w[0] <= w[1] { (w[0], w[1]) } else { (w[1], w[0]) };
                if alpha <= lo {
                    0.0
                } else if alpha >= hi {
                    h
                } else {
                    h * (alpha - lo) / (hi - lo)
                }
            })
            .sum()
    };
    let mut lo = knots.iter().copied().fold(f64::INFINITY, f64::min);
    let mut hi = knots.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if below(mid) < 0.5 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= f64::EPSILON * hi.abs().max(lo.abs()).max(1e-300) {
            break;
        }
    }
    let alpha = 0.5 * (lo + hi);
    let total = knots
        .windows(2)
        .map(|w| {
            let a = w[0] - alpha;
            let b = w[1] - alpha;
            if a * b >= 0.0 {
                h * 0.5 * (a.abs() + b.abs())
            } else {
                // the segment crosses zero; split at the root
                h * 0.5 * (a * a + b * b) / (a.abs() + b.abs())
            }
        })
        .sum();
    Ok(total)
}

/// Test functions for fluctuation measurements.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TestFunction {
    Constant,
    /// `cos(2π k x_axis)`.
    Cosine { axis: usize, frequency: u32 },
}

impl TestFunction {
    pub fn id(&self) -> String {
        match self {
            TestFunction::Constant => "one".into(),
            TestFunction::Cosine { axis, frequency } => format!("cos{frequency}_x{axis}"),
        }
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        match *self {
            TestFunction::Constant => 1.0,
            TestFunction::Cosine { axis, frequency } => {
                (2.0 * std::f64::consts::PI * frequency as f64 * x[axis]).cos()
            }
        }
    }

    /// Adds `∇φ(x)` into `out`.
    pub fn gradient(&self, x: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        if let TestFunction::Cosine { axis, frequency } = *self {
            let k = 2.0 * std::f64::consts::PI * frequency as f64;
            out[axis] = -k * (k * x[axis]).sin();
        }
    }

    pub fn laplacian(&self, x: &[f64]) -> f64 {
        match *self {
            TestFunction::Constant => 0.0,
            TestFunction::Cosine { axis, frequency } => {
                let k = 2.0 * std::f64::consts::PI * frequency as f64;
                -k * k * (k * x[axis]).cos()
            }
        }
    }
}

/// Ensemble record of `∫φ dμ_t` and its martingale part.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FluctuationRecord {
    pub test_function: String,
    pub times: Vec<f64>,
    /// `member_values[s][j]` is `∫φ dμ_{t_j}` for ensemble member `s`.
    pub member_values: Vec<Vec<f64>>,
    /// Martingale part `∫φ dμ_t − ∫φ dμ_0 − ∫₀ᵗ ∫ (h·∇φ + Δφ) dμ_s ds`.
    pub member_martingale: Vec<Vec<f64>>,
    /// Ensemble mean of `(1/n) ∫₀ᵗ ∫ |σ∇φ|² dμ_s ds` at each time.
    pub predicted_qv: Vec<f64>,
}

impl FluctuationRecord {
    fn column_variance(rows: &[Vec<f64>], j: usize) -> f64 {
        let k = rows.len();
        if k < 2 {
            return 0.0;
        }
        let mean = rows.iter().map(|r| r[j]).sum::<f64>() / k as f64;
        rows.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / (k - 1) as f64
    }

    /// Unbiased ensemble variance of `∫φ dμ_{t_j}`.
    pub fn value_variance(&self, j: usize) -> f64 {
        Self::column_variance(&self.member_values, j)
    }

    /// Unbiased ensemble variance of the martingale part at `t_j`.
    pub fn martingale_variance(&self, j: usize) -> f64 {
        Self::column_variance(&self.member_martingale, j)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::KernelSpec;
    use std::f64::consts::PI;

    fn uniform(dim: usize, m: usize) -> DensityField {
        DensityField::constant(dim, m, 1.0)
    }

    #[test]
    fn sampling_uniform_density_matches_multinomial_counts() {
        let n = 100_000;
        let ps = sample_iid(&uniform(1, 64), n, 3).unwrap();
        let mut hist = [0usize; 16];
        for &x in ps.positions() {
            hist[(((x + 0.5) * 16.0) as usize).min(15)] += 1;
        }
        let expected = n as f64 / 16.0;
        for c in hist {
            assert!((c as f64 - expected).abs() < 4.0 * expected.sqrt(), "{c}");
        }
    }

    #[test]
    fn sampling_one_hot_density_stays_in_cell() {
        let mut values = vec![0.0; 32];
        values[5] = 32.0;
        let f = DensityField::new(1, 32, values).unwrap();
        let ps = sample_iid(&f, 1000, 1).unwrap();
        let lo = f.node_coord(5) - 0.5 / 32.0;
        let hi = f.node_coord(5) + 0.5 / 32.0;
        assert!(ps.positions().iter().all(|&x| x >= lo && x < hi));
    }

    #[test]
    fn sampling_is_deterministic_and_rejects_bad_densities() {
        let f = DensityField::from_fn(2, 16, |x| 1.0 + 0.5 * (2.0 * PI * x[0]).cos());
        assert_eq!(sample_iid(&f, 500, 9).unwrap(), sample_iid(&f, 500, 9).unwrap());
        assert_ne!(sample_iid(&f, 500, 9).unwrap(), sample_iid(&f, 500, 10).unwrap());
        let mut bad = f.clone();
        bad.values_mut()[3] = -1.0;
        assert!(sample_iid(&bad, 10, 0).is_err());
        assert!(sample_iid(&DensityField::zeros(1, 8), 10, 0).is_err());
    }

    #[test]
    fn single_particle_mollifies_to_the_kernel() {
        let k = KernelSpec::new(1, 1.0 / 3.0, 1000).unwrap();
        let m = 256;
        let one = ParticleConfig::new(1, vec![0.0]).unwrap();
        let f = mollify(&one, &k, m, MollifyMethod::Direct).unwrap();
        let mut x = [0.0];
        for idx in 0..m {
            f.node_point(idx, &mut x);
            assert!((f.values()[idx] - k.eval(&x)).abs() <= 1e-5 * k.height());
        }
        assert!((f.mass() - 1.0).abs() < 1e-13);
        let many = ParticleConfig::new(1, vec![0.0; 50]).unwrap();
        let g = mollify(&many, &k, m, MollifyMethod::Direct).unwrap();
        for (a, b) in f.values().iter().zip(g.values()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn mollify_rejects_coarse_grid() {
        let k = KernelSpec::new(1, 1.0 / 3.0, 100_000).unwrap();
        let ps = ParticleConfig::new(1, vec![0.1]).unwrap();
        assert!(matches!(
            mollify(&ps, &k, 64, MollifyMethod::Direct),
            Err(Error::GridTooCoarse { .. })
        ));
        assert_eq!(min_resolving_grid(&k), 372);
        assert!(check_resolution(&k, 372).is_ok());
        assert!(check_resolution(&k, 371).is_err());
    }

    #[test]
    fn mollified_uniform_sample_is_close_to_one() {
        let n = 10_000;
        let k = KernelSpec::new(1, 1.0 / 3.0, n as u64).unwrap();
        let ps = sample_iid(&uniform(1, 1024), n, 5).unwrap();
        let f = mollify(&ps, &k, 256, MollifyMethod::Direct).unwrap();
        let d = field_distance(&f, &uniform(1, 256), Metric::L2).unwrap();
        assert!(d < 0.1, "{d}");
    }

    #[test]
    fn direct_and_deposition_paths_agree_on_resolved_grid() {
        let n = 2000;
        let k = KernelSpec::new(1, 1.0 / 3.0, n as u64).unwrap();
        let rho = DensityField::from_fn(1, 512, |x| 1.0 + 0.5 * (2.0 * PI * x[0]).cos());
        let ps = sample_iid(&rho, n, 2).unwrap();
        let m = 2048;
        let a = mollify(&ps, &k, m, MollifyMethod::Direct).unwrap();
        let b = mollify(&ps, &k, m, MollifyMethod::Deposition).unwrap();
        let rel = field_distance(&a, &b, Metric::L1).unwrap() / a.mass();
        assert!(rel < 1e-3, "{rel}");
        assert!(rel <= deposition_smearing_estimate(&k, m));
    }

    #[test]
    fn interpolation_is_exact_at_nodes_and_linear_mid_cell() {
        let f = DensityField::from_fn(1, 16, |x| 2.0 + x[0]);
        let nodes: Vec<f64> = (0..16).map(|k| f.node_coord(k)).collect();
        for (v, w) in eval_field_at(&f, &nodes).iter().zip(f.values()) {
            assert!((v - w).abs() < 1e-14);
        }
        let mid = 0.5 * (f.node_coord(3) + f.node_coord(4));
        let v = eval_field_at(&f, &[mid])[0];
        assert!((v - 0.5 * (f.values()[3] + f.values()[4])).abs() < 1e-14);
        let c = DensityField::constant(2, 8, 3.5);
        assert!(eval_field_at(&c, &[0.123, -0.49]).iter().all(|v| (v - 3.5).abs() < 1e-14));
    }

    #[test]
    fn distances_on_closed_form_cases() {
        let one = uniform(1, 256);
        let cosine = DensityField::from_fn(1, 256, |x| 1.0 + 0.5 * (2.0 * PI * x[0]).cos());
        for metric in [Metric::L1, Metric::L2, Metric::W1] {
            assert_eq!(field_distance(&one, &one, metric).unwrap(), 0.0);
        }
        let l2 = field_distance(&one, &cosine, Metric::L2).unwrap();
        assert!((l2 - 0.5 / 2f64.sqrt()).abs() < 1e-12);

        let mut a = vec![0.0; 64];
        let mut b = vec![0.0; 64];
        a[2] = 64.0;
        b[2 + 48] = 64.0; // 48 cells forward is 16 cells backward on the circle
        let fa = DensityField::new(1, 64, a).unwrap();
        let fb = DensityField::new(1, 64, b).unwrap();
        let w1 = field_distance(&fa, &fb, Metric::W1).unwrap();
        assert!((w1 - 0.25).abs() < 1e-12, "{w1}");
        assert!(field_distance(&uniform(2, 4), &uniform(2, 4), Metric::W1).is_err());
    }

    #[test]
    fn particle_csv_round_trip() {
        let ps = ParticleConfig::new(2, vec![0.1, -0.2, 0.3, 0.4999]).unwrap();
        let mut buf = Vec::new();
        ps.write_csv(&mut buf).unwrap();
        assert_eq!(ParticleConfig::read_csv(&buf[..]).unwrap(), ps);
    }
}
