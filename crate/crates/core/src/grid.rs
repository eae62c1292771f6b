//! Periodic cell-centred grids on the torus and FFT-based circular convolution.

use std::io::{BufRead, Read, Write};
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Samples of a density on the cell centres `-1/2 + (k + 1/2)/M` of a periodic
/// grid with `M` points per axis, stored row-major (first axis slowest).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityField {
    dim: usize,
    m: usize,
    values: Vec<f64>,
}

impl DensityField {
    pub fn new(dim: usize, m: usize, values: Vec<f64>) -> Result<Self> {
        if dim == 0 || m == 0 {
            return Err(Error::InvalidParameter("grid needs d >= 1 and M >= 1".into()));
        }
        let expected = m.pow(dim as u32);
        if values.len() != expected {
            return Err(Error::GridMismatch(format!(
                "expected {expected} values for d = {dim}, M = {m}, got {}",
                values.len()
            )));
        }
        Ok(Self { dim, m, values })
    }

    pub fn zeros(dim: usize, m: usize) -> Self {
        Self::constant(dim, m, 0.0)
    }

    pub fn constant(dim: usize, m: usize, c: f64) -> Self {
        Self {
            dim,
            m,
            values: vec![c; m.pow(dim as u32)],
        }
    }

    /// Samples `f` at every cell centre.
    pub fn from_fn<F: FnMut(&[f64]) -> f64>(dim: usize, m: usize, mut f: F) -> Self {
        let mut field = Self::zeros(dim, m);
        let mut x = vec![0.0; dim];
        for k in 0..field.values.len() {
            field.node_point(k, &mut x);
            field.values[k] = f(&x);
        }
        field
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn m(&self) -> usize {
        self.m
    }
    pub fn len(&self) -> usize {
        self.values.len()
    }
    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
    pub fn spacing(&self) -> f64 {
        1.0 / self.m as f64
    }
    pub fn cell_volume(&self) -> f64 {
        self.spacing().powi(self.dim as i32)
    }
    pub fn values(&self) -> &[f64] {
        &self.values
    }
    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }
    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// Coordinate of node `k` along one axis.
    #[inline]
    pub fn node_coord(&self, k: usize) -> f64 {
        -0.5 + (k as f64 + 0.5) / self.m as f64
    }

    /// Coordinates of the node with flat index `flat`.
    pub fn node_point(&self, flat: usize, out: &mut [f64]) {
        let mut rem = flat;
        for axis in (0..self.dim).rev() {
            out[axis] = self.node_coord(rem % self.m);
            rem /= self.m;
        }
    }

    /// `h^d Σ values`.
    pub fn mass(&self) -> f64 {
        self.cell_volume() * self.values.iter().sum::<f64>()
    }

    pub fn map<F: Fn(f64) -> f64>(&self, f: F) -> Self {
        Self {
            dim: self.dim,
            m: self.m,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Rescales to unit mass.
    pub fn normalized(&self) -> Result<Self> {
        let mass = self.mass();
        if !(mass > 0.0 && mass.is_finite()) {
            return Err(Error::InvalidDensity(format!("cannot normalize mass {mass}")));
        }
        Ok(self.map(|v| v / mass))
    }

    /// Checks nonnegativity and unit mass within `tol`.
    pub fn check_probability(&self, tol: f64) -> Result<()> {
        if let Some(v) = self.values.iter().find(|v| !(**v >= 0.0)) {
            return Err(Error::InvalidDensity(format!("negative or NaN value {v}")));
        }
        let mass = self.mass();
        if (mass - 1.0).abs() > tol {
            return Err(Error::InvalidDensity(format!("mass {mass} differs from 1 by more than {tol}")));
        }
        Ok(())
    }

    pub fn same_grid(&self, other: &Self) -> Result<()> {
        if self.dim != other.dim || self.m != other.m {
            return Err(Error::GridMismatch(format!(
                "(d = {}, M = {}) vs (d = {}, M = {})",
                self.dim, self.m, other.dim, other.m
            )));
        }
        Ok(())
    }

    /// One row per node: coordinates then value.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let header: Vec<String> = (0..self.dim).map(|j| format!("x{j}")).collect();
        writeln!(w, "{},value", header.join(","))?;
        let mut x = vec![0.0; self.dim];
        for (k, v) in self.values.iter().enumerate() {
            self.node_point(k, &mut x);
            for c in &x {
                write!(w, "{c},")?;
            }
            writeln!(w, "{v}")?;
        }
        Ok(())
    }

    /// Reads the layout produced by [`DensityField::write_csv`].
    pub fn read_csv<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Parse("empty density CSV".into()))??;
        let dim = header.split(',').count() - 1;
        let mut values = Vec::new();
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let last = line.rsplit(',').next().unwrap_or("");
            values.push(
                last.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::Parse(format!("bad value {last:?}: {e}")))?,
            );
        }
        let m = (values.len() as f64).powf(1.0 / dim as f64).round() as usize;
        Self::new(dim, m, values)
    }

    /// Binary layout: `d` and `M` as little-endian u64, then `M^d` little-endian f64.
    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(&(self.dim as u64).to_le_bytes())?;
        w.write_all(&(self.m as u64).to_le_bytes())?;
        for v in &self.values {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<Self> {
        let mut word = [0u8; 8];
        r.read_exact(&mut word)?;
        let dim = u64::from_le_bytes(word) as usize;
        r.read_exact(&mut word)?;
        let m = u64::from_le_bytes(word) as usize;
        if dim == 0 || dim > 8 || m == 0 {
            return Err(Error::Parse(format!("implausible header d = {dim}, M = {m}")));
        }
        let count = m
            .checked_pow(dim as u32)
            .ok_or_else(|| Error::Parse("grid too large".into()))?;
        let mut values = Vec::with_capacity(count);
        for _ in 0..count {
            r.read_exact(&mut word)?;
            values.push(f64::from_le_bytes(word));
        }
        Self::new(dim, m, values)
    }
}

/// Wraps a (possibly negative) grid index into `[0, m)`.
#[inline]
pub(crate) fn wrap_index(k: i64, m: usize) -> usize {
    k.rem_euclid(m as i64) as usize
}

/// Row-major stride of `axis`.
#[inline]
pub(crate) fn stride(dim: usize, m: usize, axis: usize) -> usize {
    m.pow((dim - 1 - axis) as u32)
}

/// Index of the neighbour of `flat` shifted by `shift` along `axis`.
#[inline]
pub(crate) fn neighbour(flat: usize, dim: usize, m: usize, axis: usize, shift: i64) -> usize {
    let s = stride(dim, m, axis);
    let coord = (flat / s) % m;
    let moved = wrap_index(coord as i64 + shift, m);
    flat - coord * s + moved * s
}

/// Centred periodic difference `(f[k+1] − f[k−1]) / 2h` along `axis`.
pub fn centered_gradient(values: &[f64], dim: usize, m: usize, axis: usize) -> Vec<f64> {
    let h = 1.0 / m as f64;
    (0..values.len())
        .map(|k| {
            let p = neighbour(k, dim, m, axis, 1);
            let q = neighbour(k, dim, m, axis, -1);
            (values[p] - values[q]) / (2.0 * h)
        })
        .collect()
}

/// Standard `2d + 1`-point periodic Laplacian.
pub fn laplacian(values: &[f64], dim: usize, m: usize) -> Vec<f64> {
    let h2 = (m as f64).powi(2);
    (0..values.len())
        .map(|k| {
            let mut acc = -2.0 * dim as f64 * values[k];
            for axis in 0..dim {
                acc += values[neighbour(k, dim, m, axis, 1)] + values[neighbour(k, dim, m, axis, -1)];
            }
            acc * h2
        })
        .collect()
}

/// Samples `f` at the periodic grid offsets `wrap(j h)`; entry `j` is the
/// value at displacement `x_k − x_l` whenever `k − l ≡ j (mod M)`.
pub fn sample_offsets<F: FnMut(&[f64]) -> f64>(dim: usize, m: usize, mut f: F) -> Vec<f64> {
    let total = m.pow(dim as u32);
    let h = 1.0 / m as f64;
    let mut x = vec![0.0; dim];
    (0..total)
        .map(|flat| {
            let mut rem = flat;
            for axis in (0..dim).rev() {
                let i = rem % m;
                rem /= m;
                // offsets past M/2 represent negative displacements
                x[axis] = if 2 * i >= m { i as f64 - m as f64 } else { i as f64 } * h;
            }
            f(&x)
        })
        .collect()
}

/// Cyclic convolution on a `d`-dimensional periodic grid via FFT.
pub struct CircularConvolver {
    dim: usize,
    m: usize,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for CircularConvolver {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CircularConvolver")
            .field("dim", &self.dim)
            .field("m", &self.m)
            .finish()
    }
}

impl CircularConvolver {
    pub fn new(dim: usize, m: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            dim,
            m,
            forward: planner.plan_fft_forward(m),
            inverse: planner.plan_fft_inverse(m),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn m(&self) -> usize {
        self.m
    }

    fn transform(&self, data: &mut [Complex64], fft: &Arc<dyn Fft<f64>>) {
        let m = self.m;
        let mut line = vec![Complex64::new(0.0, 0.0); m];
        for axis in 0..self.dim {
            let s = stride(self.dim, m, axis);
            let outer = data.len() / (s * m);
            for o in 0..outer {
                for r in 0..s {
                    let base = o * s * m + r;
                    for (i, slot) in line.iter_mut().enumerate() {
                        *slot = data[base + i * s];
                    }
                    fft.process(&mut line);
                    for (i, v) in line.iter().enumerate() {
                        data[base + i * s] = *v;
                    }
                }
            }
        }
    }

    /// Forward transform of a real grid.
    pub fn spectrum(&self, values: &[f64]) -> Vec<Complex64> {
        let mut data: Vec<Complex64> = values.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        self.transform(&mut data, &self.forward);
        data
    }

    /// `(K ⋆ f)_k = Σ_l K_{k−l} f_l` given the spectrum of `K`.
    pub fn convolve_spectrum(&self, values: &[f64], kernel_spectrum: &[Complex64]) -> Vec<f64> {
        let mut data = self.spectrum(values);
        for (a, b) in data.iter_mut().zip(kernel_spectrum) {
            *a *= b;
        }
        self.transform(&mut data, &self.inverse);
        let norm = 1.0 / data.len() as f64;
        data.iter().map(|c| c.re * norm).collect()
    }

    pub fn convolve(&self, values: &[f64], kernel_offsets: &[f64]) -> Vec<f64> {
        let spec = self.spectrum(kernel_offsets);
        self.convolve_spectrum(values, &spec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn node_layout_is_row_major() {
        let f = DensityField::from_fn(2, 4, |x| x[0] * 10.0 + x[1]);
        let mut p = [0.0; 2];
        f.node_point(1, &mut p);
        assert_eq!(p, [-0.375, -0.125]);
        assert_eq!(neighbour(0, 2, 4, 0, -1), 12);
        assert_eq!(neighbour(0, 2, 4, 1, -1), 3);
    }

    #[test]
    fn fft_convolution_matches_direct_sum() {
        for dim in 1..=2 {
            let m: usize = 6;
            let total = m.pow(dim as u32);
            let f: Vec<f64> = (0..total).map(|k| ((k * 7 + 3) % 11) as f64).collect();
            let kern: Vec<f64> = (0..total).map(|k| ((k * 5 + 1) % 13) as f64 - 4.0).collect();
            let conv = CircularConvolver::new(dim, m).convolve(&f, &kern);
            for k in 0..total {
                let mut direct = 0.0;
                for l in 0..total {
                    // component-wise k − l modulo m
                    let mut off = 0;
                    for axis in 0..dim {
                        let s = stride(dim, m, axis);
                        let d = wrap_index(((k / s) % m) as i64 - ((l / s) % m) as i64, m);
                        off += d * s;
                    }
                    direct += kern[off] * f[l];
                }
                assert!((direct - conv[k]).abs() < 1e-9, "d={dim} k={k}");
            }
        }
    }

    #[test]
    fn offsets_are_signed_displacements() {
        let o = sample_offsets(1, 4, |x| x[0]);
        assert_eq!(o, vec![0.0, 0.25, -0.5, -0.25]);
        let o2 = sample_offsets(2, 2, |x| x[0] * 10.0 + x[1]);
        assert_eq!(o2, vec![0.0, -0.5, -5.0, -5.5]);
    }

    #[test]
    fn binary_and_csv_round_trip() {
        let f = DensityField::from_fn(2, 3, |x| 1.0 + x[0] - 0.3 * x[1]);
        let mut buf = Vec::new();
        f.write_binary(&mut buf).unwrap();
        assert_eq!(buf.len(), 16 + 9 * 8);
        assert_eq!(DensityField::read_binary(&buf[..]).unwrap(), f);
        let mut csv = Vec::new();
        f.write_csv(&mut csv).unwrap();
        assert_eq!(DensityField::read_csv(&csv[..]).unwrap(), f);
    }

    #[test]
    fn laplacian_of_cosine() {
        let m = 64;
        let f = DensityField::from_fn(1, m, |x| (2.0 * std::f64::consts::PI * x[0]).cos());
        let lap = laplacian(f.values(), 1, m);
        let eig = -4.0 * (std::f64::consts::PI / m as f64).sin().powi(2) * (m * m) as f64;
        for (l, v) in lap.iter().zip(f.values()) {
            assert!((l - eig * v).abs() < 1e-9);
        }
    }
}
