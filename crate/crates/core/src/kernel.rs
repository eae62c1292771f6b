//! The mollifier family `wⁿ(x) = n^β w(n^{β/d} x)` built on a tensor-product
//! polynomial bump.
//!
//! The one-dimensional profile is `φ(t) = (35/16)(1 − 4t²)³` on `|t| ≤ 1/2`,
//! which is C² on the real line (value and first two derivatives vanish at
//! the support boundary), even, and integrates to one. The base kernel is
//! `w(x) = ∏ⱼ φ(xⱼ)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quadrature::{advance, integrate_cube};
use crate::torus::wrap;

/// Peak value `φ(0) = 35/16`.
pub const BUMP_PEAK: f64 = 35.0 / 16.0;
/// `φ′(t) = -BUMP_SLOPE · t (1 − 4t²)²`.
const BUMP_SLOPE: f64 = 52.5;

/// One-dimensional profile `φ`.
#[inline]
pub fn bump(t: f64) -> f64 {
    let s = 1.0 - 4.0 * t * t;
    if s <= 0.0 {
        0.0
    } else {
        BUMP_PEAK * s * s * s
    }
}

/// Derivative `φ′`.
#[inline]
pub fn bump_deriv(t: f64) -> f64 {
    let s = 1.0 - 4.0 * t * t;
    if s <= 0.0 {
        0.0
    } else {
        -BUMP_SLOPE * t * s * s
    }
}

/// Second derivative `φ″`.
#[inline]
pub fn bump_second(t: f64) -> f64 {
    let s = 1.0 - 4.0 * t * t;
    if s <= 0.0 {
        0.0
    } else {
        -BUMP_SLOPE * s * (1.0 - 20.0 * t * t)
    }
}

/// Base kernel `w(x) = ∏ φ(xⱼ)` evaluated at a displacement.
pub fn base_kernel_eval(x: &[f64]) -> f64 {
    x.iter().map(|&t| bump(t)).product()
}

/// Gradient of the base kernel.
pub fn base_kernel_grad(x: &[f64], out: &mut [f64]) {
    for j in 0..x.len() {
        let mut g = bump_deriv(x[j]);
        for (k, &t) in x.iter().enumerate() {
            if k != j {
                g *= bump(t);
            }
        }
        out[j] = g;
    }
}

/// The largest admissible interaction exponent `d/(d+2)`.
pub fn beta_bound(dim: usize) -> f64 {
    dim as f64 / (dim as f64 + 2.0)
}

/// Scaled mollifier `wⁿ` and its constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    dim: usize,
    beta: f64,
    n: u64,
    base_sup: f64,
    grad_bound_c: f64,
    within_bound: bool,
}

impl KernelSpec {
    /// Builds the kernel, rejecting `β` outside `(0, d/(d+2)]`.
    pub fn new(dim: usize, beta: f64, n: u64) -> Result<Self> {
        Self::build(dim, beta, n, false)
    }

    /// Like [`KernelSpec::new`] but accepts `β ∈ (0, 1]` beyond the bound.
    /// Such kernels are flagged through [`KernelSpec::within_bound`].
    pub fn exploratory(dim: usize, beta: f64, n: u64) -> Result<Self> {
        Self::build(dim, beta, n, true)
    }

    fn build(dim: usize, beta: f64, n: u64, permissive: bool) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidParameter("dimension must be positive".into()));
        }
        if n == 0 {
            return Err(Error::InvalidParameter("n must be at least 1".into()));
        }
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(Error::InvalidParameter(format!("beta must be positive, got {beta}")));
        }
        let bound = beta_bound(dim);
        let within_bound = beta <= bound + 1e-12;
        if !within_bound && (!permissive || beta > 1.0) {
            return Err(Error::BetaOutOfRange { beta, bound, dim });
        }
        let mut spec = Self {
            dim,
            beta,
            n,
            base_sup: BUMP_PEAK.powi(dim as i32),
            grad_bound_c: 0.0,
            within_bound,
        };
        spec.grad_bound_c = spec.estimate_grad_constant();
        Ok(spec)
    }

    /// Same kernel family at a different particle count.
    pub fn with_n(&self, n: u64) -> Result<Self> {
        Self::build(self.dim, self.beta, n, !self.within_bound)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn beta(&self) -> f64 {
        self.beta
    }
    pub fn n(&self) -> u64 {
        self.n
    }
    /// `‖w‖_∞` of the base kernel.
    pub fn base_sup(&self) -> f64 {
        self.base_sup
    }
    /// Constant `c` with `|∇wⁿ|² ≤ c n^{β(2/d+1)} wⁿ`.
    pub fn grad_bound_c(&self) -> f64 {
        self.grad_bound_c
    }
    pub fn within_bound(&self) -> bool {
        self.within_bound
    }

    /// Spatial compression factor `n^{β/d}`.
    pub fn scale(&self) -> f64 {
        (self.n as f64).powf(self.beta / self.dim as f64)
    }

    /// Amplitude factor `n^β`.
    pub fn height(&self) -> f64 {
        (self.n as f64).powf(self.beta)
    }

    /// Half-width of the cube containing the support of `wⁿ`.
    pub fn support_half_width(&self) -> f64 {
        0.5 / self.scale()
    }

    /// `n^{β(2/d+1)}`, the growth rate in the gradient bound.
    pub fn grad_bound_rate(&self) -> f64 {
        (self.n as f64).powf(self.beta * (2.0 / self.dim as f64 + 1.0))
    }

    /// `wⁿ` at a torus displacement (wrapped to the minimal image first).
    pub fn eval(&self, x: &[f64]) -> f64 {
        debug_assert_eq!(x.len(), self.dim);
        let s = self.scale();
        self.height() * x.iter().map(|&t| bump(s * wrap(t))).product::<f64>()
    }

    /// `∇wⁿ` at a torus displacement.
    pub fn grad(&self, x: &[f64], out: &mut [f64]) {
        let s = self.scale();
        let scaled: Vec<f64> = x.iter().map(|&t| s * wrap(t)).collect();
        base_kernel_grad(&scaled, out);
        let f = self.height() * s;
        for g in out.iter_mut() {
            *g *= f;
        }
    }

    /// Unscaled profile factor along one axis: `φ(n^{β/d} t)`.
    #[inline]
    pub(crate) fn axis_factor(&self, scale: f64, t: f64) -> f64 {
        bump(scale * t)
    }

    fn panels(&self) -> usize {
        match self.dim {
            1 => 64,
            2 => 32,
            _ => 16,
        }
    }

    /// `∫ g(wⁿ)` over the support cube.
    fn integrate_of<F: Fn(f64) -> f64>(&self, f: F) -> f64 {
        let hw = self.support_half_width();
        integrate_cube(self.dim, -hw, hw, self.panels(), |x| f(self.eval(x)))
    }

    /// `∫ |∇wⁿ|²`.
    pub fn grad_norm_sq(&self) -> f64 {
        let hw = self.support_half_width();
        let mut g = vec![0.0; self.dim];
        integrate_cube(self.dim, -hw, hw, self.panels(), |x| {
            self.grad(x, &mut g);
            g.iter().map(|v| v * v).sum()
        })
    }

    /// `∫ |∇wⁿ|`.
    pub fn grad_l1_norm(&self) -> f64 {
        let hw = self.support_half_width();
        let mut g = vec![0.0; self.dim];
        integrate_cube(self.dim, -hw, hw, self.panels(), |x| {
            self.grad(x, &mut g);
            g.iter().map(|v| v * v).sum::<f64>().sqrt()
        })
    }

    /// Estimates the smallest `c` with `|∇wⁿ|² ≤ c n^{β(2/d+1)} wⁿ` on a fine
    /// grid of the support, refined by coordinate-wise golden-section search.
    pub fn estimate_grad_constant(&self) -> f64 {
        let per_axis = match self.dim {
            1 => 401,
            2 => 101,
            _ => 25,
        };
        let s = self.scale();
        let rate = self.grad_bound_rate();
        let mut g = vec![0.0; self.dim];
        let mut ratio = |t: &[f64]| -> f64 {
            let x: Vec<f64> = t.iter().map(|v| v / s).collect();
            let w = self.eval(&x);
            if w <= 0.0 {
                return 0.0;
            }
            self.grad(&x, &mut g);
            g.iter().map(|v| v * v).sum::<f64>() / (rate * w)
        };
        let step = 1.0 / (per_axis as f64 + 1.0);
        let mut idx = vec![0usize; self.dim];
        let mut t = vec![0.0; self.dim];
        let mut best = (f64::NEG_INFINITY, vec![0.0; self.dim]);
        loop {
            for (j, &i) in idx.iter().enumerate() {
                t[j] = -0.5 + (i as f64 + 1.0) * step;
            }
            let r = ratio(&t);
            if r > best.0 {
                best = (r, t.clone());
            }
            if !advance(&mut idx, per_axis) {
                break;
            }
        }
        let (mut c, mut point) = best;
        let golden = 0.5 * (5f64.sqrt() - 1.0);
        for _sweep in 0..4 {
            for j in 0..self.dim {
                let mut lo = (point[j] - step).max(-0.5);
                let mut hi = (point[j] + step).min(0.5);
                let mut probe = point.clone();
                for _ in 0..80 {
                    let a = hi - golden * (hi - lo);
                    let b = lo + golden * (hi - lo);
                    probe[j] = a;
                    let fa = ratio(&probe);
                    probe[j] = b;
                    let fb = ratio(&probe);
                    if fa < fb {
                        lo = a;
                    } else {
                        hi = b;
                    }
                }
                probe[j] = 0.5 * (lo + hi);
                let r = ratio(&probe);
                if r > c {
                    c = r;
                    point = probe;
                }
            }
        }
        c
    }
}

/// `‖wⁿ‖_p` by quadrature; `p = ∞` gives the supremum.
pub fn kernel_norm(spec: &KernelSpec, p: f64) -> Result<f64> {
    if p.is_nan() || p < 1.0 {
        return Err(Error::InvalidParameter(format!("norm exponent must be >= 1, got {p}")));
    }
    if p.is_infinite() {
        let per_axis = match spec.dim {
            1 => 4097,
            2 => 257,
            _ => 65,
        };
        let hw = spec.support_half_width();
        let step = 2.0 * hw / (per_axis as f64 - 1.0);
        let mut idx = vec![0usize; spec.dim];
        let mut x = vec![0.0; spec.dim];
        let mut sup: f64 = 0.0;
        loop {
            for (j, &i) in idx.iter().enumerate() {
                x[j] = -hw + i as f64 * step;
            }
            sup = sup.max(spec.eval(&x));
            if !advance(&mut idx, per_axis) {
                break;
            }
        }
        return Ok(sup);
    }
    if p == 1.0 {
        return Ok(spec.integrate_of(|w| w.abs()));
    }
    Ok(spec.integrate_of(|w| w.abs().powf(p)).powf(1.0 / p))
}

/// Outcome of the kernel self-checks.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KernelReport {
    pub dim: usize,
    pub beta: f64,
    pub n: u64,
    pub symmetry_residual: f64,
    pub support_ok: bool,
    pub normalization_residual: f64,
    /// Estimated gradient constant at this kernel's `n`.
    pub grad_constant: f64,
    /// Estimated constant at reference particle counts.
    pub grad_constant_by_n: Vec<(u64, f64)>,
    /// Largest relative deviation of the constants above.
    pub grad_constant_drift: f64,
    /// Test-grid points where the gradient bound fails with the stored constant.
    pub bound_violations: usize,
    pub within_beta_bound: bool,
    pub passed: bool,
}

/// Reference particle counts for the n-independence check.
pub const REFERENCE_COUNTS: [u64; 3] = [1, 10, 100];

/// Checks symmetry, support, normalization and the gradient bound.
pub fn validate_kernel(spec: &KernelSpec) -> Result<KernelReport> {
    let dim = spec.dim;
    let per_axis = match dim {
        1 => 2001,
        2 => 201,
        _ => 31,
    };
    let hw = spec.support_half_width();
    let mut idx = vec![0usize; dim];
    let mut x = vec![0.0; dim];
    let mut neg = vec![0.0; dim];
    let mut g = vec![0.0; dim];
    let mut symmetry_residual: f64 = 0.0;
    let mut support_ok = true;
    let mut bound_violations = 0usize;
    let rate = spec.grad_bound_rate();
    let slack = 1e-9;
    loop {
        // uniform torus grid, deliberately not aligned with the support
        for (j, &i) in idx.iter().enumerate() {
            x[j] = -0.5 + (i as f64 + 0.5) / per_axis as f64;
            neg[j] = -x[j];
        }
        let w = spec.eval(&x);
        symmetry_residual = symmetry_residual.max((w - spec.eval(&neg)).abs());
        if x.iter().any(|c| c.abs() >= hw) && w != 0.0 {
            support_ok = false;
        }
        if w < 0.0 {
            support_ok = false;
        }
        spec.grad(&x, &mut g);
        let lhs: f64 = g.iter().map(|v| v * v).sum();
        if lhs > (spec.grad_bound_c + slack) * rate * w {
            bound_violations += 1;
        }
        if !advance(&mut idx, per_axis) {
            break;
        }
    }
    let normalization_residual = (kernel_norm(spec, 1.0)? - 1.0).abs();
    let grad_constant = spec.estimate_grad_constant();
    let mut grad_constant_by_n = Vec::with_capacity(REFERENCE_COUNTS.len());
    for &n in &REFERENCE_COUNTS {
        grad_constant_by_n.push((n, spec.with_n(n)?.grad_bound_c));
    }
    let reference = grad_constant_by_n[0].1;
    let grad_constant_drift = grad_constant_by_n
        .iter()
        .map(|(_, c)| ((c - reference) / reference).abs())
        .chain(std::iter::once(((grad_constant - reference) / reference).abs()))
        .fold(0.0, f64::max);
    let passed = symmetry_residual == 0.0
        && support_ok
        && normalization_residual < 1e-8
        && grad_constant_drift < 0.01
        && bound_violations == 0;
    Ok(KernelReport {
        dim,
        beta: spec.beta,
        n: spec.n,
        symmetry_residual,
        support_ok,
        normalization_residual,
        grad_constant,
        grad_constant_by_n,
        grad_constant_drift,
        bound_violations,
        within_beta_bound: spec.within_bound,
        passed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quadrature::integrate_cube;

    #[test]
    fn bump_prefactor_normalizes_profile() {
        // ∫(1 − 4t²)³ = 16/35 by independent quadrature
        let raw = integrate_cube(1, -0.5, 0.5, 8, |t| (1.0 - 4.0 * t[0] * t[0]).powi(3));
        assert!((raw - 16.0 / 35.0).abs() < 1e-14);
        assert!((base_kernel_eval(&[0.0]) - 2.1875).abs() < 1e-15);
    }

    #[test]
    fn base_kernel_vanishes_on_boundary() {
        assert_eq!(base_kernel_eval(&[0.5]), 0.0);
        assert_eq!(base_kernel_eval(&[-0.5, 0.1]), 0.0);
        assert_eq!(bump_deriv(0.5), 0.0);
        assert_eq!(bump_second(0.5), 0.0);
    }

    #[test]
    fn derivatives_match_finite_differences() {
        for &t in &[-0.41, -0.2, 0.0, 0.13, 0.37] {
            let e = 1e-6;
            let fd = (bump(t + e) - bump(t - e)) / (2.0 * e);
            assert!((fd - bump_deriv(t)).abs() < 1e-7);
            let fd2 = (bump_deriv(t + e) - bump_deriv(t - e)) / (2.0 * e);
            assert!((fd2 - bump_second(t)).abs() < 1e-6);
        }
    }

    #[test]
    fn base_kernel_integrates_to_one() {
        for dim in 1..=2 {
            let total = integrate_cube(dim, -0.5, 0.5, 16, base_kernel_eval);
            assert!((total - 1.0).abs() < 1e-10, "d={dim}: {total}");
        }
    }

    #[test]
    fn n_one_is_the_base_kernel() {
        let k = KernelSpec::new(2, 0.5, 1).unwrap();
        for x in [[0.1, -0.2], [0.3, 0.05], [-0.49, 0.0]] {
            assert_eq!(k.eval(&x), base_kernel_eval(&x));
        }
    }

    #[test]
    fn scaled_peak_matches_scaling_law() {
        let k = KernelSpec::new(1, 1.0 / 3.0, 8).unwrap();
        assert!((k.eval(&[0.0]) - 4.375).abs() < 1e-12);
        let mut g = [1.0];
        k.grad(&[0.0], &mut g);
        assert_eq!(g[0], 0.0);
    }

    #[test]
    fn scaled_gradient_matches_finite_differences() {
        let k = KernelSpec::new(2, 0.5, 50).unwrap();
        let x = [0.03, -0.05];
        let mut g = [0.0; 2];
        k.grad(&x, &mut g);
        let e = 1e-7;
        for j in 0..2 {
            let mut p = x;
            let mut m = x;
            p[j] += e;
            m[j] -= e;
            let fd = (k.eval(&p) - k.eval(&m)) / (2.0 * e);
            assert!((fd - g[j]).abs() < 1e-5 * g[j].abs().max(1.0));
        }
    }

    #[test]
    fn norms_follow_scaling() {
        let k = KernelSpec::new(1, 1.0 / 3.0, 8).unwrap();
        assert!((kernel_norm(&k, 1.0).unwrap() - 1.0).abs() < 1e-10);
        assert!((kernel_norm(&k, f64::INFINITY).unwrap() - 4.375).abs() < 1e-12);
        let base = KernelSpec::new(1, 1.0 / 3.0, 1).unwrap();
        let ratio = kernel_norm(&k, 2.0).unwrap() / kernel_norm(&base, 2.0).unwrap();
        assert!((ratio / 8f64.powf(1.0 / 6.0) - 1.0).abs() < 1e-6);
        assert!(kernel_norm(&k, 0.5).is_err());
    }

    #[test]
    fn one_dimensional_gradient_constant() {
        // max over t of 1260 t²(1 − 4t²) is 1260/16 at t² = 1/8
        let k = KernelSpec::new(1, 1.0 / 3.0, 1).unwrap();
        assert!((k.grad_bound_c() - 78.75).abs() < 1e-8, "{}", k.grad_bound_c());
    }

    #[test]
    fn beta_bound_is_enforced() {
        assert!(matches!(
            KernelSpec::new(1, 0.5, 10),
            Err(Error::BetaOutOfRange { .. })
        ));
        let k = KernelSpec::exploratory(1, 0.5, 10).unwrap();
        assert!(!k.within_bound());
        assert!(KernelSpec::new(2, 0.5, 10).unwrap().within_bound());
    }

    #[test]
    fn validation_passes_for_builtin_kernels() {
        for dim in 1..=2 {
            let k = KernelSpec::new(dim, beta_bound(dim), 37).unwrap();
            let r = validate_kernel(&k).unwrap();
            assert!(r.passed, "{r:?}");
            assert_eq!(r.symmetry_residual, 0.0);
            assert!(r.grad_constant_drift < 0.01);
        }
    }
}
