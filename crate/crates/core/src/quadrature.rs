//! Composite Gauss–Legendre rules on boxes.

const GL5_NODES: [f64; 5] = [
    -0.906_179_845_938_664,
    -0.538_469_310_105_683_1,
    0.0,
    0.538_469_310_105_683_1,
    0.906_179_845_938_664,
];
const GL5_WEIGHTS: [f64; 5] = [
    0.236_926_885_056_189_08,
    0.478_628_670_499_366_47,
    0.568_888_888_888_888_9,
    0.478_628_670_499_366_47,
    0.236_926_885_056_189_08,
];

/// Nodes and weights of a composite 5-point Gauss–Legendre rule on `[a, b]`.
pub fn composite_gauss_legendre(a: f64, b: f64, panels: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(panels > 0);
    let width = (b - a) / panels as f64;
    let mut nodes = Vec::with_capacity(panels * 5);
    let mut weights = Vec::with_capacity(panels * 5);
    for p in 0..panels {
        let mid = a + (p as f64 + 0.5) * width;
        for (t, w) in GL5_NODES.iter().zip(GL5_WEIGHTS.iter()) {
            nodes.push(mid + 0.5 * width * t);
            weights.push(0.5 * width * w);
        }
    }
    (nodes, weights)
}

/// Integrates `f` over the cube `[a, b]^dim` with a tensor-product composite rule.
pub fn integrate_cube<F>(dim: usize, a: f64, b: f64, panels: usize, mut f: F) -> f64
where
    F: FnMut(&[f64]) -> f64,
{
    let (nodes, weights) = composite_gauss_legendre(a, b, panels);
    let k = nodes.len();
    let mut idx = vec![0usize; dim];
    let mut x = vec![0.0; dim];
    let mut total = 0.0;
    loop {
        let mut w = 1.0;
        for (j, &i) in idx.iter().enumerate() {
            x[j] = nodes[i];
            w *= weights[i];
        }
        total += w * f(&x);
        if !advance(&mut idx, k) {
            break;
        }
    }
    total
}

/// Odometer increment over `[0, k)^len`; returns false after the last index.
pub(crate) fn advance(idx: &mut [usize], k: usize) -> bool {
    for slot in idx.iter_mut() {
        *slot += 1;
        if *slot < k {
            return true;
        }
        *slot = 0;
    }
    false
}
