//! Geometry of the flat torus identified with `[-1/2, 1/2)^d`.

use serde::{Deserialize, Serialize};

/// Maps a real coordinate into the fundamental interval `[-1/2, 1/2)`.
#[inline]
pub fn wrap(x: f64) -> f64 {
    let mut r = x - (x + 0.5).floor();
    // floor can land exactly on the excluded endpoint after rounding
    if r >= 0.5 {
        r -= 1.0;
    }
    if r < -0.5 {
        r += 1.0;
    }
    r
}

/// Wraps every coordinate in place.
pub fn wrap_in_place(coords: &mut [f64]) {
    for c in coords {
        *c = wrap(*c);
    }
}

/// Minimal-image displacement `v` with `wrap(y + v) = x`.
pub fn torus_displacement(x: &[f64], y: &[f64]) -> Vec<f64> {
    assert_eq!(x.len(), y.len(), "points of different dimension");
    x.iter().zip(y).map(|(a, b)| wrap(a - b)).collect()
}

/// Euclidean length of the minimal-image displacement.
pub fn torus_distance(x: &[f64], y: &[f64]) -> f64 {
    x.iter()
        .zip(y)
        .map(|(a, b)| wrap(a - b).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// A point of the torus; coordinates are always stored wrapped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TorusPoint {
    coords: Vec<f64>,
}

impl TorusPoint {
    pub fn new(mut coords: Vec<f64>) -> Self {
        wrap_in_place(&mut coords);
        Self { coords }
    }

    pub fn dim(&self) -> usize {
        self.coords.len()
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn displacement_to(&self, other: &TorusPoint) -> Vec<f64> {
        torus_displacement(&other.coords, &self.coords)
    }
}

impl From<Vec<f64>> for TorusPoint {
    fn from(v: Vec<f64>) -> Self {
        Self::new(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn identity_displacement_is_zero() {
        assert_eq!(torus_displacement(&[0.1], &[0.1]), vec![0.0]);
    }

    #[test]
    fn displacement_wraps_across_boundary() {
        let v = torus_displacement(&[0.45], &[-0.45]);
        assert!((v[0] + 0.1).abs() < 1e-12);
    }

    #[test]
    fn displacement_two_dimensional_matches_image_enumeration() {
        let x = [0.4, 0.0];
        let y = [-0.4, 0.1];
        // brute force over the 3^d images of x
        let mut best = (f64::INFINITY, [0.0; 2]);
        for i in -1..=1 {
            for j in -1..=1 {
                let v = [x[0] + i as f64 - y[0], x[1] + j as f64 - y[1]];
                let len = v[0].hypot(v[1]);
                if len < best.0 {
                    best = (len, v);
                }
            }
        }
        let v = torus_displacement(&x, &y);
        assert!((v[0] - best.1[0]).abs() < 1e-12 && (v[1] - best.1[1]).abs() < 1e-12);
        assert!((v[0] + 0.2).abs() < 1e-12 && (v[1] + 0.1).abs() < 1e-12);
    }

    #[test]
    fn wrap_handles_endpoints() {
        assert_eq!(wrap(0.5), -0.5);
        assert_eq!(wrap(-0.5), -0.5);
        assert!(wrap(-0.5 - 1e-17) < 0.5);
        assert_eq!(wrap(3.25), 0.25);
    }

    proptest! {
        #[test]
        fn wrap_is_idempotent_and_in_range(x in -1.0e6f64..1.0e6) {
            let w = wrap(x);
            prop_assert!((-0.5..0.5).contains(&w));
            prop_assert_eq!(wrap(w), w);
        }

        #[test]
        fn displacement_is_antisymmetric(a in -0.5f64..0.5, b in -0.5f64..0.5, c in -0.5f64..0.5, d in -0.5f64..0.5) {
            let v = torus_displacement(&[a, c], &[b, d]);
            let w = torus_displacement(&[b, d], &[a, c]);
            for (p, q) in v.iter().zip(&w) {
                // the two values agree after wrapping, including the -1/2 antipode
                prop_assert!(wrap(p + q).abs() < 1e-12 || (wrap(p + q) + 0.5).abs() < 1e-12);
                prop_assert!((-0.5..0.5).contains(p));
            }
            let moved: Vec<f64> = [b, d].iter().zip(&v).map(|(y, s)| wrap(y + s)).collect();
            prop_assert!(torus_distance(&moved, &[a, c]) < 1e-12);
        }
    }
}
