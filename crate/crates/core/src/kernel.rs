//! Discrete Henyey-Greenstein scattering kernel.

use crate::error::{Error, Result};
use crate::grid::AngularQuadrature;

/// Unnormalized two-dimensional Henyey-Greenstein value at `cos_theta`:
/// `(1 - g^2) / (2 (1 + g^2 - 2 g cos)^(3/2))`.
pub fn hg_raw(g: f64, cos_theta: f64) -> f64 {
    (1.0 - g * g) / (2.0 * (1.0 + g * g - 2.0 * g * cos_theta).powf(1.5))
}

/// `K[i][j]` is the probability density (per unit quadrature weight) of
/// scattering from direction `j` into direction `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScatteringKernel {
    pub n_dirs: usize,
    pub g: f64,
    /// Quadrature weight the kernel was normalized against.
    pub weight: f64,
    /// Row-major `n_dirs x n_dirs`.
    pub matrix: Vec<f64>,
}

impl ScatteringKernel {
    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.matrix[i * self.n_dirs + j]
    }

    pub fn matches(&self, quad: &AngularQuadrature) -> bool {
        self.n_dirs == quad.n_dirs() && (self.weight - quad.weight).abs() <= 1e-15 * quad.weight
    }

    /// `sum_j K[i][j] * w` for row `i`.
    pub fn row_mass(&self, i: usize) -> f64 {
        (0..self.n_dirs).map(|j| self.get(i, j) * self.weight).sum()
    }
}

/// Evaluates the raw kernel at `cos = theta_i . theta_j` and rescales so every
/// row integrates to one under the quadrature.
///
/// Directions are equispaced, so the matrix is circulant and symmetric and all
/// rows share one normalization constant; the constant is computed from the
/// first row and applied to the whole matrix, which keeps symmetry exact.
pub fn hg_kernel(g: f64, quad: &AngularQuadrature) -> Result<ScatteringKernel> {
    if !(g.abs() < 1.0) {
        return Err(Error::Kernel(format!("anisotropy must satisfy |g| < 1, got {g}")));
    }
    let n = quad.n_dirs();
    // raw value depends only on the index offset (k = |i - j| folded)
    let offset_value: Vec<f64> = (0..n)
        .map(|d| {
            let k = d.min(n - d);
            let (c0, s0) = quad.directions[0];
            let (ck, sk) = quad.directions[k];
            hg_raw(g, c0 * ck + s0 * sk)
        })
        .collect();
    let row_sum: f64 = offset_value.iter().sum::<f64>() * quad.weight;
    let mut matrix = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let d = (j + n - i) % n;
            matrix[i * n + j] = offset_value[d] / row_sum;
        }
    }
    Ok(ScatteringKernel {
        n_dirs: n,
        g,
        weight: quad.weight,
        matrix,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::make_quadrature;
    use std::f64::consts::PI;

    #[test]
    fn raw_forward_peak_at_g09() {
        // (1 - 0.81) / (2 * (1.81 - 1.8)^1.5) = 0.19 / (2 * 0.001) = 95
        assert!((hg_raw(0.9, 1.0) - 95.0).abs() < 1e-9);
    }

    #[test]
    fn isotropic_is_uniform() {
        let q = make_quadrature(12).unwrap();
        let k = hg_kernel(0.0, &q).unwrap();
        for v in &k.matrix {
            assert!((v - 1.0 / (2.0 * PI)).abs() < 1e-15);
        }
    }

    #[test]
    fn rows_normalized_and_symmetric() {
        for n in [4, 8, 12, 16] {
            let q = make_quadrature(n).unwrap();
            for g in [-0.5, 0.0, 0.5, 0.9] {
                let k = hg_kernel(g, &q).unwrap();
                for i in 0..n {
                    assert!((k.row_mass(i) - 1.0).abs() < 1e-13);
                    for j in 0..n {
                        assert_eq!(k.get(i, j), k.get(j, i));
                        assert!(k.get(i, j) >= 0.0);
                    }
                }
            }
        }
    }

    proptest::proptest! {
        #[test]
        fn any_anisotropy_gives_a_stochastic_symmetric_kernel(g in -0.95f64..0.95, n in 1usize..=16) {
            let q = make_quadrature(4 * n).unwrap();
            let k = hg_kernel(g, &q).unwrap();
            for i in 0..4 * n {
                proptest::prop_assert!((k.row_mass(i) - 1.0).abs() < 1e-13);
                for j in 0..4 * n {
                    proptest::prop_assert_eq!(k.get(i, j), k.get(j, i));
                }
            }
        }
    }

    #[test]
    fn rejects_bad_anisotropy() {
        let q = make_quadrature(12).unwrap();
        assert!(hg_kernel(1.0, &q).is_err());
        assert!(hg_kernel(-1.2, &q).is_err());
        assert!(hg_kernel(f64::NAN, &q).is_err());
    }
}
