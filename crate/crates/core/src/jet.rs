//! Scalar-valued jets over the full design vector: a value bundled with its
//! gradient and symmetric Hessian with respect to all `5n` pill parameters.

use crate::geometry::PILL_PARAMS;

/// Value, gradient and dense symmetric Hessian over `5n` design scalars.
///
/// The Hessian is row-major. Writers are expected to fill symmetric entries
/// from the same product so that `H == H^T` holds bitwise; block accessors
/// exist mainly for tests that inspect the per-pill coupling structure.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarJet {
    pub value: f64,
    pub grad: Vec<f64>,
    pub hess: Vec<f64>,
}

impl ScalarJet {
    pub fn zeros(n_params: usize) -> Self {
        ScalarJet {
            value: 0.0,
            grad: vec![0.0; n_params],
            hess: vec![0.0; n_params * n_params],
        }
    }

    pub fn n_params(&self) -> usize {
        self.grad.len()
    }

    pub fn hess_at(&self, i: usize, j: usize) -> f64 {
        self.hess[i * self.grad.len() + j]
    }

    /// The 5x5 Hessian block coupling pill `a` and pill `b`.
    pub fn hess_block(&self, a: usize, b: usize) -> [[f64; PILL_PARAMS]; PILL_PARAMS] {
        let n = self.grad.len();
        let mut out = [[0.0; PILL_PARAMS]; PILL_PARAMS];
        for (i, row) in out.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = self.hess[(a * PILL_PARAMS + i) * n + (b * PILL_PARAMS + j)];
            }
        }
        out
    }

    /// Largest absolute asymmetry `max |H - H^T|`; zero by construction for
    /// jets assembled in this crate.
    pub fn hess_asymmetry(&self) -> f64 {
        let n = self.grad.len();
        let mut worst = 0.0_f64;
        for i in 0..n {
            for j in (i + 1)..n {
                worst = worst.max((self.hess[i * n + j] - self.hess[j * n + i]).abs());
            }
        }
        worst
    }
}
