use nalgebra::DMatrix;

/// Sparse gradient as `(index, value)` pairs; indices may repeat.
pub type SparseVec = Vec<(usize, f64)>;

/// Curvature of a function restricted to the variables it touches.
#[derive(Debug, Clone, PartialEq)]
pub enum HessianBlock {
    Diagonal(SparseVec),
    Dense { indices: Vec<usize>, matrix: DMatrix<f64> },
}

/// A twice-differentiable real function of the stacked variable vector.
///
/// Points outside the function's domain report a non-finite value.
pub trait SmoothFunction {
    fn value(&self, x: &[f64]) -> f64;
    fn gradient(&self, x: &[f64]) -> SparseVec;
    /// `None` for affine functions.
    fn hessian(&self, x: &[f64]) -> Option<HessianBlock>;
}

/// `a^T x + c`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineFunction {
    pub coeffs: SparseVec,
    pub constant: f64,
}

impl AffineFunction {
    pub fn new(coeffs: SparseVec, constant: f64) -> Self {
        Self { coeffs, constant }
    }

    /// `lo - x_i <= 0`
    pub fn lower_bound(i: usize, lo: f64) -> Self {
        Self::new(vec![(i, -1.0)], lo)
    }

    /// `x_i - hi <= 0`
    pub fn upper_bound(i: usize, hi: f64) -> Self {
        Self::new(vec![(i, 1.0)], -hi)
    }
}

pub(crate) fn dot_sparse(coeffs: &[(usize, f64)], x: &[f64]) -> f64 {
    coeffs.iter().map(|&(i, a)| a * x[i]).sum()
}

impl SmoothFunction for AffineFunction {
    fn value(&self, x: &[f64]) -> f64 {
        dot_sparse(&self.coeffs, x) + self.constant
    }

    fn gradient(&self, _x: &[f64]) -> SparseVec {
        self.coeffs.clone()
    }

    fn hessian(&self, _x: &[f64]) -> Option<HessianBlock> {
        None
    }
}

/// `z^T Q z + a^T x + c` with `z = x[indices]` and `Q` symmetric.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticFunction {
    pub indices: Vec<usize>,
    pub q: DMatrix<f64>,
    pub linear: SparseVec,
    pub constant: f64,
}

impl QuadraticFunction {
    pub fn new(indices: Vec<usize>, q: DMatrix<f64>, linear: SparseVec, constant: f64) -> Self {
        debug_assert_eq!(q.nrows(), indices.len());
        debug_assert!((&q - q.transpose()).amax() <= 1e-9 * (1.0 + q.amax()));
        Self { indices, q, linear, constant }
    }

    fn gather(&self, x: &[f64]) -> nalgebra::DVector<f64> {
        nalgebra::DVector::from_iterator(self.indices.len(), self.indices.iter().map(|&i| x[i]))
    }
}

impl SmoothFunction for QuadraticFunction {
    fn value(&self, x: &[f64]) -> f64 {
        let z = self.gather(x);
        z.dot(&(&self.q * &z)) + dot_sparse(&self.linear, x) + self.constant
    }

    fn gradient(&self, x: &[f64]) -> SparseVec {
        let z = self.gather(x);
        let qz = &self.q * &z;
        let mut g: SparseVec = self.indices.iter().zip(qz.iter()).map(|(&i, v)| (i, 2.0 * v)).collect();
        g.extend_from_slice(&self.linear);
        g
    }

    fn hessian(&self, _x: &[f64]) -> Option<HessianBlock> {
        Some(HessianBlock::Dense {
            indices: self.indices.clone(),
            matrix: &self.q * 2.0,
        })
    }
}

/// `sum_i w_i ln(1 + x_i) + a^T x + c`, concave for `w_i >= 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct Log1pSum {
    pub terms: SparseVec,
    pub linear: SparseVec,
    pub constant: f64,
}

impl SmoothFunction for Log1pSum {
    fn value(&self, x: &[f64]) -> f64 {
        let mut v = self.constant + dot_sparse(&self.linear, x);
        for &(i, w) in &self.terms {
            if x[i] <= -1.0 {
                return f64::NEG_INFINITY;
            }
            v += w * x[i].ln_1p();
        }
        v
    }

    fn gradient(&self, x: &[f64]) -> SparseVec {
        let mut g: SparseVec = self.terms.iter().map(|&(i, w)| (i, w / (1.0 + x[i]))).collect();
        g.extend_from_slice(&self.linear);
        g
    }

    fn hessian(&self, x: &[f64]) -> Option<HessianBlock> {
        Some(HessianBlock::Diagonal(
            self.terms.iter().map(|&(i, w)| (i, -w / ((1.0 + x[i]) * (1.0 + x[i])))).collect(),
        ))
    }
}

/// `f(x) - x[slack]`, used by the phase-one problem.
pub(crate) struct Shifted<'a> {
    pub inner: &'a dyn SmoothFunction,
    pub slack: usize,
}

impl SmoothFunction for Shifted<'_> {
    fn value(&self, x: &[f64]) -> f64 {
        self.inner.value(x) - x[self.slack]
    }

    fn gradient(&self, x: &[f64]) -> SparseVec {
        let mut g = self.inner.gradient(x);
        g.push((self.slack, -1.0));
        g
    }

    fn hessian(&self, x: &[f64]) -> Option<HessianBlock> {
        self.inner.hessian(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn finite_difference(f: &dyn SmoothFunction, x: &[f64]) -> Vec<f64> {
        let h = 1e-6;
        (0..x.len())
            .map(|i| {
                let mut xp = x.to_vec();
                let mut xm = x.to_vec();
                xp[i] += h;
                xm[i] -= h;
                (f.value(&xp) - f.value(&xm)) / (2.0 * h)
            })
            .collect()
    }

    fn dense_grad(g: &SparseVec, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; n];
        for &(i, v) in g {
            out[i] += v;
        }
        out
    }

    #[test]
    fn quadratic_gradient_matches_finite_difference() {
        let q = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let f = QuadraticFunction::new(vec![3, 1], q, vec![(0, 1.5), (1, -0.5)], 2.0);
        let x = [0.3, -1.2, 4.0, 0.7];
        let g = dense_grad(&f.gradient(&x), 4);
        for (a, b) in g.iter().zip(finite_difference(&f, &x)) {
            assert!((a - b).abs() < 1e-6);
        }
        // z = (x3, x1) = (0.7, -1.2)
        let want = 2.0 * 0.49 + 2.0 * 0.5 * 0.7 * -1.2 + 1.44 + 1.5 * 0.3 + 0.6 + 2.0;
        assert!((f.value(&x) - want).abs() < 1e-12);
    }

    #[test]
    fn log_sum_domain_and_gradient() {
        let f = Log1pSum {
            terms: vec![(0, 2.0), (2, 0.5)],
            linear: vec![(1, -1.0)],
            constant: 0.0,
        };
        let x = [1.0, 3.0, 0.25];
        let want = 2.0 * 2f64.ln() - 3.0 + 0.5 * 1.25f64.ln();
        assert!((f.value(&x) - want).abs() < 1e-14);
        let g = dense_grad(&f.gradient(&x), 3);
        for (a, b) in g.iter().zip(finite_difference(&f, &x)) {
            assert!((a - b).abs() < 1e-6);
        }
        assert_eq!(f.value(&[-1.0, 0.0, 0.0]), f64::NEG_INFINITY);
    }

    #[test]
    fn bounds_signs() {
        let lo = AffineFunction::lower_bound(0, 1.0);
        assert!(lo.value(&[2.0]) < 0.0 && lo.value(&[0.5]) > 0.0);
        let hi = AffineFunction::upper_bound(0, 1.0);
        assert!(hi.value(&[0.5]) < 0.0 && hi.value(&[2.0]) > 0.0);
    }
}
