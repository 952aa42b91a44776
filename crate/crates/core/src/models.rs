//! Affine residual model and the Gauss-Newton objective model built from it.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::Result;
use crate::interp::InterpolationSet;

/// `r(y) ≈ c + J (y − x_b)`.
#[derive(Debug, Clone)]
pub struct ResidualModel {
    pub base: DVector<f64>,
    pub c: DVector<f64>,
    pub jac: Arc<DMatrix<f64>>,
}

impl ResidualModel {
    /// Builds the model with `c = r(x_k) − J (x_k − x_b)`, so the prediction
    /// at `x_k` reproduces `r(x_k)`.
    pub fn new(base: DVector<f64>, rk: &DVector<f64>, xk: &DVector<f64>, jac: DMatrix<f64>) -> Self {
        let c = rk - &jac * (xk - &base);
        Self { base, c, jac: Arc::new(jac) }
    }

    /// Model residual at the absolute point `y`.
    pub fn predict(&self, y: &DVector<f64>) -> DVector<f64> {
        &self.c + self.jac.as_ref() * (y - &self.base)
    }

    /// Re-expresses the model around `new_base`: `c ← c + J Δb`.
    pub fn shift_base(&mut self, new_base: &DVector<f64>) {
        let shift = new_base - &self.base;
        self.c += self.jac.as_ref() * &shift;
        self.base = new_base.clone();
    }
}

/// `m(s) = f0 + gᵀs + ½ sᵀ H s` with `H = JᵀJ` kept in factored form.
#[derive(Debug, Clone)]
pub struct ObjectiveModel {
    pub f0: f64,
    pub g: DVector<f64>,
    pub jac: Arc<DMatrix<f64>>,
    /// `r(x_k)`, kept for the residual-form evaluation.
    pub rk: DVector<f64>,
}

impl ObjectiveModel {
    pub fn new(rk: DVector<f64>, jac: Arc<DMatrix<f64>>) -> Self {
        let g = jac.tr_mul(&rk);
        let f0 = 0.5 * rk.norm_squared();
        Self { f0, g, jac, rk }
    }

    pub fn n(&self) -> usize {
        self.g.len()
    }

    /// `H v = Jᵀ (J v)`.
    pub fn hess_vec(&self, v: &DVector<f64>) -> DVector<f64> {
        let jv = self.jac.as_ref() * v;
        self.jac.tr_mul(&jv)
    }

    /// `vᵀ H v = ‖J v‖²`.
    pub fn curvature(&self, v: &DVector<f64>) -> f64 {
        (self.jac.as_ref() * v).norm_squared()
    }

    /// Model value via `(f0, g, H)`.
    pub fn value(&self, s: &DVector<f64>) -> f64 {
        let v = self.f0 + self.g.dot(s) + 0.5 * self.curvature(s);
        debug_assert!({
            let alt = self.value_residual_form(s);
            let scale = self.f0.abs() + self.g.dot(s).abs() + 0.5 * self.curvature(s) + f64::MIN_POSITIVE;
            (v - alt).abs() <= 1e-10 * scale
        });
        v
    }

    /// Model value via `½‖r(x_k) + J s‖²`.
    pub fn value_residual_form(&self, s: &DVector<f64>) -> f64 {
        0.5 * (&self.rk + self.jac.as_ref() * s).norm_squared()
    }

    /// `m(0) − m(s)`.
    pub fn predicted_reduction(&self, s: &DVector<f64>) -> f64 {
        -(self.g.dot(s) + 0.5 * self.curvature(s))
    }

    /// Dense `JᵀJ`. Only for small `n`; the solver never forms it.
    pub fn hessian_dense(&self) -> DMatrix<f64> {
        self.jac.tr_mul(self.jac.as_ref())
    }

    /// `‖H‖ = ‖J‖²` from the singular values of `J`.
    pub fn hessian_norm(&self) -> f64 {
        if self.jac.nrows() == 0 || self.jac.ncols() == 0 {
            return 0.0;
        }
        let smax = self.jac.as_ref().clone().singular_values().max();
        smax * smax
    }

    /// Lower estimate of `‖H‖` by power iteration on `JᵀJ`, O(mn) per sweep.
    pub fn hessian_norm_power(&self, sweeps: usize) -> f64 {
        let n = self.n();
        if n == 0 {
            return 0.0;
        }
        let mut v = DVector::from_fn(n, |i, _| 1.0 + (i as f64 * 0.618_033_988_75).fract());
        v += &self.g;
        let mut lambda = 0.0;
        for _ in 0..sweeps {
            let norm = v.norm();
            if norm == 0.0 || !norm.is_finite() {
                break;
            }
            v /= norm;
            let hv = self.hess_vec(&v);
            let next = v.dot(&hv);
            let converged = (next - lambda).abs() <= 1e-12 * next.abs();
            lambda = next;
            v = hv;
            if converged {
                break;
            }
        }
        lambda
    }
}

/// Solves for `J_k` on the set and assembles both models.
pub fn build_objective_model(set: &InterpolationSet) -> Result<(ResidualModel, ObjectiveModel)> {
    let jac = set.solve_jacobian()?;
    let rk = set.rval(0).clone();
    let residual = ResidualModel::new(set.base().clone(), &rk, &set.xk(), jac);
    let objective = ObjectiveModel::new(rk, Arc::clone(&residual.jac));
    Ok((residual, objective))
}

/// Evaluates `m(s)`.
pub fn model_value(model: &ObjectiveModel, s: &DVector<f64>) -> f64 {
    model.value(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_model(rng: &mut ChaCha8Rng, n: usize, m: usize) -> ObjectiveModel {
        let jac = DMatrix::from_fn(m, n, |_, _| rng.random_range(-1.0..1.0));
        let rk = DVector::from_fn(m, |_, _| rng.random_range(-1.0..1.0));
        ObjectiveModel::new(rk, Arc::new(jac))
    }

    #[test]
    fn identity_residual_model() {
        let xhat = DVector::from_vec(vec![0.3, -1.0, 2.0]);
        let jac = Arc::new(DMatrix::identity(3, 3));
        let model = ObjectiveModel::new(xhat.clone(), jac);
        assert_eq!(model.g, xhat);
        assert_eq!(model.hessian_dense(), DMatrix::identity(3, 3));
        assert_eq!(model.value(&DVector::zeros(3)), 0.5 * xhat.norm_squared());
    }

    #[test]
    fn zero_residual_gives_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let jac = Arc::new(DMatrix::from_fn(4, 3, |_, _| rng.random_range(-5.0..5.0)));
        let model = ObjectiveModel::new(DVector::zeros(4), jac);
        assert!(model.g.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn closed_form_value() {
        // H = I, g = −e1, f0 = 1: built from J = I, r = −e1 gives f0 = 0.5,
        // so check the quadratic form directly with f0 shifted.
        let jac = Arc::new(DMatrix::identity(2, 2));
        let mut model = ObjectiveModel::new(DVector::from_vec(vec![-1.0, 0.0]), jac);
        assert_eq!(model.g, DVector::from_vec(vec![-1.0, 0.0]));
        model.f0 = 1.0;
        let s = DVector::from_vec(vec![1.0, 0.0]);
        assert!((model.f0 + model.g.dot(&s) + 0.5 * model.curvature(&s) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn value_forms_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let n = rng.random_range(1..8);
            let m = rng.random_range(1..12);
            let model = random_model(&mut rng, n, m);
            let s = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
            let a = model.value(&s);
            let b = model.value_residual_form(&s);
            let scale = model.f0 + model.g.dot(&s).abs() + 0.5 * model.curvature(&s);
            assert!((a - b).abs() <= 1e-12 * scale.max(a.abs()), "{a} vs {b}");
        }
    }

    #[test]
    fn hessian_norm_is_jacobian_norm_squared() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let model = random_model(&mut rng, 4, 6);
            let h = model.hessian_dense();
            let eig = h.symmetric_eigenvalues().max();
            assert!((model.hessian_norm() - eig).abs() < 1e-10 * eig.max(1.0));
            assert!(model.hessian_norm_power(500) <= eig * (1.0 + 1e-12));
            // Positive semidefinite.
            assert!(h.symmetric_eigenvalues().min() > -1e-12);
        }
    }

    #[test]
    fn shift_preserves_predictions() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let n = 3;
            let m = 4;
            let jac = DMatrix::from_fn(m, n, |_, _| rng.random_range(-2.0..2.0));
            let base = DVector::from_fn(n, |_, _| rng.random_range(-10.0..10.0));
            let xk = &base + DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
            let rk = DVector::from_fn(m, |_, _| rng.random_range(-1.0..1.0));
            let mut model = ResidualModel::new(base, &rk, &xk, jac);
            assert!((model.predict(&xk) - &rk).norm() < 1e-12);
            let ys: Vec<DVector<f64>> = (0..100)
                .map(|_| DVector::from_fn(n, |_, _| rng.random_range(-10.0..10.0)))
                .collect();
            let before: Vec<_> = ys.iter().map(|y| model.predict(y)).collect();
            let new_base = DVector::from_fn(n, |_, _| rng.random_range(-10.0..10.0));
            model.shift_base(&new_base);
            for (y, b) in ys.iter().zip(&before) {
                let a = model.predict(y);
                assert!((a - b).norm() <= 1e-12 * b.norm().max(1.0) * 10.0);
            }
        }
    }
}
