//! Linear interpolation set for the residual model.
//!
//! The set holds `n + 1` points stored as offsets from a base point `x_b`.
//! Index 0 is always the current iterate `x_k`. The interpolation matrix `W`
//! has rows `(y_t − x_k)ᵀ` for `t = 1..=n` and is LU-factorized once per
//! geometry change; the factorization serves both the Jacobian solve (one
//! right-hand side per residual) and the Lagrange polynomials.

use nalgebra::{DMatrix, DVector, Dyn, LU};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::models::ResidualModel;
use crate::subproblems::lin_max_ball_box;

/// Pivots below this fraction of `‖W‖_∞` mark `W` as singular.
pub const SINGULAR_PIVOT_RTOL: f64 = 1e-14;

#[derive(Debug, Clone)]
struct Factorization {
    lu: LU<f64, Dyn, Dyn>,
}

impl Factorization {
    fn new(w: DMatrix<f64>) -> Result<Self> {
        let norm_inf = w
            .row_iter()
            .map(|row| row.iter().map(|v| v.abs()).sum::<f64>())
            .fold(0.0, f64::max);
        if !(norm_inf.is_finite() && norm_inf > 0.0) {
            return Err(Error::DegenerateGeometry);
        }
        let lu = w.lu();
        let u = lu.u();
        let tol = SINGULAR_PIVOT_RTOL * norm_inf;
        if u.diagonal().iter().any(|p| !(p.abs() > tol)) {
            return Err(Error::DegenerateGeometry);
        }
        Ok(Self { lu })
    }

    fn solve(&self, rhs: &DMatrix<f64>) -> DMatrix<f64> {
        self.lu.solve(rhs).expect("factorization was checked nonsingular")
    }

    fn solve_vec(&self, rhs: &DVector<f64>) -> DVector<f64> {
        self.lu.solve(rhs).expect("factorization was checked nonsingular")
    }
}

/// `n + 1` interpolation points with their recorded residuals.
#[derive(Debug, Clone)]
pub struct InterpolationSet {
    base: DVector<f64>,
    /// Rows `(y_t − x_b)`.
    offsets: Vec<DVector<f64>>,
    rvals: Vec<DVector<f64>>,
    fvals: Vec<f64>,
    factor: Option<Factorization>,
}

impl InterpolationSet {
    /// Builds a set from absolute points. `points[0]` becomes the iterate and
    /// the base point. Fails with `DegenerateGeometry` when `W` is singular;
    /// use [`InterpolationSet::new_unchecked`] to keep a degenerate set.
    pub fn new(points: Vec<DVector<f64>>, rvals: Vec<DVector<f64>>) -> Result<Self> {
        let set = Self::new_unchecked(points, rvals);
        if set.factor.is_none() {
            return Err(Error::DegenerateGeometry);
        }
        Ok(set)
    }

    pub fn new_unchecked(points: Vec<DVector<f64>>, rvals: Vec<DVector<f64>>) -> Self {
        assert!(!points.is_empty());
        assert_eq!(points.len(), rvals.len());
        let n = points[0].len();
        assert_eq!(points.len(), n + 1, "linear interpolation needs n + 1 points");
        let base = points[0].clone();
        let offsets = points.iter().map(|p| p - &base).collect();
        let fvals = rvals.iter().map(|r| 0.5 * r.norm_squared()).collect();
        let mut set = Self { base, offsets, rvals, fvals, factor: None };
        set.refactor();
        set
    }

    pub fn n(&self) -> usize {
        self.base.len()
    }

    pub fn m(&self) -> usize {
        self.rvals[0].len()
    }

    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }

    pub fn base(&self) -> &DVector<f64> {
        &self.base
    }

    pub fn offset(&self, t: usize) -> &DVector<f64> {
        &self.offsets[t]
    }

    pub fn point(&self, t: usize) -> DVector<f64> {
        &self.base + &self.offsets[t]
    }

    pub fn points(&self) -> Vec<DVector<f64>> {
        (0..self.len()).map(|t| self.point(t)).collect()
    }

    /// Current iterate `x_k = y_0`.
    pub fn xk(&self) -> DVector<f64> {
        self.point(0)
    }

    pub fn rval(&self, t: usize) -> &DVector<f64> {
        &self.rvals[t]
    }

    pub fn fval(&self, t: usize) -> f64 {
        self.fvals[t]
    }

    pub fn is_poised(&self) -> bool {
        self.factor.is_some()
    }

    /// Index of the point with the lowest recorded objective (lowest index on ties).
    pub fn best_index(&self) -> usize {
        let mut best = 0;
        for t in 1..self.len() {
            if self.fvals[t] < self.fvals[best] {
                best = t;
            }
        }
        best
    }

    /// Distance of `y_t` from the iterate.
    pub fn distance_to_xk(&self, t: usize) -> f64 {
        (&self.offsets[t] - &self.offsets[0]).norm()
    }

    /// Matrix with rows `(y_t − x_k)ᵀ`, `t = 1..=n`.
    pub fn w_matrix(&self) -> DMatrix<f64> {
        let n = self.n();
        DMatrix::from_fn(n, n, |row, col| self.offsets[row + 1][col] - self.offsets[0][col])
    }

    fn refactor(&mut self) {
        self.factor = Factorization::new(self.w_matrix()).ok();
    }

    fn factor(&self) -> Result<&Factorization> {
        self.factor.as_ref().ok_or(Error::DegenerateGeometry)
    }

    /// Replaces point `t` (never the iterate) with `y`, refactorizing `W`.
    /// The set is left in place even if the new `W` is singular; callers
    /// check [`InterpolationSet::is_poised`].
    pub fn replace(&mut self, t: usize, y: &DVector<f64>, r: DVector<f64>) {
        assert!(t != 0 && t < self.len(), "cannot replace the iterate");
        self.offsets[t] = y - &self.base;
        self.fvals[t] = 0.5 * r.norm_squared();
        self.rvals[t] = r;
        self.refactor();
    }

    /// Overrides the recorded objective of point `t` (used when the observed
    /// objective differs from ½‖r‖², which it never does for this solver,
    /// but tests construct such sets).
    pub fn set_fval(&mut self, t: usize, f: f64) {
        self.fvals[t] = f;
    }

    /// Makes point `t` the iterate by swapping it into slot 0.
    pub fn set_iterate(&mut self, t: usize) {
        if t == 0 {
            return;
        }
        self.offsets.swap(0, t);
        self.rvals.swap(0, t);
        self.fvals.swap(0, t);
        self.refactor();
    }

    /// Model Jacobian from `W j_i = [r_i(y_t) − r_i(x_k)]_t`, all rows at once.
    pub fn solve_jacobian(&self) -> Result<DMatrix<f64>> {
        let factor = self.factor()?;
        let n = self.n();
        let m = self.m();
        let r0 = &self.rvals[0];
        let rhs = DMatrix::from_fn(n, m, |row, i| self.rvals[row + 1][i] - r0[i]);
        let x = factor.solve(&rhs);
        Ok(x.transpose())
    }

    /// Lagrange polynomials of the set, anchored at `x_k`.
    pub fn lagrange_basis(&self) -> Result<LagrangeBasis> {
        let factor = self.factor()?;
        let n = self.n();
        let inv = factor.solve(&DMatrix::identity(n, n));
        let mut grads = Vec::with_capacity(n + 1);
        // W g_0 = −e, i.e. g_0 is minus the row sums of W⁻¹'s columns.
        let mut g0 = DVector::zeros(n);
        for col in inv.column_iter() {
            g0 -= col;
        }
        grads.push(g0);
        grads.extend(inv.column_iter().map(|c| c.into_owned()));
        let mut values = vec![0.0; n + 1];
        values[0] = 1.0;
        Ok(LagrangeBasis { center: self.xk(), values, grads })
    }

    /// Λ-poisedness constant `max_t max_{y ∈ B(center, radius) ∩ [lower, upper]} |Λ_t(y)|`.
    /// Returns `+∞` for a degenerate set.
    pub fn poisedness(
        &self,
        center: &DVector<f64>,
        radius: f64,
        lower: &DVector<f64>,
        upper: &DVector<f64>,
    ) -> f64 {
        let Ok(basis) = self.lagrange_basis() else {
            return f64::INFINITY;
        };
        (0..self.len())
            .map(|t| basis.max_abs_over(t, center, radius, lower, upper).1)
            .fold(0.0, f64::max)
    }

    /// Index of the point to evict when inserting `candidate`:
    /// `argmax_j |Λ_j(y⁺)| · max(‖y_j − x_k‖⁴ / Δ⁴, 1)`, lowest index on ties.
    ///
    /// The iterate and the lowest-objective point are never chosen.
    pub fn replacement_score(&self, candidate: &DVector<f64>, delta: f64) -> Result<usize> {
        let scores = self.replacement_scores(candidate, delta)?;
        let protected = self.best_index();
        let mut best: Option<(usize, f64)> = None;
        for (j, &score) in scores.iter().enumerate().skip(1) {
            if j == protected && self.len() > 2 {
                continue;
            }
            if best.is_none_or(|(_, s)| score > s) {
                best = Some((j, score));
            }
        }
        Ok(best.map(|(j, _)| j).unwrap_or(1))
    }

    /// Raw replacement scores for every index (index 0 included for inspection).
    pub fn replacement_scores(&self, candidate: &DVector<f64>, delta: f64) -> Result<Vec<f64>> {
        let basis = self.lagrange_basis()?;
        let sigma = basis.eval_all(candidate);
        Ok((0..self.len())
            .map(|j| {
                let ratio = self.distance_to_xk(j) / delta;
                sigma[j].abs() * ratio.powi(4).max(1.0)
            })
            .collect())
    }

    /// Sherman–Morrison denominators `σ_t = 1 + vᵀ W⁻¹ u` for moving each
    /// `y_t` to `candidate`, computed directly from the factorization.
    pub fn sherman_morrison_sigmas(&self, candidate: &DVector<f64>) -> Result<Vec<f64>> {
        let factor = self.factor()?;
        let n = self.n();
        let xk = &self.offsets[0];
        let cand = candidate - &self.base;
        let mut sigmas = Vec::with_capacity(n + 1);
        // Moving x_k: W_new = W + e (x_k − y⁺)ᵀ.
        let z = factor.solve_vec(&DVector::from_element(n, 1.0));
        sigmas.push(1.0 + (xk - &cand).dot(&z));
        for t in 1..=n {
            // Moving y_t: W_new = W + e_t (y⁺ − y_t)ᵀ.
            let mut e = DVector::zeros(n);
            e[t - 1] = 1.0;
            let z = factor.solve_vec(&e);
            sigmas.push(1.0 + (&cand - &self.offsets[t]).dot(&z));
        }
        Ok(sigmas)
    }

    /// `max_t |σ_t − Λ_t(candidate)|`, a self-test of the identity between
    /// the stable-update denominator and the Lagrange value.
    pub fn sigma_identity_check(&self, candidate: &DVector<f64>) -> Result<f64> {
        let sigmas = self.sherman_morrison_sigmas(candidate)?;
        let lagrange = self.lagrange_basis()?.eval_all(candidate);
        Ok(sigmas
            .iter()
            .zip(&lagrange)
            .map(|(s, l)| (s - l).abs())
            .fold(0.0, f64::max))
    }

    /// Moves the base point to `new_base`, re-expressing every stored offset
    /// and the model constant so that predictions are unchanged.
    pub fn shift_base(&mut self, new_base: &DVector<f64>, model: &mut ResidualModel) {
        let shift = new_base - &self.base;
        for off in &mut self.offsets {
            *off -= &shift;
        }
        self.base = new_base.clone();
        model.shift_base(new_base);
        self.refactor();
    }

    /// Number of `f64` values held by the set (offsets, residuals, objective
    /// values, base point and the factorized `W`).
    pub fn storage_footprint(&self) -> usize {
        let n = self.n();
        let m = self.m();
        (n + 1) * n + (n + 1) * m + (n + 1) + n + if self.factor.is_some() { n * n + n } else { 0 }
    }

    /// 1-norm condition estimate `‖W‖₁ ‖W⁻¹‖₁`; `+∞` when singular.
    pub fn condition_estimate(&self) -> f64 {
        let Some(factor) = &self.factor else {
            return f64::INFINITY;
        };
        let w = self.w_matrix();
        let n = self.n();
        let inv = factor.solve(&DMatrix::identity(n, n));
        let norm1 = |a: &DMatrix<f64>| {
            a.column_iter()
                .map(|c| c.iter().map(|v| v.abs()).sum::<f64>())
                .fold(0.0, f64::max)
        };
        norm1(&w) * norm1(&inv)
    }

    /// Serializable dump of the current geometry.
    pub fn snapshot(
        &self,
        delta: f64,
        lower: &DVector<f64>,
        upper: &DVector<f64>,
    ) -> GeometrySnapshot {
        let xk = self.xk();
        let lagrange_max_abs = match self.lagrange_basis() {
            Ok(basis) => (0..self.len())
                .map(|t| basis.max_abs_over(t, &xk, delta, lower, upper).1)
                .collect(),
            Err(_) => vec![f64::INFINITY; self.len()],
        };
        GeometrySnapshot {
            base: self.base.iter().copied().collect(),
            points: self.points().iter().map(|p| p.iter().copied().collect()).collect(),
            fvals: self.fvals.clone(),
            delta,
            w_condition: self.condition_estimate(),
            lagrange_max_abs,
        }
    }
}

/// Post-mortem view of an interpolation set.
#[derive(Debug, Clone, Serialize)]
pub struct GeometrySnapshot {
    pub base: Vec<f64>,
    pub points: Vec<Vec<f64>>,
    pub fvals: Vec<f64>,
    pub delta: f64,
    pub w_condition: f64,
    pub lagrange_max_abs: Vec<f64>,
}

/// Affine Lagrange polynomials `Λ_t(y) = c_t + g_tᵀ (y − x_k)`.
#[derive(Debug, Clone)]
pub struct LagrangeBasis {
    pub center: DVector<f64>,
    pub values: Vec<f64>,
    pub grads: Vec<DVector<f64>>,
}

impl LagrangeBasis {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn eval(&self, t: usize, y: &DVector<f64>) -> f64 {
        self.values[t] + self.grads[t].dot(&(y - &self.center))
    }

    pub fn eval_all(&self, y: &DVector<f64>) -> Vec<f64> {
        let d = y - &self.center;
        self.values
            .iter()
            .zip(&self.grads)
            .map(|(c, g)| c + g.dot(&d))
            .collect()
    }

    /// Maximizer and value of `|Λ_t|` over the ball ∩ box, by maximizing the
    /// linear part along `+g_t` and `−g_t`. The `+g_t` branch wins ties.
    pub fn max_abs_over(
        &self,
        t: usize,
        center: &DVector<f64>,
        radius: f64,
        lower: &DVector<f64>,
        upper: &DVector<f64>,
    ) -> (DVector<f64>, f64) {
        let g = &self.grads[t];
        let y_plus = lin_max_ball_box(g, radius, center, lower, upper);
        let y_minus = lin_max_ball_box(&(-g), radius, center, lower, upper);
        let v_plus = self.eval(t, &y_plus).abs();
        let v_minus = self.eval(t, &y_minus).abs();
        if v_minus > v_plus {
            (y_minus, v_minus)
        } else {
            (y_plus, v_plus)
        }
    }
}
