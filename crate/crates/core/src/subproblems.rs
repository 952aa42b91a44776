//! Trust-region and geometry-improvement subproblems under ball and box
//! constraints.

use nalgebra::DVector;

use crate::error::Result;
use crate::interp::InterpolationSet;
use crate::models::ObjectiveModel;

/// Cauchy decrease constant `c₁`.
pub const CAUCHY_C1: f64 = 0.5;

/// Relative slack used when certifying the Cauchy decrease and step bound.
const CERT_RTOL: f64 = 1e-12;

/// Above this dimension the `‖H‖` used by the certificate comes from power
/// iteration instead of an SVD of `J`.
const SVD_NORM_MAX_N: usize = 64;

/// `2c₁ / (1 + √(1 + 2c₁))`, the step-length constant implied by Cauchy decrease.
pub fn step_length_constant(c1: f64) -> f64 {
    2.0 * c1 / (1.0 + (1.0 + 2.0 * c1).sqrt())
}

#[derive(Debug, Clone)]
pub struct TrustRegionStep {
    pub s: DVector<f64>,
    /// `m(0) − m(s)`.
    pub predicted_reduction: f64,
    /// The Cauchy decrease inequality with `c₁ = ½` held.
    pub cauchy_ok: bool,
    /// The box cut the steepest-descent segment short, so the unconstrained
    /// Cauchy decrease is not attainable and `cauchy_ok` is informational.
    pub cauchy_blocked: bool,
    /// Some component of `x_k + s` sits on a bound.
    pub bounds_active: bool,
    /// `‖s‖ ≥ 2c₁/(1+√(1+2c₁)) · min(Δ, ‖g‖ / max(‖H‖, 1))` held.
    pub step_bound_ok: bool,
    /// `max(‖H‖, 1)` as used by the certificate.
    pub h_scale: f64,
}

impl TrustRegionStep {
    /// The certificate every step must carry: Cauchy decrease unless the box
    /// blocks the Cauchy segment, and the step-length bound when no bound is
    /// active.
    pub fn certified(&self) -> bool {
        let cauchy = self.cauchy_ok || self.cauchy_blocked;
        let length = self.step_bound_ok || self.bounds_active || self.cauchy_blocked;
        cauchy && length
    }
}

/// Largest `α ≥ 0` with `‖d + α s‖ = Δ`, written to avoid cancellation.
fn ball_step(d: &DVector<f64>, s: &DVector<f64>, delta: f64) -> f64 {
    let a = s.norm_squared();
    if a == 0.0 {
        return f64::INFINITY;
    }
    let b = 2.0 * d.dot(s);
    let c = (d.norm_squared() - delta * delta).min(0.0);
    let disc = (b * b - 4.0 * a * c).max(0.0).sqrt();
    let alpha = if b >= 0.0 {
        if b + disc == 0.0 {
            0.0
        } else {
            -2.0 * c / (b + disc)
        }
    } else {
        (-b + disc) / (2.0 * a)
    };
    alpha.max(0.0)
}

/// Largest `α ≥ 0` keeping `s + α d` inside `[lo, hi]`, with the first
/// coordinate to hit a bound.
fn box_step(
    s: &DVector<f64>,
    d: &DVector<f64>,
    lo: &DVector<f64>,
    hi: &DVector<f64>,
) -> (f64, Option<usize>) {
    let mut best = f64::INFINITY;
    let mut idx = None;
    for i in 0..s.len() {
        let alpha = if d[i] > 0.0 {
            (hi[i] - s[i]) / d[i]
        } else if d[i] < 0.0 {
            (lo[i] - s[i]) / d[i]
        } else {
            continue;
        };
        let alpha = alpha.max(0.0);
        if alpha < best {
            best = alpha;
            idx = Some(i);
        }
    }
    (best, idx)
}

/// Approximately minimizes the Gauss-Newton model over
/// `‖s‖ ≤ Δ, lower ≤ x_k + s ≤ upper`.
///
/// Projected truncated CG: a bound hit freezes that coordinate and restarts
/// CG on the remaining ones; a ball hit or negligible model gradient stops.
/// The result is never worse than the (box-truncated) Cauchy point.
pub fn solve_trs(
    model: &ObjectiveModel,
    delta: f64,
    xk: &DVector<f64>,
    lower: &DVector<f64>,
    upper: &DVector<f64>,
) -> TrustRegionStep {
    let n = model.n();
    let g = &model.g;
    let gnorm = g.norm();
    let lo = (lower - xk).map(|v| v.min(0.0));
    let hi = (upper - xk).map(|v| v.max(0.0));

    if gnorm == 0.0 {
        return TrustRegionStep {
            s: DVector::zeros(n),
            predicted_reduction: 0.0,
            cauchy_ok: true,
            cauchy_blocked: false,
            bounds_active: false,
            step_bound_ok: true,
            h_scale: 1.0,
        };
    }

    // Coordinates already on a bound with −g pointing outward.
    let blocked = |i: usize, s_i: f64| (s_i <= lo[i] && g[i] > 0.0) || (s_i >= hi[i] && g[i] < 0.0);
    let mut free: Vec<bool> = (0..n).map(|i| !blocked(i, 0.0)).collect();
    let mask = |v: &mut DVector<f64>, free: &[bool]| {
        for (vi, &f) in v.iter_mut().zip(free) {
            if !f {
                *vi = 0.0;
            }
        }
    };

    let tol = 1e-8 * gnorm.max(1.0);
    let max_iters = 10 * n.max(1);
    let mut iters = 0;
    let mut s = DVector::zeros(n);

    'outer: while iters < max_iters {
        let mut r = g + model.hess_vec(&s);
        mask(&mut r, &free);
        let mut rr = r.norm_squared();
        if rr.sqrt() <= tol {
            break;
        }
        let mut d = -&r;
        while iters < max_iters {
            iters += 1;
            let mut hd = model.hess_vec(&d);
            mask(&mut hd, &free);
            let kappa = d.dot(&hd);
            let alpha_ball = ball_step(&s, &d, delta);
            let (alpha_box, hit) = box_step(&s, &d, &lo, &hi);
            let alpha_max = alpha_ball.min(alpha_box);
            let alpha = if kappa > 0.0 { rr / kappa } else { f64::INFINITY };
            if alpha >= alpha_max {
                s.axpy(alpha_max, &d, 1.0);
                match hit {
                    Some(i) if alpha_box < alpha_ball => {
                        s[i] = if d[i] > 0.0 { hi[i] } else { lo[i] };
                        free[i] = false;
                        continue 'outer;
                    }
                    _ => break 'outer,
                }
            }
            s.axpy(alpha, &d, 1.0);
            r.axpy(alpha, &hd, 1.0);
            let rr_new = r.norm_squared();
            if rr_new.sqrt() <= tol {
                break 'outer;
            }
            let beta = rr_new / rr;
            d = -&r + beta * d;
            rr = rr_new;
        }
    }

    // Box-truncated steepest-descent (Cauchy) point.
    let mut dc = -g;
    let initial_free: Vec<bool> = (0..n).map(|i| !blocked(i, 0.0)).collect();
    mask(&mut dc, &initial_free);
    let mut cauchy_blocked = initial_free.iter().any(|f| !f);
    let zero = DVector::zeros(n);
    let s_cauchy = if dc.norm_squared() > 0.0 {
        let kappa = model.curvature(&dc);
        let alpha_star = if kappa > 0.0 { dc.norm_squared() / kappa } else { f64::INFINITY };
        let alpha_ball = ball_step(&zero, &dc, delta);
        let (alpha_box, _) = box_step(&zero, &dc, &lo, &hi);
        if alpha_box < alpha_star.min(alpha_ball) {
            cauchy_blocked = true;
        }
        alpha_star.min(alpha_ball).min(alpha_box) * &dc
    } else {
        zero.clone()
    };
    if model.predicted_reduction(&s_cauchy) > model.predicted_reduction(&s) {
        s = s_cauchy;
    }

    // Rounding guards: stay inside the box and the ball.
    for i in 0..n {
        s[i] = s[i].clamp(lo[i], hi[i]);
    }
    let snorm = s.norm();
    if snorm > delta {
        s *= delta / snorm;
    }

    let pred = model.predicted_reduction(&s);
    let h_norm = if n <= SVD_NORM_MAX_N {
        model.hessian_norm()
    } else {
        // Power iteration underestimates ‖H‖; the Rayleigh quotients along g
        // and s keep the certificate no weaker than the exact one.
        let mut h = model.hessian_norm_power(100).max(model.curvature(g) / (gnorm * gnorm));
        let sn2 = s.norm_squared();
        if sn2 > 0.0 {
            h = h.max(model.curvature(&s) / sn2);
        }
        h
    };
    let h_scale = h_norm.max(1.0);
    let radius_term = delta.min(gnorm / h_scale);
    let cauchy_rhs = CAUCHY_C1 * gnorm * radius_term;
    let cauchy_ok = pred >= cauchy_rhs * (1.0 - CERT_RTOL);
    let step_bound_ok = s.norm() >= step_length_constant(CAUCHY_C1) * radius_term * (1.0 - CERT_RTOL);
    let bounds_active = (0..n).any(|i| s[i] <= lo[i] && lo[i].is_finite() || s[i] >= hi[i] && hi[i].is_finite());

    TrustRegionStep {
        s,
        predicted_reduction: pred,
        cauchy_ok,
        cauchy_blocked,
        bounds_active,
        step_bound_ok,
        h_scale,
    }
}

/// Maximizes `gᵀy` over `‖y − center‖ ≤ Δ, lower ≤ y ≤ upper` by an
/// active-set sweep: move along the (masked) direction `g` to the ball; if a
/// bound is crossed first, stop on it, freeze that coordinate and repeat.
/// At most `n` passes.
pub fn lin_max_ball_box(
    g: &DVector<f64>,
    delta: f64,
    center: &DVector<f64>,
    lower: &DVector<f64>,
    upper: &DVector<f64>,
) -> DVector<f64> {
    let n = g.len();
    let mut y = center.clone();
    let mut dir = g.clone();
    for _ in 0..n {
        if dir.norm_squared() == 0.0 {
            return y;
        }
        let d = &y - center;
        let alpha = ball_step(&d, &dir, delta);
        let candidate = &y + alpha * &dir;
        let mut first: Option<(usize, f64, f64)> = None;
        for i in 0..n {
            let bound = if candidate[i] > upper[i] {
                upper[i]
            } else if candidate[i] < lower[i] {
                lower[i]
            } else {
                continue;
            };
            let beta = ((bound - y[i]) / dir[i]).clamp(0.0, alpha);
            if first.is_none_or(|(_, b, _)| beta < b) {
                first = Some((i, beta, bound));
            }
        }
        let Some((i, beta, bound)) = first else {
            return candidate;
        };
        y.axpy(beta, &dir, 1.0);
        y[i] = bound;
        dir[i] = 0.0;
    }
    y
}

/// Point maximizing `|Λ_t|` over the ball ∩ box, from the two linear
/// maximizations along `±g_t`. Returns `center` when `Λ_t` is constant.
pub fn geometry_point(
    set: &InterpolationSet,
    t: usize,
    center: &DVector<f64>,
    delta: f64,
    lower: &DVector<f64>,
    upper: &DVector<f64>,
) -> Result<DVector<f64>> {
    let basis = set.lagrange_basis()?;
    if basis.grads[t].norm_squared() == 0.0 {
        return Ok(center.clone());
    }
    Ok(basis.max_abs_over(t, center, delta, lower, upper).0)
}
