//! Derivative-free Gauss-Newton trust-region driver.
//!
//! Two modes share the same building blocks:
//!
//! * [`Mode::Faithful`] runs the analysed algorithm: criticality phase when
//!   the model gradient is small, safety phase for tiny steps, the
//!   three-case radius update with `η₁` acceptance, and explicit
//!   Λ-poisedness tests and repairs.
//! * [`Mode::Practical`] is the implementation variant: no criticality
//!   phase, distance-based geometry checks, the trial point is inserted into
//!   the set on every evaluated iteration, the iterate is always the best
//!   point seen, any decrease is accepted, and `ρ` follows a staged schedule
//!   after three consecutive unsuccessful iterations.

use std::time::Instant;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interp::{GeometrySnapshot, InterpolationSet};
use crate::models::{build_objective_model, ObjectiveModel, ResidualModel};
use crate::problems::{evaluate, objective, EvalBudget, NoiseSpec, Problem};
use crate::profiles::EvalRecord;
use crate::subproblems::{geometry_point, solve_trs, TrustRegionStep};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Faithful,
    Practical,
}

impl Mode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::Faithful => "faithful",
            Mode::Practical => "practical",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "faithful" => Ok(Mode::Faithful),
            "practical" => Ok(Mode::Practical),
            other => Err(Error::InvalidConfig(format!("unknown mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub mode: Mode,
    /// Initial radius; `None` means `0.1 · max(‖x0‖_∞, 1)`.
    pub delta0: Option<f64>,
    pub rho_end: f64,
    pub delta_max: f64,
    pub gamma_dec: f64,
    pub gamma_inc: f64,
    pub gamma_inc_overline: f64,
    pub eta1: f64,
    pub eta2: f64,
    pub alpha1: f64,
    pub alpha2: f64,
    pub omega_s: f64,
    pub gamma_s: f64,
    /// Criticality threshold on `‖g‖` (faithful mode).
    pub eps_c: f64,
    /// Criticality scaling (faithful mode).
    pub mu: f64,
    /// Criticality shrink factor (faithful mode).
    pub omega_c: f64,
    /// Poisedness constant (faithful mode).
    pub lambda: f64,
    /// Distance factor of the practical geometry test.
    pub r_g: f64,
    pub max_evals: usize,
    pub criticality_cap: usize,
    /// Replacement cap per Λ-poisedness repair, as a multiple of `n + 1`.
    pub repair_cap_factor: usize,
    /// Attach a geometry snapshot to the result.
    pub dump_geometry: bool,
}

impl SolverConfig {
    pub fn new(mode: Mode, max_evals: usize) -> Self {
        Self {
            mode,
            delta0: None,
            rho_end: 1e-10,
            delta_max: 1e10,
            gamma_dec: 0.5,
            gamma_inc: 2.0,
            gamma_inc_overline: 4.0,
            eta1: 0.1,
            eta2: 0.7,
            alpha1: 0.1,
            alpha2: 0.5,
            omega_s: 0.1,
            gamma_s: 0.5,
            eps_c: 1e-2,
            mu: 1.0,
            omega_c: 0.5,
            lambda: 10.0,
            r_g: 2.0,
            max_evals,
            criticality_cap: 50,
            repair_cap_factor: 5,
            dump_geometry: false,
        }
    }

    pub fn practical(max_evals: usize) -> Self {
        Self::new(Mode::Practical, max_evals)
    }

    pub fn faithful(max_evals: usize) -> Self {
        Self::new(Mode::Faithful, max_evals)
    }

    /// Budget of `gradients · (n + 1)` evaluations.
    pub fn with_gradient_budget(mut self, gradients: usize, n: usize) -> Self {
        self.max_evals = gradients * (n + 1);
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidConfig(msg.to_string()));
        if !(0.0 < self.gamma_dec && self.gamma_dec < 1.0) {
            return bad("need 0 < gamma_dec < 1");
        }
        if !(1.0 < self.gamma_inc && self.gamma_inc <= self.gamma_inc_overline) {
            return bad("need 1 < gamma_inc <= gamma_inc_overline");
        }
        if !(0.0 < self.alpha1 && self.alpha1 < self.alpha2 && self.alpha2 < 1.0) {
            return bad("need 0 < alpha1 < alpha2 < 1");
        }
        if !(0.0 < self.eta1 && self.eta1 <= self.eta2 && self.eta2 < 1.0) {
            return bad("need 0 < eta1 <= eta2 < 1");
        }
        if !(0.0 < self.omega_s && self.omega_s < 1.0) {
            return bad("need 0 < omega_s < 1");
        }
        if !(0.0 < self.gamma_s && self.gamma_s < 1.0) {
            return bad("need 0 < gamma_s < 1");
        }
        if !(self.eps_c > 0.0 && self.mu > 0.0 && 0.0 < self.omega_c && self.omega_c < 1.0) {
            return bad("need eps_c > 0, mu > 0, 0 < omega_c < 1");
        }
        if !(self.lambda >= 1.0) {
            return bad("need lambda >= 1");
        }
        if !(self.r_g >= 1.0) {
            return bad("need r_g >= 1");
        }
        if !(self.rho_end > 0.0) {
            return bad("need rho_end > 0");
        }
        if let Some(d0) = self.delta0 {
            if !(d0 > 0.0 && d0 <= self.delta_max) {
                return bad("need 0 < delta0 <= delta_max");
            }
        }
        if self.max_evals == 0 {
            return bad("need max_evals >= 1");
        }
        if self.criticality_cap == 0 || self.repair_cap_factor == 0 {
            return bad("caps must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    SmallObjective,
    SmallRho,
    Budget,
    EvalFailure,
}

impl Termination {
    pub fn as_str(&self) -> &'static str {
        match self {
            Termination::SmallObjective => "small_objective",
            Termination::SmallRho => "small_rho",
            Termination::Budget => "budget",
            Termination::EvalFailure => "eval_failure",
        }
    }
}

/// Radius bookkeeping carried between iterations.
#[derive(Debug, Clone, PartialEq)]
pub struct TrustState {
    pub delta: f64,
    pub rho: f64,
    pub f_best: f64,
    pub unsuccessful_streak: usize,
    pub k: usize,
}

/// Counters for the trust-region step certificate.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrsStats {
    pub calls: usize,
    /// Calls where the Cauchy segment was not cut by the box.
    pub cauchy_checked: usize,
    pub cauchy_violations: usize,
    /// Calls with no active bound, where the step-length bound applies.
    pub step_bound_checked: usize,
    pub step_bound_violations: usize,
}

impl TrsStats {
    fn record(&mut self, step: &TrustRegionStep) {
        self.calls += 1;
        if !step.cauchy_blocked {
            self.cauchy_checked += 1;
            if !step.cauchy_ok {
                self.cauchy_violations += 1;
            }
            if !step.bounds_active {
                self.step_bound_checked += 1;
                if !step.step_bound_ok {
                    self.step_bound_violations += 1;
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IterationKind {
    Step,
    Safety,
}

/// Per-iteration bookkeeping, recorded at the end of each outer iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub k: usize,
    pub kind: IterationKind,
    /// `r_k`, absent for safety iterations.
    pub ratio: Option<f64>,
    pub accepted: bool,
    pub rho_reduced: bool,
    /// Unsuccessful streak before this iteration's update.
    pub streak_before: usize,
    /// Evaluation count just before the safety phase or the trial evaluation.
    pub evals_before: usize,
    /// Evaluation count right after the safety phase or the trial evaluation.
    pub evals_core: usize,
    pub evals_after: usize,
    pub delta: f64,
    pub rho: f64,
    /// Objective value stored for the iterate.
    pub f_k: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SolveResult {
    pub problem: String,
    pub mode: Mode,
    pub x_final: Vec<f64>,
    /// Best observed (possibly noisy) objective.
    pub f_final: f64,
    /// Noiseless objective at `x_final`.
    pub f_true_final: f64,
    pub evals_used: usize,
    pub iterations: usize,
    pub termination: Termination,
    pub rho_final: f64,
    pub delta_final: f64,
    pub trs: TrsStats,
    pub safety_calls: usize,
    pub criticality_calls: usize,
    pub criticality_capped: bool,
    /// Largest number of `f64` values held by the set plus models.
    pub peak_model_storage: usize,
    pub wall_time_secs: f64,
    #[serde(skip)]
    pub trace: Vec<EvalRecord>,
    #[serde(skip)]
    pub history: Vec<IterationRecord>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub geometry: Option<GeometrySnapshot>,
}

/// `Δ_{k+1}` from the ratio `r_k`.
pub fn update_radius(ratio: f64, delta: f64, step_norm: f64, rho: f64, config: &SolverConfig) -> f64 {
    if ratio >= config.eta2 {
        (config.gamma_inc * delta)
            .max(config.gamma_inc_overline * step_norm)
            .min(config.delta_max)
    } else if ratio >= config.eta1 {
        (config.gamma_dec * delta).max(step_norm).max(rho)
    } else {
        (config.gamma_dec * delta).min(step_norm).max(rho)
    }
}

/// Staged `ρ` reduction: `α₁ρ` far from `ρ_end`, the geometric mean close
/// to it, and `ρ_end` itself at the end.
pub fn reduce_rho(rho: f64, rho_end: f64) -> f64 {
    if rho > 250.0 * rho_end {
        0.1 * rho
    } else if rho > 16.0 * rho_end {
        (rho * rho_end).sqrt()
    } else {
        rho_end
    }
}

/// What the safety phase decided. The phase itself never evaluates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SafetyOutcome {
    /// Ball radius in which geometry should be checked and repaired.
    pub repair_radius: f64,
    pub rho_reduced: bool,
    pub terminate: bool,
}

/// Shrinks `Δ` to `max(ρ, ω_S Δ)`; when that hits `ρ`, lowers `ρ` as well
/// (or requests termination once `ρ ≤ ρ_end`).
pub fn safety_phase(state: &mut TrustState, config: &SolverConfig) -> SafetyOutcome {
    let delta_init = state.rho.max(config.omega_s * state.delta);
    let mut outcome = SafetyOutcome { repair_radius: delta_init, rho_reduced: false, terminate: false };
    state.delta = delta_init;
    if delta_init == state.rho {
        if state.rho <= config.rho_end {
            outcome.terminate = true;
            return outcome;
        }
        let (rho, delta) = lowered_radii(state.rho, config);
        state.rho = rho;
        state.delta = delta;
        state.unsuccessful_streak = 0;
        outcome.rho_reduced = true;
    }
    outcome
}

/// `(ρ, Δ)` after a reduction of the lower bound.
fn lowered_radii(rho: f64, config: &SolverConfig) -> (f64, f64) {
    match config.mode {
        Mode::Faithful => (config.alpha1 * rho, config.alpha2 * rho),
        Mode::Practical => {
            let next = reduce_rho(rho, config.rho_end);
            (next, (config.alpha2 * rho).max(next))
        }
    }
}

/// Early exit from the main loop.
type Flow<T> = std::result::Result<T, Termination>;

struct Evaluator<'a> {
    problem: &'a Problem,
    noise: NoiseSpec,
    budget: EvalBudget,
    trace: Vec<EvalRecord>,
    small_f: f64,
    best: Option<(DVector<f64>, f64)>,
}

impl<'a> Evaluator<'a> {
    fn eval(&mut self, x: &DVector<f64>) -> Flow<(DVector<f64>, f64)> {
        let r = match evaluate(self.problem, x, &self.noise, &mut self.budget) {
            Ok(r) => r,
            Err(Error::BudgetExhausted) => return Err(Termination::Budget),
            Err(_) => return Err(Termination::EvalFailure),
        };
        let f = objective(&r);
        let f_true = if self.noise.is_deterministic() { f } else { objective(&self.problem.residual(x)) };
        self.trace.push(EvalRecord {
            eval_index: self.budget.used,
            point: x.iter().copied().collect(),
            f_noisy: f,
            f_true,
        });
        if self.best.as_ref().is_none_or(|(_, fb)| f < *fb) {
            self.best = Some((x.clone(), f));
        }
        if f <= self.small_f {
            return Err(Termination::SmallObjective);
        }
        Ok((r, f))
    }
}

struct Solver<'a> {
    problem: &'a Problem,
    config: &'a SolverConfig,
    ev: Evaluator<'a>,
    state: TrustState,
    trs: TrsStats,
    safety_calls: usize,
    criticality_calls: usize,
    criticality_capped: bool,
    peak_storage: usize,
    set: Option<InterpolationSet>,
    history: Vec<IterationRecord>,
}

/// Runs the solver on `problem` from `problem.x0`.
pub fn solve(problem: &Problem, config: &SolverConfig, noise: NoiseSpec) -> Result<SolveResult> {
    config.validate()?;
    if problem.x0.len() != problem.n || problem.n == 0 {
        return Err(Error::InvalidConfig("start point dimension mismatch".into()));
    }
    for i in 0..problem.n {
        if !(problem.lower[i] <= problem.x0[i] && problem.x0[i] <= problem.upper[i]) {
            return Err(Error::InvalidConfig(format!("x0[{i}] outside bounds")));
        }
        if !(problem.lower[i] < problem.upper[i]) {
            return Err(Error::InvalidConfig(format!("empty box in coordinate {i}")));
        }
    }
    let start = Instant::now();
    let delta0 = config
        .delta0
        .unwrap_or_else(|| 0.1 * problem.x0.amax().max(1.0));
    let mut solver = Solver {
        problem,
        config,
        ev: Evaluator {
            problem,
            noise,
            budget: EvalBudget::new(config.max_evals),
            trace: Vec::new(),
            small_f: f64::NEG_INFINITY,
            best: None,
        },
        state: TrustState {
            delta: delta0,
            rho: delta0,
            f_best: f64::INFINITY,
            unsuccessful_streak: 0,
            k: 0,
        },
        trs: TrsStats::default(),
        safety_calls: 0,
        criticality_calls: 0,
        criticality_capped: false,
        peak_storage: 0,
        set: None,
        history: Vec::new(),
    };
    let termination = match solver.run() {
        Ok(never) => match never {},
        Err(t) => t,
    };
    Ok(solver.finish(termination, start))
}

enum Never {}

impl<'a> Solver<'a> {
    fn lower(&self) -> &DVector<f64> {
        &self.problem.lower
    }

    fn upper(&self) -> &DVector<f64> {
        &self.problem.upper
    }

    fn set(&self) -> &InterpolationSet {
        self.set.as_ref().expect("set initialized")
    }

    fn set_mut(&mut self) -> &mut InterpolationSet {
        self.set.as_mut().expect("set initialized")
    }

    fn clamp(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(x.len(), |i, _| x[i].clamp(self.lower()[i], self.upper()[i]))
    }

    /// Offset of length `h` along coordinate `i` that stays inside the box:
    /// `+h` unless that crosses the upper bound, then `−h`, else the roomier side.
    fn coordinate_offset(&self, x: &DVector<f64>, i: usize, h: f64) -> f64 {
        let up = self.upper()[i] - x[i];
        let down = x[i] - self.lower()[i];
        if up >= h {
            h
        } else if down >= h {
            -h
        } else if up >= down {
            up
        } else {
            -down
        }
    }

    fn run(&mut self) -> Flow<Never> {
        let n = self.problem.n;
        let x0 = self.problem.x0.clone();
        // The first evaluation fixes the small-objective threshold.
        let (r0, f0) = {
            self.ev.small_f = f64::NEG_INFINITY;
            let out = self.ev.eval(&x0)?;
            self.ev.small_f = 1e-12f64.max(1e-20 * out.1);
            if out.1 <= self.ev.small_f {
                return Err(Termination::SmallObjective);
            }
            out
        };
        self.state.f_best = f0;
        let mut points = vec![x0.clone()];
        let mut rvals = vec![r0];
        for i in 0..n {
            let mut y = x0.clone();
            y[i] += self.coordinate_offset(&x0, i, self.state.delta);
            let (r, _) = self.ev.eval(&y)?;
            points.push(y);
            rvals.push(r);
        }
        let mut set = InterpolationSet::new_unchecked(points, rvals);
        if self.config.mode == Mode::Practical {
            let best = set.best_index();
            set.set_iterate(best);
        }
        self.set = Some(set);
        self.state.f_best = self.set().fval(0);

        match self.config.mode {
            Mode::Practical => self.run_practical(),
            Mode::Faithful => self.run_faithful(),
        }
    }

    fn track_storage(&mut self, model: &ResidualModel, obj: &ObjectiveModel) {
        let jac = model.jac.nrows() * model.jac.ncols();
        let total = self.set().storage_footprint() + jac + model.c.len() + model.base.len() + obj.g.len() + obj.rk.len();
        self.peak_storage = self.peak_storage.max(total);
    }

    /// Builds the models, rebuilding a coordinate simplex around `x_k` when
    /// the set has become degenerate.
    fn models(&mut self) -> Flow<(ResidualModel, ObjectiveModel)> {
        loop {
            match build_objective_model(self.set()) {
                Ok((mut res, obj)) => {
                    let xk = self.set().xk();
                    let drift = (&xk - self.set().base()).norm_squared();
                    if self.state.delta * self.state.delta <= 1e-3 * drift {
                        self.set_mut().shift_base(&xk, &mut res);
                    }
                    self.track_storage(&res, &obj);
                    return Ok((res, obj));
                }
                Err(_) => self.reset_simplex()?,
            }
        }
    }

    fn reset_simplex(&mut self) -> Flow<()> {
        let xk = self.set().xk();
        let h = self.state.delta.max(self.state.rho);
        for t in 1..=self.problem.n {
            let mut y = xk.clone();
            y[t - 1] += self.coordinate_offset(&xk, t - 1, h);
            let (r, _) = self.ev.eval(&y)?;
            self.set_mut().replace(t, &y, r);
        }
        Ok(())
    }

    fn solve_step(&mut self, obj: &ObjectiveModel) -> TrustRegionStep {
        let xk = self.set().xk();
        let step = solve_trs(obj, self.state.delta, &xk, self.lower(), self.upper());
        self.trs.record(&step);
        debug_assert!(step.certified(), "trust-region step failed its certificate: {step:?}");
        step
    }

    /// Evaluates `y` and inserts it in place of point `t`; in practical mode
    /// the iterate follows any improvement.
    fn insert_point(&mut self, t: usize, y: &DVector<f64>) -> Flow<f64> {
        let (r, f) = self.ev.eval(y)?;
        self.set_mut().replace(t, y, r);
        if self.config.mode == Mode::Practical && f < self.set().fval(0) {
            self.set_mut().set_iterate(t);
        }
        Ok(f)
    }

    /// Index of the furthest point beyond `r_g Δ` from `x_k`, if any.
    fn far_point(&self, delta: f64) -> Option<usize> {
        let set = self.set();
        let limit = self.config.r_g * delta;
        (1..set.len())
            .map(|t| (t, set.distance_to_xk(t)))
            .filter(|&(_, d)| d > limit)
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(t, _)| t)
    }

    /// One geometry-improving move: send `y_t` to the maximizer of `|Λ_t|`
    /// in `B(x_k, radius)`.
    fn geometry_step(&mut self, t: usize, radius: f64) -> Flow<()> {
        let xk = self.set().xk();
        match geometry_point(self.set(), t, &xk, radius, self.lower(), self.upper()) {
            Ok(y) => {
                let y = self.clamp(&y);
                self.insert_point(t, &y).map(|_| ())
            }
            Err(_) => self.reset_simplex(),
        }
    }

    /// Replaces points until the set is Λ-poised in `B(x_k, radius)`, at most
    /// `repair_cap_factor · (n + 1)` replacements.
    fn make_poised(&mut self, radius: f64) -> Flow<()> {
        let cap = self.config.repair_cap_factor * (self.problem.n + 1);
        for _ in 0..cap {
            if !self.set().is_poised() {
                self.reset_simplex()?;
                continue;
            }
            let set = self.set();
            let xk = set.xk();
            // Points outside the ball go first, furthest first.
            let outside = (1..set.len())
                .map(|t| (t, set.distance_to_xk(t)))
                .filter(|&(_, d)| d > radius * (1.0 + 1e-10))
                .max_by(|a, b| a.1.total_cmp(&b.1))
                .map(|(t, _)| t);
            let target = match outside {
                Some(t) => t,
                None => {
                    let basis = set.lagrange_basis().expect("poised set");
                    let values: Vec<f64> = (0..set.len())
                        .map(|t| basis.max_abs_over(t, &xk, radius, self.lower(), self.upper()).1)
                        .collect();
                    if values.iter().all(|v| *v <= self.config.lambda) {
                        return Ok(());
                    }
                    let mut worst = 1;
                    for t in 2..set.len() {
                        if values[t] > values[worst] {
                            worst = t;
                        }
                    }
                    worst
                }
            };
            self.geometry_step(target, radius)?;
        }
        Ok(())
    }

    fn is_lambda_poised(&self, radius: f64) -> bool {
        let set = self.set();
        let xk = set.xk();
        let inside = (1..set.len()).all(|t| set.distance_to_xk(t) <= radius * (1.0 + 1e-10));
        inside && set.poisedness(&xk, radius, self.lower(), self.upper()) <= self.config.lambda
    }

    fn evals(&self) -> usize {
        self.ev.budget.used
    }

    #[allow(clippy::too_many_arguments)]
    fn record(
        &mut self,
        kind: IterationKind,
        ratio: Option<f64>,
        accepted: bool,
        rho_reduced: bool,
        streak_before: usize,
        evals_before: usize,
        evals_core: usize,
    ) {
        self.history.push(IterationRecord {
            k: self.state.k,
            kind,
            ratio,
            accepted,
            rho_reduced,
            streak_before,
            evals_before,
            evals_core,
            evals_after: self.evals(),
            delta: self.state.delta,
            rho: self.state.rho,
            f_k: self.set().fval(0),
        });
    }

    fn ratio(step: &TrustRegionStep, fk: f64, f_new: f64) -> f64 {
        if step.predicted_reduction > 0.0 {
            (fk - f_new) / step.predicted_reduction
        } else {
            -1.0
        }
    }

    fn run_practical(&mut self) -> Flow<Never> {
        loop {
            self.state.k += 1;
            let streak_before = self.state.unsuccessful_streak;
            let (_, obj) = self.models()?;
            let step = self.solve_step(&obj);
            let evals_before = self.evals();
            let snorm = step.s.norm();

            if snorm < self.config.gamma_s * self.state.rho {
                self.safety_calls += 1;
                let evals_core = self.evals();
                let out = safety_phase(&mut self.state, self.config);
                if out.terminate {
                    return Err(Termination::SmallRho);
                }
                if let Some(t) = self.far_point(out.repair_radius) {
                    self.geometry_step(t, out.repair_radius)?;
                }
                self.state.f_best = self.set().fval(0);
                self.record(IterationKind::Safety, None, false, out.rho_reduced, streak_before, evals_before, evals_core);
                continue;
            }

            let xk = self.set().xk();
            let fk = self.set().fval(0);
            let x_new = self.clamp(&(&xk + &step.s));
            let t = self.set().replacement_score(&x_new, self.state.delta).unwrap_or(1);
            let f_new = self.insert_point(t, &x_new)?;
            let evals_core = self.evals();
            let ratio = Self::ratio(&step, fk, f_new);
            let accepted = f_new < fk;
            self.state.delta = update_radius(ratio, self.state.delta, snorm, self.state.rho, self.config);
            self.state.f_best = self.set().fval(0);

            let mut rho_reduced = false;
            if ratio >= self.config.eta1 {
                self.state.unsuccessful_streak = 0;
            } else {
                self.state.unsuccessful_streak += 1;
                if let Some(t) = self.far_point(self.state.delta) {
                    self.geometry_step(t, self.state.delta)?;
                    self.state.f_best = self.set().fval(0);
                } else if ratio < 0.0
                    && self.state.unsuccessful_streak >= 3
                    && self.state.delta <= self.state.rho
                {
                    if self.state.rho <= self.config.rho_end {
                        return Err(Termination::SmallRho);
                    }
                    let (rho, delta) = lowered_radii(self.state.rho, self.config);
                    self.state.rho = rho;
                    self.state.delta = delta;
                    self.state.unsuccessful_streak = 0;
                    rho_reduced = true;
                }
            }
            self.record(IterationKind::Step, Some(ratio), accepted, rho_reduced, streak_before, evals_before, evals_core);
        }
    }

    fn run_faithful(&mut self) -> Flow<Never> {
        loop {
            self.state.k += 1;
            let streak_before = self.state.unsuccessful_streak;
            let (_, mut obj) = self.models()?;
            if obj.g.norm() <= self.config.eps_c {
                obj = self.criticality_phase()?;
            }
            let step = self.solve_step(&obj);
            let evals_before = self.evals();
            let snorm = step.s.norm();

            if snorm < self.config.gamma_s * self.state.rho {
                self.safety_calls += 1;
                let evals_core = self.evals();
                let out = safety_phase(&mut self.state, self.config);
                self.make_poised(out.repair_radius)?;
                if out.terminate {
                    return Err(Termination::SmallRho);
                }
                self.record(IterationKind::Safety, None, false, out.rho_reduced, streak_before, evals_before, evals_core);
                continue;
            }

            let xk = self.set().xk();
            let fk = self.set().fval(0);
            let x_new = self.clamp(&(&xk + &step.s));
            let (r_new, f_new) = self.ev.eval(&x_new)?;
            let evals_core = self.evals();
            let ratio = Self::ratio(&step, fk, f_new);
            let delta_next = update_radius(ratio, self.state.delta, snorm, self.state.rho, self.config);

            let accepted = ratio >= self.config.eta1;
            let mut rho_reduced = false;
            if accepted {
                let t = self.set().replacement_score(&x_new, self.state.delta).unwrap_or(1);
                let set = self.set_mut();
                set.replace(t, &x_new, r_new);
                set.set_iterate(t);
                self.state.delta = delta_next;
                self.state.f_best = self.state.f_best.min(f_new);
                self.state.unsuccessful_streak = 0;
            } else {
                self.state.unsuccessful_streak += 1;
                if !self.is_lambda_poised(delta_next) {
                    self.state.delta = delta_next;
                    self.make_poised(delta_next)?;
                } else if delta_next <= self.state.rho {
                    if self.state.rho <= self.config.rho_end {
                        self.state.delta = delta_next;
                        return Err(Termination::SmallRho);
                    }
                    let (rho, delta) = lowered_radii(self.state.rho, self.config);
                    self.state.rho = rho;
                    self.state.delta = delta;
                    rho_reduced = true;
                } else {
                    self.state.delta = delta_next;
                }
            }
            self.record(IterationKind::Step, Some(ratio), accepted, rho_reduced, streak_before, evals_before, evals_core);
        }
    }

    /// Shrinks the radius by `ω_C` and re-poises until `Δ ≤ μ‖g‖`.
    fn criticality_phase(&mut self) -> Flow<ObjectiveModel> {
        self.criticality_calls += 1;
        let delta_init = self.state.delta;
        let mut radius = delta_init;
        let mut last = None;
        for _ in 0..self.config.criticality_cap {
            self.make_poised(radius)?;
            let (_, obj) = self.models()?;
            if radius <= self.config.mu * obj.g.norm() {
                self.state.delta = radius;
                self.state.rho = self.state.rho.min(radius);
                return Ok(obj);
            }
            last = Some(obj);
            radius *= self.config.omega_c;
        }
        self.criticality_capped = true;
        let radius = radius / self.config.omega_c;
        self.state.delta = radius;
        self.state.rho = self.state.rho.min(radius);
        Ok(last.expect("at least one pass"))
    }

    fn finish(self, termination: Termination, start: Instant) -> SolveResult {
        let (x_final, f_final) = match &self.ev.best {
            Some((x, f)) => (x.clone(), *f),
            None => (self.problem.x0.clone(), f64::NAN),
        };
        let f_true_final = if self.ev.noise.is_deterministic() {
            f_final
        } else {
            objective(&self.problem.residual(&x_final))
        };
        let geometry = match (&self.set, self.config.dump_geometry) {
            (Some(set), true) => Some(set.snapshot(self.state.delta, self.lower(), self.upper())),
            _ => None,
        };
        SolveResult {
            problem: self.problem.name.clone(),
            mode: self.config.mode,
            x_final: x_final.iter().copied().collect(),
            f_final,
            f_true_final,
            evals_used: self.ev.budget.used,
            iterations: self.state.k,
            termination,
            rho_final: self.state.rho,
            delta_final: self.state.delta,
            trs: self.trs,
            safety_calls: self.safety_calls,
            criticality_calls: self.criticality_calls,
            criticality_capped: self.criticality_capped,
            peak_model_storage: self.peak_storage,
            wall_time_secs: start.elapsed().as_secs_f64(),
            trace: self.ev.trace,
            history: self.history,
            geometry,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> SolverConfig {
        SolverConfig::practical(100)
    }

    #[test]
    fn radius_very_successful() {
        assert_eq!(update_radius(0.9, 1.0, 1.0, 0.01, &cfg()), 4.0);
    }

    #[test]
    fn radius_successful() {
        assert_eq!(update_radius(0.3, 1.0, 0.2, 0.01, &cfg()), 0.5);
    }

    #[test]
    fn radius_unsuccessful_floors_at_rho() {
        assert_eq!(update_radius(-1.0, 1.0, 0.2, 0.3, &cfg()), 0.3);
    }

    #[test]
    fn radius_capped_by_delta_max() {
        let mut c = cfg();
        c.delta_max = 3.0;
        assert_eq!(update_radius(0.9, 1.0, 1.0, 0.01, &c), 3.0);
    }

    #[test]
    fn rho_schedule_branches() {
        let end = 1e-10;
        assert_eq!(reduce_rho(1.0, end), 0.1);
        assert!((reduce_rho(1e-8, end) - 1e-9).abs() < 1e-24);
        assert_eq!(reduce_rho(1e-9, end), end);
        // Boundaries: 250ρ_end is in the middle branch, 16ρ_end in the last.
        assert_eq!(reduce_rho(250.0 * end, end), (250.0 * end * end).sqrt());
        assert_eq!(reduce_rho(16.0 * end, end), end);
    }

    #[test]
    fn rho_schedule_terminates() {
        let end = 1e-10;
        let mut rho = 1.0;
        let mut calls = 0;
        while rho > end {
            let next = reduce_rho(rho, end);
            assert!(next < rho);
            rho = next;
            calls += 1;
            assert!(calls < 100);
        }
        assert_eq!(rho, end);
    }

    #[test]
    fn safety_keeps_rho_when_above_floor() {
        let c = SolverConfig::faithful(10);
        let mut s = TrustState { delta: 1.0, rho: 0.01, f_best: 0.0, unsuccessful_streak: 0, k: 0 };
        let out = safety_phase(&mut s, &c);
        assert!(!out.rho_reduced);
        assert_eq!(s.rho, 0.01);
        assert_eq!(s.delta, 0.1);
        assert_eq!(out.repair_radius, 0.1);
    }

    #[test]
    fn safety_lowers_rho_at_floor() {
        let c = SolverConfig::faithful(10);
        let mut s = TrustState { delta: 1.0, rho: 0.5, f_best: 0.0, unsuccessful_streak: 2, k: 0 };
        let out = safety_phase(&mut s, &c);
        assert!(out.rho_reduced);
        assert!((s.rho - 0.05).abs() < 1e-16);
        assert!((s.delta - 0.25).abs() < 1e-16);
        assert_eq!(out.repair_radius, 0.5);
    }

    #[test]
    fn safety_requests_termination_at_rho_end() {
        let c = SolverConfig::practical(10);
        let mut s = TrustState { delta: 1e-10, rho: 1e-10, f_best: 0.0, unsuccessful_streak: 0, k: 0 };
        assert!(safety_phase(&mut s, &c).terminate);
    }

    #[test]
    fn config_validation() {
        assert!(cfg().validate().is_ok());
        let mut c = cfg();
        c.gamma_s = 1.0;
        assert!(c.validate().is_err());
        let mut c = cfg();
        c.alpha1 = 0.6;
        assert!(c.validate().is_err());
        let mut c = cfg();
        c.lambda = 0.5;
        assert!(c.validate().is_err());
    }
}
