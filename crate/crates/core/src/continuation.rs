//! Pseudo-arclength continuation of the solution curve of `F(x) = 0`,
//! `F: ℝ^{n+1} → ℝ^n`, with simple-bifurcation detection and branch switching.

use log::{debug, warn};
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use thiserror::Error;

/// Failure reported by an evaluator; treated as data by the engine.
#[derive(Debug, Error, Clone, PartialEq)]
#[error("{0}")]
pub struct EvalError(pub String);

/// A map `ℝ^{n+1} → ℝ^n`. Evaluation must be pure: Jacobian columns are
/// computed concurrently.
pub trait Evaluator: Sync {
    /// Number of equations `n`.
    fn dim(&self) -> usize;

    fn eval(&self, x: &DVector<f64>) -> Result<DVector<f64>, EvalError>;

    /// Scale against which residual norms are compared.
    fn scale(&self, _x: &DVector<f64>) -> f64 {
        1.0
    }
}

/// Wraps a closure as an [`Evaluator`].
pub struct FnEvaluator<F> {
    dim: usize,
    f: F,
}

impl<F> FnEvaluator<F>
where
    F: Fn(&DVector<f64>) -> Result<DVector<f64>, EvalError> + Sync,
{
    pub fn new(dim: usize, f: F) -> Self {
        FnEvaluator { dim, f }
    }
}

impl<F> Evaluator for FnEvaluator<F>
where
    F: Fn(&DVector<f64>) -> Result<DVector<f64>, EvalError> + Sync,
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn eval(&self, x: &DVector<f64>) -> Result<DVector<f64>, EvalError> {
        (self.f)(x)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ContinuationError {
    #[error("evaluation failed{}: {source}", column.map(|c| format!(" (Jacobian column {c})")).unwrap_or_default())]
    Eval {
        column: Option<usize>,
        source: EvalError,
    },
    #[error(
        "Newton corrector did not converge in {iterations} iterations (residual {residual:e})"
    )]
    NoConvergence { iterations: usize, residual: f64 },
    #[error("augmented system is singular")]
    Singular,
    #[error("start point is not a solution: residual {residual:e} exceeds {tolerance:e}")]
    NotASolution { residual: f64, tolerance: f64 },
    #[error("step rejected: {0}")]
    StepRejected(String),
    #[error("bifurcation localization did not converge within {0} bisections")]
    LocalizationFailed(usize),
    #[error("Jacobian nullspace has dimension {0}, expected 2 at a simple bifurcation")]
    NotSimpleBifurcation(usize),
    #[error("algebraic bifurcation equation has no real solutions")]
    NoRealBranch,
    #[error("invalid input: {0}")]
    InvalidInput(String),
}

type Result<T, E = ContinuationError> = std::result::Result<T, E>;

/// Step-size and Newton-corrector controls.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepControl {
    pub ds: f64,
    pub ds_min: f64,
    pub ds_max: f64,
    pub newton_tol: f64,
    pub newton_max_iter: usize,
}

impl Default for StepControl {
    fn default() -> Self {
        StepControl {
            ds: 1e-2,
            ds_min: 1e-4,
            ds_max: 5e-2,
            newton_tol: 1e-10,
            newton_max_iter: 8,
        }
    }
}

impl StepControl {
    pub fn validate(&self) -> Result<()> {
        let ok = self.ds_min > 0.0
            && self.ds_min <= self.ds
            && self.ds <= self.ds_max
            && self.ds_max.is_finite()
            && self.newton_tol > 0.0
            && self.newton_max_iter > 0;
        if ok {
            Ok(())
        } else {
            Err(ContinuationError::InvalidInput(format!(
                "step control needs 0 < ds_min <= ds <= ds_max, newton_tol > 0, newton_max_iter > 0: {self:?}"
            )))
        }
    }
}

/// Numerical settings shared by the engine's components.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContinuationSettings {
    /// Relative finite-difference step for Jacobians.
    pub eps0: f64,
    /// Singular values below `sigma_tol · σ_max` count as zero.
    pub sigma_tol: f64,
    /// Arclength tolerance for bifurcation localization.
    pub tol_s: f64,
    /// ABE tangents with `|t · t_in|` at or above this are the incoming branch.
    pub switch_threshold: f64,
    pub max_bisections: usize,
    /// Smallest accepted cosine between consecutive tangents.
    pub min_tangent_cos: f64,
    /// Monitored components are landed to within this of zero.
    pub landing_tol: f64,
}

impl Default for ContinuationSettings {
    fn default() -> Self {
        ContinuationSettings {
            eps0: f64::EPSILON.cbrt(),
            sigma_tol: 1e-6,
            tol_s: 1e-6,
            switch_threshold: 0.9,
            max_bisections: 60,
            min_tangent_cos: 0.8,
            landing_tol: 1e-6,
        }
    }
}

/// One converged node of a branch.
#[derive(Debug, Clone, PartialEq)]
pub struct ContinuationPoint {
    pub x: DVector<f64>,
    /// Unit tangent, oriented along the direction of travel.
    pub tangent: DVector<f64>,
    pub residual_norm: f64,
    pub arclength: f64,
    /// `det [F_x; tᵀ]`.
    pub det: f64,
    /// Step that produced this point (0 for the first point).
    pub ds: f64,
    pub iterations: usize,
    /// `(x − x_pred) · t_prev` of the corrector.
    pub hyperplane_defect: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BifurcationEvent {
    pub x_t: DVector<f64>,
    /// Branch directions from the algebraic bifurcation equation; empty if
    /// it could not be solved (see `abe_error`).
    pub tangents_out: Vec<DVector<f64>>,
    pub det_before: f64,
    pub det_after: f64,
    /// Tangent of the branch on which the event was found.
    pub incoming_tangent: DVector<f64>,
    /// Index of the last branch point before the event.
    pub point_index: usize,
    pub arclength: f64,
    pub abe_error: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    LambdaBound,
    MaxSteps,
    SolverFailure,
    /// A user-supplied bound on a state component was reached.
    UserStop,
    /// The branch returned to its starting point.
    ClosedLoop,
}

impl Termination {
    pub fn as_str(&self) -> &'static str {
        match self {
            Termination::LambdaBound => "lambda_bound",
            Termination::MaxSteps => "max_steps",
            Termination::SolverFailure => "solver_failure",
            Termination::UserStop => "user_stop",
            Termination::ClosedLoop => "closed_loop",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Branch {
    pub points: Vec<ContinuationPoint>,
    pub events: Vec<BifurcationEvent>,
    pub termination: Termination,
    /// Last error seen before a solver-failure termination.
    pub failure: Option<String>,
}

/// Stopping rules for [`run_branch`]. The parameter is the last component of
/// `x`; points outside any bound are discarded and end the branch.
#[derive(Debug, Clone, PartialEq)]
pub struct StopRules {
    pub lambda_min: f64,
    pub lambda_max: f64,
    /// `(component, min, max)`.
    pub bounds: Vec<(usize, f64, f64)>,
    pub max_steps: usize,
    /// Component whose sign changes are landed on exactly, producing a
    /// point with that component within `landing_tol` of zero.
    pub crossing_monitor: Option<usize>,
    /// Stop when the branch returns to its start.
    pub detect_closed_loop: bool,
}

impl Default for StopRules {
    fn default() -> Self {
        StopRules {
            lambda_min: f64::NEG_INFINITY,
            lambda_max: f64::INFINITY,
            bounds: Vec::new(),
            max_steps: 10_000,
            crossing_monitor: None,
            detect_closed_loop: false,
        }
    }
}

impl StopRules {
    fn check(&self, x: &DVector<f64>) -> Option<Termination> {
        let lambda = x[x.len() - 1];
        if lambda < self.lambda_min || lambda > self.lambda_max {
            return Some(Termination::LambdaBound);
        }
        for &(i, lo, hi) in &self.bounds {
            if x[i] < lo || x[i] > hi {
                return Some(Termination::UserStop);
            }
        }
        None
    }
}

fn eval_at<E: Evaluator + ?Sized>(
    f: &E,
    x: &DVector<f64>,
    column: Option<usize>,
) -> Result<DVector<f64>> {
    let fx = f
        .eval(x)
        .map_err(|source| ContinuationError::Eval { column, source })?;
    if fx.len() != f.dim() {
        return Err(ContinuationError::InvalidInput(format!(
            "evaluator returned {} components, expected {}",
            fx.len(),
            f.dim()
        )));
    }
    if fx.iter().any(|v| !v.is_finite()) {
        return Err(ContinuationError::Eval {
            column,
            source: EvalError("non-finite residual".into()),
        });
    }
    Ok(fx)
}

/// Central-difference Jacobian, `n × (n+1)`, with per-column step
/// `ε₀ · max(1, |x_j|)`. Columns are evaluated in parallel.
pub fn fd_jacobian<E: Evaluator + ?Sized>(
    f: &E,
    x: &DVector<f64>,
    eps0: f64,
) -> Result<DMatrix<f64>> {
    let n = f.dim();
    let cols: Vec<DVector<f64>> = (0..x.len())
        .into_par_iter()
        .map(|j| {
            let eps = eps0 * x[j].abs().max(1.0);
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[j] += eps;
            xm[j] -= eps;
            let fp = eval_at(f, &xp, Some(j))?;
            let fm = eval_at(f, &xm, Some(j))?;
            Ok((fp - fm) / (xp[j] - xm[j]))
        })
        .collect::<Result<_>>()?;
    let mut jac = DMatrix::zeros(n, x.len());
    for (j, col) in cols.into_iter().enumerate() {
        jac.set_column(j, &col);
    }
    Ok(jac)
}

/// Euler predictor `x + ds · t`.
pub fn predict(point: &ContinuationPoint, ds: f64) -> DVector<f64> {
    &point.x + &point.tangent * ds
}

fn bordered(jac: &DMatrix<f64>, t: &DVector<f64>) -> DMatrix<f64> {
    let n = jac.nrows();
    let mut a = jac.clone().insert_row(n, 0.0);
    a.set_row(n, &t.transpose());
    a
}

/// `det [J; tᵀ]`.
pub fn augmented_det(jac: &DMatrix<f64>, tangent: &DVector<f64>) -> f64 {
    bordered(jac, tangent).determinant()
}

/// Tangent from `[J; t_prevᵀ] v = e_{n+1}`, normalized; `v · t_prev > 0`.
pub fn next_tangent(jac: &DMatrix<f64>, tangent_prev: &DVector<f64>) -> Result<DVector<f64>> {
    let a = bordered(jac, tangent_prev);
    let mut rhs = DVector::zeros(a.nrows());
    rhs[a.nrows() - 1] = 1.0;
    let v = a.lu().solve(&rhs).ok_or(ContinuationError::Singular)?;
    let norm = v.norm();
    if !norm.is_finite() || norm == 0.0 {
        return Err(ContinuationError::Singular);
    }
    Ok(v / norm)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Correction {
    pub x: DVector<f64>,
    pub residual_norm: f64,
    pub iterations: usize,
}

/// Newton iteration on `F(x) = 0`, `(x − x_pred) · t_prev = 0`.
pub fn correct<E: Evaluator + ?Sized>(
    f: &E,
    x_pred: &DVector<f64>,
    tangent_prev: &DVector<f64>,
    ctl: &StepControl,
    eps0: f64,
) -> Result<Correction> {
    let mut x = x_pred.clone();
    let n = f.dim();
    for iterations in 0..=ctl.newton_max_iter {
        let fx = eval_at(f, &x, None)?;
        let residual = fx.norm();
        if residual <= ctl.newton_tol * f.scale(&x) {
            return Ok(Correction {
                x,
                residual_norm: residual,
                iterations,
            });
        }
        if iterations == ctl.newton_max_iter {
            return Err(ContinuationError::NoConvergence {
                iterations,
                residual,
            });
        }
        let jac = fd_jacobian(f, &x, eps0)?;
        let mut rhs = DVector::zeros(n + 1);
        rhs.rows_mut(0, n).copy_from(&(-&fx));
        rhs[n] = -(&x - x_pred).dot(tangent_prev);
        let delta = bordered(&jac, tangent_prev)
            .lu()
            .solve(&rhs)
            .ok_or(ContinuationError::Singular)?;
        if delta.iter().any(|v| !v.is_finite()) {
            return Err(ContinuationError::Singular);
        }
        x += delta;
    }
    unreachable!()
}

/// Predict, correct and evaluate the tangent at arclength `ds` from `from`.
fn step_from<E: Evaluator + ?Sized>(
    f: &E,
    from: &ContinuationPoint,
    ds: f64,
    ctl: &StepControl,
    settings: &ContinuationSettings,
) -> Result<ContinuationPoint> {
    let x_pred = predict(from, ds);
    let c = correct(f, &x_pred, &from.tangent, ctl, settings.eps0)?;
    let distance = (&c.x - &from.x).norm();
    if distance > 2.0 * ctl.ds_max {
        return Err(ContinuationError::StepRejected(format!(
            "corrected point moved {distance:e} from its predecessor"
        )));
    }
    let jac = fd_jacobian(f, &c.x, settings.eps0)?;
    let tangent = next_tangent(&jac, &from.tangent)?;
    let cos = tangent.dot(&from.tangent);
    if cos < settings.min_tangent_cos {
        return Err(ContinuationError::StepRejected(format!(
            "tangent turned by {:.1} degrees",
            cos.clamp(-1.0, 1.0).acos().to_degrees()
        )));
    }
    let det = augmented_det(&jac, &tangent);
    Ok(ContinuationPoint {
        hyperplane_defect: (&c.x - &x_pred).dot(&from.tangent),
        x: c.x,
        tangent,
        residual_norm: c.residual_norm,
        arclength: from.arclength + ds,
        det,
        ds,
        iterations: c.iterations,
    })
}

/// Bisects on the arc from `a` until `g` changes sign within `tol_s`, or
/// until `accept` holds at a trial point. Returns the bracketing points.
fn bisect_on_arc<E, G, A>(
    f: &E,
    a: &ContinuationPoint,
    b: &ContinuationPoint,
    g: G,
    accept: A,
    ctl: &StepControl,
    settings: &ContinuationSettings,
) -> Result<(
    ContinuationPoint,
    ContinuationPoint,
    Option<ContinuationPoint>,
)>
where
    E: Evaluator + ?Sized,
    G: Fn(&ContinuationPoint) -> f64,
    A: Fn(&ContinuationPoint) -> bool,
{
    let sign_a = g(a).signum();
    let mut lo = a.clone();
    let mut hi = b.clone();
    for _ in 0..settings.max_bisections {
        let span = hi.ds - lo.ds;
        if span < settings.tol_s {
            return Ok((lo, hi, None));
        }
        let mid = step_from(f, a, 0.5 * (lo.ds + hi.ds), ctl, settings)?;
        if accept(&mid) {
            return Ok((lo, hi, Some(mid)));
        }
        if g(&mid).signum() == sign_a {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    if hi.ds - lo.ds < settings.tol_s {
        Ok((lo, hi, None))
    } else {
        Err(ContinuationError::LocalizationFailed(
            settings.max_bisections,
        ))
    }
}

/// If the augmented determinant changes sign between consecutive points `a`
/// and `b`, locates the bifurcation point by bisection in arclength
/// (followed by one secant step on the determinant) and solves the
/// bifurcation equation there.
pub fn detect_and_locate_bifurcation<E: Evaluator + ?Sized>(
    f: &E,
    a: &ContinuationPoint,
    b: &ContinuationPoint,
    ctl: &StepControl,
    settings: &ContinuationSettings,
) -> Result<Option<BifurcationEvent>> {
    if a.det.signum() == b.det.signum() || a.det == 0.0 || b.det == 0.0 {
        return Ok(None);
    }
    // Trial points are parameterized by their distance from `a`.
    let mut a0 = a.clone();
    a0.ds = 0.0;
    let mut b0 = b.clone();
    b0.ds = b.arclength - a.arclength;
    let (lo, hi, _) = bisect_on_arc(f, &a0, &b0, |p| p.det, |_| false, ctl, settings)?;
    let s = if lo.det != hi.det {
        lo.ds + (hi.ds - lo.ds) * lo.det / (lo.det - hi.det)
    } else {
        0.5 * (lo.ds + hi.ds)
    };
    // The secant estimate can land where the residual is not evaluable;
    // back off toward the lower bracket end before giving up on it.
    let span = hi.ds - lo.ds;
    let x_t = [0.0, 1e-3, 1e-2, 1e-1, 0.5]
        .iter()
        .find_map(|&frac| {
            let trial = (s - frac * span).max(lo.ds);
            correct(f, &predict(a, trial), &a.tangent, ctl, settings.eps0)
                .map_err(|e| debug!("refinement at offset {trial:e} rejected: {e}"))
                .ok()
        })
        .map(|c| c.x)
        .unwrap_or_else(|| {
            if lo.det.abs() <= hi.det.abs() {
                lo.x.clone()
            } else {
                hi.x.clone()
            }
        });
    let (tangents_out, abe_error) = match solve_abe(f, &x_t, settings) {
        Ok(t) => (t, None),
        Err(e) => {
            warn!("bifurcation at {:?}: {e}", x_t.as_slice());
            (Vec::new(), Some(e.to_string()))
        }
    };
    Ok(Some(BifurcationEvent {
        x_t,
        tangents_out,
        det_before: a.det,
        det_after: b.det,
        incoming_tangent: a.tangent.clone(),
        point_index: 0,
        arclength: a.arclength + s,
        abe_error,
    }))
}

/// Real unit solutions `(α, β)` of `C₁₁α² + 2C₁₂αβ + C₂₂β² = 0`.
pub fn solve_abe_coefficients(c11: f64, c12: f64, c22: f64) -> Result<[(f64, f64); 2]> {
    // With α = cos θ, β = sin θ the quadratic form is M + ρ cos(2θ − φ).
    let m = 0.5 * (c11 + c22);
    let a = 0.5 * (c11 - c22);
    let rho = a.hypot(c12);
    if rho == 0.0 || m.abs() > rho {
        return Err(ContinuationError::NoRealBranch);
    }
    let phi = c12.atan2(a);
    let delta = (-m / rho).acos();
    let angles = [0.5 * (phi + delta), 0.5 * (phi - delta)];
    Ok(angles.map(|theta| (theta.cos(), theta.sin())))
}

/// Branch directions at a simple bifurcation point from the algebraic
/// bifurcation equation.
pub fn solve_abe<E: Evaluator + ?Sized>(
    f: &E,
    x_t: &DVector<f64>,
    settings: &ContinuationSettings,
) -> Result<Vec<DVector<f64>>> {
    let n = f.dim();
    let jac = fd_jacobian(f, x_t, settings.eps0)?;

    let padded = jac.clone().insert_row(n, 0.0);
    let svd = padded.svd(false, true);
    let v_t = svd.v_t.as_ref().ok_or(ContinuationError::Singular)?;
    let sigma = &svd.singular_values;
    let sigma_max = sigma.max();
    let nullity = sigma
        .iter()
        .filter(|&&s| s <= settings.sigma_tol * sigma_max)
        .count();
    if nullity != 2 {
        return Err(ContinuationError::NotSimpleBifurcation(nullity));
    }
    let mut order: Vec<usize> = (0..sigma.len()).collect();
    order.sort_by(|&i, &j| sigma[i].total_cmp(&sigma[j]));
    let t1: DVector<f64> = v_t.row(order[0]).transpose();
    let t2: DVector<f64> = v_t.row(order[1]).transpose();

    let svd_j = jac.svd(true, false);
    let u = svd_j.u.as_ref().ok_or(ContinuationError::Singular)?;
    let smallest = svd_j.singular_values.argmin().0;
    let n1: DVector<f64> = u.column(smallest).into_owned();

    // Directional second differences n₁ᵀ F_xx[v, v].
    let directions = [t1.clone(), t2.clone(), &t1 + &t2];
    let f0 = eval_at(f, x_t, None)?;
    let q: Vec<f64> = directions
        .par_iter()
        .map(|v| {
            let scale = v
                .iter()
                .zip(x_t.iter())
                .map(|(vi, xi)| (vi * xi).abs())
                .sum::<f64>();
            let delta = settings.eps0.sqrt() * scale.max(1.0);
            let fp = eval_at(f, &(x_t + v * delta), None)?;
            let fm = eval_at(f, &(x_t - v * delta), None)?;
            Ok(n1.dot(&(fp - &f0 * 2.0 + fm)) / (delta * delta))
        })
        .collect::<Result<_>>()?;
    let (c11, c22) = (q[0], q[1]);
    let c12 = 0.5 * (q[2] - c11 - c22);
    debug!("ABE coefficients C11 = {c11:e}, C12 = {c12:e}, C22 = {c22:e}");

    let roots = solve_abe_coefficients(c11, c12, c22)?;
    Ok(roots
        .iter()
        .map(|&(alpha, beta)| {
            let t = &t1 * alpha + &t2 * beta;
            let norm = t.norm();
            t / norm
        })
        .collect())
}

fn first_point<E: Evaluator + ?Sized>(
    f: &E,
    x: &DVector<f64>,
    direction: &DVector<f64>,
    ctl: &StepControl,
    settings: &ContinuationSettings,
    singular_start: bool,
) -> Result<ContinuationPoint> {
    if x.len() != f.dim() + 1 || direction.len() != x.len() {
        return Err(ContinuationError::InvalidInput(format!(
            "expected vectors of length {}",
            f.dim() + 1
        )));
    }
    let norm = direction.norm();
    if !(norm > 0.0 && norm.is_finite()) {
        return Err(ContinuationError::InvalidInput("zero direction".into()));
    }
    let direction = direction / norm;
    let residual = eval_at(f, x, None)?.norm();
    let tolerance = ctl.newton_tol * f.scale(x);
    if residual > tolerance && !singular_start {
        return Err(ContinuationError::NotASolution {
            residual,
            tolerance,
        });
    }
    let jac = fd_jacobian(f, x, settings.eps0)?;
    let tangent = if singular_start {
        direction
    } else {
        next_tangent(&jac, &direction)?
    };
    let det = augmented_det(&jac, &tangent);
    Ok(ContinuationPoint {
        x: x.clone(),
        tangent,
        residual_norm: residual,
        arclength: 0.0,
        det,
        ds: 0.0,
        iterations: 0,
        hyperplane_defect: 0.0,
    })
}

/// Follows the solution curve through `start` in the direction selected by
/// `hint` (the tangent has a positive component along it).
pub fn run_branch<E: Evaluator + ?Sized>(
    f: &E,
    start: &DVector<f64>,
    hint: &DVector<f64>,
    ctl: &StepControl,
    settings: &ContinuationSettings,
    stop: &StopRules,
) -> Result<Branch> {
    ctl.validate()?;
    let first = first_point(f, start, hint, ctl, settings, false)?;
    Ok(trace(f, first, false, ctl, settings, stop))
}

/// Follows a branch leaving the bifurcation point `x_t` along `direction`
/// (typically an ABE tangent).
pub fn run_branch_from_bifurcation<E: Evaluator + ?Sized>(
    f: &E,
    x_t: &DVector<f64>,
    direction: &DVector<f64>,
    ctl: &StepControl,
    settings: &ContinuationSettings,
    stop: &StopRules,
) -> Result<Branch> {
    ctl.validate()?;
    let first = first_point(f, x_t, direction, ctl, settings, true)?;
    Ok(trace(f, first, true, ctl, settings, stop))
}

fn trace<E: Evaluator + ?Sized>(
    f: &E,
    first: ContinuationPoint,
    from_bifurcation: bool,
    ctl: &StepControl,
    settings: &ContinuationSettings,
    stop: &StopRules,
) -> Branch {
    let start = first.x.clone();
    let mut points = vec![first];
    let mut events = Vec::new();
    let mut ds = ctl.ds;
    let mut steps = 0usize;
    let mut skip_checks = from_bifurcation;
    let mut failure = None;

    if let Some(reason) = stop.check(&start) {
        return Branch {
            points,
            events,
            termination: reason,
            failure,
        };
    }

    let termination = loop {
        if steps >= stop.max_steps {
            break Termination::MaxSteps;
        }
        let current = points.last().expect("branch has a point").clone();
        let next = match step_from(f, &current, ds, ctl, settings) {
            Ok(p) => p,
            Err(e) => {
                debug!("step of size {ds:e} failed: {e}");
                if ds <= ctl.ds_min {
                    failure = Some(e.to_string());
                    break Termination::SolverFailure;
                }
                ds = (0.5 * ds).max(ctl.ds_min);
                continue;
            }
        };
        if let Some(reason) = stop.check(&next.x) {
            break reason;
        }
        steps += 1;

        if stop.detect_closed_loop && !skip_checks {
            if let Some(closing) = close_loop(f, &current, &next, &start, ctl, settings) {
                points.push(closing);
                break Termination::ClosedLoop;
            }
        }

        let mut landed = None;
        if !skip_checks && next.det.signum() != current.det.signum() {
            match detect_and_locate_bifurcation(f, &current, &next, ctl, settings) {
                Ok(Some(mut event)) => {
                    event.point_index = points.len() - 1;
                    events.push(event);
                }
                Ok(None) => {}
                Err(e) => warn!("determinant sign change not localized: {e}"),
            }
        } else if let (Some(i), false) = (stop.crossing_monitor, skip_checks) {
            if current.x[i].signum() != next.x[i].signum()
                && current.x[i].abs() > settings.landing_tol
            {
                match land(f, &current, &next, i, ctl, settings) {
                    Ok(p) => landed = Some(p),
                    Err(e) => warn!("crossing of component {i} not landed: {e}"),
                }
            }
        }
        if let Some(mut p) = landed {
            p.arclength = current.arclength + p.ds;
            points.push(p);
        }
        skip_checks = false;
        let iterations = next.iterations;
        points.push(next);
        if iterations <= 3 {
            ds = (1.3 * ds).min(ctl.ds_max);
        }
    };

    Branch {
        points,
        events,
        termination,
        failure,
    }
}

/// A point on the arc from `a` with component `i` within the landing
/// tolerance of zero.
fn land<E: Evaluator + ?Sized>(
    f: &E,
    a: &ContinuationPoint,
    b: &ContinuationPoint,
    i: usize,
    ctl: &StepControl,
    settings: &ContinuationSettings,
) -> Result<ContinuationPoint> {
    let mut a0 = a.clone();
    a0.ds = 0.0;
    let tol = settings.landing_tol;
    let (lo, hi, hit) = bisect_on_arc(
        f,
        &a0,
        b,
        |p| p.x[i],
        |p| p.x[i].abs() <= tol,
        ctl,
        settings,
    )?;
    if let Some(p) = hit {
        return Ok(p);
    }
    let best = if lo.x[i].abs() <= hi.x[i].abs() {
        lo
    } else {
        hi
    };
    if best.x[i].abs() <= tol {
        Ok(best)
    } else {
        Err(ContinuationError::LocalizationFailed(
            settings.max_bisections,
        ))
    }
}

/// Detects that the step `a → b` passed the branch start and returns the
/// corrected point at the start.
fn close_loop<E: Evaluator + ?Sized>(
    f: &E,
    a: &ContinuationPoint,
    b: &ContinuationPoint,
    start: &DVector<f64>,
    ctl: &StepControl,
    settings: &ContinuationSettings,
) -> Option<ContinuationPoint> {
    if a.arclength < 4.0 * ctl.ds_max {
        return None;
    }
    let s = (start - &a.x).dot(&a.tangent);
    let passed = s > 0.0 && s <= b.ds && (start - &b.x).dot(&b.tangent) <= 0.0;
    if !passed || (start - &a.x).norm() > 2.0 * b.ds.max(s) {
        return None;
    }
    step_from(f, a, s, ctl, settings).ok()
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dvector;

    fn circle() -> impl Evaluator {
        FnEvaluator::new(2, |x: &DVector<f64>| {
            Ok(dvector![x[0] * x[0] + x[1] * x[1] - 1.0, x[2]])
        })
    }

    /// `(λu − u³, w)` on `x = (u, w, λ)`: trivial branch `u = 0`, pitchfork
    /// `λ = u²`, bifurcation at the origin.
    fn pitchfork() -> impl Evaluator {
        FnEvaluator::new(2, |x: &DVector<f64>| {
            Ok(dvector![x[2] * x[0] - x[0].powi(3), x[1]])
        })
    }

    fn point(x: DVector<f64>, tangent: DVector<f64>) -> ContinuationPoint {
        ContinuationPoint {
            x,
            tangent,
            residual_norm: 0.0,
            arclength: 0.0,
            det: 1.0,
            ds: 0.0,
            iterations: 0,
            hyperplane_defect: 0.0,
        }
    }

    fn parallel(a: &DVector<f64>, b: &DVector<f64>, tol: f64) -> bool {
        (a.dot(b).abs() - 1.0).abs() <= tol
    }

    #[test]
    fn jacobian_of_polynomial() {
        let f = FnEvaluator::new(2, |x: &DVector<f64>| Ok(dvector![x[0] * x[0], x[1]]));
        let j = fd_jacobian(&f, &dvector![1.0, 1.0, 0.0], f64::EPSILON.cbrt()).unwrap();
        let expected = DMatrix::from_row_slice(2, 3, &[2.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        assert!((j - expected).amax() < 1e-9);
    }

    #[test]
    fn jacobian_of_affine_map() {
        let a = DMatrix::from_row_slice(2, 3, &[1.5, -2.0, 0.25, 3.0, 0.5, -7.0]);
        let a2 = a.clone();
        let f = FnEvaluator::new(2, move |x: &DVector<f64>| Ok(&a2 * x + dvector![0.1, -0.2]));
        let j = fd_jacobian(&f, &dvector![0.3, -0.4, 0.2], f64::EPSILON.cbrt()).unwrap();
        assert!((j - a).amax() < 1e-10);
    }

    #[test]
    fn jacobian_failure_names_column() {
        let f = FnEvaluator::new(1, |x: &DVector<f64>| {
            if x[1] > 0.0 {
                Err(EvalError("outside domain".into()))
            } else {
                Ok(dvector![x[0]])
            }
        });
        let err = fd_jacobian(&f, &dvector![0.0, 0.0], 1e-5).unwrap_err();
        assert!(
            matches!(
                err,
                ContinuationError::Eval {
                    column: Some(1),
                    ..
                }
            ),
            "{err}"
        );
    }

    #[test]
    fn predictor_examples() {
        let p = point(dvector![0.0, 1.0, 5.0], dvector![0.0, -1.0, 0.0]);
        assert_eq!(predict(&p, 0.1), dvector![0.0, 0.9, 5.0]);
        assert_eq!(predict(&p, 0.0), p.x);
        let p = point(dvector![0.0, 1.0, 5.0], dvector![1.0, 0.0, 0.0]);
        assert_eq!(predict(&p, 0.05), dvector![0.05, 1.0, 5.0]);
    }

    #[test]
    fn tangent_examples() {
        let j = DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        assert_eq!(
            next_tangent(&j, &dvector![0.0, 0.0, 1.0]).unwrap(),
            dvector![0.0, 0.0, 1.0]
        );
        let j = DMatrix::from_row_slice(2, 3, &[0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        assert_eq!(
            next_tangent(&j, &dvector![1.0, 0.0, 0.0]).unwrap(),
            dvector![1.0, 0.0, 0.0]
        );
        // Circle at (1, 0, 0): gradient (2, 0, 0) and (0, 0, 1).
        let j = DMatrix::from_row_slice(2, 3, &[2.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
        let t = next_tangent(&j, &dvector![0.3, 0.9, 0.1].normalize()).unwrap();
        assert!((t - dvector![0.0, 1.0, 0.0]).norm() < 1e-14);
        let j = DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        assert_eq!(
            next_tangent(&j, &dvector![1.0, 0.0, 0.0]),
            Err(ContinuationError::Singular)
        );
    }

    #[test]
    fn determinant_examples() {
        let t = dvector![0.0, 0.0, 1.0];
        let j = DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        assert!((augmented_det(&j, &t) - 1.0).abs() < 1e-15);
        let j = DMatrix::from_row_slice(2, 3, &[-1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        assert!((augmented_det(&j, &t) + 1.0).abs() < 1e-15);
    }

    #[test]
    fn corrector_fixed_point() {
        let f = circle();
        let x = dvector![0.6, 0.8, 0.0];
        let c = correct(
            &f,
            &x,
            &dvector![-0.8, 0.6, 0.0],
            &StepControl::default(),
            1e-5,
        )
        .unwrap();
        assert_eq!(c.iterations, 0);
        assert_eq!(c.x, x);
    }

    #[test]
    fn corrector_lands_on_circle() {
        let f = circle();
        let t = dvector![0.0, 1.0, 0.0];
        let x_pred = dvector![1.0, 0.05, 0.0];
        let c = correct(
            &f,
            &x_pred,
            &t,
            &StepControl::default(),
            f64::EPSILON.cbrt(),
        )
        .unwrap();
        assert!((c.x[0].hypot(c.x[1]) - 1.0).abs() < 1e-10);
        assert!((&c.x - &x_pred).dot(&t).abs() < 1e-12);
        assert!(c.iterations <= 4);
    }

    #[test]
    fn corrector_reports_non_convergence() {
        let f = FnEvaluator::new(1, |x: &DVector<f64>| Ok(dvector![x[0] * x[0] + 1.0]));
        let ctl = StepControl::default();
        let err = correct(&f, &dvector![0.5, 0.0], &dvector![0.0, 1.0], &ctl, 1e-5).unwrap_err();
        assert!(matches!(
            err,
            ContinuationError::NoConvergence { .. } | ContinuationError::Singular
        ));
    }

    #[test]
    fn circle_traversal_closes() {
        let f = circle();
        let start = dvector![1.0, 0.0, 0.0];
        let stop = StopRules {
            detect_closed_loop: true,
            ..StopRules::default()
        };
        let ctl = StepControl::default();
        let branch = run_branch(
            &f,
            &start,
            &dvector![0.0, 1.0, 0.0],
            &ctl,
            &ContinuationSettings::default(),
            &stop,
        )
        .unwrap();
        assert_eq!(branch.termination, Termination::ClosedLoop);
        assert!(branch.events.is_empty());
        let last = branch.points.last().unwrap();
        assert!((&last.x - &start).norm() < 1e-6);
        assert!((last.arclength - 2.0 * std::f64::consts::PI).abs() < 1e-2);
        // Both folds in x₁ were passed.
        assert!(branch.points.iter().any(|p| p.x[1] > 0.99));
        assert!(branch.points.iter().any(|p| p.x[1] < -0.99));
        for pair in branch.points.windows(2) {
            assert!(pair[0].tangent.dot(&pair[1].tangent) > 0.0);
            assert!((&pair[1].x - &pair[0].x).norm() <= 2.0 * ctl.ds_max);
            assert!(pair[1].hyperplane_defect.abs() <= 1e-10);
        }
        for p in &branch.points {
            assert!(p.residual_norm <= 1e-10);
            assert!((p.tangent.norm() - 1.0).abs() <= 1e-10);
        }
    }

    #[test]
    fn start_must_be_a_solution() {
        let err = run_branch(
            &circle(),
            &dvector![1.1, 0.0, 0.0],
            &dvector![0.0, 1.0, 0.0],
            &StepControl::default(),
            &ContinuationSettings::default(),
            &StopRules::default(),
        )
        .unwrap_err();
        assert!(matches!(err, ContinuationError::NotASolution { .. }));
    }

    #[test]
    fn collapsed_parameter_range_gives_single_point() {
        let stop = StopRules {
            lambda_min: -0.5,
            lambda_max: -0.5,
            ..StopRules::default()
        };
        let branch = run_branch(
            &pitchfork(),
            &dvector![0.0, 0.0, -0.5],
            &dvector![0.0, 0.0, 1.0],
            &StepControl::default(),
            &ContinuationSettings::default(),
            &stop,
        )
        .unwrap();
        assert_eq!(branch.points.len(), 1);
        assert_eq!(branch.termination, Termination::LambdaBound);
    }

    #[test]
    fn same_sign_determinants_give_no_event() {
        let f = circle();
        let a = point(dvector![1.0, 0.0, 0.0], dvector![0.0, 1.0, 0.0]);
        let mut b = point(dvector![0.6, 0.8, 0.0], dvector![-0.8, 0.6, 0.0]);
        b.arclength = 0.9;
        let ev = detect_and_locate_bifurcation(
            &f,
            &a,
            &b,
            &StepControl::default(),
            &ContinuationSettings::default(),
        )
        .unwrap();
        assert!(ev.is_none());
    }

    #[test]
    fn abe_orthogonal_example() {
        let roots = solve_abe_coefficients(0.0, 2.0, 0.0).unwrap();
        let mut found: Vec<(f64, f64)> = roots.iter().map(|&(a, b)| (a.abs(), b.abs())).collect();
        found.sort_by(|p, q| q.0.total_cmp(&p.0));
        assert!((found[0].0 - 1.0).abs() < 1e-15 && found[0].1 < 1e-15);
        assert!(found[1].0 < 1e-15 && (found[1].1 - 1.0).abs() < 1e-15);
    }

    #[test]
    fn abe_roots_satisfy_equation() {
        for (c11, c12, c22) in [(1.0, 2.0, -3.0), (-0.5, 0.1, 2.0), (0.0, 0.0, 1.0)] {
            let roots = solve_abe_coefficients(c11, c12, c22).unwrap();
            for (a, b) in roots {
                assert!((a * a + b * b - 1.0).abs() < 1e-14);
                assert!((c11 * a * a + 2.0 * c12 * a * b + c22 * b * b).abs() < 1e-13);
            }
        }
        assert_eq!(
            solve_abe_coefficients(1.0, 0.0, 1.0),
            Err(ContinuationError::NoRealBranch)
        );
        assert_eq!(
            solve_abe_coefficients(0.0, 0.0, 0.0),
            Err(ContinuationError::NoRealBranch)
        );
    }

    #[test]
    fn abe_recovers_pitchfork_directions() {
        let f = pitchfork();
        let tangents = solve_abe(
            &f,
            &dvector![0.0, 0.0, 0.0],
            &ContinuationSettings::default(),
        )
        .unwrap();
        assert_eq!(tangents.len(), 2);
        let e_u = dvector![1.0, 0.0, 0.0];
        let e_l = dvector![0.0, 0.0, 1.0];
        assert!(tangents.iter().any(|t| parallel(t, &e_u, 1e-8)));
        assert!(tangents.iter().any(|t| parallel(t, &e_l, 1e-8)));
    }

    #[test]
    fn abe_rejects_regular_point() {
        let f = circle();
        let err = solve_abe(
            &f,
            &dvector![1.0, 0.0, 0.0],
            &ContinuationSettings::default(),
        )
        .unwrap_err();
        assert_eq!(err, ContinuationError::NotSimpleBifurcation(1));
    }

    #[test]
    fn pitchfork_detection_and_switching() {
        let f = pitchfork();
        let settings = ContinuationSettings::default();
        let ctl = StepControl::default();
        let stop = StopRules {
            lambda_min: -1.0,
            lambda_max: 0.5,
            ..StopRules::default()
        };
        let branch = run_branch(
            &f,
            &dvector![0.0, 0.0, -0.5],
            &dvector![0.0, 0.0, 1.0],
            &ctl,
            &settings,
            &stop,
        )
        .unwrap();
        assert_eq!(branch.termination, Termination::LambdaBound);
        assert_eq!(branch.events.len(), 1);
        let event = &branch.events[0];
        assert!(event.x_t.norm() < 1e-6, "{:?}", event.x_t);
        assert!(event.det_before * event.det_after < 0.0);
        assert!(branch.points.iter().all(|p| p.x[0].abs() < 1e-12));

        let switch: Vec<_> = event
            .tangents_out
            .iter()
            .filter(|t| t.dot(&event.incoming_tangent).abs() < settings.switch_threshold)
            .collect();
        assert_eq!(switch.len(), 1);
        for sign in [1.0, -1.0] {
            let dir = switch[0] * sign;
            let side =
                run_branch_from_bifurcation(&f, &event.x_t, &dir, &ctl, &settings, &stop).unwrap();
            assert!(side.points.len() > 10);
            for p in &side.points[1..] {
                assert!((p.x[2] - p.x[0] * p.x[0]).abs() < 1e-8, "{:?}", p.x);
                assert!(p.x[0] * sign > 0.0);
            }
        }
    }
}
