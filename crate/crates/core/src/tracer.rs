//! Pole-trajectory studies: the residual map handed to the continuation
//! engine, bound-state seed searches, branch orchestration and state
//! classification.

use log::{info, warn};
use nalgebra::{dvector, DVector};
use num_complex::Complex64;
use rayon::prelude::*;
use thiserror::Error;

use crate::continuation::{
    run_branch, run_branch_from_bifurcation, Branch, ContinuationError, ContinuationSettings,
    EvalError, Evaluator, StepControl, StopRules,
};
use crate::potentials::{PotentialError, RadialPotential, DEFAULT_NEGLIGIBILITY};
use crate::solver::{residual_scale, RadialGrid, RadialProblem, SolverError};

/// Default lower bound on `Im k` for downward trajectories.
pub const DEFAULT_IM_K_MIN: f64 = -3.0;

/// `|Re k|` below this counts as zero when classifying.
pub const AXIS_TOLERANCE: f64 = 1e-6;

/// `|k|` below this is classified as threshold.
pub const THRESHOLD_RADIUS: f64 = 1e-4;

/// Required seed accuracy, relative to the residual scale.
pub const SEED_TOLERANCE: f64 = 1e-8;

const SCAN_SAMPLES: usize = 200;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TracerError {
    #[error("no seeds")]
    NoSeeds,
    #[error("invalid study: {0}")]
    InvalidStudy(String),
    #[error("no bound state for λ = {lambda} with Im k in [{lo}, {hi}]")]
    NotFound { lambda: f64, lo: f64, hi: f64 },
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Potential(#[from] PotentialError),
    #[error(transparent)]
    Continuation(#[from] ContinuationError),
}

/// `G(x) = (Re F, Im F)` at `k = x₀ + i x₁`, `λ = x₂`.
pub struct ResidualMap {
    problem: RadialProblem,
}

impl ResidualMap {
    pub fn new(problem: RadialProblem) -> Self {
        ResidualMap { problem }
    }

    pub fn problem(&self) -> &RadialProblem {
        &self.problem
    }
}

impl Evaluator for ResidualMap {
    fn dim(&self) -> usize {
        2
    }

    fn eval(&self, x: &DVector<f64>) -> Result<DVector<f64>, EvalError> {
        self.problem
            .residual([x[0], x[1], x[2]])
            .map(|g| dvector![g[0], g[1]])
            .map_err(|e| EvalError(e.to_string()))
    }

    fn scale(&self, x: &DVector<f64>) -> f64 {
        residual_scale(self.problem.l(), Complex64::new(x[0], x[1]))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StateClass {
    Bound,
    Virtual,
    Resonance,
    Threshold,
}

impl StateClass {
    pub fn as_str(&self) -> &'static str {
        match self {
            StateClass::Bound => "bound",
            StateClass::Virtual => "virtual",
            StateClass::Resonance => "resonance",
            StateClass::Threshold => "threshold",
        }
    }
}

/// Classifies a pole at `k = x₀ + i x₁`. Off-axis poles are labelled
/// resonances regardless of the sign of `Im k`.
pub fn classify(x: &[f64]) -> StateClass {
    let (re, im) = (x[0], x[1]);
    if re.hypot(im) < THRESHOLD_RADIUS {
        StateClass::Threshold
    } else if re.abs() <= AXIS_TOLERANCE {
        if im > 0.0 {
            StateClass::Bound
        } else {
            StateClass::Virtual
        }
    } else {
        StateClass::Resonance
    }
}

/// Start point of a branch on the positive imaginary axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Seed {
    /// Polished before use.
    Explicit { lambda: f64, im_k: f64 },
    /// Located with [`find_bound_state`] in `bracket`.
    Auto { lambda: f64, bracket: (f64, f64) },
}

impl Seed {
    pub fn lambda(&self) -> f64 {
        match *self {
            Seed::Explicit { lambda, .. } | Seed::Auto { lambda, .. } => lambda,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyDefinition {
    pub potential: RadialPotential,
    pub l: usize,
    pub grid: RadialGrid,
    pub lambda_range: (f64, f64),
    pub seeds: Vec<Seed>,
    pub step: StepControl,
    pub settings: ContinuationSettings,
    pub im_k_min: f64,
    /// Step limit for branches started at seeds.
    pub max_steps: usize,
    /// Step limit for branches launched at bifurcations.
    pub switched_max_steps: usize,
    pub branch_switching: bool,
}

impl StudyDefinition {
    pub fn new(
        potential: RadialPotential,
        l: usize,
        grid: RadialGrid,
        lambda_range: (f64, f64),
    ) -> Self {
        StudyDefinition {
            potential,
            l,
            grid,
            lambda_range,
            seeds: Vec::new(),
            step: StepControl::default(),
            settings: ContinuationSettings::default(),
            im_k_min: DEFAULT_IM_K_MIN,
            max_steps: 10_000,
            switched_max_steps: 10_000,
            branch_switching: true,
        }
    }

    fn validate(&self) -> Result<(), TracerError> {
        if self.seeds.is_empty() {
            return Err(TracerError::NoSeeds);
        }
        let (lo, hi) = self.lambda_range;
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return Err(TracerError::InvalidStudy(format!("λ range [{lo}, {hi}]")));
        }
        self.step.validate()?;
        let lambda_max = lo.abs().max(hi.abs());
        self.potential
            .check_short_range(self.grid.r_end, lambda_max, DEFAULT_NEGLIGIBILITY)?;
        Ok(())
    }

    fn stop_rules(&self, max_steps: usize) -> StopRules {
        StopRules {
            lambda_min: self.lambda_range.0,
            lambda_max: self.lambda_range.1,
            bounds: vec![(1, self.im_k_min, f64::INFINITY)],
            max_steps,
            crossing_monitor: Some(1),
            detect_closed_loop: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundState {
    pub im_k: f64,
    /// `|F(i Im k, λ)|`.
    pub residual: f64,
    /// Number of distinct zeros found in the bracket.
    pub zeros_in_bracket: usize,
}

/// `F(iy, λ) / i^{2l+1}`, real for real potentials.
fn reduced_f(problem: &RadialProblem, y: f64, lambda: f64) -> Result<Complex64, SolverError> {
    let phase = Complex64::new(0.0, 1.0).powu(2 * problem.l() as u32 + 1);
    Ok(problem.regularized([0.0, y, lambda])? / phase)
}

fn is_real(z: Complex64) -> bool {
    z.im.abs() <= 1e-8 * z.norm().max(f64::MIN_POSITIVE)
}

/// Safeguarded Newton on a real function with a sign change in `[a, b]`.
fn refine_root<G>(g: G, mut a: f64, mut b: f64) -> Result<f64, SolverError>
where
    G: Fn(f64) -> Result<f64, SolverError>,
{
    let mut ga = g(a)?;
    let mut x = 0.5 * (a + b);
    for _ in 0..100 {
        let gx = g(x)?;
        if gx == 0.0 {
            return Ok(x);
        }
        if gx.signum() == ga.signum() {
            a = x;
            ga = gx;
        } else {
            b = x;
        }
        let h = 1e-7 * x.abs().max(1e-3);
        let slope = (g(x + h)? - g(x - h)?) / (2.0 * h);
        let newton = x - gx / slope;
        let next = if newton.is_finite() && newton > a.min(b) && newton < a.max(b) {
            newton
        } else {
            0.5 * (a + b)
        };
        if (next - x).abs() <= 1e-15 * x.abs() || (b - a).abs() <= 1e-15 * x.abs() {
            return Ok(next);
        }
        x = next;
    }
    Ok(x)
}

/// 2D Newton on `(Re F, Im F)` over `k` at fixed `λ`, from `k = i y₀`.
fn newton_2d(problem: &RadialProblem, y0: f64, lambda: f64) -> Result<Complex64, SolverError> {
    let mut k = Complex64::new(0.0, y0);
    for _ in 0..50 {
        let f = problem.regularized([k.re, k.im, lambda])?;
        let h = 1e-7 * k.norm().max(1e-3);
        // F is analytic in k, so one complex derivative suffices.
        let fp = problem.regularized([k.re + h, k.im, lambda])?;
        let fm = problem.regularized([k.re - h, k.im, lambda])?;
        let df = (fp - fm) / (2.0 * h);
        let step = f / df;
        k -= step;
        if step.norm() <= 1e-15 * k.norm() {
            break;
        }
    }
    Ok(k)
}

/// Bound-state pole `k = i y` with `y` in `bracket`. If several are found the
/// one closest to the upper end is returned.
pub fn find_bound_state(
    problem: &RadialProblem,
    lambda: f64,
    bracket: (f64, f64),
) -> Result<BoundState, TracerError> {
    let (lo, hi) = (bracket.0.min(bracket.1), bracket.0.max(bracket.1));
    let not_found = TracerError::NotFound { lambda, lo, hi };
    if !(lo > 0.0 && hi > lo) {
        return Err(TracerError::InvalidStudy(format!(
            "bound-state bracket must satisfy 0 < lo < hi, got ({lo}, {hi})"
        )));
    }
    let ys: Vec<f64> = (0..SCAN_SAMPLES)
        .map(|i| lo + (hi - lo) * i as f64 / (SCAN_SAMPLES - 1) as f64)
        .collect();
    let samples: Vec<Option<Complex64>> = ys
        .par_iter()
        .map(|&y| reduced_f(problem, y, lambda).ok())
        .collect();

    let scale = |y: f64| residual_scale(problem.l(), Complex64::new(0.0, y));
    let accept = |y: f64| -> Option<f64> {
        let f = problem.regularized([0.0, y, lambda]).ok()?;
        (f.norm() <= SEED_TOLERANCE * scale(y)).then_some(f.norm())
    };

    let real_axis = samples.iter().flatten().all(|&z| is_real(z));
    let mut roots: Vec<f64> = Vec::new();
    if real_axis {
        for i in 0..SCAN_SAMPLES - 1 {
            let (Some(ga), Some(gb)) = (samples[i], samples[i + 1]) else {
                continue;
            };
            if ga.re.signum() == gb.re.signum() {
                continue;
            }
            let g = |y: f64| reduced_f(problem, y, lambda).map(|z| z.re);
            match refine_root(g, ys[i], ys[i + 1]) {
                // A sign change through a pole of F fails the residual test.
                Ok(y) if accept(y).is_some() => roots.push(y),
                Ok(y) => info!("rejected sign change of F at Im k = {y} (pole of F)"),
                Err(e) => warn!("root refinement failed near Im k = {}: {e}", ys[i]),
            }
        }
    } else {
        warn!("F / i^(2l+1) is not real on the imaginary axis; using 2D Newton");
        let start = ys
            .iter()
            .zip(&samples)
            .filter_map(|(&y, s)| s.map(|z| (y, z.norm())))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(y, _)| y)
            .ok_or(not_found.clone())?;
        let k = newton_2d(problem, start, lambda)?;
        if k.re.abs() <= AXIS_TOLERANCE && k.im >= lo && k.im <= hi && accept(k.im).is_some() {
            roots.push(k.im);
        }
    }

    let zeros_in_bracket = roots.len();
    let im_k = roots
        .into_iter()
        .max_by(|a, b| a.total_cmp(b))
        .ok_or(not_found)?;
    if zeros_in_bracket > 1 {
        warn!(
            "{zeros_in_bracket} bound states for λ = {lambda} in [{lo}, {hi}]; using Im k = {im_k}"
        );
    }
    let residual = accept(im_k).unwrap_or(f64::NAN);
    Ok(BoundState {
        im_k,
        residual,
        zeros_in_bracket,
    })
}

/// Refines an approximate bound state by Newton iteration on the axis.
fn polish(problem: &RadialProblem, lambda: f64, im_k: f64) -> Result<f64, TracerError> {
    let g = |y: f64| reduced_f(problem, y, lambda).map(|z| z.re);
    let width = 1e-3 * im_k.abs().max(1.0);
    let (mut a, mut b) = (im_k - width, im_k + width);
    for _ in 0..8 {
        if a > 0.0 {
            if let (Ok(ga), Ok(gb)) = (g(a), g(b)) {
                if ga.signum() != gb.signum() {
                    return Ok(refine_root(g, a, b)?);
                }
            }
        }
        a = im_k - 4.0 * (im_k - a);
        b = im_k + 4.0 * (b - im_k);
        a = a.max(0.5 * im_k);
    }
    Ok(find_bound_state(problem, lambda, (0.5 * im_k, 1.5 * im_k))?.im_k)
}

/// One traced branch with per-point classification.
#[derive(Debug, Clone, PartialEq)]
pub struct TracedBranch {
    /// `"<seed>"` for seed branches, `"<seed>.<j>"` for switched ones.
    pub id: String,
    pub seed_index: usize,
    pub parent: Option<String>,
    pub branch: Branch,
    pub classes: Vec<StateClass>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeedFailure {
    pub seed_index: usize,
    pub seed: Seed,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyResult {
    /// Seed start points `(Re k, Im k, λ)` after polishing, by seed index.
    pub seeds: Vec<Option<[f64; 3]>>,
    pub branches: Vec<TracedBranch>,
    pub failures: Vec<SeedFailure>,
}

impl StudyResult {
    pub fn branch(&self, id: &str) -> Option<&TracedBranch> {
        self.branches.iter().find(|b| b.id == id)
    }
}

fn traced(id: String, seed_index: usize, parent: Option<String>, branch: Branch) -> TracedBranch {
    let classes = branch
        .points
        .iter()
        .map(|p| classify(p.x.as_slice()))
        .collect();
    TracedBranch {
        id,
        seed_index,
        parent,
        branch,
        classes,
    }
}

/// Resolves a seed to a start point on the positive imaginary axis.
pub fn resolve_seed(problem: &RadialProblem, seed: &Seed) -> Result<[f64; 3], TracerError> {
    let (lambda, im_k) = match *seed {
        Seed::Explicit { lambda, im_k } => {
            if im_k <= 0.0 {
                return Err(TracerError::InvalidStudy(format!(
                    "seed Im k = {im_k} is not on the positive imaginary axis"
                )));
            }
            (lambda, polish(problem, lambda, im_k)?)
        }
        Seed::Auto { lambda, bracket } => {
            (lambda, find_bound_state(problem, lambda, bracket)?.im_k)
        }
    };
    let x = [0.0, im_k, lambda];
    let f = problem.regularized(x)?;
    let scale = problem.residual_scale(x);
    if f.norm() > SEED_TOLERANCE * scale {
        return Err(TracerError::NotFound {
            lambda,
            lo: im_k,
            hi: im_k,
        });
    }
    Ok(x)
}

fn run_seed(
    study: &StudyDefinition,
    map: &ResidualMap,
    seed_index: usize,
    seed: &Seed,
) -> Result<([f64; 3], Vec<TracedBranch>), TracerError> {
    let (lo, hi) = study.lambda_range;
    if seed.lambda() < lo || seed.lambda() > hi {
        return Err(TracerError::InvalidStudy(format!(
            "seed λ = {} outside [{lo}, {hi}]",
            seed.lambda()
        )));
    }
    let x0 = resolve_seed(map.problem(), seed)?;
    let start = dvector![x0[0], x0[1], x0[2]];
    let hint = dvector![0.0, 0.0, -1.0];
    let main = run_branch(
        map,
        &start,
        &hint,
        &study.step,
        &study.settings,
        &study.stop_rules(study.max_steps),
    )?;
    info!(
        "branch {seed_index}: {} points, {} events, {}",
        main.points.len(),
        main.events.len(),
        main.termination.as_str()
    );

    let mut launches = Vec::new();
    if study.branch_switching {
        for event in &main.events {
            for t in &event.tangents_out {
                if t.dot(&event.incoming_tangent).abs() >= study.settings.switch_threshold {
                    continue;
                }
                for sign in [1.0, -1.0] {
                    launches.push((event.x_t.clone(), t * sign));
                }
            }
        }
    }
    let id = seed_index.to_string();
    let switch_stop = study.stop_rules(study.switched_max_steps);
    let switched: Vec<TracedBranch> = launches
        .par_iter()
        .enumerate()
        .filter_map(|(j, (x_t, dir))| {
            match run_branch_from_bifurcation(
                map,
                x_t,
                dir,
                &study.step,
                &study.settings,
                &switch_stop,
            ) {
                Ok(b) => Some(traced(
                    format!("{id}.{}", j + 1),
                    seed_index,
                    Some(id.clone()),
                    b,
                )),
                Err(e) => {
                    warn!("switched branch {id}.{} failed to start: {e}", j + 1);
                    None
                }
            }
        })
        .collect();

    let mut branches = vec![traced(id, seed_index, None, main)];
    branches.extend(switched);
    Ok((x0, branches))
}

/// Runs every seed of the study (in parallel) and follows the branches that
/// leave each detected bifurcation. Seed failures are collected, not fatal.
pub fn run_study(study: &StudyDefinition) -> Result<StudyResult, TracerError> {
    study.validate()?;
    let problem = RadialProblem::new(study.potential, study.l, study.grid)?;
    let map = ResidualMap::new(problem);

    let outcomes: Vec<_> = study
        .seeds
        .par_iter()
        .enumerate()
        .map(|(i, seed)| (i, run_seed(study, &map, i, seed)))
        .collect();

    let mut result = StudyResult {
        seeds: vec![None; study.seeds.len()],
        branches: Vec::new(),
        failures: Vec::new(),
    };
    for (i, outcome) in outcomes {
        match outcome {
            Ok((x0, branches)) => {
                result.seeds[i] = Some(x0);
                result.branches.extend(branches);
            }
            Err(e) => {
                warn!("seed {i} failed: {e}");
                result.failures.push(SeedFailure {
                    seed_index: i,
                    seed: study.seeds[i],
                    message: e.to_string(),
                });
            }
        }
    }
    Ok(result)
}
