//! Radial Schrödinger equation at complex momentum.
//!
//! The regular solution is propagated outward with a renormalized Numerov
//! scheme and matched to Riccati-Hankel functions at the last grid point.
//! Units are `ħ = m = 1`, so `ψ″ = [l(l+1)/r² + 2V(r) − k²] ψ`.

use num_complex::Complex64;
use thiserror::Error;

use crate::potentials::{PotentialError, RadialPotential, Side};
use crate::specfun::{
    riccati_bessel_j, riccati_bessel_j_prime, riccati_hankel, riccati_hankel_prime, wronskian,
    ComplexValue, HankelKind, SpecfunError, MAX_L,
};

/// Smallest `|k|` at which the residual may be evaluated.
pub const MIN_MOMENTUM: f64 = 1e-12;

/// Below this scale-free Wronskian ratio the solution is indistinguishable
/// from the free regular solution, `S = 1` and `F` is undefined.
pub const F_UNDEFINED_THRESHOLD: f64 = 1e-10;

/// RK4 sub-steps per grid segment when bridging a discontinuity.
const BRIDGE_SUBSTEPS: usize = 8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolverError {
    #[error(
        "grid needs r_end > 0 and at least 16 points (got r_end = {r_end}, n_points = {n_points})"
    )]
    InvalidGrid { r_end: f64, n_points: usize },
    #[error("momentum k = {0} is too close to the origin")]
    ZeroMomentum(ComplexValue),
    #[error("angular momentum l = {0} exceeds the supported maximum")]
    UnsupportedOrder(usize),
    #[error("non-finite value in the Numerov ratio recursion at grid index {index}")]
    Overflow { index: usize },
    #[error("discontinuity at r = {at} is too close to the grid ends or to another discontinuity")]
    UnresolvedBreakpoint { at: f64 },
    #[error("S = 1 to working precision; F is undefined")]
    FUndefined,
    #[error(transparent)]
    Potential(#[from] PotentialError),
    #[error(transparent)]
    Specfun(#[from] SpecfunError),
}

/// Uniform grid `r_j = j h`, `h = r_end / n_points`; the matching radius is
/// `r_end`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RadialGrid {
    pub r_end: f64,
    pub n_points: usize,
}

impl RadialGrid {
    pub fn new(r_end: f64, n_points: usize) -> Result<Self, SolverError> {
        if !(r_end.is_finite() && r_end > 0.0) || n_points < 16 {
            return Err(SolverError::InvalidGrid { r_end, n_points });
        }
        Ok(RadialGrid { r_end, n_points })
    }

    pub fn spacing(&self) -> f64 {
        self.r_end / self.n_points as f64
    }

    pub fn node(&self, j: usize) -> f64 {
        j as f64 * self.spacing()
    }
}

/// `ψ(R)` and `ψ′(R)` in an arbitrary common normalization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EndpointSolution {
    pub psi: ComplexValue,
    pub psi_prime: ComplexValue,
}

impl EndpointSolution {
    pub fn scaled(&self, c: ComplexValue) -> Self {
        EndpointSolution {
            psi: self.psi * c,
            psi_prime: self.psi_prime * c,
        }
    }
}

/// Asymptotic amplitudes of `ψ = A ĥ⁺(kr) + B ĥ⁻(kr)`, the S-matrix element
/// `S = −A/B` and the regularized function `F = k^{2l+1}/(S − 1)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScatteringAmplitudes {
    pub a: ComplexValue,
    pub b: ComplexValue,
    pub s: ComplexValue,
    /// `None` when `S = 1` to working precision.
    pub f: Option<ComplexValue>,
}

/// Projects the endpoint solution onto the outgoing and incoming waves.
///
/// `F` is formed as `k^{2l+1} W(ψ, ĥ⁺) / (−2i W(ψ, ĵ))`, which equals
/// `k^{2l+1}/(S − 1)` without the cancellation in `S − 1` near `k = 0`.
pub fn extract_amplitudes(
    sol: &EndpointSolution,
    l: usize,
    k: ComplexValue,
    r_end: f64,
) -> Result<ScatteringAmplitudes, SolverError> {
    if k.norm() < MIN_MOMENTUM {
        return Err(SolverError::ZeroMomentum(k));
    }
    let z = k * r_end;
    let hp = riccati_hankel(HankelKind::Plus, l, z)?;
    let hm = riccati_hankel(HankelKind::Minus, l, z)?;
    let dhp = k * riccati_hankel_prime(HankelKind::Plus, l, z)?;
    let dhm = k * riccati_hankel_prime(HankelKind::Minus, l, z)?;
    let j = riccati_bessel_j(l, z)?;
    let dj = k * riccati_bessel_j_prime(l, z)?;

    // W(ĥ⁺(kr), ĥ⁻(kr)) = −2ik exactly; forming it from the functions
    // cancels catastrophically for small |k|.
    let w_pm = Complex64::new(0.0, -2.0) * k;
    assert!(w_pm.norm() > 0.0, "W(h+, h-) vanished for k = {k}");
    let w_psi_m = wronskian(sol.psi, sol.psi_prime, hm, dhm);
    let w_psi_p = wronskian(sol.psi, sol.psi_prime, hp, dhp);
    let w_psi_j = wronskian(sol.psi, sol.psi_prime, j, dj);

    let a = w_psi_m / w_pm;
    let b = -w_psi_p / w_pm;
    let s = w_psi_m / w_psi_p;

    let reference = sol.psi.norm() * dj.norm() + sol.psi_prime.norm() * j.norm();
    let f = if w_psi_j.norm() <= F_UNDEFINED_THRESHOLD * reference {
        None
    } else {
        let k_pow = k.powu(2 * l as u32 + 1);
        Some(k_pow * w_psi_p / (Complex64::new(0.0, -2.0) * w_psi_j))
    };
    Ok(ScatteringAmplitudes { a, b, s, f })
}

/// Tolerance scale `max(1, |k|^{2l+1})` for residual norms.
pub fn residual_scale(l: usize, k: ComplexValue) -> f64 {
    k.norm().powi(2 * l as i32 + 1).max(1.0)
}

#[derive(Debug, Clone, Copy)]
struct Bridge {
    /// Breakpoint radius.
    at: f64,
    /// Last node strictly below `at`.
    m: usize,
}

/// A potential family, a partial wave and a grid, with the λ-independent
/// parts of the Numerov coefficients tabulated.
#[derive(Debug, Clone)]
pub struct RadialProblem {
    potential: RadialPotential,
    l: usize,
    grid: RadialGrid,
    shape: Vec<f64>,
    centrifugal: Vec<f64>,
    bridges: Vec<Bridge>,
}

impl RadialProblem {
    pub fn new(
        potential: RadialPotential,
        l: usize,
        grid: RadialGrid,
    ) -> Result<Self, SolverError> {
        if l > MAX_L {
            return Err(SolverError::UnsupportedOrder(l));
        }
        let grid = RadialGrid::new(grid.r_end, grid.n_points)?;
        let n = grid.n_points;
        let h = grid.spacing();
        let ll = (l * (l + 1)) as f64;

        let mut shape = vec![0.0; n + 2];
        let mut centrifugal = vec![0.0; n + 2];
        for j in 1..n + 2 {
            let r = grid.node(j);
            shape[j] = potential.shape(r);
            centrifugal[j] = ll / (r * r);
        }

        let mut bridges = Vec::new();
        let mut breakpoints = potential.breakpoints();
        breakpoints.sort_by(f64::total_cmp);
        let mut last_m = 0usize;
        for at in breakpoints {
            if at <= 0.0 || at > grid.r_end {
                continue;
            }
            let m = (at / h).ceil() as usize - 1;
            let m = if grid.node(m) >= at { m - 1 } else { m };
            let too_close = m < 4 || m + 2 > n || (last_m > 0 && m < last_m + 3);
            if too_close {
                return Err(SolverError::UnresolvedBreakpoint { at });
            }
            bridges.push(Bridge { at, m });
            last_m = m;
        }

        Ok(RadialProblem {
            potential,
            l,
            grid,
            shape,
            centrifugal,
            bridges,
        })
    }

    pub fn potential(&self) -> &RadialPotential {
        &self.potential
    }

    pub fn l(&self) -> usize {
        self.l
    }

    pub fn grid(&self) -> &RadialGrid {
        &self.grid
    }

    fn t(&self, j: usize, k2: Complex64, lambda: f64) -> Complex64 {
        let h = self.grid.spacing();
        let f = self.centrifugal[j] + 2.0 * lambda * self.shape[j] - k2;
        f * (h * h / 12.0)
    }

    fn w(&self, j: usize, k2: Complex64, lambda: f64) -> Complex64 {
        let t = self.t(j, k2, lambda);
        t * 12.0 / (1.0 - t)
    }

    /// Integrates the regular solution from the origin to `r_end`.
    pub fn integrate(&self, k: ComplexValue, lambda: f64) -> Result<EndpointSolution, SolverError> {
        if k.norm() < MIN_MOMENTUM {
            return Err(SolverError::ZeroMomentum(k));
        }
        let n = self.grid.n_points;
        let h = self.grid.spacing();
        let k2 = k * k;
        let l = self.l;

        // ψ₀ = 0, ψ₁ = h^{l+1}; Φ = (1 − T) ψ, with Φ₀ from lim_{r→0} fψ.
        let psi1 = Complex64::new(h.powi(l as i32 + 1), 0.0);
        let limit_f_psi = match l {
            0 => 2.0 * lambda * self.potential.origin_strength(),
            1 => 2.0,
            _ => 0.0,
        };
        let phi0 = Complex64::new(-h * h / 12.0 * limit_f_psi, 0.0);
        let t1 = self.t(1, k2, lambda);
        let phi1 = (1.0 - t1) * psi1;
        let phi2 = (2.0 + 10.0 * t1) * psi1 - phi0;

        // Q_j = Φ_{j+1}/Φ_j − 1
        let mut q = self.w(2, k2, lambda) + (phi2 - phi1) / phi2;
        check_finite(q, 2)?;
        let mut q_prev = Complex64::new(f64::NAN, f64::NAN);
        let mut bridges = self.bridges.iter().peekable();
        let mut j = 3;
        while j <= n {
            if let Some(bridge) = bridges.next_if(|b| b.m == j) {
                q = self.bridge(bridge, (q_prev, q), k, lambda)?;
                q_prev = Complex64::new(f64::NAN, f64::NAN);
                j = bridge.m + 2;
                continue;
            }
            let next = self.w(j, k2, lambda) + q / (1.0 + q);
            check_finite(next, j)?;
            q_prev = q;
            q = next;
            j += 1;
        }

        let t_prev = self.t(n - 1, k2, lambda);
        let t_here = self.t(n, k2, lambda);
        let t_next = self.t(n + 1, k2, lambda);
        let psi_prev = 1.0 / ((1.0 + q_prev) * (1.0 - t_prev));
        let psi = 1.0 / (1.0 - t_here);
        let psi_next = (1.0 + q) / (1.0 - t_next);
        let psi_prime = ((0.5 - t_next) * psi_next - (0.5 - t_prev) * psi_prev) / h;
        if !(psi.is_finite() && psi_prime.is_finite()) {
            return Err(SolverError::Overflow { index: n });
        }
        Ok(EndpointSolution { psi, psi_prime })
    }

    /// Carries the solution across the cell containing a discontinuity with
    /// RK4, evaluating the potential from the proper side of the jump, and
    /// returns `Q_{m+1}`.
    fn bridge(
        &self,
        bridge: &Bridge,
        (q_mm2, q_mm1): (Complex64, Complex64),
        k: Complex64,
        lambda: f64,
    ) -> Result<Complex64, SolverError> {
        let m = bridge.m;
        let h = self.grid.spacing();
        let k2 = k * k;
        let t = |i: usize| self.t(i, k2, lambda);

        let psi_mm2 = 1.0 / ((1.0 + q_mm2) * (1.0 - t(m - 2)));
        let psi_mm1 = 1.0 / (1.0 - t(m - 1));
        let psi_m = (1.0 + q_mm1) / (1.0 - t(m));
        let dpsi = ((0.5 - t(m)) * psi_m - (0.5 - t(m - 2)) * psi_mm2) / h;

        let state = (psi_mm1, dpsi);
        let state = self.rk4(
            self.grid.node(m - 1),
            bridge.at,
            state,
            Side::Below,
            k2,
            lambda,
        );
        let state = self.rk4(
            bridge.at,
            self.grid.node(m + 1),
            state,
            Side::Above,
            k2,
            lambda,
        );
        let psi_mp1 = state.0;
        let state = self.rk4(
            self.grid.node(m + 1),
            self.grid.node(m + 2),
            state,
            Side::Above,
            k2,
            lambda,
        );
        let psi_mp2 = state.0;

        let phi_mp1 = (1.0 - t(m + 1)) * psi_mp1;
        let phi_mp2 = (1.0 - t(m + 2)) * psi_mp2;
        let q = phi_mp2 / phi_mp1 - 1.0;
        check_finite(q, m + 1)?;
        Ok(q)
    }

    fn rk4(
        &self,
        x0: f64,
        x1: f64,
        (mut y, mut dy): (Complex64, Complex64),
        side: Side,
        k2: Complex64,
        lambda: f64,
    ) -> (Complex64, Complex64) {
        let ll = (self.l * (self.l + 1)) as f64;
        let f = |x: f64| ll / (x * x) + 2.0 * lambda * self.potential.shape_from(x, side) - k2;
        let dx = (x1 - x0) / BRIDGE_SUBSTEPS as f64;
        // Node positions are interpolated rather than accumulated so that the
        // last one is exactly `x1` and stays on the requested side of a jump.
        let at = |i: usize| {
            if i == BRIDGE_SUBSTEPS {
                x1
            } else {
                x0 + i as f64 * dx
            }
        };
        for i in 0..BRIDGE_SUBSTEPS {
            let f0 = f(at(i));
            let fh = f(at(i) + 0.5 * dx);
            let f1 = f(at(i + 1));
            let (k1y, k1d) = (dy, f0 * y);
            let (k2y, k2d) = (dy + 0.5 * dx * k1d, fh * (y + 0.5 * dx * k1y));
            let (k3y, k3d) = (dy + 0.5 * dx * k2d, fh * (y + 0.5 * dx * k2y));
            let (k4y, k4d) = (dy + dx * k3d, f1 * (y + dx * k3y));
            y += dx / 6.0 * (k1y + 2.0 * k2y + 2.0 * k3y + k4y);
            dy += dx / 6.0 * (k1d + 2.0 * k2d + 2.0 * k3d + k4d);
        }
        (y, dy)
    }

    /// Solves and projects in one call.
    pub fn amplitudes(
        &self,
        k: ComplexValue,
        lambda: f64,
    ) -> Result<ScatteringAmplitudes, SolverError> {
        let sol = self.integrate(k, lambda)?;
        extract_amplitudes(&sol, self.l, k, self.grid.r_end)
    }

    /// `F(k, λ)` at `k = x[0] + i x[1]`, `λ = x[2]`.
    pub fn regularized(&self, x: [f64; 3]) -> Result<ComplexValue, SolverError> {
        let k = Complex64::new(x[0], x[1]);
        self.amplitudes(k, x[2])?.f.ok_or(SolverError::FUndefined)
    }

    /// The real residual map `G(x) = (Re F, Im F)`.
    pub fn residual(&self, x: [f64; 3]) -> Result<[f64; 2], SolverError> {
        let f = self.regularized(x)?;
        Ok([f.re, f.im])
    }

    pub fn residual_scale(&self, x: [f64; 3]) -> f64 {
        residual_scale(self.l, Complex64::new(x[0], x[1]))
    }
}

fn check_finite(q: Complex64, index: usize) -> Result<(), SolverError> {
    if q.is_finite() {
        Ok(())
    } else {
        Err(SolverError::Overflow { index })
    }
}
