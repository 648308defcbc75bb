//! Riccati-Bessel and Riccati-Hankel functions of complex argument.
//!
//! Conventions follow the scattering literature: `ĵ_l(z) = z j_l(z)`,
//! `n̂_l(z) = -z y_l(z)` and `ĥ±_l = n̂_l ± i ĵ_l`, so that `ĥ±_0(z) = e^{±iz}`
//! and `ĵ_l = (ĥ⁺_l − ĥ⁻_l) / 2i`. The Hankel functions are evaluated in closed
//! form (an exponential times a polynomial in `1/z`), which stays stable
//! anywhere in the complex plane for the small orders supported here.

use num_complex::Complex64;
use thiserror::Error;

/// Complex scalar used for momenta and all complex intermediate quantities.
pub type ComplexValue = Complex64;

/// Largest supported angular momentum.
pub const MAX_L: usize = 8;

/// `(l+m)! / (m! (l-m)! 2^m)`, the coefficients of the reverse Bessel
/// polynomials. Row `l`, column `m`.
const HANKEL_COEFFS: [[f64; MAX_L + 1]; MAX_L + 1] = [
    [1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [1.0, 3.0, 3.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [1.0, 6.0, 15.0, 15.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [1.0, 10.0, 45.0, 105.0, 105.0, 0.0, 0.0, 0.0, 0.0],
    [1.0, 15.0, 105.0, 420.0, 945.0, 945.0, 0.0, 0.0, 0.0],
    [1.0, 21.0, 210.0, 1260.0, 4725.0, 10395.0, 10395.0, 0.0, 0.0],
    [
        1.0, 28.0, 378.0, 3150.0, 17325.0, 62370.0, 135135.0, 135135.0, 0.0,
    ],
    [
        1.0, 36.0, 630.0, 6930.0, 51975.0, 270270.0, 945945.0, 2027025.0, 2027025.0,
    ],
];

/// `(2l+1)!!` for `l = 0..=MAX_L`.
const DOUBLE_FACTORIAL_ODD: [f64; MAX_L + 1] = [
    1.0, 3.0, 15.0, 105.0, 945.0, 10395.0, 135135.0, 2027025.0, 34459425.0,
];

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
pub enum SpecfunError {
    #[error("angular momentum l = {0} is not supported (0 <= l <= 8)")]
    UnsupportedOrder(usize),
    #[error("Riccati-Hankel functions are singular at z = 0")]
    Singularity,
}

/// Outgoing (`Plus`) or incoming (`Minus`) Riccati-Hankel function.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum HankelKind {
    Plus,
    Minus,
}

impl HankelKind {
    fn sign(self) -> f64 {
        match self {
            HankelKind::Plus => 1.0,
            HankelKind::Minus => -1.0,
        }
    }
}

fn check_order(l: usize) -> Result<(), SpecfunError> {
    if l > MAX_L {
        Err(SpecfunError::UnsupportedOrder(l))
    } else {
        Ok(())
    }
}

// Below this modulus the power series is used for ĵ_l; the closed form
// loses |ĥ_l / ĵ_l| digits to cancellation, which is ruinous for small z.
fn series_radius(l: usize) -> f64 {
    if l == 0 {
        0.0
    } else {
        (l as f64 + 1.0).max(2.0)
    }
}

fn bessel_series(l: usize, z: Complex64) -> Complex64 {
    let w = -z * z * 0.5;
    let mut term = Complex64::new(1.0, 0.0);
    let mut sum = term;
    for k in 1..200 {
        term *= w / (k as f64 * (2 * l + 2 * k + 1) as f64);
        sum += term;
        if term.norm() <= 1e-17 * sum.norm() {
            break;
        }
    }
    z.powu(l as u32 + 1) * sum / DOUBLE_FACTORIAL_ODD[l]
}

/// Riccati-Bessel function `ĵ_l(z)`, the solution of the free radial equation
/// regular at the origin.
pub fn riccati_bessel_j(l: usize, z: ComplexValue) -> Result<ComplexValue, SpecfunError> {
    check_order(l)?;
    if z == Complex64::new(0.0, 0.0) {
        return Ok(z);
    }
    if l == 0 {
        return Ok(z.sin());
    }
    if z.norm() < series_radius(l) {
        return Ok(bessel_series(l, z));
    }
    let hp = hankel_closed_form(HankelKind::Plus, l, z);
    let hm = hankel_closed_form(HankelKind::Minus, l, z);
    Ok((hp - hm) / Complex64::new(0.0, 2.0))
}

/// Derivative `dĵ_l/dz`.
pub fn riccati_bessel_j_prime(l: usize, z: ComplexValue) -> Result<ComplexValue, SpecfunError> {
    check_order(l)?;
    if l == 0 {
        return Ok(z.cos());
    }
    if z == Complex64::new(0.0, 0.0) {
        return Ok(z);
    }
    Ok(riccati_bessel_j(l - 1, z)? - riccati_bessel_j(l, z)? * (l as f64) / z)
}

fn hankel_closed_form(kind: HankelKind, l: usize, z: Complex64) -> Complex64 {
    let s = kind.sign();
    // ĥ±_l(z) = (∓i)^l e^{±iz} Σ_m c_{l,m} (±i/z)^m
    let x = Complex64::new(0.0, s) / z;
    let coeffs = &HANKEL_COEFFS[l];
    let mut poly = Complex64::new(coeffs[l], 0.0);
    for m in (0..l).rev() {
        poly = poly * x + coeffs[m];
    }
    let phase = Complex64::new(0.0, -s).powu(l as u32);
    phase * (Complex64::new(0.0, s) * z).exp() * poly
}

/// Riccati-Hankel function `ĥ±_l(z)`, behaving as `e^{±iz}` (up to a phase)
/// for large `|z|`.
pub fn riccati_hankel(
    kind: HankelKind,
    l: usize,
    z: ComplexValue,
) -> Result<ComplexValue, SpecfunError> {
    check_order(l)?;
    if z == Complex64::new(0.0, 0.0) {
        return Err(SpecfunError::Singularity);
    }
    Ok(hankel_closed_form(kind, l, z))
}

/// Derivative `dĥ±_l/dz`.
pub fn riccati_hankel_prime(
    kind: HankelKind,
    l: usize,
    z: ComplexValue,
) -> Result<ComplexValue, SpecfunError> {
    check_order(l)?;
    if z == Complex64::new(0.0, 0.0) {
        return Err(SpecfunError::Singularity);
    }
    if l == 0 {
        return Ok(Complex64::new(0.0, kind.sign()) * hankel_closed_form(kind, 0, z));
    }
    Ok(hankel_closed_form(kind, l - 1, z) - hankel_closed_form(kind, l, z) * (l as f64) / z)
}

/// Wronskian `f g′ − f′ g`.
pub fn wronskian(
    f: ComplexValue,
    f_prime: ComplexValue,
    g: ComplexValue,
    g_prime: ComplexValue,
) -> ComplexValue {
    f * g_prime - f_prime * g
}
