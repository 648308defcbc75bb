//! Short-range radial potentials `V(r, λ) = λ V₀(r)`.

use std::collections::BTreeMap;
use thiserror::Error;

/// Default bound on `|V(R, λ_max)|` for the potential to count as negligible
/// at the matching radius.
pub const DEFAULT_NEGLIGIBILITY: f64 = 1e-7;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PotentialError {
    #[error("unknown potential kind `{0}`")]
    UnknownKind(String),
    #[error("potential `{kind}` has no parameter `{param}`")]
    UnknownParameter { kind: String, param: String },
    #[error("parameter `{param}` must be positive and finite, got {value}")]
    InvalidParameter { param: String, value: f64 },
    #[error("effective potential is singular at r = 0 for l = {l}")]
    Singular { l: usize },
    #[error("|V(R = {r_end}, λ = {lambda})| = {value:e} exceeds the negligibility threshold {threshold:e}")]
    NotShortRange {
        r_end: f64,
        lambda: f64,
        value: f64,
        threshold: f64,
    },
}

/// Side from which a potential is evaluated at a breakpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Below,
    Above,
}

/// A family of radial potentials; `λ` is supplied at evaluation time and
/// always multiplies the strength.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RadialPotential {
    /// `V ≡ 0`.
    Free,
    /// `−λ exp(−(r/width)²)`.
    Gaussian { width: f64 },
    /// `−λ` for `r < radius`, `0` beyond.
    SquareWell { radius: f64 },
    /// `λ (e^{−2α(r−r₀)} − 2 e^{−α(r−r₀)})`.
    Morse { alpha: f64, r0: f64 },
    /// `−λ e^{−g r} / r`.
    Yukawa { g: f64 },
    /// `4λ ((σ/r)¹² − (σ/r)⁶)`.
    LennardJones { sigma: f64 },
}

impl RadialPotential {
    pub fn gaussian() -> Self {
        RadialPotential::Gaussian { width: 1.0 }
    }

    pub fn square_well(radius: f64) -> Self {
        RadialPotential::SquareWell { radius }
    }

    /// Builds a potential from a kind name and named shape parameters;
    /// missing parameters take their defaults, unknown ones are rejected.
    pub fn from_params(kind: &str, params: &BTreeMap<String, f64>) -> Result<Self, PotentialError> {
        let allowed: &[(&str, f64)] = match kind {
            "none" | "free" => &[],
            "gaussian" => &[("width", 1.0)],
            "square_well" => &[("a", 1.0)],
            "morse" => &[("alpha", 1.0), ("r0", 1.5)],
            "yukawa" => &[("g", 1.0)],
            "lennard_jones" => &[("sigma", 1.0)],
            other => return Err(PotentialError::UnknownKind(other.to_string())),
        };
        for name in params.keys() {
            if !allowed.iter().any(|(p, _)| p == name) {
                return Err(PotentialError::UnknownParameter {
                    kind: kind.to_string(),
                    param: name.clone(),
                });
            }
        }
        let get = |name: &str| -> Result<f64, PotentialError> {
            let default = allowed.iter().find(|(p, _)| *p == name).map(|(_, d)| *d);
            let value = params.get(name).copied().or(default).unwrap_or(f64::NAN);
            if value.is_finite() && value > 0.0 {
                Ok(value)
            } else {
                Err(PotentialError::InvalidParameter {
                    param: name.to_string(),
                    value,
                })
            }
        };
        Ok(match kind {
            "none" | "free" => RadialPotential::Free,
            "gaussian" => RadialPotential::Gaussian {
                width: get("width")?,
            },
            "square_well" => RadialPotential::SquareWell { radius: get("a")? },
            "morse" => RadialPotential::Morse {
                alpha: get("alpha")?,
                r0: get("r0")?,
            },
            "yukawa" => RadialPotential::Yukawa { g: get("g")? },
            _ => RadialPotential::LennardJones {
                sigma: get("sigma")?,
            },
        })
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            RadialPotential::Free => "none",
            RadialPotential::Gaussian { .. } => "gaussian",
            RadialPotential::SquareWell { .. } => "square_well",
            RadialPotential::Morse { .. } => "morse",
            RadialPotential::Yukawa { .. } => "yukawa",
            RadialPotential::LennardJones { .. } => "lennard_jones",
        }
    }

    /// Shape parameters by name, as accepted by [`RadialPotential::from_params`].
    pub fn params(&self) -> BTreeMap<String, f64> {
        let pairs: Vec<(&str, f64)> = match *self {
            RadialPotential::Free => vec![],
            RadialPotential::Gaussian { width } => vec![("width", width)],
            RadialPotential::SquareWell { radius } => vec![("a", radius)],
            RadialPotential::Morse { alpha, r0 } => vec![("alpha", alpha), ("r0", r0)],
            RadialPotential::Yukawa { g } => vec![("g", g)],
            RadialPotential::LennardJones { sigma } => vec![("sigma", sigma)],
        };
        pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }

    /// Unit-strength profile `V₀(r)`.
    pub fn shape(&self, r: f64) -> f64 {
        self.shape_from(r, Side::Above)
    }

    /// `V₀(r)` taking the one-sided limit at a discontinuity.
    pub fn shape_from(&self, r: f64, side: Side) -> f64 {
        match *self {
            RadialPotential::Free => 0.0,
            RadialPotential::Gaussian { width } => -(-(r / width).powi(2)).exp(),
            RadialPotential::SquareWell { radius } => {
                let inside = match side {
                    Side::Below => r <= radius,
                    Side::Above => r < radius,
                };
                if inside {
                    -1.0
                } else {
                    0.0
                }
            }
            RadialPotential::Morse { alpha, r0 } => {
                let e = (-alpha * (r - r0)).exp();
                e * e - 2.0 * e
            }
            RadialPotential::Yukawa { g } => -(-g * r).exp() / r,
            RadialPotential::LennardJones { sigma } => {
                let s6 = (sigma / r).powi(6);
                4.0 * (s6 * s6 - s6)
            }
        }
    }

    /// `V(r, λ)`.
    pub fn evaluate(&self, r: f64, lambda: f64) -> f64 {
        lambda * self.shape(r)
    }

    /// `V(r, λ) + l(l+1)/(2r²)`.
    pub fn effective_potential(
        &self,
        l: usize,
        r: f64,
        lambda: f64,
    ) -> Result<f64, PotentialError> {
        if r == 0.0 {
            if l > 0 {
                return Err(PotentialError::Singular { l });
            }
            return Ok(self.evaluate(0.0, lambda));
        }
        let centrifugal = (l * (l + 1)) as f64 / (2.0 * r * r);
        Ok(self.evaluate(r, lambda) + centrifugal)
    }

    /// Radii where `V₀` jumps.
    pub fn breakpoints(&self) -> Vec<f64> {
        match *self {
            RadialPotential::SquareWell { radius } => vec![radius],
            _ => Vec::new(),
        }
    }

    /// `lim_{r→0} r V₀(r)`: the strength of a Coulomb-like core, zero for
    /// potentials that are finite at the origin.
    pub fn origin_strength(&self) -> f64 {
        match *self {
            RadialPotential::Yukawa { .. } => -1.0,
            _ => 0.0,
        }
    }

    /// Checks that the potential is negligible at the matching radius for the
    /// largest strength that will be used.
    pub fn check_short_range(
        &self,
        r_end: f64,
        lambda_max: f64,
        threshold: f64,
    ) -> Result<(), PotentialError> {
        let value = self.evaluate(r_end, lambda_max).abs();
        if value <= threshold {
            Ok(())
        } else {
            Err(PotentialError::NotShortRange {
                r_end,
                lambda: lambda_max,
                value,
                threshold,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn gaussian_at_origin() {
        assert_eq!(RadialPotential::gaussian().evaluate(0.0, 25.0), -25.0);
    }

    #[test]
    fn square_well_inside_and_outside() {
        let p = RadialPotential::square_well(1.0);
        assert_eq!(p.evaluate(0.5, 5.0), -5.0);
        assert_eq!(p.evaluate(1.5, 5.0), 0.0);
        assert_eq!(p.shape_from(1.0, Side::Below), -1.0);
        assert_eq!(p.shape_from(1.0, Side::Above), 0.0);
        assert_eq!(p.breakpoints(), vec![1.0]);
    }

    #[test]
    fn yukawa_value() {
        let p = RadialPotential::Yukawa { g: 1.0 };
        assert!((p.evaluate(1.0, 2.0) + 0.735_758_882_342_884_6).abs() < 1e-15);
    }

    #[test]
    fn effective_potential_values() {
        let g = RadialPotential::gaussian();
        assert_eq!(
            g.effective_potential(0, 0.7, 3.0).unwrap(),
            g.evaluate(0.7, 3.0)
        );
        let v = g.effective_potential(3, 1.0, 25.0).unwrap();
        assert!((v - (-25.0 * (-1.0f64).exp() + 6.0)).abs() < 1e-14);
        assert!((v + 3.196_986_029_286_058).abs() < 1e-12);
        let sq = RadialPotential::square_well(1.0);
        assert_eq!(sq.effective_potential(1, 2.0, 5.0).unwrap(), 0.25);
        assert_eq!(
            sq.effective_potential(2, 0.0, 5.0),
            Err(PotentialError::Singular { l: 2 })
        );
        assert_eq!(sq.effective_potential(0, 0.0, 5.0).unwrap(), -5.0);
    }

    #[test]
    fn short_range_check() {
        let g = RadialPotential::gaussian();
        assert!(g
            .check_short_range(4.8, 188.0, DEFAULT_NEGLIGIBILITY)
            .is_ok());
        assert!(matches!(
            g.check_short_range(2.0, 188.0, DEFAULT_NEGLIGIBILITY),
            Err(PotentialError::NotShortRange { .. })
        ));
        let y = RadialPotential::Yukawa { g: 1.0 };
        assert!(y
            .check_short_range(4.8, 1.0, DEFAULT_NEGLIGIBILITY)
            .is_err());
    }

    #[test]
    fn params_round_trip_and_validation() {
        let mut params = BTreeMap::new();
        params.insert("a".to_string(), 2.0);
        let p = RadialPotential::from_params("square_well", &params).unwrap();
        assert_eq!(p, RadialPotential::square_well(2.0));
        assert_eq!(
            RadialPotential::from_params(p.kind_name(), &p.params()).unwrap(),
            p
        );

        let p = RadialPotential::from_params("morse", &BTreeMap::new()).unwrap();
        assert_eq!(
            p,
            RadialPotential::Morse {
                alpha: 1.0,
                r0: 1.5
            }
        );

        assert!(matches!(
            RadialPotential::from_params("gaussian", &params),
            Err(PotentialError::UnknownParameter { .. })
        ));
        assert!(matches!(
            RadialPotential::from_params("coulomb", &BTreeMap::new()),
            Err(PotentialError::UnknownKind(_))
        ));
        params.insert("a".to_string(), -1.0);
        assert!(matches!(
            RadialPotential::from_params("square_well", &params),
            Err(PotentialError::InvalidParameter { .. })
        ));
    }

    fn any_potential() -> impl Strategy<Value = RadialPotential> {
        prop_oneof![
            (0.5f64..2.0).prop_map(|width| RadialPotential::Gaussian { width }),
            (0.5f64..2.0).prop_map(RadialPotential::square_well),
            (0.5f64..2.0, 0.5f64..2.0).prop_map(|(alpha, r0)| RadialPotential::Morse { alpha, r0 }),
            (0.2f64..3.0).prop_map(|g| RadialPotential::Yukawa { g }),
            (0.5f64..1.5).prop_map(|sigma| RadialPotential::LennardJones { sigma }),
        ]
    }

    proptest! {
        #[test]
        fn strength_is_linear(p in any_potential(), r in 0.01f64..10.0, lambda in -50.0f64..50.0) {
            let one = p.evaluate(r, lambda);
            let two = p.evaluate(r, 2.0 * lambda);
            prop_assert!(one.is_finite());
            prop_assert!((two - 2.0 * one).abs() <= 1e-12 * one.abs().max(1e-300));
        }
    }
}
