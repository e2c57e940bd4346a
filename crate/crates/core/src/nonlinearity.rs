//! The nonlinearity `f` of `∂ₜp = Δf(p)` and the scalar functions built from it.
//!
//! | symbol | definition | method |
//! |---|---|---|
//! | `h(u)` | `∫₁ᵘ f′(s)/s ds` | [`Nonlinearity::h`] |
//! | `Φ(u)` | `∫₀ᵘ h(s) ds` | [`Nonlinearity::entropy_density`] |
//! | `φ(u)` | `Φ(u)/u`, the pressure | [`Nonlinearity::pressure`] |
//! | `σ(u)` | `√(2f(u)/u)` | [`Nonlinearity::diffusion_coeff`] |
//!
//! Porous-medium (`f(u) = uᵐ`) and linear (`f(u) = u`) nonlinearities use
//! closed forms. Custom nonlinearities fall back to adaptive quadrature.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quadrature;

pub type ScalarFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// A user-supplied `f` together with its derivative.
#[derive(Clone)]
pub struct CustomFn {
    pub f: ScalarFn,
    pub f_prime: ScalarFn,
}

impl fmt::Debug for CustomFn {
    fn fmt(&self, fmt: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt.write_str("CustomFn")
    }
}

#[derive(Debug, Clone)]
pub enum NonlinearityKind {
    /// `f(u) = uᵐ`, `m > 1`.
    PorousMedium { m: f64 },
    /// `f(u) = u`, the heat equation.
    Linear,
    Custom(CustomFn),
}

/// Serializable description of the closed-form kinds, as found in
/// experiment configs: `{ "kind": "porous_medium", "m": 2.0 }`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum NonlinearitySpec {
    PorousMedium { m: f64 },
    Linear,
}

#[derive(Debug, Clone)]
pub struct Nonlinearity {
    kind: NonlinearityKind,
    quadrature_tol: f64,
}

pub const DEFAULT_QUADRATURE_TOL: f64 = 1e-10;

#[inline]
fn pw(u: f64, e: f64) -> f64 {
    if e.fract() == 0.0 && e.abs() <= 16.0 {
        u.powi(e as i32)
    } else {
        u.powf(e)
    }
}

fn require_positive(u: f64, what: &str) -> Result<()> {
    if u > 0.0 && u.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain(format!("{what} requires u > 0, got {u}")))
    }
}

impl Nonlinearity {
    pub fn porous_medium(m: f64) -> Result<Self> {
        if !(m > 1.0 && m.is_finite()) {
            return Err(Error::Input(format!("porous medium exponent must exceed 1, got {m}")));
        }
        Ok(Self { kind: NonlinearityKind::PorousMedium { m }, quadrature_tol: DEFAULT_QUADRATURE_TOL })
    }

    pub fn linear() -> Self {
        Self { kind: NonlinearityKind::Linear, quadrature_tol: DEFAULT_QUADRATURE_TOL }
    }

    pub fn custom<F, G>(f: F, f_prime: G) -> Self
    where
        F: Fn(f64) -> f64 + Send + Sync + 'static,
        G: Fn(f64) -> f64 + Send + Sync + 'static,
    {
        Self {
            kind: NonlinearityKind::Custom(CustomFn { f: Arc::new(f), f_prime: Arc::new(f_prime) }),
            quadrature_tol: DEFAULT_QUADRATURE_TOL,
        }
    }

    pub fn from_spec(spec: NonlinearitySpec) -> Result<Self> {
        match spec {
            NonlinearitySpec::PorousMedium { m } => Self::porous_medium(m),
            NonlinearitySpec::Linear => Ok(Self::linear()),
        }
    }

    pub fn spec(&self) -> Option<NonlinearitySpec> {
        match self.kind {
            NonlinearityKind::PorousMedium { m } => Some(NonlinearitySpec::PorousMedium { m }),
            NonlinearityKind::Linear => Some(NonlinearitySpec::Linear),
            NonlinearityKind::Custom(_) => None,
        }
    }

    pub fn with_quadrature_tol(mut self, tol: f64) -> Self {
        self.quadrature_tol = tol;
        self
    }

    pub fn kind(&self) -> &NonlinearityKind {
        &self.kind
    }

    pub fn quadrature_tol(&self) -> f64 {
        self.quadrature_tol
    }

    pub fn has_closed_form(&self) -> bool {
        !matches!(self.kind, NonlinearityKind::Custom(_))
    }

    #[inline]
    pub fn f(&self, u: f64) -> f64 {
        match &self.kind {
            NonlinearityKind::PorousMedium { m } => pw(u, *m),
            NonlinearityKind::Linear => u,
            NonlinearityKind::Custom(c) => (c.f)(u),
        }
    }

    #[inline]
    pub fn f_prime(&self, u: f64) -> f64 {
        match &self.kind {
            NonlinearityKind::PorousMedium { m } => m * pw(u, m - 1.0),
            NonlinearityKind::Linear => 1.0,
            NonlinearityKind::Custom(c) => (c.f_prime)(u),
        }
    }

    /// `h(u) = ∫₁ᵘ f′(s)/s ds`.
    pub fn h(&self, u: f64) -> Result<f64> {
        require_positive(u, "h")?;
        match &self.kind {
            NonlinearityKind::PorousMedium { m } => Ok(m / (m - 1.0) * (pw(u, m - 1.0) - 1.0)),
            NonlinearityKind::Linear => Ok(u.ln()),
            NonlinearityKind::Custom(c) => {
                let fp = c.f_prime.clone();
                quadrature::integrate(move |s| fp(s) / s, 1.0, u, self.quadrature_tol)
            }
        }
    }

    /// `Φ(u) = ∫₀ᵘ h(s) ds`, the entropy density.
    pub fn entropy_density(&self, u: f64) -> Result<f64> {
        if !(u >= 0.0 && u.is_finite()) {
            return Err(Error::Domain(format!("Φ requires u ≥ 0, got {u}")));
        }
        match &self.kind {
            NonlinearityKind::PorousMedium { m } => Ok((pw(u, *m) - m * u) / (m - 1.0)),
            NonlinearityKind::Linear => Ok(if u == 0.0 { 0.0 } else { u * u.ln() - u }),
            NonlinearityKind::Custom(_) => {
                if u == 0.0 {
                    return Ok(0.0);
                }
                let inner = Self { kind: self.kind.clone(), quadrature_tol: 1e-2 * self.quadrature_tol };
                let failed = std::cell::Cell::new(None);
                let value = quadrature::integrate(
                    |s| match inner.h(s) {
                        Ok(v) => v,
                        Err(e) => {
                            failed.set(Some(e.to_string()));
                            f64::NAN
                        }
                    },
                    0.0,
                    u,
                    self.quadrature_tol,
                );
                if let Some(msg) = failed.take() {
                    return Err(Error::Domain(format!("inner quadrature of h failed: {msg}")));
                }
                value
            }
        }
    }

    /// `Φ″(u) = h′(u) = f′(u)/u`.
    pub fn entropy_density_second(&self, u: f64) -> Result<f64> {
        require_positive(u, "Φ″")?;
        Ok(self.f_prime(u) / u)
    }

    /// The pressure `φ(u) = Φ(u)/u`.
    pub fn pressure(&self, u: f64) -> Result<f64> {
        require_positive(u, "pressure")?;
        match &self.kind {
            NonlinearityKind::PorousMedium { m } => Ok((pw(u, m - 1.0) - m) / (m - 1.0)),
            NonlinearityKind::Linear => Ok(u.ln() - 1.0),
            NonlinearityKind::Custom(_) => Ok(self.entropy_density(u)? / u),
        }
    }

    /// `φ′(u) = f(u)/u²`, from `u h(u) − Φ(u) = f(u) − f(0)`.
    pub fn pressure_prime(&self, u: f64) -> Result<f64> {
        require_positive(u, "φ′")?;
        match &self.kind {
            NonlinearityKind::PorousMedium { m } => Ok(pw(u, m - 2.0)),
            NonlinearityKind::Linear => Ok(1.0 / u),
            NonlinearityKind::Custom(_) => Ok((self.f(u) - self.f(0.0)) / (u * u)),
        }
    }

    /// `φ″(u) = f′(u)/u² − 2f(u)/u³`.
    pub fn pressure_second(&self, u: f64) -> Result<f64> {
        require_positive(u, "φ″")?;
        match &self.kind {
            NonlinearityKind::PorousMedium { m } => Ok((m - 2.0) * pw(u, m - 3.0)),
            NonlinearityKind::Linear => Ok(-1.0 / (u * u)),
            NonlinearityKind::Custom(_) => {
                Ok(self.f_prime(u) / (u * u) - 2.0 * (self.f(u) - self.f(0.0)) / (u * u * u))
            }
        }
    }

    /// `√(2f(u)/u)`, the particle diffusion coefficient. The porous-medium
    /// kind extends continuously by 0 at `u = 0`.
    pub fn diffusion_coeff(&self, u: f64) -> Result<f64> {
        if u == 0.0 && matches!(self.kind, NonlinearityKind::PorousMedium { .. }) {
            return Ok(0.0);
        }
        require_positive(u, "diffusion coefficient")?;
        Ok((2.0 * self.f(u) / u).sqrt())
    }

    /// Samples `[lo, hi]` and checks that `f` is strictly increasing and `f′`
    /// nondecreasing there. Only a sampled check, not a proof.
    pub fn check_assumptions(&self, lo: f64, hi: f64, samples: usize) -> Result<()> {
        if !(lo < hi) || samples < 2 {
            return Err(Error::Input(format!("bad sampling range [{lo}, {hi}] with {samples} samples")));
        }
        let step = (hi - lo) / (samples - 1) as f64;
        let mut prev: Option<(f64, f64, f64)> = None;
        for k in 0..samples {
            let u = lo + k as f64 * step;
            let (fu, fpu) = (self.f(u), self.f_prime(u));
            if u > 0.0 && fpu <= 0.0 {
                return Err(Error::Input(format!("f′({u}) = {fpu} is not positive")));
            }
            if let Some((pu, pf, pfp)) = prev {
                if fu <= pf {
                    return Err(Error::Input(format!("f is not strictly increasing on [{pu}, {u}]")));
                }
                if fpu < pfp - 1e-12 * pfp.abs().max(1.0) {
                    return Err(Error::Input(format!("f′ decreases on [{pu}, {u}]")));
                }
            }
            prev = Some((u, fu, fpu));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pm(m: f64) -> Nonlinearity {
        Nonlinearity::porous_medium(m).unwrap()
    }

    #[test]
    fn h_examples() {
        assert_eq!(pm(2.0).h(1.0).unwrap(), 0.0);
        assert!((pm(2.0).h(3.0).unwrap() - 4.0).abs() < 1e-14);
        let cubic = Nonlinearity::custom(|u| u * u * u, |u| 3.0 * u * u);
        assert!((cubic.h(2.0).unwrap() - 4.5).abs() < 1e-10);
    }

    #[test]
    fn h_rejects_nonpositive() {
        assert!(matches!(pm(2.0).h(0.0), Err(Error::Domain(_))));
        assert!(matches!(Nonlinearity::linear().h(-1.0), Err(Error::Domain(_))));
    }

    #[test]
    fn entropy_density_examples() {
        assert_eq!(pm(2.0).entropy_density(0.0).unwrap(), 0.0);
        assert!((pm(2.0).entropy_density(1.0).unwrap() + 1.0).abs() < 1e-15);
        assert!((pm(3.0).entropy_density(2.0).unwrap() - 1.0).abs() < 1e-14);
        assert!(pm(2.0).entropy_density(-0.1).is_err());
    }

    #[test]
    fn custom_entropy_density_by_quadrature() {
        // f = u³: h = 1.5(u² − 1), Φ = u³/2 − 1.5u
        let cubic = Nonlinearity::custom(|u| u * u * u, |u| 3.0 * u * u);
        let v = cubic.entropy_density(2.0).unwrap();
        assert!((v - 1.0).abs() < 1e-9, "{v}");
        // f = u as a custom kind: Φ(u) = u ln u − u through the log singularity of h
        let lin = Nonlinearity::custom(|u| u, |_| 1.0);
        let v = lin.entropy_density(2.0).unwrap();
        assert!((v - (2.0 * 2f64.ln() - 2.0)).abs() < 1e-8, "{v}");
    }

    #[test]
    fn pressure_examples() {
        assert!((pm(2.0).pressure(1.0).unwrap() + 1.0).abs() < 1e-15);
        assert!(pm(2.0).pressure(2.0).unwrap().abs() < 1e-15);
        assert!((Nonlinearity::linear().pressure(1.0).unwrap() + 1.0).abs() < 1e-15);
        assert!(pm(2.0).pressure(0.0).is_err());
    }

    #[test]
    fn diffusion_coeff_examples() {
        assert!((pm(2.0).diffusion_coeff(2.0).unwrap() - 2.0).abs() < 1e-15);
        assert!((pm(2.0).diffusion_coeff(0.5).unwrap() - 1.0).abs() < 1e-15);
        assert!((Nonlinearity::linear().diffusion_coeff(7.0).unwrap() - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(pm(2.0).diffusion_coeff(0.0).unwrap(), 0.0);
        assert!(Nonlinearity::linear().diffusion_coeff(0.0).is_err());
    }

    #[test]
    fn rejects_bad_exponent() {
        assert!(Nonlinearity::porous_medium(1.0).is_err());
        assert!(Nonlinearity::porous_medium(f64::NAN).is_err());
    }

    #[test]
    fn spec_round_trip() {
        let json = r#"{ "kind": "porous_medium", "m": 2.0 }"#;
        let spec: NonlinearitySpec = serde_json::from_str(json).unwrap();
        assert_eq!(spec, NonlinearitySpec::PorousMedium { m: 2.0 });
        let nl = Nonlinearity::from_spec(spec).unwrap();
        assert_eq!(nl.spec(), Some(spec));
        let lin: NonlinearitySpec = serde_json::from_str(r#"{ "kind": "linear" }"#).unwrap();
        assert_eq!(lin, NonlinearitySpec::Linear);
    }

    #[test]
    fn assumption_check() {
        assert!(pm(2.0).check_assumptions(0.0, 5.0, 200).is_ok());
        let concave = Nonlinearity::custom(|u: f64| u.sqrt(), |u: f64| 0.5 / u.sqrt());
        assert!(concave.check_assumptions(0.1, 5.0, 50).is_err());
        let decreasing = Nonlinearity::custom(|u| -u, |_| -1.0);
        assert!(decreasing.check_assumptions(0.1, 1.0, 10).is_err());
    }
}
