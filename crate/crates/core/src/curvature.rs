//! Curvature families, threshold constants, and curvature-weighted integrals.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::radial::{QuadratureRule, RadialField, OMEGA3};
use crate::tail::{TailModel, TailShape};

/// Total Q-curvature of the round four-sphere.
pub const LAMBDA_SPH: f64 = 16.0 * PI * PI;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub sph: f64,
    pub star: f64,
    pub two_star: f64,
    pub p_quarter_sph: f64,
}

pub fn thresholds_for(p: f64) -> Result<Thresholds> {
    if !(p > 0.0) {
        return Err(Error::Domain(format!("power must be positive, got {p}")));
    }
    let star = (4.0 + p) * 2.0 * PI * PI;
    Ok(Thresholds { sph: LAMBDA_SPH, star, two_star: 2.0 * star, p_quarter_sph: 0.25 * p * LAMBDA_SPH })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CurvatureKind {
    #[serde(rename = "one_minus_rp")]
    OneMinusPower,
    #[serde(rename = "one_plus_rp")]
    OnePlusPower,
    Constant,
    RegularizedLambda,
}

/// K(r) for the supported families; `epsilon` multiplies everything by e^{-εr²}.
///
/// * one_minus_rp: 1 − μ r^p
/// * one_plus_rp: 1 + μ r^p
/// * constant: K0
/// * regularized_lambda: λ − μ r^p
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvatureProfile {
    pub kind: CurvatureKind,
    #[serde(default)]
    pub p: f64,
    #[serde(default)]
    pub k0: f64,
    #[serde(default)]
    pub lambda: f64,
    #[serde(default)]
    pub epsilon: f64,
    #[serde(default = "one")]
    pub mu: f64,
}

fn one() -> f64 {
    1.0
}

impl CurvatureProfile {
    pub fn one_minus(p: f64) -> Self {
        Self { kind: CurvatureKind::OneMinusPower, p, k0: 0.0, lambda: 0.0, epsilon: 0.0, mu: 1.0 }
    }

    pub fn one_plus(p: f64) -> Self {
        Self { kind: CurvatureKind::OnePlusPower, ..Self::one_minus(p) }
    }

    pub fn constant(k0: f64) -> Self {
        Self { kind: CurvatureKind::Constant, k0, ..Self::one_minus(0.0) }
    }

    /// (λ − r^p) e^{−r²}.
    pub fn regularized(lambda: f64, p: f64) -> Self {
        Self { kind: CurvatureKind::RegularizedLambda, lambda, epsilon: 1.0, ..Self::one_minus(p) }
    }

    pub fn with_epsilon(self, epsilon: f64) -> Self {
        Self { epsilon, ..self }
    }

    pub fn with_mu(self, mu: f64) -> Self {
        Self { mu, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Domain(m.to_string()));
        if !(self.epsilon >= 0.0) {
            return bad("epsilon must be >= 0");
        }
        match self.kind {
            CurvatureKind::Constant => Ok(()),
            CurvatureKind::RegularizedLambda if !(self.lambda > 0.0) => bad("lambda must be > 0"),
            _ if !(self.p > 0.0) => bad("p must be > 0"),
            _ => Ok(()),
        }
    }

    pub fn eval(&self, r: f64) -> f64 {
        let g = if self.epsilon > 0.0 { (-self.epsilon * r * r).exp() } else { 1.0 };
        let rp = if r == 0.0 { 0.0 } else { r.powf(self.p) };
        g * match self.kind {
            CurvatureKind::OneMinusPower => 1.0 - self.mu * rp,
            CurvatureKind::OnePlusPower => 1.0 + self.mu * rp,
            CurvatureKind::Constant => self.k0,
            CurvatureKind::RegularizedLambda => self.lambda - self.mu * rp,
        }
    }

    /// K as Σ c r^a when there is no Gaussian factor.
    pub fn power_terms(&self) -> Option<Vec<(f64, f64)>> {
        if self.epsilon > 0.0 {
            return None;
        }
        Some(match self.kind {
            CurvatureKind::OneMinusPower => vec![(1.0, 0.0), (-self.mu, self.p)],
            CurvatureKind::OnePlusPower => vec![(1.0, 0.0), (self.mu, self.p)],
            CurvatureKind::Constant => vec![(self.k0, 0.0)],
            CurvatureKind::RegularizedLambda => vec![(self.lambda, 0.0), (-self.mu, self.p)],
        })
    }

    /// Tail shape matching the leading far-field behaviour of K.
    pub fn tail_shape(&self) -> TailShape {
        if self.epsilon > 0.0 {
            return TailShape::Power;
        }
        match self.kind {
            CurvatureKind::OneMinusPower | CurvatureKind::RegularizedLambda => {
                TailShape::Curved { kappa: -self.mu, q: self.p }
            }
            CurvatureKind::OnePlusPower => TailShape::Curved { kappa: self.mu, q: self.p },
            CurvatureKind::Constant => TailShape::Curved { kappa: self.k0, q: 0.0 },
        }
    }

    /// Decay exponent q of the far-field curvature (K ~ r^q).
    pub fn far_power(&self) -> f64 {
        match self.kind {
            CurvatureKind::Constant => 0.0,
            _ => self.p,
        }
    }

    /// Λ* for this profile: the total curvature at which the tail stops being integrable.
    pub fn critical_lambda(&self) -> f64 {
        (4.0 + self.far_power()) * 2.0 * PI * PI
    }

    /// Sign in the Pohozaev identity, where it applies.
    pub fn pohozaev_sign(&self) -> Option<f64> {
        if self.epsilon > 0.0 || self.mu != 1.0 {
            return None;
        }
        match self.kind {
            CurvatureKind::OneMinusPower => Some(-1.0),
            CurvatureKind::OnePlusPower => Some(1.0),
            _ => None,
        }
    }

    /// log r beyond which the Gaussian factor underflows.
    fn gaussian_cutoff(&self) -> f64 {
        0.5 * (745.0 / self.epsilon).ln() + 1.0
    }
}

/// Weight multiplying e^{4u} in a moment.
#[derive(Clone, Copy, Debug)]
pub enum Weight<'a> {
    Curvature(&'a CurvatureProfile),
    Power(f64),
}

impl Weight<'_> {
    fn eval(&self, s: f64) -> f64 {
        match self {
            Weight::Curvature(k) => k.eval(s),
            Weight::Power(a) => {
                if *a == 0.0 {
                    1.0
                } else if s == 0.0 {
                    0.0
                } else {
                    s.powf(*a)
                }
            }
        }
    }
}

/// ∫₀^∞ (log s)^n s^extra weight(s) e^{4u} s³ ds split into grid and tail parts.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Moment {
    pub grid: f64,
    pub tail: f64,
    /// d(tail)/d u(r_max).
    pub tail_slope: f64,
}

impl Moment {
    pub fn total(&self) -> f64 {
        self.grid + self.tail
    }
}

/// Tail part only.
pub fn tail_moment(model: &TailModel, weight: Weight, extra: f64, n: u32) -> Result<(f64, f64)> {
    match weight {
        Weight::Power(a) => model.power_moment(a + extra, n),
        Weight::Curvature(k) => match k.power_terms() {
            Some(terms) => {
                let mut acc = (0.0, 0.0);
                for (c, a) in terms {
                    if c == 0.0 {
                        continue;
                    }
                    let (v, d) = model.power_moment(a + extra, n)?;
                    acc.0 += c * v;
                    acc.1 += c * d;
                }
                Ok(acc)
            }
            None => Ok(model.weighted_moment(|s| k.eval(s) * s.powf(extra), n, k.gaussian_cutoff())),
        },
    }
}

pub(crate) fn exp4(u: &RadialField) -> Result<Vec<f64>> {
    u.values()
        .iter()
        .enumerate()
        .map(|(i, &v)| if 4.0 * v > 700.0 { Err(Error::BlowUp { node: i, value: 4.0 * v }) } else { Ok((4.0 * v).exp()) })
        .collect()
}

pub fn moment(u: &RadialField, quad: &QuadratureRule, weight: Weight, extra: f64, n: u32) -> Result<Moment> {
    let e4 = exp4(u)?;
    let x = quad.grid().nodes();
    let mut grid = 0.0;
    for ((w, &s), e) in quad.weights().iter().zip(x).zip(&e4) {
        if s == 0.0 {
            continue;
        }
        let mut g = weight.eval(s) * e * s * s * s;
        if extra != 0.0 {
            g *= s.powf(extra);
        }
        if n > 0 {
            g *= s.ln().powi(n as i32);
        }
        grid += w * g;
    }
    let (tail, tail_slope) = match u.tail() {
        Some(t) => tail_moment(&t.model(), weight, extra, n)?,
        None => (0.0, 0.0),
    };
    Ok(Moment { grid, tail, tail_slope })
}

/// Λ = ω₃ ∫ K e^{4u} s³ ds. Fields without a tail are integrated on [0, r_max] only.
pub fn total_curvature(u: &RadialField, k: &CurvatureProfile) -> Result<f64> {
    let quad = QuadratureRule::new(u.grid().clone());
    Ok(OMEGA3 * moment(u, &quad, Weight::Curvature(k), 0.0, 0)?.total())
}

/// (∫ e^{4u} dx, ∫ |x|^p e^{4u} dx).
pub fn split_volumes(u: &RadialField, p: f64) -> Result<(f64, f64)> {
    let quad = QuadratureRule::new(u.grid().clone());
    let v0 = moment(u, &quad, Weight::Power(0.0), 0.0, 0)?.total();
    let vp = moment(u, &quad, Weight::Power(p), 0.0, 0)?.total();
    Ok((OMEGA3 * v0, OMEGA3 * vp))
}
