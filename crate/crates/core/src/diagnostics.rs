//! Post-solve characterization: Pohozaev balance, Kelvin inversion,
//! asymptotic fits and blow-up rescaling.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::curvature::{moment, CurvatureProfile, Weight, LAMBDA_SPH};
use crate::error::{Error, Result};
use crate::numerics::lagrange_eval;
use crate::radial::{GridSpec, QuadratureRule, RadialField, RadialGrid, OMEGA3};
use crate::solver::SolutionRecord;
use crate::tail::{LogTail, TailShape};

const EIGHT_PI2: f64 = 8.0 * std::f64::consts::PI * std::f64::consts::PI;

/// Samples of R^{4+p} e^{4u(R)} over the last decade of the grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecayCheck {
    pub samples: Vec<(f64, f64)>,
    pub decreasing: bool,
}

pub fn decay_check(u: &RadialField, p: f64) -> Result<DecayCheck> {
    let r_max = u.grid().r_max();
    let samples = (0..=10)
        .map(|k| {
            let r = r_max * 10f64.powf(-1.0 + 0.1 * k as f64);
            u.eval(r).map(|v| (r, ((4.0 + p) * r.ln() + 4.0 * v).exp()))
        })
        .collect::<Result<Vec<_>>>()?;
    let decreasing = samples.windows(2).all(|w| w[1].1 <= w[0].1 * (1.0 + 1e-12));
    Ok(DecayCheck { samples, decreasing })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PohozaevCheck {
    pub lhs: f64,
    pub rhs: f64,
    /// |lhs − rhs| / Λsph.
    pub residual: f64,
    pub decay: DecayCheck,
    /// False when the profile has no identity of this form or the decay
    /// hypothesis fails on the sampled window.
    pub applicable: bool,
}

/// (Λ/Λsph)(Λ − Λsph) against ±(p/4)∫|x|^p e^{4u}.
pub fn pohozaev_check(rec: &SolutionRecord) -> Result<PohozaevCheck> {
    let prof = &rec.spec.profile;
    let lambda = rec.lambda;
    let lhs = lambda / LAMBDA_SPH * (lambda - LAMBDA_SPH);
    let (sign, p) = match prof.kind {
        crate::curvature::CurvatureKind::Constant => (Some(0.0), 2.0),
        _ => (prof.pohozaev_sign(), prof.p),
    };
    let vp = match rec.vp {
        Some(v) if prof.p == p => v,
        _ => {
            let quad = QuadratureRule::new(rec.u.grid().clone());
            let m = match moment(&rec.u, &quad, Weight::Power(p), 0.0, 0) {
                Ok(m) => m.total(),
                Err(_) => moment(&rec.u.clone().with_tail(None), &quad, Weight::Power(p), 0.0, 0)?.total(),
            };
            OMEGA3 * m
        }
    };
    let rhs = sign.unwrap_or(0.0) * 0.25 * p * prof.mu * vp;
    let decay = decay_check(&rec.u, p)?;
    Ok(PohozaevCheck {
        lhs,
        rhs,
        residual: (lhs - rhs).abs() / LAMBDA_SPH,
        applicable: sign.is_some() && decay.decreasing,
        decay,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KelvinField {
    pub base: RadialField,
    pub alpha: f64,
    /// ũ(ρ) = u(1/ρ) − α log ρ on the reflected grid.
    pub field: RadialField,
    /// Δ²ũ = K(1/ρ) ρ^{−(8−4α)} e^{4ũ}.
    pub curvature_exponent: f64,
}

/// Reflect through r ↦ 1/r. The origin value is the asymptotic constant of u,
/// which exists only when the tail slope is −α.
pub fn kelvin_transform(u: &RadialField, alpha: f64) -> Result<KelvinField> {
    let tail = u.tail().ok_or_else(|| Error::MissingTail("Kelvin transform needs the behavior at infinity".into()))?;
    if (tail.slope + alpha).abs() > 1e-9 * alpha.abs().max(1.0) {
        return Err(Error::Domain(format!(
            "tail slope {} is not −α = {}; the transform is singular at the origin",
            tail.slope, -alpha
        )));
    }
    let origin = tail
        .model()
        .asymptotic_offset()
        .ok_or_else(|| Error::DivergentTail("u + α log r has no finite limit".into()))?;
    let r = u.grid().nodes();
    let n = r.len();
    let mut nodes = Vec::with_capacity(n);
    let mut values = Vec::with_capacity(n);
    nodes.push(0.0);
    values.push(origin);
    for j in (1..n).rev() {
        nodes.push(1.0 / r[j]);
        values.push(u.values()[j] + alpha * r[j].ln());
    }
    let grid = Arc::new(RadialGrid::from_nodes(nodes)?);
    let last = *values.last().unwrap();
    let rho_max = grid.r_max();
    let field = RadialField::new(grid, values, Some(LogTail::matched(-alpha, last, rho_max, TailShape::Power)))?;
    Ok(KelvinField { base: u.clone(), alpha, field, curvature_exponent: 8.0 - 4.0 * alpha })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlopeFit {
    pub sigma: f64,
    pub intercept: f64,
    /// Root-mean-square misfit.
    pub residual: f64,
}

fn linear_fit(xs: &[f64], ys: &[f64]) -> SlopeFit {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sigma = sxy / sxx;
    let intercept = my - sigma * mx;
    let ss: f64 = xs.iter().zip(ys).map(|(x, y)| (y - intercept - sigma * x).powi(2)).sum();
    SlopeFit { sigma, intercept, residual: (ss / n).sqrt() }
}

/// Least-squares fit of u against log r over the last decade of grid nodes.
pub fn asymptotic_slope(u: &RadialField) -> Result<SlopeFit> {
    let r = u.grid().nodes();
    let lo = u.grid().r_max() / 10.0;
    let (xs, ys): (Vec<f64>, Vec<f64>) =
        r.iter().zip(u.values()).filter(|(r, _)| **r >= lo).map(|(r, v)| (r.ln(), *v)).unzip();
    if xs.len() < 2 {
        return Err(Error::InvalidGrid("fewer than two nodes in the last decade".into()));
    }
    Ok(linear_fit(&xs, &ys))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoglogFit {
    pub coefficient: f64,
    /// Coefficient on the upper decade minus the one on the lower decade.
    pub drift: f64,
    pub window: (f64, f64),
}

/// Fit u(r) + (1 + p/4) log r = c log log r + d on log-spaced samples in [lo, hi].
pub fn loglog_fit(u: &RadialField, p: f64, lo: f64, hi: f64) -> Result<LoglogFit> {
    if !(lo > std::f64::consts::E && hi > lo) {
        return Err(Error::Domain(format!("loglog window [{lo}, {hi}] must lie above e")));
    }
    let sample = |a: f64, b: f64| -> Result<f64> {
        let m = 200;
        let mut xs = Vec::with_capacity(m);
        let mut ys = Vec::with_capacity(m);
        for k in 0..m {
            let r = a * (b / a).powf(k as f64 / (m - 1) as f64);
            xs.push(r.ln().ln());
            ys.push(u.eval(r)? + (1.0 + 0.25 * p) * r.ln());
        }
        Ok(linear_fit(&xs, &ys).sigma)
    };
    let mid = (lo * hi).sqrt();
    Ok(LoglogFit { coefficient: sample(lo, hi)?, drift: sample(mid, hi)? - sample(lo, mid)?, window: (lo, hi) })
}

/// Log log coefficient over the two decades ending at max(10⁶, r_max), using the tail past the grid.
pub fn loglog_coefficient(rec: &SolutionRecord) -> Result<LoglogFit> {
    let hi = rec.u.grid().r_max().max(1e6);
    loglog_fit(&rec.u, rec.spec.profile.p, hi / 100.0, hi)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlowupRescale {
    /// r_k = 12 e^{−u(0)}.
    pub r_k: f64,
    /// η(x) = u(r_k x) − u(0) + log 2 on [0, 4].
    pub eta: RadialField,
    /// max_{|x|≤2} |η − log(2/(1+x²))| / max |log(2/(1+x²))|.
    pub deviation: f64,
    /// Multiplier s on r_k minimizing the same deviation.
    pub fitted_scale: f64,
    pub fitted_deviation: f64,
}

fn model_profile(x: f64) -> f64 {
    (2.0 / (1.0 + x * x)).ln()
}

fn shape_deviation(u: &RadialField, scale: f64, xs: &[f64]) -> Result<f64> {
    let u0 = u.value_at_origin();
    let mut num: f64 = 0.0;
    let mut den: f64 = 0.0;
    for &x in xs {
        let m = model_profile(x);
        num = num.max((u.eval(scale * x)? - u0 + std::f64::consts::LN_2 - m).abs());
        den = den.max(m.abs());
    }
    Ok(num / den)
}

pub fn blowup_rescale(rec: &SolutionRecord) -> Result<BlowupRescale> {
    let u = &rec.u;
    let u0 = u.value_at_origin();
    let r_k = 12.0 * (-u0).exp();
    let grid = Arc::new(RadialGrid::graded(&GridSpec { r_min: 1e-6, r_max: 4.0, nodes: 400, linear_nodes: 4 })?);
    let vals = grid.nodes().iter().map(|&x| u.eval(r_k * x).map(|v| v - u0 + std::f64::consts::LN_2)).collect::<Result<Vec<_>>>()?;
    let eta = RadialField::new(grid, vals, None)?;
    let xs: Vec<f64> = (0..=400).map(|k| 2.0 * k as f64 / 400.0).collect();
    let deviation = shape_deviation(u, r_k, &xs)?;

    // coarse log scan, then golden section around the best point
    let dev = |ls: f64| shape_deviation(u, r_k * ls.exp(), &xs).unwrap_or(f64::INFINITY);
    let (lo, hi) = ((0.02f64).ln(), (50f64).ln());
    let m = 60;
    let step = (hi - lo) / m as f64;
    let best = (0..=m).map(|k| lo + step * k as f64).min_by(|a, b| dev(*a).total_cmp(&dev(*b))).unwrap();
    let (mut a, mut b) = (best - step, best + step);
    let g = 0.5 * (5f64.sqrt() - 1.0);
    let mut c = b - g * (b - a);
    let mut d = a + g * (b - a);
    let (mut fc, mut fd) = (dev(c), dev(d));
    while b - a > 1e-7 {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - g * (b - a);
            fc = dev(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + g * (b - a);
            fd = dev(d);
        }
    }
    let ls = 0.5 * (a + b);
    Ok(BlowupRescale { r_k, eta, deviation, fitted_scale: ls.exp(), fitted_deviation: dev(ls) })
}

/// ω₃ ∫₀^δ K e^{4u} s³ ds, interpolating the cumulative grid integral.
pub fn mass_in_ball(u: &RadialField, k: &CurvatureProfile, delta: f64) -> Result<f64> {
    let grid = u.grid();
    if !(delta > 0.0) || delta > grid.r_max() {
        return Err(Error::Domain(format!("ball radius {delta} outside (0, r_max]")));
    }
    let quad = QuadratureRule::new(grid.clone());
    let r = grid.nodes();
    let g: Vec<f64> = r.iter().zip(u.values()).map(|(&s, &v)| k.eval(s) * (4.0 * v).exp() * s * s * s).collect();
    let cum = quad.cumulative(&g);
    let j = grid.locate(delta);
    let lo = j.saturating_sub(1).min(r.len() - 4);
    Ok(OMEGA3 * lagrange_eval(&r[lo..lo + 4], &cum[lo..lo + 4], delta))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub pohozaev_lhs: f64,
    pub pohozaev_rhs: f64,
    pub pohozaev_residual: f64,
    pub pohozaev_applicable: bool,
    pub decay_check: DecayCheck,
    pub slope_fit: Option<SlopeFit>,
    /// −Λ/8π².
    pub slope_target: f64,
    pub loglog_coefficient: Option<LoglogFit>,
    pub blowup: Option<BlowupRescale>,
    pub profile_deviation: Option<f64>,
}

pub fn diagnose(rec: &SolutionRecord) -> Result<DiagnosticsReport> {
    let poho = pohozaev_check(rec)?;
    let slope_fit = asymptotic_slope(&rec.u).ok();
    let at_threshold = (rec.lambda / rec.spec.profile.critical_lambda() - 1.0).abs() < 1e-6;
    let loglog = if at_threshold { loglog_coefficient(rec).ok() } else { None };
    let blowup = if rec.converged { blowup_rescale(rec).ok() } else { None };
    Ok(DiagnosticsReport {
        pohozaev_lhs: poho.lhs,
        pohozaev_rhs: poho.rhs,
        pohozaev_residual: poho.residual,
        pohozaev_applicable: poho.applicable,
        decay_check: poho.decay,
        slope_fit,
        slope_target: -rec.lambda / EIGHT_PI2,
        loglog_coefficient: loglog,
        profile_deviation: blowup.as_ref().map(|b| b.deviation.min(b.fitted_deviation)),
        blowup,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::radial::radial_laplacian;
    use crate::solver::{solve, SolveSpec};

    fn grid(spec: GridSpec) -> Arc<RadialGrid> {
        Arc::new(RadialGrid::graded(&spec).unwrap())
    }

    fn sphere() -> RadialField {
        RadialField::from_fn(grid(GridSpec::default()), |r| (2.0 / (1.0 + r * r)).ln(), None)
            .unwrap()
            .with_matched_tail(-2.0, TailShape::Power)
    }

    #[test]
    fn kelvin_fixes_the_sphere_and_is_an_involution() {
        let u = sphere();
        let k = kelvin_transform(&u, 2.0).unwrap();
        assert_eq!(k.curvature_exponent, 0.0);
        for (r, v) in k.field.grid().nodes().iter().zip(k.field.values()).skip(1) {
            assert!((v - (2.0 / (1.0 + r * r)).ln()).abs() < 1e-12);
        }
        // the power tail gives the limit log 2 at the reflected origin
        assert!((k.field.value_at_origin() - (2.0 / (1.0 + 1e-6f64)).ln()).abs() < 1e-5);
        let back = kelvin_transform(&k.field, 2.0).unwrap();
        for (a, b) in back.field.values().iter().zip(u.values()).skip(1) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn kelvin_of_a_constant() {
        let u = RadialField::constant(grid(GridSpec::default()), 0.7).with_matched_tail(0.0, TailShape::Power);
        let k = kelvin_transform(&u, 0.0).unwrap();
        assert!(k.field.values().iter().all(|v| (v - 0.7).abs() < 1e-15));
        assert!(kelvin_transform(&u.clone().with_tail(None), 0.0).is_err());
    }

    #[test]
    fn slope_of_exact_log_field() {
        let u = RadialField::from_fn(grid(GridSpec::default()), |r| if r > 0.0 { -1.7 * r.ln() + 0.4 } else { 0.0 }, None).unwrap();
        let f = asymptotic_slope(&u).unwrap();
        assert!((f.sigma + 1.7).abs() < 1e-10);
        assert!((f.intercept - 0.4).abs() < 1e-9);
    }

    #[test]
    fn loglog_on_synthetic_fields() {
        let p = 2.0;
        let g = grid(GridSpec { r_min: 1e-3, r_max: 1e7, nodes: 800, linear_nodes: 4 });
        let with = RadialField::from_fn(g.clone(), |r| if r > 3.0 { -1.5 * r.ln() - 0.5 * r.ln().ln() } else { 0.0 }, None).unwrap();
        let fit = loglog_fit(&with, p, 1e4, 1e6).unwrap();
        assert!((fit.coefficient + 0.5).abs() < 1e-6, "{fit:?}");
        let without = RadialField::from_fn(g, |r| if r > 3.0 { -1.5 * r.ln() + 0.2 } else { 0.0 }, None).unwrap();
        assert!(loglog_fit(&without, p, 1e4, 1e6).unwrap().coefficient.abs() < 1e-6);
    }

    #[test]
    fn spherical_rescale_matches_after_fit() {
        let u = sphere();
        let rec_like = |u: RadialField| {
            let mut spec = SolveSpec::origin(CurvatureProfile::constant(6.0), 2f64.ln());
            spec.grid = GridSpec::default();
            let mut rec = solve(&spec, Some(&u)).unwrap();
            rec.u = u;
            rec
        };
        let b = blowup_rescale(&rec_like(u)).unwrap();
        // with u(0) = log 2 the unit bubble has scale 1, so the fitted multiplier is 1/r_k
        assert!((b.fitted_scale * b.r_k - 1.0).abs() < 1e-4, "{b:?}");
        assert!(b.fitted_deviation < 1e-6);
    }

    #[test]
    fn mass_in_ball_of_sphere() {
        // ω₃ ∫₀^δ 96 s³/(1+s²)⁴ ds in closed form
        let u = sphere();
        let k = CurvatureProfile::constant(6.0);
        for d in [0.1f64, 1.0, 3.0] {
            let exact = 16.0 * std::f64::consts::PI.powi(2) * (1.0 - (1.0 + 3.0 * d * d) / (1.0 + d * d).powi(3));
            let m = mass_in_ball(&u, &k, d).unwrap();
            assert!((m / exact - 1.0).abs() < 1e-5, "{d}: {m} vs {exact}");
        }
    }

    #[test]
    fn pohozaev_on_a_window_record() {
        let spec = SolveSpec::lambda(CurvatureProfile::one_minus(2.0), 140.0);
        let rec = solve(&spec, None).unwrap();
        let pc = pohozaev_check(&rec).unwrap();
        assert!(pc.applicable);
        assert!(pc.residual <= 0.01, "{pc:?}");
        assert!(pc.lhs < 0.0);
        let fit = asymptotic_slope(&rec.u).unwrap();
        assert!((fit.sigma / (-140.0 / EIGHT_PI2) - 1.0).abs() < 0.02, "{fit:?}");
    }

    #[test]
    fn kelvin_of_a_solution_solves_the_transformed_equation() {
        let spec = SolveSpec::lambda(CurvatureProfile::one_minus(2.0), 140.0);
        let rec = solve(&spec, None).unwrap();
        let alpha = rec.lambda / EIGHT_PI2;
        let kf = kelvin_transform(&rec.u, alpha).unwrap();
        let bi = radial_laplacian(&radial_laplacian(&kf.field).unwrap()).unwrap();
        let g = kf.field.grid().nodes();
        let mut err: f64 = 0.0;
        let mut scale: f64 = 0.0;
        for i in 0..g.len() {
            if (0.5..2.0).contains(&g[i]) {
                let rho = g[i];
                let rhs = spec.profile.eval(1.0 / rho) * rho.powf(-kf.curvature_exponent) * (4.0 * kf.field.values()[i]).exp();
                err = err.max((bi.values()[i] - rhs).abs());
                scale = scale.max(rhs.abs());
            }
        }
        assert!(err / scale < 1e-3, "{err} / {scale}");
    }
}
