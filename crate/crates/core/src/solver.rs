//! Bordered Newton solver for the discretized integral equation
//! u_i = Σ_j A_ij K_j e^{4u_j} + tail_i(u_N) + c.

use std::f64::consts::PI;
use std::sync::Arc;

use faer::prelude::SpSolver;
use faer::Mat;
use serde::{Deserialize, Serialize};

use crate::curvature::{
    moment, split_volumes, tail_moment, thresholds_for, CurvatureKind, CurvatureProfile, Thresholds, Weight,
    LAMBDA_SPH,
};
use crate::error::{Error, Result};
use crate::kernel::{assemble_operator, Gauge, KernelOperator};
use crate::numerics::ln_gamma;
use crate::radial::{scale_field, GridSpec, QuadratureRule, RadialField, RadialGrid, OMEGA3};
use crate::tail::{LogTail, TailShape};

const EIGHT_PI2: f64 = 8.0 * PI * PI;
const THETA_MIN: f64 = 1.0 / 64.0;
const MAX_OUTER: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Constraint {
    PrescribedLambda { target: f64 },
    PrescribedOrigin { rho: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolveSpec {
    pub profile: CurvatureProfile,
    pub constraint: Constraint,
    #[serde(default)]
    pub grid: GridSpec,
    /// Initial step length of the damped Newton iteration.
    #[serde(default = "default_damping")]
    pub damping: f64,
    #[serde(default = "default_tol")]
    pub newton_tol: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    #[serde(default)]
    pub expect_failure: bool,
    /// Kernel gauge; chosen from the constraint when absent.
    #[serde(default)]
    pub gauge: Option<Gauge>,
    /// Intermediate targets (Λ or ρ) visited before the final one.
    #[serde(default)]
    pub continuation: Vec<f64>,
    /// Multiplier on the concentration of the default initial guess.
    #[serde(default = "default_spread")]
    pub guess_spread: f64,
}

fn default_damping() -> f64 {
    1.0
}
fn default_tol() -> f64 {
    1e-9
}
fn default_max_iter() -> usize {
    60
}
fn default_spread() -> f64 {
    1.0
}

impl SolveSpec {
    pub fn new(profile: CurvatureProfile, constraint: Constraint) -> Self {
        Self {
            profile,
            constraint,
            grid: GridSpec::default(),
            damping: default_damping(),
            newton_tol: default_tol(),
            max_iter: default_max_iter(),
            expect_failure: false,
            gauge: None,
            continuation: Vec::new(),
            guess_spread: default_spread(),
        }
    }

    pub fn lambda(profile: CurvatureProfile, target: f64) -> Self {
        Self::new(profile, Constraint::PrescribedLambda { target })
    }

    pub fn origin(profile: CurvatureProfile, rho: f64) -> Self {
        Self::new(profile, Constraint::PrescribedOrigin { rho })
    }

    pub fn with_grid(mut self, grid: GridSpec) -> Self {
        self.grid = grid;
        self
    }

    pub fn expecting_failure(mut self) -> Self {
        self.expect_failure = true;
        self
    }

    fn with_param(&self, v: f64) -> Self {
        let mut s = self.clone();
        s.constraint = match s.constraint {
            Constraint::PrescribedLambda { .. } => Constraint::PrescribedLambda { target: v },
            Constraint::PrescribedOrigin { .. } => Constraint::PrescribedOrigin { rho: v },
        };
        s.continuation.clear();
        s
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowCheck {
    Inside,
    Boundary,
    Outside,
    Undetermined,
}

/// Where a prescribed total curvature or origin value sits relative to the known
/// existence and nonexistence ranges for the profile.
pub fn window_check(profile: &CurvatureProfile, constraint: &Constraint) -> WindowCheck {
    use WindowCheck::*;
    let p = profile.p;
    let sph = LAMBDA_SPH;
    match (profile.kind, *constraint) {
        (CurvatureKind::OnePlusPower, Constraint::PrescribedOrigin { .. }) => Inside,
        (CurvatureKind::Constant, Constraint::PrescribedOrigin { .. }) if profile.k0 > 0.0 => Inside,
        (CurvatureKind::Constant, Constraint::PrescribedLambda { target }) if profile.k0 > 0.0 && profile.epsilon == 0.0 => {
            if (target / sph - 1.0).abs() < 1e-9 {
                Inside
            } else {
                Outside
            }
        }
        (CurvatureKind::OneMinusPower, Constraint::PrescribedLambda { target }) if profile.epsilon == 0.0 => {
            let star = profile.critical_lambda();
            if p >= 4.0 || target >= sph {
                Outside
            } else if (target / star - 1.0).abs() <= 1e-6 {
                Boundary
            } else if target > star {
                Inside
            } else {
                Outside
            }
        }
        (CurvatureKind::OnePlusPower, Constraint::PrescribedLambda { target }) if profile.epsilon == 0.0 => {
            let t = thresholds_for(p).unwrap();
            let lower = sph.max(t.star);
            if target <= lower || target >= t.two_star {
                Outside
            } else if p <= 4.0 || target > t.p_quarter_sph {
                Inside
            } else {
                Undetermined
            }
        }
        (CurvatureKind::RegularizedLambda, Constraint::PrescribedLambda { target }) if profile.epsilon == 1.0 => {
            if target > 0.0 && target < sph {
                Inside
            } else {
                Undetermined
            }
        }
        _ => Undetermined,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SolveMode {
    Normal,
    /// Nonexistence probing; `requested` is false when the window check forced it.
    ExpectFailure { requested: bool },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TailMode {
    /// Analytic tail closure beyond r_max.
    Closure,
    /// Integrals stop at r_max; used when the prescribed slope has no integrable tail.
    Truncated,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationLog {
    pub iteration: usize,
    pub residual: f64,
    pub step: f64,
    pub slope: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolutionRecord {
    pub spec: SolveSpec,
    pub u: RadialField,
    pub c: f64,
    /// Achieved total curvature.
    pub lambda: f64,
    pub v0: Option<f64>,
    pub vp: Option<f64>,
    pub laplacian_origin: Option<f64>,
    pub iterations: usize,
    pub residual_norm: f64,
    pub converged: bool,
    pub window_check: WindowCheck,
    pub mode: SolveMode,
    pub gauge: Gauge,
    pub tail_mode: TailMode,
    /// Non-increasing u, checked for one_minus_rp profiles.
    pub monotone: Option<bool>,
    pub thresholds: Option<Thresholds>,
    pub history: Vec<IterationLog>,
    pub provenance: Vec<String>,
    pub failure: Option<String>,
}

impl SolutionRecord {
    pub fn u0(&self) -> f64 {
        self.u.value_at_origin()
    }

    pub fn profile(&self) -> &CurvatureProfile {
        &self.spec.profile
    }
}

/// The assembled discrete problem for one spec.
pub struct Problem {
    pub spec: SolveSpec,
    pub grid: Arc<RadialGrid>,
    pub quad: QuadratureRule,
    pub op: KernelOperator,
    pub gauge: Gauge,
    pub tail_mode: TailMode,
    shape: TailShape,
    k: Vec<f64>,
    mw: Vec<f64>,
}

/// Residual vector of length N+1 and the pieces needed for the Jacobian.
pub struct Evaluation {
    pub residual: Vec<f64>,
    pub lambda: f64,
    f: Vec<f64>,
    /// d tail_i / d u_R is r-dependent only through r_i²; store the two coefficients.
    dtail_const: f64,
    dtail_r2: f64,
    dmass_tail: f64,
}

fn max_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn sq_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

impl Problem {
    pub fn new(spec: &SolveSpec) -> Result<Self> {
        spec.profile.validate()?;
        let grid = Arc::new(RadialGrid::graded(&spec.grid)?);
        Self::on_grid(spec, grid)
    }

    pub fn on_grid(spec: &SolveSpec, grid: Arc<RadialGrid>) -> Result<Self> {
        let quad = QuadratureRule::new(grid.clone());
        let shape = spec.profile.tail_shape();
        let mut tail_mode = TailMode::Closure;
        let mut default_gauge = Gauge::Absolute;
        match spec.constraint {
            Constraint::PrescribedLambda { target } => {
                let delta = (target - spec.profile.critical_lambda()) / (2.0 * PI * PI);
                if matches!(shape, TailShape::Curved { kappa, .. } if kappa < 0.0) {
                    if delta < -1e-9 {
                        if !spec.expect_failure && window_check(&spec.profile, &spec.constraint) != WindowCheck::Outside {
                            return Err(Error::DivergentTail(format!("prescribed total curvature {target} has no integrable tail")));
                        }
                        tail_mode = TailMode::Truncated;
                    } else if delta.abs() <= 1e-9 {
                        // the log-weighted tail moment diverges at the critical slope
                        default_gauge = Gauge::OriginNormalized;
                    }
                }
            }
            Constraint::PrescribedOrigin { .. } => default_gauge = Gauge::OriginNormalized,
        }
        let gauge = spec.gauge.unwrap_or(default_gauge);
        let op = assemble_operator(&quad, gauge);
        let k = grid.nodes().iter().map(|&r| spec.profile.eval(r)).collect();
        let mw = quad.moment_weights();
        Ok(Self { spec: spec.clone(), grid, quad, op, gauge, tail_mode, shape, k, mw })
    }

    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grid.is_empty()
    }

    fn tail_for(&self, u_r: f64, slope: f64) -> Option<LogTail> {
        match self.tail_mode {
            TailMode::Closure => Some(LogTail::matched(slope, u_r, self.grid.r_max(), self.shape)),
            TailMode::Truncated => None,
        }
    }

    /// Residual of the unknown vector (u_0..u_{N-1}, c) for a given tail slope.
    pub fn evaluate(&self, x: &[f64], slope: f64) -> Result<Evaluation> {
        let n = self.len();
        let mut f = vec![0.0; n];
        for j in 0..n {
            let e = 4.0 * x[j];
            if e > 700.0 || !e.is_finite() {
                return Err(Error::BlowUp { node: j, value: e });
            }
            f[j] = self.k[j] * e.exp();
        }
        let af = self.op.apply(&f);
        let weight = Weight::Curvature(&self.spec.profile);
        let (mut m0, mut mm2, mut mlog) = ((0.0, 0.0), (0.0, 0.0), (0.0, 0.0));
        if let Some(t) = self.tail_for(x[n - 1], slope) {
            let model = t.model();
            m0 = tail_moment(&model, weight, 0.0, 0)?;
            mm2 = tail_moment(&model, weight, -2.0, 0)?;
            if self.gauge == Gauge::Absolute {
                mlog = tail_moment(&model, weight, 0.0, 1)?;
            }
        }
        let c = x[n];
        let r = self.grid.nodes();
        let mut residual = vec![0.0; n + 1];
        for i in 0..n {
            let tail = 0.25 * (-mlog.0 - 0.25 * r[i] * r[i] * mm2.0);
            residual[i] = x[i] - af[i] - tail - c;
        }
        let grid_mass: f64 = self.mw.iter().zip(&f).map(|(w, f)| w * f).sum();
        let lambda = OMEGA3 * (grid_mass + m0.0);
        residual[n] = match self.spec.constraint {
            Constraint::PrescribedLambda { target } => (lambda - target) / LAMBDA_SPH,
            Constraint::PrescribedOrigin { rho } => match self.gauge {
                Gauge::OriginNormalized => c - rho,
                Gauge::Absolute => x[0] - rho,
            },
        };
        Ok(Evaluation {
            residual,
            lambda,
            f,
            dtail_const: -0.25 * mlog.1,
            dtail_r2: -0.0625 * mm2.1,
            dmass_tail: OMEGA3 * m0.1,
        })
    }

    pub fn jacobian(&self, ev: &Evaluation) -> Mat<f64> {
        let n = self.len();
        let r = self.grid.nodes();
        let mut j = Mat::<f64>::zeros(n + 1, n + 1);
        for i in 0..n {
            let row = self.op.row(i);
            for k in 0..n {
                j.write(i, k, -4.0 * row[k] * ev.f[k]);
            }
            j.write(i, i, j.read(i, i) + 1.0);
            let dt = ev.dtail_const + ev.dtail_r2 * r[i] * r[i];
            j.write(i, n - 1, j.read(i, n - 1) - dt);
            j.write(i, n, -1.0);
        }
        match self.spec.constraint {
            Constraint::PrescribedLambda { .. } => {
                for k in 0..n {
                    j.write(n, k, OMEGA3 * self.mw[k] * 4.0 * ev.f[k] / LAMBDA_SPH);
                }
                j.write(n, n - 1, j.read(n, n - 1) + ev.dmass_tail / LAMBDA_SPH);
            }
            Constraint::PrescribedOrigin { .. } => match self.gauge {
                Gauge::OriginNormalized => j.write(n, n, 1.0),
                Gauge::Absolute => j.write(n, 0, 1.0),
            },
        }
        j
    }

    /// d(u, c)/dΛ along the solution branch of a prescribed-Λ problem, with the
    /// tail slope −Λ/8π² moving with Λ.
    pub fn lambda_tangent(&self, x: &[f64]) -> Result<Vec<f64>> {
        let target = match self.spec.constraint {
            Constraint::PrescribedLambda { target } => target,
            Constraint::PrescribedOrigin { .. } => {
                return Err(Error::Domain("tangent is defined for prescribed total curvature".into()))
            }
        };
        let slope = -target / EIGHT_PI2;
        let ev = self.evaluate(x, slope)?;
        let h = 1e-6;
        let fp = self.evaluate(x, slope + h)?.residual;
        let fm = self.evaluate(x, slope - h)?.residual;
        let n1 = x.len();
        let mut rhs = Mat::<f64>::from_fn(n1, 1, |i, _| (fp[i] - fm[i]) / (2.0 * h) / EIGHT_PI2);
        rhs.write(n1 - 1, 0, rhs.read(n1 - 1, 0) + 1.0 / LAMBDA_SPH);
        let t = self.jacobian(&ev).partial_piv_lu().solve(&rhs);
        let t: Vec<f64> = (0..n1).map(|i| t.read(i, 0)).collect();
        if t.iter().all(|v| v.is_finite()) {
            Ok(t)
        } else {
            Err(Error::Domain("singular Jacobian on the branch".into()))
        }
    }

    /// Damped Newton at fixed tail slope.
    fn newton(&self, mut x: Vec<f64>, slope: f64, log: &mut Vec<IterationLog>, iters: &mut usize) -> (Vec<f64>, Option<Evaluation>, Option<String>) {
        let mut ev = match self.evaluate(&x, slope) {
            Ok(e) => e,
            Err(e) => return (x, None, Some(format!("initial iterate rejected: {e}"))),
        };
        let n1 = x.len();
        loop {
            let res = max_norm(&ev.residual);
            if res <= self.spec.newton_tol {
                return (x, Some(ev), None);
            }
            if *iters >= self.spec.max_iter {
                return (x, Some(ev), Some(format!("no convergence in {} iterations (residual {res:e})", self.spec.max_iter)));
            }
            *iters += 1;
            let jac = self.jacobian(&ev);
            let rhs = Mat::<f64>::from_fn(n1, 1, |i, _| -ev.residual[i]);
            let dx = jac.partial_piv_lu().solve(&rhs);
            if (0..n1).any(|i| !dx.read(i, 0).is_finite()) {
                return (x, Some(ev), Some("singular Newton system".into()));
            }
            let phi0 = sq_norm(&ev.residual);
            let mut theta = self.spec.damping.clamp(THETA_MIN, 1.0);
            let accepted = loop {
                let trial: Vec<f64> = (0..n1).map(|i| x[i] + theta * dx.read(i, 0)).collect();
                match self.evaluate(&trial, slope) {
                    Ok(e) if sq_norm(&e.residual) <= (1.0 - 1e-4 * theta) * phi0 || theta <= THETA_MIN => {
                        break Some((trial, e));
                    }
                    Err(_) if theta <= THETA_MIN => break None,
                    _ => theta *= 0.5,
                }
            };
            match accepted {
                Some((xt, e)) => {
                    x = xt;
                    ev = e;
                    log.push(IterationLog { iteration: *iters, residual: max_norm(&ev.residual), step: theta, slope });
                }
                None => return (x, Some(ev), Some("exponential overflow along every damped step (blow-up)".into())),
            }
        }
    }
}

/// F(u, c) = u − A[K e^{4u}] − tail − c at every node of u's grid. The tail slope is taken
/// from u's tail if present, else from the achieved total curvature.
pub fn residual(u: &RadialField, c: f64, spec: &SolveSpec) -> Result<RadialField> {
    let problem = Problem::on_grid(spec, u.grid().clone())?;
    let slope = match u.tail() {
        Some(t) => t.slope,
        None => {
            let quad = &problem.quad;
            -OMEGA3 * moment(u, quad, Weight::Curvature(&spec.profile), 0.0, 0)?.total() / EIGHT_PI2
        }
    };
    let mut x = u.values().to_vec();
    x.push(c);
    let ev = problem.evaluate(&x, slope)?;
    let n = u.values().len();
    RadialField::new(u.grid().clone(), ev.residual[..n].to_vec(), None)
}

fn beta_fn(a: f64, b: f64) -> f64 {
    (ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b)).exp()
}

/// Spherical-profile initial guess log(2λ/(1+λ²r²)) + shift.
pub fn initial_guess(spec: &SolveSpec, grid: &Arc<RadialGrid>) -> Result<RadialField> {
    let prof = &spec.profile;
    let sph = |lam: f64, shift: f64| {
        RadialField::from_fn(grid.clone(), move |r| (2.0 * lam / (1.0 + lam * lam * r * r)).ln() + shift, None)
    };
    match spec.constraint {
        Constraint::PrescribedLambda { target } => {
            if !(target > 0.0) {
                return Err(Error::Domain(format!("target total curvature must be positive, got {target}")));
            }
            let mut lam = 1.0;
            let p = prof.p;
            if prof.kind == CurvatureKind::OneMinusPower && p < 4.0 && target < LAMBDA_SPH {
                // volumes predicted by the Pohozaev identity for a near-spherical profile
                let v0 = target + 4.0 * target / (p * LAMBDA_SPH) * (LAMBDA_SPH - target);
                let vp = v0 - target;
                let e4a = v0 / (LAMBDA_SPH / 6.0);
                let unit_vp = 0.5 * 32.0 * PI * PI * beta_fn(2.0 + 0.5 * p, 2.0 - 0.5 * p);
                lam = (e4a * unit_vp / vp).powf(1.0 / p) / prof.mu.powf(1.0 / p);
            }
            let quad = QuadratureRule::new(grid.clone());
            let mass = |lam: f64| -> Result<f64> { Ok(OMEGA3 * moment(&sph(lam, 0.0)?, &quad, Weight::Curvature(prof), 0.0, 0)?.total()) };
            let mut found = false;
            for _ in 0..40 {
                if mass(lam)? > 0.0 {
                    found = true;
                    break;
                }
                lam *= 2.0;
            }
            if !found {
                return Err(Error::Domain("no positive-mass spherical guess for this profile".into()));
            }
            // spread after the search so distinct spreads stay distinct guesses;
            // the 1.5 walk cannot land back on the doubling sequence
            lam *= spec.guess_spread;
            for _ in 0..80 {
                let m = mass(lam)?;
                if m > 0.0 {
                    return sph(lam, 0.25 * (target / m).ln());
                }
                lam *= 1.5;
            }
            Err(Error::Domain("no positive-mass spherical guess for this profile".into()))
        }
        Constraint::PrescribedOrigin { rho } => {
            let lam = match prof.kind {
                CurvatureKind::Constant if prof.k0 > 0.0 => 0.5 * (rho - 0.25 * (6.0 / prof.k0).ln()).exp(),
                CurvatureKind::OnePlusPower => {
                    let bubble = 0.5 * (rho - 0.25 * 6f64.ln()).exp();
                    bubble.max((4.0 * rho / (4.0 + prof.p)).exp())
                }
                _ => 1.0,
            } * spec.guess_spread;
            sph(lam, rho - (2.0 * lam).ln())
        }
    }
}

fn initial_slope(spec: &SolveSpec, guess_lambda: f64) -> f64 {
    match spec.constraint {
        Constraint::PrescribedLambda { target } => -target / EIGHT_PI2,
        Constraint::PrescribedOrigin { .. } => match spec.profile.kind {
            CurvatureKind::OnePlusPower if spec.profile.epsilon == 0.0 => {
                let t = thresholds_for(spec.profile.p).unwrap();
                let lam = guess_lambda.clamp(LAMBDA_SPH.max(t.star) * 1.001, t.two_star * 0.999);
                -lam / EIGHT_PI2
            }
            _ => -guess_lambda.max(LAMBDA_SPH * 0.5) / EIGHT_PI2,
        },
    }
}

/// Solve one spec, optionally from a supplied initial field (resampled if needed).
pub fn solve(spec: &SolveSpec, initial_guess_field: Option<&RadialField>) -> Result<SolutionRecord> {
    if !spec.continuation.is_empty() {
        let mut prev: Option<SolutionRecord> = None;
        let mut provenance = Vec::new();
        for &v in &spec.continuation {
            let step = spec.with_param(v);
            let guess = prev.as_ref().map(|r| &r.u).or(initial_guess_field);
            let rec = solve(&step, guess)?;
            provenance.push(format!("continuation step at {v}: converged={}", rec.converged));
            if rec.converged {
                prev = Some(rec);
            }
        }
        let last = spec.with_param(match spec.constraint {
            Constraint::PrescribedLambda { target } => target,
            Constraint::PrescribedOrigin { rho } => rho,
        });
        let mut rec = solve(&last, prev.as_ref().map(|r| &r.u).or(initial_guess_field))?;
        rec.spec.continuation = spec.continuation.clone();
        provenance.append(&mut rec.provenance);
        rec.provenance = provenance;
        return Ok(rec);
    }
    let problem = Problem::new(spec)?;
    solve_problem(&problem, initial_guess_field)
}

pub fn solve_problem(problem: &Problem, initial_guess_field: Option<&RadialField>) -> Result<SolutionRecord> {
    solve_from(problem, initial_guess_field, None)
}

/// As [`solve_problem`], optionally also seeding the additive constant.
pub fn solve_from(problem: &Problem, initial_guess_field: Option<&RadialField>, c_guess: Option<f64>) -> Result<SolutionRecord> {
    let spec = &problem.spec;
    let grid = &problem.grid;
    let n = grid.len();
    let mut provenance = Vec::new();
    let guess = match initial_guess_field {
        Some(g) => {
            provenance.push("warm start from supplied field".to_string());
            if g.grid().nodes() == grid.nodes() {
                g.clone()
            } else {
                let vals = grid.nodes().iter().map(|&r| g.eval(r)).collect::<Result<Vec<_>>>()?;
                RadialField::new(grid.clone(), vals, None)?
            }
        }
        None => {
            provenance.push(format!("spherical initial guess (spread {})", spec.guess_spread));
            initial_guess(spec, grid)?
        }
    };
    let mut x: Vec<f64> = guess.values().to_vec();
    let guess_lambda = OMEGA3 * moment(&guess, &problem.quad, Weight::Curvature(&spec.profile), 0.0, 0)?.total();
    // constant chosen so the origin row holds for the guess
    let x0 = {
        let ev0 = problem.evaluate(&{
            let mut y = x.clone();
            y.push(0.0);
            y
        }, initial_slope(spec, guess_lambda));
        match ev0 {
            Ok(e) => e.residual[0],
            Err(_) => x[0],
        }
    };
    x.push(match (spec.constraint, problem.gauge, c_guess) {
        (Constraint::PrescribedOrigin { rho }, Gauge::OriginNormalized, _) => rho,
        (_, _, Some(c)) => c,
        _ => x0,
    });

    let window = window_check(&spec.profile, &spec.constraint);
    let mode = if spec.expect_failure {
        SolveMode::ExpectFailure { requested: true }
    } else if window == WindowCheck::Outside {
        provenance.push("outside the known existence window: running in expect-failure mode".into());
        SolveMode::ExpectFailure { requested: false }
    } else {
        SolveMode::Normal
    };
    if problem.tail_mode == TailMode::Truncated {
        provenance.push("tail truncated at r_max: prescribed slope has no integrable tail".into());
    }

    let mut slope = initial_slope(spec, guess_lambda);
    let mut history = Vec::new();
    let mut iterations = 0;
    let mut failure = None;
    let mut last_eval = None;
    for outer in 0..MAX_OUTER {
        let (xn, ev, fail) = problem.newton(x, slope, &mut history, &mut iterations);
        x = xn;
        last_eval = ev;
        if fail.is_some() {
            failure = fail;
            break;
        }
        let lam = last_eval.as_ref().unwrap().lambda;
        let new_slope = -lam / EIGHT_PI2;
        if problem.tail_mode == TailMode::Truncated || (new_slope - slope).abs() <= 1e-10 {
            break;
        }
        provenance.push(format!("tail slope refit {slope:.12} -> {new_slope:.12} (outer pass {})", outer + 1));
        slope = new_slope;
        if outer == MAX_OUTER - 1 {
            // one more evaluation so the stored residual reflects the final slope
            if let Ok(e) = problem.evaluate(&x, slope) {
                if max_norm(&e.residual) > spec.newton_tol {
                    failure = Some("tail slope fixed point did not settle".into());
                }
                last_eval = Some(e);
            }
        }
    }

    let residual_norm = last_eval.as_ref().map(|e| max_norm(&e.residual)).unwrap_or(f64::INFINITY);
    let converged = failure.is_none() && residual_norm <= spec.newton_tol;
    let tail = problem.tail_for(x[n - 1], slope);
    let u = RadialField::new(grid.clone(), x[..n].to_vec(), tail)?;
    let lambda = last_eval.as_ref().map(|e| e.lambda).unwrap_or(f64::NAN);
    let p = spec.profile.p;
    let (v0, vp) = match split_volumes(&u, if p > 0.0 { p } else { 2.0 }) {
        Ok((a, b)) => (Some(a), Some(b)),
        Err(_) => (None, None),
    };
    let laplacian_origin = laplacian_of(&u, &spec.profile).ok();
    let monotone = (spec.profile.kind == CurvatureKind::OneMinusPower)
        .then(|| u.values().windows(2).all(|w| w[1] <= w[0] + 1e-9));
    Ok(SolutionRecord {
        spec: spec.clone(),
        c: x[n],
        lambda: if lambda.is_finite() { lambda } else { 0.0 },
        v0,
        vp,
        laplacian_origin,
        iterations,
        residual_norm: if residual_norm.is_finite() { residual_norm } else { f64::MAX },
        converged,
        window_check: window,
        mode,
        gauge: problem.gauge,
        tail_mode: problem.tail_mode,
        monotone,
        thresholds: if p > 0.0 { thresholds_for(p).ok() } else { None },
        history,
        provenance,
        failure,
        u,
    })
}

fn laplacian_of(u: &RadialField, k: &CurvatureProfile) -> Result<f64> {
    let quad = QuadratureRule::new(u.grid().clone());
    Ok(-0.5 * moment(u, &quad, Weight::Curvature(k), -2.0, 0)?.total())
}

/// Δu(0) = −½ ∫₀^∞ s K(s) e^{4u(s)} ds.
pub fn laplacian_at_origin(rec: &SolutionRecord) -> Result<f64> {
    laplacian_of(&rec.u, &rec.spec.profile)
}

/// Maps a solution for K = 1 ± μ|x|^p to one for K = 1 ± |x|^p via
/// u(x) = η(ρx) + log ρ with μρ^p = 1, i.e. ρ = μ^{−1/p}.
pub fn rescale_to_unit_coefficient(eta: &RadialField, mu: f64, p: f64) -> Result<RadialField> {
    if !(mu > 0.0 && p > 0.0) {
        return Err(Error::Domain(format!("need μ > 0 and p > 0, got μ={mu}, p={p}")));
    }
    scale_field(eta, mu.powf(-1.0 / p))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContinuationParam {
    /// Prescribed total curvature.
    Lambda,
    /// Prescribed origin value.
    Rho,
    /// Gaussian regularizer ε of the profile.
    Epsilon,
    /// Scale λ of the regularized profile (λ − r^p)e^{−r²}.
    Scale,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PathPoint {
    pub param: f64,
    pub record: SolutionRecord,
    /// r_λ with λ r_λ⁴ e^{4u(0)} = 1 (scale paths only).
    pub r_scale: Option<f64>,
    /// η(x) = u(r_λ x) − u(0) (scale paths only).
    pub eta: Option<RadialField>,
}

fn spec_at(base: &SolveSpec, param: ContinuationParam, v: f64) -> SolveSpec {
    let mut s = base.clone();
    s.continuation.clear();
    match param {
        ContinuationParam::Lambda => s.constraint = Constraint::PrescribedLambda { target: v },
        ContinuationParam::Rho => s.constraint = Constraint::PrescribedOrigin { rho: v },
        ContinuationParam::Epsilon => s.profile.epsilon = v,
        ContinuationParam::Scale => s.profile.lambda = v,
    }
    s
}

struct Branch {
    param: f64,
    record: SolutionRecord,
    problem: Problem,
}

fn warm_start(prev: &Branch, param: ContinuationParam, next: &Problem, to: f64) -> Result<(RadialField, Option<f64>)> {
    let rec = &prev.record;
    let same_gauge = prev.problem.gauge == next.gauge && prev.problem.tail_mode == next.tail_mode;
    match param {
        ContinuationParam::Lambda if same_gauge => {
            let mut x = rec.u.values().to_vec();
            x.push(rec.c);
            let t = prev.problem.lambda_tangent(&x)?;
            let d = to - prev.param;
            let n = x.len() - 1;
            let vals = (0..n).map(|i| x[i] + d * t[i]).collect();
            Ok((RadialField::new(rec.u.grid().clone(), vals, None)?, Some(x[n] + d * t[n])))
        }
        // the far field must carry the new slope −Λ/8π² or the tail mass is badly off
        ContinuationParam::Lambda => {
            let ds = -(to - prev.param) / EIGHT_PI2;
            let g = rec.u.grid().clone();
            let vals = g.nodes().iter().zip(rec.u.values()).map(|(r, v)| v + 0.5 * ds * (1.0 + r * r).ln()).collect();
            Ok((RadialField::new(g, vals, None)?, None))
        }
        // near the bubble regime a shift in u(0) is a conformal rescaling
        ContinuationParam::Rho => Ok((scale_field(&rec.u, (to - prev.param).exp())?, None)),
        _ => Ok((rec.u.clone(), same_gauge.then_some(rec.c))),
    }
}

fn path_step(base: &SolveSpec, param: ContinuationParam, prev: Option<&Branch>, v: f64) -> Result<Branch> {
    let problem = Problem::new(&spec_at(base, param, v))?;
    let record = match prev {
        Some(b) => {
            let (g, c) = warm_start(b, param, &problem, v)?;
            let mut r = solve_from(&problem, Some(&g), c)?;
            r.provenance.push(format!("branch continued from parameter {}", b.param));
            r
        }
        None => solve_problem(&problem, None)?,
    };
    Ok(Branch { param: v, record, problem })
}

/// Solve along a schedule, warm-starting each step from the last converged one.
/// A failed step is retried once through the midpoint before being reported.
pub fn continuation_path(base: &SolveSpec, param: ContinuationParam, schedule: &[f64]) -> Result<Vec<PathPoint>> {
    let mut out: Vec<PathPoint> = Vec::new();
    let mut prev: Option<Branch> = None;
    for &v in schedule {
        let mut step = path_step(base, param, prev.as_ref(), v)?;
        if !step.record.converged {
            if let Some(b) = prev.as_ref() {
                let mid = 0.5 * (b.param + v);
                let mid_step = path_step(base, param, Some(b), mid)?;
                if mid_step.record.converged {
                    let mut retry = path_step(base, param, Some(&mid_step), v)?;
                    retry.record.provenance.push(format!("schedule bisected at {mid}"));
                    step = retry;
                }
            }
        }
        let rec = &step.record;
        let (r_scale, eta) = if param == ContinuationParam::Scale && rec.converged {
            let u0 = rec.u0();
            let rl = (v * (4.0 * u0).exp()).powf(-0.25);
            let scaled = scale_field(&rec.u, rl)?;
            let shift = rl.ln() + u0;
            let vals = scaled.values().iter().map(|x| x - shift).collect();
            (Some(rl), Some(RadialField::new(scaled.grid().clone(), vals, None)?))
        } else {
            (None, None)
        };
        let ok = rec.converged;
        out.push(PathPoint { param: v, record: rec.clone(), r_scale, eta });
        if !ok {
            break;
        }
        prev = Some(step);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_grid() -> GridSpec {
        GridSpec { r_min: 1e-4, r_max: 1e3, nodes: 400, linear_nodes: 4 }
    }

    #[test]
    fn jacobian_matches_central_differences() {
        for (spec, slope) in [
            (SolveSpec::lambda(CurvatureProfile::one_minus(2.0), 140.0), -140.0 / EIGHT_PI2),
            (SolveSpec::origin(CurvatureProfile::one_plus(2.0), 0.0), -2.5),
        ] {
            let spec = spec.with_grid(small_grid());
            let pb = Problem::new(&spec).unwrap();
            let g = initial_guess(&spec, &pb.grid).unwrap();
            let mut x = g.values().to_vec();
            x.push(0.3);
            let ev = pb.evaluate(&x, slope).unwrap();
            let j = pb.jacobian(&ev);
            let n1 = x.len();
            for &col in &[0usize, 5, 150, 398, 399, 400] {
                let h = 1e-6;
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[col] += h;
                xm[col] -= h;
                let fp = pb.evaluate(&xp, slope).unwrap().residual;
                let fm = pb.evaluate(&xm, slope).unwrap().residual;
                let mut num = 0.0f64;
                let mut den = 0.0f64;
                for i in 0..n1 {
                    let fd = (fp[i] - fm[i]) / (2.0 * h);
                    num = num.max((fd - j.read(i, col)).abs());
                    den = den.max(fd.abs());
                }
                assert!(num <= 1e-6 * den.max(1.0), "column {col}: {num} vs {den}");
            }
        }
    }

    #[test]
    fn window_verdicts() {
        let k = CurvatureProfile::one_minus(2.0);
        let w = |t| window_check(&k, &Constraint::PrescribedLambda { target: t });
        assert_eq!(w(140.0), WindowCheck::Inside);
        assert_eq!(w(160.0), WindowCheck::Outside);
        assert_eq!(w(100.0), WindowCheck::Outside);
        assert_eq!(w(12.0 * PI * PI), WindowCheck::Boundary);
        let k5 = CurvatureProfile::one_minus(5.0);
        assert_eq!(window_check(&k5, &Constraint::PrescribedLambda { target: 150.0 }), WindowCheck::Outside);
        let kp = CurvatureProfile::one_plus(6.0);
        assert_eq!(window_check(&kp, &Constraint::PrescribedLambda { target: 200.0 }), WindowCheck::Undetermined);
        assert_eq!(window_check(&kp, &Constraint::PrescribedLambda { target: 300.0 }), WindowCheck::Inside);
    }

    #[test]
    fn guess_matches_target_mass() {
        let spec = SolveSpec::lambda(CurvatureProfile::one_minus(2.0), 140.0).with_grid(small_grid());
        let pb = Problem::new(&spec).unwrap();
        let g = initial_guess(&spec, &pb.grid).unwrap();
        let m = OMEGA3 * moment(&g, &pb.quad, Weight::Curvature(&spec.profile), 0.0, 0).unwrap().total();
        assert!((m / 140.0 - 1.0).abs() < 0.2);
    }
}

#[cfg(test)]
mod solve_tests {
    use super::*;
    use crate::radial::radial_laplacian;
    use crate::tail::TailShape;

    fn grid() -> GridSpec {
        GridSpec { r_min: 1e-4, r_max: 1e3, nodes: 600, linear_nodes: 6 }
    }

    fn sphere(g: &Arc<RadialGrid>) -> RadialField {
        RadialField::from_fn(g.clone(), |r| (2.0 / (1.0 + r * r)).ln(), None)
            .unwrap()
            .with_matched_tail(-2.0, TailShape::Power)
    }

    #[test]
    fn spherical_profile_is_a_discrete_solution() {
        let g = Arc::new(RadialGrid::graded(&GridSpec { nodes: 1200, ..grid() }).unwrap());
        let spec = SolveSpec::lambda(CurvatureProfile::constant(6.0), LAMBDA_SPH).with_grid(grid());
        let f = residual(&sphere(&g), 2f64.ln(), &spec).unwrap();
        let err = g.nodes().iter().zip(f.values()).filter(|(r, _)| **r <= 10.0).fold(0.0f64, |m, (_, v)| m.max(v.abs()));
        assert!(err <= 1e-4, "{err}");
    }

    #[test]
    fn spherical_laplacian_at_origin() {
        let spec = SolveSpec::origin(CurvatureProfile::constant(6.0), 2f64.ln()).with_grid(grid());
        let rec = solve(&spec, None).unwrap();
        assert!(rec.converged);
        assert!((laplacian_at_origin(&rec).unwrap() + 8.0).abs() < 1e-3);
        let g = rec.u.grid().clone();
        assert!(rec.u.max_abs_diff(&sphere(&g)) < 1e-3);
    }

    #[test]
    fn negative_window_point_converges_with_lemma_shape() {
        let spec = SolveSpec::lambda(CurvatureProfile::one_minus(2.0), 140.0).with_grid(grid());
        let rec = solve(&spec, None).unwrap();
        assert!(rec.converged, "{:?}", rec.failure);
        assert!(rec.residual_norm <= spec.newton_tol);
        assert_eq!(rec.window_check, WindowCheck::Inside);
        assert!((rec.lambda - 140.0).abs() < 1e-6);
        assert_eq!(rec.monotone, Some(true));
        assert!(rec.laplacian_origin.unwrap() < 0.0);
        let w = radial_laplacian(&rec.u).unwrap();
        let r = rec.u.grid().nodes();
        for i in 0..r.len() - 1 {
            assert!(w.values()[i] < 0.0);
            // below r ~ 1e-2 the O(r²) growth is under the difference-stencil roundoff
            if (1e-2..50.0).contains(&r[i]) {
                assert!(w.values()[i + 1] >= w.values()[i] - 1e-7 * w.values()[i].abs(), "Δu decreases at r={}", r[i]);
            }
        }
    }

    #[test]
    fn biharmonic_residual_is_second_order() {
        let mut errs = Vec::new();
        for nodes in [400, 800] {
            let spec = SolveSpec::lambda(CurvatureProfile::one_minus(2.0), 140.0)
                .with_grid(GridSpec { r_min: 1e-3, r_max: 1e3, nodes, linear_nodes: 6 });
            let rec = solve(&spec, None).unwrap();
            assert!(rec.converged);
            let bi = radial_laplacian(&radial_laplacian(&rec.u).unwrap()).unwrap();
            let r = rec.u.grid().nodes();
            let (mut e, mut scale) = (0.0f64, 0.0f64);
            for i in 0..r.len() {
                if (0.1..=10.0).contains(&r[i]) {
                    let rhs = spec.profile.eval(r[i]) * (4.0 * rec.u.values()[i]).exp();
                    e = e.max((bi.values()[i] - rhs).abs());
                    scale = scale.max(rhs.abs());
                }
            }
            errs.push(e / scale);
        }
        assert!(errs[1] < 1e-3, "{errs:?}");
        assert!(errs[0] / errs[1] > 3.0, "{errs:?}");
    }

    #[test]
    fn gauges_agree_on_a_shared_solution() {
        let spec = SolveSpec::lambda(CurvatureProfile::one_minus(2.0), 140.0).with_grid(grid());
        let abs = solve(&spec, None).unwrap();
        assert_eq!(abs.gauge, Gauge::Absolute);
        let ospec = SolveSpec::origin(CurvatureProfile::one_minus(2.0), abs.u0()).with_grid(grid());
        let org = solve(&ospec, Some(&abs.u)).unwrap();
        assert_eq!(org.gauge, Gauge::OriginNormalized);
        assert!(org.converged);
        assert!(abs.u.max_abs_diff(&org.u) < 1e-7, "{}", abs.u.max_abs_diff(&org.u));
        assert!((org.lambda - 140.0).abs() < 1e-5);
    }

    #[test]
    fn positive_origin_value_lands_in_window() {
        let spec = SolveSpec::origin(CurvatureProfile::one_plus(2.0), 0.0).with_grid(grid());
        let rec = solve(&spec, None).unwrap();
        assert!(rec.converged);
        assert_eq!(rec.c, 0.0);
        let t = thresholds_for(2.0).unwrap();
        assert!(rec.lambda > t.sph && rec.lambda < t.two_star, "{}", rec.lambda);
    }

    #[test]
    fn beyond_sphere_is_flagged_and_fails() {
        let spec = SolveSpec::lambda(CurvatureProfile::one_minus(2.0), 160.0).with_grid(grid());
        let rec = solve(&spec, None).unwrap();
        assert_eq!(rec.window_check, WindowCheck::Outside);
        assert_eq!(rec.mode, SolveMode::ExpectFailure { requested: false });
    }

    #[test]
    fn scale_path_concentrates() {
        let base = SolveSpec::lambda(CurvatureProfile::regularized(1.0, 2.0), 140.0).with_grid(grid());
        let path = continuation_path(&base, ContinuationParam::Scale, &[1.0, 0.3, 0.1, 0.03]).unwrap();
        assert_eq!(path.len(), 4);
        let rs: Vec<f64> = path.iter().map(|p| p.r_scale.unwrap()).collect();
        assert!(path.iter().all(|p| p.record.converged));
        assert!(rs.windows(2).all(|w| w[1] < w[0]), "{rs:?}");
        let eta = path[3].eta.as_ref().unwrap();
        assert!(eta.value_at_origin().abs() < 1e-12);
    }

    #[test]
    fn epsilon_path_stays_below_twice_critical() {
        let base = SolveSpec::origin(CurvatureProfile::one_plus(2.0).with_epsilon(1.0), 0.0).with_grid(grid());
        let path = continuation_path(&base, ContinuationParam::Epsilon, &[1.0, 0.1, 0.01, 0.0]).unwrap();
        assert_eq!(path.len(), 4);
        let two_star = thresholds_for(2.0).unwrap().two_star;
        for p in &path {
            assert!(p.record.converged, "eps={} {:?}", p.param, p.record.failure);
            assert!(p.record.lambda < two_star, "eps={} lam={}", p.param, p.record.lambda);
        }
    }

    #[test]
    fn unit_coefficient_rescaling_is_covariant() {
        let mu = 2.0;
        let spec_mu = SolveSpec::lambda(CurvatureProfile::one_minus(2.0).with_mu(mu), 140.0).with_grid(grid());
        let eta = solve(&spec_mu, None).unwrap();
        assert!(eta.converged, "{:?}", eta.failure);
        let u = rescale_to_unit_coefficient(&eta.u, mu, 2.0).unwrap();
        let direct = solve(&SolveSpec::lambda(CurvatureProfile::one_minus(2.0), 140.0).with_grid(grid()), None).unwrap();
        let r = u.grid().nodes();
        let reach = r.iter().position(|&x| x > 100.0).unwrap();
        let dev = (0..reach).fold(0.0f64, |m, i| m.max((u.values()[i] - direct.u.values()[i]).abs()));
        assert!(dev < 1e-5, "{dev}");
        assert!(rescale_to_unit_coefficient(&eta.u, -1.0, 2.0).is_err());
    }

    #[test]
    fn lambda_ramp_raises_origin_value() {
        let base = SolveSpec::lambda(CurvatureProfile::one_minus(2.0), 120.0).with_grid(grid());
        let path = continuation_path(&base, ContinuationParam::Lambda, &[120.0, 130.0, 140.0, 150.0, 155.0]).unwrap();
        let u0: Vec<f64> = path.iter().map(|p| p.record.u0()).collect();
        assert!(path.iter().all(|p| p.record.converged));
        assert!(u0.windows(2).all(|w| w[1] > w[0]), "{u0:?}");
    }
}
