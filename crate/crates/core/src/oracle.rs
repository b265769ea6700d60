//! Shooting from the origin: integrate the radial ODE system
//! u'' = w − 3u'/r, w'' = K e^{4u} − 3w'/r and classify how the trajectory ends.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::curvature::CurvatureProfile;
use crate::error::{Error, Result};
use crate::radial::{RadialField, OMEGA3};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminalClass {
    NormalDecay,
    QuadraticCollapse,
    BlowUp,
    Inconclusive,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShootOptions {
    pub rtol: f64,
    pub atol: f64,
    pub max_steps: usize,
    /// w below −collapse_level over the last decade counts as quadratic collapse.
    pub collapse_level: f64,
    /// |r²w| bound at exit for normal decay.
    pub decay_bound: f64,
}

impl Default for ShootOptions {
    fn default() -> Self {
        Self { rtol: 1e-11, atol: 1e-13, max_steps: 200_000, collapse_level: 1e-2, decay_bound: 1e3 }
    }
}

/// Accepted samples of the state. `lambda` is ω₃∫₀^r K e^{4u} s³ ds and `mass`
/// is ω₃∫₀^r (1+s^p) e^{4u} s³ ds.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub r: Vec<f64>,
    pub u: Vec<f64>,
    pub du: Vec<f64>,
    pub w: Vec<f64>,
    pub dw: Vec<f64>,
    pub lambda: Vec<f64>,
    pub mass: Vec<f64>,
}

impl Trajectory {
    fn push(&mut self, r: f64, y: &[f64; 6]) {
        self.r.push(r);
        self.u.push(y[0]);
        self.du.push(y[1]);
        self.w.push(y[2]);
        self.dw.push(y[3]);
        self.lambda.push(y[4]);
        self.mass.push(y[5]);
    }

    pub fn len(&self) -> usize {
        self.r.len()
    }

    pub fn is_empty(&self) -> bool {
        self.r.is_empty()
    }

    pub fn end(&self) -> f64 {
        *self.r.last().unwrap_or(&0.0)
    }

    /// Cubic Hermite interpolation of u using u'.
    pub fn u_at(&self, x: f64) -> Option<f64> {
        if self.r.is_empty() || x < 0.0 || x > self.end() {
            return None;
        }
        let k = self.r.partition_point(|&v| v <= x).clamp(1, self.r.len() - 1);
        let (r0, r1) = (self.r[k - 1], self.r[k]);
        let h = r1 - r0;
        if h == 0.0 {
            return Some(self.u[k]);
        }
        let t = (x - r0) / h;
        let (t2, t3) = (t * t, t * t * t);
        Some(
            (2.0 * t3 - 3.0 * t2 + 1.0) * self.u[k - 1]
                + (t3 - 2.0 * t2 + t) * h * self.du[k - 1]
                + (-2.0 * t3 + 3.0 * t2) * self.u[k]
                + (t3 - t2) * h * self.du[k],
        )
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "r,u,du,w,dw")?;
        for i in 0..self.r.len() {
            writeln!(out, "{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}", self.r[i], self.u[i], self.du[i], self.w[i], self.dw[i])?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShootState {
    pub a: f64,
    pub b: f64,
    pub profile: CurvatureProfile,
    pub r_end: f64,
    pub trajectory: Trajectory,
    pub terminal_class: TerminalClass,
    /// Radius where integration stopped (r_end unless an early exit happened).
    pub exit_radius: f64,
    pub steps: usize,
    pub note: Option<String>,
}

const C: [f64; 7] = [0.0, 0.2, 0.3, 0.8, 8.0 / 9.0, 1.0, 1.0];
const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [0.2, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
const E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

struct Rhs<'a> {
    k: &'a CurvatureProfile,
    p: f64,
}

impl Rhs<'_> {
    fn eval(&self, r: f64, y: &[f64; 6]) -> Option<[f64; 6]> {
        let e = 4.0 * y[0];
        if !(e <= 700.0) {
            return None;
        }
        let g = e.exp();
        let r3 = r * r * r;
        Some([
            y[1],
            y[2] - 3.0 * y[1] / r,
            y[3],
            self.k.eval(r) * g - 3.0 * y[3] / r,
            OMEGA3 * self.k.eval(r) * g * r3,
            OMEGA3 * (1.0 + r.powf(self.p)) * g * r3,
        ])
    }
}

fn start_radius(a: f64, b: f64, k0: f64) -> f64 {
    let mut scale: f64 = 1.0;
    if b != 0.0 {
        scale = scale.min(1.0 / b.abs().sqrt());
    }
    let src = k0.abs() * (4.0 * a).exp();
    if src > 0.0 {
        scale = scale.min(src.powf(-0.25));
    }
    1e-4 * scale
}

/// Integrate from the origin with u(0)=a, Δu(0)=b out to `r_end`.
pub fn shoot(a: f64, b: f64, k: &CurvatureProfile, r_end: f64) -> Result<ShootState> {
    shoot_with(a, b, k, r_end, &ShootOptions::default())
}

pub fn shoot_with(a: f64, b: f64, k: &CurvatureProfile, r_end: f64, opts: &ShootOptions) -> Result<ShootState> {
    if !(r_end > 0.0) || !a.is_finite() || !b.is_finite() {
        return Err(Error::Domain(format!("shoot needs finite (a, b) and r_end > 0, got ({a}, {b}, {r_end})")));
    }
    k.validate()?;
    let p = if k.p > 0.0 { k.p } else { 2.0 };
    let rhs = Rhs { k, p };
    let k0 = k.eval(0.0);
    let s0 = k0 * (4.0 * a).exp();
    let mut traj = Trajectory::default();
    traj.push(0.0, &[a, 0.0, b, 0.0, 0.0, 0.0]);

    let r1 = start_radius(a, b, k0).min(0.5 * r_end);
    let r1sq = r1 * r1;
    let mut y = [
        a + b * r1sq / 8.0 + s0 * r1sq * r1sq / 192.0,
        b * r1 / 4.0 + s0 * r1sq * r1 / 48.0,
        b + s0 * r1sq / 8.0,
        s0 * r1 / 4.0,
        OMEGA3 * s0 * r1sq * r1sq / 4.0,
        OMEGA3 * (4.0 * a).exp() * r1sq * r1sq / 4.0,
    ];
    let mut r = r1;
    traj.push(r, &y);

    let mut h = 0.1 * r1;
    let mut steps = 0;
    let mut class = None;
    let mut note = None;
    let mut k1 = match rhs.eval(r, &y) {
        Some(v) => v,
        None => return Err(Error::BlowUp { node: 0, value: 4.0 * a }),
    };
    while r < r_end {
        if steps >= opts.max_steps {
            note = Some(format!("step budget {} exhausted at r={r:e}", opts.max_steps));
            class = Some(TerminalClass::Inconclusive);
            break;
        }
        if h < 1e-13 * r {
            if y[0] > 20.0 {
                class = Some(TerminalClass::BlowUp);
                note = Some(format!("step size collapsed near r={r:e} with u={:.3}", y[0]));
            } else {
                class = Some(TerminalClass::Inconclusive);
                note = Some(format!("step size underflow at r={r:e}"));
            }
            break;
        }
        h = h.min(r_end - r);
        let mut ks = [[0.0; 6]; 7];
        ks[0] = k1;
        let mut ok = true;
        let mut y_new = y;
        for s in 1..7 {
            let mut ys = y;
            for (i, v) in ys.iter_mut().enumerate() {
                let mut acc = 0.0;
                for j in 0..s {
                    acc += A[s][j] * ks[j][i];
                }
                *v += h * acc;
            }
            match rhs.eval(r + C[s] * h, &ys) {
                Some(v) => ks[s] = v,
                None => {
                    ok = false;
                    break;
                }
            }
            if s == 6 {
                y_new = ys;
            }
        }
        steps += 1;
        if !ok {
            h *= 0.25;
            continue;
        }
        let mut err = 0.0;
        for i in 0..4 {
            let mut e = 0.0;
            for s in 0..7 {
                e += E[s] * ks[s][i];
            }
            let sc = opts.atol + opts.rtol * y[i].abs().max(y_new[i].abs());
            err += (h * e / sc).powi(2);
        }
        let err = (err / 4.0).sqrt();
        if err.is_finite() && err <= 1.0 {
            r += h;
            y = y_new;
            k1 = ks[6];
            traj.push(r, &y);
            let fac = if err == 0.0 { 5.0 } else { (0.9 * err.powf(-0.2)).clamp(0.2, 5.0) };
            h *= fac;
        } else {
            let fac = if err.is_finite() { (0.9 * err.powf(-0.2)).clamp(0.2, 1.0) } else { 0.2 };
            h *= fac;
        }
    }
    let exit_radius = r;
    let class = class.unwrap_or_else(|| classify(&traj, opts));
    Ok(ShootState { a, b, profile: *k, r_end, trajectory: traj, terminal_class: class, exit_radius, steps, note })
}

fn classify(t: &Trajectory, opts: &ShootOptions) -> TerminalClass {
    let end = t.end();
    let from = t.r.partition_point(|&r| r < end / 10.0);
    let w = &t.w[from..];
    if w.is_empty() {
        return TerminalClass::Inconclusive;
    }
    if w.iter().all(|&v| v < -opts.collapse_level) {
        return TerminalClass::QuadraticCollapse;
    }
    let last = t.w.len() - 1;
    let r2w = end * end * t.w[last];
    let scale = w.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let rising = w.windows(2).all(|p| p[1] >= p[0] - 1e-9 * scale.max(1e-300));
    if r2w.abs() < opts.decay_bound && rising && t.w[last] <= opts.collapse_level {
        TerminalClass::NormalDecay
    } else {
        TerminalClass::Inconclusive
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvatureProbe {
    pub a: f64,
    pub b: f64,
    pub class: TerminalClass,
    /// (r, ω₃∫_{B_r}(1+|x|^p)e^{4u}) at accepted steps.
    pub samples: Vec<(f64, f64)>,
    /// |mass(r_exit) − mass(r_exit/10)|.
    pub tail_increment: f64,
}

/// Partial integrals of (1+|x|^p) e^{4u} along a shooting trajectory.
pub fn finite_total_curvature_probe(a: f64, b: f64, k: &CurvatureProfile, r_end: f64) -> Result<CurvatureProbe> {
    let st = shoot(a, b, k, r_end)?;
    let t = &st.trajectory;
    let samples: Vec<(f64, f64)> = t.r.iter().copied().zip(t.mass.iter().copied()).collect();
    let end = t.end();
    let from = t.r.partition_point(|&r| r < end / 10.0).min(t.len() - 1);
    let tail_increment = (t.mass[t.len() - 1] - t.mass[from]).abs();
    Ok(CurvatureProbe { a, b, class: st.terminal_class, samples, tail_increment })
}

/// max |u_ode − u_field| over grid nodes of `field` in [0, r_hi].
pub fn agreement(state: &ShootState, field: &RadialField, r_hi: f64) -> Result<f64> {
    let mut m: f64 = 0.0;
    for (r, v) in field.grid().nodes().iter().zip(field.values()) {
        if *r > r_hi {
            break;
        }
        let u = state
            .trajectory
            .u_at(*r)
            .ok_or_else(|| Error::Domain(format!("trajectory ends at {} before r={r}", state.trajectory.end())))?;
        m = m.max((u - v).abs());
    }
    Ok(m)
}


#[cfg(test)]
mod crosscheck {
    use super::*;
    use crate::radial::GridSpec;
    use crate::solver::{solve, SolveSpec};

    #[test]
    fn integral_solution_is_an_ode_trajectory() {
        let spec = SolveSpec::lambda(CurvatureProfile::one_minus(2.0), 140.0).with_grid(GridSpec { nodes: 800, ..GridSpec::default() });
        let rec = solve(&spec, None).unwrap();
        let st = shoot(rec.u0(), rec.laplacian_origin.unwrap(), &spec.profile, 1e3).unwrap();
        assert!(agreement(&st, &rec.u, 5.0).unwrap() < 1e-3);
        assert_eq!(st.terminal_class, TerminalClass::NormalDecay);
    }
}
