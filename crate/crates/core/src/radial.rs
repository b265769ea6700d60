//! Radial grids, quadrature, and fields with logarithmic tails.

use std::f64::consts::PI;
use std::io::{BufRead, Write};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{fd_weights, gauss_legendre, lagrange_eval};
use crate::tail::{LogTail, TailShape};

/// Area of the unit 3-sphere.
pub const OMEGA3: f64 = 2.0 * PI * PI;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    /// First node of the geometric part; [0, r_min] is a linear patch.
    pub r_min: f64,
    pub r_max: f64,
    /// Total node count including the origin.
    pub nodes: usize,
    pub linear_nodes: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self { r_min: 1e-4, r_max: 1e3, nodes: 1200, linear_nodes: 8 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PanelKind {
    Graded { r_min: f64, linear_nodes: usize },
    Explicit,
}

/// Polynomial degree of the interpolation stencils.
const DEGREE: usize = 5;

#[derive(Clone, Debug, PartialEq)]
pub struct RadialGrid {
    nodes: Vec<f64>,
    panel: PanelKind,
}

impl RadialGrid {
    pub fn graded(spec: &GridSpec) -> Result<Self> {
        let m = spec.linear_nodes.max(1);
        if !(spec.r_min > 0.0 && spec.r_max > spec.r_min) {
            return Err(Error::InvalidGrid(format!("need 0 < r_min < r_max, got {} and {}", spec.r_min, spec.r_max)));
        }
        if spec.nodes < m + 4 {
            return Err(Error::InvalidGrid(format!("{} nodes cannot hold a {m}-node linear patch", spec.nodes)));
        }
        let g = spec.nodes - 1 - m;
        let mut nodes = Vec::with_capacity(spec.nodes);
        nodes.push(0.0);
        for k in 1..=m {
            nodes.push(spec.r_min * k as f64 / m as f64);
        }
        let ratio = (spec.r_max / spec.r_min).ln() / g as f64;
        for j in 1..g {
            nodes.push(spec.r_min * (ratio * j as f64).exp());
        }
        nodes.push(spec.r_max);
        let grid = Self { nodes, panel: PanelKind::Graded { r_min: spec.r_min, linear_nodes: m } };
        grid.validate()?;
        Ok(grid)
    }

    pub fn from_nodes(nodes: Vec<f64>) -> Result<Self> {
        let grid = Self { nodes, panel: PanelKind::Explicit };
        grid.validate()?;
        Ok(grid)
    }

    fn validate(&self) -> Result<()> {
        let n = &self.nodes;
        if n.len() < 4 {
            return Err(Error::InvalidGrid(format!("{} nodes, need at least 4", n.len())));
        }
        if n[0] != 0.0 {
            return Err(Error::InvalidGrid("first node must be the origin".into()));
        }
        if n.iter().any(|r| !r.is_finite()) || n.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidGrid("nodes must be finite and strictly increasing".into()));
        }
        let r_max = self.r_max();
        for k in 0..6 {
            let hi = r_max * 10f64.powi(-k);
            let lo = hi / 10.0;
            let count = n.iter().filter(|&&r| r >= lo && r <= hi).count();
            if count < 2 {
                return Err(Error::InvalidGrid(format!("only {count} nodes in [{lo:e}, {hi:e}]")));
            }
        }
        Ok(())
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn r_max(&self) -> f64 {
        *self.nodes.last().unwrap()
    }

    pub fn panel(&self) -> &PanelKind {
        &self.panel
    }

    /// Index k with nodes[k] <= r <= nodes[k+1].
    pub fn locate(&self, r: f64) -> usize {
        let n = self.nodes.len();
        match self.nodes.binary_search_by(|x| x.total_cmp(&r)) {
            Ok(k) => k.min(n - 2),
            Err(k) => k.saturating_sub(1).min(n - 2),
        }
    }

    /// Node range (inclusive) of the interpolation stencil used on interval k.
    /// With `split = Some(b)` the stencil never straddles node b.
    pub fn stencil(&self, k: usize, split: Option<usize>) -> (usize, usize) {
        let n = self.nodes.len();
        let (mut seg_lo, mut seg_hi) = match split {
            Some(b) if k < b => (0, b),
            Some(b) => (b, n - 1),
            None => (0, n - 1),
        };
        // too few nodes on one side of the split to keep full degree
        if seg_hi - seg_lo < DEGREE {
            (seg_lo, seg_hi) = (0, n - 1);
        }
        let width = (seg_hi - seg_lo).min(DEGREE);
        let mut lo = k.saturating_sub((DEGREE - 1) / 2).max(seg_lo);
        if lo + width > seg_hi {
            lo = seg_hi - width;
        }
        (lo, lo + width)
    }
}

/// Composite interpolatory quadrature on a [`RadialGrid`]: degree-5 Lagrange
/// stencils integrated by 3-point Gauss on each interval.
#[derive(Clone, Debug)]
pub struct QuadratureRule {
    grid: Arc<RadialGrid>,
    /// Weights for ∫₀^{r_max} g(s) ds.
    weights: Vec<f64>,
    /// Per interval: first stencil node and weights of the stencil nodes.
    intervals: Vec<(usize, Vec<f64>)>,
}

impl QuadratureRule {
    pub const ORDER: u32 = DEGREE as u32;

    pub fn new(grid: Arc<RadialGrid>) -> Self {
        let n = grid.len();
        let intervals: Vec<_> = (0..n - 1).map(|k| interval_weights(&grid, k, None)).collect();
        let mut weights = vec![0.0; n];
        for (lo, w) in &intervals {
            for (j, wj) in w.iter().enumerate() {
                weights[lo + j] += wj;
            }
        }
        Self { grid, weights, intervals }
    }

    pub fn grid(&self) -> &Arc<RadialGrid> {
        &self.grid
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn sphere_area(&self) -> f64 {
        OMEGA3
    }

    /// Weights for ∫ g(s) s³ ds.
    pub fn moment_weights(&self) -> Vec<f64> {
        self.weights.iter().zip(self.grid.nodes()).map(|(w, s)| w * s * s * s).collect()
    }

    pub fn integrate(&self, g: &[f64]) -> f64 {
        self.weights.iter().zip(g).map(|(w, g)| w * g).sum()
    }

    /// Running integrals ∫₀^{r_k} g(s) ds at every node.
    pub fn cumulative(&self, g: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; g.len()];
        for (k, (lo, w)) in self.intervals.iter().enumerate() {
            let piece: f64 = w.iter().enumerate().map(|(j, wj)| wj * g[lo + j]).sum();
            out[k + 1] = out[k] + piece;
        }
        out
    }

    /// Weight corrections for integrands with a derivative jump at node `b`:
    /// returns (node, delta) pairs to add to [`Self::weights`].
    pub fn split_corrections(&self, b: usize) -> Vec<(usize, f64)> {
        let n = self.grid.len();
        let mut out: Vec<(usize, f64)> = Vec::new();
        let mut add = |j: usize, v: f64| {
            if let Some(e) = out.iter_mut().find(|e| e.0 == j) {
                e.1 += v;
            } else {
                out.push((j, v));
            }
        };
        for k in b.saturating_sub(DEGREE)..(b + DEGREE).min(n - 1) {
            let (lo0, w0) = &self.intervals[k];
            let (lo1, w1) = interval_weights(&self.grid, k, Some(b));
            if *lo0 == lo1 && w0.len() == w1.len() {
                continue;
            }
            for (j, w) in w0.iter().enumerate() {
                add(lo0 + j, -w);
            }
            for (j, w) in w1.iter().enumerate() {
                add(lo1 + j, *w);
            }
        }
        out
    }
}

fn interval_weights(grid: &RadialGrid, k: usize, split: Option<usize>) -> (usize, Vec<f64>) {
    let x = grid.nodes();
    let (lo, hi) = grid.stencil(k, split);
    let xs = &x[lo..=hi];
    let (gx, gw) = gauss_legendre(3);
    let (a, b) = (x[k], x[k + 1]);
    let (c, h) = (0.5 * (a + b), 0.5 * (b - a));
    let mut w = vec![0.0; xs.len()];
    for (z, wz) in gx.iter().zip(&gw) {
        let p = c + h * z;
        for j in 0..xs.len() {
            let mut l = 1.0;
            for m in 0..xs.len() {
                if m != j {
                    l *= (p - xs[m]) / (xs[j] - xs[m]);
                }
            }
            w[j] += h * wz * l;
        }
    }
    (lo, w)
}

/// A radial function sampled on a grid, optionally continued by a tail.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "FieldDoc", try_from = "FieldDoc")]
pub struct RadialField {
    grid: Arc<RadialGrid>,
    values: Vec<f64>,
    tail: Option<LogTail>,
}

#[derive(Serialize, Deserialize)]
struct FieldDoc {
    r: Vec<f64>,
    value: Vec<f64>,
    tail: Option<LogTail>,
    panel: PanelKind,
}

impl From<RadialField> for FieldDoc {
    fn from(f: RadialField) -> Self {
        Self { r: f.grid.nodes.clone(), value: f.values, tail: f.tail, panel: f.grid.panel.clone() }
    }
}

impl TryFrom<FieldDoc> for RadialField {
    type Error = Error;
    fn try_from(d: FieldDoc) -> Result<Self> {
        let mut grid = RadialGrid::from_nodes(d.r)?;
        grid.panel = d.panel;
        RadialField::new(Arc::new(grid), d.value, d.tail)
    }
}

impl RadialField {
    pub fn new(grid: Arc<RadialGrid>, values: Vec<f64>, tail: Option<LogTail>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::InvalidGrid(format!("{} values on a {}-node grid", values.len(), grid.len())));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Domain(format!("non-finite value at node {i}")));
        }
        Ok(Self { grid, values, tail })
    }

    pub fn from_fn<F: Fn(f64) -> f64>(grid: Arc<RadialGrid>, f: F, tail: Option<LogTail>) -> Result<Self> {
        let values = grid.nodes().iter().map(|&r| f(r)).collect();
        Self::new(grid, values, tail)
    }

    pub fn constant(grid: Arc<RadialGrid>, c: f64) -> Self {
        let n = grid.len();
        Self { grid, values: vec![c; n], tail: None }
    }

    pub fn grid(&self) -> &Arc<RadialGrid> {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn tail(&self) -> Option<&LogTail> {
        self.tail.as_ref()
    }

    pub fn with_tail(mut self, tail: Option<LogTail>) -> Self {
        self.tail = tail;
        self
    }

    /// Attach a tail of the given slope and shape, matched to the last node.
    pub fn with_matched_tail(self, slope: f64, shape: TailShape) -> Self {
        let t = LogTail::matched(slope, *self.values.last().unwrap(), self.grid.r_max(), shape);
        self.with_tail(Some(t))
    }

    pub fn value_at_origin(&self) -> f64 {
        self.values[0]
    }

    /// Cubic interpolation inside the grid, tail beyond it.
    pub fn eval(&self, r: f64) -> Result<f64> {
        let r = r.abs();
        let r_max = self.grid.r_max();
        if r > r_max {
            return match &self.tail {
                Some(t) => Ok(t.eval(r)),
                None => Err(Error::MissingTail(format!("r = {r} beyond r_max = {r_max}"))),
            };
        }
        let k = self.grid.locate(r);
        let (lo, hi) = self.grid.stencil(k, None);
        Ok(lagrange_eval(&self.grid.nodes()[lo..=hi], &self.values[lo..=hi], r))
    }

    pub fn max_abs_diff(&self, other: &RadialField) -> f64 {
        self.values.iter().zip(&other.values).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "r,value")?;
        for (r, v) in self.grid.nodes().iter().zip(&self.values) {
            writeln!(w, "{r:.16e},{v:.16e}")?;
        }
        Ok(())
    }

    /// Reads the CSV written by [`Self::write_csv`]; the tail is not part of the CSV.
    pub fn read_csv<R: BufRead>(r: R) -> Result<Self> {
        let mut nodes = Vec::new();
        let mut values = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if i == 0 || line.trim().is_empty() {
                continue;
            }
            let mut it = line.split(',');
            let mut next = || -> Result<f64> {
                it.next()
                    .ok_or_else(|| Error::Parse(format!("line {}: missing column", i + 1)))?
                    .trim()
                    .parse::<f64>()
                    .map_err(|e| Error::Parse(format!("line {}: {e}", i + 1)))
            };
            nodes.push(next()?);
            values.push(next()?);
        }
        Self::new(Arc::new(RadialGrid::from_nodes(nodes)?), values, None)
    }
}

/// Δf = f'' + 3f'/r with three-point centered stencils, a four-point one-sided
/// closure at r_max, and an even fit f0 + a r² + b r⁴ at the origin.
pub fn radial_laplacian(f: &RadialField) -> Result<RadialField> {
    let x = f.grid.nodes();
    let v = &f.values;
    let n = x.len();
    if n < 4 {
        return Err(Error::InvalidGrid("laplacian needs at least 4 nodes".into()));
    }
    let mut out = vec![0.0; n];
    let (r1, r2) = (x[1], x[2]);
    let (d1, d2) = (v[1] - v[0], v[2] - v[0]);
    let a = (d1 * r2.powi(4) - d2 * r1.powi(4)) / (r1 * r1 * r2.powi(4) - r2 * r2 * r1.powi(4));
    out[0] = 8.0 * a;
    for i in 1..n {
        let (lo, hi) = if i == n - 1 { (n - 4, n - 1) } else { (i - 1, i + 1) };
        let c = fd_weights(x[i], &x[lo..=hi], 2);
        let (mut d1, mut d2) = (0.0, 0.0);
        for (j, cj) in c.iter().enumerate() {
            let dv = v[lo + j] - v[i];
            d1 += cj[1] * dv;
            d2 += cj[2] * dv;
        }
        out[i] = d2 + 3.0 * d1 / x[i];
    }
    RadialField::new(f.grid.clone(), out, None)
}

/// Inverts the radial Laplacian: f(0) = f0 and f' = (1/r³)∫₀^r w s³ ds.
pub fn reconstruct_from_laplacian(w: &RadialField, f0: f64) -> Result<RadialField> {
    let quad = QuadratureRule::new(w.grid.clone());
    let x = w.grid.nodes();
    let ws3: Vec<f64> = w.values.iter().zip(x).map(|(w, s)| w * s * s * s).collect();
    let m = quad.cumulative(&ws3);
    let g: Vec<f64> = m.iter().zip(x).map(|(m, r)| if *r > 0.0 { m / (r * r * r) } else { 0.0 }).collect();
    let f: Vec<f64> = quad.cumulative(&g).into_iter().map(|v| v + f0).collect();
    RadialField::new(w.grid.clone(), f, None)
}

/// x ↦ u(ρx) + log ρ on the same grid. The tail keeps its slope and is
/// re-matched at r_max; a curved tail for κ r^q becomes one for κ ρ^q r^q.
pub fn scale_field(u: &RadialField, rho: f64) -> Result<RadialField> {
    if !(rho > 0.0 && rho.is_finite()) {
        return Err(Error::Domain(format!("scale factor must be positive, got {rho}")));
    }
    let lr = rho.ln();
    let values = u.grid.nodes().iter().map(|&r| u.eval(rho * r).map(|v| v + lr)).collect::<Result<Vec<_>>>()?;
    let tail = u.tail.map(|t| {
        let shape = match t.shape {
            TailShape::Power => TailShape::Power,
            TailShape::Curved { kappa, q } => TailShape::Curved { kappa: kappa * rho.powf(q), q },
        };
        LogTail::matched(t.slope, *values.last().unwrap(), u.grid.r_max(), shape)
    });
    RadialField::new(u.grid.clone(), values, tail)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> Arc<RadialGrid> {
        Arc::new(RadialGrid::graded(&GridSpec { r_min: 1e-3, r_max: 100.0, nodes: 600, linear_nodes: 6 }).unwrap())
    }

    fn sph(lambda: f64) -> impl Fn(f64) -> f64 {
        move |r| (2.0 * lambda / (1.0 + lambda * lambda * r * r)).ln()
    }

    #[test]
    fn grid_rejects_too_few_nodes() {
        assert!(RadialGrid::from_nodes(vec![0.0, 1.0, 2.0]).is_err());
        let f = RadialField::new(
            Arc::new(RadialGrid { nodes: vec![0.0, 1.0, 2.0], panel: PanelKind::Explicit }),
            vec![0.0; 3],
            None,
        )
        .unwrap();
        assert!(matches!(radial_laplacian(&f), Err(Error::InvalidGrid(_))));
    }

    #[test]
    fn quadrature_integrates_cubic_moment() {
        let q = QuadratureRule::new(grid());
        let s3: Vec<f64> = q.grid().nodes().iter().map(|s| s * s * s).collect();
        let v = q.integrate(&s3);
        assert!((v / (100f64.powi(4) / 4.0) - 1.0).abs() < 1e-10);
    }

    #[test]
    fn split_weights_stay_exact_for_cubics() {
        let q = QuadratureRule::new(grid());
        let x = q.grid().nodes().to_vec();
        for b in [0, 1, 2, 3, 300, x.len() - 2, x.len() - 1] {
            let mut w = q.weights().to_vec();
            for (j, d) in q.split_corrections(b) {
                w[j] += d;
            }
            let v: f64 = w.iter().zip(&x).map(|(w, s)| w * (s * s - 2.0 * s * s * s)).sum();
            let exact = 100f64.powi(3) / 3.0 - 100f64.powi(4) / 2.0;
            assert!((v / exact - 1.0).abs() < 1e-10, "b={b}");
        }
    }

    #[test]
    fn split_weights_resolve_kinks() {
        let q = QuadratureRule::new(grid());
        let x = q.grid().nodes().to_vec();
        let b = 350;
        let kink: Vec<f64> = x.iter().map(|s| (s - x[b]).abs()).collect();
        let mut w = q.weights().to_vec();
        for (j, d) in q.split_corrections(b) {
            w[j] += d;
        }
        let v: f64 = w.iter().zip(&kink).map(|(w, g)| w * g).sum();
        let exact = 0.5 * x[b] * x[b] + 0.5 * (100.0 - x[b]).powi(2);
        assert!((v - exact).abs() < 1e-10 * exact);
    }

    #[test]
    fn laplacian_of_polynomials() {
        let g = grid();
        let c = radial_laplacian(&RadialField::constant(g.clone(), 3.0)).unwrap();
        assert!(c.values().iter().all(|v| v.abs() < 1e-6));
        let r2 = radial_laplacian(&RadialField::from_fn(g, |r| r * r, None).unwrap()).unwrap();
        assert!(r2.values().iter().all(|v| (v - 8.0).abs() < 1e-6 * 8.0));
    }

    #[test]
    fn laplacian_of_spherical_profile() {
        let g = grid();
        let f = RadialField::from_fn(g.clone(), sph(1.0), None).unwrap();
        let l = radial_laplacian(&f).unwrap();
        assert!((l.values()[0] + 8.0).abs() < 1e-4);
        // hand derivative: Δu = (-8 - 4r²)/(1+r²)²
        for (r, v) in g.nodes().iter().zip(l.values()).skip(1).step_by(17) {
            let exact = (-8.0 - 4.0 * r * r) / (1.0 + r * r).powi(2);
            assert!((v - exact).abs() < 2e-3 * exact.abs().max(1e-3), "r={r}");
        }
    }

    #[test]
    fn reconstruct_examples() {
        let g = grid();
        let f = reconstruct_from_laplacian(&RadialField::constant(g.clone(), 0.0), 3.0).unwrap();
        assert!(f.values().iter().all(|v| *v == 3.0));
        let f = reconstruct_from_laplacian(&RadialField::constant(g.clone(), 8.0), 0.0).unwrap();
        for (r, v) in g.nodes().iter().zip(f.values()) {
            assert!((v - r * r).abs() <= 1e-10 * (1.0 + r * r));
        }
    }

    #[test]
    fn laplacian_round_trip() {
        let g = grid();
        let f = RadialField::from_fn(g.clone(), sph(1.0), None).unwrap();
        let back = reconstruct_from_laplacian(&radial_laplacian(&f).unwrap(), f.value_at_origin()).unwrap();
        let coarse = back.max_abs_diff(&f);
        assert!(coarse < 5e-3);
        // second order: doubling the resolution cuts the error about four times
        let fine_grid = Arc::new(RadialGrid::graded(&GridSpec { r_min: 1e-3, r_max: 100.0, nodes: 1200, linear_nodes: 12 }).unwrap());
        let f = RadialField::from_fn(fine_grid, sph(1.0), None).unwrap();
        let back = reconstruct_from_laplacian(&radial_laplacian(&f).unwrap(), f.value_at_origin()).unwrap();
        let fine = back.max_abs_diff(&f);
        assert!(coarse / fine > 3.0 && coarse / fine < 5.0, "{coarse} {fine}");
    }

    #[test]
    fn scaling_examples() {
        let g = grid();
        let tail = LogTail::power(-2.0, (2.0f64).ln(), 100.0);
        let u = RadialField::from_fn(g.clone(), sph(1.0), Some(tail)).unwrap();
        assert_eq!(scale_field(&u, 1.0).unwrap().values(), u.values());
        let s = scale_field(&u, 2.0).unwrap();
        let want = RadialField::from_fn(g.clone(), sph(2.0), None).unwrap();
        let inside = g.nodes().iter().take_while(|r| 2.0 * **r <= 100.0).count();
        let err = (0..inside).map(|i| (s.values()[i] - want.values()[i]).abs()).fold(0.0, f64::max);
        assert!(err < 1e-6, "{err}");
        assert!(matches!(scale_field(&u, 0.0), Err(Error::Domain(_))));
        assert!(matches!(scale_field(&u, -1.0), Err(Error::Domain(_))));
    }

    #[test]
    fn field_json_and_csv_round_trip() {
        let g = grid();
        let tail = LogTail::matched(-1.7, -5.3, 100.0, TailShape::Curved { kappa: -1.0, q: 2.0 });
        let u = RadialField::from_fn(g, |r| (1.0 + r).ln().sin() / 3.0, Some(tail)).unwrap();
        let s = serde_json::to_string(&u).unwrap();
        let back: RadialField = serde_json::from_str(&s).unwrap();
        assert_eq!(back, u);
        let mut buf = Vec::new();
        u.write_csv(&mut buf).unwrap();
        let back = RadialField::read_csv(&buf[..]).unwrap();
        assert_eq!(back.values(), u.values());
        assert_eq!(back.grid().nodes(), u.grid().nodes());
    }
}
