//! Spherical average of the four-dimensional log kernel.
//!
//! Averaging log(1/|x − y|) over |y| = s gives
//! Ĝ(r, s) = −log max(r, s) − ¼ (min/max)², which is C¹ across r = s.

use std::io::{Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::adaptive_gk;
use crate::radial::QuadratureRule;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Gauge {
    /// log 1/|x − y|, paired with a free additive constant.
    Absolute,
    /// log |y|/|x − y|, which vanishes at x = 0 and pins the constant to u(0).
    OriginNormalized,
}

pub fn kernel_closed_form(r: f64, s: f64, gauge: Gauge) -> Result<f64> {
    if !(s > 0.0) || !(r >= 0.0) {
        return Err(Error::Domain(format!("kernel needs r >= 0 and s > 0, got r={r}, s={s}")));
    }
    Ok(match gauge {
        Gauge::Absolute => {
            let (lo, hi) = if r < s { (r, s) } else { (s, r) };
            let q = lo / hi;
            -hi.ln() - 0.25 * q * q
        }
        Gauge::OriginNormalized => {
            if r <= s {
                let q = r / s;
                -0.25 * q * q
            } else {
                let q = s / r;
                q.ln() - 0.25 * q * q
            }
        }
    })
}

/// Absolute-gauge average computed by adaptive quadrature in the polar angle.
pub fn kernel_oracle(r: f64, s: f64) -> Result<f64> {
    if !(s > 0.0) || !(r >= 0.0) {
        return Err(Error::Domain(format!("oracle needs r >= 0 and s > 0, got r={r}, s={s}")));
    }
    let d = (r - s) * (r - s);
    let f = |th: f64| {
        let h = (0.5 * th).sin();
        let sn = th.sin();
        (2.0 / std::f64::consts::PI) * sn * sn * (-0.5) * (d + 4.0 * r * s * h * h).ln()
    };
    let (v, err, ok) = adaptive_gk(f, 0.0, std::f64::consts::PI, 1e-12, 4000);
    if ok {
        Ok(v)
    } else {
        Err(Error::OracleFailure { estimate: err })
    }
}

/// Dense N×N matrix with A_ij = ¼ Ĝ(r_i, s_j) s_j³ w_j, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelOperator {
    n: usize,
    gauge: Gauge,
    data: Vec<f64>,
}

pub fn assemble_operator(quad: &QuadratureRule, gauge: Gauge) -> KernelOperator {
    let x = quad.grid().nodes().to_vec();
    let n = x.len();
    let base = quad.weights().to_vec();
    let mut data = vec![0.0; n * n];
    data.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
        let mut w = base.clone();
        for (j, d) in quad.split_corrections(i) {
            w[j] += d;
        }
        // the origin gauge adds the row-independent log s term with unsplit weights, so the
        // two discrete operators differ by exactly a constant per column
        let origin = gauge == Gauge::OriginNormalized;
        if origin && i == 0 {
            return;
        }
        for j in 1..n {
            let s = x[j];
            let mut v = kernel_closed_form(x[i], s, Gauge::Absolute).unwrap() * w[j];
            if origin {
                v += s.ln() * base[j];
            }
            row[j] = 0.25 * v * s * s * s;
        }
    });
    KernelOperator { n, gauge, data }
}

const MAGIC: &[u8; 8] = b"QCKERNEL";

impl KernelOperator {
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn gauge(&self) -> Gauge {
        self.gauge
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n..(i + 1) * self.n]
    }

    pub fn apply(&self, source: &[f64]) -> Vec<f64> {
        self.data.chunks(self.n).map(|row| row.iter().zip(source).map(|(a, b)| a * b).sum()).collect()
    }

    /// Header: magic, N as u64, gauge byte (0 absolute, 1 origin); then N² little-endian f64.
    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&(self.n as u64).to_le_bytes())?;
        w.write_all(&[match self.gauge {
            Gauge::Absolute => 0,
            Gauge::OriginNormalized => 1,
        }])?;
        for v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Parse("not a kernel dump".into()));
        }
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8)?;
        let n = u64::from_le_bytes(b8) as usize;
        let mut g = [0u8; 1];
        r.read_exact(&mut g)?;
        let gauge = match g[0] {
            0 => Gauge::Absolute,
            1 => Gauge::OriginNormalized,
            other => return Err(Error::Parse(format!("unknown gauge tag {other}"))),
        };
        let mut data = Vec::with_capacity(n * n);
        for _ in 0..n * n {
            r.read_exact(&mut b8)?;
            data.push(f64::from_le_bytes(b8));
        }
        Ok(Self { n, gauge, data })
    }
}

/// Max |closed form − oracle| over an m×m log-spaced grid of (r, s) in [lo, hi]².
pub fn validate_closed_form(m: usize, lo: f64, hi: f64) -> Result<f64> {
    let pts: Vec<f64> = (0..m).map(|k| lo * (hi / lo).powf(k as f64 / (m - 1) as f64)).collect();
    let errs = pts
        .par_iter()
        .map(|&r| -> Result<f64> {
            let mut e: f64 = 0.0;
            for &s in &pts {
                e = e.max((kernel_closed_form(r, s, Gauge::Absolute)? - kernel_oracle(r, s)?).abs());
            }
            Ok(e)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(errs.into_iter().fold(0.0, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::radial::{GridSpec, RadialGrid};
    use std::sync::Arc;

    #[test]
    fn closed_form_examples() {
        let e = std::f64::consts::E;
        assert!((kernel_closed_form(0.0, e, Gauge::Absolute).unwrap() + 1.0).abs() < 1e-15);
        assert_eq!(kernel_closed_form(0.0, 3.7, Gauge::OriginNormalized).unwrap(), 0.0);
        assert!((kernel_closed_form(1.0, 1.0, Gauge::Absolute).unwrap() + 0.25).abs() < 1e-15);
        assert!(matches!(kernel_closed_form(1.0, 0.0, Gauge::Absolute), Err(Error::Domain(_))));
    }

    #[test]
    fn oracle_examples() {
        assert!((kernel_oracle(1.0, 1.0).unwrap() + 0.25).abs() < 1e-10);
        assert!((kernel_oracle(0.0, std::f64::consts::E).unwrap() + 1.0).abs() < 1e-10);
        let v = kernel_oracle(2.0, 1.0).unwrap();
        assert!((v - (-(2f64.ln()) - 1.0 / 16.0)).abs() < 1e-10);
        assert!((kernel_oracle(1.0, 2.0).unwrap() - v).abs() < 1e-10);
        assert!(kernel_oracle(0.0, 1.0).unwrap().abs() < 1e-12);
    }

    #[test]
    fn gauges_differ_by_log_s() {
        for &(r, s) in &[(0.3, 2.0), (5.0, 0.01), (1.0, 1.0), (7.0, 7.5)] {
            let a = kernel_closed_form(r, s, Gauge::Absolute).unwrap();
            let o = kernel_closed_form(r, s, Gauge::OriginNormalized).unwrap();
            assert!((o - a - f64::ln(s)).abs() < 1e-13);
        }
    }

    #[test]
    fn kernel_is_c1_across_diagonal() {
        let s = 2.5;
        let g = |r: f64| kernel_closed_form(r, s, Gauge::Absolute).unwrap();
        let mut prev = f64::INFINITY;
        for k in 1..8 {
            let eps = 10f64.powi(-k);
            let jump = (g(s * (1.0 + eps)) - g(s * (1.0 - eps))).abs();
            assert!(jump < prev);
            prev = jump;
            // one-sided slopes agree at the diagonal
            let left = (g(s) - g(s * (1.0 - eps))) / (s * eps);
            let right = (g(s * (1.0 + eps)) - g(s)) / (s * eps);
            assert!((left - right).abs() < 10.0 * eps);
        }
    }

    #[test]
    fn operator_rows_and_dump() {
        let g = Arc::new(RadialGrid::graded(&GridSpec { r_min: 1e-3, r_max: 100.0, nodes: 200, linear_nodes: 4 }).unwrap());
        let q = QuadratureRule::new(g);
        let a = assemble_operator(&q, Gauge::OriginNormalized);
        assert!(a.row(0).iter().all(|v| *v == 0.0));
        assert!(a.apply(&vec![0.0; a.len()]).iter().all(|v| *v == 0.0));
        let mut buf = Vec::new();
        a.write_binary(&mut buf).unwrap();
        assert_eq!(buf.len(), 17 + 8 * 200 * 200);
        assert_eq!(KernelOperator::read_binary(&buf[..]).unwrap(), a);
    }
}
