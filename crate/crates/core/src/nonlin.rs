//! Pointwise nonlinearities: smooth soft-shrinkage, absolute value
//! rectification and their derivatives.

use crate::error::{Error, Result};
use crate::tensor::Tensor3;

pub const DEFAULT_THRESHOLD: f64 = 0.1;
pub const DEFAULT_BETA: f64 = 5.0;

/// Learned shrinkage: one threshold per code component and a shared smoothness.
#[derive(Debug, Clone, PartialEq)]
pub struct ShrinkParams {
    pub b: Vec<f64>,
    pub beta: f64,
}

impl ShrinkParams {
    pub fn new(b: Vec<f64>, beta: f64) -> Result<Self> {
        let p = ShrinkParams { b, beta };
        p.validate()?;
        Ok(p)
    }

    pub fn with_defaults(n: usize) -> Self {
        ShrinkParams {
            b: vec![DEFAULT_THRESHOLD; n],
            beta: DEFAULT_BETA,
        }
    }

    pub fn len(&self) -> usize {
        self.b.len()
    }

    pub fn is_empty(&self) -> bool {
        self.b.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0) || !self.beta.is_finite() {
            return Err(Error::Parameter(format!(
                "shrink smoothness beta must be > 0, got {}",
                self.beta
            )));
        }
        if self.b.iter().any(|v| !v.is_finite()) {
            return Err(Error::Parameter("non-finite shrink threshold".into()));
        }
        Ok(())
    }
}

#[inline]
fn sgn(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `ln(e^c + e^a - 1)` for `a >= 0` without overflow.
#[inline]
fn log_kink(a: f64, c: f64) -> f64 {
    if a >= c {
        a + ((c - a).exp() - (-a).exp_m1()).ln()
    } else {
        c + ((a - c).exp() - (-c).exp()).ln_1p()
    }
}

/// Smooth shrinkage of one value with threshold `b` and smoothness `beta`:
/// `sgn(x) · ((1/β)·ln(e^{βb} + e^{β|x|} − 1) − b)`.
///
/// Tends to `|x| − b` for large `|x|`, is exactly zero at the origin and
/// approaches soft-thresholding as `β → ∞`.
#[inline]
pub fn shrink_scalar(x: f64, b: f64, beta: f64) -> f64 {
    if x == 0.0 {
        return 0.0;
    }
    let ax = x.abs();
    sgn(x) * (log_kink(beta * ax, beta * b) / beta - b)
}

/// Partials `(d/dx, d/db, d/dβ)` of [`shrink_scalar`].
#[inline]
pub fn shrink_scalar_grad(x: f64, b: f64, beta: f64) -> (f64, f64, f64) {
    let ax = x.abs();
    let s = sgn(x);
    // e^{β|x|}/E and e^{βb}/E with E = e^{βb} + e^{β|x|} - 1
    let rx = 1.0 / ((beta * (b - ax)).exp() - (-beta * ax).exp_m1());
    let rb = 1.0 / (1.0 + (beta * (ax - b)).exp() - (-beta * b).exp());
    let dx = rx;
    if x == 0.0 {
        return (dx, 0.0, 0.0);
    }
    let phi = log_kink(beta * ax, beta * b);
    let db = s * (rb - 1.0);
    let dbeta = s * (-phi / (beta * beta) + (b * rb + ax * rx) / beta);
    (dx, db, dbeta)
}

pub fn soft_shrink(x: &[f64], p: &ShrinkParams) -> Result<Vec<f64>> {
    p.validate()?;
    if x.len() != p.b.len() {
        return Err(Error::Dimension(format!(
            "{} inputs for {} thresholds",
            x.len(),
            p.b.len()
        )));
    }
    Ok(x.iter()
        .zip(&p.b)
        .map(|(&v, &b)| shrink_scalar(v, b, p.beta))
        .collect())
}

/// Gradients of a scalar loss through [`soft_shrink`].
#[derive(Debug, Clone, PartialEq)]
pub struct ShrinkGrad {
    pub dx: Vec<f64>,
    pub db: Vec<f64>,
    pub dbeta: f64,
}

/// Elementwise partials: `(d/dx, d/db)` per component and `d/dβ` per component.
pub fn soft_shrink_grad(x: &[f64], p: &ShrinkParams) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    p.validate()?;
    if x.len() != p.b.len() {
        return Err(Error::Dimension(format!(
            "{} inputs for {} thresholds",
            x.len(),
            p.b.len()
        )));
    }
    let mut dx = Vec::with_capacity(x.len());
    let mut db = Vec::with_capacity(x.len());
    let mut dbeta = Vec::with_capacity(x.len());
    for (&v, &b) in x.iter().zip(&p.b) {
        let (a, c, d) = shrink_scalar_grad(v, b, p.beta);
        dx.push(a);
        db.push(c);
        dbeta.push(d);
    }
    Ok((dx, db, dbeta))
}

/// Backward pass of [`soft_shrink`] given the upstream gradient.
pub fn soft_shrink_backward(x: &[f64], p: &ShrinkParams, upstream: &[f64]) -> ShrinkGrad {
    let mut g = ShrinkGrad {
        dx: vec![0.0; x.len()],
        db: vec![0.0; x.len()],
        dbeta: 0.0,
    };
    for k in 0..x.len() {
        let (a, c, d) = shrink_scalar_grad(x[k], p.b[k], p.beta);
        g.dx[k] = upstream[k] * a;
        g.db[k] = upstream[k] * c;
        g.dbeta += upstream[k] * d;
    }
    g
}

pub fn abs_rectify(t: &Tensor3) -> Tensor3 {
    let mut out = t.clone();
    out.data_mut().iter_mut().for_each(|v| *v = v.abs());
    out
}

/// Multiplies `grad` by `sgn(input)`, with `sgn(0) = 0`.
pub fn abs_rectify_backward(input: &Tensor3, grad: &Tensor3) -> Tensor3 {
    let mut out = grad.clone();
    for (g, &x) in out.data_mut().iter_mut().zip(input.data()) {
        *g *= sgn(x);
    }
    out
}
