//! Proximal-gradient (ISTA / FISTA) inference of sparse codes.
//!
//! Minimizes `H(z) + λ‖z‖₁` where the smooth part is either pure
//! reconstruction `‖x − Dz‖²` or reconstruction plus a multinomial logistic
//! loss on the linear scores `u z + r`:
//! `H(z) = C(y, u z + r) + λ₁‖x − Dz‖²`.

use log::debug;

use crate::error::{dim_err, Error, Result};
use crate::linalg::{dot, power_iteration, LinearOperator};

pub const DEFAULT_LAMBDA_L1: f64 = 0.5;
pub const DEFAULT_LAMBDA_RECON: f64 = 1.0;
const POWER_ITERATIONS: usize = 20;
const LIPSCHITZ_SAFETY: f64 = 1.05;

/// Linear classifier `scores = u z + r` with `u` stored row-major `c × n`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierParams {
    pub classes: usize,
    pub dim: usize,
    pub u: Vec<f64>,
    pub r: Vec<f64>,
}

impl ClassifierParams {
    pub fn zeros(classes: usize, dim: usize) -> Self {
        ClassifierParams {
            classes,
            dim,
            u: vec![0.0; classes * dim],
            r: vec![0.0; classes],
        }
    }

    pub fn row(&self, c: usize) -> &[f64] {
        &self.u[c * self.dim..(c + 1) * self.dim]
    }

    pub fn scores(&self, z: &[f64]) -> Vec<f64> {
        (0..self.classes)
            .map(|c| dot(self.row(c), z) + self.r[c])
            .collect()
    }

    /// `uᵀ g` for a class-space vector `g`.
    pub fn backproject(&self, g: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for (c, &gc) in g.iter().enumerate() {
            if gc != 0.0 {
                crate::linalg::axpy(&mut out, gc, self.row(c));
            }
        }
        out
    }

    pub fn predict(&self, z: &[f64]) -> usize {
        argmax(&self.scores(z))
    }

    pub fn is_finite(&self) -> bool {
        self.u.iter().chain(&self.r).all(|v| v.is_finite())
    }

    /// Largest eigenvalue of `uᵀu` (power iteration on the small side).
    fn spectral_sq(&self) -> f64 {
        struct View<'a>(&'a ClassifierParams);
        impl LinearOperator for View<'_> {
            fn input_dim(&self) -> usize {
                self.0.dim
            }
            fn output_dim(&self) -> usize {
                self.0.classes
            }
            fn apply(&self, z: &[f64]) -> Vec<f64> {
                (0..self.0.classes).map(|c| dot(self.0.row(c), z)).collect()
            }
            fn apply_adjoint(&self, g: &[f64]) -> Vec<f64> {
                self.0.backproject(g)
            }
        }
        power_iteration(&View(self), POWER_ITERATIONS)
    }
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub fn softmax(scores: &[f64]) -> Vec<f64> {
    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Cross-entropy `−s_y + log Σ exp(s)` and its gradient `softmax(s) − onehot(y)`.
pub fn logistic_loss(scores: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    let c = scores.len();
    if c < 2 {
        return Err(Error::Parameter(format!("need at least 2 classes, got {c}")));
    }
    if label >= c {
        return Err(Error::Label { label, classes: c });
    }
    let top = argmax(scores);
    let m = scores[top];
    let others: f64 = scores
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != top)
        .map(|(_, s)| (s - m).exp())
        .sum();
    let loss = (m - scores[label]) + others.ln_1p();
    let mut grad = softmax(scores);
    grad[label] -= 1.0;
    Ok((loss, grad))
}

#[derive(Debug, Clone, Copy)]
pub enum SmoothKind<'a> {
    Recon,
    Discriminative {
        label: usize,
        theta: &'a ClassifierParams,
        /// Weight on the reconstruction term.
        lambda1: f64,
    },
}

/// The smooth part `H` of the sparse-coding energy.
#[derive(Clone, Copy)]
pub struct SmoothTerm<'a, D: LinearOperator + ?Sized> {
    pub x: &'a [f64],
    pub dict: &'a D,
    pub kind: SmoothKind<'a>,
}

impl<'a, D: LinearOperator + ?Sized> SmoothTerm<'a, D> {
    pub fn recon(x: &'a [f64], dict: &'a D) -> Self {
        SmoothTerm {
            x,
            dict,
            kind: SmoothKind::Recon,
        }
    }

    pub fn discriminative(
        x: &'a [f64],
        dict: &'a D,
        label: usize,
        theta: &'a ClassifierParams,
        lambda1: f64,
    ) -> Self {
        SmoothTerm {
            x,
            dict,
            kind: SmoothKind::Discriminative {
                label,
                theta,
                lambda1,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.x.len() != self.dict.output_dim() {
            return dim_err(format!(
                "input length {} vs dictionary rows {}",
                self.x.len(),
                self.dict.output_dim()
            ));
        }
        if let SmoothKind::Discriminative { label, theta, .. } = self.kind {
            if theta.dim != self.dict.input_dim() {
                return dim_err(format!(
                    "classifier dim {} vs code size {}",
                    theta.dim,
                    self.dict.input_dim()
                ));
            }
            if label >= theta.classes {
                return Err(Error::Label {
                    label,
                    classes: theta.classes,
                });
            }
        }
        Ok(())
    }

    fn recon_weight(&self) -> f64 {
        match self.kind {
            SmoothKind::Recon => 1.0,
            SmoothKind::Discriminative { lambda1, .. } => lambda1,
        }
    }

    pub fn value(&self, z: &[f64]) -> f64 {
        self.value_grad(z, false).0
    }

    /// `H(z)` and, when requested, `∇H(z)`.
    pub fn value_grad(&self, z: &[f64], want_grad: bool) -> (f64, Vec<f64>) {
        let w = self.recon_weight();
        let mut value = 0.0;
        let mut grad = vec![0.0; z.len()];
        if w != 0.0 {
            let mut resid = self.dict.apply(z);
            resid.iter_mut().zip(self.x).for_each(|(r, x)| *r -= x);
            value += w * dot(&resid, &resid);
            if want_grad {
                grad = self.dict.apply_adjoint(&resid);
                grad.iter_mut().for_each(|g| *g *= 2.0 * w);
            }
        }
        if let SmoothKind::Discriminative { label, theta, .. } = self.kind {
            let scores = theta.scores(z);
            let (loss, g) = logistic_loss(&scores, label).expect("validated label");
            value += loss;
            if want_grad {
                let back = theta.backproject(&g);
                grad.iter_mut().zip(&back).for_each(|(a, b)| *a += b);
            }
        }
        (value, grad)
    }

    /// Upper bound on the gradient's Lipschitz constant.
    pub fn lipschitz(&self) -> f64 {
        let recon = 2.0 * self.recon_weight() * power_iteration(self.dict, POWER_ITERATIONS);
        // softmax Hessian is bounded by I/2
        let disc = match self.kind {
            SmoothKind::Recon => 0.0,
            SmoothKind::Discriminative { theta, .. } => 0.5 * theta.spectral_sq(),
        };
        LIPSCHITZ_SAFETY * (recon + disc)
    }
}

/// `∇H(z)`.
pub fn smooth_grad<D: LinearOperator + ?Sized>(h: &SmoothTerm<'_, D>, z: &[f64]) -> Result<Vec<f64>> {
    h.validate()?;
    if z.len() != h.dict.input_dim() {
        return dim_err(format!(
            "code length {} vs dictionary columns {}",
            z.len(),
            h.dict.input_dim()
        ));
    }
    Ok(h.value_grad(z, true).1)
}

/// A smooth convex objective usable by the proximal-gradient driver.
pub trait Smooth {
    fn dim(&self) -> usize;
    fn value_grad(&self, z: &[f64], want_grad: bool) -> (f64, Vec<f64>);
    fn lipschitz(&self) -> f64;
}

impl<D: LinearOperator + ?Sized> Smooth for SmoothTerm<'_, D> {
    fn dim(&self) -> usize {
        self.dict.input_dim()
    }

    fn value_grad(&self, z: &[f64], want_grad: bool) -> (f64, Vec<f64>) {
        SmoothTerm::value_grad(self, z, want_grad)
    }

    fn lipschitz(&self) -> f64 {
        SmoothTerm::lipschitz(self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Lipschitz {
    PowerIteration,
    Explicit(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveConfig {
    pub lambda_l1: f64,
    pub max_iter: usize,
    pub tol: f64,
    pub lipschitz: Lipschitz,
}

impl Default for SolveConfig {
    fn default() -> Self {
        SolveConfig {
            lambda_l1: DEFAULT_LAMBDA_L1,
            max_iter: 200,
            tol: 1e-6,
            lipschitz: Lipschitz::PowerIteration,
        }
    }
}

impl SolveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_l1 >= 0.0) {
            return Err(Error::Parameter(format!(
                "lambda_l1 must be >= 0, got {}",
                self.lambda_l1
            )));
        }
        if !(self.tol > 0.0) {
            return Err(Error::Parameter(format!("tol must be > 0, got {}", self.tol)));
        }
        if let Lipschitz::Explicit(l) = self.lipschitz {
            if !(l > 0.0) || !l.is_finite() {
                return Err(Error::Parameter(format!("invalid Lipschitz constant {l}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SolveResult {
    pub z: Vec<f64>,
    /// Objective of the accepted iterate, starting with the initial point.
    pub trace: Vec<f64>,
    pub converged: bool,
}

impl SolveResult {
    pub fn objective(&self) -> f64 {
        *self.trace.last().expect("trace has the initial point")
    }

    pub fn iterations(&self) -> usize {
        self.trace.len() - 1
    }
}

#[inline]
pub fn soft_threshold(v: f64, t: f64) -> f64 {
    if v > t {
        v - t
    } else if v < -t {
        v + t
    } else {
        0.0
    }
}

fn l1(z: &[f64], weights: &L1Weights) -> f64 {
    match weights {
        L1Weights::Uniform(l) => l * z.iter().map(|v| v.abs()).sum::<f64>(),
        L1Weights::PerCoordinate(w) => z.iter().zip(w.iter()).map(|(v, w)| w * v.abs()).sum(),
    }
}

/// Per-coordinate weights of the non-smooth term.
#[derive(Debug, Clone)]
pub enum L1Weights {
    Uniform(f64),
    PerCoordinate(Vec<f64>),
}

impl L1Weights {
    #[inline]
    fn at(&self, i: usize) -> f64 {
        match self {
            L1Weights::Uniform(l) => *l,
            L1Weights::PerCoordinate(w) => w[i],
        }
    }
}

/// Proximal gradient on `f(z) + Σ wᵢ|zᵢ|`.
///
/// With `accelerated` set this is monotone FISTA: an iterate whose objective
/// rises is rejected and the momentum restarts from the last accepted point.
/// Momentum also restarts when it opposes the latest prox-gradient step.
pub fn proximal_gradient<S: Smooth + ?Sized>(
    f: &S,
    weights: &L1Weights,
    lipschitz: f64,
    max_iter: usize,
    tol: f64,
    z0: &[f64],
    accelerated: bool,
) -> Result<SolveResult> {
    if z0.len() != f.dim() {
        return dim_err(format!("initial code length {} vs {}", z0.len(), f.dim()));
    }
    if !(lipschitz > 0.0) || !lipschitz.is_finite() {
        // degenerate smooth part (e.g. an all-zero dictionary): only the prox acts
        let z: Vec<f64> = vec![0.0; z0.len()];
        let obj = f.value_grad(&z, false).0 + l1(&z, weights);
        let start = f.value_grad(z0, false).0 + l1(z0, weights);
        let (z, obj) = if obj <= start { (z, obj) } else { (z0.to_vec(), start) };
        return Ok(SolveResult {
            z,
            trace: vec![start, obj],
            converged: true,
        });
    }
    let step = 1.0 / lipschitz;
    let mut x = z0.to_vec();
    let mut fx = f.value_grad(&x, false).0 + l1(&x, weights);
    if !fx.is_finite() {
        return Err(Error::Numeric("non-finite objective at initial code".into()));
    }
    let mut y = x.clone();
    let mut t = 1.0f64;
    let mut trace = Vec::with_capacity(max_iter + 1);
    trace.push(fx);
    let mut converged = false;
    for _ in 0..max_iter {
        let (_, g) = f.value_grad(&y, true);
        let u: Vec<f64> = y
            .iter()
            .zip(&g)
            .enumerate()
            .map(|(i, (yv, gv))| soft_threshold(yv - step * gv, step * weights.at(i)))
            .collect();
        let fu = f.value_grad(&u, false).0 + l1(&u, weights);
        if !fu.is_finite() {
            return Err(Error::Numeric("non-finite objective during solve".into()));
        }
        let rel = (fx - fu).abs() / fx.abs().max(f64::MIN_POSITIVE);
        if !accelerated {
            x = u;
            fx = fu;
            y = x.clone();
        } else if fu <= fx {
            // momentum that points against the prox-gradient step is dropped
            let against: f64 = y.iter().zip(&u).zip(&x).map(|((yv, uv), xv)| (yv - uv) * (uv - xv)).sum();
            if against > 0.0 {
                t = 1.0;
                y = u.clone();
            } else {
                let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
                let beta = (t - 1.0) / t_next;
                y = u.iter().zip(&x).map(|(a, b)| a + beta * (a - b)).collect();
                t = t_next;
            }
            x = u;
            fx = fu;
        } else {
            t = 1.0;
            y = x.clone();
        }
        trace.push(fx);
        if rel < tol {
            converged = true;
            break;
        }
    }
    Ok(SolveResult {
        z: x,
        trace,
        converged,
    })
}

fn resolve_lipschitz<S: Smooth + ?Sized>(f: &S, cfg: &SolveConfig) -> f64 {
    match cfg.lipschitz {
        Lipschitz::Explicit(l) => l,
        Lipschitz::PowerIteration => f.lipschitz(),
    }
}

/// FISTA for `H(z) + λ‖z‖₁`, warm-started at `z0`.
pub fn fista_solve<S: Smooth + ?Sized>(h: &S, cfg: &SolveConfig, z0: &[f64]) -> Result<SolveResult> {
    cfg.validate()?;
    let l = resolve_lipschitz(h, cfg);
    let res = proximal_gradient(
        h,
        &L1Weights::Uniform(cfg.lambda_l1),
        l,
        cfg.max_iter,
        cfg.tol,
        z0,
        true,
    )?;
    if !res.converged {
        debug!(
            "FISTA stopped after {} iterations without reaching tol {}",
            cfg.max_iter, cfg.tol
        );
    }
    Ok(res)
}

/// Plain ISTA with the same step size and stopping rule.
pub fn ista_solve<S: Smooth + ?Sized>(h: &S, cfg: &SolveConfig, z0: &[f64]) -> Result<SolveResult> {
    cfg.validate()?;
    let l = resolve_lipschitz(h, cfg);
    proximal_gradient(
        h,
        &L1Weights::Uniform(cfg.lambda_l1),
        l,
        cfg.max_iter,
        cfg.tol,
        z0,
        false,
    )
}
