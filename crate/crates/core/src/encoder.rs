//! Feed-forward code predictors.
//!
//! Two families are supported:
//!
//! * tanh: `F(x)_k = g_k · tanh(W_k · x + b_k)`
//! * shrinkage with lateral inhibition:
//!   `F(x) = sh(Wx − S · sh(Wx))`, where `S` has a zero diagonal so every unit
//!   is inhibited only by the others.
//!
//! The vector forms act on flattened patches; [`ConvEncoder`] replaces `Wx` by
//! a valid cross-correlation and applies `S` as a scalar per map pair.

use rand::Rng;

use crate::error::{dim_err, Error, Result};
use crate::linalg::{dot, Matrix};
use crate::nonlin::{shrink_scalar, shrink_scalar_grad, ShrinkParams};
use crate::tensor::{correlate_grad, correlate_valid, KernelBank, Tensor3};

/// Smallest smoothness the shrinkage keeps after a gradient step.
const MIN_BETA: f64 = 1e-2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncoderKind {
    Tanh,
    Si,
}

impl EncoderKind {
    pub fn name(&self) -> &'static str {
        match self {
            EncoderKind::Tanh => "tanh",
            EncoderKind::Si => "si",
        }
    }
}

impl std::str::FromStr for EncoderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(EncoderKind::Tanh),
            "si" => Ok(EncoderKind::Si),
            other => Err(Error::Config(format!("unknown encoder kind '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TanhEncoder {
    pub w: Matrix,
    pub gain: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TanhGrad {
    pub w: Matrix,
    pub gain: Vec<f64>,
    pub bias: Vec<f64>,
    pub x: Vec<f64>,
}

impl TanhEncoder {
    /// Row-normalized Gaussian filters, unit gains, zero biases.
    pub fn init<R: Rng + ?Sized>(n: usize, m: usize, rng: &mut R) -> Self {
        let mut w = Matrix::random_normal(n, m, rng);
        w.normalize_rows();
        TanhEncoder {
            w,
            gain: vec![1.0; n],
            bias: vec![0.0; n],
        }
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.w.cols() {
            return dim_err(format!("input length {} vs {}", x.len(), self.w.cols()));
        }
        Ok((0..self.w.rows())
            .map(|k| self.gain[k] * (dot(self.w.row(k), x) + self.bias[k]).tanh())
            .collect())
    }

    pub fn backward(&self, x: &[f64], upstream: &[f64]) -> TanhGrad {
        let (n, m) = (self.w.rows(), self.w.cols());
        let mut g = TanhGrad {
            w: Matrix::zeros(n, m),
            gain: vec![0.0; n],
            bias: vec![0.0; n],
            x: vec![0.0; m],
        };
        #[allow(clippy::needless_range_loop)]
        for k in 0..n {
            let th = (dot(self.w.row(k), x) + self.bias[k]).tanh();
            g.gain[k] = upstream[k] * th;
            let dpre = upstream[k] * self.gain[k] * (1.0 - th * th);
            g.bias[k] = dpre;
            for (gw, xv) in g.w.row_mut(k).iter_mut().zip(x) {
                *gw = dpre * xv;
            }
            for (gx, wv) in g.x.iter_mut().zip(self.w.row(k)) {
                *gx += dpre * wv;
            }
        }
        g
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SiEncoder {
    pub w: Matrix,
    pub s: Matrix,
    pub shrink: ShrinkParams,
}

impl SiEncoder {
    pub fn init<R: Rng + ?Sized>(n: usize, m: usize, rng: &mut R) -> Self {
        let mut w = Matrix::random_normal(n, m, rng);
        w.normalize_rows();
        SiEncoder {
            w,
            s: Matrix::zeros(n, n),
            shrink: ShrinkParams::with_defaults(n),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.w.rows();
        if self.s.rows() != n || self.s.cols() != n || self.shrink.len() != n {
            return dim_err("inhibition matrix or thresholds do not match code size");
        }
        if (0..n).any(|k| self.s.get(k, k) != 0.0) {
            return Err(Error::Parameter("inhibition matrix must have a zero diagonal".into()));
        }
        self.shrink.validate()
    }

    /// One inhibition pass: `sh(Wx − S · sh(Wx))`.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.validate()?;
        if x.len() != self.w.cols() {
            return dim_err(format!("input length {} vs {}", x.len(), self.w.cols()));
        }
        let beta = self.shrink.beta;
        let a = self.w.matvec(x);
        let first: Vec<f64> = a
            .iter()
            .zip(&self.shrink.b)
            .map(|(&v, &b)| shrink_scalar(v, b, beta))
            .collect();
        let inhib = self.s.matvec(&first);
        Ok(a.iter()
            .zip(&inhib)
            .zip(&self.shrink.b)
            .map(|((&av, &iv), &b)| shrink_scalar(av - iv, b, beta))
            .collect())
    }
}

/// Convolutional encoder for one network stage.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvEncoder {
    pub kind: EncoderKind,
    pub bank: KernelBank,
    /// tanh gains (unused by the shrinkage encoder)
    pub gain: Vec<f64>,
    /// tanh biases (unused by the shrinkage encoder)
    pub bias: Vec<f64>,
    /// Inhibition between output maps (shrinkage encoder only).
    pub s: Matrix,
    pub shrink: ShrinkParams,
}

/// Intermediate maps kept for the backward pass.
#[derive(Debug, Clone)]
pub struct EncoderCache {
    input: Tensor3,
    pre: Tensor3,
    /// `sh(A)` (shrinkage) or `tanh(A + b)` (tanh)
    first: Tensor3,
    /// `A − S·sh(A)` (shrinkage only)
    inhibited: Tensor3,
}

/// Gradient with the same layout as the encoder's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderGrad {
    pub bank: Vec<f64>,
    pub gain: Vec<f64>,
    pub bias: Vec<f64>,
    pub s: Vec<f64>,
    pub shrink_b: Vec<f64>,
    pub beta: f64,
}

impl EncoderGrad {
    pub fn is_finite(&self) -> bool {
        self.bank
            .iter()
            .chain(&self.gain)
            .chain(&self.bias)
            .chain(&self.s)
            .chain(&self.shrink_b)
            .all(|v| v.is_finite())
            && self.beta.is_finite()
    }

    pub fn scale(&mut self, a: f64) {
        for v in self
            .bank
            .iter_mut()
            .chain(self.gain.iter_mut())
            .chain(self.bias.iter_mut())
            .chain(self.s.iter_mut())
            .chain(self.shrink_b.iter_mut())
        {
            *v *= a;
        }
        self.beta *= a;
    }

    pub fn add(&mut self, other: &EncoderGrad) {
        let pairs = self
            .bank
            .iter_mut()
            .zip(&other.bank)
            .chain(self.gain.iter_mut().zip(&other.gain))
            .chain(self.bias.iter_mut().zip(&other.bias))
            .chain(self.s.iter_mut().zip(&other.s))
            .chain(self.shrink_b.iter_mut().zip(&other.shrink_b));
        for (a, b) in pairs {
            *a += b;
        }
        self.beta += other.beta;
    }
}

impl ConvEncoder {
    /// Filters Gaussian then normalized per output map; tanh gains 1, biases 0;
    /// zero inhibition; default shrinkage.
    pub fn init<R: Rng + ?Sized>(
        kind: EncoderKind,
        table: crate::tensor::ConnectionTable,
        k: usize,
        rng: &mut R,
    ) -> Self {
        let bank = KernelBank::random_normalized(table, k, rng);
        ConvEncoder::from_bank(kind, bank)
    }

    pub fn from_bank(kind: EncoderKind, bank: KernelBank) -> Self {
        let n = bank.n_out();
        ConvEncoder {
            kind,
            bank,
            gain: vec![1.0; n],
            bias: vec![0.0; n],
            s: Matrix::zeros(n, n),
            shrink: ShrinkParams::with_defaults(n),
        }
    }

    pub fn n_out(&self) -> usize {
        self.bank.n_out()
    }

    pub fn n_in(&self) -> usize {
        self.bank.n_in()
    }

    pub fn k(&self) -> usize {
        self.bank.k()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_out();
        if self.gain.len() != n || self.bias.len() != n || self.shrink.len() != n {
            return dim_err("encoder parameter vectors do not match map count");
        }
        if self.s.rows() != n || self.s.cols() != n {
            return dim_err("inhibition matrix does not match map count");
        }
        if (0..n).any(|k| self.s.get(k, k) != 0.0) {
            return Err(Error::Parameter("inhibition matrix must have a zero diagonal".into()));
        }
        self.shrink.validate()
    }

    pub fn forward(&self, x: &Tensor3) -> Result<Tensor3> {
        self.forward_cached(x).map(|(out, _)| out)
    }

    pub fn forward_cached(&self, x: &Tensor3) -> Result<(Tensor3, EncoderCache)> {
        let pre = correlate_valid(x, &self.bank, self.n_out())?;
        let (n, h, w) = pre.shape();
        let plane = h * w;
        match self.kind {
            EncoderKind::Tanh => {
                let mut first = pre.clone();
                let mut out = pre.clone();
                for p in 0..n {
                    let (g, b) = (self.gain[p], self.bias[p]);
                    for (t, o) in first.map_mut(p).iter_mut().zip(out.map_mut(p)) {
                        *t = (*t + b).tanh();
                        *o = g * *t;
                    }
                }
                Ok((
                    out,
                    EncoderCache {
                        input: x.clone(),
                        pre,
                        first,
                        inhibited: Tensor3::zeros(0, 0, 0),
                    },
                ))
            }
            EncoderKind::Si => {
                let beta = self.shrink.beta;
                let mut first = pre.clone();
                for p in 0..n {
                    let b = self.shrink.b[p];
                    first
                        .map_mut(p)
                        .iter_mut()
                        .for_each(|v| *v = shrink_scalar(*v, b, beta));
                }
                let mut inhibited = pre.clone();
                for p in 0..n {
                    for q in 0..n {
                        let spq = self.s.get(p, q);
                        if p == q || spq == 0.0 {
                            continue;
                        }
                        let src = &first.data()[q * plane..(q + 1) * plane];
                        for (d, s) in inhibited.map_mut(p).iter_mut().zip(src) {
                            *d -= spq * s;
                        }
                    }
                }
                let mut out = inhibited.clone();
                for p in 0..n {
                    let b = self.shrink.b[p];
                    out.map_mut(p)
                        .iter_mut()
                        .for_each(|v| *v = shrink_scalar(*v, b, beta));
                }
                Ok((
                    out,
                    EncoderCache {
                        input: x.clone(),
                        pre,
                        first,
                        inhibited,
                    },
                ))
            }
        }
    }

    /// Gradients of a scalar loss given `∂L/∂F(x)`; returns the input gradient
    /// when `want_input` is set.
    pub fn backward(
        &self,
        cache: &EncoderCache,
        grad_out: &Tensor3,
        want_input: bool,
    ) -> Result<(EncoderGrad, Option<Tensor3>)> {
        if !grad_out.same_shape(&cache.pre) {
            return dim_err("encoder backward: gradient shape mismatch");
        }
        let n = self.n_out();
        let plane = cache.pre.plane_len();
        let mut grad = EncoderGrad {
            bank: Vec::new(),
            gain: vec![0.0; n],
            bias: vec![0.0; n],
            s: vec![0.0; n * n],
            shrink_b: vec![0.0; n],
            beta: 0.0,
        };
        let mut dpre = Tensor3::zeros(n, cache.pre.height(), cache.pre.width());
        match self.kind {
            EncoderKind::Tanh => {
                for p in 0..n {
                    let g = self.gain[p];
                    let th = cache.first.map(p);
                    let go = grad_out.map(p);
                    let mut dg = 0.0;
                    let mut db = 0.0;
                    for ((d, &t), &u) in dpre.map_mut(p).iter_mut().zip(th).zip(go) {
                        dg += u * t;
                        *d = u * g * (1.0 - t * t);
                        db += *d;
                    }
                    grad.gain[p] = dg;
                    grad.bias[p] = db;
                }
            }
            EncoderKind::Si => {
                let beta = self.shrink.beta;
                // through the outer shrinkage
                let mut dinhib = Tensor3::zeros(n, cache.pre.height(), cache.pre.width());
                for p in 0..n {
                    let b = self.shrink.b[p];
                    let c = cache.inhibited.map(p);
                    let go = grad_out.map(p);
                    for ((d, &cv), &u) in dinhib.map_mut(p).iter_mut().zip(c).zip(go) {
                        let (dx, db, dbeta) = shrink_scalar_grad(cv, b, beta);
                        *d = u * dx;
                        grad.shrink_b[p] += u * db;
                        grad.beta += u * dbeta;
                    }
                }
                // through the inhibition term
                let mut dfirst = Tensor3::zeros(n, cache.pre.height(), cache.pre.width());
                for p in 0..n {
                    let dc = dinhib.map(p).to_vec();
                    for q in 0..n {
                        if p == q {
                            continue;
                        }
                        let bq = &cache.first.data()[q * plane..(q + 1) * plane];
                        grad.s[p * n + q] = -dot(&dc, bq);
                        let spq = self.s.get(p, q);
                        if spq != 0.0 {
                            for (d, v) in dfirst.map_mut(q).iter_mut().zip(&dc) {
                                *d -= spq * v;
                            }
                        }
                    }
                }
                // through the inner shrinkage
                for p in 0..n {
                    let b = self.shrink.b[p];
                    let a = cache.pre.map(p);
                    let df = dfirst.map(p);
                    let dc = dinhib.map(p);
                    for (((d, &av), &u), &c) in dpre.map_mut(p).iter_mut().zip(a).zip(df).zip(dc) {
                        let (dx, db, dbeta) = shrink_scalar_grad(av, b, beta);
                        *d = c + u * dx;
                        grad.shrink_b[p] += u * db;
                        grad.beta += u * dbeta;
                    }
                }
            }
        }
        let (gin, gk) = if want_input {
            let (gi, gk) = correlate_grad(&cache.input, &self.bank, &dpre)?;
            (Some(gi), gk)
        } else {
            (
                None,
                crate::tensor::correlate_kernel_grad(&cache.input, &self.bank, &dpre)?,
            )
        };
        grad.bank = gk.weights().to_vec();
        Ok((grad, gin))
    }

    pub fn zero_grad(&self) -> EncoderGrad {
        let n = self.n_out();
        EncoderGrad {
            bank: vec![0.0; self.bank.weights().len()],
            gain: vec![0.0; n],
            bias: vec![0.0; n],
            s: vec![0.0; n * n],
            shrink_b: vec![0.0; n],
            beta: 0.0,
        }
    }

    /// `θ ← θ − lr·∇`, restricted to the parameters the encoder family uses.
    /// The inhibition diagonal is pinned to zero afterwards.
    pub fn apply_grad(&mut self, grad: &EncoderGrad, lr: f64) {
        for (w, g) in self.bank.weights_mut().iter_mut().zip(&grad.bank) {
            *w -= lr * g;
        }
        match self.kind {
            EncoderKind::Tanh => {
                for (v, g) in self.gain.iter_mut().zip(&grad.gain) {
                    *v -= lr * g;
                }
                for (v, g) in self.bias.iter_mut().zip(&grad.bias) {
                    *v -= lr * g;
                }
            }
            EncoderKind::Si => {
                let n = self.n_out();
                for (v, g) in self.s.data_mut().iter_mut().zip(&grad.s) {
                    *v -= lr * g;
                }
                for k in 0..n {
                    self.s.set(k, k, 0.0);
                }
                for (v, g) in self.shrink.b.iter_mut().zip(&grad.shrink_b) {
                    *v -= lr * g;
                }
                self.shrink.beta = (self.shrink.beta - lr * grad.beta).max(MIN_BETA);
            }
        }
    }

    /// All trainable parameters of this encoder family, flattened.
    pub fn params(&self) -> Vec<f64> {
        let mut p = self.bank.weights().to_vec();
        match self.kind {
            EncoderKind::Tanh => {
                p.extend(&self.gain);
                p.extend(&self.bias);
            }
            EncoderKind::Si => {
                p.extend(self.s.data());
                p.extend(&self.shrink.b);
                p.push(self.shrink.beta);
            }
        }
        p
    }

    pub fn set_params(&mut self, p: &[f64]) {
        let nw = self.bank.weights().len();
        self.bank.weights_mut().copy_from_slice(&p[..nw]);
        let n = self.n_out();
        let mut o = nw;
        match self.kind {
            EncoderKind::Tanh => {
                self.gain.copy_from_slice(&p[o..o + n]);
                o += n;
                self.bias.copy_from_slice(&p[o..o + n]);
            }
            EncoderKind::Si => {
                self.s.data_mut().copy_from_slice(&p[o..o + n * n]);
                o += n * n;
                self.shrink.b.copy_from_slice(&p[o..o + n]);
                o += n;
                self.shrink.beta = p[o];
            }
        }
    }

    /// The gradient flattened in [`ConvEncoder::params`] order.
    pub fn flatten_grad(&self, g: &EncoderGrad) -> Vec<f64> {
        let mut v = g.bank.clone();
        match self.kind {
            EncoderKind::Tanh => {
                v.extend(&g.gain);
                v.extend(&g.bias);
            }
            EncoderKind::Si => {
                v.extend(&g.s);
                v.extend(&g.shrink_b);
                v.push(g.beta);
            }
        }
        v
    }
}

/// One SGD step on `‖z* − F(x)‖²` with the target held fixed. Returns the
/// prediction error before the step.
pub fn encoder_fit_step(enc: &mut ConvEncoder, x: &Tensor3, target: &Tensor3, lr: f64) -> Result<f64> {
    let (pred, cache) = enc.forward_cached(x)?;
    if !pred.same_shape(target) {
        return dim_err(format!(
            "target code shape {:?} vs prediction {:?}",
            target.shape(),
            pred.shape()
        ));
    }
    let mut diff = pred;
    diff.axpy(-1.0, target);
    let loss = diff.norm_sq();
    diff.scale(2.0);
    let (grad, _) = enc.backward(&cache, &diff, false)?;
    if !grad.is_finite() {
        return Err(Error::Numeric("non-finite encoder gradient".into()));
    }
    enc.apply_grad(&grad, lr);
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_slice_fn, relative_error};
    use crate::tensor::ConnectionTable;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn randn(n: usize, r: &mut ChaCha8Rng) -> Vec<f64> {
        Tensor3::random_normal(1, 1, n, 1.0, r).into_vec()
    }

    #[test]
    fn tanh_zero_cases() {
        let mut r = rng(1);
        let mut enc = TanhEncoder::init(4, 6, &mut r);
        assert!(enc.forward(&[0.0; 6]).unwrap().iter().all(|&v| v == 0.0));
        let x = randn(6, &mut r);
        enc.gain = vec![0.0; 4];
        assert!(enc.forward(&x).unwrap().iter().all(|&v| v == 0.0));
        assert!(enc.forward(&[0.0; 5]).is_err());
    }

    #[test]
    fn tanh_gradient() {
        let mut r = rng(2);
        let mut enc = TanhEncoder::init(3, 5, &mut r);
        enc.bias = vec![0.1, -0.3, 0.2];
        enc.gain = vec![1.5, 0.7, -1.0];
        let x = randn(5, &mut r);
        let u = randn(3, &mut r);
        let g = enc.backward(&x, &u);
        let loss_x = |v: &[f64]| dot(&enc.forward(v).unwrap(), &u);
        assert!(check_slice_fn(loss_x, &x, &g.x, 1e-6) < 1e-5);
        let w0 = enc.w.data().to_vec();
        let loss_w = |v: &[f64]| {
            let mut e = enc.clone();
            e.w.data_mut().copy_from_slice(v);
            dot(&e.forward(&x).unwrap(), &u)
        };
        assert!(check_slice_fn(loss_w, &w0, g.w.data(), 1e-6) < 1e-5);
        let loss_g = |v: &[f64]| {
            let mut e = enc.clone();
            e.gain.copy_from_slice(v);
            dot(&e.forward(&x).unwrap(), &u)
        };
        assert!(check_slice_fn(loss_g, &enc.gain, &g.gain, 1e-6) < 1e-5);
        let loss_b = |v: &[f64]| {
            let mut e = enc.clone();
            e.bias.copy_from_slice(v);
            dot(&e.forward(&x).unwrap(), &u)
        };
        assert!(check_slice_fn(loss_b, &enc.bias, &g.bias, 1e-6) < 1e-5);
    }

    #[test]
    fn si_without_inhibition_is_plain_shrink() {
        let mut r = rng(3);
        let enc = SiEncoder::init(4, 7, &mut r);
        let x = randn(7, &mut r);
        let a = enc.w.matvec(&x);
        let expect = crate::nonlin::soft_shrink(&a, &enc.shrink).unwrap();
        assert_eq!(enc.forward(&x).unwrap(), expect);
        assert!(enc.forward(&[0.0; 7]).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn si_hand_evaluated_toy() {
        let enc = SiEncoder {
            w: Matrix::from_vec(2, 2, vec![1.0, 0.5, -0.25, 2.0]).unwrap(),
            s: Matrix::from_vec(2, 2, vec![0.0, 0.3, -0.2, 0.0]).unwrap(),
            shrink: ShrinkParams::new(vec![0.1, 0.4], 3.0).unwrap(),
        };
        let x = [0.8, -0.6];
        // direct evaluation of sh(Wx − S·sh(Wx))
        let sh = |v: f64, b: f64| {
            v.signum() * (((3.0 * b).exp() + (3.0 * v.abs()).exp() - 1.0).ln() / 3.0 - b)
        };
        let a0 = 1.0 * 0.8 + 0.5 * -0.6;
        let a1 = -0.25 * 0.8 + 2.0 * -0.6;
        let s0 = sh(a0, 0.1);
        let s1 = sh(a1, 0.4);
        let expect = [sh(a0 - 0.3 * s1, 0.1), sh(a1 + 0.2 * s0, 0.4)];
        let got = enc.forward(&x).unwrap();
        for (g, e) in got.iter().zip(&expect) {
            assert!((g - e).abs() < 1e-12, "{g} vs {e}");
        }
    }

    #[test]
    fn si_rejects_nonzero_diagonal() {
        let mut r = rng(4);
        let mut enc = SiEncoder::init(3, 3, &mut r);
        enc.s.set(1, 1, 0.5);
        assert!(matches!(enc.forward(&[0.0; 3]), Err(Error::Parameter(_))));
    }

    #[test]
    fn si_is_odd_in_the_input() {
        let mut r = rng(5);
        let mut enc = SiEncoder::init(5, 8, &mut r);
        enc.s = Matrix::random_normal(5, 5, &mut r);
        for k in 0..5 {
            enc.s.set(k, k, 0.0);
        }
        let x = randn(8, &mut r);
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        let a = enc.forward(&x).unwrap();
        let b = enc.forward(&neg).unwrap();
        for (u, v) in a.iter().zip(&b) {
            assert_eq!(*u, -*v);
        }
    }

    fn conv_from_vector_si(v: &SiEncoder) -> ConvEncoder {
        let (n, m) = (v.w.rows(), v.w.cols());
        let bank =
            KernelBank::from_weights(ConnectionTable::full(m, n), 1, v.w.data().to_vec()).unwrap();
        let mut c = ConvEncoder::from_bank(EncoderKind::Si, bank);
        c.s = v.s.clone();
        c.shrink = v.shrink.clone();
        c
    }

    #[test]
    fn conv_matches_vector_on_unit_extent() {
        let mut r = rng(6);
        let mut v = SiEncoder::init(6, 9, &mut r);
        v.s = Matrix::random_normal(6, 6, &mut r);
        for k in 0..6 {
            v.s.set(k, k, 0.0);
        }
        v.shrink.b = randn(6, &mut r).iter().map(|x| x.abs() * 0.3).collect();
        let c = conv_from_vector_si(&v);
        let x = randn(9, &mut r);
        let xt = Tensor3::from_vec(9, 1, 1, x.clone()).unwrap();
        let conv = c.forward(&xt).unwrap();
        let vec = v.forward(&x).unwrap();
        for (a, b) in conv.data().iter().zip(&vec) {
            assert!((a - b).abs() < 1e-12);
        }

        let t = TanhEncoder::init(4, 9, &mut r);
        let bank =
            KernelBank::from_weights(ConnectionTable::full(9, 4), 1, t.w.data().to_vec()).unwrap();
        let ct = ConvEncoder::from_bank(EncoderKind::Tanh, bank);
        let conv = ct.forward(&xt).unwrap();
        let vec = t.forward(&x).unwrap();
        for (a, b) in conv.data().iter().zip(&vec) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_output_shape() {
        let mut r = rng(7);
        let enc = ConvEncoder::init(EncoderKind::Si, ConnectionTable::full(1, 4), 9, &mut r);
        let out = enc.forward(&Tensor3::zeros(1, 143, 143)).unwrap();
        assert_eq!(out.shape(), (4, 135, 135));
    }

    fn randomized_conv(kind: EncoderKind, seed: u64) -> ConvEncoder {
        let mut r = rng(seed);
        let table = ConnectionTable::random(3, 4, 2, &mut r).unwrap();
        let mut enc = ConvEncoder::init(kind, table, 3, &mut r);
        enc.gain = randn(4, &mut r);
        enc.bias = randn(4, &mut r).iter().map(|v| 0.3 * v).collect();
        enc.s = Matrix::random_normal(4, 4, &mut r);
        for k in 0..4 {
            enc.s.set(k, k, 0.0);
        }
        enc.shrink.b = vec![0.05, 0.2, 0.1, 0.3];
        enc.shrink.beta = 4.0;
        enc
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        for kind in [EncoderKind::Tanh, EncoderKind::Si] {
            let enc = randomized_conv(kind, 8);
            let mut r = rng(9);
            let x = Tensor3::random_normal(3, 6, 7, 1.0, &mut r);
            let u = Tensor3::random_normal(4, 4, 5, 1.0, &mut r);
            let (_, cache) = enc.forward_cached(&x).unwrap();
            let (g, gx) = enc.backward(&cache, &u, true).unwrap();
            let p0 = enc.params();
            let analytic = enc.flatten_grad(&g);
            // skip the pinned diagonal of S, whose gradient is not applied
            let err = check_slice_fn(
                |p| {
                    let mut e = enc.clone();
                    e.set_params(p);
                    for k in 0..4 {
                        e.s.set(k, k, 0.0);
                    }
                    e.forward(&x).unwrap().dot(&u)
                },
                &p0,
                &analytic,
                1e-6,
            );
            assert!(err < 1e-4, "{kind:?} params: {err}");
            let err = crate::gradcheck::check_tensor_fn(
                |t| enc.forward(t).unwrap().dot(&u),
                &x,
                gx.as_ref().unwrap(),
                1e-6,
            );
            assert!(err < 1e-4, "{kind:?} input: {err}");
        }
    }

    #[test]
    fn fit_step_gradient_and_fixed_point() {
        for kind in [EncoderKind::Tanh, EncoderKind::Si] {
            let enc = randomized_conv(kind, 10);
            let mut r = rng(11);
            let x = Tensor3::random_normal(3, 5, 5, 1.0, &mut r);
            let target = Tensor3::random_normal(4, 3, 3, 0.5, &mut r);
            // fit-step gradient equals the gradient of the squared error
            let (pred, cache) = enc.forward_cached(&x).unwrap();
            let mut d = pred.clone();
            d.axpy(-1.0, &target);
            d.scale(2.0);
            let (g, _) = enc.backward(&cache, &d, false).unwrap();
            let err = check_slice_fn(
                |p| {
                    let mut e = enc.clone();
                    e.set_params(p);
                    for k in 0..4 {
                        e.s.set(k, k, 0.0);
                    }
                    let mut diff = e.forward(&x).unwrap();
                    diff.axpy(-1.0, &target);
                    diff.norm_sq()
                },
                &enc.params(),
                &enc.flatten_grad(&g),
                1e-6,
            );
            assert!(err < 1e-4, "{err}");

            // target equal to the prediction: nothing moves
            let mut fixed = enc.clone();
            let loss = encoder_fit_step(&mut fixed, &x, &pred, 0.1).unwrap();
            assert_eq!(loss, 0.0);
            assert_eq!(fixed, enc);
        }
    }

    #[test]
    fn fit_steps_reduce_prediction_error() {
        for kind in [EncoderKind::Tanh, EncoderKind::Si] {
            let mut enc = randomized_conv(kind, 12);
            let mut r = rng(13);
            let x = Tensor3::random_normal(3, 5, 5, 1.0, &mut r);
            let target = Tensor3::random_normal(4, 3, 3, 0.5, &mut r);
            let mut prev = f64::INFINITY;
            for _ in 0..100 {
                let loss = encoder_fit_step(&mut enc, &x, &target, 1e-3).unwrap();
                assert!(loss < prev, "{kind:?}: {loss} !< {prev}");
                prev = loss;
            }
            assert!((0..4).all(|k| enc.s.get(k, k) == 0.0));
        }
    }

    #[test]
    fn flattened_gradient_round_trip() {
        let enc = randomized_conv(EncoderKind::Si, 14);
        let p = enc.params();
        let mut e2 = enc.clone();
        e2.set_params(&p);
        assert_eq!(e2, enc);
        assert!(relative_error(&p, &e2.params()) == 0.0);
    }
}
