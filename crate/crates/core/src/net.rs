//! Multi-stage networks: forward and backward passes, supervised steps and
//! the linear classifier head.

use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::arch::{Arch, NormPlacement, PenaltySite, Pooling, StageShapes};
use crate::codec::{Decoder, Encoder};
use crate::encoder::{ConvEncoder, EncoderCache, EncoderGrad};
use crate::error::{dim_err, Error, Result};
use crate::nonlin::{abs_rectify, abs_rectify_backward};
use crate::norm::{local_cn_backward, local_cn_cached, NormCache};
use crate::pool::{pool_backward, pool_cached, pyramid_pool, pyramid_pool_backward, PoolCache};
use crate::solver::{logistic_loss, softmax, ClassifierParams, Smooth};
use crate::tensor::Tensor3;

const MODEL_MAGIC: &[u8; 4] = b"SFMD";
const MODEL_VERSION: u32 = 1;

pub const DEFAULT_HEAD_L1: f64 = 1e-5;
pub const DEFAULT_HEAD_L2: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct Model {
    pub arch: Arch,
    pub encoders: Vec<ConvEncoder>,
    pub head: ClassifierParams,
    pub head_l1: f64,
    pub head_l2: f64,
    pub seed: u64,
    pub rng: ChaCha8Rng,
}

impl PartialEq for Model {
    fn eq(&self, o: &Model) -> bool {
        self.arch == o.arch
            && self.encoders == o.encoders
            && self.head == o.head
            && self.head_l1.to_bits() == o.head_l1.to_bits()
            && self.head_l2.to_bits() == o.head_l2.to_bits()
            && self.seed == o.seed
            && self.rng.get_seed() == o.rng.get_seed()
            && self.rng.get_stream() == o.rng.get_stream()
            && self.rng.get_word_pos() == o.rng.get_word_pos()
    }
}

/// Activations of one stage kept for the backward pass.
#[derive(Debug, Clone)]
struct StageCache {
    enc: EncoderCache,
    encoded: Tensor3,
    norm: Option<NormCache>,
    pool_in: Tensor3,
    pool: Option<PoolCache>,
    /// Output of the pooling module (before any following normalization).
    pooled: Tensor3,
}

/// Result of a forward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    stages: Vec<StageCache>,
    pub features: Vec<f64>,
    pub logits: Vec<f64>,
}

impl Trace {
    /// Activations at the penalty site of every stage.
    pub fn site(&self, site: PenaltySite) -> Vec<&Tensor3> {
        self.stages
            .iter()
            .map(|s| match site {
                PenaltySite::PostEncoder => &s.encoded,
                PenaltySite::PostPool => &s.pooled,
            })
            .collect()
    }

    /// Mean absolute activation at `site`, averaged over stages.
    pub fn mean_activation_l1(&self, site: PenaltySite) -> f64 {
        let s = self.site(site);
        s.iter().map(|t| t.l1_norm() / t.len() as f64).sum::<f64>() / s.len() as f64
    }
}

/// Gradient with the layout of the model's trainable parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrad {
    pub encoders: Vec<EncoderGrad>,
    pub head_u: Vec<f64>,
    pub head_r: Vec<f64>,
}

impl ModelGrad {
    pub fn is_finite(&self) -> bool {
        self.encoders.iter().all(|g| g.is_finite())
            && self.head_u.iter().chain(&self.head_r).all(|v| v.is_finite())
    }
}

/// Sparse-state penalty `λ · Σ_stages mean|a_s|` at a site.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Penalty {
    pub lambda: f64,
    pub site: PenaltySite,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub loss: f64,
    pub cross_entropy: f64,
    pub correct: bool,
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

impl Model {
    /// Random filters and a zero head, drawn from `seed`.
    pub fn init(arch: &Arch, seed: u64) -> Result<Model> {
        let shapes = arch.shapes()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut encoders = Vec::with_capacity(arch.stages.len());
        for (s, sh) in arch.stages.iter().zip(&shapes) {
            let table = s.table.build(sh.input.0, s.n_out, &mut rng)?;
            encoders.push(ConvEncoder::init(s.kind, table, s.k, &mut rng));
        }
        Ok(Model {
            arch: arch.clone(),
            encoders,
            head: ClassifierParams::zeros(arch.classes, arch.feature_len()?),
            head_l1: DEFAULT_HEAD_L1,
            head_l2: DEFAULT_HEAD_L2,
            seed,
            rng,
        })
    }

    pub fn shapes(&self) -> Result<Vec<StageShapes>> {
        self.arch.shapes()
    }

    pub fn validate(&self) -> Result<()> {
        let shapes = self.arch.shapes()?;
        if self.encoders.len() != shapes.len() {
            return Err(Error::Config(format!(
                "{} encoders for {} stages",
                self.encoders.len(),
                shapes.len()
            )));
        }
        for (i, ((e, s), sh)) in self.encoders.iter().zip(&self.arch.stages).zip(&shapes).enumerate() {
            e.validate()?;
            if e.kind != s.kind || e.k() != s.k || !s.table.admits(e.bank.table(), sh.input.0, s.n_out) {
                return Err(Error::Config(format!("stage {} parameters do not match the architecture", i + 1)));
            }
        }
        let f = self.arch.feature_len()?;
        if self.head.classes != self.arch.classes || self.head.dim != f {
            return Err(Error::Config(format!(
                "head is {}x{}, architecture needs {}x{f}",
                self.head.classes, self.head.dim, self.arch.classes
            )));
        }
        Ok(())
    }

    fn stage_forward(&self, i: usize, x: &Tensor3) -> Result<(Tensor3, StageCache)> {
        let cfg = &self.arch.stages[i];
        let (encoded, enc) = self.encoders[i].forward_cached(x)?;
        let rect = abs_rectify(&encoded);
        let mut norm = None;
        let pool_in = if cfg.norm == NormPlacement::BeforePool {
            let (n, c) = local_cn_cached(&rect, &cfg.norm_cfg)?;
            norm = Some(c);
            n
        } else {
            rect
        };
        let (pooled, pool) = match &cfg.pooling {
            Pooling::Plain(p) => {
                let (o, c) = pool_cached(&pool_in, p)?;
                (o, Some(c))
            }
            Pooling::Pyramid(p) => {
                let v = pyramid_pool(&pool_in, p)?;
                (Tensor3::from_vec(v.len(), 1, 1, v)?, None)
            }
        };
        let out = if cfg.norm == NormPlacement::AfterPool {
            let (n, c) = local_cn_cached(&pooled, &cfg.norm_cfg)?;
            norm = Some(c);
            n
        } else {
            pooled.clone()
        };
        let checks = [("encoder", &encoded), ("pooling", &pooled), ("stage output", &out)];
        if let Some((what, _)) = checks.iter().find(|(_, t)| !t.is_finite()) {
            return Err(Error::Numeric(format!("non-finite values at stage {} {what}", i + 1)));
        }
        Ok((
            out,
            StageCache {
                enc,
                encoded,
                norm,
                pool_in,
                pool,
                pooled,
            },
        ))
    }

    /// Output of the last stage, without the head.
    pub fn stage_output(&self, x: &Tensor3) -> Result<Tensor3> {
        self.forward_stages(x, self.encoders.len()).map(|(t, _)| t)
    }

    /// Output of the first `n` stages.
    pub fn partial_output(&self, x: &Tensor3, n: usize) -> Result<Tensor3> {
        self.forward_stages(x, n).map(|(t, _)| t)
    }

    fn forward_stages(&self, x: &Tensor3, n: usize) -> Result<(Tensor3, Vec<StageCache>)> {
        if x.shape() != self.arch.input {
            return dim_err(format!(
                "input {:?} does not match architecture input {:?}",
                x.shape(),
                self.arch.input
            ));
        }
        let mut cur = x.clone();
        let mut caches = Vec::with_capacity(n);
        for i in 0..n {
            let (o, c) = self.stage_forward(i, &cur)?;
            caches.push(c);
            cur = o;
        }
        Ok((cur, caches))
    }

    pub fn forward(&self, x: &Tensor3) -> Result<Trace> {
        let (out, stages) = self.forward_stages(x, self.encoders.len())?;
        let features = out.into_vec();
        let logits = self.head.scores(&features);
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite logits from classifier head".into()));
        }
        Ok(Trace {
            stages,
            features,
            logits,
        })
    }

    pub fn features(&self, x: &Tensor3) -> Result<Vec<f64>> {
        self.stage_output(x).map(Tensor3::into_vec)
    }

    pub fn predict(&self, x: &Tensor3) -> Result<usize> {
        Ok(self.head.predict(&self.features(x)?))
    }

    /// Backpropagates `∂L/∂(stage output)` through every stage, adding the
    /// penalty gradient at its site when given.
    pub fn backward_stages(
        &self,
        trace: &Trace,
        grad_out: Tensor3,
        penalty: Option<Penalty>,
        want_input: bool,
    ) -> Result<(Vec<EncoderGrad>, Option<Tensor3>)> {
        let n = self.encoders.len();
        let mut grads: Vec<Option<EncoderGrad>> = vec![None; n];
        let mut g = grad_out;
        let mut input_grad = None;
        for i in (0..n).rev() {
            let cfg = &self.arch.stages[i];
            let c = &trace.stages[i];
            if cfg.norm == NormPlacement::AfterPool {
                g = local_cn_backward(c.norm.as_ref().expect("norm cache"), &g, &cfg.norm_cfg)?;
            }
            if let Some(p) = penalty.filter(|p| p.site == PenaltySite::PostPool && p.lambda != 0.0) {
                add_l1_grad(&mut g, &c.pooled, p.lambda);
            }
            g = match &cfg.pooling {
                Pooling::Plain(p) => pool_backward(c.pool.as_ref().expect("pool cache"), &g, p)?,
                Pooling::Pyramid(p) => pyramid_pool_backward(c.pool_in.shape(), g.data(), p)?,
            };
            if cfg.norm == NormPlacement::BeforePool {
                g = local_cn_backward(c.norm.as_ref().expect("norm cache"), &g, &cfg.norm_cfg)?;
            }
            g = abs_rectify_backward(&c.encoded, &g);
            if let Some(p) = penalty.filter(|p| p.site == PenaltySite::PostEncoder && p.lambda != 0.0) {
                add_l1_grad(&mut g, &c.encoded, p.lambda);
            }
            let need_input = i > 0 || want_input;
            let (eg, gin) = self.encoders[i].backward(&c.enc, &g, need_input)?;
            grads[i] = Some(eg);
            if let Some(gi) = gin {
                if i == 0 {
                    input_grad = Some(gi);
                } else {
                    g = gi;
                }
            }
        }
        Ok((grads.into_iter().map(|g| g.expect("filled")).collect(), input_grad))
    }

    /// Loss and gradient for one labeled sample:
    /// cross-entropy + optional penalty + head `l1‖U‖₁ + l2‖U‖²`.
    pub fn loss_grad(&self, x: &Tensor3, label: usize, penalty: Option<Penalty>) -> Result<(StepReport, ModelGrad)> {
        let trace = self.forward(x)?;
        let (ce, gs) = logistic_loss(&trace.logits, label)?;
        let mut loss = ce;
        if let Some(p) = penalty {
            loss += p.lambda * trace.site(p.site).iter().map(|t| t.l1_norm() / t.len() as f64).sum::<f64>();
        }
        loss += self.head_penalty();
        if !loss.is_finite() {
            return Err(Error::Numeric("non-finite loss".into()));
        }
        let mut head_u = vec![0.0; self.head.u.len()];
        let dim = self.head.dim;
        for (c, gc) in gs.iter().enumerate() {
            for (gu, f) in head_u[c * dim..(c + 1) * dim].iter_mut().zip(&trace.features) {
                *gu = gc * f;
            }
        }
        for (gu, u) in head_u.iter_mut().zip(&self.head.u) {
            *gu += self.head_l1 * sign(*u) + 2.0 * self.head_l2 * u;
        }
        let gf = self.head.backproject(&gs);
        let (m, h, w) = self.arch.shapes()?.last().expect("stages").output;
        let grad_out = Tensor3::from_vec(m, h, w, gf)?;
        let (encoders, _) = self.backward_stages(&trace, grad_out, penalty, false)?;
        let grad = ModelGrad {
            encoders,
            head_u,
            head_r: gs,
        };
        if !grad.is_finite() {
            let at = grad
                .encoders
                .iter()
                .position(|g| !g.is_finite())
                .map(|i| format!("stage {} encoder", i + 1))
                .unwrap_or_else(|| "classifier head".into());
            return Err(Error::Numeric(format!("non-finite gradient, first at {at}")));
        }
        let correct = crate::solver::argmax(&trace.logits) == label;
        Ok((StepReport { loss, cross_entropy: ce, correct }, grad))
    }

    fn head_penalty(&self) -> f64 {
        self.head
            .u
            .iter()
            .map(|u| self.head_l1 * u.abs() + self.head_l2 * u * u)
            .sum()
    }

    pub fn apply_grad(&mut self, g: &ModelGrad, lr: f64) {
        for (e, eg) in self.encoders.iter_mut().zip(&g.encoders) {
            e.apply_grad(eg, lr);
        }
        for (u, gu) in self.head.u.iter_mut().zip(&g.head_u) {
            *u -= lr * gu;
        }
        for (r, gr) in self.head.r.iter_mut().zip(&g.head_r) {
            *r -= lr * gr;
        }
    }

    /// One SGD step on every parameter.
    pub fn supervised_step(&mut self, x: &Tensor3, label: usize, lr: f64, penalty: Option<Penalty>) -> Result<StepReport> {
        let (report, grad) = self.loss_grad(x, label, penalty)?;
        if lr != 0.0 {
            self.apply_grad(&grad, lr);
        }
        Ok(report)
    }

    /// All trainable parameters: each encoder's, then head weights and biases.
    pub fn params(&self) -> Vec<f64> {
        let mut p: Vec<f64> = self.encoders.iter().flat_map(|e| e.params()).collect();
        p.extend(&self.head.u);
        p.extend(&self.head.r);
        p
    }

    pub fn set_params(&mut self, p: &[f64]) {
        let mut o = 0;
        for e in &mut self.encoders {
            let n = e.params().len();
            e.set_params(&p[o..o + n]);
            o += n;
        }
        let nu = self.head.u.len();
        self.head.u.copy_from_slice(&p[o..o + nu]);
        o += nu;
        let nr = self.head.r.len();
        self.head.r.copy_from_slice(&p[o..o + nr]);
    }

    pub fn flatten_grad(&self, g: &ModelGrad) -> Vec<f64> {
        let mut v: Vec<f64> = self
            .encoders
            .iter()
            .zip(&g.encoders)
            .flat_map(|(e, eg)| e.flatten_grad(eg))
            .collect();
        v.extend(&g.head_u);
        v.extend(&g.head_r);
        v
    }

    pub fn write_to<W: Write>(&self, w: W) -> Result<()> {
        let mut e = Encoder::new(w);
        e.bytes(MODEL_MAGIC)?;
        e.u32(MODEL_VERSION)?;
        e.str(&self.arch.name)?;
        e.str(&self.arch.descriptor())?;
        e.u64(self.seed)?;
        e.f64(self.head_l1)?;
        e.f64(self.head_l2)?;
        e.usize(self.encoders.len())?;
        for enc in &self.encoders {
            e.encoder(enc)?;
        }
        e.classifier(&self.head)?;
        e.rng(&self.rng)
    }

    pub fn read_from<R: Read>(r: R) -> Result<Model> {
        let mut d = Decoder::new(r);
        d.expect(MODEL_MAGIC)?;
        let v = d.u32()?;
        if v != MODEL_VERSION {
            return d.fail(format!("unsupported model version {v}"));
        }
        let name = d.str()?;
        let desc = d.str()?;
        let arch = Arch::from_descriptor(&name, &desc)?;
        let seed = d.u64()?;
        let head_l1 = d.f64()?;
        let head_l2 = d.f64()?;
        let n = d.usize()?;
        let encoders = (0..n).map(|_| d.encoder()).collect::<Result<Vec<_>>>()?;
        let head = d.classifier()?;
        let rng = d.rng()?;
        let m = Model {
            arch,
            encoders,
            head,
            head_l1,
            head_l2,
            seed,
            rng,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Model> {
        let bytes = std::fs::read(path)?;
        Model::read_from(&bytes[..])
    }
}

fn add_l1_grad(g: &mut Tensor3, at: &Tensor3, lambda: f64) {
    let scale = lambda / at.len() as f64;
    for (gv, a) in g.data_mut().iter_mut().zip(at.data()) {
        *gv += scale * sign(*a);
    }
}

/// Mean loss and accuracy of the model over a labeled set.
pub fn evaluate(model: &Model, samples: &[Tensor3], labels: &[usize]) -> Result<(f64, f64)> {
    if samples.len() != labels.len() {
        return dim_err("evaluate: sample/label count mismatch");
    }
    if samples.is_empty() {
        return Ok((0.0, 0.0));
    }
    let per: Vec<(f64, bool)> = samples
        .par_iter()
        .zip(labels.par_iter())
        .map(|(x, &y)| {
            let t = model.forward(x)?;
            let (l, _) = logistic_loss(&t.logits, y)?;
            Ok((l, crate::solver::argmax(&t.logits) == y))
        })
        .collect::<Result<Vec<_>>>()?;
    let n = per.len() as f64;
    let loss = per.iter().map(|p| p.0).sum::<f64>() / n;
    let acc = per.iter().filter(|p| p.1).count() as f64 / n;
    Ok((loss, acc))
}

/// Feature vectors of many samples, in order.
pub fn extract_features(model: &Model, samples: &[Tensor3]) -> Result<Vec<Vec<f64>>> {
    samples.par_iter().map(|x| model.features(x)).collect()
}

/// Settings for the head solver.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeadConfig {
    pub l1: f64,
    pub l2: f64,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            l1: DEFAULT_HEAD_L1,
            l2: DEFAULT_HEAD_L2,
            max_iter: 2000,
            tol: 1e-9,
        }
    }
}

const HEAD_CHUNK: usize = 64;

/// `(1/N) Σ CE(U fᵢ + r, yᵢ) + l2‖U‖²` over parameters laid out as `[U | r]`.
pub struct HeadObjective<'a> {
    features: &'a [Vec<f64>],
    labels: &'a [usize],
    classes: usize,
    dim: usize,
    l2: f64,
}

impl<'a> HeadObjective<'a> {
    pub fn new(features: &'a [Vec<f64>], labels: &'a [usize], classes: usize, l2: f64) -> Result<Self> {
        if features.is_empty() || features.len() != labels.len() {
            return dim_err("head training needs matching, non-empty features and labels");
        }
        let dim = features[0].len();
        if features.iter().any(|f| f.len() != dim) {
            return dim_err("feature vectors differ in length");
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::Label { label: y, classes });
        }
        if features.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite features".into()));
        }
        Ok(HeadObjective {
            features,
            labels,
            classes,
            dim,
            l2,
        })
    }

    fn unpack(&self, z: &[f64]) -> ClassifierParams {
        let nu = self.classes * self.dim;
        ClassifierParams {
            classes: self.classes,
            dim: self.dim,
            u: z[..nu].to_vec(),
            r: z[nu..].to_vec(),
        }
    }
}

impl Smooth for HeadObjective<'_> {
    fn dim(&self) -> usize {
        self.classes * (self.dim + 1)
    }

    fn value_grad(&self, z: &[f64], want_grad: bool) -> (f64, Vec<f64>) {
        let p = self.unpack(z);
        let nu = self.classes * self.dim;
        let n = self.features.len();
        // fixed chunking keeps the summation order independent of thread count
        let parts: Vec<(f64, Vec<f64>)> = (0..n.div_ceil(HEAD_CHUNK))
            .into_par_iter()
            .map(|c| {
                let mut loss = 0.0;
                let mut g = if want_grad { vec![0.0; z.len()] } else { Vec::new() };
                for i in c * HEAD_CHUNK..((c + 1) * HEAD_CHUNK).min(n) {
                    let f = &self.features[i];
                    let s = p.scores(f);
                    let (l, gs) = match logistic_loss(&s, self.labels[i]) {
                        Ok(v) => v,
                        Err(_) => return (f64::NAN, g),
                    };
                    loss += l;
                    if want_grad {
                        for (k, gk) in gs.iter().enumerate() {
                            for (gv, fv) in g[k * self.dim..(k + 1) * self.dim].iter_mut().zip(f) {
                                *gv += gk * fv;
                            }
                            g[nu + k] += gk;
                        }
                    }
                }
                (loss, g)
            })
            .collect();
        let inv = 1.0 / n as f64;
        let mut loss = 0.0;
        let mut grad = if want_grad { vec![0.0; z.len()] } else { Vec::new() };
        for (l, g) in parts {
            loss += l;
            for (a, b) in grad.iter_mut().zip(&g) {
                *a += b;
            }
        }
        loss *= inv;
        loss += self.l2 * p.u.iter().map(|u| u * u).sum::<f64>();
        for v in grad.iter_mut() {
            *v *= inv;
        }
        if want_grad {
            for (gv, u) in grad[..nu].iter_mut().zip(&p.u) {
                *gv += 2.0 * self.l2 * u;
            }
        }
        (loss, grad)
    }

    /// `½ λmax(X̃ᵀX̃)/N + 2·l2` with `X̃` the features plus a ones column.
    fn lipschitz(&self) -> f64 {
        let n = self.features.len();
        let d = self.dim + 1;
        let mut v = vec![1.0 / (d as f64).sqrt(); d];
        let mut lam = 0.0;
        for _ in 0..50 {
            let xv: Vec<f64> = self
                .features
                .iter()
                .map(|f| f.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>() + v[d - 1])
                .collect();
            let mut w = vec![0.0; d];
            for (f, s) in self.features.iter().zip(&xv) {
                for (wj, fj) in w.iter_mut().zip(f) {
                    *wj += s * fj;
                }
                w[d - 1] += s;
            }
            let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 {
                break;
            }
            lam = norm;
            v = w.into_iter().map(|x| x / norm).collect();
        }
        (0.5 * lam / n as f64 + 2.0 * self.l2) * 1.05
    }
}

/// L1/L2-regularized multinomial logistic regression on fixed features,
/// solved full-batch by monotone FISTA. Both regularizers go through an
/// exact elastic-net prox, so the step size depends on the data term only.
/// The bias is not penalized. Returns the head and its final objective.
pub fn classifier_train(features: &[Vec<f64>], labels: &[usize], classes: usize, cfg: &HeadConfig) -> Result<(ClassifierParams, f64)> {
    if !(cfg.l1 >= 0.0) || !(cfg.l2 >= 0.0) || !cfg.l1.is_finite() || !cfg.l2.is_finite() {
        return Err(Error::Config("head regularization weights must be finite and >= 0".into()));
    }
    let obj = HeadObjective::new(features, labels, classes, 0.0)?;
    let nu = classes * obj.dim;
    let reg = |z: &[f64]| -> f64 { z[..nu].iter().map(|u| cfg.l1 * u.abs() + cfg.l2 * u * u).sum() };
    let step = 1.0 / obj.lipschitz();
    let prox = |v: &mut [f64]| {
        for u in &mut v[..nu] {
            *u = crate::solver::soft_threshold(*u, step * cfg.l1) / (1.0 + 2.0 * step * cfg.l2);
        }
    };
    let mut x = vec![0.0; obj.dim()];
    let mut fx = obj.value_grad(&x, false).0 + reg(&x);
    let mut y = x.clone();
    let mut t = 1.0f64;
    for _ in 0..cfg.max_iter {
        let (_, g) = obj.value_grad(&y, true);
        let mut u: Vec<f64> = y.iter().zip(&g).map(|(a, b)| a - step * b).collect();
        prox(&mut u);
        let fu = obj.value_grad(&u, false).0 + reg(&u);
        if !fu.is_finite() {
            return Err(Error::Numeric("non-finite head objective".into()));
        }
        let rel = (fx - fu).abs() / fx.abs().max(f64::MIN_POSITIVE);
        if fu <= fx {
            let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
            let beta = (t - 1.0) / t_next;
            y = u.iter().zip(&x).map(|(a, b)| a + beta * (a - b)).collect();
            x = u;
            fx = fu;
            t = t_next;
        } else {
            t = 1.0;
            y = x.clone();
        }
        if rel < cfg.tol {
            break;
        }
    }
    Ok((obj.unpack(&x), fx))
}

/// Objective of [`classifier_train`] at given parameters.
pub fn head_objective(features: &[Vec<f64>], labels: &[usize], head: &ClassifierParams, cfg: &HeadConfig) -> Result<f64> {
    let obj = HeadObjective::new(features, labels, head.classes, cfg.l2)?;
    let mut z = head.u.clone();
    z.extend(&head.r);
    let (v, _) = obj.value_grad(&z, false);
    Ok(v + cfg.l1 * head.u.iter().map(|u| u.abs()).sum::<f64>())
}

/// Class probabilities for a feature vector.
pub fn class_probabilities(head: &ClassifierParams, features: &[f64]) -> Vec<f64> {
    softmax(&head.scores(features))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::relative_error;
    use crate::nonlin::ShrinkParams;

    fn toy(seed: u64) -> Model {
        perturbed(&Arch::preset("toy", 3).unwrap(), seed)
    }

    /// Random model with nonzero inhibition and head, so every path carries gradient.
    fn perturbed(arch: &Arch, seed: u64) -> Model {
        let mut m = Model::init(arch, seed).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(seed + 100);
        for e in &mut m.encoders {
            let n = e.n_out();
            for i in 0..n {
                for j in 0..n {
                    if i != j {
                        e.s.set(i, j, 0.1 * Tensor3::random_normal(1, 1, 1, 1.0, &mut r).data()[0]);
                    }
                }
            }
            e.shrink = ShrinkParams::new(vec![0.05; n], 4.0).unwrap();
        }
        let h = Tensor3::random_normal(1, 1, m.head.u.len(), 0.5, &mut r);
        m.head.u.copy_from_slice(h.data());
        m.head.r = (0..m.head.classes).map(|c| 0.1 * c as f64 - 0.1).collect();
        m
    }

    fn image(seed: u64) -> Tensor3 {
        Tensor3::random_normal(1, 12, 12, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn toy_output_shapes() {
        let m = toy(1);
        let s = m.shapes().unwrap();
        assert_eq!(s[0].output, (4, 5, 5));
        assert_eq!(s[1].output, (6, 1, 1));
        let t = m.forward(&image(2)).unwrap();
        assert_eq!(t.features.len(), 6);
        assert_eq!(t.logits.len(), 3);
    }

    fn full_net_fd(m: &Model, penalty: Option<Penalty>) -> f64 {
        let x = image(5);
        let (_, g) = m.loss_grad(&x, 1, penalty).unwrap();
        let analytic = m.flatten_grad(&g);
        let p0 = m.params();
        let mut num = vec![0.0; p0.len()];
        let h = 1e-6;
        let mut mm = m.clone();
        for i in 0..p0.len() {
            let mut p = p0.clone();
            p[i] += h;
            mm.set_params(&p);
            let a = mm.loss_grad(&x, 1, penalty).unwrap().0.loss;
            p[i] -= 2.0 * h;
            mm.set_params(&p);
            let b = mm.loss_grad(&x, 1, penalty).unwrap().0.loss;
            num[i] = (a - b) / (2.0 * h);
        }
        // the inhibition diagonal is pinned, so its analytic entry is irrelevant
        let mut o = 0;
        let (mut an, mut nu) = (Vec::new(), Vec::new());
        for e in &m.encoders {
            let np = e.params().len();
            let nw = e.bank.weights().len();
            let n = e.n_out();
            for j in 0..np {
                let in_s = j >= nw && j < nw + n * n;
                if in_s && (j - nw) / n == (j - nw) % n {
                    continue;
                }
                an.push(analytic[o + j]);
                nu.push(num[o + j]);
            }
            o += np;
        }
        an.extend(&analytic[o..]);
        nu.extend(&num[o..]);
        relative_error(&an, &nu)
    }

    #[test]
    fn full_network_gradient_matches_finite_differences() {
        let m = toy(3);
        assert!(full_net_fd(&m, None) < 1e-3);
        let p = Penalty {
            lambda: 0.4,
            site: PenaltySite::PostPool,
        };
        assert!(full_net_fd(&m, Some(p)) < 1e-3);
    }

    #[test]
    fn pool_then_norm_ordering_passes_gradient_check() {
        let arch = Arch::from_descriptor(
            "t",
            "input=1x12x12 classes=3 stage=si:4:3:full:pool-norm:max2/1:n3/1 stage=si:6:3:r2:pool-norm:max3/2:n3/1",
        )
        .unwrap();
        let m = perturbed(&arch, 4);
        assert!(full_net_fd(&m, None) < 1e-3);
    }

    #[test]
    fn zero_learning_rate_leaves_model_unchanged() {
        let mut m = toy(6);
        let before = m.clone();
        let r = m.supervised_step(&image(1), 2, 0.0, None).unwrap();
        assert!(r.loss > 0.0);
        assert_eq!(m, before);
    }

    #[test]
    fn zero_penalty_equals_no_penalty() {
        let m = toy(7);
        let p = Penalty {
            lambda: 0.0,
            site: PenaltySite::PostPool,
        };
        let (a, ga) = m.loss_grad(&image(2), 0, None).unwrap();
        let (b, gb) = m.loss_grad(&image(2), 0, Some(p)).unwrap();
        assert_eq!(a, b);
        assert_eq!(ga, gb);
    }

    #[test]
    fn zero_image_through_linear_stage_gives_head_bias() {
        let arch = Arch::from_descriptor("lin", "input=1x6x6 classes=2 stage=tanh:2:3:full:pool:avg2/2").unwrap();
        let mut m = Model::init(&arch, 1).unwrap();
        m.head.u = vec![1.0; m.head.u.len()];
        m.head.r = vec![0.3, -0.7];
        let t = m.forward(&Tensor3::zeros(1, 6, 6)).unwrap();
        assert_eq!(t.logits, vec![0.3, -0.7]);
    }

    #[test]
    fn model_round_trip_is_bit_exact() {
        let m = toy(9);
        let mut buf = Vec::new();
        m.write_to(&mut buf).unwrap();
        let back = Model::read_from(&buf[..]).unwrap();
        assert_eq!(back, m);
        let x = image(3);
        let a = m.forward(&x).unwrap().logits;
        let b = back.forward(&x).unwrap().logits;
        assert_eq!(
            a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        let mut again = Vec::new();
        back.write_to(&mut again).unwrap();
        assert_eq!(buf, again);
        assert!(Model::read_from(&buf[..buf.len() - 5]).is_err());
    }

    #[test]
    fn wrong_input_shape_is_rejected() {
        assert!(matches!(toy(1).forward(&Tensor3::zeros(1, 10, 12)), Err(Error::Dimension(_))));
    }

    fn blobs(n: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let mut f = Vec::new();
        let mut y = Vec::new();
        for i in 0..n {
            let c = i % 2;
            let mut v = Tensor3::random_normal(1, 1, 4, 1.0, &mut r).into_vec();
            v[0] += if c == 0 { 2.5 } else { -2.5 };
            f.push(v);
            y.push(c);
        }
        (f, y)
    }

    #[test]
    fn head_separates_separable_data() {
        let mut f = Vec::new();
        let mut y = Vec::new();
        for i in 0..40 {
            let c = i % 2;
            let s = if c == 0 { 1.0 } else { -1.0 };
            f.push(vec![s * (1.0 + (i as f64) * 0.01), (i as f64 * 0.37).sin()]);
            y.push(c);
        }
        let cfg = HeadConfig {
            l1: 0.0,
            l2: 0.0,
            ..Default::default()
        };
        let (h, _) = classifier_train(&f, &y, 2, &cfg).unwrap();
        assert!(f.iter().zip(&y).all(|(v, &c)| h.predict(v) == c));
    }

    #[test]
    fn head_converges_to_long_run_objective() {
        let (f, y) = blobs(50, 11);
        let cfg = HeadConfig {
            l1: 1e-3,
            l2: 1e-3,
            max_iter: 2000,
            tol: 1e-12,
        };
        let (_, short) = classifier_train(&f, &y, 2, &cfg).unwrap();
        let long_cfg = HeadConfig {
            max_iter: 20000,
            tol: 1e-300,
            ..cfg
        };
        let (h, long) = classifier_train(&f, &y, 2, &long_cfg).unwrap();
        assert!((short - long).abs() < 1e-4, "{short} vs {long}");
        assert!((head_objective(&f, &y, &h, &cfg).unwrap() - long).abs() < 1e-12);
    }

    #[test]
    fn strong_l2_gives_prior_predictions() {
        let (mut f, mut y) = blobs(30, 12);
        f.extend(blobs(10, 13).0.into_iter().take(10));
        y.extend(vec![0; 10]);
        let cfg = HeadConfig {
            l1: 0.0,
            l2: 1e6,
            ..Default::default()
        };
        let (h, _) = classifier_train(&f, &y, 2, &cfg).unwrap();
        assert!(h.u.iter().all(|u| u.abs() < 1e-5));
        let p = class_probabilities(&h, &f[0]);
        let prior = 25.0 / 40.0;
        assert!((p[0] - prior).abs() < 1e-3, "{p:?}");
    }
}
