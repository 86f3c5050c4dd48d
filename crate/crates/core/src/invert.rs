//! Feature-map inversion: find an input whose stage outputs match a
//! recorded target, by steepest descent in input space.

use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::arch::{Arch, NormPlacement, Pooling};
use crate::data::{to_gray_bytes, write_pgm};
use crate::error::{dim_err, Error, Result};
use crate::net::Model;
use crate::pool::PoolSpec;
use crate::tensor::Tensor3;

pub const INIT_STD: f64 = 0.1;
const ARMIJO_C: f64 = 1e-4;
const MAX_HALVINGS: usize = 60;

#[derive(Debug, Clone, PartialEq)]
pub enum InvertInit {
    /// Gaussian image with standard deviation [`INIT_STD`].
    Random(u64),
    Image(Tensor3),
}

/// Which activations are matched.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatchPoint {
    /// Final output of the last stage.
    Output,
    /// Last stage before its pooling module.
    PrePool,
}

#[derive(Debug, Clone)]
pub struct InversionTask<'a> {
    pub model: &'a Model,
    pub target: Tensor3,
    pub init: InvertInit,
    pub steps: usize,
    /// First trial step of the line search.
    pub step: f64,
}

#[derive(Debug, Clone)]
pub struct Inversion {
    pub image: Tensor3,
    /// Loss before the first step, then after each accepted step.
    pub trace: Vec<f64>,
    pub reseeded: bool,
    /// Stopped because no step decreased the loss.
    pub stalled: bool,
}

/// The model truncated so its output is the last stage's pre-pooling
/// activations. Parameters are shared by value.
pub fn matching_model(model: &Model, point: MatchPoint) -> Result<Model> {
    let mut m = model.clone();
    if point == MatchPoint::PrePool {
        let last = m.arch.stages.last_mut().expect("stages");
        last.pooling = Pooling::Plain(PoolSpec::avg(1, 1));
        if last.norm == NormPlacement::AfterPool {
            last.norm = NormPlacement::None;
        }
        m.arch.name = format!("{}-prepool", m.arch.name);
        m.head = crate::solver::ClassifierParams::zeros(m.arch.classes, m.arch.feature_len()?);
    }
    Ok(m)
}

/// `‖F(x) − target‖²` and its gradient with respect to `x`.
pub fn input_loss_grad(model: &Model, x: &Tensor3, target: &Tensor3) -> Result<(f64, Tensor3)> {
    let trace = model.forward(x)?;
    let (m, h, w) = model.shapes()?.last().expect("stages").output;
    if target.shape() != (m, h, w) {
        return dim_err(format!("target {:?} vs model output {:?}", target.shape(), (m, h, w)));
    }
    let mut diff = Tensor3::from_vec(m, h, w, trace.features.clone())?;
    diff.axpy(-1.0, target);
    let loss = diff.norm_sq();
    diff.scale(2.0);
    let (_, g) = model.backward_stages(&trace, diff, None, true)?;
    Ok((loss, g.expect("input gradient requested")))
}

fn loss_only(model: &Model, x: &Tensor3, target: &Tensor3) -> Result<f64> {
    let mut d = model.stage_output(x)?;
    d.axpy(-1.0, target);
    Ok(d.norm_sq())
}

fn random_image(shape: (usize, usize, usize), seed: u64) -> Tensor3 {
    Tensor3::random_normal(shape.0, shape.1, shape.2, INIT_STD, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Steepest descent with Armijo backtracking (factor 0.5); the loss trace
/// never increases. A zero gradient at a random start triggers one re-seed.
pub fn hallucinate(task: &InversionTask<'_>) -> Result<Inversion> {
    let model = task.model;
    if !task.target.is_finite() {
        return Err(Error::Numeric("inversion target is not finite".into()));
    }
    if !(task.step > 0.0) || !task.step.is_finite() {
        return Err(Error::Config(format!("inversion step must be > 0, got {}", task.step)));
    }
    let mut x = match &task.init {
        InvertInit::Random(seed) => random_image(model.arch.input, *seed),
        InvertInit::Image(img) => img.clone(),
    };
    let (mut loss, mut g) = input_loss_grad(model, &x, &task.target)?;
    let mut reseeded = false;
    if loss > 0.0 && g.norm_sq() == 0.0 {
        if let InvertInit::Random(seed) = task.init {
            log::warn!("zero input gradient at the initial image, re-seeding");
            x = random_image(model.arch.input, seed.wrapping_add(1));
            (loss, g) = input_loss_grad(model, &x, &task.target)?;
            reseeded = true;
        }
    }
    let mut trace = vec![loss];
    let mut stalled = false;
    let mut alpha = task.step;
    for _ in 0..task.steps {
        let gsq = g.norm_sq();
        if loss == 0.0 || gsq == 0.0 {
            stalled = loss > 0.0;
            break;
        }
        let mut accepted = None;
        for _ in 0..MAX_HALVINGS {
            let mut cand = x.clone();
            cand.axpy(-alpha, &g);
            let l = loss_only(model, &cand, &task.target)?;
            if l.is_finite() && l <= loss - ARMIJO_C * alpha * gsq {
                accepted = Some((cand, l));
                break;
            }
            alpha *= 0.5;
        }
        match accepted {
            Some((cand, _)) => {
                x = cand;
                (loss, g) = input_loss_grad(model, &x, &task.target)?;
                trace.push(loss);
                alpha *= 2.0;
            }
            None => {
                stalled = true;
                break;
            }
        }
    }
    Ok(Inversion {
        image: x,
        trace,
        reseeded,
        stalled,
    })
}

/// Reconstruction error after the best affine fit `a·r + b` to the
/// original, relative to the original's variance. Rectification and
/// normalization leave sign, gain and offset unidentifiable, so they are
/// factored out.
pub fn normalized_mse(recon: &Tensor3, original: &Tensor3) -> Result<f64> {
    if !recon.same_shape(original) {
        return dim_err("normalized_mse: shape mismatch");
    }
    let n = original.len() as f64;
    let (mr, mo) = (recon.mean(), original.mean());
    let (mut srr, mut soo, mut sro) = (0.0, 0.0, 0.0);
    for (r, o) in recon.data().iter().zip(original.data()) {
        srr += (r - mr) * (r - mr);
        soo += (o - mo) * (o - mo);
        sro += (r - mr) * (o - mo);
    }
    if soo == 0.0 {
        return Err(Error::Numeric("original image has zero variance".into()));
    }
    let resid = if srr == 0.0 { soo } else { soo - sro * sro / srr };
    Ok(resid.max(0.0) / n / (soo / n))
}

/// Paired models with identical filters, differing only by the presence
/// of normalization modules.
pub fn paired_models(arch: &Arch, seed: u64) -> Result<(Model, Model)> {
    let with = Model::init(arch, seed)?;
    let mut without = with.clone();
    without.arch = arch.without_norm();
    without.validate()?;
    Ok((with, without))
}

/// Small two-stage architecture for desk-scale inversion studies.
pub fn toy_inversion_arch() -> Arch {
    Arch::from_descriptor(
        "inversion-toy",
        "input=1x32x32 stage=si:16:5:full:norm-pool:avg3/2:n7/1.6 stage=si:64:3:r8:norm-pool:avg3/1:n5/1.2",
    )
    .expect("valid descriptor")
}

pub fn build_inversion_arch(normalize: bool) -> Arch {
    let name = if normalize { "inversion" } else { "inversion-nocn" };
    Arch::preset(name, 2).expect("preset")
}

pub fn trace_csv(trace: &[f64]) -> String {
    let mut s = String::from("step,loss\n");
    for (i, l) in trace.iter().enumerate() {
        let _ = writeln!(s, "{i},{l}");
    }
    s
}

/// Side-by-side grayscale panels of map 0, each scaled independently,
/// separated by 2-pixel black bars.
pub fn write_triptych(path: &Path, panels: &[&Tensor3]) -> Result<()> {
    let first = panels.first().ok_or_else(|| Error::Config("no panels".into()))?;
    let (h, w) = (first.height(), first.width());
    if panels.iter().any(|p| p.height() != h || p.width() != w) {
        return dim_err("triptych panels differ in size");
    }
    let gap = 2;
    let total_w = panels.len() * w + (panels.len() - 1) * gap;
    let mut px = vec![0u8; total_w * h];
    for (k, p) in panels.iter().enumerate() {
        let g = to_gray_bytes(p.map(0));
        let x0 = k * (w + gap);
        for i in 0..h {
            px[i * total_w + x0..i * total_w + x0 + w].copy_from_slice(&g[i * w..(i + 1) * w]);
        }
    }
    write_pgm(path, total_w, h, &px)
}
