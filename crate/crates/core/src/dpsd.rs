//! Joint training of a dictionary, a feed-forward encoder and (optionally) a
//! linear discriminant by block coordinate descent.
//!
//! Per sample: the encoder predicts a code, FISTA refines it into the optimal
//! code `z*` (reconstruction energy, plus a logistic term in discriminative
//! mode), then one SGD step is taken on the dictionary (followed by
//! renormalization), on the discriminant, and on the encoder.
//!
//! Patch mode and convolutional mode share one implementation: a patch is a
//! region exactly the size of the kernel, so its code maps are `1 × 1`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::codec::{Decoder, Encoder};
use crate::encoder::{encoder_fit_step, ConvEncoder, EncoderKind};
use crate::error::{dim_err, Error, Result};
use crate::linalg::LinearOperator;
use crate::solver::{
    fista_solve, logistic_loss, ClassifierParams, Lipschitz, SmoothTerm, SolveConfig,
    DEFAULT_LAMBDA_L1, DEFAULT_LAMBDA_RECON,
};
use crate::tensor::{
    correlate_adjoint, correlate_kernel_grad, correlate_valid, ConnectionTable, KernelBank,
    Tensor3,
};

const CHECKPOINT_MAGIC: &[u8; 4] = b"SFCK";
const CHECKPOINT_VERSION: u32 = 1;

/// The decoder `z ↦ Σ_p z_p ∗ D_pq` as a linear operator on flattened code
/// maps. Its adjoint is the valid cross-correlation with the same kernels.
pub struct ConvDecoder<'a> {
    bank: &'a KernelBank,
    in_h: usize,
    in_w: usize,
    code_h: usize,
    code_w: usize,
}

impl<'a> ConvDecoder<'a> {
    pub fn new(bank: &'a KernelBank, in_h: usize, in_w: usize) -> Result<Self> {
        let k = bank.k();
        if in_h < k || in_w < k {
            return dim_err(format!("region {in_h}x{in_w} smaller than kernel {k}"));
        }
        Ok(ConvDecoder {
            bank,
            in_h,
            in_w,
            code_h: in_h - k + 1,
            code_w: in_w - k + 1,
        })
    }

    pub fn code_shape(&self) -> (usize, usize, usize) {
        (self.bank.n_out(), self.code_h, self.code_w)
    }
}

impl LinearOperator for ConvDecoder<'_> {
    fn input_dim(&self) -> usize {
        self.bank.n_out() * self.code_h * self.code_w
    }

    fn output_dim(&self) -> usize {
        self.bank.n_in() * self.in_h * self.in_w
    }

    fn apply(&self, z: &[f64]) -> Vec<f64> {
        let (n, h, w) = self.code_shape();
        let z = Tensor3::from_vec(n, h, w, z.to_vec()).expect("code length checked by solver");
        correlate_adjoint(&z, self.bank, self.in_h, self.in_w)
            .expect("decoder shapes fixed at construction")
            .into_vec()
    }

    fn apply_adjoint(&self, r: &[f64]) -> Vec<f64> {
        let r = Tensor3::from_vec(self.bank.n_in(), self.in_h, self.in_w, r.to_vec())
            .expect("residual length checked by solver");
        correlate_valid(&r, self.bank, self.bank.n_out())
            .expect("decoder shapes fixed at construction")
            .into_vec()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DpsdConfig {
    pub discriminative: bool,
    pub convolutional: bool,
    pub kind: EncoderKind,
    /// Number of code maps (dictionary elements).
    pub n: usize,
    pub k: usize,
    /// Input-to-code connectivity; `None` connects every input map.
    pub table: Option<ConnectionTable>,
    pub classes: usize,
    pub lambda_l1: f64,
    /// Reconstruction weight inside the discriminative energy.
    pub lambda1: f64,
    pub lr_dict: f64,
    pub lr_encoder: f64,
    pub lr_theta: f64,
    pub epochs: usize,
    pub solver_max_iter: usize,
    pub solver_tol: f64,
    pub seed: u64,
}

impl DpsdConfig {
    pub fn new(kind: EncoderKind, n: usize, k: usize) -> Self {
        DpsdConfig {
            discriminative: false,
            convolutional: false,
            kind,
            n,
            k,
            table: None,
            classes: 2,
            lambda_l1: DEFAULT_LAMBDA_L1,
            lambda1: DEFAULT_LAMBDA_RECON,
            lr_dict: 0.01,
            lr_encoder: 0.001,
            lr_theta: 0.001,
            epochs: 1,
            solver_max_iter: 200,
            solver_tol: 1e-6,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.k == 0 {
            return Err(Error::Config("code size and kernel size must be >= 1".into()));
        }
        for (name, lr) in [
            ("dictionary", self.lr_dict),
            ("encoder", self.lr_encoder),
            ("theta", self.lr_theta),
        ] {
            if !(lr > 0.0) || !lr.is_finite() {
                return Err(Error::Config(format!("{name} learning rate must be > 0, got {lr}")));
            }
        }
        if !(self.lambda_l1 >= 0.0) || !(self.lambda1 >= 0.0) {
            return Err(Error::Config("lambda weights must be >= 0".into()));
        }
        if self.discriminative && self.classes < 2 {
            return Err(Error::Config("discriminative training needs >= 2 classes".into()));
        }
        if let Some(t) = &self.table {
            if t.n_out() != self.n {
                return Err(Error::Config(format!(
                    "connection table has {} outputs, code size is {}",
                    t.n_out(),
                    self.n
                )));
            }
        }
        Ok(())
    }
}

/// What one training run produces.
#[derive(Debug, Clone, PartialEq)]
pub struct DpsdModel {
    pub dictionary: KernelBank,
    pub encoder: ConvEncoder,
    pub theta: ClassifierParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean final FISTA objective over the epoch's solved samples.
    pub mean_objective: f64,
    /// Mean `‖z* − F(x)‖²` measured before each encoder step.
    pub mean_prediction_error: f64,
    pub mean_recon_error: f64,
    pub skipped: usize,
    /// Largest `|‖atom‖ − 1|` seen after any dictionary update.
    pub max_norm_deviation: f64,
}

#[derive(Debug, Clone)]
pub struct DpsdOutcome {
    pub model: DpsdModel,
    pub history: Vec<EpochStats>,
    pub rng: ChaCha8Rng,
}

fn gaussian_vec(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n)
        .map(|_| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
        .collect()
}

fn max_norm_deviation(bank: &KernelBank) -> f64 {
    bank.atom_norms()
        .iter()
        .map(|n| (n - 1.0).abs())
        .fold(0.0, f64::max)
}

/// Patch-based training: every sample is one `maps × k × k` patch.
pub fn dpsd_train(samples: &[Tensor3], labels: Option<&[usize]>, cfg: &DpsdConfig) -> Result<DpsdOutcome> {
    if cfg.convolutional {
        return Err(Error::Config("patch training called with the convolutional flag set".into()));
    }
    if let Some(s) = samples.first() {
        if s.height() != cfg.k || s.width() != cfg.k {
            return dim_err(format!(
                "patch {}x{} does not match kernel size {}",
                s.height(),
                s.width(),
                cfg.k
            ));
        }
    }
    train(samples, labels, cfg)
}

/// Convolutional training over regions at least as large as the kernel.
pub fn conv_dpsd_train(
    samples: &[Tensor3],
    labels: Option<&[usize]>,
    cfg: &DpsdConfig,
) -> Result<DpsdOutcome> {
    if !cfg.convolutional {
        return Err(Error::Config("convolutional training called without the convolutional flag".into()));
    }
    train(samples, labels, cfg)
}

fn train(samples: &[Tensor3], labels: Option<&[usize]>, cfg: &DpsdConfig) -> Result<DpsdOutcome> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Training("no training samples".into()));
    }
    match (cfg.discriminative, labels) {
        (true, None) => return Err(Error::Config("discriminative training needs labels".into())),
        (false, Some(_)) => {
            return Err(Error::Config("labels given but discriminative flag not set".into()))
        }
        (true, Some(l)) if l.len() != samples.len() => {
            return dim_err(format!("{} labels for {} samples", l.len(), samples.len()))
        }
        _ => {}
    }
    if let Some(l) = labels {
        if let Some(&bad) = l.iter().find(|&&y| y >= cfg.classes) {
            return Err(Error::Label {
                label: bad,
                classes: cfg.classes,
            });
        }
    }
    let shape = samples[0].shape();
    if samples.iter().any(|s| s.shape() != shape) {
        return dim_err("training samples differ in shape");
    }
    let (maps, h, w) = shape;
    if h < cfg.k || w < cfg.k {
        return dim_err(format!("region {h}x{w} smaller than kernel {}", cfg.k));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let table = match &cfg.table {
        Some(t) => {
            if t.n_in() != maps {
                return Err(Error::Config(format!(
                    "connection table expects {} input maps, samples have {maps}",
                    t.n_in()
                )));
            }
            t.clone()
        }
        None => ConnectionTable::full(maps, cfg.n),
    };
    let mut dict = KernelBank::random_normalized(table.clone(), cfg.k, &mut rng);
    let mut enc = ConvEncoder::init(cfg.kind, table, cfg.k, &mut rng);
    let code_len = cfg.n * (h - cfg.k + 1) * (w - cfg.k + 1);
    let mut theta = ClassifierParams::zeros(cfg.classes, code_len);
    theta.u = gaussian_vec(cfg.classes * code_len, &mut rng);
    theta.r = gaussian_vec(cfg.classes, &mut rng);

    let solve_cfg = SolveConfig {
        lambda_l1: cfg.lambda_l1,
        max_iter: cfg.solver_max_iter,
        tol: cfg.solver_tol,
        lipschitz: Lipschitz::PowerIteration,
    };
    let horizon = samples.len() as f64;
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut t = 0usize;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut obj_sum = 0.0;
        let mut pred_sum = 0.0;
        let mut recon_sum = 0.0;
        let mut solved = 0usize;
        let mut skipped = 0usize;
        let mut worst_norm = 0.0f64;
        for &i in &order {
            let decay = 1.0 / (1.0 + t as f64 / horizon);
            t += 1;
            let x = &samples[i];
            let label = labels.map(|l| l[i]);
            match sample_step(x, label, &mut dict, &mut enc, &mut theta, cfg, &solve_cfg, decay) {
                Ok(s) => {
                    obj_sum += s.objective;
                    pred_sum += s.prediction_error;
                    recon_sum += s.recon_error;
                    solved += 1;
                    worst_norm = worst_norm.max(max_norm_deviation(&dict));
                }
                Err(e @ (Error::Numeric(_) | Error::Training(_))) => {
                    debug!("sample {i} skipped: {e}");
                    skipped += 1;
                }
                Err(e) => return Err(e),
            }
        }
        if solved == 0 {
            return Err(Error::Training(format!(
                "epoch {epoch}: every one of {skipped} samples was skipped"
            )));
        }
        let stats = EpochStats {
            epoch,
            mean_objective: obj_sum / solved as f64,
            mean_prediction_error: pred_sum / solved as f64,
            mean_recon_error: recon_sum / solved as f64,
            skipped,
            max_norm_deviation: worst_norm,
        };
        info!(
            "dpsd epoch {epoch}: objective {:.5} prediction {:.5} recon {:.5} skipped {skipped}",
            stats.mean_objective, stats.mean_prediction_error, stats.mean_recon_error
        );
        history.push(stats);
    }
    Ok(DpsdOutcome {
        model: DpsdModel {
            dictionary: dict,
            encoder: enc,
            theta,
        },
        history,
        rng,
    })
}

struct StepStats {
    objective: f64,
    prediction_error: f64,
    recon_error: f64,
}

#[allow(clippy::too_many_arguments)]
fn sample_step(
    x: &Tensor3,
    label: Option<usize>,
    dict: &mut KernelBank,
    enc: &mut ConvEncoder,
    theta: &mut ClassifierParams,
    cfg: &DpsdConfig,
    solve_cfg: &SolveConfig,
    decay: f64,
) -> Result<StepStats> {
    let (_, h, w) = x.shape();
    let z_hat = enc.forward(x)?;
    let (code_n, code_h, code_w) = z_hat.shape();

    let res = {
        let op = ConvDecoder::new(dict, h, w)?;
        let term = match label {
            Some(y) => SmoothTerm::discriminative(x.data(), &op, y, theta, cfg.lambda1),
            None => SmoothTerm::recon(x.data(), &op),
        };
        term.validate()?;
        fista_solve(&term, solve_cfg, z_hat.data())?
    };
    let objective = res.objective();
    let z = Tensor3::from_vec(code_n, code_h, code_w, res.z)?;

    // dictionary: one step on ‖x − Dz*‖², then renormalize
    let mut resid = correlate_adjoint(&z, dict, h, w)?;
    resid.axpy(-1.0, x);
    let recon_error = resid.norm_sq();
    let mut gd = correlate_kernel_grad(&resid, dict, &z)?;
    if !gd.is_finite() {
        return Err(Error::Numeric("non-finite dictionary gradient".into()));
    }
    let lr_d = 2.0 * cfg.lr_dict * decay;
    for (wv, g) in dict.weights_mut().iter_mut().zip(gd.weights_mut().iter()) {
        *wv -= lr_d * g;
    }
    dict.normalize_atoms();

    // discriminant: one step on the logistic loss at z*
    if let Some(y) = label {
        let (_, g) = logistic_loss(&theta.scores(z.data()), y)?;
        let lr_t = cfg.lr_theta * decay;
        for (c, &gc) in g.iter().enumerate() {
            let row = &mut theta.u[c * theta.dim..(c + 1) * theta.dim];
            for (u, zv) in row.iter_mut().zip(z.data()) {
                *u -= lr_t * gc * zv;
            }
            theta.r[c] -= lr_t * gc;
        }
    }

    // per-position step, so convolutional regions behave like patches
    let positions = (code_h * code_w) as f64;
    let prediction_error = encoder_fit_step(enc, x, &z, cfg.lr_encoder * decay / positions)?;
    Ok(StepStats {
        objective,
        prediction_error,
        recon_error,
    })
}

/// Optimal codes for fixed parameters (warm-started from the encoder).
pub fn infer_code(model: &DpsdModel, x: &Tensor3, label: Option<usize>, cfg: &DpsdConfig) -> Result<Tensor3> {
    let (_, h, w) = x.shape();
    let z_hat = model.encoder.forward(x)?;
    let op = ConvDecoder::new(&model.dictionary, h, w)?;
    let term = match label {
        Some(y) => SmoothTerm::discriminative(x.data(), &op, y, &model.theta, cfg.lambda1),
        None => SmoothTerm::recon(x.data(), &op),
    };
    term.validate()?;
    let solve_cfg = SolveConfig {
        lambda_l1: cfg.lambda_l1,
        max_iter: cfg.solver_max_iter,
        tol: cfg.solver_tol,
        lipschitz: Lipschitz::PowerIteration,
    };
    let res = fista_solve(&term, &solve_cfg, z_hat.data())?;
    let (n, ch, cw) = z_hat.shape();
    Tensor3::from_vec(n, ch, cw, res.z)
}

/// Mean over atoms of the largest normalized cross-correlation with any other
/// atom at any relative shift. Shifted copies of one filter score close to 1.
pub fn filter_redundancy(bank: &KernelBank) -> f64 {
    let k = bank.k() as isize;
    let n = bank.n_out();
    let n_in = bank.n_in();
    // dense per-atom stacks over all input maps
    let mut atoms = vec![vec![0.0; n_in * (k * k) as usize]; n];
    for (idx, &(q, p)) in bank.table().entries().iter().enumerate() {
        let kk = (k * k) as usize;
        atoms[p][q * kk..(q + 1) * kk].copy_from_slice(bank.kernel(idx));
    }
    let norms: Vec<f64> = atoms.iter().map(|a| crate::linalg::norm(a)).collect();
    let mut total = 0.0;
    let mut counted = 0usize;
    for a in 0..n {
        if norms[a] == 0.0 {
            continue;
        }
        let mut best = 0.0f64;
        for b in 0..n {
            if a == b || norms[b] == 0.0 {
                continue;
            }
            for di in -(k - 1)..k {
                for dj in -(k - 1)..k {
                    let mut acc = 0.0;
                    for q in 0..n_in {
                        let base = q * (k * k) as usize;
                        for i in 0.max(-di)..k.min(k - di) {
                            for j in 0.max(-dj)..k.min(k - dj) {
                                acc += atoms[a][base + (i * k + j) as usize]
                                    * atoms[b][base + ((i + di) * k + j + dj) as usize];
                            }
                        }
                    }
                    best = best.max(acc.abs() / (norms[a] * norms[b]));
                }
            }
        }
        total += best;
        counted += 1;
    }
    if counted == 0 {
        0.0
    } else {
        total / counted as f64
    }
}

/// Pretrained parameters for one network stage.
#[derive(Debug, Clone, PartialEq)]
pub struct PretrainedStage {
    pub stage: usize,
    pub model: DpsdModel,
}

/// Output of the unsupervised / discriminative pretraining phase.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub arch: String,
    pub protocol: String,
    pub seed: u64,
    pub stages: Vec<PretrainedStage>,
    pub rng: ChaCha8Rng,
}

impl PartialEq for Checkpoint {
    fn eq(&self, other: &Self) -> bool {
        self.arch == other.arch
            && self.protocol == other.protocol
            && self.seed == other.seed
            && self.stages == other.stages
            && self.rng.get_seed() == other.rng.get_seed()
            && self.rng.get_stream() == other.rng.get_stream()
            && self.rng.get_word_pos() == other.rng.get_word_pos()
    }
}

impl Checkpoint {
    pub fn write_to<W: Write>(&self, w: W) -> Result<()> {
        let mut e = Encoder::new(w);
        e.bytes(CHECKPOINT_MAGIC)?;
        e.u32(CHECKPOINT_VERSION)?;
        e.str(&self.arch)?;
        e.str(&self.protocol)?;
        e.u64(self.seed)?;
        e.usize(self.stages.len())?;
        for s in &self.stages {
            e.usize(s.stage)?;
            e.bank(&s.model.dictionary)?;
            e.encoder(&s.model.encoder)?;
            e.classifier(&s.model.theta)?;
        }
        e.rng(&self.rng)?;
        e.into_inner().flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: R) -> Result<Checkpoint> {
        let mut d = Decoder::new(r);
        d.expect(CHECKPOINT_MAGIC)?;
        let version = d.u32()?;
        if version != CHECKPOINT_VERSION {
            return d.fail(format!("unsupported checkpoint version {version}"));
        }
        let arch = d.str()?;
        let protocol = d.str()?;
        let seed = d.u64()?;
        let n = d.usize()?;
        let mut stages = Vec::with_capacity(n.min(64));
        for _ in 0..n {
            let stage = d.usize()?;
            let dictionary = d.bank()?;
            let encoder = d.encoder()?;
            let theta = d.classifier()?;
            stages.push(PretrainedStage {
                stage,
                model: DpsdModel {
                    dictionary,
                    encoder,
                    theta,
                },
            });
        }
        let rng = d.rng()?;
        Ok(Checkpoint {
            arch,
            protocol,
            seed,
            stages,
            rng,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_to(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        Checkpoint::read_from(BufReader::new(File::open(path)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::dot;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn decoder_adjoint_identity() {
        let mut r = rng(1);
        let bank = KernelBank::random_normalized(ConnectionTable::random(3, 4, 2, &mut r).unwrap(), 3, &mut r);
        let op = ConvDecoder::new(&bank, 7, 6).unwrap();
        assert_eq!(op.input_dim(), 4 * 5 * 4);
        assert_eq!(op.output_dim(), 3 * 7 * 6);
        let z = gaussian_vec(op.input_dim(), &mut r);
        let x = gaussian_vec(op.output_dim(), &mut r);
        let lhs = dot(&op.apply(&z), &x);
        let rhs = dot(&z, &op.apply_adjoint(&x));
        assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0));
    }

    #[test]
    fn patch_decoder_is_matrix_multiply() {
        let mut r = rng(2);
        let bank = KernelBank::random_normalized(ConnectionTable::full(2, 3), 2, &mut r);
        let op = ConvDecoder::new(&bank, 2, 2).unwrap();
        let z = [0.5, -1.0, 2.0];
        let out = op.apply(&z);
        // column p of the matrix is atom p laid out as (map, row, col)
        let mut expect = vec![0.0; 8];
        for (idx, &(q, p)) in bank.table().entries().iter().enumerate() {
            for (t, wv) in bank.kernel(idx).iter().enumerate() {
                expect[q * 4 + t] += z[p] * wv;
            }
        }
        for (a, b) in out.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn region_smaller_than_kernel_is_rejected() {
        let mut cfg = DpsdConfig::new(EncoderKind::Si, 4, 7);
        cfg.convolutional = true;
        let samples = vec![Tensor3::zeros(1, 5, 5)];
        assert!(matches!(conv_dpsd_train(&samples, None, &cfg), Err(Error::Dimension(_))));
    }

    #[test]
    fn labels_must_match_flag() {
        let cfg = DpsdConfig::new(EncoderKind::Si, 4, 3);
        let samples = vec![Tensor3::zeros(1, 3, 3)];
        assert!(matches!(dpsd_train(&samples, Some(&[0]), &cfg), Err(Error::Config(_))));
        let mut disc = cfg.clone();
        disc.discriminative = true;
        assert!(matches!(dpsd_train(&samples, None, &disc), Err(Error::Config(_))));
        assert!(matches!(
            dpsd_train(&samples, Some(&[5]), &disc),
            Err(Error::Label { .. })
        ));
    }

    #[test]
    fn unsupervised_leaves_theta_untouched() {
        let mut r = rng(3);
        let samples: Vec<Tensor3> = (0..20).map(|_| Tensor3::random_normal(1, 4, 4, 1.0, &mut r)).collect();
        let mut cfg = DpsdConfig::new(EncoderKind::Tanh, 6, 4);
        cfg.epochs = 2;
        cfg.seed = 5;
        let out = dpsd_train(&samples, None, &cfg).unwrap();
        // theta is drawn right after the encoder, so redraw the init sequence
        let mut init = rng(5);
        let table = ConnectionTable::full(1, 6);
        let _ = KernelBank::random_normalized(table.clone(), 4, &mut init);
        let _ = ConvEncoder::init(EncoderKind::Tanh, table, 4, &mut init);
        let u0 = gaussian_vec(2 * 6, &mut init);
        assert_eq!(out.model.theta.u, u0);
        for s in &out.history {
            assert!(s.max_norm_deviation < 1e-10);
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut r = rng(4);
        let samples: Vec<Tensor3> = (0..6).map(|_| Tensor3::random_normal(2, 3, 3, 1.0, &mut r)).collect();
        let cfg = DpsdConfig::new(EncoderKind::Si, 3, 3);
        let out = dpsd_train(&samples, None, &cfg).unwrap();
        let ck = Checkpoint {
            arch: "toy".into(),
            protocol: "U".into(),
            seed: 7,
            stages: vec![PretrainedStage {
                stage: 0,
                model: out.model,
            }],
            rng: out.rng,
        };
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        let back = Checkpoint::read_from(&buf[..]).unwrap();
        assert_eq!(back, ck);
        let mut again = Vec::new();
        back.write_to(&mut again).unwrap();
        assert_eq!(again, buf);
        assert!(matches!(
            Checkpoint::read_from(&buf[..buf.len() - 1]),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn redundancy_of_shifted_copies_is_high() {
        let mut w = vec![0.0; 2 * 9];
        w[4] = 1.0; // centre tap
        w[9 + 5] = 1.0; // same impulse shifted right
        let bank = KernelBank::from_weights(ConnectionTable::full(1, 2), 3, w).unwrap();
        assert!((filter_redundancy(&bank) - 1.0).abs() < 1e-12);
    }
}
