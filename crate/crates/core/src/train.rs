//! Training protocols: stage-wise pretraining, the linear probe and global
//! supervised fine-tuning with early stopping.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;

use crate::arch::{Arch, Init, Protocol};
use crate::dpsd::{conv_dpsd_train, dpsd_train, Checkpoint, DpsdConfig, PretrainedStage};
use crate::error::{Error, Result};
use crate::net::{classifier_train, evaluate, extract_features, HeadConfig, Model, Penalty};
use crate::solver::{DEFAULT_LAMBDA_L1, DEFAULT_LAMBDA_RECON};
use crate::tensor::Tensor3;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    /// Supervised epochs.
    pub epochs: usize,
    pub lr: f64,
    /// Per-epoch learning-rate decay: `lr / (1 + decay·epoch)`.
    pub lr_decay: f64,
    /// Fraction of the training split held out for early stopping.
    pub holdout: f64,
    pub patience: usize,
    pub head: HeadConfig,
    /// Sparse-state penalty weight; replaces the protocol's when set.
    pub lambda_l1: Option<f64>,
    pub pretrain_patches: usize,
    pub pretrain_epochs: usize,
    /// Side of the regions used for convolutional pretraining.
    pub conv_region: usize,
    pub code_lambda_l1: f64,
    pub code_lambda1: f64,
    pub lr_dict: f64,
    pub lr_encoder: f64,
    pub lr_theta: f64,
    pub solver_max_iter: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            epochs: 30,
            lr: 1e-3,
            lr_decay: 0.0,
            holdout: 0.1,
            patience: 5,
            head: HeadConfig::default(),
            lambda_l1: None,
            pretrain_patches: 100_000,
            pretrain_epochs: 1,
            conv_region: 16,
            code_lambda_l1: DEFAULT_LAMBDA_L1,
            code_lambda1: DEFAULT_LAMBDA_RECON,
            lr_dict: 0.01,
            lr_encoder: 0.001,
            lr_theta: 0.001,
            solver_max_iter: 200,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("bad value '{v}' for {key}")))
}

impl TrainConfig {
    pub const KEYS: &'static [&'static str] = &[
        "seed",
        "epochs",
        "lr",
        "lr_decay",
        "holdout",
        "patience",
        "head_l1",
        "head_l2",
        "head_max_iter",
        "lambda_l1",
        "pretrain_patches",
        "pretrain_epochs",
        "conv_region",
        "code_lambda_l1",
        "code_lambda1",
        "lr_dict",
        "lr_encoder",
        "lr_theta",
        "solver_max_iter",
    ];

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "lr_decay" => self.lr_decay = parse(key, v)?,
            "holdout" => self.holdout = parse(key, v)?,
            "patience" => self.patience = parse(key, v)?,
            "head_l1" => self.head.l1 = parse(key, v)?,
            "head_l2" => self.head.l2 = parse(key, v)?,
            "head_max_iter" => self.head.max_iter = parse(key, v)?,
            "lambda_l1" if v == "protocol" => self.lambda_l1 = None,
            "lambda_l1" => self.lambda_l1 = Some(parse(key, v)?),
            "pretrain_patches" => self.pretrain_patches = parse(key, v)?,
            "pretrain_epochs" => self.pretrain_epochs = parse(key, v)?,
            "conv_region" => self.conv_region = parse(key, v)?,
            "code_lambda_l1" => self.code_lambda_l1 = parse(key, v)?,
            "code_lambda1" => self.code_lambda1 = parse(key, v)?,
            "lr_dict" => self.lr_dict = parse(key, v)?,
            "lr_encoder" => self.lr_encoder = parse(key, v)?,
            "lr_theta" => self.lr_theta = parse(key, v)?,
            "solver_max_iter" => self.solver_max_iter = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown config key '{key}'"))),
        }
        Ok(())
    }

    /// `key=value` lines in [`TrainConfig::KEYS`] order.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let lambda = self.lambda_l1.map(|l| l.to_string()).unwrap_or_else(|| "protocol".into());
        let vals: [String; 19] = [
            self.seed.to_string(),
            self.epochs.to_string(),
            self.lr.to_string(),
            self.lr_decay.to_string(),
            self.holdout.to_string(),
            self.patience.to_string(),
            self.head.l1.to_string(),
            self.head.l2.to_string(),
            self.head.max_iter.to_string(),
            lambda,
            self.pretrain_patches.to_string(),
            self.pretrain_epochs.to_string(),
            self.conv_region.to_string(),
            self.code_lambda_l1.to_string(),
            self.code_lambda1.to_string(),
            self.lr_dict.to_string(),
            self.lr_encoder.to_string(),
            self.lr_theta.to_string(),
            self.solver_max_iter.to_string(),
        ];
        for (k, v) in Self::KEYS.iter().zip(vals) {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("learning rate must be >= 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.holdout) {
            return Err(Error::Config(format!("holdout must be in [0, 1), got {}", self.holdout)));
        }
        if !(self.lr_decay >= 0.0) {
            return Err(Error::Config("lr_decay must be >= 0".into()));
        }
        if let Some(l) = self.lambda_l1 {
            if !(l >= 0.0) || !l.is_finite() {
                return Err(Error::Config(format!("lambda_l1 must be >= 0, got {l}")));
            }
        }
        if self.conv_region == 0 || self.pretrain_epochs == 0 {
            return Err(Error::Config("conv_region and pretrain_epochs must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub accuracy: f64,
}

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut s = String::from("epoch,split,loss,accuracy\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{}", r.epoch, r.split, r.loss, r.accuracy);
    }
    s
}

pub fn write_metrics(path: &Path, rows: &[MetricRow]) -> Result<()> {
    std::fs::write(path, metrics_csv(rows))?;
    Ok(())
}

/// A labeled set of preprocessed images.
#[derive(Debug, Clone, Copy)]
pub struct Labeled<'a> {
    pub samples: &'a [Tensor3],
    pub labels: &'a [usize],
}

impl<'a> Labeled<'a> {
    pub fn new(samples: &'a [Tensor3], labels: &'a [usize]) -> Result<Self> {
        if samples.len() != labels.len() {
            return Err(Error::Dimension(format!(
                "{} samples but {} labels",
                samples.len(),
                labels.len()
            )));
        }
        Ok(Labeled { samples, labels })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

fn dpsd_config(model: &Model, stage: usize, init: Init, conv: bool, cfg: &TrainConfig, seed: u64) -> DpsdConfig {
    let s = &model.arch.stages[stage];
    let mut d = DpsdConfig::new(s.kind, s.n_out, s.k);
    d.discriminative = init == Init::Discriminative;
    d.convolutional = conv;
    d.table = Some(model.encoders[stage].bank.table().clone());
    d.classes = model.arch.classes;
    d.lambda_l1 = cfg.code_lambda_l1;
    d.lambda1 = cfg.code_lambda1;
    d.lr_dict = cfg.lr_dict;
    d.lr_encoder = cfg.lr_encoder;
    d.lr_theta = cfg.lr_theta;
    d.epochs = cfg.pretrain_epochs;
    d.solver_max_iter = cfg.solver_max_iter;
    d.seed = seed;
    d
}

/// Greedy stage-wise pretraining: each non-random stage is trained on
/// patches (or regions) of the frozen output of the stages below it, then
/// its encoder replaces the stage's filters.
pub fn pretrain(model: &mut Model, protocol: &Protocol, data: Labeled<'_>, cfg: &TrainConfig) -> Result<Checkpoint> {
    cfg.validate()?;
    let protocol = protocol.resolve(model.encoders.len())?;
    if !protocol.needs_pretraining() {
        return Err(Error::Config(format!("protocol {protocol} has nothing to pretrain")));
    }
    if data.is_empty() {
        return Err(Error::Training("no training images for pretraining".into()));
    }
    if cfg.pretrain_patches == 0 {
        return Err(Error::Config("pretrain_patches must be >= 1".into()));
    }
    let mut stages = Vec::new();
    for (i, sp) in protocol.stages.iter().enumerate() {
        if sp.init == Init::Random {
            continue;
        }
        let inputs: Vec<Tensor3> = if i == 0 {
            data.samples.to_vec()
        } else {
            data.samples
                .par_iter()
                .map(|x| model.partial_output(x, i))
                .collect::<Result<_>>()?
        };
        let (_, h, w) = inputs[0].shape();
        let k = model.arch.stages[i].k;
        let side = if sp.conv { cfg.conv_region.clamp(k, h.min(w)) } else { k };
        let mut patches = Vec::with_capacity(cfg.pretrain_patches);
        let mut labels = Vec::with_capacity(cfg.pretrain_patches);
        for _ in 0..cfg.pretrain_patches {
            let n = model.rng.random_range(0..inputs.len());
            let r = model.rng.random_range(0..=h - side);
            let c = model.rng.random_range(0..=w - side);
            patches.push(inputs[n].crop(r, c, side, side)?);
            labels.push(data.labels[n]);
        }
        let seed: u64 = model.rng.random();
        let dcfg = dpsd_config(model, i, sp.init, sp.conv, cfg, seed);
        let lab = (sp.init == Init::Discriminative).then_some(&labels[..]);
        let out = if sp.conv {
            conv_dpsd_train(&patches, lab, &dcfg)?
        } else {
            dpsd_train(&patches, lab, &dcfg)?
        };
        if let (Some(first), Some(last)) = (out.history.first(), out.history.last()) {
            log::info!(
                "stage {} pretraining: prediction error {:.4} -> {:.4}, skipped {}",
                i + 1,
                first.mean_prediction_error,
                last.mean_prediction_error,
                last.skipped
            );
        }
        model.encoders[i] = out.model.encoder.clone();
        stages.push(PretrainedStage { stage: i, model: out.model });
    }
    Ok(Checkpoint {
        arch: model.arch.descriptor(),
        protocol: protocol.to_string(),
        seed: model.seed,
        stages,
        rng: model.rng.clone(),
    })
}

/// Installs pretrained encoders into a model of the same architecture.
pub fn apply_checkpoint(model: &mut Model, ckpt: &Checkpoint) -> Result<()> {
    if ckpt.arch != model.arch.descriptor() {
        return Err(Error::Config(format!(
            "checkpoint architecture '{}' does not match '{}'",
            ckpt.arch,
            model.arch.descriptor()
        )));
    }
    for s in &ckpt.stages {
        if s.stage >= model.encoders.len() {
            return Err(Error::Config(format!("checkpoint stage {} out of range", s.stage + 1)));
        }
        let old = &model.encoders[s.stage];
        let new = &s.model.encoder;
        if !old.bank.same_layout(&new.bank) || old.kind != new.kind {
            return Err(Error::Config(format!("checkpoint stage {} layout mismatch", s.stage + 1)));
        }
        model.encoders[s.stage] = new.clone();
    }
    model.rng = ckpt.rng.clone();
    Ok(())
}

fn record(rows: &mut Vec<MetricRow>, epoch: usize, split: &str, (loss, accuracy): (f64, f64)) {
    log::info!("epoch {epoch} {split}: loss {loss:.4} accuracy {accuracy:.4}");
    rows.push(MetricRow {
        epoch,
        split: split.to_string(),
        loss,
        accuracy,
    });
}

/// Trains the head on fixed features.
pub fn train_probe(model: &mut Model, data: Labeled<'_>, cfg: &HeadConfig) -> Result<()> {
    let feats = extract_features(model, data.samples)?;
    let (head, _) = classifier_train(&feats, data.labels, model.arch.classes, cfg)?;
    model.head = head;
    model.head_l1 = cfg.l1;
    model.head_l2 = cfg.l2;
    Ok(())
}

/// Linear probe, then (for supervised protocols) SGD on every parameter
/// with early stopping on a held-out part of the training split. Epoch 0
/// rows describe the probe.
pub fn fit(
    model: &mut Model,
    protocol: &Protocol,
    train: Labeled<'_>,
    test: Option<Labeled<'_>>,
    cfg: &TrainConfig,
) -> Result<Vec<MetricRow>> {
    cfg.validate()?;
    let protocol = protocol.resolve(model.encoders.len())?;
    if train.is_empty() {
        return Err(Error::Training("empty training split".into()));
    }
    let mut rows = Vec::new();
    let supervised = protocol.supervised() && cfg.epochs > 0;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let n_hold = if supervised {
        ((train.len() as f64) * cfg.holdout).round() as usize
    } else {
        0
    };
    if n_hold > 0 {
        order.shuffle(&mut model.rng);
    }
    let (hold_idx, fit_idx) = order.split_at(n_hold);
    let mut fit_idx = fit_idx.to_vec();
    let pick = |idx: &[usize]| -> (Vec<Tensor3>, Vec<usize>) {
        (
            idx.iter().map(|&i| train.samples[i].clone()).collect(),
            idx.iter().map(|&i| train.labels[i]).collect(),
        )
    };
    let (fx, fy) = pick(&fit_idx);
    let (hx, hy) = pick(hold_idx);
    train_probe(model, Labeled::new(&fx, &fy)?, &cfg.head)?;

    let report = |m: &Model, rows: &mut Vec<MetricRow>, epoch: usize, train_stats: Option<(f64, f64)>| -> Result<()> {
        let tr = match train_stats {
            Some(s) => s,
            None => evaluate(m, &fx, &fy)?,
        };
        record(rows, epoch, "train", tr);
        if !hx.is_empty() {
            record(rows, epoch, "holdout", evaluate(m, &hx, &hy)?);
        }
        if let Some(t) = test {
            record(rows, epoch, "test", evaluate(m, t.samples, t.labels)?);
        }
        Ok(())
    };
    report(model, &mut rows, 0, None)?;
    if !supervised {
        return Ok(rows);
    }

    let lambda = cfg.lambda_l1.unwrap_or(protocol.lambda_l1);
    let penalty = protocol.sparse_state.then_some(Penalty {
        lambda,
        site: protocol.site,
    });
    let mut best = (f64::INFINITY, model.clone());
    if !hx.is_empty() {
        best.0 = evaluate(model, &hx, &hy)?.0;
    }
    let mut since_best = 0;
    for epoch in 1..=cfg.epochs {
        let lr = cfg.lr / (1.0 + cfg.lr_decay * (epoch - 1) as f64);
        fit_idx.shuffle(&mut model.rng);
        let mut loss = 0.0;
        let mut correct = 0usize;
        for &i in &fit_idx {
            let r = model.supervised_step(&train.samples[i], train.labels[i], lr, penalty)?;
            loss += r.loss;
            correct += r.correct as usize;
        }
        let n = fit_idx.len() as f64;
        report(model, &mut rows, epoch, Some((loss / n, correct as f64 / n)))?;
        if hx.is_empty() {
            continue;
        }
        let hold_loss = rows
            .iter()
            .rev()
            .find(|r| r.split == "holdout")
            .map(|r| r.loss)
            .expect("holdout row");
        if hold_loss < best.0 {
            best = (hold_loss, model.clone());
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                log::info!("early stop after epoch {epoch}");
                break;
            }
        }
    }
    if !hx.is_empty() {
        // keep the advanced rng so later draws do not repeat
        let rng = model.rng.clone();
        *model = best.1;
        model.rng = rng;
    }
    Ok(rows)
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub model: Model,
    pub checkpoint: Option<Checkpoint>,
    pub metrics: Vec<MetricRow>,
}

/// Initialization, optional pretraining, probe and optional fine-tuning.
pub fn run_protocol(
    arch: &Arch,
    protocol: &Protocol,
    train: Labeled<'_>,
    test: Option<Labeled<'_>>,
    cfg: &TrainConfig,
) -> Result<RunOutcome> {
    let mut model = Model::init(arch, cfg.seed)?;
    model.head_l1 = cfg.head.l1;
    model.head_l2 = cfg.head.l2;
    let resolved = protocol.resolve(arch.stages.len())?;
    let checkpoint = if resolved.needs_pretraining() {
        Some(pretrain(&mut model, &resolved, train, cfg)?)
    } else {
        None
    };
    let metrics = fit(&mut model, &resolved, train, test, cfg)?;
    Ok(RunOutcome {
        model,
        checkpoint,
        metrics,
    })
}
