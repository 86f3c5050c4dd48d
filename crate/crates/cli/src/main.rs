mod config;
mod input;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use sparsefeat::data::{export_filter_grid, write_map_pgm, write_synthetic_cifar};
use sparsefeat::invert::{hallucinate, matching_model, normalized_mse, trace_csv, InversionTask, InvertInit, MatchPoint};
use sparsefeat::net::evaluate;
use sparsefeat::train::{apply_checkpoint, fit, pretrain, write_metrics, Labeled};
use sparsefeat::{Checkpoint, Error, Model, Result};

use config::RunConfig;
use input::{load_image_list, load_splits, preprocess_for};

#[derive(Parser)]
#[command(name = "sparsefeat", version, about = "Sparse convolutional feature learning")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

/// Flags shared by every command; they override values from `--config`.
#[derive(Args, Debug, Clone)]
struct Common {
    /// Flat key=value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// CIFAR-10 binaries, or a directory of class subdirectories with PGM/PPM images.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Preset name or an `input=MxHxW stage=...` descriptor.
    #[arg(long)]
    arch: Option<String>,
    /// Training protocol, e.g. `R`, `U+`, `Dc+D+`, `R+L1`.
    #[arg(long)]
    protocol: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Sparse-state penalty weight.
    #[arg(long = "lambda-l1")]
    lambda_l1: Option<f64>,
    /// Worker threads (0: one per core).
    #[arg(long)]
    threads: Option<usize>,
    /// Any other config key.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Stage-wise sparse-coding pretraining; writes a checkpoint and filter images.
    Pretrain {
        #[command(flatten)]
        common: Common,
    },
    /// Probe and optional fine-tuning; writes the model and a metrics CSV.
    Train {
        #[command(flatten)]
        common: Common,
        /// Pretraining checkpoint (otherwise pretraining runs inline when needed).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Test-split loss and accuracy of a saved model.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Reconstruct inputs from their feature maps with and without normalization.
    Invert {
        #[command(flatten)]
        common: Common,
        /// Model with normalization modules.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Model without them (default: the same filters with normalization removed).
        #[arg(long = "model-nocn")]
        model_nocn: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        /// `random` or `original`.
        #[arg(long)]
        init: Option<String>,
        /// `output` or `prepool`.
        #[arg(long = "match")]
        match_point: Option<String>,
    },
    /// Filter-grid images from a model or checkpoint.
    Export {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long = "per-row")]
        per_row: Option<usize>,
    },
    /// Write a seeded synthetic two-class dataset in CIFAR-10 binary layout.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long = "train-per-class")]
        train_per_class: Option<usize>,
        #[arg(long = "test-per-class")]
        test_per_class: Option<usize>,
    },
}

fn resolve(common: &Common, extra: &[(&str, Option<String>)]) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(p) = &common.config {
        cfg.apply_file(p)?;
    }
    let show = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
    let flags = [
        ("data", show(&common.data)),
        ("arch", common.arch.clone()),
        ("protocol", common.protocol.clone()),
        ("seed", common.seed.map(|v| v.to_string())),
        ("out", show(&common.out)),
        ("epochs", common.epochs.map(|v| v.to_string())),
        ("lr", common.lr.map(|v| v.to_string())),
        ("lambda_l1", common.lambda_l1.map(|v| v.to_string())),
        ("threads", common.threads.map(|v| v.to_string())),
    ];
    for (k, v) in flags.iter().chain(extra) {
        if let Some(v) = v {
            cfg.set(k, v)?;
        }
    }
    for kv in &common.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got '{kv}'")))?;
        cfg.set(k.trim(), v)?;
    }
    cfg.train.validate()?;
    if cfg.threads > 0 {
        // fails only if a pool already exists, which cannot happen here
        let _ = rayon::ThreadPoolBuilder::new().num_threads(cfg.threads).build_global();
    }
    Ok(cfg)
}

/// Prints the resolved config and stores it next to the outputs.
fn echo(cfg: &RunConfig) -> Result<()> {
    let text = cfg.render();
    print!("{text}");
    std::fs::create_dir_all(&cfg.out)?;
    std::fs::write(cfg.out.join("config.txt"), text)?;
    Ok(())
}

fn path_str(p: &Option<PathBuf>) -> Option<String> {
    p.as_ref().map(|p| p.display().to_string())
}

fn require<'a>(p: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    p.as_deref()
        .ok_or_else(|| Error::Config(format!("--{flag} is required")))
}

fn new_model(cfg: &RunConfig, classes: usize) -> Result<Model> {
    let arch = cfg.arch(classes)?;
    let mut model = Model::init(&arch, cfg.train.seed)?;
    model.head_l1 = cfg.train.head.l1;
    model.head_l2 = cfg.train.head.l2;
    Ok(model)
}

fn export_stages(model: &Model, per_row: usize, dir: &Path, prefix: &str) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    for (i, e) in model.encoders.iter().enumerate() {
        let p = dir.join(format!("{prefix}_stage{}.pgm", i + 1));
        export_filter_grid(&e.bank, per_row, &p)?;
        written.push(p);
    }
    Ok(written)
}

fn cmd_pretrain(common: &Common) -> Result<()> {
    let cfg = resolve(common, &[])?;
    echo(&cfg)?;
    let protocol = cfg.protocol()?;
    let input = cfg.arch(2)?.input;
    let splits = load_splits(&cfg, input)?;
    println!("data: {} ({} training samples)", splits.source, splits.train.len());
    let mut model = new_model(&cfg, splits.train.classes())?;
    let train = Labeled::new(&splits.train.samples, &splits.train.labels)?;
    let ckpt = pretrain(&mut model, &protocol, train, &cfg.train)?;
    let path = cfg.out.join("checkpoint.bin");
    ckpt.save(&path)?;
    println!("checkpoint: {}", path.display());
    for s in &ckpt.stages {
        let p = cfg.out.join(format!("filters_stage{}.pgm", s.stage + 1));
        export_filter_grid(&s.model.encoder.bank, cfg.per_row, &p)?;
        println!(
            "stage {}: {} kernels -> {}",
            s.stage + 1,
            s.model.encoder.bank.n_kernels(),
            p.display()
        );
    }
    Ok(())
}

fn cmd_train(common: &Common, checkpoint: &Option<PathBuf>) -> Result<()> {
    let mut cfg = resolve(common, &[("checkpoint", path_str(checkpoint))])?;
    let ckpt = cfg.checkpoint.as_deref().map(Checkpoint::load).transpose()?;
    if let Some(c) = &ckpt {
        if c.seed != cfg.train.seed {
            log::info!("using the checkpoint seed {} in place of {}", c.seed, cfg.train.seed);
            cfg.train.seed = c.seed;
        }
    }
    echo(&cfg)?;
    let protocol = cfg.protocol()?.resolve(cfg.arch(2)?.stages.len())?;
    let input = cfg.arch(2)?.input;
    let splits = load_splits(&cfg, input)?;
    println!(
        "data: {} ({} train / {} test)",
        splits.source,
        splits.train.len(),
        splits.test.len()
    );
    let mut model = new_model(&cfg, splits.train.classes())?;
    let train = Labeled::new(&splits.train.samples, &splits.train.labels)?;
    let test = Labeled::new(&splits.test.samples, &splits.test.labels)?;
    match (&ckpt, protocol.needs_pretraining()) {
        (Some(c), true) => apply_checkpoint(&mut model, c)?,
        (Some(_), false) => {
            return Err(Error::Config(format!(
                "protocol {protocol} has no pretraining stage; drop --checkpoint"
            )))
        }
        (None, true) => {
            let c = pretrain(&mut model, &protocol, train, &cfg.train)?;
            c.save(&cfg.out.join("checkpoint.bin"))?;
        }
        (None, false) => {}
    }
    let metrics = fit(&mut model, &protocol, train, (!test.is_empty()).then_some(test), &cfg.train)?;
    model.save(&cfg.out.join("model.bin"))?;
    write_metrics(&cfg.out.join("metrics.csv"), &metrics)?;
    if test.is_empty() {
        println!("no test samples");
    } else {
        let (loss, acc) = evaluate(&model, test.samples, test.labels)?;
        println!("test loss {loss:.6} accuracy {acc:.4}");
    }
    Ok(())
}

fn cmd_evaluate(common: &Common, model: &Option<PathBuf>) -> Result<()> {
    let cfg = resolve(common, &[("model", path_str(model))])?;
    echo(&cfg)?;
    let model = Model::load(require(&cfg.model, "model")?)?;
    let splits = load_splits(&cfg, model.arch.input)?;
    if splits.test.classes() != model.arch.classes {
        return Err(Error::Config(format!(
            "model has {} classes, data has {}",
            model.arch.classes,
            splits.test.classes()
        )));
    }
    let (loss, acc) = evaluate(&model, &splits.test.samples, &splits.test.labels)?;
    println!("test samples {} loss {loss:.6} accuracy {acc:.4}", splits.test.len());
    Ok(())
}

fn cmd_invert(common: &Common, extra: &[(&str, Option<String>)]) -> Result<()> {
    let cfg = resolve(common, extra)?;
    echo(&cfg)?;
    let cn = Model::load(require(&cfg.model, "model")?)?;
    let nocn = match &cfg.model_nocn {
        Some(p) => Model::load(p)?,
        None => {
            let mut m = cn.clone();
            m.arch = cn.arch.without_norm();
            m.validate()?;
            m
        }
    };
    if nocn.arch.input != cn.arch.input {
        return Err(Error::Config("the two models have different input shapes".into()));
    }
    let point = if cfg.match_point == "prepool" {
        MatchPoint::PrePool
    } else {
        MatchPoint::Output
    };
    let pair = [("cn", matching_model(&cn, point)?), ("nocn", matching_model(&nocn, point)?)];
    let images = load_image_list(require(&cfg.data, "data")?)?;
    for (i, (name, img)) in images.iter().enumerate() {
        let x = preprocess_for(img, cn.arch.input)?;
        write_map_pgm(&cfg.out.join(format!("{name}_original.pgm")), &x, 0)?;
        let mut report = format!("{name}:");
        for (tag, model) in &pair {
            let init = if cfg.init == "original" {
                InvertInit::Image(x.clone())
            } else {
                InvertInit::Random(cfg.train.seed.wrapping_add(i as u64))
            };
            let task = InversionTask {
                model,
                target: model.stage_output(&x)?,
                init,
                steps: cfg.steps,
                step: 1.0,
            };
            let inv = hallucinate(&task)?;
            write_map_pgm(&cfg.out.join(format!("{name}_{tag}.pgm")), &inv.image, 0)?;
            std::fs::write(cfg.out.join(format!("{name}_{tag}_loss.csv")), trace_csv(&inv.trace))?;
            report.push_str(&format!(
                " {tag} loss {:.6} nmse {:.4}",
                inv.trace.last().copied().unwrap_or(f64::NAN),
                normalized_mse(&inv.image, &x)?
            ));
        }
        println!("{report}");
    }
    Ok(())
}

fn cmd_export(common: &Common, model: &Option<PathBuf>, checkpoint: &Option<PathBuf>, per_row: Option<usize>) -> Result<()> {
    let cfg = resolve(
        common,
        &[
            ("model", path_str(model)),
            ("checkpoint", path_str(checkpoint)),
            ("per_row", per_row.map(|v| v.to_string())),
        ],
    )?;
    echo(&cfg)?;
    if cfg.model.is_none() && cfg.checkpoint.is_none() {
        return Err(Error::Config("--model or --checkpoint is required".into()));
    }
    let mut written = Vec::new();
    if let Some(p) = &cfg.model {
        written.extend(export_stages(&Model::load(p)?, cfg.per_row, &cfg.out, "model")?);
    }
    if let Some(p) = &cfg.checkpoint {
        for s in &Checkpoint::load(p)?.stages {
            for (tag, bank) in [("encoder", &s.model.encoder.bank), ("dictionary", &s.model.dictionary)] {
                let path = cfg.out.join(format!("checkpoint_stage{}_{tag}.pgm", s.stage + 1));
                export_filter_grid(bank, cfg.per_row, &path)?;
                written.push(path);
            }
        }
    }
    for p in written {
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn cmd_synth(common: &Common, train_per_class: Option<usize>, test_per_class: Option<usize>) -> Result<()> {
    let cfg = resolve(
        common,
        &[
            ("train_per_class", Some(train_per_class.unwrap_or(500).to_string())),
            ("test_per_class", Some(test_per_class.unwrap_or(200).to_string())),
        ],
    )?;
    echo(&cfg)?;
    let (tr, te) = (cfg.train_per_class.unwrap_or(500), cfg.test_per_class.unwrap_or(200));
    write_synthetic_cifar(&cfg.out, tr, te, cfg.train.seed)?;
    println!("wrote {} training and {} test images per class to {}", tr, te, cfg.out.display());
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Parameter(_) | Error::Dimension(_) => 2,
        Error::Format { .. } | Error::Io(_) | Error::Label { .. } => 3,
        Error::Numeric(_) | Error::Training(_) => 4,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match &cli.cmd {
        Command::Pretrain { common } => cmd_pretrain(common),
        Command::Train { common, checkpoint } => cmd_train(common, checkpoint),
        Command::Evaluate { common, model } => cmd_evaluate(common, model),
        Command::Invert {
            common,
            model,
            model_nocn,
            steps,
            init,
            match_point,
        } => cmd_invert(
            common,
            &[
                ("model", path_str(model)),
                ("model_nocn", path_str(model_nocn)),
                ("steps", steps.map(|v| v.to_string())),
                ("init", init.clone()),
                ("match", match_point.clone()),
            ],
        ),
        Command::Export {
            common,
            model,
            checkpoint,
            per_row,
        } => cmd_export(common, model, checkpoint, *per_row),
        Command::Synth {
            common,
            train_per_class,
            test_per_class,
        } => cmd_synth(common, *train_per_class, *test_per_class),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
