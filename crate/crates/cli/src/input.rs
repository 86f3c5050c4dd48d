//! Turning a `--data` path into preprocessed train/test splits.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use sparsefeat::data::{
    grayscale, load_cifar10, load_image_dir, preprocess_caltech, preprocess_cifar_split, read_pnm, resize_bilinear,
    Dataset, Split, CIFAR_SIDE,
};
use sparsefeat::{Error, Result, Tensor3};

use crate::config::RunConfig;

/// Training images per class for image directories when none is configured.
pub const DEFAULT_TRAIN_PER_CLASS: usize = 30;

pub struct Splits {
    pub train: Dataset,
    pub test: Dataset,
    pub source: String,
}

fn is_cifar_dir(path: &Path) -> bool {
    path.is_file()
        || std::fs::read_dir(path)
            .map(|rd| {
                rd.filter_map(|e| e.ok()).any(|e| {
                    let n = e.file_name().to_string_lossy().into_owned();
                    n == "test_batch.bin" || (n.starts_with("data_batch") && n.ends_with(".bin"))
                })
            })
            .unwrap_or(false)
}

/// CIFAR-10 binaries (directory or single batch file) or a directory of
/// class subdirectories holding PGM/PPM images.
pub fn load_splits(cfg: &RunConfig, input: (usize, usize, usize)) -> Result<Splits> {
    let path = cfg.require_data()?;
    if !path.exists() {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("data path {} does not exist", path.display()),
        )));
    }
    if is_cifar_dir(path) {
        load_cifar(cfg, path, input)
    } else {
        load_images(cfg, path, input)
    }
}

fn load_cifar(cfg: &RunConfig, path: &Path, input: (usize, usize, usize)) -> Result<Splits> {
    if input != (3, CIFAR_SIDE, CIFAR_SIDE) {
        return Err(Error::Config(format!(
            "CIFAR-10 data needs a 3x{CIFAR_SIDE}x{CIFAR_SIDE} architecture input, got {input:?}"
        )));
    }
    let (train, test) = if path.is_file() {
        let d = load_cifar10(path, Split::Train)?;
        let mut t = d.clone();
        t.split = Split::Test;
        (d, t)
    } else {
        (load_cifar10(path, Split::Train)?, load_cifar10(path, Split::Test)?)
    };
    let classes: Vec<usize> = if cfg.classes.is_empty() {
        // classes that actually occur
        let counts = train.class_counts();
        (0..train.classes()).filter(|&c| counts[c] > 0).collect()
    } else {
        cfg.classes.clone()
    };
    let train = train.subset(&classes, cfg.train_per_class)?;
    let test = test.subset(&classes, cfg.test_per_class)?;
    let (train, test, _) = preprocess_cifar_split(&train, &test)?;
    Ok(Splits {
        train,
        test,
        source: format!("CIFAR-10 {}", path.display()),
    })
}

fn load_images(cfg: &RunConfig, path: &Path, input: (usize, usize, usize)) -> Result<Splits> {
    let (images, labels, names) = load_image_dir(path)?;
    let per_train = cfg.train_per_class.unwrap_or(DEFAULT_TRAIN_PER_CLASS);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let (mut tr, mut te) = (Vec::new(), Vec::new());
    for c in 0..names.len() {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        idx.shuffle(&mut rng);
        let cut = per_train.min(idx.len());
        tr.extend_from_slice(&idx[..cut]);
        let rest = &idx[cut..];
        te.extend_from_slice(&rest[..cfg.test_per_class.unwrap_or(rest.len()).min(rest.len())]);
    }
    let build = |idx: &[usize], split| -> Result<Dataset> {
        let samples = idx
            .iter()
            .map(|&i| preprocess_for(&images[i], input))
            .collect::<Result<Vec<_>>>()?;
        Dataset::new(samples, idx.iter().map(|&i| labels[i]).collect(), names.clone(), split)
    };
    Ok(Splits {
        train: build(&tr, Split::Train)?,
        test: build(&te, Split::Test)?,
        source: format!("image directory {}", path.display()),
    })
}

/// Caltech pipeline for `1×143×143` inputs; otherwise grayscale (for
/// single-map inputs), resize and per-image standardization.
pub fn preprocess_for(img: &Tensor3, input: (usize, usize, usize)) -> Result<Tensor3> {
    if input == (1, 143, 143) {
        return preprocess_caltech(img);
    }
    let (m, h, w) = input;
    let base = match (m, img.maps()) {
        (1, _) => grayscale(img)?,
        (a, b) if a == b => img.clone(),
        _ => {
            return Err(Error::Config(format!(
                "cannot map {}-channel images onto a {m}-map input",
                img.maps()
            )))
        }
    };
    let mut x = resize_bilinear(&base, h, w)?;
    let mean = x.mean();
    x.data_mut().iter_mut().for_each(|v| *v -= mean);
    let sd = (x.norm_sq() / x.len() as f64).sqrt();
    if sd > 0.0 {
        x.scale(1.0 / sd);
    }
    Ok(x)
}

/// Images for inversion: one file, a flat directory, or class subdirectories.
pub fn load_image_list(path: &Path) -> Result<Vec<(String, Tensor3)>> {
    if path.is_file() {
        let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        return Ok(vec![(name, read_pnm(path)?)]);
    }
    let mut files: Vec<PathBuf> = Vec::new();
    let mut stack = vec![path.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in std::fs::read_dir(&dir)? {
            let p = e?.path();
            if p.is_dir() {
                stack.push(p);
            } else if matches!(p.extension().and_then(|e| e.to_str()), Some("pgm" | "ppm" | "pnm")) {
                files.push(p);
            }
        }
    }
    files.sort();
    if files.is_empty() {
        return Err(Error::Config(format!("no PGM/PPM images under {}", path.display())));
    }
    files
        .iter()
        .map(|f| {
            let rel = f.strip_prefix(path).unwrap_or(f).with_extension("");
            let name = rel.to_string_lossy().replace(['/', '\\'], "_");
            Ok((name, read_pnm(f)?))
        })
        .collect()
}
