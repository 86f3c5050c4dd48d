//! Dataset ingestion, preprocessing and image export.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::norm::{local_cn, local_cn_valid, NormConfig};
use crate::tensor::{KernelBank, Tensor3};

pub const CIFAR_RECORD: usize = 3073;
pub const CIFAR_SIDE: usize = 32;

pub const CALTECH_RESIZE: usize = 151;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Tensor3>,
    pub labels: Vec<usize>,
    pub class_names: Vec<String>,
    pub split: Split,
}

impl Dataset {
    pub fn new(samples: Vec<Tensor3>, labels: Vec<usize>, class_names: Vec<String>, split: Split) -> Result<Self> {
        let d = Dataset {
            samples,
            labels,
            class_names,
            split,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        if self.samples.len() != self.labels.len() {
            return Err(Error::Dimension(format!(
                "{} samples but {} labels",
                self.samples.len(),
                self.labels.len()
            )));
        }
        if let Some(first) = self.samples.first() {
            if self.samples.iter().any(|s| s.shape() != first.shape()) {
                return Err(Error::Dimension("samples differ in shape".into()));
            }
        }
        let c = self.class_names.len();
        if let Some(&bad) = self.labels.iter().find(|&&y| y >= c) {
            return Err(Error::Label { label: bad, classes: c });
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn shape(&self) -> Option<(usize, usize, usize)> {
        self.samples.first().map(|s| s.shape())
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes()];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    /// Keeps only the listed classes (relabelled `0..`), at most `per_class`
    /// samples of each, in file order.
    pub fn subset(&self, classes: &[usize], per_class: Option<usize>) -> Result<Dataset> {
        let mut taken = vec![0usize; classes.len()];
        let mut samples = Vec::new();
        let mut labels = Vec::new();
        for (s, &y) in self.samples.iter().zip(&self.labels) {
            if let Some(pos) = classes.iter().position(|&c| c == y) {
                if per_class.is_none_or(|m| taken[pos] < m) {
                    taken[pos] += 1;
                    samples.push(s.clone());
                    labels.push(pos);
                }
            }
        }
        let names = classes
            .iter()
            .map(|&c| {
                self.class_names
                    .get(c)
                    .cloned()
                    .ok_or(Error::Label { label: c, classes: self.classes() })
            })
            .collect::<Result<Vec<_>>>()?;
        Dataset::new(samples, labels, names, self.split)
    }

    pub fn map_samples(&self, f: impl Fn(&Tensor3) -> Result<Tensor3> + Sync + Send) -> Result<Dataset> {
        let samples = self.samples.par_iter().map(f).collect::<Result<Vec<_>>>()?;
        Dataset::new(samples, self.labels.clone(), self.class_names.clone(), self.split)
    }
}

fn cifar_class_names(n: usize) -> Vec<String> {
    const NAMES: [&str; 10] = [
        "airplane", "automobile", "bird", "cat", "deer", "dog", "frog", "horse", "ship", "truck",
    ];
    (0..n)
        .map(|i| NAMES.get(i).map_or_else(|| format!("class{i}"), |s| s.to_string()))
        .collect()
}

/// Decodes CIFAR-10 binary records: one label byte then 1024 bytes for each
/// of the R, G and B planes. Pixels are scaled to `[0, 1]`.
pub fn decode_cifar10(bytes: &[u8], split: Split) -> Result<Dataset> {
    if !bytes.len().is_multiple_of(CIFAR_RECORD) {
        let complete = bytes.len() / CIFAR_RECORD;
        return Err(Error::Format {
            offset: (complete * CIFAR_RECORD) as u64,
            msg: format!(
                "truncated record: {} trailing bytes, records are {CIFAR_RECORD} bytes",
                bytes.len() - complete * CIFAR_RECORD
            ),
        });
    }
    let mut samples = Vec::with_capacity(bytes.len() / CIFAR_RECORD);
    let mut labels = Vec::with_capacity(samples.capacity());
    for (i, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        let y = rec[0] as usize;
        if y >= 10 {
            return Err(Error::Format {
                offset: (i * CIFAR_RECORD) as u64,
                msg: format!("label byte {y} outside 0..10"),
            });
        }
        labels.push(y);
        let data = rec[1..].iter().map(|&b| b as f64 / 255.0).collect();
        samples.push(Tensor3::from_vec(3, CIFAR_SIDE, CIFAR_SIDE, data)?);
    }
    Dataset::new(samples, labels, cifar_class_names(10), split)
}

/// Reads one CIFAR-10 binary batch file, or every batch of the split when
/// `path` is a directory (`data_batch_*.bin` / `test_batch.bin`).
pub fn load_cifar10(path: &Path, split: Split) -> Result<Dataset> {
    let files: Vec<PathBuf> = if path.is_dir() {
        let mut v: Vec<PathBuf> = fs::read_dir(path)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
                match split {
                    Split::Train => name.starts_with("data_batch") && name.ends_with(".bin"),
                    Split::Test => name == "test_batch.bin",
                }
            })
            .collect();
        v.sort();
        if v.is_empty() {
            return Err(Error::Config(format!(
                "no CIFAR-10 {} batches in {}",
                split.name(),
                path.display()
            )));
        }
        v
    } else {
        vec![path.to_path_buf()]
    };
    let mut all = Dataset {
        samples: Vec::new(),
        labels: Vec::new(),
        class_names: cifar_class_names(10),
        split,
    };
    for f in files {
        let bytes = fs::read(&f)?;
        let part = decode_cifar10(&bytes, split).map_err(|e| match e {
            Error::Format { offset, msg } => Error::Format {
                offset,
                msg: format!("{}: {msg}", f.display()),
            },
            other => other,
        })?;
        all.samples.extend(part.samples);
        all.labels.extend(part.labels);
    }
    if let Some(meta) = path.is_dir().then(|| path.join("batches.meta.txt")).filter(|p| p.exists()) {
        let names: Vec<String> = fs::read_to_string(meta)?
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(String::from)
            .collect();
        if names.len() == 10 {
            all.class_names = names;
        }
    }
    Ok(all)
}

/// Encodes `[0, 1]` RGB tensors as CIFAR-10 binary records.
pub fn encode_cifar10(samples: &[Tensor3], labels: &[usize]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(samples.len() * CIFAR_RECORD);
    for (s, &y) in samples.iter().zip(labels) {
        if s.shape() != (3, CIFAR_SIDE, CIFAR_SIDE) {
            return Err(Error::Dimension(format!("CIFAR record needs 3x32x32, got {:?}", s.shape())));
        }
        if y > 255 {
            return Err(Error::Label { label: y, classes: 256 });
        }
        out.push(y as u8);
        out.extend(s.data().iter().map(|&v| to_byte(v)));
    }
    Ok(out)
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Reads a binary or ASCII PGM (1 map) or PPM (3 maps), scaled to `[0, 1]`.
pub fn read_pnm(path: &Path) -> Result<Tensor3> {
    let bytes = fs::read(path)?;
    decode_pnm(&bytes)
}

pub fn decode_pnm(bytes: &[u8]) -> Result<Tensor3> {
    let mut pos = 0usize;
    let mut token = |bytes: &[u8]| -> Result<(String, usize)> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format {
                offset: start as u64,
                msg: "unexpected end of image header".into(),
            });
        }
        Ok((String::from_utf8_lossy(&bytes[start..pos]).into_owned(), start))
    };
    let (magic, _) = token(bytes)?;
    let maps = match magic.as_str() {
        "P2" | "P5" => 1,
        "P3" | "P6" => 3,
        _ => {
            return Err(Error::Format {
                offset: 0,
                msg: format!("unsupported image magic '{magic}'"),
            })
        }
    };
    let mut num = |bytes: &[u8]| -> Result<usize> {
        let (t, at) = token(bytes)?;
        t.parse::<usize>().map_err(|_| Error::Format {
            offset: at as u64,
            msg: format!("bad header number '{t}'"),
        })
    };
    let w = num(bytes)?;
    let h = num(bytes)?;
    let maxval = num(bytes)?;
    if w == 0 || h == 0 || maxval == 0 || maxval > 65535 {
        return Err(Error::Format {
            offset: 0,
            msg: format!("invalid image header {w}x{h} max {maxval}"),
        });
    }
    let n = w * h * maps;
    let mut interleaved = Vec::with_capacity(n);
    if magic == "P5" || magic == "P6" {
        let start = pos + 1;
        let width = if maxval > 255 { 2 } else { 1 };
        let end = start + n * width;
        if end > bytes.len() {
            return Err(Error::Format {
                offset: bytes.len() as u64,
                msg: format!("pixel data truncated, expected {} bytes", n * width),
            });
        }
        let raw = &bytes[start..end];
        if width == 1 {
            interleaved.extend(raw.iter().map(|&b| b as f64 / maxval as f64));
        } else {
            interleaved.extend(
                raw.chunks_exact(2)
                    .map(|c| u16::from_be_bytes([c[0], c[1]]) as f64 / maxval as f64),
            );
        }
    } else {
        for _ in 0..n {
            interleaved.push(num(bytes)? as f64 / maxval as f64);
        }
    }
    // interleaved → planar
    let mut data = vec![0.0; n];
    for (i, v) in interleaved.iter().enumerate() {
        let (px, c) = (i / maps, i % maps);
        data[c * w * h + px] = *v;
    }
    Tensor3::from_vec(maps, h, w, data)
}

/// Writes 8-bit binary PGM.
pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    if pixels.len() != width * height {
        return Err(Error::Dimension(format!(
            "{} pixels for a {width}x{height} image",
            pixels.len()
        )));
    }
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    write!(f, "P5\n{width} {height}\n255\n")?;
    f.write_all(pixels)?;
    f.flush()?;
    Ok(())
}

/// Min-max maps `values` to 0..=255; a constant input maps to 128.
pub fn to_gray_bytes(values: &[f64]) -> Vec<u8> {
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![128; values.len()];
    }
    values
        .iter()
        .map(|v| (255.0 * (v - lo) / (hi - lo)).round() as u8)
        .collect()
}

/// Writes one map of `t`, min-max scaled, as PGM.
pub fn write_map_pgm(path: &Path, t: &Tensor3, map: usize) -> Result<()> {
    write_pgm(path, t.width(), t.height(), &to_gray_bytes(t.map(map)))
}

/// Reads every PGM/PPM under `root/<class>/`, classes in sorted order.
pub fn load_image_dir(root: &Path) -> Result<(Vec<Tensor3>, Vec<usize>, Vec<String>)> {
    let mut classes: Vec<PathBuf> = fs::read_dir(root)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    classes.sort();
    if classes.is_empty() {
        return Err(Error::Config(format!("no class directories in {}", root.display())));
    }
    let mut images = Vec::new();
    let mut labels = Vec::new();
    let mut names = Vec::new();
    for (c, dir) in classes.iter().enumerate() {
        names.push(dir.file_name().unwrap().to_string_lossy().into_owned());
        let mut files: Vec<PathBuf> = fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                matches!(
                    p.extension().and_then(|e| e.to_str()),
                    Some("pgm") | Some("ppm") | Some("pnm")
                )
            })
            .collect();
        files.sort();
        for f in files {
            images.push(read_pnm(&f)?);
            labels.push(c);
        }
    }
    Ok((images, labels, names))
}

/// ITU-R BT.601 luma; single-map input passes through.
pub fn grayscale(t: &Tensor3) -> Result<Tensor3> {
    match t.maps() {
        1 => Ok(t.clone()),
        3 => {
            let (r, g, b) = (t.map(0), t.map(1), t.map(2));
            let data = (0..t.plane_len())
                .map(|i| 0.299 * r[i] + 0.587 * g[i] + 0.114 * b[i])
                .collect();
            Tensor3::from_vec(1, t.height(), t.width(), data)
        }
        m => Err(Error::Dimension(format!("grayscale needs 1 or 3 maps, got {m}"))),
    }
}

/// RGB → YUV with BT.601 weights.
pub fn rgb_to_yuv(t: &Tensor3) -> Result<Tensor3> {
    if t.maps() != 3 {
        return Err(Error::Dimension(format!("YUV needs 3 maps, got {}", t.maps())));
    }
    let p = t.plane_len();
    let (r, g, b) = (t.map(0), t.map(1), t.map(2));
    let mut data = vec![0.0; 3 * p];
    for i in 0..p {
        let y = 0.299 * r[i] + 0.587 * g[i] + 0.114 * b[i];
        data[i] = y;
        data[p + i] = 0.492 * (b[i] - y);
        data[2 * p + i] = 0.877 * (r[i] - y);
    }
    Tensor3::from_vec(3, t.height(), t.width(), data)
}

/// Bilinear resampling with pixel-centre alignment, per map.
pub fn resize_bilinear(t: &Tensor3, height: usize, width: usize) -> Result<Tensor3> {
    if height == 0 || width == 0 || t.height() == 0 || t.width() == 0 {
        return Err(Error::Dimension("resize to or from an empty image".into()));
    }
    let (ih, iw) = (t.height(), t.width());
    let axis = |o: usize, n_out: usize, n_in: usize| -> (usize, usize, f64) {
        let s = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(n_in - 1);
        (i0, i1, s - i0 as f64)
    };
    let rows: Vec<_> = (0..height).map(|i| axis(i, height, ih)).collect();
    let cols: Vec<_> = (0..width).map(|j| axis(j, width, iw)).collect();
    let mut out = Tensor3::zeros(t.maps(), height, width);
    for m in 0..t.maps() {
        let src = t.map(m);
        let dst = out.map_mut(m);
        for (i, &(r0, r1, fr)) in rows.iter().enumerate() {
            for (j, &(c0, c1, fc)) in cols.iter().enumerate() {
                // a + f·(b − a) reproduces equal neighbours exactly
                let (a, b) = (src[r0 * iw + c0], src[r0 * iw + c1]);
                let top = a + fc * (b - a);
                let (a, b) = (src[r1 * iw + c0], src[r1 * iw + c1]);
                let bot = a + fc * (b - a);
                dst[i * width + j] = top + fr * (bot - top);
            }
        }
    }
    Ok(out)
}

/// Grayscale, squash to 151×151, then valid-mode 9×9 contrast normalization:
/// always `1 × 143 × 143`.
pub fn preprocess_caltech(image: &Tensor3) -> Result<Tensor3> {
    let g = grayscale(image)?;
    let r = resize_bilinear(&g, CALTECH_RESIZE, CALTECH_RESIZE)?;
    local_cn_valid(&r, &NormConfig::default())
}

/// Global chroma statistics, fitted on the training split only.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChromaStats {
    pub u_mean: f64,
    pub u_std: f64,
    pub v_mean: f64,
    pub v_std: f64,
}

impl ChromaStats {
    pub fn fit(train_rgb: &[Tensor3]) -> Result<ChromaStats> {
        if train_rgb.is_empty() {
            return Err(Error::Training("chroma statistics need training images".into()));
        }
        let yuv = train_rgb.iter().map(rgb_to_yuv).collect::<Result<Vec<_>>>()?;
        let stats = |m: usize| {
            let n = (yuv.len() * yuv[0].plane_len()) as f64;
            let mean = yuv.iter().map(|t| t.map(m).iter().sum::<f64>()).sum::<f64>() / n;
            let var = yuv
                .iter()
                .map(|t| t.map(m).iter().map(|v| (v - mean) * (v - mean)).sum::<f64>())
                .sum::<f64>()
                / n;
            (mean, var.sqrt())
        };
        let (u_mean, u_std) = stats(1);
        let (v_mean, v_std) = stats(2);
        Ok(ChromaStats {
            u_mean,
            u_std: if u_std > 0.0 { u_std } else { 1.0 },
            v_mean,
            v_std: if v_std > 0.0 { v_std } else { 1.0 },
        })
    }
}

/// YUV; Y locally contrast-normalized (same size, 9×9); U and V standardized
/// with global training statistics.
pub fn preprocess_cifar(image: &Tensor3, stats: &ChromaStats) -> Result<Tensor3> {
    if image.shape() != (3, CIFAR_SIDE, CIFAR_SIDE) {
        return Err(Error::Dimension(format!("expected 3x32x32, got {:?}", image.shape())));
    }
    let mut yuv = rgb_to_yuv(image)?;
    let y = Tensor3::from_vec(1, CIFAR_SIDE, CIFAR_SIDE, yuv.map(0).to_vec())?;
    let yn = local_cn(&y, &NormConfig::default())?;
    yuv.map_mut(0).copy_from_slice(yn.data());
    for (m, mean, std) in [(1, stats.u_mean, stats.u_std), (2, stats.v_mean, stats.v_std)] {
        yuv.map_mut(m).iter_mut().for_each(|v| *v = (*v - mean) / std);
    }
    Ok(yuv)
}

/// Preprocesses a train/test pair with statistics from the training half.
pub fn preprocess_cifar_split(train: &Dataset, test: &Dataset) -> Result<(Dataset, Dataset, ChromaStats)> {
    let stats = ChromaStats::fit(&train.samples)?;
    let tr = train.map_samples(|s| preprocess_cifar(s, &stats))?;
    let te = test.map_samples(|s| preprocess_cifar(s, &stats))?;
    Ok((tr, te, stats))
}

/// One preprocessing operation.
#[derive(Debug, Clone, PartialEq)]
pub enum PreprocOp {
    Grayscale,
    Resize { height: usize, width: usize },
    Yuv,
    LocalCnValid(NormConfig),
    ChannelStandardize(ChromaStats),
}

/// A shape-checked preprocessing pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct PreprocSpec {
    ops: Vec<PreprocOp>,
    input: (usize, usize, usize),
    output: (usize, usize, usize),
}

impl PreprocSpec {
    pub fn new(ops: Vec<PreprocOp>, input: (usize, usize, usize)) -> Result<Self> {
        let mut s = input;
        for op in &ops {
            s = match op {
                PreprocOp::Grayscale => {
                    if s.0 != 1 && s.0 != 3 {
                        return Err(Error::Config(format!("grayscale on {} maps", s.0)));
                    }
                    (1, s.1, s.2)
                }
                PreprocOp::Resize { height, width } => (s.0, *height, *width),
                PreprocOp::Yuv | PreprocOp::ChannelStandardize(_) => {
                    if s.0 != 3 {
                        return Err(Error::Config(format!("{op:?} needs 3 maps, pipeline has {}", s.0)));
                    }
                    s
                }
                PreprocOp::LocalCnValid(cfg) => {
                    cfg.validate()?;
                    if cfg.window > s.1 || cfg.window > s.2 {
                        return Err(Error::Config(format!(
                            "normalization window {} exceeds {}x{}",
                            cfg.window, s.1, s.2
                        )));
                    }
                    (s.0, s.1 - cfg.window + 1, s.2 - cfg.window + 1)
                }
            };
        }
        Ok(PreprocSpec { ops, input, output: s })
    }

    pub fn caltech(input: (usize, usize, usize)) -> Result<Self> {
        PreprocSpec::new(
            vec![
                PreprocOp::Grayscale,
                PreprocOp::Resize {
                    height: CALTECH_RESIZE,
                    width: CALTECH_RESIZE,
                },
                PreprocOp::LocalCnValid(NormConfig::default()),
            ],
            input,
        )
    }

    pub fn output_shape(&self) -> (usize, usize, usize) {
        self.output
    }

    pub fn apply(&self, t: &Tensor3) -> Result<Tensor3> {
        if t.shape() != self.input {
            return Err(Error::Dimension(format!(
                "pipeline expects {:?}, got {:?}",
                self.input,
                t.shape()
            )));
        }
        let mut cur = t.clone();
        for op in &self.ops {
            cur = match op {
                PreprocOp::Grayscale => grayscale(&cur)?,
                PreprocOp::Resize { height, width } => resize_bilinear(&cur, *height, *width)?,
                PreprocOp::Yuv => rgb_to_yuv(&cur)?,
                PreprocOp::LocalCnValid(cfg) => local_cn_valid(&cur, cfg)?,
                PreprocOp::ChannelStandardize(s) => {
                    let mut c = cur;
                    for (m, mean, std) in [(1, s.u_mean, s.u_std), (2, s.v_mean, s.v_std)] {
                        c.map_mut(m).iter_mut().for_each(|v| *v = (*v - mean) / std);
                    }
                    c
                }
            };
        }
        Ok(cur)
    }
}

/// Grid geometry `(width, height)` for `n` tiles of side `k`, `per_row` wide,
/// with 1-pixel separators.
pub fn filter_grid_size(n: usize, k: usize, per_row: usize) -> (usize, usize) {
    let cols = per_row.min(n).max(1);
    let rows = n.div_ceil(cols);
    ((k + 1) * cols - 1, (k + 1) * rows - 1)
}

/// Renders every kernel, min-max normalized on its own, into one grayscale
/// grid. Separators are black.
pub fn render_filter_grid(bank: &KernelBank, per_row: usize) -> Result<(usize, usize, Vec<u8>)> {
    let n = bank.n_kernels();
    if n == 0 || per_row == 0 {
        return Err(Error::Config("empty filter bank or zero tiles per row".into()));
    }
    let k = bank.k();
    let (w, h) = filter_grid_size(n, k, per_row);
    let cols = per_row.min(n);
    let mut px = vec![0u8; w * h];
    for idx in 0..n {
        let tile = to_gray_bytes(bank.kernel(idx));
        let (ty, tx) = (idx / cols, idx % cols);
        for i in 0..k {
            for j in 0..k {
                px[(ty * (k + 1) + i) * w + tx * (k + 1) + j] = tile[i * k + j];
            }
        }
    }
    Ok((w, h, px))
}

pub fn export_filter_grid(bank: &KernelBank, per_row: usize, path: &Path) -> Result<()> {
    let (w, h, px) = render_filter_grid(bank, per_row)?;
    write_pgm(path, w, h, &px)
}

/// Seeded two-class colour images in CIFAR-10 layout, used when no real
/// dataset is available.
///
/// Each image holds a smooth random background and several coloured line
/// strokes. Class 0 strokes lean towards horizontal, class 1 strokes towards
/// vertical; up to two extra strokes have uniform orientation. The learnable
/// signal is weak enough that a linear probe on random features is far from
/// perfect.
pub fn synthetic_strokes(per_class: usize, seed: u64) -> (Vec<Tensor3>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(2 * per_class);
    let mut labels = Vec::with_capacity(2 * per_class);
    for i in 0..2 * per_class {
        let label = i % 2;
        samples.push(stroke_image(label, &mut rng));
        labels.push(label);
    }
    (samples, labels)
}

fn stroke_image(label: usize, rng: &mut ChaCha8Rng) -> Tensor3 {
    let s = CIFAR_SIDE;
    let mut img = Tensor3::zeros(3, s, s);
    // background: per-channel linear ramp
    for c in 0..3 {
        let base: f64 = rng.random_range(0.2..0.8);
        let gx: f64 = rng.random_range(-0.01..0.01);
        let gy: f64 = rng.random_range(-0.01..0.01);
        for i in 0..s {
            for j in 0..s {
                img.set(c, i, j, base + gx * j as f64 + gy * i as f64);
            }
        }
    }
    let angle_noise = Normal::new(0.0, 0.5).unwrap();
    let strokes = rng.random_range(3..=5);
    // distractors with uniform orientation
    let distractors = rng.random_range(0..=2);
    for n in 0..strokes + distractors {
        let theta = if n < strokes {
            let base = if label == 0 { 0.0 } else { std::f64::consts::FRAC_PI_2 };
            base + angle_noise.sample(rng)
        } else {
            rng.random_range(0.0..std::f64::consts::PI)
        };
        let (dy, dx) = theta.sin_cos();
        let cy: f64 = rng.random_range(4.0..28.0);
        let cx: f64 = rng.random_range(4.0..28.0);
        let half: f64 = rng.random_range(4.0..11.0);
        let width: f64 = rng.random_range(0.7..1.6);
        let color: [f64; 3] = [rng.random(), rng.random(), rng.random()];
        for i in 0..s {
            for j in 0..s {
                let (py, px) = (i as f64 - cy, j as f64 - cx);
                let along = px * dx + py * dy;
                let across = (-px * dy + py * dx).abs();
                if along.abs() <= half && across <= width {
                    let a = (1.0 - (across / width).powi(2)).max(0.0);
                    for (c, &col) in color.iter().enumerate() {
                        let v = img.get(c, i, j);
                        img.set(c, i, j, v * (1.0 - a) + col * a);
                    }
                }
            }
        }
    }
    let noise = Normal::new(0.0, 0.06).unwrap();
    for v in img.data_mut() {
        *v = (*v + noise.sample(rng)).clamp(0.0, 1.0);
        // quantize like a stored 8-bit image
        *v = (*v * 255.0).round() / 255.0;
    }
    img
}

/// Writes a synthetic train/test pair as `data_batch_1.bin` and
/// `test_batch.bin` under `dir`.
pub fn write_synthetic_cifar(dir: &Path, train_per_class: usize, test_per_class: usize, seed: u64) -> Result<()> {
    fs::create_dir_all(dir)?;
    let (tr, trl) = synthetic_strokes(train_per_class, seed);
    let (te, tel) = synthetic_strokes(test_per_class, seed ^ 0x005e_ed0f_7e57);
    fs::write(dir.join("data_batch_1.bin"), encode_cifar10(&tr, &trl)?)?;
    fs::write(dir.join("test_batch.bin"), encode_cifar10(&te, &tel)?)?;
    fs::write(dir.join("batches.meta.txt"), synthetic_meta())?;
    Ok(())
}

fn synthetic_meta() -> String {
    let mut names = vec!["horizontal".to_string(), "vertical".to_string()];
    names.extend((2..10).map(|i| format!("unused{i}")));
    names.join("\n") + "\n"
}
