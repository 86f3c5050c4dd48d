//! Declarative network architectures and training protocols.
//!
//! An architecture is a list of stages, each
//! `encoder → |·| → {N, pool}` in a configured order. Architectures have a
//! one-line text form used for custom configurations and stored in model
//! files:
//!
//! ```text
//! input=3x32x32 classes=2 stage=si:32:7:lc8:pool-norm:max4/2:n9/1.6 stage=si:128:7:r16:norm-pool:avg3/1:n3/1
//! ```
//!
//! Stage fields are `kind:maps:kernel:table:order:pooling[:nWINDOW/SIGMA]`
//! where `table` is `full`, `rN` (random fan-in N) or `lcN` (luminance to
//! every map, each chroma channel to N maps), `order` is `norm-pool`,
//! `pool-norm` or `pool`, and `pooling` is `avgW/S`, `maxW/S` or
//! `pyrW/S+W/S+…`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::encoder::EncoderKind;
use crate::error::{Error, Result};
use crate::norm::{FloorMode, NormConfig};
use crate::pool::{PoolKind, PoolSpec, PyramidSpec};
use crate::tensor::ConnectionTable;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TableSpec {
    Full,
    Random(usize),
    LumaChroma(usize),
}

impl TableSpec {
    pub fn build<R: Rng + ?Sized>(&self, n_in: usize, n_out: usize, rng: &mut R) -> Result<ConnectionTable> {
        match *self {
            TableSpec::Full => Ok(ConnectionTable::full(n_in, n_out)),
            TableSpec::Random(f) => ConnectionTable::random(n_in, n_out, f, rng),
            TableSpec::LumaChroma(c) => {
                if n_in != 3 {
                    return Err(Error::Config(format!(
                        "luminance/chroma table needs 3 input maps, got {n_in}"
                    )));
                }
                ConnectionTable::luma_chroma(n_out, c, rng)
            }
        }
    }

    /// Whether `t` could have been produced by this spec.
    pub fn admits(&self, t: &ConnectionTable, n_in: usize, n_out: usize) -> bool {
        if t.n_in() != n_in || t.n_out() != n_out {
            return false;
        }
        match *self {
            TableSpec::Full => t.len() == n_in * n_out,
            TableSpec::Random(f) => (0..n_out).all(|o| t.fan_in(o) == f),
            TableSpec::LumaChroma(c) => {
                let chroma = |ch| t.entries().iter().filter(|&&(q, _)| q == ch).count();
                t.entries().iter().filter(|&&(q, _)| q == 0).count() == n_out
                    && chroma(1) == c
                    && chroma(2) == c
            }
        }
    }
}

/// Position of the contrast normalization relative to pooling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormPlacement {
    BeforePool,
    AfterPool,
    None,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Pooling {
    Plain(PoolSpec),
    Pyramid(PyramidSpec),
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageConfig {
    pub kind: EncoderKind,
    pub n_out: usize,
    pub k: usize,
    pub table: TableSpec,
    pub norm: NormPlacement,
    pub norm_cfg: NormConfig,
    pub pooling: Pooling,
}

/// Shapes flowing through one stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageShapes {
    pub input: (usize, usize, usize),
    pub encoded: (usize, usize, usize),
    /// Output of the stage; a pyramid stage reports `(len, 1, 1)`.
    pub output: (usize, usize, usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Arch {
    pub name: String,
    pub input: (usize, usize, usize),
    pub classes: usize,
    pub stages: Vec<StageConfig>,
}

impl Arch {
    /// Shape chain, validated against every module's constraints.
    pub fn shapes(&self) -> Result<Vec<StageShapes>> {
        if self.stages.is_empty() {
            return Err(Error::Config("architecture has no stages".into()));
        }
        if self.classes < 2 {
            return Err(Error::Config("need at least 2 classes".into()));
        }
        let mut cur = self.input;
        let mut out = Vec::with_capacity(self.stages.len());
        for (i, s) in self.stages.iter().enumerate() {
            let ctx = |m: String| Error::Config(format!("stage {}: {m}", i + 1));
            if s.n_out == 0 || s.k == 0 {
                return Err(ctx("maps and kernel size must be >= 1".into()));
            }
            match s.table {
                TableSpec::Random(f) if f == 0 || f > cur.0 => {
                    return Err(ctx(format!("fan-in {f} invalid for {} input maps", cur.0)))
                }
                TableSpec::LumaChroma(c) if cur.0 != 3 || c > s.n_out => {
                    return Err(ctx(format!("chroma fan-out {c} invalid for {} input maps", cur.0)))
                }
                _ => {}
            }
            if s.k > cur.1 || s.k > cur.2 {
                return Err(ctx(format!("kernel {} larger than {}x{} input", s.k, cur.1, cur.2)));
            }
            let enc = (s.n_out, cur.1 - s.k + 1, cur.2 - s.k + 1);
            let check_norm = |shape: (usize, usize, usize)| -> Result<()> {
                s.norm_cfg.validate().map_err(|e| ctx(e.to_string()))?;
                if s.norm_cfg.window > shape.1 || s.norm_cfg.window > shape.2 {
                    return Err(ctx(format!(
                        "normalization window {} larger than {}x{} maps",
                        s.norm_cfg.window, shape.1, shape.2
                    )));
                }
                Ok(())
            };
            if s.norm == NormPlacement::BeforePool {
                check_norm(enc)?;
            }
            let pooled = match &s.pooling {
                Pooling::Plain(p) => (
                    s.n_out,
                    p.output_dim(enc.1).map_err(|e| ctx(e.to_string()))?,
                    p.output_dim(enc.2).map_err(|e| ctx(e.to_string()))?,
                ),
                Pooling::Pyramid(p) => {
                    if i + 1 != self.stages.len() {
                        return Err(ctx("pyramid pooling is only allowed in the last stage".into()));
                    }
                    if s.norm == NormPlacement::AfterPool {
                        return Err(ctx("pyramid output cannot be normalized".into()));
                    }
                    (p.output_len(enc.0, enc.1, enc.2).map_err(|e| ctx(e.to_string()))?, 1, 1)
                }
            };
            if s.norm == NormPlacement::AfterPool {
                check_norm(pooled)?;
            }
            out.push(StageShapes {
                input: cur,
                encoded: enc,
                output: pooled,
            });
            cur = pooled;
        }
        Ok(out)
    }

    pub fn feature_len(&self) -> Result<usize> {
        let s = self.shapes()?;
        let (m, h, w) = s.last().expect("non-empty").output;
        Ok(m * h * w)
    }

    /// Same network with every normalization module removed.
    pub fn without_norm(&self) -> Arch {
        let mut a = self.clone();
        a.name = format!("{}-nocn", self.name);
        for s in &mut a.stages {
            s.norm = NormPlacement::None;
        }
        a
    }

    pub fn descriptor(&self) -> String {
        let (m, h, w) = self.input;
        let mut out = format!("input={m}x{h}x{w} classes={}", self.classes);
        for s in &self.stages {
            out.push_str(" stage=");
            out.push_str(&stage_descriptor(s));
        }
        out
    }

    pub fn from_descriptor(name: &str, desc: &str) -> Result<Arch> {
        let mut input = None;
        let mut classes = None;
        let mut stages = Vec::new();
        for tok in desc.split_whitespace() {
            let (key, val) = tok
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("bad architecture token '{tok}'")))?;
            match key {
                "input" => input = Some(parse_shape(val)?),
                "classes" => classes = Some(parse_num(val, "classes")?),
                "stage" => stages.push(parse_stage(val)?),
                _ => return Err(Error::Config(format!("unknown architecture key '{key}'"))),
            }
        }
        let arch = Arch {
            name: name.to_string(),
            input: input.ok_or_else(|| Error::Config("architecture needs input=MxHxW".into()))?,
            classes: classes.unwrap_or(2),
            stages,
        };
        arch.shapes()?;
        Ok(arch)
    }

    /// Named architectures. `classes` overrides the class count.
    pub fn preset(name: &str, classes: usize) -> Result<Arch> {
        let desc = match name {
            "caltech" => "input=1x143x143 stage=si:64:9:full:norm-pool:avg10/5 stage=si:256:9:r16:norm-pool:avg6/4",
            "caltech-pyramid" => {
                "input=1x143x143 stage=si:64:9:full:norm-pool:avg10/5 \
                 stage=si:256:9:r16:norm-pool:pyr6/4+8/5+10/8+18/18"
            }
            "cifar" => {
                "input=3x32x32 stage=si:64:7:lc16:pool-norm:max4/2:n9/1.6 \
                 stage=si:256:7:r32:pool-norm:max3/1:n3/1"
            }
            "cifar-avg" => {
                "input=3x32x32 stage=si:64:7:lc16:norm-pool:avg4/2:n9/1.6 \
                 stage=si:256:7:r32:norm-pool:avg3/1:n3/1"
            }
            "cifar-half" => {
                "input=3x32x32 stage=si:32:7:lc8:norm-pool:avg4/2:n9/1.6 \
                 stage=si:128:7:r16:norm-pool:avg3/1:n3/1"
            }
            "cifar-half-pyramid" => {
                "input=3x32x32 stage=si:32:7:lc8:norm-pool:avg4/2:n9/1.6 \
                 stage=si:128:7:r16:norm-pool:pyr3/1+4/2+6/6:n3/1"
            }
            "inversion" => {
                "input=1x143x143 stage=si:64:9:full:norm-pool:avg5/2 stage=si:128:9:r32:norm-pool:avg4/2"
            }
            "inversion-nocn" => {
                "input=1x143x143 stage=si:64:9:full:pool:avg5/2 stage=si:128:9:r32:pool:avg4/2"
            }
            "toy" => "input=1x12x12 stage=si:4:3:full:norm-pool:avg2/2:n3/1 stage=si:6:3:r2:norm-pool:avg3/1:n3/1",
            _ => return Err(Error::Config(format!("unknown architecture '{name}'"))),
        };
        let mut a = Arch::from_descriptor(name, desc)?;
        a.classes = classes;
        a.shapes()?;
        Ok(a)
    }

    pub fn preset_names() -> &'static [&'static str] {
        &[
            "caltech",
            "caltech-pyramid",
            "cifar",
            "cifar-avg",
            "cifar-half",
            "cifar-half-pyramid",
            "inversion",
            "inversion-nocn",
            "toy",
        ]
    }
}

fn stage_descriptor(s: &StageConfig) -> String {
    let table = match s.table {
        TableSpec::Full => "full".to_string(),
        TableSpec::Random(f) => format!("r{f}"),
        TableSpec::LumaChroma(c) => format!("lc{c}"),
    };
    let order = match s.norm {
        NormPlacement::BeforePool => "norm-pool",
        NormPlacement::AfterPool => "pool-norm",
        NormPlacement::None => "pool",
    };
    let pooling = match &s.pooling {
        Pooling::Plain(p) => format!(
            "{}{}/{}",
            if p.kind == PoolKind::Avg { "avg" } else { "max" },
            p.window,
            p.stride
        ),
        Pooling::Pyramid(p) => {
            let lv: Vec<String> = p.levels.iter().map(|(w, s)| format!("{w}/{s}")).collect();
            format!("pyr{}", lv.join("+"))
        }
    };
    let mut out = format!(
        "{}:{}:{}:{table}:{order}:{pooling}",
        s.kind.name(),
        s.n_out,
        s.k
    );
    if s.norm_cfg != NormConfig::default() {
        out.push_str(&format!(":n{}/{}", s.norm_cfg.window, s.norm_cfg.sigma));
    }
    out
}

fn parse_num(s: &str, what: &str) -> Result<usize> {
    s.parse()
        .map_err(|_| Error::Config(format!("bad {what} '{s}'")))
}

fn parse_shape(s: &str) -> Result<(usize, usize, usize)> {
    let p: Vec<&str> = s.split('x').collect();
    if p.len() != 3 {
        return Err(Error::Config(format!("bad shape '{s}', expected MxHxW")));
    }
    Ok((
        parse_num(p[0], "maps")?,
        parse_num(p[1], "height")?,
        parse_num(p[2], "width")?,
    ))
}

fn parse_window(s: &str) -> Result<(usize, usize)> {
    let (w, st) = s
        .split_once('/')
        .ok_or_else(|| Error::Config(format!("bad pooling window '{s}', expected W/S")))?;
    Ok((parse_num(w, "window")?, parse_num(st, "stride")?))
}

fn parse_stage(s: &str) -> Result<StageConfig> {
    let f: Vec<&str> = s.split(':').collect();
    if f.len() != 6 && f.len() != 7 {
        return Err(Error::Config(format!(
            "stage '{s}' needs kind:maps:kernel:table:order:pooling[:nW/S]"
        )));
    }
    let kind: EncoderKind = f[0].parse()?;
    let n_out = parse_num(f[1], "maps")?;
    let k = parse_num(f[2], "kernel")?;
    let table = match f[3] {
        "full" => TableSpec::Full,
        t if t.starts_with("lc") => TableSpec::LumaChroma(parse_num(&t[2..], "chroma fan-out")?),
        t if t.starts_with('r') => TableSpec::Random(parse_num(&t[1..], "fan-in")?),
        t => return Err(Error::Config(format!("bad table '{t}'"))),
    };
    let norm = match f[4] {
        "norm-pool" => NormPlacement::BeforePool,
        "pool-norm" => NormPlacement::AfterPool,
        "pool" => NormPlacement::None,
        o => return Err(Error::Config(format!("bad stage order '{o}'"))),
    };
    let pooling = if let Some(rest) = f[5].strip_prefix("avg") {
        let (w, st) = parse_window(rest)?;
        Pooling::Plain(PoolSpec::avg(w, st))
    } else if let Some(rest) = f[5].strip_prefix("max") {
        let (w, st) = parse_window(rest)?;
        Pooling::Plain(PoolSpec::max(w, st))
    } else if let Some(rest) = f[5].strip_prefix("pyr") {
        let levels = rest.split('+').map(parse_window).collect::<Result<Vec<_>>>()?;
        Pooling::Pyramid(PyramidSpec::new(levels)?)
    } else {
        return Err(Error::Config(format!("bad pooling '{}'", f[5])));
    };
    let norm_cfg = match f.get(6) {
        None => NormConfig::default(),
        Some(n) => {
            let body = n
                .strip_prefix('n')
                .ok_or_else(|| Error::Config(format!("bad normalization field '{n}'")))?;
            let (w, sigma) = body
                .split_once('/')
                .ok_or_else(|| Error::Config(format!("bad normalization field '{n}'")))?;
            NormConfig {
                window: parse_num(w, "normalization window")?,
                sigma: sigma
                    .parse()
                    .map_err(|_| Error::Config(format!("bad normalization sigma '{sigma}'")))?,
                floor: FloorMode::MeanSigma,
            }
        }
    };
    Ok(StageConfig {
        kind,
        n_out,
        k,
        table,
        norm,
        norm_cfg,
        pooling,
    })
}

/// How a stage's filters are initialized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    Random,
    Unsupervised,
    Discriminative,
}

impl Init {
    fn letter(&self) -> char {
        match self {
            Init::Random => 'R',
            Init::Unsupervised => 'U',
            Init::Discriminative => 'D',
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageProtocol {
    pub init: Init,
    /// Convolutional (rather than patch) pretraining; first stage only.
    pub conv: bool,
}

/// Where the sparse-state penalty is measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PenaltySite {
    PostEncoder,
    PostPool,
}

/// A training regime in table notation, e.g. `RR`, `D+D+`, `Dc+D+`, `R+L1`.
///
/// Each stage token is a letter `R`, `U` or `D`, an optional `c`, and an
/// optional `+` (global fine-tuning), optionally followed by `L1`
/// (sparse-state training). A single token applies to every stage; its `c`
/// applies to the first stage only.
#[derive(Debug, Clone, PartialEq)]
pub struct Protocol {
    pub stages: Vec<StageProtocol>,
    pub fine_tune: bool,
    pub sparse_state: bool,
    pub lambda_l1: f64,
    pub site: PenaltySite,
}

pub const DEFAULT_SPARSE_LAMBDA: f64 = 0.4;

impl Protocol {
    /// Per-stage protocol for an `n`-stage network, broadcasting a single token.
    pub fn resolve(&self, n: usize) -> Result<Protocol> {
        let stages = if self.stages.len() == n {
            self.stages.clone()
        } else if self.stages.len() == 1 {
            let t = self.stages[0];
            (0..n)
                .map(|i| StageProtocol {
                    init: t.init,
                    conv: t.conv && i == 0,
                })
                .collect()
        } else {
            return Err(Error::Config(format!(
                "protocol has {} stage tokens for a {n}-stage network",
                self.stages.len()
            )));
        };
        Ok(Protocol {
            stages,
            ..self.clone()
        })
    }

    pub fn needs_pretraining(&self) -> bool {
        self.stages.iter().any(|s| s.init != Init::Random)
    }

    pub fn supervised(&self) -> bool {
        self.fine_tune || self.sparse_state
    }

    pub fn with_lambda(mut self, lambda: f64) -> Self {
        self.lambda_l1 = lambda;
        self
    }
}

impl FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Protocol> {
        let bad = |m: &str| Error::Config(format!("bad protocol '{s}': {m}"));
        let chars: Vec<char> = s.trim().chars().collect();
        if chars.is_empty() {
            return Err(bad("empty"));
        }
        let mut stages = Vec::new();
        let mut plus = Vec::new();
        let mut l1 = Vec::new();
        let mut i = 0;
        while i < chars.len() {
            let init = match chars[i] {
                'R' => Init::Random,
                'U' => Init::Unsupervised,
                'D' => Init::Discriminative,
                c => return Err(bad(&format!("unexpected '{c}'"))),
            };
            i += 1;
            let conv = chars.get(i) == Some(&'c');
            if conv {
                i += 1;
                if init == Init::Random {
                    return Err(bad("random stages have nothing to pretrain convolutionally"));
                }
                if !stages.is_empty() {
                    return Err(bad("convolutional pretraining applies to the first stage only"));
                }
            }
            let p = chars.get(i) == Some(&'+');
            if p {
                i += 1;
            }
            let has_l1 = chars.get(i) == Some(&'L') && chars.get(i + 1) == Some(&'1');
            if has_l1 {
                if !p {
                    return Err(bad("L1 needs the supervised '+' marker"));
                }
                i += 2;
            }
            stages.push(StageProtocol { init, conv });
            plus.push(p);
            l1.push(has_l1);
        }
        if plus.iter().any(|&p| p != plus[0]) {
            return Err(bad("fine-tuning must be marked on every stage or none"));
        }
        if l1.iter().any(|&p| p != l1[0]) {
            return Err(bad("L1 must be marked on every stage or none"));
        }
        Ok(Protocol {
            stages,
            fine_tune: plus[0],
            sparse_state: l1[0],
            lambda_l1: DEFAULT_SPARSE_LAMBDA,
            site: PenaltySite::PostPool,
        })
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for s in &self.stages {
            write!(f, "{}", s.init.letter())?;
            if s.conv {
                write!(f, "c")?;
            }
            if self.fine_tune || self.sparse_state {
                write!(f, "+")?;
            }
            if self.sparse_state {
                write!(f, "L1")?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn preset_shape_chains() {
        let s = Arch::preset("caltech", 102).unwrap().shapes().unwrap();
        assert_eq!(s[0].encoded, (64, 135, 135));
        assert_eq!(s[0].output, (64, 26, 26));
        assert_eq!(s[1].encoded, (256, 18, 18));
        assert_eq!(s[1].output, (256, 4, 4));
        let p = Arch::preset("caltech-pyramid", 102).unwrap();
        assert_eq!(p.feature_len().unwrap(), 256 * (16 + 9 + 4 + 1));
        let c = Arch::preset("cifar", 10).unwrap().shapes().unwrap();
        assert_eq!(c[0].output, (64, 12, 12));
        assert_eq!(c[1].output, (256, 4, 4));
        let i = Arch::preset("inversion", 2).unwrap().shapes().unwrap();
        assert_eq!(i[0].output, (64, 66, 66));
        assert_eq!(i[1].output, (128, 28, 28));
        let h = Arch::preset("cifar-half-pyramid", 2).unwrap();
        assert_eq!(h.feature_len().unwrap(), 128 * (16 + 4 + 1));
    }

    #[test]
    fn descriptor_round_trip() {
        for name in Arch::preset_names() {
            let a = Arch::preset(name, 7).unwrap();
            let b = Arch::from_descriptor(name, &a.descriptor()).unwrap();
            assert_eq!(a, b, "{name}");
        }
    }

    #[test]
    fn nocn_differs_only_in_norm() {
        let a = Arch::preset("inversion", 2).unwrap();
        let b = Arch::preset("inversion-nocn", 2).unwrap();
        assert_eq!(a.without_norm().stages, b.stages);
        assert_eq!(a.shapes().unwrap(), b.shapes().unwrap());
    }

    #[test]
    fn inconsistent_chains_are_config_errors() {
        for desc in [
            "input=1x10x10 stage=si:4:11:full:pool:avg2/2",
            "input=1x10x10 stage=si:4:3:r2:pool:avg2/2",
            "input=1x10x10 stage=si:4:3:full:pool:pyr2/2 stage=si:4:1:full:pool:avg1/1",
            "input=1x12x12 stage=si:4:3:full:pool-norm:avg4/4",
            "input=1x12x12 stage=si:4:3:full:pool:avg2/3",
            "input=1x12x12 stage=xx:4:3:full:pool:avg2/2",
        ] {
            assert!(matches!(Arch::from_descriptor("t", desc), Err(Error::Config(_))), "{desc}");
        }
    }

    #[test]
    fn table_specs_build_admissible_tables() {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        for (spec, n_in) in [(TableSpec::Full, 3), (TableSpec::Random(2), 5), (TableSpec::LumaChroma(4), 3)] {
            let t = spec.build(n_in, 8, &mut r).unwrap();
            assert!(spec.admits(&t, n_in, 8));
        }
        let t = TableSpec::LumaChroma(16).build(3, 64, &mut r).unwrap();
        assert_eq!(t.len(), 96);
    }

    #[test]
    fn protocol_grammar() {
        let p: Protocol = "Dc+D+".parse().unwrap();
        assert_eq!(p.stages.len(), 2);
        assert!(p.stages[0].conv && !p.stages[1].conv);
        assert!(p.fine_tune && !p.sparse_state);
        assert_eq!(p.to_string(), "Dc+D+");

        let p: Protocol = "R+L1".parse().unwrap();
        assert!(p.sparse_state && p.fine_tune);
        assert_eq!(p.lambda_l1, 0.4);
        assert_eq!(p.site, PenaltySite::PostPool);
        let r = p.resolve(2).unwrap();
        assert_eq!(r.to_string(), "R+L1R+L1");

        let p: Protocol = "Uc".parse().unwrap();
        let r = p.resolve(2).unwrap();
        assert!(r.stages[0].conv && !r.stages[1].conv);
        assert!(!r.supervised());

        for bad in ["", "X", "RL1", "D+D", "DDc", "Rc", "D+L1D+", "RRR+"] {
            assert!(bad.parse::<Protocol>().is_err(), "{bad}");
        }
        assert!("RRR".parse::<Protocol>().unwrap().resolve(2).is_err());
        assert!(!"RR".parse::<Protocol>().unwrap().needs_pretraining());
    }
}
