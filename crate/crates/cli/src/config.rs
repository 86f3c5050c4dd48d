//! Flat `key=value` run configuration: file values first, flags on top.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use sparsefeat::arch::Arch;
use sparsefeat::{Error, Protocol, Result, TrainConfig};

#[derive(Debug, Clone)]
pub struct RunConfig {
    /// Preset name or a full `input=... stage=...` descriptor.
    pub arch: String,
    pub protocol: String,
    pub data: Option<PathBuf>,
    pub out: PathBuf,
    pub threads: usize,
    /// CIFAR class subset, empty for all.
    pub classes: Vec<usize>,
    pub train_per_class: Option<usize>,
    pub test_per_class: Option<usize>,
    pub checkpoint: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub model_nocn: Option<PathBuf>,
    pub steps: usize,
    /// `random` or `original`.
    pub init: String,
    /// `output` or `prepool`.
    pub match_point: String,
    pub per_row: usize,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            arch: "cifar".into(),
            protocol: "R".into(),
            data: None,
            out: PathBuf::from("out"),
            threads: 0,
            classes: Vec::new(),
            train_per_class: None,
            test_per_class: None,
            checkpoint: None,
            model: None,
            model_nocn: None,
            steps: 200,
            init: "random".into(),
            match_point: "output".into(),
            per_row: 8,
            train: TrainConfig::default(),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("bad value '{v}' for {key}")))
}

fn opt_path(v: &str) -> Option<PathBuf> {
    (!v.is_empty()).then(|| PathBuf::from(v))
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

fn show_opt(v: Option<usize>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

impl RunConfig {
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let v = v.trim();
        match key {
            "arch" => self.arch = v.to_string(),
            "protocol" => self.protocol = v.to_string(),
            "data" => self.data = opt_path(v),
            "out" => self.out = PathBuf::from(v),
            "threads" => self.threads = parse(key, v)?,
            "classes" => {
                self.classes = v
                    .split(',')
                    .filter(|s| !s.trim().is_empty())
                    .map(|s| parse(key, s.trim()))
                    .collect::<Result<_>>()?
            }
            "train_per_class" => self.train_per_class = if v.is_empty() { None } else { Some(parse(key, v)?) },
            "test_per_class" => self.test_per_class = if v.is_empty() { None } else { Some(parse(key, v)?) },
            "checkpoint" => self.checkpoint = opt_path(v),
            "model" => self.model = opt_path(v),
            "model_nocn" => self.model_nocn = opt_path(v),
            "steps" => self.steps = parse(key, v)?,
            "init" => match v {
                "random" | "original" => self.init = v.to_string(),
                _ => return Err(Error::Config(format!("init must be random or original, got '{v}'"))),
            },
            "match" => match v {
                "output" | "prepool" => self.match_point = v.to_string(),
                _ => return Err(Error::Config(format!("match must be output or prepool, got '{v}'"))),
            },
            "per_row" => self.per_row = parse(key, v)?,
            _ => self.train.set(key, v)?,
        }
        Ok(())
    }

    /// Reads `key=value` lines; blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got '{line}'", n + 1)))?;
            self.set(k.trim(), v)
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        self.apply_text(&text)
    }

    /// Every key with its resolved value, in a form [`RunConfig::apply_text`] reads back.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let classes: Vec<String> = self.classes.iter().map(|c| c.to_string()).collect();
        let pairs = [
            ("arch", self.arch.clone()),
            ("protocol", self.protocol.clone()),
            ("data", show_path(&self.data)),
            ("out", self.out.display().to_string()),
            ("threads", self.threads.to_string()),
            ("classes", classes.join(",")),
            ("train_per_class", show_opt(self.train_per_class)),
            ("test_per_class", show_opt(self.test_per_class)),
            ("checkpoint", show_path(&self.checkpoint)),
            ("model", show_path(&self.model)),
            ("model_nocn", show_path(&self.model_nocn)),
            ("steps", self.steps.to_string()),
            ("init", self.init.clone()),
            ("match", self.match_point.clone()),
            ("per_row", self.per_row.to_string()),
        ];
        for (k, v) in pairs {
            let _ = writeln!(s, "{k}={v}");
        }
        s.push_str(&self.train.render());
        s
    }

    pub fn protocol(&self) -> Result<Protocol> {
        self.protocol.parse()
    }

    pub fn arch(&self, classes: usize) -> Result<Arch> {
        if self.arch.contains("input=") {
            Arch::from_descriptor("custom", &format!("{} classes={classes}", strip_classes(&self.arch)))
        } else {
            Arch::preset(&self.arch, classes)
        }
    }

    pub fn require_data(&self) -> Result<&Path> {
        self.data
            .as_deref()
            .ok_or_else(|| Error::Config("--data is required".into()))
    }
}

/// The class count always comes from the dataset.
fn strip_classes(desc: &str) -> String {
    desc.split_whitespace()
        .filter(|t| !t.starts_with("classes="))
        .collect::<Vec<_>>()
        .join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn render_round_trips() {
        let mut c = RunConfig::default();
        c.apply_text("arch=toy\nprotocol=Uc+U+\nclasses=0, 3\nseed=9\nlambda_l1=0.2\n# note\n\nsteps=17")
            .unwrap();
        let mut back = RunConfig::default();
        back.apply_text(&c.render()).unwrap();
        assert_eq!(back.render(), c.render());
        assert_eq!(back.classes, vec![0, 3]);
        assert_eq!(back.train.seed, 9);
        assert_eq!(back.train.lambda_l1, Some(0.2));
    }

    #[test]
    fn unknown_keys_and_bad_lines_are_errors() {
        let mut c = RunConfig::default();
        assert!(matches!(c.apply_text("colour=blue"), Err(Error::Config(_))));
        assert!(matches!(c.apply_text("epochs"), Err(Error::Config(_))));
        assert!(matches!(c.apply_text("epochs=many"), Err(Error::Config(_))));
        assert!(matches!(c.apply_text("init=zeros"), Err(Error::Config(_))));
    }

    #[test]
    fn custom_descriptor_takes_class_count_from_data() {
        let mut c = RunConfig::default();
        c.set("arch", "input=1x12x12 classes=9 stage=si:4:3:full:norm-pool:avg2/2:n3/1").unwrap();
        let a = c.arch(3).unwrap();
        assert_eq!(a.classes, 3);
        assert_eq!(a.input, (1, 12, 12));
    }
}
