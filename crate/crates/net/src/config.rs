//! Model and training configuration as a flat `key = value` file.

use std::fmt::{self, Write as _};
use std::fs;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("unknown key {0:?}")]
    UnknownKey(String),
    #[error("{key}: cannot parse {value:?}")]
    BadValue { key: String, value: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("{0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Optimizer {
    Sgd,
    Adam,
}

impl fmt::Display for Optimizer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Optimizer::Sgd => "sgd",
            Optimizer::Adam => "adam",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub input_hw: (usize, usize),
    pub scale_strides: [usize; 3],
    pub stem_channels: usize,
    pub channels: [usize; 3],
    pub fusion_channels: usize,
    pub msfa: bool,
    pub msfa_rounds: usize,
    pub n_classes: usize,
    pub n_angle_bins: usize,
    pub anchors: [(f64, f64); 3],
    pub roi_size: usize,
    pub relation_channels: usize,
    pub relation_hidden: usize,
    pub short_circuit: bool,
    /// Uniform per-edge jitter (px) of the ground-truth boxes the relation
    /// head trains on, so it sees detector-like box noise.
    pub box_jitter: f64,
    pub alpha: f64,
    pub beta: f64,
    pub bce_mean: bool,
    pub optimizer: Optimizer,
    pub lr: f64,
    pub batch: usize,
    pub decay_every: usize,
    /// Updates per training stage.
    pub iterations: usize,
    pub augment: bool,
    pub seed: u64,
    pub score_threshold: f64,
    pub nms_iou: f64,
    pub grasp_threshold: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_hw: (96, 96),
            scale_strides: [2, 4, 8],
            stem_channels: 8,
            channels: [16, 32, 48],
            fusion_channels: 32,
            msfa: true,
            msfa_rounds: 1,
            n_classes: 6,
            n_angle_bins: 19,
            anchors: [(12.0, 6.0), (24.0, 10.0), (40.0, 16.0)],
            roi_size: 7,
            relation_channels: 16,
            relation_hidden: 64,
            short_circuit: true,
            box_jitter: 3.0,
            alpha: 5.0,
            beta: 5.0,
            bce_mean: false,
            optimizer: Optimizer::Adam,
            lr: 0.001,
            batch: 8,
            decay_every: 10_000,
            iterations: 1000,
            augment: true,
            seed: 0,
            score_threshold: 0.5,
            nms_iou: 0.45,
            grasp_threshold: 0.5,
        }
    }
}

fn list<T: fmt::Display>(xs: &[T]) -> String {
    xs.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl ModelConfig {
    /// Paper-scale geometry: 600x600 input with 300/100/40 feature maps.
    pub fn paper_scale() -> Self {
        Self {
            input_hw: (600, 600),
            scale_strides: [2, 6, 15],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        let (h, w) = self.input_hw;
        for &s in &self.scale_strides {
            if s == 0 || h % s != 0 || w % s != 0 {
                return bad(format!("input {h}x{w} is not divisible by stride {s}"));
            }
        }
        if !self.scale_strides.windows(2).all(|p| p[0] < p[1]) {
            return bad(format!("strides {:?} must increase", self.scale_strides));
        }
        if self.channels[1] != self.fusion_channels {
            return bad(format!(
                "middle channels {} must equal fusion_channels {} so heads are shared with and without aggregation",
                self.channels[1], self.fusion_channels
            ));
        }
        if self.channels.contains(&0) || self.stem_channels == 0 || self.fusion_channels == 0 {
            return bad("channel counts must be positive".into());
        }
        if self.n_classes == 0 || self.n_angle_bins == 0 || self.roi_size == 0 {
            return bad("n_classes, n_angle_bins and roi_size must be positive".into());
        }
        if self.anchors.iter().any(|&(a, b)| !(a > 0.0 && b > 0.0)) {
            return bad("anchor sizes must be positive".into());
        }
        if self.msfa && self.msfa_rounds == 0 {
            return bad("msfa_rounds must be at least 1".into());
        }
        if self.batch == 0 || !(self.lr > 0.0) {
            return bad("batch and lr must be positive".into());
        }
        for (k, v) in [("alpha", self.alpha), ("beta", self.beta), ("box_jitter", self.box_jitter)] {
            if !(v >= 0.0) {
                return bad(format!("{k} must be non-negative"));
            }
        }
        Ok(())
    }

    /// Angular width of one angle bin, degrees.
    pub fn bin_width(&self) -> f64 {
        180.0 / self.n_angle_bins as f64
    }

    /// Channels per anchor in the grasp head: offsets, confidence, angles, classes.
    pub fn grasp_channels(&self) -> usize {
        5 + self.n_angle_bins + self.n_classes
    }

    pub fn map_hw(&self, scale: usize) -> (usize, usize) {
        let s = self.scale_strides[scale];
        (self.input_hw.0 / s, self.input_hw.1 / s)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k} = {v}").unwrap();
        kv("input_hw", format!("{}x{}", self.input_hw.0, self.input_hw.1));
        kv("scale_strides", list(&self.scale_strides));
        kv("stem_channels", self.stem_channels.to_string());
        kv("channels", list(&self.channels));
        kv("fusion_channels", self.fusion_channels.to_string());
        kv("msfa", self.msfa.to_string());
        kv("msfa_rounds", self.msfa_rounds.to_string());
        kv("n_classes", self.n_classes.to_string());
        kv("n_angle_bins", self.n_angle_bins.to_string());
        kv(
            "anchors",
            self.anchors.iter().map(|(a, b)| format!("{a}x{b}")).collect::<Vec<_>>().join(","),
        );
        kv("roi_size", self.roi_size.to_string());
        kv("relation_channels", self.relation_channels.to_string());
        kv("relation_hidden", self.relation_hidden.to_string());
        kv("short_circuit", self.short_circuit.to_string());
        kv("box_jitter", self.box_jitter.to_string());
        kv("alpha", self.alpha.to_string());
        kv("beta", self.beta.to_string());
        kv("bce_mean", self.bce_mean.to_string());
        kv("optimizer", self.optimizer.to_string());
        kv("lr", self.lr.to_string());
        kv("batch", self.batch.to_string());
        kv("decay_every", self.decay_every.to_string());
        kv("iterations", self.iterations.to_string());
        kv("augment", self.augment.to_string());
        kv("seed", self.seed.to_string());
        kv("score_threshold", self.score_threshold.to_string());
        kv("nms_iou", self.nms_iou.to_string());
        kv("grasp_threshold", self.grasp_threshold.to_string());
        s
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let bad = || ConfigError::BadValue {
            key: key.to_string(),
            value: value.to_string(),
        };
        fn num<T: std::str::FromStr>(v: &str, bad: impl Fn() -> ConfigError) -> Result<T, ConfigError> {
            v.trim().parse().map_err(|_| bad())
        }
        fn three<T: std::str::FromStr + Copy>(v: &str, bad: impl Fn() -> ConfigError) -> Result<[T; 3], ConfigError> {
            let parts: Vec<T> = v.split(',').map(|p| num(p, &bad)).collect::<Result<_, _>>()?;
            parts.try_into().map_err(|_| bad())
        }
        fn pair(v: &str, bad: impl Fn() -> ConfigError) -> Result<(f64, f64), ConfigError> {
            let (a, b) = v.trim().split_once('x').ok_or_else(&bad)?;
            Ok((num(a, &bad)?, num(b, &bad)?))
        }
        match key {
            "input_hw" => {
                let (h, w) = pair(value, bad)?;
                if h.fract() != 0.0 || w.fract() != 0.0 || h < 1.0 || w < 1.0 {
                    return Err(bad());
                }
                self.input_hw = (h as usize, w as usize);
            }
            "scale_strides" => self.scale_strides = three(value, bad)?,
            "stem_channels" => self.stem_channels = num(value, bad)?,
            "channels" => self.channels = three(value, bad)?,
            "fusion_channels" => self.fusion_channels = num(value, bad)?,
            "msfa" => self.msfa = num(value, bad)?,
            "msfa_rounds" => self.msfa_rounds = num(value, bad)?,
            "n_classes" => self.n_classes = num(value, bad)?,
            "n_angle_bins" => self.n_angle_bins = num(value, bad)?,
            "anchors" => {
                let parts: Vec<(f64, f64)> = value.split(',').map(|p| pair(p, bad)).collect::<Result<_, _>>()?;
                self.anchors = parts.try_into().map_err(|_| bad())?;
            }
            "roi_size" => self.roi_size = num(value, bad)?,
            "relation_channels" => self.relation_channels = num(value, bad)?,
            "relation_hidden" => self.relation_hidden = num(value, bad)?,
            "short_circuit" => self.short_circuit = num(value, bad)?,
            "box_jitter" => self.box_jitter = num(value, bad)?,
            "alpha" => self.alpha = num(value, bad)?,
            "beta" => self.beta = num(value, bad)?,
            "bce_mean" => self.bce_mean = num(value, bad)?,
            "optimizer" => {
                self.optimizer = match value.trim() {
                    "sgd" => Optimizer::Sgd,
                    "adam" => Optimizer::Adam,
                    _ => return Err(bad()),
                }
            }
            "lr" => self.lr = num(value, bad)?,
            "batch" => self.batch = num(value, bad)?,
            "decay_every" => self.decay_every = num(value, bad)?,
            "iterations" => self.iterations = num(value, bad)?,
            "augment" => self.augment = num(value, bad)?,
            "seed" => self.seed = num(value, bad)?,
            "score_threshold" => self.score_threshold = num(value, bad)?,
            "nms_iou" => self.nms_iou = num(value, bad)?,
            "grasp_threshold" => self.grasp_threshold = num(value, bad)?,
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    /// Parses a config file on top of the defaults. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: i + 1,
                message: format!("expected key = value, got {raw:?}"),
            })?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|e| ConfigError::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }
}
