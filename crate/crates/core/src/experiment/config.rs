//! Flat `section.key = value` experiment configuration.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::data::{Family, ToyDataConfig, UpsampleMode};
use crate::denoiser::DenoiserConfig;
use crate::diffusion::{ObjectiveKind, ObjectiveMode};
use crate::error::{Error, Result};
use crate::schedule::{LambdaPolicy, NoiseSchedule, SigmaMode};

/// Largest number of network calls allowed per image during training-time
/// evaluation.
pub const MAX_EVAL_CALLS: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TrainMode {
    #[default]
    Standard,
    Drm,
    Dream,
}

impl TrainMode {
    pub fn name(self) -> &'static str {
        match self {
            TrainMode::Standard => "standard",
            TrainMode::Drm => "drm",
            TrainMode::Dream => "dream",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [TrainMode::Standard, TrainMode::Drm, TrainMode::Dream]
            .into_iter()
            .find(|m| m.name() == s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub beta_start: f64,
    pub beta_end: f64,
    pub steps: usize,
    pub sigma_mode: SigmaMode,

    pub p: f64,
    pub shared_noise: bool,

    pub image_extent: usize,
    pub hidden_widths: Vec<usize>,
    pub time_embed_dim: usize,
    pub dropout: f64,

    pub mode: TrainMode,
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub eval_every: usize,
    pub seed: u64,

    pub stride: usize,

    pub data: ToyDataConfig,

    pub output_dir: PathBuf,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let steps = 200;
        Self {
            beta_start: 1e-5,
            beta_end: 0.1,
            steps,
            sigma_mode: SigmaMode::Beta,
            p: 1.0,
            shared_noise: true,
            image_extent: 8,
            hidden_widths: vec![256, 256],
            time_embed_dim: 32,
            dropout: 0.2,
            mode: TrainMode::Standard,
            iterations: 20_000,
            batch_size: 16,
            lr: 1e-3,
            eval_every: 2000,
            seed: 0,
            stride: default_stride(steps),
            data: ToyDataConfig::default(),
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

/// Smallest stride keeping sampling within [`MAX_EVAL_CALLS`] network calls.
pub fn default_stride(steps: usize) -> usize {
    steps.div_ceil(MAX_EVAL_CALLS).max(1)
}

/// Keys in echo order.
pub const KEYS: [&str; 25] = [
    "schedule.beta_start",
    "schedule.beta_end",
    "schedule.T",
    "schedule.sigma_mode",
    "dream.p",
    "dream.shared_noise",
    "net.image_extent",
    "net.hidden_widths",
    "net.time_embed_dim",
    "net.dropout",
    "train.mode",
    "train.iterations",
    "train.batch_size",
    "train.lr",
    "train.eval_every",
    "train.seed",
    "sample.stride",
    "data.image_extent",
    "data.scale",
    "data.family",
    "data.n_train",
    "data.n_eval",
    "data.seed",
    "data.upsample",
    "output.dir",
];

/// Keys a fair comparison may change.
pub const OBJECTIVE_KEYS: [&str; 3] = ["train.mode", "dream.p", "dream.shared_noise"];

fn bad(key: impl Into<String>, message: impl Into<String>) -> Error {
    Error::config(key, message)
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    v.parse().map_err(|e| bad(key, format!("cannot parse {v:?}: {e}")))
}

fn parse_real(key: &str, v: &str) -> Result<f64> {
    let x = match v.to_ascii_lowercase().as_str() {
        "inf" | "infinity" | "+inf" => f64::INFINITY,
        _ => parse_num::<f64>(key, v)?,
    };
    if x.is_nan() {
        return Err(bad(key, "NaN is not allowed"));
    }
    Ok(x)
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(bad(key, format!("expected true or false, got {v:?}"))),
    }
}

fn fmt_real(x: f64) -> String {
    if x == f64::INFINITY {
        "inf".into()
    } else {
        format!("{x:?}")
    }
}

/// Splits config text into `(key, value)` pairs, rejecting malformed lines
/// and duplicates.
fn entries(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| bad(format!("line {}", n + 1), format!("expected `key = value`, got {raw:?}")))?;
        let (k, v) = (k.trim(), v.trim());
        if !KEYS.contains(&k) {
            return Err(bad(k, "unknown key"));
        }
        if out.insert(k.to_string(), v.to_string()).is_some() {
            return Err(bad(k, "duplicate key"));
        }
    }
    Ok(out)
}

impl TrainConfig {
    /// Parses config text. Missing keys take their defaults; `sample.stride`
    /// defaults to the smallest stride within the evaluation budget and
    /// `data.image_extent` to `net.image_extent`.
    pub fn parse(text: &str) -> Result<Self> {
        let map = entries(text)?;
        let mut c = TrainConfig::default();
        let mut stride = None;
        let mut data_extent = None;
        for (k, v) in &map {
            let k = k.as_str();
            match k {
                "schedule.beta_start" => c.beta_start = parse_real(k, v)?,
                "schedule.beta_end" => c.beta_end = parse_real(k, v)?,
                "schedule.T" => c.steps = parse_num(k, v)?,
                "schedule.sigma_mode" => {
                    c.sigma_mode = SigmaMode::parse(v).ok_or_else(|| bad(k, "expected beta or posterior"))?
                }
                "dream.p" => c.p = parse_real(k, v)?,
                "dream.shared_noise" => c.shared_noise = parse_bool(k, v)?,
                "net.image_extent" => c.image_extent = parse_num(k, v)?,
                "net.hidden_widths" => {
                    c.hidden_widths = v
                        .split(',')
                        .map(str::trim)
                        .filter(|s| !s.is_empty())
                        .map(|s| parse_num(k, s))
                        .collect::<Result<_>>()?
                }
                "net.time_embed_dim" => c.time_embed_dim = parse_num(k, v)?,
                "net.dropout" => c.dropout = parse_real(k, v)?,
                "train.mode" => {
                    c.mode = TrainMode::parse(v).ok_or_else(|| bad(k, "expected standard, drm or dream"))?
                }
                "train.iterations" => c.iterations = parse_num(k, v)?,
                "train.batch_size" => c.batch_size = parse_num(k, v)?,
                "train.lr" => c.lr = parse_real(k, v)?,
                "train.eval_every" => c.eval_every = parse_num(k, v)?,
                "train.seed" => c.seed = parse_num(k, v)?,
                "sample.stride" => stride = Some(parse_num(k, v)?),
                "data.image_extent" => data_extent = Some(parse_num(k, v)?),
                "data.scale" => c.data.scale = parse_num(k, v)?,
                "data.family" => {
                    c.data.family = Family::parse(v).ok_or_else(|| {
                        bad(k, format!("expected one of {:?}", Family::ALL.map(|f| f.name())))
                    })?
                }
                "data.n_train" => c.data.n_train = parse_num(k, v)?,
                "data.n_eval" => c.data.n_eval = parse_num(k, v)?,
                "data.seed" => c.data.seed = parse_num(k, v)?,
                "data.upsample" => {
                    c.data.upsample = UpsampleMode::parse(v).ok_or_else(|| bad(k, "expected bilinear or nearest"))?
                }
                "output.dir" => {
                    if v.is_empty() {
                        return Err(bad(k, "must not be empty"));
                    }
                    c.output_dir = PathBuf::from(v)
                }
                _ => unreachable!("filtered by entries"),
            }
        }
        c.stride = stride.unwrap_or_else(|| default_stride(c.steps));
        c.data.image_extent = data_extent.unwrap_or(c.image_extent);
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta_start > 0.0 && self.beta_start < 1.0) {
            return Err(bad("schedule.beta_start", "must lie in (0, 1)"));
        }
        if !(self.beta_end >= self.beta_start && self.beta_end < 1.0) {
            return Err(bad("schedule.beta_end", "must lie in [beta_start, 1)"));
        }
        if !(1..=100_000).contains(&self.steps) {
            return Err(bad("schedule.T", "must lie in 1..=100000"));
        }
        if self.p < 0.0 {
            return Err(bad("dream.p", "must be >= 0 (inf allowed)"));
        }
        self.denoiser_config().validate()?;
        if self.iterations > 1_000_000_000 {
            return Err(bad("train.iterations", "must be <= 1e9"));
        }
        if !(1..=65_536).contains(&self.batch_size) {
            return Err(bad("train.batch_size", "must lie in 1..=65536"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(bad("train.lr", "must be a positive finite real"));
        }
        if self.eval_every == 0 {
            return Err(bad("train.eval_every", "must be >= 1"));
        }
        if self.stride == 0 || self.steps.div_ceil(self.stride) > MAX_EVAL_CALLS {
            return Err(bad(
                "sample.stride",
                format!(
                    "must be >= {} so evaluation uses at most {MAX_EVAL_CALLS} network calls",
                    default_stride(self.steps)
                ),
            ));
        }
        if self.data.image_extent != self.image_extent {
            return Err(bad("data.image_extent", "must equal net.image_extent"));
        }
        self.data.validate()?;
        Ok(())
    }

    /// Canonical text listing every key; parses back to an equal config.
    pub fn echo(&self) -> String {
        let widths: Vec<String> = self.hidden_widths.iter().map(|w| w.to_string()).collect();
        let mut s = String::new();
        let mut put = |k: &str, v: String| writeln!(s, "{k} = {v}").unwrap();
        put("schedule.beta_start", fmt_real(self.beta_start));
        put("schedule.beta_end", fmt_real(self.beta_end));
        put("schedule.T", self.steps.to_string());
        put("schedule.sigma_mode", self.sigma_mode.name().into());
        put("dream.p", fmt_real(self.p));
        put("dream.shared_noise", self.shared_noise.to_string());
        put("net.image_extent", self.image_extent.to_string());
        put("net.hidden_widths", widths.join(","));
        put("net.time_embed_dim", self.time_embed_dim.to_string());
        put("net.dropout", fmt_real(self.dropout));
        put("train.mode", self.mode.name().into());
        put("train.iterations", self.iterations.to_string());
        put("train.batch_size", self.batch_size.to_string());
        put("train.lr", fmt_real(self.lr));
        put("train.eval_every", self.eval_every.to_string());
        put("train.seed", self.seed.to_string());
        put("sample.stride", self.stride.to_string());
        put("data.image_extent", self.data.image_extent.to_string());
        put("data.scale", self.data.scale.to_string());
        put("data.family", self.data.family.name().into());
        put("data.n_train", self.data.n_train.to_string());
        put("data.n_eval", self.data.n_eval.to_string());
        put("data.seed", self.data.seed.to_string());
        put("data.upsample", self.data.upsample.name().into());
        put("output.dir", self.output_dir.display().to_string());
        s
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.beta_start, self.beta_end, self.steps, self.sigma_mode)
    }

    pub fn denoiser_config(&self) -> DenoiserConfig {
        DenoiserConfig {
            image_extent: self.image_extent,
            channels: 1,
            hidden_widths: self.hidden_widths.clone(),
            time_embed_dim: self.time_embed_dim,
            dropout: self.dropout,
            max_step: self.steps,
        }
    }

    pub fn objective_mode(&self) -> Result<ObjectiveMode> {
        let kind = match self.mode {
            TrainMode::Standard => ObjectiveKind::Standard,
            TrainMode::Drm => ObjectiveKind::Drm,
            TrainMode::Dream => ObjectiveKind::Dream(LambdaPolicy::new(self.p)?),
        };
        Ok(ObjectiveMode {
            kind,
            shared_noise: self.shared_noise,
        })
    }

    /// Keys, other than the objective selection and the output directory,
    /// whose values differ between the two configs.
    pub fn unfair_differences(&self, other: &TrainConfig) -> Vec<String> {
        let lines = |c: &TrainConfig| -> BTreeMap<String, String> {
            c.echo()
                .lines()
                .filter_map(|l| l.split_once(" = "))
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect()
        };
        let (a, b) = (lines(self), lines(other));
        a.iter()
            .filter(|(k, v)| !OBJECTIVE_KEYS.contains(&k.as_str()) && k.as_str() != "output.dir" && b.get(*k) != Some(v))
            .map(|(k, _)| k.clone())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = TrainConfig::parse("").unwrap();
        assert_eq!(c, TrainConfig::default());
        assert_eq!(c.stride, 4);
        assert_eq!(TrainConfig::parse(&c.echo()).unwrap(), c);
    }

    #[test]
    fn parses_every_key() {
        let text = "\
# toy run
schedule.beta_start = 1e-4
schedule.beta_end = 0.02   # linear
schedule.T = 100
schedule.sigma_mode = posterior
dream.p = inf
dream.shared_noise = false
net.image_extent = 4
net.hidden_widths =
net.time_embed_dim = 8
net.dropout = 0
train.mode = dream
train.iterations = 7
train.batch_size = 3
train.lr = 0.001
train.eval_every = 2
train.seed = 9
sample.stride = 10
data.image_extent = 4
data.scale = 2
data.family = checker_mix
data.n_train = 10
data.n_eval = 3
data.seed = 5
data.upsample = nearest
output.dir = /tmp/x
";
        let c = TrainConfig::parse(text).unwrap();
        assert_eq!(c.p, f64::INFINITY);
        assert!(c.hidden_widths.is_empty());
        assert_eq!(c.sigma_mode, SigmaMode::Posterior);
        assert_eq!(c.data.family, Family::CheckerMix);
        assert_eq!(c.mode, TrainMode::Dream);
        assert_eq!(TrainConfig::parse(&c.echo()).unwrap(), c);
        assert_eq!(c.objective_mode().unwrap().lambda(0.5), Some(0.0));
    }

    #[test]
    fn rejects_bad_input() {
        for text in [
            "train.lr = 0",
            "train.lr = -1",
            "trian.lr = 1e-3",
            "train.lr = 1e-3\ntrain.lr = 1e-3",
            "no equals sign",
            "dream.p = -1",
            "dream.p = nan",
            "sample.stride = 1",
            "schedule.T = 0",
            "schedule.beta_start = 0.2\nschedule.beta_end = 0.1",
            "data.image_extent = 16",
            "data.scale = 3",
            "net.dropout = 1",
            "net.time_embed_dim = 7",
            "train.batch_size = 0",
            "train.mode = fancy",
            "dream.shared_noise = yes",
            "net.hidden_widths = 4,0",
        ] {
            let err = TrainConfig::parse(text).unwrap_err();
            assert!(matches!(err, Error::Config { .. }), "{text}: {err}");
        }
    }

    #[test]
    fn fairness_guard() {
        let a = TrainConfig::default();
        let mut b = a.clone();
        b.mode = TrainMode::Dream;
        b.p = 0.0;
        b.output_dir = "elsewhere".into();
        assert!(a.unfair_differences(&b).is_empty());
        b.lr = 3e-4;
        b.seed = 1;
        assert_eq!(a.unfair_differences(&b), vec!["train.lr".to_string(), "train.seed".to_string()]);
    }
}
