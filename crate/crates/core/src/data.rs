//! Procedural toy super-resolution pairs and the degradation pipeline.

use std::fmt;

use rand::Rng as _;

use crate::diffusion::SRPair;
use crate::error::{Error, Result};
use crate::rng::{stream_rng, Rng};
use crate::tensor::Tensor;

/// Generator family for HR images.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Family {
    #[default]
    GaussianBlobs,
    Gradients,
    CheckerMix,
}

impl Family {
    pub const ALL: [Family; 3] = [Family::GaussianBlobs, Family::Gradients, Family::CheckerMix];

    pub fn name(self) -> &'static str {
        match self {
            Family::GaussianBlobs => "gaussian_blobs",
            Family::Gradients => "gradients",
            Family::CheckerMix => "checker_mix",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|f| f.name() == s)
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum UpsampleMode {
    #[default]
    Bilinear,
    Nearest,
}

impl UpsampleMode {
    pub fn name(self) -> &'static str {
        match self {
            UpsampleMode::Bilinear => "bilinear",
            UpsampleMode::Nearest => "nearest",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "bilinear" => Some(UpsampleMode::Bilinear),
            "nearest" => Some(UpsampleMode::Nearest),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyDataConfig {
    pub image_extent: usize,
    pub scale: usize,
    pub n_train: usize,
    pub n_eval: usize,
    pub family: Family,
    pub seed: u64,
    pub upsample: UpsampleMode,
}

impl Default for ToyDataConfig {
    fn default() -> Self {
        Self {
            image_extent: 8,
            scale: 4,
            n_train: 1024,
            n_eval: 64,
            family: Family::GaussianBlobs,
            seed: 0,
            upsample: UpsampleMode::Bilinear,
        }
    }
}

impl ToyDataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_extent == 0 || self.scale == 0 || self.image_extent % self.scale != 0 {
            return Err(Error::config(
                "data.scale",
                format!("image extent {} must be a positive multiple of scale {}", self.image_extent, self.scale),
            ));
        }
        if self.n_train == 0 {
            return Err(Error::config("data.n_train", "must be >= 1"));
        }
        if self.n_eval == 0 {
            return Err(Error::config("data.n_eval", "must be >= 1"));
        }
        Ok(())
    }

    /// Index of the `i`-th evaluation pair; evaluation indices follow the
    /// training indices so the two sets never share a stream.
    pub fn eval_index(&self, i: usize) -> usize {
        self.n_train + i
    }
}

/// Pair `index` of the dataset described by `config`. A pure function of
/// `(config, index)`: each index owns its own random stream.
pub fn generate_pair(config: &ToyDataConfig, index: usize) -> Result<SRPair> {
    config.validate()?;
    let mut rng = stream_rng(config.seed, index as u64);
    let y0 = generate_hr(config.family, config.image_extent, &mut rng);
    let lr = downsample(&y0, config.scale)?;
    let x0 = upsample(&lr, config.scale, config.upsample)?;
    SRPair::new(x0, y0)
}

/// LR observation of a pair: the box-downsampled HR image.
pub fn low_resolution(pair: &SRPair, scale: usize) -> Result<Tensor> {
    downsample(&pair.y0, scale)
}

fn generate_hr(family: Family, extent: usize, rng: &mut Rng) -> Tensor {
    let e = extent as f64;
    let mut img = vec![0.0; extent * extent];
    match family {
        Family::GaussianBlobs => {
            let count = rng.random_range(1..=3usize);
            let mut blobs = Vec::with_capacity(count);
            for k in 0..count {
                // The first blob sits on a pixel centre so its peak is sampled.
                let (cx, cy) = if k == 0 {
                    (rng.random_range(0..extent) as f64, rng.random_range(0..extent) as f64)
                } else {
                    (rng.random_range(0.0..e - 1.0), rng.random_range(0.0..e - 1.0))
                };
                let radius = rng.random_range(0.1 * e..0.3 * e).max(0.5);
                let amplitude = rng.random_range(0.6..1.0);
                blobs.push((cx, cy, radius, amplitude));
            }
            for r in 0..extent {
                for c in 0..extent {
                    let v: f64 = blobs
                        .iter()
                        .map(|&(cx, cy, s, a)| {
                            let d2 = (c as f64 - cx).powi(2) + (r as f64 - cy).powi(2);
                            a * (-d2 / (2.0 * s * s)).exp()
                        })
                        .sum();
                    img[r * extent + c] = 2.0 * v.clamp(0.0, 1.0) - 1.0;
                }
            }
        }
        Family::Gradients => {
            let g = Ramp::random(rng, extent);
            for r in 0..extent {
                for c in 0..extent {
                    img[r * extent + c] = g.at(r, c);
                }
            }
        }
        Family::CheckerMix => {
            let period = *[2usize, 4].get(rng.random_range(0..2)).expect("two periods");
            let (pr, pc) = (rng.random_range(0..period), rng.random_range(0..period));
            let contrast = rng.random_range(0.3..1.0);
            let g = Ramp::random(rng, extent);
            for r in 0..extent {
                for c in 0..extent {
                    let cell = ((r + pr) / period + (c + pc) / period) % 2;
                    let checker = if cell == 0 { contrast } else { -contrast };
                    img[r * extent + c] = (0.5 * checker + 0.5 * g.at(r, c)).clamp(-1.0, 1.0);
                }
            }
        }
    }
    Tensor::from_vec(&[extent, extent], img).expect("square image")
}

struct Ramp {
    cos: f64,
    sin: f64,
    lo: f64,
    hi: f64,
    extent: f64,
}

impl Ramp {
    fn random(rng: &mut Rng, extent: usize) -> Self {
        let theta = rng.random_range(0.0..std::f64::consts::TAU);
        Self {
            cos: theta.cos(),
            sin: theta.sin(),
            lo: rng.random_range(-1.0..1.0),
            hi: rng.random_range(-1.0..1.0),
            extent: extent as f64,
        }
    }

    fn at(&self, r: usize, c: usize) -> f64 {
        let mid = (self.extent - 1.0) / 2.0;
        let proj = ((c as f64 - mid) * self.cos + (r as f64 - mid) * self.sin) / self.extent;
        let u = (0.5 + proj).clamp(0.0, 1.0);
        (self.lo + (self.hi - self.lo) * u).clamp(-1.0, 1.0)
    }
}

fn square_extent(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match t.shape() {
        [h, w] => Ok((*h, *w)),
        s => Err(Error::Shape {
            op,
            lhs: s.to_vec(),
            rhs: vec![],
        }),
    }
}

/// Box average over `scale x scale` blocks.
pub fn downsample(y: &Tensor, scale: usize) -> Result<Tensor> {
    let (h, w) = square_extent(y, "downsample")?;
    if scale == 0 || h % scale != 0 || w % scale != 0 {
        return Err(Error::Shape {
            op: "downsample",
            lhs: y.shape().to_vec(),
            rhs: vec![scale],
        });
    }
    let (oh, ow) = (h / scale, w / scale);
    let area = (scale * scale) as f64;
    let d = y.data();
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for c in 0..ow {
            let mut s = 0.0;
            for dr in 0..scale {
                for dc in 0..scale {
                    s += d[(r * scale + dr) * w + c * scale + dc];
                }
            }
            out[r * ow + c] = s / area;
        }
    }
    Tensor::from_vec(&[oh, ow], out)
}

/// Resize by an integer factor. Bilinear uses half-pixel centres with edge
/// clamping; nearest replicates each pixel over its block.
pub fn upsample(x: &Tensor, scale: usize, mode: UpsampleMode) -> Result<Tensor> {
    let (h, w) = square_extent(x, "upsample")?;
    if scale == 0 {
        return Err(Error::out_of_range("scale", 0, ">= 1"));
    }
    let (oh, ow) = (h * scale, w * scale);
    let d = x.data();
    let mut out = vec![0.0; oh * ow];
    match mode {
        UpsampleMode::Nearest => {
            for r in 0..oh {
                for c in 0..ow {
                    out[r * ow + c] = d[(r / scale) * w + c / scale];
                }
            }
        }
        UpsampleMode::Bilinear => {
            let taps = |dst: usize, n: usize| -> (usize, usize, f64) {
                let src = ((dst as f64 + 0.5) / scale as f64 - 0.5).clamp(0.0, (n - 1) as f64);
                let i0 = src.floor() as usize;
                let i1 = (i0 + 1).min(n - 1);
                (i0, i1, src - i0 as f64)
            };
            for r in 0..oh {
                let (r0, r1, fr) = taps(r, h);
                for c in 0..ow {
                    let (c0, c1, fc) = taps(c, w);
                    let top = d[r0 * w + c0] * (1.0 - fc) + d[r0 * w + c1] * fc;
                    let bot = d[r1 * w + c0] * (1.0 - fc) + d[r1 * w + c1] * fc;
                    out[r * ow + c] = top * (1.0 - fr) + bot * fr;
                }
            }
        }
    }
    Tensor::from_vec(&[oh, ow], out)
}

/// Binary PGM (P5, 8-bit) with pixel `p` in [-1, 1] stored as
/// `round((p + 1) / 2 * 255)`.
pub fn to_pgm(image: &Tensor) -> Result<Vec<u8>> {
    let (h, w) = square_extent(image, "to_pgm")?;
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    bytes.extend(
        image
            .data()
            .iter()
            .map(|&p| ((p + 1.0) / 2.0 * 255.0).round().clamp(0.0, 255.0) as u8),
    );
    Ok(bytes)
}
