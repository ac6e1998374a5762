//! Diffusion noise schedules and the rectification weight λ_t.

use crate::error::{Error, Result};

/// How the sampler's per-step noise scale σ_t is derived.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SigmaMode {
    /// σ_t² = β_t.
    #[default]
    Beta,
    /// σ_t² = β̃_t = β_t (1 - ᾱ_{t-1}) / (1 - ᾱ_t), the forward-posterior variance.
    Posterior,
}

impl SigmaMode {
    pub fn name(self) -> &'static str {
        match self {
            SigmaMode::Beta => "beta",
            SigmaMode::Posterior => "posterior",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "beta" => Some(SigmaMode::Beta),
            "posterior" => Some(SigmaMode::Posterior),
            _ => None,
        }
    }
}

/// Precomputed β, α, ᾱ and σ for steps `1..=T`.
///
/// Arrays are stored zero-based; all accessors take the one-based step index.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    sigma: Vec<f64>,
    sigma_mode: SigmaMode,
}

impl NoiseSchedule {
    /// Linearly spaced β from `beta_start` (t = 1) to `beta_end` (t = T).
    pub fn linear(beta_start: f64, beta_end: f64, steps: usize, sigma_mode: SigmaMode) -> Result<Self> {
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::out_of_range(
                "beta range",
                format!("[{beta_start}, {beta_end}]"),
                "0 < beta_start <= beta_end < 1",
            ));
        }
        if steps == 0 {
            return Err(Error::out_of_range("T", steps, ">= 1"));
        }
        let beta: Vec<f64> = if steps == 1 {
            vec![beta_start]
        } else {
            let span = (steps - 1) as f64;
            (0..steps)
                .map(|i| beta_start + i as f64 / span * (beta_end - beta_start))
                .collect()
        };
        Self::from_betas(beta, sigma_mode)
    }

    pub fn from_betas(beta: Vec<f64>, sigma_mode: SigmaMode) -> Result<Self> {
        if beta.is_empty() || beta.iter().any(|&b| !(b > 0.0 && b < 1.0)) {
            return Err(Error::out_of_range("beta", "schedule", "(0, 1) for every step"));
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(alpha.len());
        let mut acc = 1.0;
        for &a in &alpha {
            acc *= a;
            alpha_bar.push(acc);
        }
        let sigma = match sigma_mode {
            SigmaMode::Beta => beta.iter().map(|b| b.sqrt()).collect(),
            SigmaMode::Posterior => (0..beta.len())
                .map(|i| {
                    let prev = if i == 0 { 1.0 } else { alpha_bar[i - 1] };
                    (beta[i] * (1.0 - prev) / (1.0 - alpha_bar[i])).sqrt()
                })
                .collect(),
        };
        Ok(Self {
            beta,
            alpha,
            alpha_bar,
            sigma,
            sigma_mode,
        })
    }

    /// Number of diffusion steps T.
    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn sigma_mode(&self) -> SigmaMode {
        self.sigma_mode
    }

    fn index(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.steps() {
            return Err(Error::out_of_range("t", t, format!("1..={}", self.steps())));
        }
        Ok(t - 1)
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        Ok(self.beta[self.index(t)?])
    }

    pub fn alpha(&self, t: usize) -> Result<f64> {
        Ok(self.alpha[self.index(t)?])
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        Ok(self.alpha_bar[self.index(t)?])
    }

    /// ᾱ_t with the convention ᾱ_0 = 1.
    pub fn alpha_bar_or_one(&self, t: usize) -> Result<f64> {
        if t == 0 {
            Ok(1.0)
        } else {
            self.alpha_bar(t)
        }
    }

    pub fn sigma(&self, t: usize) -> Result<f64> {
        Ok(self.sigma[self.index(t)?])
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alpha
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigma
    }

    /// λ_t under `policy`.
    pub fn lambda(&self, t: usize, policy: LambdaPolicy) -> Result<f64> {
        Ok(policy.weight(self.alpha_bar(t)?))
    }
}

/// `linear_beta_schedule` with the default σ_t² = β_t.
pub fn linear_beta_schedule(beta_start: f64, beta_end: f64, steps: usize) -> Result<NoiseSchedule> {
    NoiseSchedule::linear(beta_start, beta_end, steps, SigmaMode::Beta)
}

pub fn lambda_t(schedule: &NoiseSchedule, t: usize, policy: LambdaPolicy) -> Result<f64> {
    schedule.lambda(t, policy)
}

pub fn sigma_t(schedule: &NoiseSchedule, t: usize) -> Result<f64> {
    schedule.sigma(t)
}

/// λ_t = (√(1 - ᾱ_t))^p. `p = 0` gives exactly 1 and `p = ∞` exactly 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LambdaPolicy {
    p: f64,
}

impl LambdaPolicy {
    pub const ONE: LambdaPolicy = LambdaPolicy { p: 0.0 };
    pub const ZERO: LambdaPolicy = LambdaPolicy { p: f64::INFINITY };

    pub fn new(p: f64) -> Result<Self> {
        if p.is_nan() || p < 0.0 {
            return Err(Error::out_of_range("p", p, "[0, inf]"));
        }
        Ok(Self { p })
    }

    pub fn exponent(self) -> f64 {
        self.p
    }

    pub fn weight(self, alpha_bar: f64) -> f64 {
        if self.p == 0.0 {
            1.0
        } else if self.p == f64::INFINITY {
            0.0
        } else {
            (1.0 - alpha_bar).sqrt().powf(self.p)
        }
    }
}
