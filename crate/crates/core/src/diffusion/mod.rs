//! Forward corruption, HR-signal estimation, the standard / DRM / DREAM
//! training objectives and ancestral sampling.

mod sample;
mod train;

pub use sample::{ddpm_sample, ddpm_sample_batch, retained_steps, sample_noisy_at, SampleOutput};
pub use train::{
    dream_train_step, objective, standard_train_step, train_step, DrawnNoise, LossBreakdown, Objective,
};

use crate::error::{Error, Result};
use crate::schedule::{LambdaPolicy, NoiseSchedule};
use crate::tensor::Tensor;

/// One conditioning / target pair: `x0` is the LR image resized to HR
/// extent, `y0` the HR ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct SRPair {
    pub x0: Tensor,
    pub y0: Tensor,
}

impl SRPair {
    pub fn new(x0: Tensor, y0: Tensor) -> Result<Self> {
        if x0.shape() != y0.shape() {
            return Err(Error::Shape {
                op: "SRPair",
                lhs: x0.shape().to_vec(),
                rhs: y0.shape().to_vec(),
            });
        }
        for v in x0.data().iter().chain(y0.data()) {
            if !(v.is_finite() && (-1.0..=1.0).contains(v)) {
                return Err(Error::out_of_range("pixel", v, "[-1, 1]"));
            }
        }
        Ok(Self { x0, y0 })
    }
}

/// Which supervision the training step applies.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ObjectiveKind {
    /// ‖ε_t − ε_θ(x₀, y_t, t)‖₁.
    Standard,
    /// Rectification with λ_t ≡ 1.
    Drm,
    /// Rectification weighted by λ_t = (√(1 − ᾱ_t))^p.
    Dream(LambdaPolicy),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveMode {
    pub kind: ObjectiveKind,
    /// Reuse ε_t for the re-noised input (ε′_t ≡ ε_t). When false an
    /// independent ε′_t is drawn.
    pub shared_noise: bool,
}

impl ObjectiveMode {
    pub fn standard() -> Self {
        Self {
            kind: ObjectiveKind::Standard,
            shared_noise: true,
        }
    }

    pub fn drm() -> Self {
        Self {
            kind: ObjectiveKind::Drm,
            shared_noise: true,
        }
    }

    pub fn dream(policy: LambdaPolicy) -> Self {
        Self {
            kind: ObjectiveKind::Dream(policy),
            shared_noise: true,
        }
    }

    /// Rectification weight at a step with cumulative signal `alpha_bar`.
    /// `None` for the standard objective.
    pub fn lambda(&self, alpha_bar: f64) -> Option<f64> {
        match self.kind {
            ObjectiveKind::Standard => None,
            ObjectiveKind::Drm => Some(1.0),
            ObjectiveKind::Dream(p) => Some(p.weight(alpha_bar)),
        }
    }
}

/// An eval-mode noise predictor over `[batch, pixels]` inputs.
pub trait NoisePredictor {
    fn predict_batch(&self, x0: &Tensor, y_t: &Tensor, steps: &[usize]) -> Result<Tensor>;

    /// Whether the predictor is locked against training.
    fn is_frozen(&self) -> bool {
        true
    }
}

impl NoisePredictor for crate::denoiser::DenoiserParams {
    fn predict_batch(&self, x0: &Tensor, y_t: &Tensor, steps: &[usize]) -> Result<Tensor> {
        crate::denoiser::DenoiserParams::predict_batch(self, x0, y_t, steps)
    }

    fn is_frozen(&self) -> bool {
        crate::denoiser::DenoiserParams::is_frozen(self)
    }
}

impl<P: NoisePredictor + ?Sized> NoisePredictor for &P {
    fn predict_batch(&self, x0: &Tensor, y_t: &Tensor, steps: &[usize]) -> Result<Tensor> {
        (**self).predict_batch(x0, y_t, steps)
    }

    fn is_frozen(&self) -> bool {
        (**self).is_frozen()
    }
}

/// y_t = √ᾱ_t y₀ + √(1 − ᾱ_t) ε.
pub fn forward_diffuse(schedule: &NoiseSchedule, y0: &Tensor, t: usize, eps: &Tensor) -> Result<Tensor> {
    let ab = schedule.alpha_bar(t)?;
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    y0.zip_map(eps, "forward_diffuse", |y, e| a * y + b * e)
}

/// ỹ₀ = (y_t − √(1 − ᾱ_t) ε̂) / √ᾱ_t with ε̂ = ε_θ(x₀, y_t, t) in eval mode.
pub fn estimate_y0<P: NoisePredictor + ?Sized>(
    schedule: &NoiseSchedule,
    predictor: &P,
    x0: &Tensor,
    y_t: &Tensor,
    t: usize,
) -> Result<Tensor> {
    let rows = stack(&[x0.clone()])?;
    let yrows = stack(&[y_t.clone()])?;
    let eps = predictor.predict_batch(&rows, &yrows, &[t])?;
    let est = estimate_from_noise(schedule, &yrows, &eps, &[t])?;
    est.reshaped(y_t.shape())
}

/// Row-wise ỹ₀ for a batch whose row `i` sits at step `steps[i]`.
pub(crate) fn estimate_from_noise(
    schedule: &NoiseSchedule,
    y_t: &Tensor,
    eps: &Tensor,
    steps: &[usize],
) -> Result<Tensor> {
    if y_t.shape() != eps.shape() || y_t.shape()[0] != steps.len() {
        return Err(Error::Shape {
            op: "estimate_y0",
            lhs: y_t.shape().to_vec(),
            rhs: eps.shape().to_vec(),
        });
    }
    let width = y_t.len() / steps.len();
    let mut out = Vec::with_capacity(y_t.len());
    for (i, &t) in steps.iter().enumerate() {
        let ab = schedule.alpha_bar(t)?;
        if ab <= 1e-300 {
            return Err(Error::Numerical(format!("alpha_bar at t = {t} is {ab}")));
        }
        let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
        let (y, e) = (&y_t.data()[i * width..(i + 1) * width], &eps.data()[i * width..(i + 1) * width]);
        out.extend(y.iter().zip(e).map(|(y, e)| (y - sb * e) / sa));
    }
    Tensor::from_vec(y_t.shape(), out)
}

/// ŷ₀ = λ ỹ₀ + (1 − λ) y₀.
pub fn blend_estimate(y0: &Tensor, y0_est: &Tensor, lambda: f64) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::out_of_range("lambda", lambda, "[0, 1]"));
    }
    y0_est.zip_map(y0, "blend_estimate", |e, y| lambda * e + (1.0 - lambda) * y)
}

/// Stacks equally shaped images into `[batch, pixels]`.
pub fn stack(images: &[Tensor]) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| Error::Graph("empty batch".into()))?;
    let width = first.len();
    let mut data = Vec::with_capacity(width * images.len());
    for img in images {
        if img.shape() != first.shape() {
            return Err(Error::Shape {
                op: "stack",
                lhs: first.shape().to_vec(),
                rhs: img.shape().to_vec(),
            });
        }
        data.extend_from_slice(img.data());
    }
    Tensor::from_vec(&[images.len(), width], data)
}

/// Splits `[batch, pixels]` back into images of `shape`.
pub fn unstack(rows: &Tensor, shape: &[usize]) -> Result<Vec<Tensor>> {
    let width: usize = shape.iter().product();
    rows.data()
        .chunks(width)
        .map(|c| Tensor::from_vec(shape, c.to_vec()))
        .collect()
}

#[cfg(test)]
pub(crate) mod testing {
    use super::*;
    use std::cell::Cell;

    /// Predicts the exact noise that produced `y_t` from a known `y0`.
    pub struct TrueNoise<'a> {
        pub schedule: &'a NoiseSchedule,
        pub y0: Tensor,
    }

    impl NoisePredictor for TrueNoise<'_> {
        fn predict_batch(&self, _x0: &Tensor, y_t: &Tensor, steps: &[usize]) -> Result<Tensor> {
            let w = self.y0.len();
            let mut out = Vec::new();
            for (i, &t) in steps.iter().enumerate() {
                let ab = self.schedule.alpha_bar(t)?;
                let row = &y_t.data()[i * w..(i + 1) * w];
                out.extend(
                    row.iter()
                        .zip(self.y0.data())
                        .map(|(y, y0)| (y - ab.sqrt() * y0) / (1.0 - ab).sqrt()),
                );
            }
            Tensor::from_vec(y_t.shape(), out)
        }
    }

    /// Returns `scale * y_t + offset` and counts calls.
    pub struct Affine {
        pub scale: f64,
        pub offset: f64,
        pub calls: Cell<usize>,
    }

    impl Affine {
        pub fn new(scale: f64, offset: f64) -> Self {
            Self {
                scale,
                offset,
                calls: Cell::new(0),
            }
        }
    }

    impl NoisePredictor for Affine {
        fn predict_batch(&self, _x0: &Tensor, y_t: &Tensor, _steps: &[usize]) -> Result<Tensor> {
            self.calls.set(self.calls.get() + 1);
            Ok(y_t.map(|y| self.scale * y + self.offset))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::testing::*;
    use super::*;
    use crate::rng::{normal_tensor, stream_rng};
    use crate::schedule::linear_beta_schedule;

    #[test]
    fn forward_diffuse_limits() {
        let s = linear_beta_schedule(1e-3, 2e-2, 50).unwrap();
        let mut rng = stream_rng(1, 0);
        let eps = normal_tensor(&[3, 3], &mut rng);
        let zero = Tensor::zeros(&[3, 3]);
        let yt = forward_diffuse(&s, &zero, 10, &eps).unwrap();
        let b = (1.0 - s.alpha_bar(10).unwrap()).sqrt();
        for (y, e) in yt.data().iter().zip(eps.data()) {
            assert_eq!(*y, b * e);
        }
        // A schedule whose first step barely perturbs: ᾱ_1 = 1 - 1e-300 rounds to 1.
        let flat = linear_beta_schedule(1e-300, 1e-300, 1).unwrap();
        let y0 = normal_tensor(&[3, 3], &mut rng);
        assert_eq!(forward_diffuse(&flat, &y0, 1, &eps).unwrap(), y0);
        assert!(forward_diffuse(&s, &y0, 1, &Tensor::zeros(&[2])).is_err());
    }

    #[test]
    fn estimate_inverts_forward_with_true_noise() {
        let s = linear_beta_schedule(1e-4, 2e-2, 100).unwrap();
        let mut rng = stream_rng(2, 0);
        let y0 = normal_tensor(&[4, 4], &mut rng).map(|v| v.tanh());
        let eps = normal_tensor(&[4, 4], &mut rng);
        for t in [1, 37, 100] {
            let yt = forward_diffuse(&s, &y0, t, &eps).unwrap();
            let oracle = TrueNoise {
                schedule: &s,
                y0: y0.clone(),
            };
            let est = estimate_y0(&s, &oracle, &y0, &yt, t).unwrap();
            for (a, b) in est.data().iter().zip(y0.data()) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn estimate_with_zero_network_rescales() {
        let s = linear_beta_schedule(1e-4, 2e-2, 100).unwrap();
        let mut rng = stream_rng(3, 0);
        let yt = normal_tensor(&[2, 2], &mut rng);
        let est = estimate_y0(&s, &Affine::new(0.0, 0.0), &yt, &yt, 60).unwrap();
        let sa = s.alpha_bar(60).unwrap().sqrt();
        for (e, y) in est.data().iter().zip(yt.data()) {
            assert_eq!(*e, y / sa);
        }
    }

    #[test]
    fn estimate_matches_per_pixel_formula() {
        let s = linear_beta_schedule(1e-4, 2e-2, 100).unwrap();
        let mut rng = stream_rng(4, 0);
        let yt = normal_tensor(&[3, 3], &mut rng);
        let net = Affine::new(0.3, -0.1);
        let est = estimate_y0(&s, &net, &yt, &yt, 42).unwrap();
        let ab = s.alpha_bar(42).unwrap();
        for (e, y) in est.data().iter().zip(yt.data()) {
            let eps = 0.3 * y - 0.1;
            let want = (y - (1.0 - ab).sqrt() * eps) / ab.sqrt();
            assert!((e - want).abs() < 1e-12);
        }
    }

    #[test]
    fn blend_endpoints_and_renoise_equivalence() {
        let s = linear_beta_schedule(1e-4, 2e-2, 100).unwrap();
        let mut rng = stream_rng(5, 0);
        let y0 = normal_tensor(&[3, 3], &mut rng);
        let est = normal_tensor(&[3, 3], &mut rng);
        assert_eq!(blend_estimate(&y0, &est, 0.0).unwrap(), y0);
        assert_eq!(blend_estimate(&y0, &est, 1.0).unwrap(), est);
        assert!(blend_estimate(&y0, &est, 1.5).is_err());

        // Re-noising the blend equals y_t + √(1-ᾱ) λ Δε with ỹ₀ built from Δε.
        let eps = normal_tensor(&[3, 3], &mut rng);
        let delta = normal_tensor(&[3, 3], &mut rng);
        let t = 73;
        let ab = s.alpha_bar(t).unwrap();
        let lam = 0.4;
        let yt = forward_diffuse(&s, &y0, t, &eps).unwrap();
        let y0_train = y0.zip_map(&delta, "t", |y, d| y + ((1.0 - ab) / ab).sqrt() * d).unwrap();
        let blended = blend_estimate(&y0, &y0_train, lam).unwrap();
        let renoised = forward_diffuse(&s, &blended, t, &eps).unwrap();
        let line4 = yt.zip_map(&delta, "t", |y, d| y + (1.0 - ab).sqrt() * lam * d).unwrap();
        for (a, b) in renoised.data().iter().zip(line4.data()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn pair_validation() {
        assert!(SRPair::new(Tensor::zeros(&[2, 2]), Tensor::zeros(&[3, 3])).is_err());
        assert!(SRPair::new(Tensor::filled(&[2, 2], 1.5), Tensor::zeros(&[2, 2])).is_err());
        assert!(SRPair::new(Tensor::zeros(&[2, 2]), Tensor::filled(&[2, 2], f64::NAN)).is_err());
    }

    #[test]
    fn mode_collapse_lambdas() {
        assert_eq!(ObjectiveMode::drm().lambda(0.3), Some(1.0));
        assert_eq!(ObjectiveMode::dream(LambdaPolicy::ONE).lambda(0.3), Some(1.0));
        assert_eq!(ObjectiveMode::dream(LambdaPolicy::ZERO).lambda(0.3), Some(0.0));
        assert_eq!(ObjectiveMode::standard().lambda(0.3), None);
    }
}
