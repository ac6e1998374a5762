use rand::Rng as _;

use super::{stack, ObjectiveKind, ObjectiveMode, SRPair};
use crate::denoiser::{DenoiserParams, Forward};
use crate::error::{Error, Result};
use crate::rng::{normal_tensor, Rng};
use crate::schedule::{LambdaPolicy, NoiseSchedule};
use crate::tensor::{adam_step, AdamState, Graph, Tensor, Var};

/// Per-step diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub loss: f64,
    /// Mean |λ_t Δε_{t,θ}| over the batch; 0 for the standard objective.
    pub mean_rectification_magnitude: f64,
    /// The sampled step of every batch element.
    pub steps: Vec<usize>,
}

/// The random draws of one training step.
#[derive(Debug, Clone, PartialEq)]
pub struct DrawnNoise {
    pub steps: Vec<usize>,
    /// `[batch, pixels]` ε_t.
    pub eps: Tensor,
    /// Independent ε′_t, drawn only when noise is not shared.
    pub eps_prime: Option<Tensor>,
}

impl DrawnNoise {
    /// Draws `t ~ U{1..T}` then ε_t for each batch element, in order, followed
    /// by ε′_t when the mode asks for independent noise.
    pub fn draw(schedule: &NoiseSchedule, batch: usize, pixels: usize, mode: &ObjectiveMode, rng: &mut Rng) -> Self {
        let mut steps = Vec::with_capacity(batch);
        let mut eps = Vec::with_capacity(batch * pixels);
        for _ in 0..batch {
            steps.push(rng.random_range(1..=schedule.steps()));
            eps.extend(normal_tensor(&[pixels], rng).into_data());
        }
        let eps_prime = (!mode.shared_noise && mode.kind != ObjectiveKind::Standard)
            .then(|| normal_tensor(&[batch, pixels], rng));
        Self {
            steps,
            eps: Tensor::from_vec(&[batch, pixels], eps).expect("batch > 0"),
            eps_prime,
        }
    }
}

/// A recorded training loss, ready for backward.
#[derive(Debug)]
pub struct Objective {
    pub graph: Graph,
    pub loss: Var,
    pub forward: Forward,
    pub breakdown: LossBreakdown,
    /// The network input of the supervised pass (y_t or ŷ_t).
    pub input: Tensor,
    /// The supervision target (ε_t or ε_t + λ_t Δε).
    pub target: Tensor,
}

/// Builds the loss of `mode` for a batch under fixed draws.
///
/// For the rectified objectives the first pass ε_θ(x₀, y_t, t) is evaluated
/// without gradient and in eval mode. `frozen_prediction` replaces that pass
/// with a constant `[batch, pixels]` tensor.
pub fn objective(
    params: &DenoiserParams,
    schedule: &NoiseSchedule,
    batch: &[SRPair],
    noise: &DrawnNoise,
    mode: &ObjectiveMode,
    frozen_prediction: Option<&Tensor>,
    rng: &mut Rng,
) -> Result<Objective> {
    let x0 = stack(&batch.iter().map(|p| p.x0.clone()).collect::<Vec<_>>())?;
    let y0 = stack(&batch.iter().map(|p| p.y0.clone()).collect::<Vec<_>>())?;
    if noise.eps.shape() != y0.shape() || noise.steps.len() != batch.len() {
        return Err(Error::Shape {
            op: "objective",
            lhs: y0.shape().to_vec(),
            rhs: noise.eps.shape().to_vec(),
        });
    }
    let mut coef = Vec::with_capacity(batch.len());
    for &t in &noise.steps {
        let ab = schedule.alpha_bar(t)?;
        coef.push((ab.sqrt(), (1.0 - ab).sqrt(), mode.lambda(ab)));
    }
    let y_t = rowwise(&y0, &noise.eps, |i, y, e| coef[i].0 * y + coef[i].1 * e)?;

    let rectify = coef.iter().any(|c| matches!(c.2, Some(l) if l != 0.0));
    let (input, target, rect) = if !rectify && noise.eps_prime.is_none() {
        (y_t, noise.eps.clone(), 0.0)
    } else {
        let frozen = match frozen_prediction {
            Some(p) => p.detach(),
            None if rectify => params.predict_batch(&x0, &y_t, &noise.steps)?,
            None => Tensor::zeros(y_t.shape()),
        };
        // Δε = ε_t − StopGradient(ε_θ(x₀, y_t, t)), scaled by λ_t per row.
        let scaled = rowwise(&noise.eps, &frozen, |i, e, f| coef[i].2.unwrap_or(0.0) * (e - f))?;
        let rect = scaled.data().iter().map(|v| v.abs()).sum::<f64>() / scaled.len() as f64;
        match &noise.eps_prime {
            None => {
                let input = rowwise(&y_t, &scaled, |i, y, d| y + coef[i].1 * d)?;
                let target = noise.eps.zip_map(&scaled, "objective", |e, d| e + d)?;
                (input, target, rect)
            }
            Some(eps2) => {
                let target = eps2.zip_map(&scaled, "objective", |e, d| e + d)?;
                let input = rowwise(&y0, &target, |i, y, n| coef[i].0 * y + coef[i].1 * n)?;
                (input, target, rect)
            }
        }
    };

    let mut graph = Graph::new();
    let xv = graph.constant(x0);
    let iv = graph.constant(input.clone());
    let forward = params.forward(&mut graph, xv, iv, &noise.steps, true, rng)?;
    let tv = graph.constant(target.clone());
    let diff = graph.sub(tv, forward.output)?;
    let loss = graph.abs_sum_mean(diff);
    let breakdown = LossBreakdown {
        loss: graph.value(loss).data()[0],
        mean_rectification_magnitude: rect,
        steps: noise.steps.clone(),
    };
    Ok(Objective {
        graph,
        loss,
        forward,
        breakdown,
        input,
        target,
    })
}

fn rowwise(a: &Tensor, b: &Tensor, f: impl Fn(usize, f64, f64) -> f64) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::Shape {
            op: "rowwise",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let width = a.shape()[1];
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .enumerate()
        .map(|(k, (&x, &y))| f(k / width, x, y))
        .collect();
    Tensor::from_vec(a.shape(), data)
}

/// One optimizer step of `mode` on `batch`.
pub fn train_step(
    params: &mut DenoiserParams,
    schedule: &NoiseSchedule,
    batch: &[SRPair],
    mode: &ObjectiveMode,
    rng: &mut Rng,
    adam: &mut AdamState,
) -> Result<LossBreakdown> {
    if params.is_frozen() {
        return Err(Error::Graph("cannot train frozen parameters".into()));
    }
    let pixels = params.config().pixels();
    let noise = DrawnNoise::draw(schedule, batch.len(), pixels, mode, rng);
    let mut obj = objective(params, schedule, batch, &noise, mode, None, rng)?;
    if !obj.breakdown.loss.is_finite() {
        return Err(Error::Numerical(format!(
            "non-finite loss {} (steps {:?}, adam step {})",
            obj.breakdown.loss, obj.breakdown.steps, adam.step
        )));
    }
    let grads = obj.graph.backward(obj.loss)?;
    params.accumulate_grads(&grads, &obj.forward);
    adam_step(params.tensors_mut(), adam)?;
    Ok(obj.breakdown)
}

pub fn standard_train_step(
    params: &mut DenoiserParams,
    schedule: &NoiseSchedule,
    batch: &[SRPair],
    rng: &mut Rng,
    adam: &mut AdamState,
) -> Result<LossBreakdown> {
    train_step(params, schedule, batch, &ObjectiveMode::standard(), rng, adam)
}

pub fn dream_train_step(
    params: &mut DenoiserParams,
    schedule: &NoiseSchedule,
    batch: &[SRPair],
    policy: LambdaPolicy,
    rng: &mut Rng,
    adam: &mut AdamState,
) -> Result<LossBreakdown> {
    train_step(params, schedule, batch, &ObjectiveMode::dream(policy), rng, adam)
}
