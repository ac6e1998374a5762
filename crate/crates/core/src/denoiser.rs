//! The conditional noise predictor ε_θ(x₀, y_t, t): an MLP over the
//! flattened conditioning image, the flattened noisy target and a sinusoidal
//! embedding of the step index.

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Gradients, Graph, Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserConfig {
    /// Side length of the square HR image.
    pub image_extent: usize,
    pub channels: usize,
    pub hidden_widths: Vec<usize>,
    pub time_embed_dim: usize,
    pub dropout: f64,
    /// Largest step index the network is conditioned on (the schedule's T).
    pub max_step: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            image_extent: 8,
            channels: 1,
            hidden_widths: vec![256, 256],
            time_embed_dim: 32,
            dropout: 0.2,
            max_step: 200,
        }
    }
}

impl DenoiserConfig {
    pub fn pixels(&self) -> usize {
        self.image_extent * self.image_extent * self.channels
    }

    pub fn input_width(&self) -> usize {
        2 * self.pixels() + self.time_embed_dim
    }

    pub fn output_width(&self) -> usize {
        self.pixels()
    }

    /// `(fan_in, fan_out)` of every linear layer, input to output.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut widths = vec![self.input_width()];
        widths.extend(&self.hidden_widths);
        widths.push(self.output_width());
        widths.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_extent == 0 {
            return Err(Error::config("net.image_extent", "must be >= 1"));
        }
        if self.channels != 1 {
            return Err(Error::config("net.channels", "only single-channel images are supported"));
        }
        if self.hidden_widths.contains(&0) {
            return Err(Error::config("net.hidden_widths", "widths must be positive"));
        }
        if self.time_embed_dim == 0 || self.time_embed_dim % 2 != 0 {
            return Err(Error::config("net.time_embed_dim", "must be a positive even integer"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("net.dropout", "must lie in [0, 1)"));
        }
        if self.max_step == 0 {
            return Err(Error::config("schedule.T", "must be >= 1"));
        }
        Ok(())
    }
}

/// `[sin(t ω_k)…, cos(t ω_k)…]` for `dim / 2` frequencies geometrically spaced
/// from 1 down to 1/10000.
pub fn time_embedding(t: usize, dim: usize, total_steps: usize) -> Result<Tensor> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::out_of_range("time_embed_dim", dim, "positive even integer"));
    }
    if t == 0 || t > total_steps {
        return Err(Error::out_of_range("t", t, format!("1..={total_steps}")));
    }
    Ok(Tensor::from_vec(&[dim], embedding_values(t as f64, dim)).expect("dim > 0"))
}

pub(crate) fn embedding_values(t: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let freqs: Vec<f64> = (0..half)
        .map(|k| {
            if half == 1 {
                1.0
            } else {
                10000f64.powf(-(k as f64) / (half - 1) as f64)
            }
        })
        .collect();
    freqs
        .iter()
        .map(|w| (t * w).sin())
        .chain(freqs.iter().map(|w| (t * w).cos()))
        .collect()
}

/// Learnable parameters θ: `[W₀, b₀, W₁, b₁, …]` with `W` of shape
/// `[fan_in, fan_out]` and `b` of shape `[1, fan_out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserParams {
    config: DenoiserConfig,
    tensors: Vec<Tensor>,
    frozen: bool,
}

/// Result of one recorded forward pass.
#[derive(Debug)]
pub struct Forward {
    /// `[batch, pixels]` predicted noise.
    pub output: Var,
    /// Graph leaves for the parameters, in [`DenoiserParams::tensors`] order.
    pub params: Vec<Var>,
}

impl DenoiserParams {
    /// Glorot-uniform weights, zero biases.
    pub fn init(config: DenoiserConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let mut tensors = Vec::new();
        for (fan_in, fan_out) in config.layer_dims() {
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let w: Vec<f64> = (0..fan_in * fan_out)
                .map(|_| rng.random_range(-limit..limit))
                .collect();
            tensors.push(Tensor::from_vec(&[fan_in, fan_out], w)?.with_requires_grad(true));
            tensors.push(Tensor::zeros(&[1, fan_out]).with_requires_grad(true));
        }
        Ok(Self {
            config,
            tensors,
            frozen: false,
        })
    }

    /// Rebuilds a parameter set from tensors in declared layer order.
    pub fn from_tensors(config: DenoiserConfig, tensors: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        let dims = config.layer_dims();
        if tensors.len() != 2 * dims.len() {
            return Err(Error::Format {
                what: "denoiser parameters",
                message: format!("expected {} tensors, got {}", 2 * dims.len(), tensors.len()),
            });
        }
        for (i, &(fan_in, fan_out)) in dims.iter().enumerate() {
            for (t, want) in [(&tensors[2 * i], [fan_in, fan_out]), (&tensors[2 * i + 1], [1, fan_out])] {
                if t.shape() != want {
                    return Err(Error::Shape {
                        op: "denoiser layer",
                        lhs: t.shape().to_vec(),
                        rhs: want.to_vec(),
                    });
                }
            }
        }
        Ok(Self {
            config,
            tensors: tensors.into_iter().map(|t| t.with_requires_grad(true)).collect(),
            frozen: false,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
    }

    /// A copy whose forward passes never record parameter gradients.
    pub fn frozen_copy(&self) -> Self {
        let mut p = self.clone();
        p.frozen = true;
        p
    }

    /// Records a forward pass. `x0` and `y_t` are `[batch, pixels]`; `steps`
    /// holds one step index per row. Dropout is drawn from `rng` only when
    /// `train_mode` is set.
    pub fn forward(
        &self,
        graph: &mut Graph,
        x0: Var,
        y_t: Var,
        steps: &[usize],
        train_mode: bool,
        rng: &mut Rng,
    ) -> Result<Forward> {
        self.forward_impl(graph, x0, y_t, steps, train_mode, !self.frozen, rng)
    }

    #[allow(clippy::too_many_arguments)]
    fn forward_impl(
        &self,
        graph: &mut Graph,
        x0: Var,
        y_t: Var,
        steps: &[usize],
        train_mode: bool,
        track_grads: bool,
        rng: &mut Rng,
    ) -> Result<Forward> {
        let cfg = &self.config;
        let batch = steps.len();
        let want = [batch, cfg.pixels()];
        for v in [x0, y_t] {
            if graph.value(v).shape() != want {
                return Err(Error::Shape {
                    op: "predict_noise",
                    lhs: graph.value(v).shape().to_vec(),
                    rhs: want.to_vec(),
                });
            }
        }
        let mut embed = Vec::with_capacity(batch * cfg.time_embed_dim);
        for &t in steps {
            embed.extend(time_embedding(t, cfg.time_embed_dim, cfg.max_step)?.into_data());
        }
        let embed = graph.constant(Tensor::from_vec(&[batch, cfg.time_embed_dim], embed)?);
        let ones = graph.constant(Tensor::filled(&[batch, 1], 1.0));

        let params: Vec<Var> = self
            .tensors
            .iter()
            .map(|t| {
                if track_grads {
                    graph.input(t)
                } else {
                    graph.constant(t.detach())
                }
            })
            .collect();

        let mut h = graph.concat_last_axis(&[x0, y_t, embed])?;
        let layers = params.len() / 2;
        for l in 0..layers {
            let wx = graph.matmul(h, params[2 * l])?;
            let bias = graph.matmul(ones, params[2 * l + 1])?;
            h = graph.add(wx, bias)?;
            if l + 1 < layers {
                h = graph.silu(h);
                if train_mode && cfg.dropout > 0.0 {
                    let keep = 1.0 / (1.0 - cfg.dropout);
                    let shape = graph.value(h).shape().to_vec();
                    let n: usize = shape.iter().product();
                    let mask: Vec<f64> = (0..n)
                        .map(|_| if rng.random::<f64>() < cfg.dropout { 0.0 } else { keep })
                        .collect();
                    let mask = graph.constant(Tensor::from_vec(&shape, mask)?);
                    h = graph.elementwise_mul(h, mask)?;
                }
            }
        }
        Ok(Forward { output: h, params })
    }

    /// Adds the gradients of a recorded forward pass into the parameters.
    pub fn accumulate_grads(&mut self, grads: &Gradients, forward: &Forward) {
        if self.frozen {
            return;
        }
        for (t, &v) in self.tensors.iter_mut().zip(&forward.params) {
            grads.accumulate_into(v, t);
        }
    }

    /// Batched eval-mode prediction: `x0`, `y_t` are `[batch, pixels]`.
    pub fn predict_batch(&self, x0: &Tensor, y_t: &Tensor, steps: &[usize]) -> Result<Tensor> {
        let mut graph = Graph::new();
        let xv = graph.input(x0);
        let yv = graph.input(y_t);
        // Eval mode draws no randomness; the generator is never touched.
        let mut unused = crate::rng::stream_rng(0, 0);
        let fwd = self.forward_impl(&mut graph, xv, yv, steps, false, false, &mut unused)?;
        Ok(graph.value(fwd.output).detach())
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }
}

/// ε̂ = ε_θ(x₀, y_t, t) for a single image, reshaped to `y_t`'s shape.
pub fn predict_noise(
    params: &DenoiserParams,
    x0: &Tensor,
    y_t: &Tensor,
    t: usize,
    train_mode: bool,
    rng: &mut Rng,
) -> Result<Tensor> {
    let pixels = params.config.pixels();
    if x0.len() != pixels || y_t.len() != pixels {
        return Err(Error::Shape {
            op: "predict_noise",
            lhs: x0.shape().to_vec(),
            rhs: y_t.shape().to_vec(),
        });
    }
    let mut graph = Graph::new();
    let xv = graph.input(&x0.reshaped(&[1, pixels])?.detach());
    let yv = graph.input(&y_t.reshaped(&[1, pixels])?.detach());
    let fwd = params.forward(&mut graph, xv, yv, &[t], train_mode, rng)?;
    let out = graph.reshape(fwd.output, y_t.shape())?;
    Ok(graph.value(out).detach())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal_tensor, stream_rng};

    fn small() -> DenoiserConfig {
        DenoiserConfig {
            image_extent: 2,
            hidden_widths: vec![8, 8],
            time_embed_dim: 4,
            max_step: 10,
            ..DenoiserConfig::default()
        }
    }

    #[test]
    fn embedding_at_zero_and_bounds() {
        let e = embedding_values(0.0, 8);
        assert!(e[..4].iter().all(|&v| v == 0.0));
        assert!(e[4..].iter().all(|&v| v == 1.0));
        for t in 1..=50 {
            let e = time_embedding(t, 32, 50).unwrap();
            assert!(e.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        }
        assert!(time_embedding(1, 7, 10).is_err());
        assert!(time_embedding(11, 8, 10).is_err());
    }

    #[test]
    fn embeddings_are_distinct() {
        // Exhaustive over all pairs for the default width and T = 4096.
        let table: Vec<Vec<f64>> = (1..=4096).map(|t| embedding_values(t as f64, 32)).collect();
        for i in 0..table.len() {
            for j in i + 1..table.len() {
                let far = table[i]
                    .iter()
                    .zip(&table[j])
                    .any(|(a, b)| (a - b).abs() > 1e-9);
                assert!(far, "t = {} and {} collide", i + 1, j + 1);
            }
        }
    }

    #[test]
    fn init_is_deterministic_with_zero_bias() {
        let a = DenoiserParams::init(small(), &mut stream_rng(3, 0)).unwrap();
        let b = DenoiserParams::init(small(), &mut stream_rng(3, 0)).unwrap();
        assert_eq!(a, b);
        for (i, t) in a.tensors().iter().enumerate() {
            if i % 2 == 1 {
                assert!(t.data().iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn init_variance_matches_uniform_formula() {
        let cfg = DenoiserConfig {
            image_extent: 4,
            hidden_widths: vec![64, 64],
            time_embed_dim: 8,
            ..DenoiserConfig::default()
        };
        let p = DenoiserParams::init(cfg, &mut stream_rng(4, 0)).unwrap();
        let w = &p.tensors()[2];
        assert_eq!(w.shape(), &[64, 64]);
        let n = w.len() as f64;
        let mean = w.data().iter().sum::<f64>() / n;
        let var = w.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let want = 2.0 / 128.0;
        assert!((var - want).abs() / want < 0.2, "{var} vs {want}");
    }

    #[test]
    fn frozen_matches_unfrozen_and_records_no_grad() {
        let p = DenoiserParams::init(small(), &mut stream_rng(5, 0)).unwrap();
        let mut rng = stream_rng(6, 0);
        let x0 = normal_tensor(&[2, 2], &mut rng);
        let yt = normal_tensor(&[2, 2], &mut rng);
        let a = predict_noise(&p, &x0, &yt, 3, true, &mut stream_rng(9, 0)).unwrap();
        let b = predict_noise(&p.frozen_copy(), &x0, &yt, 3, true, &mut stream_rng(9, 0)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.shape(), yt.shape());

        let mut g = Graph::new();
        let xv = g.input(&x0.reshaped(&[1, 4]).unwrap());
        let yv = g.input(&yt.reshaped(&[1, 4]).unwrap());
        let f = p.frozen_copy().forward(&mut g, xv, yv, &[3], true, &mut rng).unwrap();
        assert!(!g.requires_grad(f.output));
    }

    #[test]
    fn eval_mode_is_deterministic() {
        let p = DenoiserParams::init(small(), &mut stream_rng(5, 0)).unwrap();
        let mut rng = stream_rng(6, 0);
        let x0 = normal_tensor(&[2, 2], &mut rng);
        let yt = normal_tensor(&[2, 2], &mut rng);
        let a = predict_noise(&p, &x0, &yt, 2, false, &mut stream_rng(1, 0)).unwrap();
        let b = predict_noise(&p, &x0, &yt, 2, false, &mut stream_rng(2, 0)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_weights_output_final_bias() {
        let cfg = small();
        let tensors = cfg
            .layer_dims()
            .iter()
            .flat_map(|&(i, o)| [Tensor::zeros(&[i, o]), Tensor::zeros(&[1, o])])
            .collect();
        let p = DenoiserParams::from_tensors(cfg, tensors).unwrap();
        let x = Tensor::filled(&[2, 2], 0.7);
        let out = predict_noise(&p, &x, &x, 1, false, &mut stream_rng(0, 0)).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradients_reach_every_parameter() {
        let mut p = DenoiserParams::init(small(), &mut stream_rng(5, 0)).unwrap();
        let mut rng = stream_rng(6, 0);
        let mut g = Graph::new();
        let xv = g.input(&normal_tensor(&[3, 4], &mut rng));
        let yv = g.input(&normal_tensor(&[3, 4], &mut rng));
        let f = p.forward(&mut g, xv, yv, &[1, 5, 10], false, &mut rng).unwrap();
        let loss = g.abs_sum_mean(f.output);
        let grads = g.backward(loss).unwrap();
        p.accumulate_grads(&grads, &f);
        assert!(p.tensors().iter().all(|t| t.grad().is_some()));

        let mut frozen = p.frozen_copy();
        frozen.tensors_mut().iter_mut().for_each(Tensor::zero_grad);
        let mut g = Graph::new();
        let xv = g.input(&normal_tensor(&[3, 4], &mut rng));
        let yv = g.input(&normal_tensor(&[3, 4], &mut rng));
        let f = frozen.forward(&mut g, xv, yv, &[1, 5, 10], false, &mut rng).unwrap();
        let loss = g.abs_sum_mean(f.output);
        let grads = g.backward(loss).unwrap();
        frozen.accumulate_grads(&grads, &f);
        assert!(frozen.tensors().iter().all(|t| t.grad().is_none()));
    }

    #[test]
    fn shape_errors() {
        let p = DenoiserParams::init(small(), &mut stream_rng(5, 0)).unwrap();
        let bad = Tensor::zeros(&[3, 3]);
        let ok = Tensor::zeros(&[2, 2]);
        assert!(predict_noise(&p, &bad, &ok, 1, false, &mut stream_rng(0, 0)).is_err());
        let mut cfg = small();
        cfg.time_embed_dim = 3;
        assert!(DenoiserParams::init(cfg, &mut stream_rng(0, 0)).is_err());
    }
}
