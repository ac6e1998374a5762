//! Finite-difference verification of every autodiff rule and of an
//! end-to-end DREAM loss.

use std::fmt;

use rand::Rng as _;

use crate::data::{generate_pair, ToyDataConfig, UpsampleMode};
use crate::denoiser::{DenoiserConfig, DenoiserParams};
use crate::diffusion::{objective, DrawnNoise, ObjectiveMode, SRPair};
use crate::error::Result;
use crate::rng::{stream_rng, Rng};
use crate::schedule::{linear_beta_schedule, LambdaPolicy};
use crate::tensor::{finite_diff_grad, Graph, OpKind, Tensor, Var};

pub const STEP: f64 = 1e-3;
pub const TOLERANCE: f64 = 1e-4;
pub const TRIALS: usize = 20;
pub const END_TO_END: &str = "dream_loss";

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckEntry {
    pub name: String,
    pub max_rel_err: f64,
    pub trials: usize,
    /// Coordinates skipped because a perturbation crossed an L1 kink.
    pub excluded: usize,
}

impl GradcheckEntry {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= TOLERANCE
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub entries: Vec<GradcheckEntry>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(GradcheckEntry::passed)
    }
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<18} {:>14} {:>7} {:>9}  status", "op", "max_rel_err", "trials", "excluded")?;
        for e in &self.entries {
            writeln!(
                f,
                "{:<18} {:>14.3e} {:>7} {:>9}  {}",
                e.name,
                e.max_rel_err,
                e.trials,
                e.excluded,
                if e.passed() { "ok" } else { "FAIL" }
            )?;
        }
        write!(f, "tolerance {TOLERANCE:e}, step {STEP:e}: {}", if self.passed() { "PASS" } else { "FAIL" })
    }
}

/// ‖a − b‖ / max(‖a‖, ‖b‖, 1e-12).
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm(&diff) / norm(a).max(norm(b)).max(1e-12)
}

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("shape")
}

/// Inputs in [-2, 2] kept at least `2h` away from zero.
fn away_from_zero(shape: &[usize], rng: &mut Rng) -> Tensor {
    let mut t = uniform(shape, 2.0 * STEP + 1e-3, 2.0, rng);
    for v in t.data_mut() {
        if rng.random::<bool>() {
            *v = -*v;
        }
    }
    t
}

struct Case {
    inputs: Vec<Tensor>,
    /// Builds the op's output from the input leaves.
    build: Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>,
    /// When false the op output is reduced directly by `abs_sum_mean`.
    weighted: bool,
}

fn dim(rng: &mut Rng) -> usize {
    rng.random_range(1..=8)
}

fn case(op: OpKind, rng: &mut Rng) -> Case {
    let (m, n) = (dim(rng), dim(rng));
    let g = |s: &[usize], rng: &mut Rng| uniform(s, -2.0, 2.0, rng);
    let boxed = |f: fn(&mut Graph, &[Var]) -> Result<Var>| -> Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>> { Box::new(f) };
    match op {
        OpKind::Add => Case {
            inputs: vec![g(&[m, n], rng), g(&[m, n], rng)],
            build: boxed(|gr, v| gr.add(v[0], v[1])),
            weighted: true,
        },
        OpKind::Sub => Case {
            inputs: vec![g(&[m, n], rng), g(&[m, n], rng)],
            build: boxed(|gr, v| gr.sub(v[0], v[1])),
            weighted: true,
        },
        OpKind::ScalarMul => {
            let c = rng.random_range(-2.0..2.0);
            Case {
                inputs: vec![g(&[m, n], rng)],
                build: Box::new(move |gr, v| Ok(gr.scalar_mul(v[0], c))),
                weighted: true,
            }
        }
        OpKind::ElementwiseMul => Case {
            inputs: vec![g(&[m, n], rng), g(&[m, n], rng)],
            build: boxed(|gr, v| gr.elementwise_mul(v[0], v[1])),
            weighted: true,
        },
        OpKind::MatMul => {
            let k = dim(rng);
            Case {
                inputs: vec![g(&[m, k], rng), g(&[k, n], rng)],
                build: boxed(|gr, v| gr.matmul(v[0], v[1])),
                weighted: true,
            }
        }
        OpKind::ConcatLastAxis => {
            let (n2, n3) = (dim(rng), dim(rng));
            Case {
                inputs: vec![g(&[m, n], rng), g(&[m, n2], rng), g(&[m, n3], rng)],
                build: boxed(|gr, v| gr.concat_last_axis(v)),
                weighted: true,
            }
        }
        OpKind::Silu => Case {
            inputs: vec![g(&[m, n], rng)],
            build: boxed(|gr, v| Ok(gr.silu(v[0]))),
            weighted: true,
        },
        OpKind::Reshape => Case {
            inputs: vec![g(&[m, n], rng)],
            build: Box::new(move |gr, v| gr.reshape(v[0], &[n, m])),
            weighted: true,
        },
        OpKind::AbsSumMean => Case {
            inputs: vec![away_from_zero(&[m, n], rng)],
            build: boxed(|gr, v| Ok(gr.abs_sum_mean(v[0]))),
            weighted: false,
        },
    }
}

/// Graph for `abs_sum_mean(out ⊙ R + 10)`, which stays clear of the kink.
fn scalar_loss(
    graph: &mut Graph,
    case: &Case,
    inputs: &[Tensor],
    weights: &Option<Tensor>,
) -> Result<(Var, Vec<Var>)> {
    let leaves: Vec<Var> = inputs.iter().map(|t| graph.input(t)).collect();
    let out = (case.build)(graph, &leaves)?;
    let loss = match weights {
        Some(r) => {
            let r = graph.constant(r.clone());
            let prod = graph.elementwise_mul(out, r)?;
            let ten = graph.constant(Tensor::filled(graph.value(prod).shape(), 10.0));
            let shifted = graph.add(prod, ten)?;
            graph.abs_sum_mean(shifted)
        }
        None => out,
    };
    Ok((loss, leaves))
}

fn check_op(op: OpKind, fault: Option<OpKind>, rng: &mut Rng) -> Result<GradcheckEntry> {
    let mut worst = 0.0f64;
    for _ in 0..TRIALS {
        let c = case(op, rng);
        let inputs: Vec<Tensor> = c.inputs.iter().map(|t| t.clone().with_requires_grad(true)).collect();
        let weights = if c.weighted {
            let mut probe = Graph::new();
            let leaves: Vec<Var> = inputs.iter().map(|t| probe.input(t)).collect();
            let out = (c.build)(&mut probe, &leaves)?;
            Some(uniform(probe.value(out).shape(), -2.0, 2.0, rng))
        } else {
            None
        };
        let mut graph = Graph::new();
        if let Some(f) = fault {
            graph.inject_backward_fault(f);
        }
        let (loss, leaves) = scalar_loss(&mut graph, &c, &inputs, &weights)?;
        let grads = graph.backward(loss)?;
        let numeric = finite_diff_grad(
            |xs| {
                let mut g = Graph::new();
                let (l, _) = scalar_loss(&mut g, &c, xs, &weights).expect("same shapes");
                g.value(l).data()[0]
            },
            &inputs,
            STEP,
        )?;
        for (leaf, num) in leaves.iter().zip(&numeric) {
            let zeros = vec![0.0; num.len()];
            let analytic = grads.get(*leaf).unwrap_or(&zeros);
            worst = worst.max(relative_error(analytic, num.data()));
        }
    }
    Ok(GradcheckEntry {
        name: op.name().to_string(),
        max_rel_err: worst,
        trials: TRIALS,
        excluded: 0,
    })
}

/// Gradient of one DREAM(p = 1) loss with respect to every parameter of a
/// small denoiser. The stop-gradient prediction is held fixed, so the loss
/// is a function of the supervised pass alone; coordinates whose ±h
/// perturbation flips the sign of any L1 residual are excluded.
fn check_end_to_end(fault: Option<OpKind>, seed: u64) -> Result<GradcheckEntry> {
    let schedule = linear_beta_schedule(1e-3, 0.05, 20)?;
    let data = ToyDataConfig {
        image_extent: 4,
        scale: 2,
        n_train: 4,
        n_eval: 1,
        seed,
        upsample: UpsampleMode::Bilinear,
        ..ToyDataConfig::default()
    };
    let batch: Vec<SRPair> = (0..3).map(|i| generate_pair(&data, i)).collect::<Result<_>>()?;
    let config = DenoiserConfig {
        image_extent: 4,
        hidden_widths: vec![6],
        time_embed_dim: 4,
        dropout: 0.0,
        max_step: 20,
        ..DenoiserConfig::default()
    };
    let mut rng = stream_rng(seed, 7);
    let params = DenoiserParams::init(config.clone(), &mut rng)?;
    let mode = ObjectiveMode::dream(LambdaPolicy::new(1.0)?);
    let noise = DrawnNoise::draw(&schedule, batch.len(), config.pixels(), &mode, &mut rng);
    let x0 = crate::diffusion::stack(&batch.iter().map(|p| p.x0.clone()).collect::<Vec<_>>())?;
    let pixels = config.pixels();
    let frozen = {
        let mut yt = Vec::new();
        for (i, p) in batch.iter().enumerate() {
            let eps = Tensor::from_vec(p.y0.shape(), noise.eps.data()[i * pixels..(i + 1) * pixels].to_vec())?;
            yt.push(crate::diffusion::forward_diffuse(&schedule, &p.y0, noise.steps[i], &eps)?);
        }
        params.predict_batch(&x0, &crate::diffusion::stack(&yt)?, &noise.steps)?
    };

    let eval = |p: &DenoiserParams| -> Result<(f64, Vec<bool>)> {
        let obj = objective(p, &schedule, &batch, &noise, &mode, Some(&frozen), &mut stream_rng(0, 0))?;
        let pred = obj.graph.value(obj.forward.output);
        let signs = obj.target.data().iter().zip(pred.data()).map(|(t, y)| t > y).collect();
        Ok((obj.breakdown.loss, signs))
    };

    let mut obj = objective(&params, &schedule, &batch, &noise, &mode, Some(&frozen), &mut stream_rng(0, 0))?;
    if let Some(f) = fault {
        obj.graph.inject_backward_fault(f);
    }
    let grads = obj.graph.backward(obj.loss)?;
    let (_, base_signs) = eval(&params)?;

    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    let mut excluded = 0;
    for k in 0..params.tensors().len() {
        let g = grads.get(obj.forward.params[k]).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; params.tensors()[k].len()]);
        for j in 0..params.tensors()[k].len() {
            let mut plus = params.clone();
            plus.tensors_mut()[k].data_mut()[j] += STEP;
            let mut minus = params.clone();
            minus.tensors_mut()[k].data_mut()[j] -= STEP;
            let (lp, sp) = eval(&plus)?;
            let (lm, sm) = eval(&minus)?;
            if sp != base_signs || sm != base_signs {
                excluded += 1;
                continue;
            }
            analytic.push(g[j]);
            numeric.push((lp - lm) / (2.0 * STEP));
        }
    }
    Ok(GradcheckEntry {
        name: END_TO_END.to_string(),
        max_rel_err: relative_error(&analytic, &numeric),
        trials: 1,
        excluded,
    })
}

/// Runs every op check and the end-to-end check. `fault` corrupts one
/// backward rule to exercise the failure path.
pub fn run_gradcheck(seed: u64, fault: Option<OpKind>) -> Result<GradcheckReport> {
    let mut entries = Vec::new();
    for (i, op) in OpKind::ALL.into_iter().enumerate() {
        let mut rng = stream_rng(seed, i as u64);
        entries.push(check_op(op, fault, &mut rng)?);
    }
    entries.push(check_end_to_end(fault, seed)?);
    Ok(GradcheckReport { entries })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clean_build_passes() {
        let r = run_gradcheck(0, None).unwrap();
        assert!(r.passed(), "{r}");
        assert_eq!(r.entries.len(), OpKind::ALL.len() + 1);
    }

    #[test]
    fn relative_error_basics() {
        assert_eq!(relative_error(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        assert!((relative_error(&[1.0, 0.0], &[0.0, 0.0]) - 1.0).abs() < 1e-15);
        assert_eq!(relative_error(&[0.0], &[0.0]), 0.0);
    }
}
