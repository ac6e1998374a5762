use super::{stack, unstack, NoisePredictor};
use crate::error::{Error, Result};
use crate::rng::{normal_tensor, Rng};
use crate::schedule::{NoiseSchedule, SigmaMode};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct SampleOutput {
    /// Final estimate, clamped to [-1, 1].
    pub y0_hat: Tensor,
    /// `(t, y_t)` for every captured step, in visiting order (descending t).
    /// Each state is the chain value before the update at `t`.
    pub trajectory: Option<Vec<(usize, Tensor)>>,
}

/// Steps kept by a sampler with the given stride, ascending. `ceil(T / stride)`
/// evenly spaced indices including both 1 and T (just T when only one step
/// is kept).
pub fn retained_steps(total: usize, stride: usize) -> Result<Vec<usize>> {
    if stride == 0 || total == 0 {
        return Err(Error::out_of_range("stride", stride, ">= 1"));
    }
    let n = total.div_ceil(stride);
    if n <= 1 {
        return Ok(vec![total]);
    }
    let span = (total - 1) as f64 / (n - 1) as f64;
    Ok((0..n).map(|i| (1.0 + i as f64 * span).round() as usize).collect())
}

struct Hop {
    alpha: f64,
    beta: f64,
    sigma: f64,
}

fn hop(schedule: &NoiseSchedule, t: usize, prev: usize) -> Result<Hop> {
    if prev + 1 == t {
        return Ok(Hop {
            alpha: schedule.alpha(t)?,
            beta: schedule.beta(t)?,
            sigma: schedule.sigma(t)?,
        });
    }
    let (ab, ab_prev) = (schedule.alpha_bar(t)?, schedule.alpha_bar_or_one(prev)?);
    let alpha = ab / ab_prev;
    let beta = 1.0 - alpha;
    let sigma = match schedule.sigma_mode() {
        SigmaMode::Beta => beta.sqrt(),
        SigmaMode::Posterior => (beta * (1.0 - ab_prev) / (1.0 - ab)).sqrt(),
    };
    Ok(Hop { alpha, beta, sigma })
}

/// Runs the reverse chain over `retained` (ascending) for a batch of rows.
/// `visit(t, state)` sees the state before every update and may stop the run
/// by returning `false`, in which case `None` is returned.
fn run_chain<P: NoisePredictor + ?Sized>(
    predictor: &P,
    schedule: &NoiseSchedule,
    x0: &Tensor,
    rngs: &mut [Rng],
    retained: &[usize],
    mut visit: impl FnMut(usize, &Tensor) -> bool,
) -> Result<Option<Tensor>> {
    let (batch, width) = (x0.shape()[0], x0.shape()[1]);
    if rngs.len() != batch {
        return Err(Error::Shape {
            op: "ddpm_sample",
            lhs: vec![batch],
            rhs: vec![rngs.len()],
        });
    }
    let mut y = Vec::with_capacity(batch * width);
    for rng in rngs.iter_mut() {
        y.extend(normal_tensor(&[width], rng).into_data());
    }
    let mut y = Tensor::from_vec(&[batch, width], y)?;
    for j in (0..retained.len()).rev() {
        let t = retained[j];
        if !visit(t, &y) {
            return Ok(None);
        }
        let prev = if j == 0 { 0 } else { retained[j - 1] };
        let h = hop(schedule, t, prev)?;
        let eps = predictor.predict_batch(x0, &y, &vec![t; batch])?;
        let c = h.beta / (1.0 - schedule.alpha_bar(t)?).sqrt();
        let inv = 1.0 / h.alpha.sqrt();
        let mut next = y.zip_map(&eps, "ddpm_sample", |y, e| inv * (y - c * e))?;
        if j > 0 {
            for (row, rng) in next.data_mut().chunks_mut(width).zip(rngs.iter_mut()) {
                let z = normal_tensor(&[width], rng);
                row.iter_mut().zip(z.data()).for_each(|(v, z)| *v += h.sigma * z);
            }
        }
        y = next;
    }
    Ok(Some(y))
}

/// Ancestral sampling for a batch of conditioning images, one generator per
/// image. `capture` names the steps whose states are recorded.
pub fn ddpm_sample_batch<P: NoisePredictor + ?Sized>(
    predictor: &P,
    schedule: &NoiseSchedule,
    x0: &[Tensor],
    rngs: &mut [Rng],
    stride: usize,
    capture: Option<&[usize]>,
) -> Result<Vec<SampleOutput>> {
    let retained = retained_steps(schedule.steps(), stride)?;
    let shape = x0.first().ok_or_else(|| Error::Graph("empty batch".into()))?.shape().to_vec();
    let rows = stack(x0)?;
    let mut traj: Vec<Vec<(usize, Tensor)>> = vec![Vec::new(); x0.len()];
    let mut split_err = None;
    let out = run_chain(predictor, schedule, &rows, rngs, &retained, |t, state| {
        if capture.is_some_and(|c| c.contains(&t)) {
            match unstack(state, &shape) {
                Ok(imgs) => traj.iter_mut().zip(imgs).for_each(|(tr, im)| tr.push((t, im))),
                Err(e) => split_err = Some(e),
            }
        }
        true
    })?
    .expect("never stopped");
    if let Some(e) = split_err {
        return Err(e);
    }
    let finals = unstack(&out.map(|v| v.clamp(-1.0, 1.0)), &shape)?;
    Ok(finals
        .into_iter()
        .zip(traj)
        .map(|(y0_hat, tr)| SampleOutput {
            y0_hat,
            trajectory: capture.map(|_| tr),
        })
        .collect())
}

/// Samples ŷ₀ for one conditioning image, optionally recording the full
/// trajectory.
pub fn ddpm_sample<P: NoisePredictor + ?Sized>(
    predictor: &P,
    schedule: &NoiseSchedule,
    x0: &Tensor,
    rng: &mut Rng,
    stride: usize,
    capture_trajectory: bool,
) -> Result<SampleOutput> {
    let retained = retained_steps(schedule.steps(), stride)?;
    let capture = capture_trajectory.then_some(retained.as_slice());
    let mut out = ddpm_sample_batch(predictor, schedule, std::slice::from_ref(x0), std::slice::from_mut(rng), stride, capture)?;
    Ok(out.pop().expect("one sample"))
}

/// Runs the full-length chain from T down to `t_stop` and returns y_{t_stop}.
pub fn sample_noisy_at<P: NoisePredictor + ?Sized>(
    predictor: &P,
    schedule: &NoiseSchedule,
    x0: &Tensor,
    rng: &mut Rng,
    t_stop: usize,
) -> Result<Tensor> {
    if t_stop == 0 || t_stop > schedule.steps() {
        return Err(Error::out_of_range("t_stop", t_stop, format!("1..={}", schedule.steps())));
    }
    let retained: Vec<usize> = (1..=schedule.steps()).collect();
    let rows = stack(std::slice::from_ref(x0))?;
    let mut found = None;
    run_chain(predictor, schedule, &rows, std::slice::from_mut(rng), &retained, |t, state| {
        if t == t_stop {
            found = Some(state.clone());
            false
        } else {
            true
        }
    })?;
    found.expect("t_stop is retained").reshaped(x0.shape())
}
