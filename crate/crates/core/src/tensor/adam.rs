use super::Tensor;
use crate::error::{Error, Result};

/// Adam moments and hyperparameters for one parameter set.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_stability: f64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    /// Zeroed moments mirroring `params`, with beta1 = 0.9, beta2 = 0.999,
    /// eps = 1e-8.
    pub fn new(params: &[Tensor], lr: f64) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::out_of_range("lr", lr, "(0, inf)"));
        }
        Ok(Self {
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps_stability: 1e-8,
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
        })
    }
}

/// One bias-corrected Adam update using each parameter's accumulated grad
/// (missing grads count as zero), then clears the grads.
pub fn adam_step(params: &mut [Tensor], state: &mut AdamState) -> Result<()> {
    if params.len() != state.m.len()
        || params
            .iter()
            .zip(&state.m)
            .any(|(p, m)| p.len() != m.len())
    {
        return Err(Error::Shape {
            op: "adam_step",
            lhs: params.iter().map(Tensor::len).collect(),
            rhs: state.m.iter().map(Vec::len).collect(),
        });
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    let (b1, b2, lr, eps) = (state.beta1, state.beta2, state.lr, state.eps_stability);
    for ((p, m), v) in params.iter_mut().zip(&mut state.m).zip(&mut state.v) {
        let Some(grad) = p.grad.take() else {
            m.iter_mut().for_each(|x| *x *= b1);
            v.iter_mut().for_each(|x| *x *= b2);
            continue;
        };
        for (((w, g), m), v) in p.data.iter_mut().zip(&grad).zip(m.iter_mut()).zip(v.iter_mut()) {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *w -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(v: &[f64]) -> Tensor {
        Tensor::from_vec(&[v.len()], v.to_vec()).unwrap().with_requires_grad(true)
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut p = vec![param(&[1.0, 1.0])];
        p[0].accumulate_grad(&[0.3, -7.0]);
        let mut st = AdamState::new(&p, 1e-2).unwrap();
        adam_step(&mut p, &mut st).unwrap();
        assert!((p[0].data()[0] - (1.0 - 1e-2)).abs() < 1e-9);
        assert!((p[0].data()[1] - (1.0 + 1e-2)).abs() < 1e-9);
        assert!(p[0].grad().is_none(), "grads cleared");
        assert_eq!(st.step, 1);
    }

    #[test]
    fn zero_grad_leaves_params_unchanged() {
        let mut p = vec![param(&[0.5, -0.25])];
        let mut st = AdamState::new(&p, 0.1).unwrap();
        for _ in 0..5 {
            p[0].accumulate_grad(&[0.0, 0.0]);
            adam_step(&mut p, &mut st).unwrap();
        }
        assert_eq!(p[0].data(), &[0.5, -0.25]);
        assert_eq!(st.step, 5);
    }

    #[test]
    fn two_steps_match_reference_recurrence() {
        // Reference recurrence written out by hand for g = 1, lr = 0.1.
        let (b1, b2, lr, eps) = (0.9f64, 0.999f64, 0.1, 1e-8);
        let mut x = 0.0f64;
        let (mut m, mut v) = (0.0f64, 0.0f64);
        for t in 1..=2 {
            m = b1 * m + (1.0 - b1);
            v = b2 * v + (1.0 - b2);
            x -= lr * (m / (1.0 - b1.powi(t))) / ((v / (1.0 - b2.powi(t))).sqrt() + eps);
        }
        let mut p = vec![param(&[0.0])];
        let mut st = AdamState::new(&p, lr).unwrap();
        for _ in 0..2 {
            p[0].accumulate_grad(&[1.0]);
            adam_step(&mut p, &mut st).unwrap();
        }
        assert!((p[0].data()[0] - x).abs() < 1e-15);
        assert!((x + 0.2).abs() < 1e-6);
    }

    #[test]
    fn shape_mismatch() {
        let mut p = vec![param(&[0.0, 0.0])];
        let mut st = AdamState::new(&[param(&[0.0])], 0.1).unwrap();
        assert!(adam_step(&mut p, &mut st).is_err());
        assert!(AdamState::new(&p, 0.0).is_err());
    }
}
