use super::Tensor;
use crate::error::{Error, Result};

/// Central-difference gradient of `f` at `params`: for every coordinate,
/// `(f(p + h e_i) - f(p - h e_i)) / 2h`.
pub fn finite_diff_grad<F>(mut f: F, params: &[Tensor], h: f64) -> Result<Vec<Tensor>>
where
    F: FnMut(&[Tensor]) -> f64,
{
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::out_of_range("h", h, "(0, inf)"));
    }
    let mut work: Vec<Tensor> = params.iter().map(Tensor::detach).collect();
    let mut eval = |work: &[Tensor]| -> Result<f64> {
        let v = f(work);
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::Numerical(format!("objective returned {v}")))
        }
    };
    eval(&work)?;
    let mut out = Vec::with_capacity(params.len());
    for p in 0..work.len() {
        let mut grad = Vec::with_capacity(work[p].len());
        for i in 0..work[p].len() {
            let orig = work[p].data()[i];
            work[p].data_mut()[i] = orig + h;
            let up = eval(&work)?;
            work[p].data_mut()[i] = orig - h;
            let down = eval(&work)?;
            work[p].data_mut()[i] = orig;
            grad.push((up - down) / (2.0 * h));
        }
        out.push(Tensor::from_vec(work[p].shape(), grad)?);
    }
    Ok(out)
}
