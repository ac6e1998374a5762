//! Distortion metrics and the training-versus-sampling discrepancy probe.

use std::fmt::Write as _;

use crate::data::downsample;
use crate::diffusion::{ddpm_sample_batch, forward_diffuse, stack, NoisePredictor, SRPair};
use crate::error::{Error, Result};
use crate::rng::{normal_tensor, stream_id, stream_rng};
use crate::schedule::NoiseSchedule;
use crate::tensor::Tensor;

/// Peak-to-peak range of images in [-1, 1].
pub const PEAK: f64 = 2.0;

/// Multiplier applied to the pooled MSE in [`consistency`].
pub const CONSISTENCY_SCALE: f64 = 1e5;

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    same_shape("mse", a, b)?;
    let s: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(s / a.len() as f64)
}

/// `10 log10(peak² / mse)`, or `+inf` for identical images.
pub fn psnr(sr: &Tensor, hr: &Tensor, peak: f64) -> Result<f64> {
    if !(peak > 0.0) {
        return Err(Error::out_of_range("peak", peak, "(0, inf)"));
    }
    let m = mse(sr, hr)?;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / m).log10())
}

/// Global single-window SSIM for images in [-1, 1].
pub fn ssim(sr: &Tensor, hr: &Tensor) -> Result<f64> {
    ssim_with_peak(sr, hr, PEAK)
}

/// Global SSIM using the whole image as one window, with
/// `C1 = (0.01 peak)²` and `C2 = (0.03 peak)²`.
pub fn ssim_with_peak(sr: &Tensor, hr: &Tensor, peak: f64) -> Result<f64> {
    same_shape("ssim", sr, hr)?;
    let s = sr.shape();
    if s.len() != 2 || s[0] != s[1] {
        return Err(Error::Shape {
            op: "ssim",
            lhs: s.to_vec(),
            rhs: vec![],
        });
    }
    let n = sr.len() as f64;
    let (a, b) = (sr.data(), hr.data());
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        va += dx * dx;
        vb += dy * dy;
        cov += dx * dy;
    }
    let (va, vb, cov) = (va / n, vb / n, cov / n);
    let c1 = (0.01 * peak).powi(2);
    let c2 = (0.03 * peak).powi(2);
    // Products are formed symmetrically so ssim(a, b) == ssim(b, a) bitwise.
    Ok(((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2)))
}

/// MSE between the box-pooled SR image and the LR image, times 1e5.
pub fn consistency(sr: &Tensor, lr: &Tensor, scale: usize) -> Result<f64> {
    let ok = sr.shape().len() == 2
        && lr.shape().len() == 2
        && sr.shape().iter().zip(lr.shape()).all(|(&s, &l)| s == l * scale);
    if !ok || scale == 0 {
        return Err(Error::Shape {
            op: "consistency",
            lhs: sr.shape().to_vec(),
            rhs: lr.shape().to_vec(),
        });
    }
    Ok(mse(&downsample(sr, scale)?, lr)? * CONSISTENCY_SCALE)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricReport {
    pub psnr: f64,
    pub ssim: f64,
    pub mse: f64,
    pub consistency: f64,
}

impl MetricReport {
    pub fn compute(sr: &Tensor, hr: &Tensor, lr: &Tensor, scale: usize) -> Result<Self> {
        Ok(Self {
            psnr: psnr(sr, hr, PEAK)?,
            ssim: ssim(sr, hr)?,
            mse: mse(sr, hr)?,
            consistency: consistency(sr, lr, scale)?,
        })
    }

    /// Elementwise mean of several reports.
    pub fn mean(reports: &[MetricReport]) -> Option<Self> {
        if reports.is_empty() {
            return None;
        }
        let n = reports.len() as f64;
        let avg = |f: fn(&MetricReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        Some(Self {
            psnr: avg(|r| r.psnr),
            ssim: avg(|r| r.ssim),
            mse: avg(|r| r.mse),
            consistency: avg(|r| r.consistency),
        })
    }
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Averages of adjacent entries: `[(v0 + v1) / 2, (v1 + v2) / 2, ...]`.
pub fn adjacent_average(values: &[f64]) -> Vec<f64> {
    values.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscrepancyCurve {
    pub t_grid: Vec<usize>,
    pub train_mean: Vec<f64>,
    pub train_std: Vec<f64>,
    pub sample_mean: Vec<f64>,
    pub sample_std: Vec<f64>,
    pub n_samples: usize,
}

pub const PROBE_CSV_HEADER: &str = "t,train_mse_mean,train_mse_std,sample_mse_mean,sample_mse_std";

impl DiscrepancyCurve {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(PROBE_CSV_HEADER);
        out.push('\n');
        for i in 0..self.t_grid.len() {
            writeln!(
                out,
                "{},{:.16e},{:.16e},{:.16e},{:.16e}",
                self.t_grid[i], self.train_mean[i], self.train_std[i], self.sample_mean[i], self.sample_std[i]
            )
            .unwrap();
        }
        out
    }

    pub fn from_csv(text: &str, n_samples: usize) -> Result<Self> {
        let bad = |m: String| Error::Format {
            what: "probe csv",
            message: m,
        };
        let mut lines = text.lines();
        if lines.next() != Some(PROBE_CSV_HEADER) {
            return Err(bad("missing header".into()));
        }
        let mut curve = Self {
            t_grid: vec![],
            train_mean: vec![],
            train_std: vec![],
            sample_mean: vec![],
            sample_std: vec![],
            n_samples,
        };
        for (ln, line) in lines.enumerate() {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 {
                return Err(bad(format!("row {} has {} fields", ln + 1, f.len())));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|e| bad(format!("row {}: {e}", ln + 1)));
            curve.t_grid.push(f[0].parse().map_err(|e| bad(format!("row {}: {e}", ln + 1)))?);
            curve.train_mean.push(num(f[1])?);
            curve.train_std.push(num(f[2])?);
            curve.sample_mean.push(num(f[3])?);
            curve.sample_std.push(num(f[4])?);
        }
        Ok(curve)
    }

    /// Points where the sampling-scenario error is at least the training one.
    pub fn sample_dominates(&self) -> usize {
        self.train_mean.iter().zip(&self.sample_mean).filter(|(a, b)| b >= a).count()
    }
}

fn check_grid(t_grid: &[usize], steps: usize) -> Result<()> {
    if t_grid.is_empty() {
        return Err(Error::config("probe.t_grid", "empty grid"));
    }
    if t_grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::config("probe.t_grid", "must be strictly increasing"));
    }
    if t_grid[0] == 0 || t_grid[t_grid.len() - 1] > steps {
        return Err(Error::out_of_range(
            "probe t",
            format!("{:?}", t_grid),
            format!("1..={steps}"),
        ));
    }
    Ok(())
}

/// Compares the ỹ₀ error when y_t comes from the forward process against
/// y_t reached by running the sampler, for the first `n_samples` pairs.
///
/// The forward-process noise for pair `i` at step `t` is drawn from stream
/// `(i, t)` of `seed`; the sampler for pair `i` runs on stream `(i, 0)`.
pub fn discrepancy_probe<P: NoisePredictor + ?Sized>(
    predictor: &P,
    schedule: &NoiseSchedule,
    dataset: &[SRPair],
    t_grid: &[usize],
    n_samples: usize,
    seed: u64,
) -> Result<DiscrepancyCurve> {
    if !predictor.is_frozen() {
        return Err(Error::Graph("probe requires frozen parameters".into()));
    }
    if dataset.is_empty() || n_samples == 0 {
        return Err(Error::config("probe.n_samples", "empty dataset"));
    }
    if n_samples > dataset.len() {
        return Err(Error::out_of_range("n_samples", n_samples, format!("1..={}", dataset.len())));
    }
    check_grid(t_grid, schedule.steps())?;
    let pairs = &dataset[..n_samples];
    let y0s: Vec<Tensor> = pairs.iter().map(|p| p.y0.clone()).collect();
    let x0s: Vec<Tensor> = pairs.iter().map(|p| p.x0.clone()).collect();
    let x_rows = stack(&x0s)?;
    let y_rows = stack(&y0s)?;

    let mut rngs: Vec<_> = (0..n_samples).map(|i| stream_rng(seed, stream_id(i as u64, 0))).collect();
    let sampled = ddpm_sample_batch(predictor, schedule, &x0s, &mut rngs, 1, Some(t_grid))?;

    let errors = |rows: &Tensor, t: usize| -> Result<Vec<f64>> {
        let steps = vec![t; n_samples];
        let eps = predictor.predict_batch(&x_rows, rows, &steps)?;
        let est = crate::diffusion::estimate_from_noise(schedule, rows, &eps, &steps)?;
        let w = y_rows.shape()[1];
        Ok(est
            .data()
            .chunks(w)
            .zip(y_rows.data().chunks(w))
            .map(|(e, y)| e.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / w as f64)
            .collect())
    };

    let mut curve = DiscrepancyCurve {
        t_grid: t_grid.to_vec(),
        train_mean: vec![],
        train_std: vec![],
        sample_mean: vec![],
        sample_std: vec![],
        n_samples,
    };
    for (k, &t) in t_grid.iter().enumerate() {
        let train: Vec<Tensor> = y0s
            .iter()
            .enumerate()
            .map(|(i, y0)| {
                let eps = normal_tensor(y0.shape(), &mut stream_rng(seed, stream_id(i as u64, t as u64)));
                forward_diffuse(schedule, y0, t, &eps)
            })
            .collect::<Result<_>>()?;
        let (m, s) = mean_std(&errors(&stack(&train)?, t)?);
        curve.train_mean.push(m);
        curve.train_std.push(s);

        // Trajectories visit t in descending order.
        let idx = t_grid.len() - 1 - k;
        let states: Vec<Tensor> = sampled
            .iter()
            .map(|o| {
                let (tt, y) = &o.trajectory.as_ref().expect("captured")[idx];
                debug_assert_eq!(*tt, t);
                y.clone()
            })
            .collect();
        let (m, s) = mean_std(&errors(&stack(&states)?, t)?);
        curve.sample_mean.push(m);
        curve.sample_std.push(s);
    }
    Ok(curve)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{upsample, UpsampleMode};
    use crate::diffusion::sample_noisy_at;
    use crate::diffusion::testing::Affine;
    use crate::rng::stream_rng;
    use crate::schedule::linear_beta_schedule;
    use rand::Rng as _;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = stream_rng(seed, 99);
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn mse_cases() {
        let a = random(&[3, 3], 1);
        assert_eq!(mse(&a, &a).unwrap(), 0.0);
        let b = a.map(|v| v - 2.0);
        assert!((mse(&a, &b).unwrap() - 4.0).abs() < 1e-12);
        let c = random(&[3, 3], 2);
        let mut s = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                s += (a.at(&[i, j]) - c.at(&[i, j])).powi(2);
            }
        }
        assert!((mse(&a, &c).unwrap() - s / 9.0).abs() < 1e-15);
        assert!(mse(&a, &Tensor::zeros(&[2, 2])).is_err());
    }

    #[test]
    fn psnr_cases() {
        let a = Tensor::zeros(&[2, 2]);
        assert_eq!(psnr(&a, &a, PEAK).unwrap(), f64::INFINITY);
        assert!(psnr(&a, &Tensor::filled(&[2, 2], 2.0), PEAK).unwrap().abs() < 1e-12);
        assert!((psnr(&a, &Tensor::filled(&[2, 2], 0.2), PEAK).unwrap() - 20.0).abs() < 1e-10);
        assert!(psnr(&a, &a, 0.0).is_err());
    }

    fn ssim_oracle(a: &Tensor, b: &Tensor) -> f64 {
        let n = a.len() as f64;
        let mut ma = 0.0;
        let mut mb = 0.0;
        for i in 0..a.len() {
            ma += a.data()[i];
            mb += b.data()[i];
        }
        ma /= n;
        mb /= n;
        let mut va = 0.0;
        let mut vb = 0.0;
        let mut c = 0.0;
        for i in 0..a.len() {
            va += (a.data()[i] - ma).powi(2);
            vb += (b.data()[i] - mb).powi(2);
            c += (a.data()[i] - ma) * (b.data()[i] - mb);
        }
        va /= n;
        vb /= n;
        c /= n;
        let (c1, c2) = (0.02f64.powi(2), 0.06f64.powi(2));
        (2.0 * ma * mb + c1) * (2.0 * c + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
    }

    #[test]
    fn ssim_cases() {
        let a = random(&[4, 4], 3);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let b = random(&[4, 4], 4);
        assert!((ssim(&a, &b).unwrap() - ssim_oracle(&a, &b)).abs() < 1e-12);
        assert_eq!(ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap());

        // A zero-mean image against its negation: only the stabilizer keeps
        // the value off exactly -1.
        let mut z = a.clone();
        let mean = z.data().iter().sum::<f64>() / 16.0;
        z.data_mut().iter_mut().for_each(|v| *v -= mean);
        let neg = z.map(|v| -v);
        let var = z.data().iter().map(|v| v * v).sum::<f64>() / 16.0;
        let c2 = 0.06f64.powi(2);
        let want = (-2.0 * var + c2) / (2.0 * var + c2);
        let got = ssim(&z, &neg).unwrap();
        assert!((got - want).abs() < 1e-12);
        assert!(got < -0.9);
        assert!(ssim(&a, &Tensor::zeros(&[2, 8])).is_err());
    }

    #[test]
    fn consistency_cases() {
        let lr = random(&[2, 2], 5);
        let sr = upsample(&lr, 4, UpsampleMode::Nearest).unwrap();
        assert!(consistency(&sr, &lr, 4).unwrap().abs() < 1e-20);
        let shifted = sr.map(|v| v + 0.01);
        assert!((consistency(&shifted, &lr, 4).unwrap() - 1e-4 * 1e5).abs() < 1e-9);

        let sr = random(&[6, 6], 6);
        let lr = random(&[3, 3], 7);
        let mut s = 0.0;
        for r in 0..3 {
            for c in 0..3 {
                let mut p = 0.0;
                for dr in 0..2 {
                    for dc in 0..2 {
                        p += sr.at(&[2 * r + dr, 2 * c + dc]);
                    }
                }
                s += (p / 4.0 - lr.at(&[r, c])).powi(2);
            }
        }
        assert!((consistency(&sr, &lr, 2).unwrap() - s / 9.0 * 1e5).abs() < 1e-8);
        assert!(consistency(&sr, &lr, 3).is_err());
    }

    #[test]
    fn population_std() {
        let (m, s) = mean_std(&[1.0, 3.0]);
        assert_eq!((m, s), (2.0, 1.0));
        assert_eq!(adjacent_average(&[1.0, 3.0, 5.0]), vec![2.0, 4.0]);
    }

    fn pairs(n: usize) -> Vec<SRPair> {
        (0..n)
            .map(|i| {
                let y0 = random(&[2, 2], 10 + i as u64);
                SRPair::new(y0.clone(), y0).unwrap()
            })
            .collect()
    }

    /// Recovers `y0` exactly for states reached by the forward process.
    struct PairOracle<'a> {
        schedule: &'a NoiseSchedule,
        // The conditioning image equals the target in these fixtures.
    }

    impl NoisePredictor for PairOracle<'_> {
        fn predict_batch(&self, x0: &Tensor, y_t: &Tensor, steps: &[usize]) -> Result<Tensor> {
            let w = x0.shape()[1];
            let mut out = Vec::new();
            for (i, &t) in steps.iter().enumerate() {
                let ab = self.schedule.alpha_bar(t)?;
                for j in 0..w {
                    let (y, x) = (y_t.data()[i * w + j], x0.data()[i * w + j]);
                    out.push((y - ab.sqrt() * x) / (1.0 - ab).sqrt());
                }
            }
            Tensor::from_vec(y_t.shape(), out)
        }
    }

    #[test]
    fn oracle_has_zero_training_error() {
        let s = linear_beta_schedule(1e-3, 0.05, 20).unwrap();
        let c = discrepancy_probe(&PairOracle { schedule: &s }, &s, &pairs(5), &[1, 5, 10, 20], 5, 3).unwrap();
        assert!(c.train_mean.iter().all(|&m| m < 1e-24));
        assert!(c.sample_mean.iter().all(|m| m.is_finite()));
    }

    #[test]
    fn sample_scenario_matches_sample_noisy_at() {
        let s = linear_beta_schedule(1e-3, 0.05, 12).unwrap();
        let net = Affine::new(0.3, 0.02);
        let data = pairs(3);
        let grid = [2, 7, 12];
        let c = discrepancy_probe(&net, &s, &data, &grid, 3, 11).unwrap();
        for (k, &t) in grid.iter().enumerate() {
            let mut errs = vec![];
            for (i, p) in data.iter().enumerate() {
                let y = sample_noisy_at(&net, &s, &p.x0, &mut stream_rng(11, stream_id(i as u64, 0)), t).unwrap();
                let est = crate::diffusion::estimate_y0(&s, &net, &p.x0, &y, t).unwrap();
                errs.push(mse(&est, &p.y0).unwrap());
            }
            let (m, sd) = mean_std(&errs);
            assert!((c.sample_mean[k] - m).abs() < 1e-12 * (1.0 + m));
            assert!((c.sample_std[k] - sd).abs() < 1e-12 * (1.0 + sd));
        }
    }

    #[test]
    fn probe_is_deterministic_and_validates() {
        let s = linear_beta_schedule(1e-3, 0.05, 10).unwrap();
        let net = Affine::new(0.1, 0.0);
        let data = pairs(2);
        let a = discrepancy_probe(&net, &s, &data, &[1, 10], 2, 0).unwrap();
        assert_eq!(a, discrepancy_probe(&net, &s, &data, &[1, 10], 2, 0).unwrap());
        assert!(discrepancy_probe(&net, &s, &[], &[1], 1, 0).is_err());
        assert!(discrepancy_probe(&net, &s, &data, &[], 2, 0).is_err());
        assert!(discrepancy_probe(&net, &s, &data, &[3, 3], 2, 0).is_err());
        assert!(discrepancy_probe(&net, &s, &data, &[11], 2, 0).is_err());
        assert!(discrepancy_probe(&net, &s, &data, &[1], 3, 0).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let c = DiscrepancyCurve {
            t_grid: vec![1, 5],
            train_mean: vec![0.1, 1.0 / 3.0],
            train_std: vec![0.0, 2e-17],
            sample_mean: vec![0.2, 0.7],
            sample_std: vec![1e-3, 5.5],
            n_samples: 4,
        };
        let text = c.to_csv();
        assert!(text.starts_with(PROBE_CSV_HEADER));
        assert_eq!(DiscrepancyCurve::from_csv(&text, 4).unwrap(), c);
        assert_eq!(c.sample_dominates(), 2);
    }
}
