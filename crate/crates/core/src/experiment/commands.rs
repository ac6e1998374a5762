//! The work behind each `dream` subcommand, usable without the binary.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::data::{generate_pair, low_resolution, to_pgm};
use crate::diagnostics::{discrepancy_probe, DiscrepancyCurve, MetricReport};
use crate::diffusion::{ddpm_sample_batch, retained_steps, SRPair};
use crate::error::{Error, Result};
use crate::rng::{stream_id, stream_rng};
use crate::tensor::Tensor;

use super::checkpoint::{write_atomic, Checkpoint};
use super::config::TrainConfig;
use super::svg::{render, Panel, Series};
use super::train::run_training;

/// Parses `start:stop:count` into an inclusive, evenly spaced, strictly
/// increasing grid of step indices.
pub fn parse_t_grid(spec: &str) -> Result<Vec<usize>> {
    let bad = |m: &str| Error::config("t-grid", format!("{spec:?}: {m}"));
    let parts: Vec<&str> = spec.split(':').collect();
    if parts.len() != 3 {
        return Err(bad("expected start:stop:count"));
    }
    let num = |s: &str| s.trim().parse::<usize>().map_err(|_| bad("fields must be non-negative integers"));
    let (start, stop, count) = (num(parts[0])?, num(parts[1])?, num(parts[2])?);
    if start == 0 || stop < start || count == 0 {
        return Err(bad("need 1 <= start <= stop and count >= 1"));
    }
    if count == 1 {
        return if start == stop { Ok(vec![start]) } else { Err(bad("count 1 needs start == stop")) };
    }
    let span = (stop - start) as f64 / (count - 1) as f64;
    let grid: Vec<usize> = (0..count).map(|i| (start as f64 + i as f64 * span).round() as usize).collect();
    if grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(bad("grid points collide; use fewer points"));
    }
    Ok(grid)
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// The first `n` evaluation pairs of a run.
pub fn eval_pairs(config: &TrainConfig, n: usize) -> Result<Vec<SRPair>> {
    if n == 0 || n > config.data.n_eval {
        return Err(Error::out_of_range("n", n, format!("1..={} (data.n_eval)", config.data.n_eval)));
    }
    (0..n).map(|i| generate_pair(&config.data, config.data.eval_index(i))).collect()
}

pub fn probe_panel(title: &str, curve: &DiscrepancyCurve) -> Panel {
    Panel {
        title: title.to_string(),
        x: curve.t_grid.iter().map(|&t| t as f64).collect(),
        x_label: "t".into(),
        y_label: "MSE of estimated y0".into(),
        series: vec![
            Series {
                label: "training".into(),
                color: "#1f77b4",
                mean: curve.train_mean.clone(),
                std: Some(curve.train_std.clone()),
            },
            Series {
                label: "sampling".into(),
                color: "#d62728",
                mean: curve.sample_mean.clone(),
                std: Some(curve.sample_std.clone()),
            },
        ],
    }
}

/// Runs the discrepancy probe on a checkpoint's evaluation pairs and writes
/// `probe.csv` and `probe.svg` into `out_dir`.
pub fn cmd_probe(ckpt: &Checkpoint, t_grid: &[usize], n: usize, seed: u64, out_dir: &Path) -> Result<DiscrepancyCurve> {
    let schedule = ckpt.config.schedule()?;
    let pairs = eval_pairs(&ckpt.config, n)?;
    let params = ckpt.params.frozen_copy();
    let curve = discrepancy_probe(&params, &schedule, &pairs, t_grid, n, seed)?;
    ensure_dir(out_dir)?;
    write_atomic(&out_dir.join("probe.csv"), curve.to_csv().as_bytes())?;
    let title = format!("{} (iteration {})", ckpt.config.mode.name(), ckpt.iteration);
    write_atomic(&out_dir.join("probe.svg"), render(&[probe_panel(&title, &curve)]).as_bytes())?;
    Ok(curve)
}

pub const SAMPLE_HEADER: &str = "image,stride,steps,psnr,ssim,consistency";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleRow {
    pub image: usize,
    pub stride: usize,
    pub steps: usize,
    pub report: MetricReport,
}

/// Samples the first `n` evaluation pairs at every stride. Image `i` uses
/// stream `(i, 0)` of `seed` at every stride. Writes `img_<i>_cond.pgm`,
/// `img_<i>_hr.pgm`, `img_<i>_sr_s<stride>.pgm` and `sample_metrics.csv`.
pub fn cmd_sample(ckpt: &Checkpoint, n: usize, strides: &[usize], seed: u64, out_dir: &Path) -> Result<Vec<SampleRow>> {
    if strides.is_empty() {
        return Err(Error::config("stride", "no stride given"));
    }
    let schedule = ckpt.config.schedule()?;
    for &s in strides {
        retained_steps(schedule.steps(), s)?;
    }
    let pairs = eval_pairs(&ckpt.config, n)?;
    let scale = ckpt.config.data.scale;
    let lrs: Vec<Tensor> = pairs.iter().map(|p| low_resolution(p, scale)).collect::<Result<_>>()?;
    let x0: Vec<Tensor> = pairs.iter().map(|p| p.x0.clone()).collect();
    let params = ckpt.params.frozen_copy();
    ensure_dir(out_dir)?;
    for (i, p) in pairs.iter().enumerate() {
        write_atomic(&out_dir.join(format!("img_{i:03}_cond.pgm")), &to_pgm(&p.x0)?)?;
        write_atomic(&out_dir.join(format!("img_{i:03}_hr.pgm")), &to_pgm(&p.y0)?)?;
    }
    let mut rows = Vec::new();
    for &stride in strides {
        let mut rngs: Vec<_> = (0..n).map(|i| stream_rng(seed, stream_id(i as u64, 0))).collect();
        let out = ddpm_sample_batch(&params, &schedule, &x0, &mut rngs, stride, None)?;
        let steps = retained_steps(schedule.steps(), stride)?.len();
        for (i, o) in out.iter().enumerate() {
            write_atomic(&out_dir.join(format!("img_{i:03}_sr_s{stride}.pgm")), &to_pgm(&o.y0_hat)?)?;
            rows.push(SampleRow {
                image: i,
                stride,
                steps,
                report: MetricReport::compute(&o.y0_hat, &pairs[i].y0, &lrs[i], scale)?,
            });
        }
    }
    let mut csv = format!("{SAMPLE_HEADER}\n");
    for r in &rows {
        writeln!(
            csv,
            "{},{},{},{:.16e},{:.16e},{:.16e}",
            r.image, r.stride, r.steps, r.report.psnr, r.report.ssim, r.report.consistency
        )
        .unwrap();
    }
    write_atomic(&out_dir.join("sample_metrics.csv"), csv.as_bytes())?;
    Ok(rows)
}

pub const COMPARE_HEADER: &str = "t,train_mse_a,sample_mse_a,gap_a,train_mse_b,sample_mse_b,gap_b,gap_ratio";

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub curve_a: DiscrepancyCurve,
    pub curve_b: DiscrepancyCurve,
    /// sample_mse − train_mse per grid point.
    pub gap_a: Vec<f64>,
    pub gap_b: Vec<f64>,
    /// mean(gap_b) / mean(gap_a).
    pub mean_gap_ratio: f64,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

impl Comparison {
    pub fn new(curve_a: DiscrepancyCurve, curve_b: DiscrepancyCurve) -> Result<Self> {
        if curve_a.t_grid != curve_b.t_grid {
            return Err(Error::config("t-grid", "curves use different grids"));
        }
        let gap = |c: &DiscrepancyCurve| -> Vec<f64> { c.sample_mean.iter().zip(&c.train_mean).map(|(s, t)| s - t).collect() };
        let (gap_a, gap_b) = (gap(&curve_a), gap(&curve_b));
        let mean_gap_ratio = mean(&gap_b) / mean(&gap_a);
        Ok(Self {
            curve_a,
            curve_b,
            gap_a,
            gap_b,
            mean_gap_ratio,
        })
    }

    /// One row per grid point, then a final `mean` summary row.
    pub fn to_csv(&self) -> String {
        let (a, b) = (&self.curve_a, &self.curve_b);
        let mut s = format!("{COMPARE_HEADER}\n");
        for i in 0..a.t_grid.len() {
            writeln!(
                s,
                "{},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}",
                a.t_grid[i],
                a.train_mean[i],
                a.sample_mean[i],
                self.gap_a[i],
                b.train_mean[i],
                b.sample_mean[i],
                self.gap_b[i],
                self.gap_b[i] / self.gap_a[i]
            )
            .unwrap();
        }
        writeln!(
            s,
            "mean,{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}",
            mean(&a.train_mean),
            mean(&a.sample_mean),
            mean(&self.gap_a),
            mean(&b.train_mean),
            mean(&b.sample_mean),
            mean(&self.gap_b),
            self.mean_gap_ratio
        )
        .unwrap();
        s
    }
}

fn run_label(c: &TrainConfig) -> String {
    match c.mode {
        super::config::TrainMode::Dream => format!("dream p={}", c.p),
        m => m.name().to_string(),
    }
}

/// Probes two trained runs with paired noise and writes `compare.csv` and
/// `compare.svg` into `out_dir`.
pub fn compare_checkpoints(
    a: &Checkpoint,
    b: &Checkpoint,
    t_grid: &[usize],
    n: usize,
    seed: u64,
    out_dir: &Path,
) -> Result<Comparison> {
    let diff = a.config.unfair_differences(&b.config);
    if !diff.is_empty() {
        return Err(Error::config("compare", format!("runs differ outside the objective settings: {diff:?}")));
    }
    let ca = cmd_probe(a, t_grid, n, seed, &out_dir.join("a"))?;
    let cb = cmd_probe(b, t_grid, n, seed, &out_dir.join("b"))?;
    let cmp = Comparison::new(ca, cb)?;
    write_atomic(&out_dir.join("compare.csv"), cmp.to_csv().as_bytes())?;
    let svg = render(&[
        probe_panel(&format!("a: {}", run_label(&a.config)), &cmp.curve_a),
        probe_panel(&format!("b: {}", run_label(&b.config)), &cmp.curve_b),
    ]);
    write_atomic(&out_dir.join("compare.svg"), svg.as_bytes())?;
    Ok(cmp)
}

#[derive(Debug, Clone)]
pub struct CompareRun {
    pub comparison: Comparison,
    pub checkpoint_a: Checkpoint,
    pub checkpoint_b: Checkpoint,
}

/// Trains both configs into `out_dir/a` and `out_dir/b`, then compares them.
/// Fails before training when the configs differ in anything but the
/// objective settings.
pub fn cmd_compare(
    a: &TrainConfig,
    b: &TrainConfig,
    t_grid: &[usize],
    n: usize,
    seed: u64,
    out_dir: &Path,
    verbose: bool,
) -> Result<CompareRun> {
    let diff = a.unfair_differences(b);
    if !diff.is_empty() {
        return Err(Error::config("compare", format!("configs differ outside the objective settings: {diff:?}")));
    }
    let schedule = a.schedule()?;
    if t_grid.is_empty() || t_grid[t_grid.len() - 1] > schedule.steps() {
        return Err(Error::out_of_range("t-grid", format!("{t_grid:?}"), format!("1..={}", schedule.steps())));
    }
    eval_pairs(a, n)?;
    let mut runs = Vec::new();
    for (cfg, sub) in [(a, "a"), (b, "b")] {
        let mut cfg = cfg.clone();
        cfg.output_dir = out_dir.join(sub);
        if verbose {
            eprintln!("training {sub}: {}", run_label(&cfg));
        }
        runs.push(run_training(&cfg, None, verbose)?);
    }
    let comparison = compare_checkpoints(&runs[0], &runs[1], t_grid, n, seed, out_dir)?;
    let checkpoint_b = runs.pop().unwrap();
    let checkpoint_a = runs.pop().unwrap();
    Ok(CompareRun {
        comparison,
        checkpoint_a,
        checkpoint_b,
    })
}

/// Writes the first `n` pairs (training or evaluation) as PGM files.
pub fn cmd_export(config: &TrainConfig, n: usize, eval: bool, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let total = if eval { config.data.n_eval } else { config.data.n_train };
    if n == 0 || n > total {
        return Err(Error::out_of_range("n", n, format!("1..={total}")));
    }
    ensure_dir(out_dir)?;
    config.data.validate()?;
    let mut written = Vec::new();
    for i in 0..n {
        let index = if eval { config.data.eval_index(i) } else { i };
        let pair = generate_pair(&config.data, index)?;
        for (tag, img) in [("x0", &pair.x0), ("y0", &pair.y0)] {
            let path = out_dir.join(format!("pair_{index:05}_{tag}.pgm"));
            write_atomic(&path, &to_pgm(img)?)?;
            written.push(path);
        }
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn t_grid_specs() {
        assert_eq!(parse_t_grid("10:200:20").unwrap(), (1..=20).map(|i| i * 10).collect::<Vec<_>>());
        assert_eq!(parse_t_grid("1:1:1").unwrap(), vec![1]);
        assert_eq!(parse_t_grid("1:5:3").unwrap(), vec![1, 3, 5]);
        for bad in ["0:10:2", "5:1:2", "1:10", "a:b:c", "1:3:5", "1:5:1", "1:5:0"] {
            assert!(parse_t_grid(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn comparison_summary() {
        let curve = |s: f64| DiscrepancyCurve {
            t_grid: vec![1, 2],
            train_mean: vec![1.0, 2.0],
            train_std: vec![0.0; 2],
            sample_mean: vec![1.0 + s, 2.0 + 3.0 * s],
            sample_std: vec![0.0; 2],
            n_samples: 1,
        };
        let c = Comparison::new(curve(1.0), curve(0.5)).unwrap();
        assert_eq!(c.gap_a, vec![1.0, 3.0]);
        assert_eq!(c.mean_gap_ratio, 0.5);
        let csv = c.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[0], COMPARE_HEADER);
        assert!(lines[3].starts_with("mean,"));
        assert_eq!(csv.matches("mean,").count(), 1);
    }
}
