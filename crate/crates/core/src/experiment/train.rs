//! The outer training loop with periodic evaluation and checkpointing.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng as _;

use crate::data::{generate_pair, low_resolution, ToyDataConfig};
use crate::denoiser::DenoiserParams;
use crate::diagnostics::MetricReport;
use crate::diffusion::{ddpm_sample_batch, train_step, NoisePredictor, SRPair};
use crate::error::{Error, Result};
use crate::rng::{stream_id, stream_rng, RngState};
use crate::schedule::NoiseSchedule;
use crate::tensor::{AdamState, Tensor};

use super::checkpoint::{write_atomic, Checkpoint};
use super::config::TrainConfig;

pub const METRICS_HEADER: &str = "iter,loss,psnr,ssim,consistency";

/// Stream of `train.seed` used for parameter initialization.
pub const STREAM_INIT: u64 = 0;
/// Stream of `train.seed` used for minibatches, noise and dropout.
pub const STREAM_TRAIN: u64 = 1;
/// Added to `train.seed` to key the evaluation-time sampler streams.
const EVAL_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

/// Training and evaluation pairs, materialized once.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub train: Vec<SRPair>,
    pub eval: Vec<SRPair>,
    pub eval_lr: Vec<Tensor>,
    pub scale: usize,
}

impl Dataset {
    pub fn build(config: &ToyDataConfig) -> Result<Self> {
        let train = (0..config.n_train).map(|i| generate_pair(config, i)).collect::<Result<_>>()?;
        let eval: Vec<SRPair> = (0..config.n_eval)
            .map(|i| generate_pair(config, config.eval_index(i)))
            .collect::<Result<_>>()?;
        let eval_lr = eval.iter().map(|p| low_resolution(p, config.scale)).collect::<Result<_>>()?;
        Ok(Self {
            train,
            eval,
            eval_lr,
            scale: config.scale,
        })
    }
}

/// Sampler generator for evaluation image `index` at iteration `iter`.
pub fn eval_rng(seed: u64, iter: u64, index: usize) -> crate::rng::Rng {
    stream_rng(seed.wrapping_add(EVAL_SALT), stream_id(iter, index as u64))
}

/// Samples every evaluation pair and returns per-image metrics.
pub fn evaluate<P: NoisePredictor + ?Sized>(
    predictor: &P,
    schedule: &NoiseSchedule,
    data: &Dataset,
    stride: usize,
    seed: u64,
    iter: u64,
) -> Result<Vec<MetricReport>> {
    let x0: Vec<Tensor> = data.eval.iter().map(|p| p.x0.clone()).collect();
    let mut rngs: Vec<_> = (0..x0.len()).map(|i| eval_rng(seed, iter, i)).collect();
    let out = ddpm_sample_batch(predictor, schedule, &x0, &mut rngs, stride, None)?;
    out.iter()
        .zip(&data.eval)
        .zip(&data.eval_lr)
        .map(|((o, p), lr)| MetricReport::compute(&o.y0_hat, &p.y0, lr, data.scale))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRow {
    pub iter: u64,
    pub loss: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub consistency: f64,
}

impl MetricsRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{:.16e},{:.16e},{:.16e},{:.16e}",
            self.iter, self.loss, self.psnr, self.ssim, self.consistency
        )
    }

    pub fn parse(line: &str) -> Result<Self> {
        let bad = |m: String| Error::Format {
            what: "metrics row",
            message: m,
        };
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 5 {
            return Err(bad(format!("{line:?} has {} fields", f.len())));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|e| bad(format!("{s:?}: {e}")));
        Ok(Self {
            iter: f[0].parse().map_err(|e| bad(format!("{:?}: {e}", f[0])))?,
            loss: num(f[1])?,
            psnr: num(f[2])?,
            ssim: num(f[3])?,
            consistency: num(f[4])?,
        })
    }
}

pub fn parse_metrics(text: &str) -> Result<Vec<MetricsRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(Error::Format {
            what: "metrics csv",
            message: "missing header".into(),
        });
    }
    lines.map(MetricsRow::parse).collect()
}

fn metrics_text(rows: &[String]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in rows {
        writeln!(s, "{r}").unwrap();
    }
    s
}

/// Fresh state for a run: initialized parameters, zeroed optimizer, and the
/// training stream at its start.
pub fn initial_checkpoint(config: &TrainConfig) -> Result<Checkpoint> {
    config.validate()?;
    let params = DenoiserParams::init(config.denoiser_config(), &mut stream_rng(config.seed, STREAM_INIT))?;
    let adam = AdamState::new(params.tensors(), config.lr)?;
    Ok(Checkpoint {
        config: config.clone(),
        iteration: 0,
        rng: RngState::capture(&stream_rng(config.seed, STREAM_TRAIN)),
        adam,
        loss_window: (0.0, 0),
        params,
    })
}

/// Keys other than `train.iterations` and `output.dir` that differ.
fn resume_differences(a: &TrainConfig, b: &TrainConfig) -> Vec<String> {
    let map = |c: &TrainConfig| -> BTreeMap<String, String> {
        c.echo()
            .lines()
            .filter_map(|l| l.split_once(" = "))
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect()
    };
    let (ma, mb) = (map(a), map(b));
    ma.iter()
        .filter(|(k, v)| !matches!(k.as_str(), "train.iterations" | "output.dir") && mb.get(*k) != Some(v))
        .map(|(k, _)| k.clone())
        .collect()
}

pub fn checkpoint_name(iter: u64) -> String {
    format!("ckpt_{iter:08}.bin")
}

pub const FINAL_CHECKPOINT: &str = "checkpoint.bin";
pub const METRICS_FILE: &str = "metrics.csv";

/// Runs `config.train.iterations` steps, optionally continuing from
/// `resume`. Writes `metrics.csv`, one checkpoint per evaluation point and
/// `checkpoint.bin` into `config.output_dir`; returns the final state.
///
/// When resuming, rows of an existing `metrics.csv` up to the resumed
/// iteration are kept, so a split run leaves the same files as a straight one.
pub fn run_training(config: &TrainConfig, resume: Option<Checkpoint>, verbose: bool) -> Result<Checkpoint> {
    config.validate()?;
    let out = config.output_dir.as_path();
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let metrics_path = out.join(METRICS_FILE);

    let (mut state, mut rows) = match resume {
        None => (initial_checkpoint(config)?, Vec::new()),
        Some(ckpt) => {
            let diff = resume_differences(&ckpt.config, config);
            if !diff.is_empty() {
                return Err(Error::config("resume", format!("checkpoint config differs in {diff:?}")));
            }
            if ckpt.iteration > config.iterations as u64 {
                return Err(Error::config(
                    "train.iterations",
                    format!("checkpoint is already at iteration {}", ckpt.iteration),
                ));
            }
            let rows = existing_rows(&metrics_path, ckpt.iteration)?;
            (ckpt, rows)
        }
    };
    state.config = config.clone();
    // Fails here, before any compute, if the directory is unwritable.
    write_atomic(&metrics_path, metrics_text(&rows).as_bytes())?;

    let schedule = config.schedule()?;
    let mode = config.objective_mode()?;
    let data = Dataset::build(&config.data)?;
    let mut rng = state.rng.restore();
    let mut batch = Vec::with_capacity(config.batch_size);

    while state.iteration < config.iterations as u64 {
        let iter = state.iteration + 1;
        batch.clear();
        for _ in 0..config.batch_size {
            batch.push(data.train[rng.random_range(0..data.train.len())].clone());
        }
        let step = match train_step(&mut state.params, &schedule, &batch, &mode, &mut rng, &mut state.adam) {
            Ok(b) => b,
            Err(e @ Error::Numerical(_)) => {
                rows.push(format!("{iter},nan,nan,nan,nan"));
                write_atomic(&metrics_path, metrics_text(&rows).as_bytes())?;
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        state.iteration = iter;
        state.loss_window.0 += step.loss;
        state.loss_window.1 += 1;

        if iter % config.eval_every as u64 == 0 {
            let reports = evaluate(&state.params, &schedule, &data, config.stride, config.seed, iter)?;
            let mean = MetricReport::mean(&reports).expect("non-empty eval set");
            let row = MetricsRow {
                iter,
                loss: state.loss_window.0 / state.loss_window.1 as f64,
                psnr: mean.psnr,
                ssim: mean.ssim,
                consistency: mean.consistency,
            };
            if verbose {
                eprintln!(
                    "iter {iter:>8}  loss {:.5}  psnr {:.3}  ssim {:.4}  consistency {:.3}",
                    row.loss, row.psnr, row.ssim, row.consistency
                );
            }
            rows.push(row.csv_line());
            state.loss_window = (0.0, 0);
            state.rng = RngState::capture(&rng);
            write_atomic(&metrics_path, metrics_text(&rows).as_bytes())?;
            state.save(&out.join(checkpoint_name(iter)))?;
        }
    }
    state.rng = RngState::capture(&rng);
    state.save(&out.join(FINAL_CHECKPOINT))?;
    Ok(state)
}

fn existing_rows(path: &Path, upto: u64) -> Result<Vec<String>> {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(Error::io(path, e)),
    };
    let rows = parse_metrics(&text)?;
    Ok(text
        .lines()
        .skip(1)
        .zip(rows)
        .filter(|(_, r)| r.iter <= upto)
        .map(|(l, _)| l.to_string())
        .collect())
}
