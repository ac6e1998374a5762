use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dream_core::diagnostics::DiscrepancyCurve;
use dream_core::experiment::train::{initial_checkpoint, parse_metrics, FINAL_CHECKPOINT, METRICS_HEADER};
use dream_core::experiment::{Checkpoint, TrainConfig};
use dream_core::tensor::Tensor;

fn dream(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dream"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

/// A seconds-long config; lines in `extra` replace base lines with the same key.
fn tiny_config(out: &Path, extra: &str) -> String {
    let base = format!(
        "schedule.T = 20\nnet.image_extent = 4\nnet.hidden_widths = 8\nnet.time_embed_dim = 4\n\
         train.iterations = 6\ntrain.batch_size = 2\ntrain.eval_every = 3\n\
         data.scale = 2\ndata.n_train = 8\ndata.n_eval = 4\noutput.dir = {}\n",
        out.display()
    );
    let key = |l: &str| l.split('=').next().unwrap().trim().to_string();
    let overridden: Vec<String> = extra.lines().map(key).collect();
    let mut text: String = base
        .lines()
        .filter(|l| !overridden.contains(&key(l)))
        .map(|l| format!("{l}\n"))
        .collect();
    text.push_str(extra);
    text
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn trained(dir: &Path) -> PathBuf {
    let run = dir.join("run");
    let cfg = write_config(dir, "tiny.cfg", &tiny_config(&run, ""));
    let out = dream(&["train", s(&cfg), "--quiet"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    run.join(FINAL_CHECKPOINT)
}

#[test]
fn train_writes_metrics_rows() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = trained(dir.path());
    let text = std::fs::read_to_string(ckpt.with_file_name("metrics.csv")).unwrap();
    assert!(text.starts_with(METRICS_HEADER));
    let rows = parse_metrics(&text).unwrap();
    assert_eq!(rows.iter().map(|r| r.iter).collect::<Vec<_>>(), vec![3, 6]);
    assert_eq!(Checkpoint::load(&ckpt).unwrap().iteration, 6);
}

#[test]
fn zero_iterations_leave_initial_params() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let text = tiny_config(&run, "train.iterations = 0\n");
    let cfg = write_config(dir.path(), "zero.cfg", &text);
    assert_eq!(code(&dream(&["train", s(&cfg), "--quiet"])), 0);
    let ckpt = Checkpoint::load(&run.join(FINAL_CHECKPOINT)).unwrap();
    let fresh = initial_checkpoint(&TrainConfig::parse(&text).unwrap()).unwrap();
    assert_eq!(ckpt.params, fresh.params);
    assert_eq!(
        std::fs::read_to_string(run.join("metrics.csv")).unwrap(),
        format!("{METRICS_HEADER}\n")
    );
}

#[test]
fn probe_of_one_pair_has_zero_spread() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = trained(dir.path());
    let out_dir = dir.path().join("probe");
    let out = dream(&["probe", s(&ckpt), "--t-grid", "1:20:5", "--n", "1", "--out", s(&out_dir)]);
    assert_eq!(code(&out), 0);
    let csv = std::fs::read_to_string(out_dir.join("probe.csv")).unwrap();
    assert_eq!(csv, stdout(&out));
    let curve = DiscrepancyCurve::from_csv(&csv, 1).unwrap();
    assert_eq!(curve.t_grid.len(), 5);
    assert!(curve.train_std.iter().chain(&curve.sample_std).all(|&v| v == 0.0));
    assert!(out_dir.join("probe.svg").exists());
}

/// With T = 1, scale 1 and no hidden layer, a linear map recovers the exact
/// noise from (x₀, y_t) because x₀ equals y₀.
#[test]
fn exact_predictor_has_zero_training_error() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("oracle");
    let text = format!(
        "schedule.T = 1\nschedule.beta_start = 0.3\nschedule.beta_end = 0.3\nnet.image_extent = 4\n\
         net.hidden_widths =\nnet.time_embed_dim = 4\ndata.scale = 1\ndata.n_train = 4\ndata.n_eval = 6\n\
         train.iterations = 0\noutput.dir = {}\n",
        run.display()
    );
    let config = TrainConfig::parse(&text).unwrap();
    let mut ckpt = initial_checkpoint(&config).unwrap();
    let ab: f64 = 1.0 - 0.3;
    let (px, embed) = (16, 4);
    let mut w = vec![0.0; (2 * px + embed) * px];
    for i in 0..px {
        w[i * px + i] = -ab.sqrt() / (1.0 - ab).sqrt();
        w[(px + i) * px + i] = 1.0 / (1.0 - ab).sqrt();
    }
    let tensors = vec![
        Tensor::from_vec(&[2 * px + embed, px], w).unwrap(),
        Tensor::zeros(&[1, px]),
    ];
    ckpt.params = dream_core::denoiser::DenoiserParams::from_tensors(config.denoiser_config(), tensors).unwrap();
    std::fs::create_dir_all(&run).unwrap();
    let path = run.join("oracle.bin");
    ckpt.save(&path).unwrap();

    let out = dream(&["probe", s(&path), "--t-grid", "1:1:1", "--n", "6", "--out", s(&run)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let curve = DiscrepancyCurve::from_csv(&stdout(&out), 6).unwrap();
    assert!(curve.train_mean[0] < 1e-20, "{}", curve.train_mean[0]);
    // A single-step chain starting from y_1 reaches the same estimate.
    assert!(curve.sample_mean[0] < 1e-20, "{}", curve.sample_mean[0]);
}

#[test]
fn sampling_is_reproducible_and_covers_every_stride() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = trained(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        let out = dream(&["sample", s(&ckpt), "--n", "3", "--stride", "1,7,20", "--seed", "5", "--out", s(d)]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    }
    let csv = std::fs::read_to_string(a.join("sample_metrics.csv")).unwrap();
    assert_eq!(csv, std::fs::read_to_string(b.join("sample_metrics.csv")).unwrap());
    let rows: Vec<Vec<&str>> = csv.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 9);
    let steps: Vec<(&str, &str)> = rows.iter().map(|r| (r[1], r[2])).collect();
    assert!(steps.contains(&("1", "20")) && steps.contains(&("7", "3")) && steps.contains(&("20", "1")));
    for i in 0..3 {
        for stride in [1, 7, 20] {
            let name = format!("img_{i:03}_sr_s{stride}.pgm");
            assert_eq!(std::fs::read(a.join(&name)).unwrap(), std::fs::read(b.join(&name)).unwrap());
        }
    }
}

#[test]
fn self_comparison_has_unit_ratio() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "a.cfg", &tiny_config(&dir.path().join("unused"), ""));
    let out_dir = dir.path().join("cmp");
    let out = dream(&[
        "compare", s(&cfg), s(&cfg), "--t-grid", "2:20:4", "--n", "3", "--out", s(&out_dir), "--quiet",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(out_dir.join("compare.csv")).unwrap();
    let last = csv.lines().last().unwrap();
    assert!(last.starts_with("mean,"));
    let ratio: f64 = last.rsplit(',').next().unwrap().parse().unwrap();
    assert_eq!(ratio, 1.0);
    assert_eq!(csv.lines().count(), 6);
    for sub in ["a", "b"] {
        assert!(out_dir.join(sub).join(FINAL_CHECKPOINT).exists());
        assert!(out_dir.join(sub).join("probe.csv").exists());
    }
    assert!(out_dir.join("compare.svg").exists());
}

#[test]
fn unfair_comparison_is_refused_before_training() {
    let dir = tempfile::tempdir().unwrap();
    let a = write_config(dir.path(), "a.cfg", &tiny_config(&dir.path().join("x"), ""));
    let b = write_config(
        dir.path(),
        "b.cfg",
        &tiny_config(&dir.path().join("y"), "train.mode = dream\ntrain.lr = 0.01\n"),
    );
    let out_dir = dir.path().join("cmp");
    let out = dream(&["compare", s(&a), s(&b), "--t-grid", "1:20:2", "--out", s(&out_dir), "--quiet"]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("train.lr"));
    assert!(!out_dir.join("a").join(FINAL_CHECKPOINT).exists());
}

#[test]
fn gradcheck_passes_and_detects_faults() {
    let out = dream(&["gradcheck"]);
    assert_eq!(code(&out), 0, "{}", stdout(&out));
    assert!(stdout(&out).contains("PASS"));
    let faulty = dream(&["gradcheck", "--inject-fault", "matmul"]);
    assert_eq!(code(&faulty), 2);
    let line = stdout(&faulty).lines().find(|l| l.trim_start().starts_with("matmul")).map(str::to_string);
    assert!(line.unwrap().contains("FAIL"));
    assert_eq!(code(&dream(&["gradcheck", "--inject-fault", "nope"])), 1);
}

#[test]
fn errors_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&dream(&["--help"])), 0);
    assert_eq!(code(&dream(&["bogus"])), 1);
    assert_eq!(code(&dream(&["train", s(&dir.path().join("missing.cfg"))])), 1);
    let cfg = write_config(dir.path(), "bad.cfg", "schedule.T = 20\nnot.a.key = 3\n");
    let out = dream(&["train", s(&cfg)]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("not.a.key"));
    let ckpt = trained(dir.path());
    assert_eq!(code(&dream(&["sample", s(&ckpt), "--n", "1", "--stride", "0"])), 1);
    assert_eq!(code(&dream(&["probe", s(&ckpt), "--t-grid", "0:5:2", "--n", "1"])), 1);
    assert_eq!(code(&dream(&["probe", s(&ckpt), "--t-grid", "1:20:2", "--n", "99"])), 1);
    assert_eq!(code(&dream(&["probe", s(&dir.path().join("tiny.cfg")), "--t-grid", "1:2:2", "--n", "1"])), 1);
}

#[test]
fn divergent_training_reports_numerical_failure() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let cfg = write_config(
        dir.path(),
        "wild.cfg",
        &tiny_config(&run, "train.lr = 1e300\ntrain.iterations = 50\ntrain.eval_every = 50\n"),
    );
    let out = dream(&["train", s(&cfg), "--quiet"]);
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert!(text.lines().last().unwrap().ends_with(",nan,nan,nan,nan"));
}

#[test]
fn export_writes_pair_images() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "tiny.cfg", &tiny_config(&dir.path().join("run"), ""));
    let out_dir = dir.path().join("pairs");
    assert_eq!(code(&dream(&["export", s(&cfg), "--n", "2", "--out", s(&out_dir), "--eval"])), 0);
    let mut names: Vec<String> = std::fs::read_dir(&out_dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert_eq!(names.len(), 4);
    let pgm = std::fs::read(out_dir.join(&names[0])).unwrap();
    assert!(pgm.starts_with(b"P5\n4 4\n255\n"));
}
