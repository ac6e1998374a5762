"""Builds the extension, imports it and exercises each binding once.

Run from anywhere: python3 crates/python/python/smoke_test.py
"""

import math
import pathlib
import shutil
import subprocess
import sys
import tempfile

ROOT = pathlib.Path(__file__).resolve().parents[3]


def build(dest):
    subprocess.run(
        ["cargo", "build", "--release", "-p", "dream-py", "--features", "extension-module"],
        cwd=ROOT,
        check=True,
    )
    lib = ROOT / "target" / "release" / "libdream_py.so"
    shutil.copy(lib, dest / "dream_py.so")
    sys.path.insert(0, str(dest))


def main():
    work = pathlib.Path(tempfile.mkdtemp(prefix="dream_py_"))
    build(work)
    import dream_py as d

    sched = d.NoiseSchedule(1e-5, 0.1, 50)
    assert sched.steps == 50
    assert abs(sched.alpha_bar(1) - (1 - 1e-5)) < 1e-15
    assert sched.weight(10, 0.0) == 1.0 and sched.weight(10, math.inf) == 0.0
    steps = d.retained_steps(50, 10)
    assert len(steps) == 5 and steps[0] == 1 and steps[-1] == 50

    x0, y0 = d.generate_pair(0, image_extent=4, scale=2)
    assert len(y0) == 4 and all(len(r) == 4 for r in y0)
    assert all(-1.0 <= v <= 1.0 for r in y0 for v in r)
    assert d.psnr(y0, y0) == math.inf
    assert abs(d.ssim(y0, y0) - 1.0) < 1e-12
    assert d.consistency(y0, d.box_downsample(y0, 2), 2) < 1e-9
    noisy = sched.forward_diffuse(y0, 50, [[0.0] * 4 for _ in range(4)])
    assert d.mse(noisy, [[math.sqrt(sched.alpha_bar(50)) * v for v in r] for r in y0]) < 1e-24

    cfg = d.TrainConfig(
        "schedule.T = 50\nnet.image_extent = 4\nnet.hidden_widths = 16\nnet.time_embed_dim = 8\n"
        "train.mode = dream\ntrain.iterations = 20\ntrain.batch_size = 4\ntrain.eval_every = 10\n"
        "data.scale = 2\ndata.n_train = 16\ndata.n_eval = 4\n"
    ).with_value("output.dir", str(work / "run"))
    assert d.TrainConfig(cfg.echo()).echo() == cfg.echo()
    ckpt = d.train(cfg)
    assert ckpt.iteration == 20 and ckpt.config.mode == "dream"
    again = d.Checkpoint.load(str(work / "run" / "checkpoint.bin"))
    assert again.iteration == 20

    eps = ckpt.predict_noise(x0, noisy, 50)
    assert len(eps) == 4
    a = ckpt.sample(x0, stride=5, seed=3)
    assert a == ckpt.sample(x0, stride=5, seed=3)
    assert all(-1.0 <= v <= 1.0 for r in a for v in r)
    curve = ckpt.probe([1, 25, 50], 2, seed=0)
    assert curve["t"] == [1, 25, 50] and len(curve["sample_mse_mean"]) == 3

    passed, report = d.gradcheck()
    assert passed, report

    try:
        d.TrainConfig("no.such.key = 1\n")
    except ValueError:
        pass
    else:
        raise AssertionError("unknown key accepted")

    shutil.rmtree(work)
    print("python smoke test: ok")


if __name__ == "__main__":
    main()
