"""Acceptance gate: one test, and one PASS/FAIL line, per criterion.

Criteria 6 and 7 share a module-scoped training run (full model and the
all-modules-off baseline, three seeds each, on the toy task). That run takes
roughly 20-30 minutes on a single CPU core.
"""

import json
import time

import numpy as np
import pytest
import torch

from gcasunet.autodiff import matmul, tensor
from gcasunet.blocks import GAFU, GCAM, GEFS, gafu_forward, gcam_forward, gefs_forward
from gcasunet.checkpoint import load_model, save_checkpoint
from gcasunet.checks import equivariance_suite, grad_check_block, normalization_suite, GRAD_BLOCKS
from gcasunet.cli import main
from gcasunet.data import SynthSpec, density_target, stack_dataset, synth_generate
from gcasunet.model import MICRO_CONFIG, TOY_CONFIG
from gcasunet.swin import TokenGrid, WindowAttention
from gcasunet.training import TrainConfig, constant_mean_report, fit_model, run_ablation

import oracles
from conftest import ACCEPTANCE_LINES

SEEDS = (0, 1, 2)
FULL = {"gcam": True, "gefs": True, "gafu": True}
ALL_OFF = {"gcam": False, "gefs": False, "gafu": False}


def report(number: int, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)
    assert ok, line


def randomized(module, seed, std=0.5):
    torch.manual_seed(seed)
    module = module.double()
    with torch.no_grad():
        for p in module.parameters():
            p.normal_(0.0, std)
    return module


def test_criterion_1_gradients():
    t0 = time.perf_counter()
    results = [grad_check_block(b, tol=1e-4, h=1e-4) for b in GRAD_BLOCKS]
    elapsed = time.perf_counter() - t0
    ok = all(r.passed for r in results) and elapsed < 120
    worst = ", ".join(f"{r.name}={r.detail.split()[1]}" for r in results)
    report(1, ok, f"{worst}; {elapsed:.1f}s (budget 120s)")


def test_criterion_2_normalization():
    r = normalization_suite(n_inputs=1000)
    report(2, r.passed, r.detail)


def test_criterion_3_equivariance():
    r = equivariance_suite(n_pairs=100)
    report(3, r.passed, r.detail)


def test_criterion_4_oracles():
    errs = {}
    wa = randomized(WindowAttention(8, 2, 4), 0)
    with torch.no_grad():
        wa.relative_position_bias_table.zero_()
    g = torch.Generator().manual_seed(0)
    x = TokenGrid(torch.rand(1, 16, 8, generator=g, dtype=torch.float64) * 2 - 1, 4, 4)
    ref = oracles.attention(x.data[0].numpy(), oracles.weights(wa), "", 2).astype(np.float64)
    errs["window_vs_dense"] = float(np.max(np.abs(wa(x, shifted=False).data[0].detach().numpy() - ref)))

    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(7, 5)), rng.normal(size=(5, 6))
    loop = oracles.matmul_loop(a, b)
    got = matmul(tensor(a), tensor(b)).numpy()
    errs["matmul_rel"] = float(np.max(np.abs(got - loop) / np.maximum(np.abs(loop), 1e-300)))

    x6 = TokenGrid(torch.rand(1, 6, 8, generator=g, dtype=torch.float64) * 2 - 1, 2, 3)
    gcam = randomized(GCAM(8), 1)
    ref = oracles.gcam(x6.data[0].numpy(), oracles.weights(gcam))[0].astype(np.float64)
    errs["gcam"] = float(np.max(np.abs(gcam_forward(x6, gcam)[0].data[0].detach().numpy() - ref)))
    gefs = randomized(GEFS(8, 2), 2)
    ref = oracles.gefs(x6.data[0].numpy(), oracles.weights(gefs), 2).astype(np.float64)
    errs["gefs"] = float(np.max(np.abs(gefs_forward(x6, gefs).data[0].detach().numpy() - ref)))
    gafu = randomized(GAFU(8), 3)
    dec = TokenGrid(torch.rand(1, 6, 8, generator=g, dtype=torch.float64) * 2 - 1, 2, 3)
    ref = oracles.gafu(x6.data[0].numpy(), dec.data[0].numpy(), oracles.weights(gafu)).astype(np.float64)
    errs["gafu"] = float(np.max(np.abs(gafu_forward(x6, dec, gafu).data[0].detach().numpy() - ref)))

    limits = {"window_vs_dense": 1e-10, "matmul_rel": 1e-12, "gcam": 1e-10, "gefs": 1e-10, "gafu": 1e-10}
    ok = all(errs[k] <= limits[k] for k in limits)
    report(4, ok, " ".join(f"{k}={v:.1e}(<= {limits[k]:.0e})" for k, v in errs.items()))


def test_criterion_5_count_integral():
    rng = np.random.default_rng(5)
    worst = 0.0
    for i in range(1000):
        h, w = (int(v) for v in rng.integers(8, 65, size=2))
        k = int(rng.integers(0, 25))
        pts = np.column_stack([rng.uniform(0, w - 1, k), rng.uniform(0, h - 1, k)])
        # push about a third of the points onto or right next to the border
        edge = rng.random(k) < 0.35
        pts[edge, 0] = rng.choice([0.0, 0.3, w - 1.3, w - 1.0], size=edge.sum())
        corner = rng.random(k) < 0.15
        pts[corner, 1] = rng.choice([0.0, h - 1.0], size=corner.sum())
        d = density_target(pts, h, w, 2.0)
        worst = max(worst, abs(float(d.sum()) - k))
    report(5, worst <= 1e-5, f"max |sum - count| = {worst:.2e} over 1000 point sets (tol 1e-5)")


@pytest.fixture(scope="module")
def toy_experiment():
    train = synth_generate(SynthSpec(seed=100), 800)
    test = synth_generate(SynthSpec(seed=200), 200)
    ti, td, tcounts = stack_dataset(train)
    si, _, scounts = stack_dataset(test)
    tc = TrainConfig(total_epochs=30, warmup_epochs=5, batch_size=8)
    t0 = time.perf_counter()
    rows = run_ablation([FULL, ALL_OFF], TOY_CONFIG, tc, (ti, td), (si, scounts), seeds=list(SEEDS))
    elapsed = time.perf_counter() - t0
    baseline = constant_mean_report(tcounts, scounts)
    return {"full": rows[0], "off": rows[1], "baseline": baseline, "seconds_per_run": elapsed / (2 * len(SEEDS))}


def test_criterion_6_learning(toy_experiment):
    full, base = toy_experiment["full"], toy_experiment["baseline"]
    assert not full.error, full.error
    ratio = full.median_mae / base.mae
    report(6, ratio <= 0.6,
           f"median test MAE {full.median_mae:.3f} (seeds {[round(m, 3) for m in full.maes]}) vs constant-mean "
           f"{base.mae:.3f}: ratio {ratio:.3f} (need <= 0.60); {toy_experiment['seconds_per_run']:.0f}s per run")


def test_criterion_7_ablation_direction(toy_experiment):
    full, off = toy_experiment["full"], toy_experiment["off"]
    assert not full.error and not off.error, (full.error, off.error)
    report(7, full.median_mae <= off.median_mae,
           f"full median MAE {full.median_mae:.3f} {[round(m, 3) for m in full.maes]} vs all-off "
           f"{off.median_mae:.3f} {[round(m, 3) for m in off.maes]}")


def test_criterion_8_determinism(tmp_path):
    recs = synth_generate(SynthSpec(image_size=16, count_range=(0, 4), object_radius_range=(1.0, 2.0), seed=8), 12)
    imgs, dens, _ = stack_dataset(recs)
    tc = TrainConfig(total_epochs=2, warmup_epochs=1, batch_size=4, seed=3)
    for tag in ("a", "b"):
        model, _ = fit_model(MICRO_CONFIG, tc, imgs, dens)
        save_checkpoint(model, MICRO_CONFIG, tmp_path / f"{tag}.bin")
    same_ckpt = (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()

    restored = load_model(tmp_path / "a.bin")
    x = torch.as_tensor(imgs[:4])
    with torch.no_grad():
        same_forward = torch.equal(restored(x), model(x))
    save_checkpoint(restored, restored.cfg, tmp_path / "c.bin")
    same_resave = (tmp_path / "c.bin").read_bytes() == (tmp_path / "a.bin").read_bytes()

    micro = ["--stages", "1", "--patch-size", "2", "--embed-dim", "8", "--heads", "2", "--depths", "2",
             "--bottleneck-heads", "2", "--input-size", "16"]
    assert main(["synth", "--out", str(tmp_path / "data"), "--n", "8", "--size", "16", "--count", "0:3",
                 "--radius", "1:2"]) == 0
    assert main(["train", "--data", str(tmp_path / "data"), "--out", str(tmp_path / "run"), *micro,
                 "--epochs", "2", "--batch-size", "4"]) == 0
    assert main(["replay", str(tmp_path / "run" / "manifest.json"), "--out", str(tmp_path / "again")]) == 0
    replayed = all((tmp_path / "again" / n).read_bytes() == (tmp_path / "run" / n).read_bytes()
                   for n in json.loads((tmp_path / "run" / "manifest.json").read_text())["outputs"])
    assert main(["replay", str(tmp_path / "data" / "manifest.json"), "--out", str(tmp_path / "data2")]) == 0
    replayed &= all((tmp_path / "data2" / n).read_bytes() == (tmp_path / "data" / n).read_bytes()
                    for n in json.loads((tmp_path / "data" / "manifest.json").read_text())["outputs"])

    ok = same_ckpt and same_forward and same_resave and replayed
    report(8, ok, f"identical checkpoints={same_ckpt} load/forward={same_forward} re-save={same_resave} "
                  f"manifest replay={replayed}")
