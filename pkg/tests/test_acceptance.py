"""Acceptance suite: one check per criterion, each printing a PASS/FAIL line.

Run with ``pytest -v tests/test_acceptance.py`` or directly with
``python3 tests/test_acceptance.py`` for the summary lines alone.
"""
import sys
import tempfile
import time
from pathlib import Path

import numpy as np
import pytest

from recon.cli import main as cli_main
from recon.denoiser import Conditioning, ExactDenoiser, Mode, region_partition
from recon.diffusion import linear_schedule, noise_to_t, predict_z0, sample_loop
from recon.experiments import (World, component_ablation, leakage_check, make_scenes,
                               mask_schedule, perception_target, run_arm, sdedit_compare)
from recon.metrics import layout_consistency
from recon.perception import exclusive_dilate, match_by_iou
from recon.rgr import RectificationConfig, rectify
from recon.toyworld import CategorySpec, Component, Layout, Palette, default_palette

sys.path.insert(0, str(Path(__file__).parent))
from test_perception import brute_force_tp, random_separated_instance  # noqa: E402

SEED = 11


def _world():
    return World.default(palette=default_palette(), schedule=linear_schedule())


def _timed(fn):
    start = time.perf_counter()
    ok, detail = fn()
    return ok, detail, time.perf_counter() - start


def check_rectify():
    rng = np.random.default_rng(SEED)
    ok = True
    for _ in range(1000):
        h, w = rng.integers(1, 33, size=2)
        z, zo = rng.standard_normal((2, h, w, 3))
        m = rng.random((h, w)) < rng.random()
        out = rectify(z, zo, m)
        ok &= np.array_equal(out[m], zo[m]) and np.array_equal(out[~m], z[~m])
    return bool(ok), "1000 triples bit-exact" if ok else "mismatch"


def check_inversion():
    s = linear_schedule()
    rng = np.random.default_rng(SEED)
    z0 = rng.random((64, 64, 3))
    worst = 0.0
    for t in range(s.T):
        eps = rng.standard_normal(z0.shape)
        rec = predict_z0(noise_to_t(z0, t, eps, s), eps, t, s)
        worst = max(worst, float(np.linalg.norm(rec - z0) / np.linalg.norm(z0)))
    return worst < 1e-10, f"max relative error {worst:.2e} over {s.T} timesteps"


def single_gaussian_run(n, steps, mu=(0.3, 0.6, 0.8), sigma=0.05, size=2, seed=SEED):
    """``n`` independent size x size runs stacked into one tall grid (pixels are independent)."""
    pal = Palette((CategorySpec(0, "bg", (Component(mu, 1.0),)),), sigma)
    lay = Layout(size, size * n)
    cond = Conditioning(lay, Mode.RACA, np.ones((1, 1)), np.zeros((size * n, size)), 0.0, pal)
    sched = linear_schedule(num_ddim_steps=steps)
    z_T = np.random.default_rng(seed).standard_normal((size * n, size, 3))
    z, _ = sample_loop(z_T, ExactDenoiser(pal, sched), cond, sched)
    return z.reshape(n, size, size, 3)


def check_sampler_fidelity():
    n, mu, sigma = 10_000, np.array([0.3, 0.6, 0.8]), 0.05
    runs = single_gaussian_run(n, 25, mu, sigma)
    mean, var = runs.mean(axis=0), runs.var(axis=0, ddof=1)
    mean_ok = bool(np.all(np.abs(mean - mu) <= 3 * np.sqrt(var / n)))
    # same initial noise at 200 steps; the gap is the 25-step discretization bias
    var_200 = single_gaussian_run(n, 200, mu, sigma).var(axis=0, ddof=1)
    corrected = var - (var - var_200)
    rel = np.abs(corrected / sigma ** 2 - 1.0)
    var_ok = bool(np.all(rel <= 0.10))
    detail = (f"mean within 3 sigma/sqrt(n): {mean_ok}; var25/s0^2={np.mean(var) / sigma**2:.3f}, "
              f"var200/s0^2={np.mean(var_200) / sigma**2:.3f}, worst corrected error {rel.max():.1%}")
    return mean_ok and var_ok, detail


def check_detector():
    pal = default_palette()
    bad = sum(not layout_consistency(sc.image, sc.layout, pal, 0.5)[0]
              for sc, _ in make_scenes(500, SEED, pal))
    return bad == 0, f"{bad} inconsistent of 500 clean scenes"


def check_matching():
    rng = np.random.default_rng(SEED)
    bad = 0
    for _ in range(1000):
        preds, gts = random_separated_instance(rng)
        bad += len(match_by_iou(preds, gts, 0.5).tp) != brute_force_tp(preds, gts, 0.5)
    return bad == 0, f"{bad} disagreements of 1000"


def check_exclusive_dilate():
    rng = np.random.default_rng(SEED)
    bad = 0
    for _ in range(500):
        h, w = rng.integers(4, 40, size=2)
        k = int(rng.integers(1, 6))
        owner = rng.integers(0, k, size=(h, w))
        keep = rng.random((h, w)) < rng.uniform(0.005, 0.2)
        masks = [(owner == i) & keep for i in range(k)]
        kernel = int(rng.choice([1, 3, 5, 7, 9]))
        out = exclusive_dilate(masks, kernel)
        stack = np.stack(out)
        bad += bool(np.any(stack.sum(axis=0) > 1)
                    or any(np.any(m & ~o) for m, o in zip(masks, out)))
    one = np.zeros((10, 10), bool)
    one[0, 0] = True
    expect = np.zeros((10, 10), bool)
    expect[:4, :4] = True
    corner = np.array_equal(exclusive_dilate([one], 7)[0], expect)
    return bad == 0 and corner, f"{bad} violations of 500; clipped 7x7 corner case {corner}"


def check_raca_leakage():
    world = _world()
    scenes = make_scenes(500, SEED, world.palette)
    leak = leakage_check(scenes, world, "raca")
    cfg = RectificationConfig()
    rng = np.random.default_rng(SEED)
    moved = 0
    for i, (sc, seed) in enumerate(scenes):
        base, _ = run_arm(sc, world, "raca", cfg, seed)
        r = i % (len(sc.layout.objects) + 1)
        own = 0 if r == 0 else sc.layout.objects[r - 1].label
        emb = world.embeddings
        for c in range(world.palette.num_categories):
            if c != own:
                emb = emb.with_category(c, rng.standard_normal(emb.d))
        img, _ = run_arm(sc, World(world.palette, world.schedule, emb, world.gamma), "raca",
                         cfg, seed)
        sel = region_partition(sc.layout) == r
        moved += not np.array_equal(img[sel], base[sel])
    return leak == 0.0 and moved == 0, f"leakage {leak:.4f}; {moved} regions moved of 500"


def _experiment(fn, n):
    world = _world()
    res = fn(make_scenes(n, SEED, world.palette), world)
    return res.passed, "; ".join(f"{m}={v:.4g}" for m, v, _ in res.metrics)


def check_ablation():
    return _experiment(component_ablation, 500)


def check_mask_schedule():
    return _experiment(mask_schedule, 200)


def check_perception_target():
    return _experiment(perception_target, 200)


def check_sdedit():
    return _experiment(sdedit_compare, 200)


def _tree(root: Path) -> dict:
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*"))
            if p.is_file()}


def check_cli_determinism():
    commands = {
        "gen-dataset": ["gen-dataset", "--set", "n=20"],
        "sample": ["sample", "--set", "n=4"],
        "experiment": ["experiment", "mask-schedule", "--set", "n=4"],
    }
    same = {}
    with tempfile.TemporaryDirectory() as tmp:
        for name, argv in commands.items():
            outs = []
            for run in ("a", "b"):
                out = Path(tmp) / name / run
                code = cli_main(argv + ["--seed", str(SEED), "--out", str(out)])
                outs.append(_tree(out) if code == 0 else None)
            same[name] = outs[0] is not None and outs[0] == outs[1]
    return all(same.values()), ", ".join(f"{k} identical={v}" for k, v in same.items())


CRITERIA = [
    (1, "rectify exactness", check_rectify, 1.0),
    (2, "clean-point inversion", check_inversion, 1.0),
    (3, "exact-sampler fidelity", check_sampler_fidelity, 60.0),
    (4, "detector oracle", check_detector, 5.0),
    (5, "matching oracle", check_matching, 5.0),
    (6, "exclusive dilation contract", check_exclusive_dilate, 5.0),
    (7, "region-aligned attention leakage", check_raca_leakage, 60.0),
    (8, "ablation direction", check_ablation, 300.0),
    (9, "mask-area schedule", check_mask_schedule, 180.0),
    (10, "perception-target ordering", check_perception_target, 180.0),
    (11, "SDEdit contrast", check_sdedit, 180.0),
    (12, "CLI determinism", check_cli_determinism, 60.0),
]


def evaluate(number, name, fn, budget):
    ok, detail, elapsed = _timed(fn)
    within = elapsed < budget
    passed = ok and within
    line = (f"criterion {number:2d} {name}: {'PASS' if passed else 'FAIL'} "
            f"({detail}; {elapsed:.2f}s of {budget:g}s)")
    return passed, line


@pytest.mark.acceptance
@pytest.mark.parametrize("number,name,fn,budget", CRITERIA, ids=[f"c{c[0]:02d}" for c in CRITERIA])
def test_criterion(number, name, fn, budget, capsys):
    passed, line = evaluate(number, name, fn, budget)
    with capsys.disabled():
        print("\n" + line)
    assert passed, line


if __name__ == "__main__":
    results = [evaluate(*c) for c in CRITERIA]
    for _, line in results:
        print(line)
    sys.exit(0 if all(p for p, _ in results) else 1)
