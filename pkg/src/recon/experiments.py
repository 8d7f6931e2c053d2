"""Seeded experiment protocols over batches of synthetic scenes.

Each protocol returns an :class:`ExperimentResult` holding summary metric rows,
free-form table rows and a pass/fail verdict against its regression threshold.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .denoiser import DEFAULT_GAMMA, ExactDenoiser, Mode
from .diffusion import NoiseSchedule, linear_schedule, sdedit_sample
from .metrics import (GaussianSummary, area_histogram, features, frechet_distance,
                      layout_consistency, leakage_score, micro_downstream_eval)
from .perception import classify_pixels
from .raca import EmbeddingSet, build_conditioning, build_embeddings
from .rgr import DEFAULT_STAGES, RectificationConfig, TargetMode, run_recon, stage_timesteps
from .toyworld import (CategorySpec, Component, Palette, SceneSample, default_palette,
                       make_control_map, random_layout, sample_scene)

ARMS = ("baseline", "raca", "rgr", "recon", "masked", "sdedit")

# rectification schedules of the timestep ablation, baseline first
TIMESTEP_SCHEDULES = (
    (),
    (0.75,),
    (0.5,),
    (0.25,),
    (0.1,),
    (0.5, 0.25),
    (0.5, 0.25, 0.1),
    (0.75, 0.5, 0.25, 0.1),
    (0.75, 0.625, 0.5, 0.375, 0.25, 0.1),
)

SDEDIT_STRENGTHS = tuple(np.round(np.arange(0.1, 1.0001, 0.05), 2))


@dataclass(frozen=True)
class World:
    palette: Palette
    schedule: NoiseSchedule
    embeddings: EmbeddingSet
    gamma: float = DEFAULT_GAMMA
    background_caption: bool = True

    @classmethod
    def default(cls, **kw) -> "World":
        palette = kw.pop("palette", None) or default_palette()
        schedule = kw.pop("schedule", None) or linear_schedule()
        embeddings = kw.pop("embeddings", None) or build_embeddings(palette)
        return cls(palette, schedule, embeddings, **kw)


@dataclass
class ExperimentResult:
    name: str
    rows: list[dict] = field(default_factory=list)
    metrics: list[tuple[str, float, int]] = field(default_factory=list)
    passed: bool = True
    criterion: str = ""


def derive_seed(seed: int, *keys: int) -> int:
    return int(np.random.SeedSequence([seed, *keys]).generate_state(1)[0])


def scene_at(i: int, seed: int, palette: Palette, width: int = 64, height: int = 64,
             min_categories: int = 2) -> tuple[SceneSample, int]:
    """Scene ``i`` of the stream keyed by ``seed``, with its sampling seed."""
    rng = np.random.default_rng(derive_seed(seed, i, 0))
    layout = random_layout(rng, palette, width, height, min_categories=min_categories)
    return sample_scene(layout, palette, derive_seed(seed, i, 1)), derive_seed(seed, i, 2)


def make_scenes(n: int, seed: int, palette: Palette, width: int = 64, height: int = 64,
                min_categories: int = 2) -> list[tuple[SceneSample, int]]:
    """``n`` scenes with their run seeds; scene ``i`` depends only on ``(seed, i)``."""
    return [scene_at(i, seed, palette, width, height, min_categories) for i in range(n)]


def arm_settings(arm: str) -> tuple[Mode, bool]:
    """Conditioning mode and whether rectification stages are active for an arm."""
    return {
        "baseline": (Mode.GLOBAL, False),
        "raca": (Mode.RACA, False),
        "rgr": (Mode.GLOBAL, True),
        "recon": (Mode.RACA, True),
        "masked": (Mode.MASKED, False),
    }[arm]


def run_arm(scene: SceneSample, world: World, arm: str, config: RectificationConfig, seed: int,
            sdedit_strength: float = 0.5, conditioning: Mode | None = None):
    """One sampling run of an ablation arm; ``conditioning`` overrides the arm's mode."""
    if arm == "sdedit":
        return run_sdedit(scene, world, sdedit_strength, seed,
                          Mode.GLOBAL if conditioning is None else Mode(conditioning)), None
    mode, rectify = arm_settings(arm)
    if conditioning is not None:
        mode = Mode(conditioning)
    cfg = config if rectify else RectificationConfig(
        stage_fractions=(), lookahead_N=config.lookahead_N, tau=config.tau,
        target_mode=config.target_mode, dilate_kernel=config.dilate_kernel,
        reuse_initial_noise=config.reuse_initial_noise, min_area=config.min_area)
    return run_recon(scene, world.palette, world.schedule, mode, cfg, seed,
                     embeddings=world.embeddings, gamma=world.gamma,
                     background_caption=world.background_caption)


def run_sdedit(scene: SceneSample, world: World, strength: float, seed: int,
               mode: Mode = Mode.GLOBAL) -> np.ndarray:
    h, w = scene.image.shape[:2]
    z_T = np.random.default_rng(seed).standard_normal((h, w, 3))
    cond = build_conditioning(z_T, scene.layout, world.embeddings, world.palette, world.schedule,
                              mode, world.gamma, make_control_map(scene.layout),
                              world.background_caption)
    return sdedit_sample(scene.image, strength, ExactDenoiser(world.palette, world.schedule),
                         cond, world.schedule, seed)


def edit_area(image: np.ndarray, original: np.ndarray, palette: Palette) -> float:
    """Fraction of pixels whose nearest palette component changed."""
    _, k_new, _ = classify_pixels(image, palette)
    _, k_old, _ = classify_pixels(original, palette)
    return float(np.mean(k_new != k_old))


# --- protocols -----------------------------------------------------------------

def mask_schedule(scenes, world: World, config: RectificationConfig = RectificationConfig()):
    ratios = []
    traces = []
    for scene, seed in scenes:
        _, trace = run_arm(scene, world, "rgr", config, seed)
        ratios.append([s.area_ratio for s in trace.stages])
        traces.append(trace)
    means = np.mean(ratios, axis=0)
    res = ExperimentResult("mask-schedule", criterion="mean mask-area ratio non-increasing across stages")
    ts = stage_timesteps(world.schedule, config.stage_fractions)
    for k, (t, m) in enumerate(zip(ts, means)):
        res.rows.append({"stage_index": k, "t": t, "mean_area_ratio": float(m)})
        res.metrics.append((f"mask_area_ratio_stage{k}", float(m), len(scenes)))
    res.passed = bool(np.all(np.diff(means) <= 0))
    counts, bins = area_histogram(traces)
    for lo, hi, c in zip(bins[:-1], bins[1:], counts):
        res.rows.append({"area_bin_lo": float(lo), "area_bin_hi": float(hi), "count": int(c)})
    return res


def perception_target(scenes, world: World, config: RectificationConfig = RectificationConfig(),
                      fraction: float = 0.5):
    ts = stage_timesteps(world.schedule, config.stage_fractions)
    t_probe = ts[list(config.stage_fractions).index(fraction)]
    res = ExperimentResult("perception-target",
                           criterion=f"mean fp+fn at {fraction}T: LOOKAHEAD <= ONESTEP <= NOISY")
    means = {}
    for mode in (TargetMode.NOISY, TargetMode.ONESTEP, TargetMode.LOOKAHEAD):
        cfg = RectificationConfig(config.stage_fractions, config.lookahead_N, config.tau, mode,
                                  config.dilate_kernel, config.reuse_initial_noise, config.min_area)
        errs, cons = [], []
        for scene, seed in scenes:
            image, trace = run_arm(scene, world, "rgr", cfg, seed)
            stage = next(s for s in trace.stages if s.t == t_probe)
            errs.append(stage.fp_count + stage.fn_count)
            cons.append(layout_consistency(image, scene.layout, world.palette, config.tau)[0])
        means[mode] = float(np.mean(errs))
        res.rows.append({"target_mode": mode.value, "t": t_probe, "mean_fp_fn": means[mode],
                         "consistency_rate": float(np.mean(cons))})
        res.metrics.append((f"mean_fp_fn_{mode.value}", means[mode], len(scenes)))
    res.passed = means[TargetMode.LOOKAHEAD] <= means[TargetMode.ONESTEP] <= means[TargetMode.NOISY]
    return res


def timestep_sweep(scenes, world: World, config: RectificationConfig = RectificationConfig(),
                   schedules=TIMESTEP_SCHEDULES):
    res = ExperimentResult("timestep-sweep",
                           criterion="every rectified schedule is at least as consistent as none")
    rates = []
    for fractions in schedules:
        cfg = RectificationConfig(fractions, config.lookahead_N, config.tau, config.target_mode,
                                  config.dilate_kernel, config.reuse_initial_noise, config.min_area)
        cons = [layout_consistency(run_arm(s, world, "rgr", cfg, seed)[0], s.layout,
                                   world.palette, config.tau)[0] for s, seed in scenes]
        rate = float(np.mean(cons))
        rates.append(rate)
        name = "none" if not fractions else "[" + ", ".join(f"{f:g}" for f in fractions) + "]T"
        res.rows.append({"schedule": name, "consistency_rate": rate})
        res.metrics.append((f"consistency_{name}", rate, len(scenes)))
    res.passed = all(r >= rates[0] for r in rates[1:])
    return res


def component_ablation(scenes, world: World, config: RectificationConfig = RectificationConfig(),
                       arms=("baseline", "rgr", "recon")):
    res = ExperimentResult(
        "component-ablation",
        criterion="consistency baseline < +RGR <= +RGR+RACA, +RGR gain >= 10 points, "
                  "Frechet(recon) <= Frechet(baseline)")
    real = GaussianSummary.fit([features(s.image, s.layout) for s, _ in scenes])
    stats = {}
    for arm in arms:
        images = [run_arm(s, world, arm, config, seed)[0] for s, seed in scenes]
        cons = [layout_consistency(img, s.layout, world.palette, config.tau)[0]
                for img, (s, _) in zip(images, scenes)]
        leak = leakage_score([(img, s.layout) for img, (s, _) in zip(images, scenes)], world.palette)
        fd = frechet_distance(GaussianSummary.fit(
            [features(img, s.layout) for img, (s, _) in zip(images, scenes)]), real)
        stats[arm] = (float(np.mean(cons)), leak, fd)
        label = {"baseline": "baseline", "rgr": "+RGR", "recon": "+RGR+RACA"}.get(arm, arm)
        res.rows.append({"arm": label, "consistency_rate": stats[arm][0], "leakage": leak,
                         "toy_frechet": fd})
        res.metrics += [(f"consistency_{arm}", stats[arm][0], len(scenes)),
                        (f"leakage_{arm}", leak, len(scenes)), (f"toy_frechet_{arm}", fd, len(scenes))]
    if {"baseline", "rgr", "recon"} <= set(stats):
        b, r, f = stats["baseline"], stats["rgr"], stats["recon"]
        res.passed = bool(b[0] < r[0] <= f[0] and r[0] - b[0] >= 0.10 and f[2] <= b[2])
    return res


def sdedit_compare(scenes, world: World, config: RectificationConfig = RectificationConfig(),
                   strengths=SDEDIT_STRENGTHS, recon_arm: str = "rgr"):
    """Consistency of rectified sampling vs SDEdit at the strength with the closest edit area."""
    res = ExperimentResult("sdedit-compare",
                           criterion="ReCon consistency >= SDEdit consistency at matched edit area")
    areas, cons = [], []
    for scene, seed in scenes:
        image, _ = run_arm(scene, world, recon_arm, config, seed)
        areas.append(edit_area(image, scene.image, world.palette))
        cons.append(layout_consistency(image, scene.layout, world.palette, config.tau)[0])
    recon_area, recon_rate = float(np.mean(areas)), float(np.mean(cons))
    res.rows.append({"method": "recon", "strength": "", "edit_area": recon_area,
                     "consistency_rate": recon_rate})
    best = None
    for s in strengths:
        a, c = [], []
        for scene, seed in scenes:
            image = run_sdedit(scene, world, float(s), seed)
            a.append(edit_area(image, scene.image, world.palette))
            c.append(layout_consistency(image, scene.layout, world.palette, config.tau)[0])
        row = {"method": "sdedit", "strength": float(s), "edit_area": float(np.mean(a)),
               "consistency_rate": float(np.mean(c))}
        res.rows.append(row)
        if best is None or abs(row["edit_area"] - recon_area) < abs(best["edit_area"] - recon_area):
            best = row
    res.rows.append({"method": "sdedit-matched", **{k: best[k] for k in
                                                    ("strength", "edit_area", "consistency_rate")}})
    res.metrics += [("recon_edit_area", recon_area, len(scenes)),
                    ("recon_consistency", recon_rate, len(scenes)),
                    ("sdedit_matched_strength", best["strength"], len(scenes)),
                    ("sdedit_matched_edit_area", best["edit_area"], len(scenes)),
                    ("sdedit_matched_consistency", best["consistency_rate"], len(scenes))]
    res.passed = recon_rate >= best["consistency_rate"]
    return res


def biased_palette(palette: Palette, dominant: float = 0.96) -> Palette:
    """Same colors, but every category almost always draws its first component."""
    cats = []
    for cat in palette.categories:
        m = len(cat.components)
        if m == 1:
            cats.append(cat)
            continue
        rest = (1.0 - dominant) / (m - 1)
        weights = [dominant] + [rest] * (m - 1)
        cats.append(CategorySpec(cat.id, cat.name, tuple(
            Component(c.color, w) for c, w in zip(cat.components, weights))))
    return Palette(tuple(cats), palette.pixel_sigma)


def downstream(world: World, seed: int, repetitions: int = 10, n_real: int = 5,
               n_aug_per_real: int = 3, n_test: int = 20,
               config: RectificationConfig = RectificationConfig()):
    res = ExperimentResult("downstream",
                           criterion="f1_augmented >= f1_real_only in at least 8 of 10 repetitions")
    biased = biased_palette(world.palette)
    wins = 0
    for rep in range(repetitions):
        rseed = derive_seed(seed, rep)
        real = [s for s, _ in make_scenes(n_real, derive_seed(rseed, 0), biased)]
        # scenes were drawn from the biased palette; generation uses the true world
        aug = []
        for i, scene in enumerate(real):
            for j in range(n_aug_per_real):
                image, _ = run_arm(scene, world, "recon", config, derive_seed(rseed, 1, i, j))
                aug.append((image, scene.layout))
        test = [(s.image, s.layout) for s, _ in make_scenes(n_test, derive_seed(rseed, 2),
                                                              world.palette)]
        rep_res = micro_downstream_eval([(s.image, s.layout) for s in real], aug, test,
                                        world.palette, config.tau)
        wins += rep_res.f1_augmented >= rep_res.f1_real_only
        res.rows.append({"repetition": rep, "f1_real_only": rep_res.f1_real_only,
                         "f1_augmented": rep_res.f1_augmented,
                         "fallback_real": " ".join(map(str, rep_res.fallback_real)),
                         "fallback_augmented": " ".join(map(str, rep_res.fallback_augmented))})
        res.metrics += [("f1_real_only", rep_res.f1_real_only, n_test),
                        ("f1_augmented", rep_res.f1_augmented, n_test)]
    res.metrics.append(("augmented_wins", wins, repetitions))
    res.passed = wins >= int(np.ceil(0.8 * repetitions))
    return res


def leakage_check(scenes, world: World, arm: str = "raca",
                  config: RectificationConfig = RectificationConfig()) -> float:
    images = [(run_arm(s, world, arm, config, seed)[0], s.layout) for s, seed in scenes]
    return leakage_score(images, world.palette)


EXPERIMENTS = {
    "mask-schedule": mask_schedule,
    "perception-target": perception_target,
    "timestep-sweep": timestep_sweep,
    "component-ablation": component_ablation,
    "sdedit-compare": sdedit_compare,
    "downstream": downstream,
}

__all__ = ["ARMS", "DEFAULT_STAGES", "EXPERIMENTS", "TIMESTEP_SCHEDULES", "World",
           "ExperimentResult", "make_scenes", "run_arm", "run_sdedit", "edit_area",
           "derive_seed", "scene_at", "leakage_check", "biased_palette"]
