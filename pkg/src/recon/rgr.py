"""Region-guided rectification: stage-1 mask preparation and in-loop rectification.

During sampling, at a few stage timesteps, the current latent is probed by
the toy grounding model, false-positive and false-negative regions are
merged into a binary mask, and masked pixels are replaced by the original
image noised to the same timestep.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .denoiser import DEFAULT_GAMMA, ExactDenoiser, Mode
from .diffusion import NoiseSchedule, SamplerState, fast_lookahead, noise_to_t, sample_loop
from .perception import (DEFAULT_MIN_AREA, Detection, detect, exclusive_dilate, mask_union,
                         match_by_iou, segment_regions)
from .raca import EmbeddingSet, build_conditioning, build_embeddings
from .toyworld import Palette, SceneSample, make_control_map


class TargetMode(str, enum.Enum):
    NOISY = "NOISY"  # detect on z_t itself
    ONESTEP = "ONESTEP"  # detect on the clean estimate at t
    LOOKAHEAD = "LOOKAHEAD"  # detect on the clean estimate after N extra steps


class ConfigError(ValueError):
    pass


DEFAULT_STAGES = (0.75, 0.50, 0.25, 0.10)


@dataclass(frozen=True)
class RectificationConfig:
    stage_fractions: tuple[float, ...] = DEFAULT_STAGES
    lookahead_N: int = 5
    tau: float = 0.5
    target_mode: TargetMode = TargetMode.LOOKAHEAD
    dilate_kernel: int = 7
    reuse_initial_noise: bool = True
    min_area: int = DEFAULT_MIN_AREA

    def __post_init__(self):
        fr = tuple(float(f) for f in self.stage_fractions)
        object.__setattr__(self, "stage_fractions", fr)
        object.__setattr__(self, "target_mode", TargetMode(self.target_mode))
        if any(not 0.0 < f < 1.0 for f in fr):
            raise ConfigError(f"stage fractions must lie in (0, 1), got {fr}")
        if any(b >= a for a, b in zip(fr, fr[1:])):
            raise ConfigError(f"stage fractions must be strictly decreasing, got {fr}")
        if self.lookahead_N < 1:
            raise ConfigError("lookahead_N must be >= 1")
        if self.dilate_kernel < 1 or self.dilate_kernel % 2 == 0:
            raise ConfigError("dilate_kernel must be odd and >= 1")
        if not 0.0 < self.tau <= 1.0:
            raise ConfigError("tau must lie in (0, 1]")


@dataclass
class Stage1Record:
    detections: list[Detection]
    fp: list[int]
    gt_regions: list[np.ndarray]
    fp_regions: list[np.ndarray]
    control_map: np.ndarray


@dataclass
class StageRecord:
    stage_index: int
    t: int
    mask: np.ndarray
    area_ratio: float
    fp_count: int
    fn_count: int


@dataclass
class RectificationTrace:
    stage1: Stage1Record | None = None
    stages: list[StageRecord] = field(default_factory=list)


def stage_timesteps(schedule: NoiseSchedule, fractions) -> list[int]:
    """Map fractions of T to the nearest DDIM steps, dropping duplicates.

    The first DDIM step is never hooked (it is the starting latent), so a
    fraction that lands there is dropped.
    """
    out: list[int] = []
    for f in fractions:
        i = schedule.nearest_step_index(round(f * (schedule.T - 1)))
        t = schedule.ddim_steps[i]
        if i > 0 and t not in out:
            out.append(t)
    return out


def _disjoint(masks: list[np.ndarray]) -> list[np.ndarray]:
    # earlier masks keep contested pixels (GT regions precede FP regions)
    taken = None
    out = []
    for m in masks:
        m = m.copy() if taken is None else m & ~taken
        taken = m.copy() if taken is None else taken | m
        out.append(m)
    return out


def prepare_initial_masks(scene: SceneSample, palette: Palette,
                          config: RectificationConfig) -> Stage1Record:
    x0 = scene.image
    gts = scene.layout.boxes
    preds = detect(x0, palette, config.min_area)
    match = match_by_iou(preds, gts, config.tau)
    fp_boxes = [(preds[i].box, preds[i].label) for i in match.fp]
    regions = _disjoint(segment_regions(x0, gts + fp_boxes, palette))
    regions = exclusive_dilate(regions, config.dilate_kernel) if regions else []
    gt_regions, fp_regions = regions[:len(gts)], regions[len(gts):]
    shape = x0.shape[:2]
    control = make_control_map(scene.layout) * (1.0 - mask_union(fp_regions, shape))
    return Stage1Record(preds, match.fp, gt_regions, fp_regions, control)


def build_rectification_mask(z_probe: np.ndarray, scene: SceneSample, palette: Palette,
                             config: RectificationConfig) -> tuple[np.ndarray, int, int]:
    """Merge FP regions (segmented on the probe) and FN regions (segmented on the original)."""
    gts = scene.layout.boxes
    preds = detect(z_probe, palette, config.min_area)
    match = match_by_iou(preds, gts, config.tau)
    fp_masks = segment_regions(z_probe, [(preds[i].box, preds[i].label) for i in match.fp], palette)
    fn_masks = segment_regions(scene.image, [gts[j] for j in match.fn], palette)
    M = mask_union(fp_masks + fn_masks, z_probe.shape[:2])
    return M, len(match.fp), len(match.fn)


def probe_latent(z_t: np.ndarray, t: int, state: SamplerState, config: RectificationConfig,
                 denoiser, conditioning, schedule: NoiseSchedule) -> np.ndarray:
    mode = config.target_mode
    if mode == TargetMode.NOISY:
        return z_t
    if mode == TargetMode.ONESTEP:
        return denoiser(z_t, t, conditioning).z0_hat
    z_ahead, t_ahead = fast_lookahead(state, config.lookahead_N, denoiser, conditioning, schedule)
    return denoiser(z_ahead, t_ahead, conditioning).z0_hat


def rectify(z_t: np.ndarray, z_orig: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Masked pixels from the noised original, the rest from the current latent."""
    return np.where(np.asarray(mask, dtype=bool)[..., None], z_orig, z_t)


def make_rectify_hook(scene: SceneSample, palette: Palette, schedule: NoiseSchedule,
                      config: RectificationConfig, denoiser, conditioning,
                      trace: RectificationTrace, seed: int):
    stage_ts = stage_timesteps(schedule, config.stage_fractions)
    h, w = scene.image.shape[:2]

    def predicate(t: int) -> bool:
        return t in stage_ts

    def callback(z_t: np.ndarray, t: int, state: SamplerState) -> np.ndarray:
        k = stage_ts.index(t)
        probe = probe_latent(z_t, t, state, config, denoiser, conditioning, schedule)
        M, n_fp, n_fn = build_rectification_mask(probe, scene, palette, config)
        if config.reuse_initial_noise:
            eps = state.initial_noise
        else:
            eps = np.random.default_rng([seed, 1 + k]).standard_normal(z_t.shape)
        z_orig = noise_to_t(scene.image, t, eps, schedule)
        trace.stages.append(StageRecord(k, t, M, float(M.sum()) / (h * w), n_fp, n_fn))
        return rectify(z_t, z_orig, M)

    return predicate, callback


def run_recon(scene: SceneSample, palette: Palette, schedule: NoiseSchedule, conditioning_mode,
              config: RectificationConfig, seed: int, *, embeddings: EmbeddingSet | None = None,
              gamma: float = DEFAULT_GAMMA, background_caption: bool = True):
    """Full rectified sampling run; an empty ``stage_fractions`` gives the plain sampler."""
    trace = RectificationTrace()
    trace.stage1 = prepare_initial_masks(scene, palette, config)
    emb = embeddings if embeddings is not None else build_embeddings(palette)
    h, w = scene.image.shape[:2]
    z_T = np.random.default_rng(seed).standard_normal((h, w, 3))
    conditioning = build_conditioning(z_T, scene.layout, emb, palette, schedule,
                                      Mode(conditioning_mode), gamma, trace.stage1.control_map,
                                      background_caption)
    denoiser = ExactDenoiser(palette, schedule)
    hooks = []
    if config.stage_fractions:
        hooks.append(make_rectify_hook(scene, palette, schedule, config, denoiser,
                                       conditioning, trace, seed))
    image, _ = sample_loop(z_T, denoiser, conditioning, schedule, hooks,
                           initial_noise=z_T, rng_seed=seed)
    return image, trace
