"""Exact closed-form conditional denoiser for the toy world.

Every region (background plus one per object) shares a single mixture
component, and pixels are conditionally independent given it, so the
posterior over components given a noisy region is available in closed form.
The clean estimate is the responsibility-weighted Gaussian posterior mean.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .diffusion import NoiseSchedule
from .toyworld import Layout, Palette

# control strength; at 0.5 regions stay unresolved until the last few steps
DEFAULT_GAMMA = 0.8


class Mode(str, enum.Enum):
    GLOBAL = "GLOBAL"
    RACA = "RACA"
    MASKED = "MASKED"


class ConditioningError(ValueError):
    pass


def region_partition(layout: Layout) -> np.ndarray:
    """Label map: 0 for background, ``i + 1`` for object ``i`` (later objects win overlaps)."""
    regions = np.zeros((layout.height, layout.width), dtype=np.int64)
    for i, obj in enumerate(layout.objects):
        regions[obj.box.slices()] = i + 1
    return regions


def allowed_support(layout: Layout, palette: Palette, mode: Mode) -> np.ndarray:
    """Boolean ``(R, K)`` table of the components each region may take."""
    cat = palette.component_category
    R = len(layout.objects) + 1
    support = np.zeros((R, palette.num_components), dtype=bool)
    if mode == Mode.RACA:
        support[0] = cat == 0
        for i, obj in enumerate(layout.objects):
            support[i + 1] = cat == obj.label
    else:
        support[:] = (cat == 0) | np.isin(cat, sorted(layout.caption))
    return support


def layout_side_support(layout: Layout, palette: Palette) -> np.ndarray:
    """Components allowed by the annotation alone (own category, background for region 0)."""
    return allowed_support(layout, palette, Mode.RACA)


def control_band(control_map: np.ndarray) -> np.ndarray:
    """3x3 max filter: weight of the strongest control edge within one pixel."""
    padded = np.pad(control_map, 1)
    h, w = control_map.shape
    out = np.zeros_like(control_map)
    for dy in range(3):
        for dx in range(3):
            np.maximum(out, padded[dy:dy + h, dx:dx + w], out=out)
    return out


@dataclass(frozen=True)
class Conditioning:
    layout: Layout
    mode: Mode
    region_priors: np.ndarray  # (R, K), R = 1 + number of objects
    control_map: np.ndarray
    gamma: float
    palette: Palette = field(repr=False)

    def __post_init__(self):
        lay = self.layout
        priors = np.asarray(self.region_priors, dtype=float)
        R = len(lay.objects) + 1
        if priors.shape != (R, self.palette.num_components):
            raise ConditioningError(
                f"region_priors shape {priors.shape}, expected {(R, self.palette.num_components)}"
            )
        if np.any(priors < 0) or np.any(np.abs(priors.sum(axis=1) - 1.0) > 1e-9):
            raise ConditioningError("each region prior must be a probability table")
        support = allowed_support(lay, self.palette, Mode(self.mode))
        if np.any(priors[~support] != 0):
            raise ConditioningError(f"region prior puts mass outside the {self.mode} support")
        if self.control_map.shape != (lay.height, lay.width):
            raise ConditioningError("control map does not match the layout")
        if not 0.0 <= self.gamma <= 1.0:
            raise ConditioningError(f"gamma must lie in [0, 1], got {self.gamma}")
        regions = region_partition(lay)
        object.__setattr__(self, "region_priors", priors)
        object.__setattr__(self, "mode", Mode(self.mode))
        object.__setattr__(self, "regions", regions)
        object.__setattr__(self, "region_sizes", np.bincount(regions.ravel(), minlength=R))
        object.__setattr__(self, "band", control_band(self.control_map))
        object.__setattr__(self, "snap_support", layout_side_support(lay, self.palette))


@dataclass(frozen=True)
class DenoiseOutput:
    z0_hat: np.ndarray
    eps_hat: np.ndarray
    responsibilities: np.ndarray  # (R, K)


def gaussian_posterior_mean(z_t, mu, sigma0: float, alpha_bar_t: float):
    """E[z0 | z_t] for z0 ~ N(mu, sigma0^2 I) and z_t = sqrt(ab) z0 + sqrt(1 - ab) eps."""
    ab = alpha_bar_t
    var = ab * sigma0 ** 2 + (1.0 - ab)
    return (np.sqrt(ab) * sigma0 ** 2 * np.asarray(z_t) + (1.0 - ab) * np.asarray(mu)) / var


def _softmax_rows(logw: np.ndarray) -> np.ndarray:
    m = np.max(logw, axis=-1, keepdims=True)
    if not np.all(np.isfinite(m)):
        raise ConditioningError("every component of a region has zero prior")
    w = np.exp(logw - m)
    return w / w.sum(axis=-1, keepdims=True)


def _log_weights(sum_z, sum_sq, counts, priors, palette: Palette, ab: float) -> np.ndarray:
    # log N(z; s*mu, v I) summed over region pixels, dropping terms shared by all components
    s = np.sqrt(ab)
    v = ab * palette.pixel_sigma ** 2 + (1.0 - ab)
    mu = palette.means
    quad = (sum_sq[:, None] - 2.0 * s * (sum_z @ mu.T)
            + counts[:, None] * s * s * np.sum(mu * mu, axis=1)[None, :])
    with np.errstate(divide="ignore"):
        logp = np.log(priors)
    return logp - quad / (2.0 * v)


def region_responsibilities(z_t: np.ndarray, region: np.ndarray, prior, palette: Palette,
                            t: int, schedule: NoiseSchedule) -> np.ndarray:
    """Posterior over flat component index for one region given its noisy pixels."""
    pixels = np.asarray(z_t)[np.asarray(region, dtype=bool)]
    if len(pixels) == 0:
        raise ConditioningError("region is empty")
    prior = np.asarray(prior, dtype=float)
    if not np.any(prior > 0):
        raise ConditioningError("every component of the region has zero prior")
    logw = _log_weights(pixels.sum(axis=0)[None], np.array([np.sum(pixels ** 2)]),
                        np.array([len(pixels)]), prior[None], palette, schedule.alpha_bar(t))
    return _softmax_rows(logw)[0]


def apply_control(z0_hat: np.ndarray, conditioning: Conditioning, responsibilities: np.ndarray,
                  gamma: float | None = None) -> np.ndarray:
    """Residual control: pull pixels near an active edge toward their region's layout-side mean.

    The target for each region is the most responsible component among those
    its annotation allows; ``gamma`` scales the pull (0 = identity).
    """
    gamma = conditioning.gamma if gamma is None else gamma
    if z0_hat.shape[:2] != conditioning.control_map.shape:
        raise ConditioningError("z0_hat does not match the control map")
    if gamma == 0.0:
        return z0_hat.copy()
    palette = conditioning.palette
    masked = np.where(conditioning.snap_support, responsibilities, -1.0)
    targets = palette.means[np.argmax(masked, axis=1)]
    weight = gamma * conditioning.band
    return z0_hat + weight[..., None] * (targets[conditioning.regions] - z0_hat)


def denoise(z_t: np.ndarray, t: int, conditioning: Conditioning, palette: Palette,
            schedule: NoiseSchedule) -> DenoiseOutput:
    if z_t.shape != conditioning.control_map.shape + (3,):
        raise ConditioningError(f"latent shape {z_t.shape} does not match the conditioning")
    ab = schedule.alpha_bar(t)
    regions = conditioning.regions
    counts = conditioning.region_sizes
    R = len(counts)
    flat = regions.ravel()
    zf = z_t.reshape(-1, 3)
    sum_z = np.stack([np.bincount(flat, weights=zf[:, c], minlength=R) for c in range(3)], axis=1)
    sum_sq = np.bincount(flat, weights=np.einsum("ij,ij->i", zf, zf), minlength=R)
    resp = _softmax_rows(_log_weights(sum_z, sum_sq, counts.astype(float),
                                      conditioning.region_priors, palette, ab))
    # posterior mean is affine in z_t: a * z_t + b_k, mixed over components per region
    sigma2 = palette.pixel_sigma ** 2
    var = ab * sigma2 + (1.0 - ab)
    a = np.sqrt(ab) * sigma2 / var
    offsets = resp @ ((1.0 - ab) * palette.means / var)
    z0_hat = a * z_t + offsets[regions]
    z0_hat = apply_control(z0_hat, conditioning, resp)
    eps_hat = (z_t - np.sqrt(ab) * z0_hat) / np.sqrt(1.0 - ab)
    return DenoiseOutput(z0_hat, eps_hat, resp)


class ExactDenoiser:
    """Callable adapter used by the sampling loop: ``denoiser(z_t, t, conditioning)``."""

    def __init__(self, palette: Palette, schedule: NoiseSchedule):
        self.palette = palette
        self.schedule = schedule

    def __call__(self, z_t, t, conditioning):
        return denoise(z_t, t, conditioning, self.palette, self.schedule)
