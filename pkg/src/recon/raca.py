"""Category text embeddings, scaled dot-product cross-attention and region priors.

Three conditioning modes are built here:

* ``RACA``: each object region attends only to its own category's component
  keys; the background attends to the caption plus background keys.  Region
  priors are restricted to the same supports, so no region can take a
  foreign category's content.
* ``GLOBAL``: every object region attends to all caption categories' keys and
  every region prior spans the caption categories plus background.
* ``MASKED``: attention is masked to the own category, but the keys come from
  embeddings that were mixed by one round of self-attention first, and the
  priors keep the global support.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .denoiser import Conditioning, Mode, allowed_support, region_partition
from .diffusion import NoiseSchedule
from .toyworld import Layout, Palette

MAX_ABS_COSINE = 0.3
MAX_DRAWS = 1000


class EmbeddingError(ValueError):
    pass


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def _component_keys(palette: Palette, categories: np.ndarray, lift: np.ndarray,
                    offset_scale: float) -> np.ndarray:
    keys = np.empty((palette.num_components, categories.shape[1]))
    for cat in palette.categories:
        sl = palette.category_slice(cat.id)
        colors = palette.means[sl]
        centred = colors - colors.mean(axis=0)
        for j, c in enumerate(centred):
            n = np.linalg.norm(c)
            offset = _unit(lift @ c) * offset_scale if n > 1e-12 else 0.0
            keys[sl.start + j] = categories[cat.id] + offset
    return keys


@dataclass(frozen=True)
class EmbeddingSet:
    """Unit category embeddings, a caption embedding and derived component keys.

    Component keys are the category embedding plus a color-derived offset
    along the query lift, so sibling components are distinguishable while
    keys of different categories stay nearly orthogonal.
    """

    categories: np.ndarray  # (C, d)
    caption: np.ndarray  # (d,)
    lift: np.ndarray  # (d, 3), maps colors to query space
    palette: Palette = field(repr=False)
    offset_scale: float = 1.25
    entangle_temperature: float = 4.0

    def __post_init__(self):
        object.__setattr__(self, "keys", _component_keys(
            self.palette, self.categories, self.lift, self.offset_scale))
        mixed_cats, mixed_caption = self._entangled()
        object.__setattr__(self, "mixed_categories", mixed_cats)
        object.__setattr__(self, "mixed_caption", mixed_caption)
        object.__setattr__(self, "mixed_keys", _component_keys(
            self.palette, mixed_cats, self.lift, self.offset_scale))

    @property
    def d(self) -> int:
        return self.categories.shape[1]

    def _entangled(self):
        # one round of self-attention across every prompt token (all categories + caption)
        tokens = np.vstack([self.categories, self.caption[None]])
        mixed = cross_attention(tokens * self.entangle_temperature, tokens, tokens)
        return mixed[:-1], mixed[-1]

    def keys_for(self, mode: Mode) -> np.ndarray:
        return self.mixed_keys if Mode(mode) == Mode.MASKED else self.keys

    def with_category(self, category: int, vector) -> "EmbeddingSet":
        """Copy with one category embedding replaced (normalised)."""
        cats = self.categories.copy()
        cats[category] = _unit(np.asarray(vector, dtype=float))
        return replace(self, categories=cats)


def build_embeddings(palette: Palette, d: int = 16, seed: int = 0) -> EmbeddingSet:
    """Seeded unit vectors for every category plus the caption, pairwise |cos| <= 0.3."""
    C = palette.num_categories
    if d < C + 1:
        raise EmbeddingError(f"d={d} is too small for {C} categories plus a caption")
    rng = np.random.default_rng(seed)
    accepted: list[np.ndarray] = []
    for i in range(C + 1):
        for _ in range(MAX_DRAWS):
            v = _unit(rng.standard_normal(d))
            if all(abs(v @ u) <= MAX_ABS_COSINE for u in accepted):
                accepted.append(v)
                break
        else:
            raise EmbeddingError(f"could not place embedding {i} with |cos| <= {MAX_ABS_COSINE} in d={d}")
    E = np.array(accepted)
    # lift columns: orthonormal, and orthogonal to the text embeddings when there is room
    raw = rng.standard_normal((d, 3))
    if d >= C + 1 + 3:
        q, _ = np.linalg.qr(np.hstack([E.T, raw]))
        lift = q[:, C + 1:C + 4]
    else:
        lift, _ = np.linalg.qr(raw)
    return EmbeddingSet(E[:C], E[C], lift, palette)


def cross_attention(Q: np.ndarray, K: np.ndarray, V: np.ndarray) -> np.ndarray:
    """softmax(Q K^T / sqrt(d)) V with row-max subtraction."""
    Q, K, V = (np.atleast_2d(np.asarray(a, dtype=float)) for a in (Q, K, V))
    if K.shape[0] == 0:
        raise EmbeddingError("cross-attention needs at least one key")
    if Q.shape[1] != K.shape[1] or K.shape[0] != V.shape[0]:
        raise EmbeddingError(f"incompatible shapes Q{Q.shape} K{K.shape} V{V.shape}")
    logits = Q @ K.T / np.sqrt(K.shape[1])
    logits -= logits.max(axis=1, keepdims=True)
    w = np.exp(logits)
    w /= w.sum(axis=1, keepdims=True)
    return w @ V


def lift_queries(pixels: np.ndarray, emb: EmbeddingSet, t: int, palette: Palette,
                 schedule: NoiseSchedule) -> np.ndarray:
    """Map noisy pixel colors to query vectors, normalised to unit marginal variance."""
    ab = schedule.alpha_bar(t)
    scale = np.sqrt(ab * palette.pixel_sigma ** 2 + (1.0 - ab))
    return (pixels / scale) @ emb.lift.T


def _region_keys(layout: Layout, emb: EmbeddingSet, palette: Palette, mode: Mode,
                 background_caption: bool) -> list[np.ndarray]:
    cat = palette.component_category
    keys = emb.keys_for(mode)
    caption_vec = emb.mixed_caption if mode == Mode.MASKED else emb.caption
    bg = keys[cat == 0]
    if background_caption and layout.caption:
        bg = np.vstack([caption_vec[None], bg])
    out = [bg]
    caption_cats = np.isin(cat, sorted(layout.caption))
    for obj in layout.objects:
        if obj.label >= palette.num_categories or obj.label < 1:
            raise EmbeddingError(f"region category {obj.label} has no embedding")
        if mode == Mode.GLOBAL:
            out.append(keys[caption_cats])
        else:
            out.append(keys[cat == obj.label])
    return out


def _attend(z_t, layout, emb, palette, t, schedule, mode, background_caption):
    regions = region_partition(layout)
    queries = lift_queries(z_t.reshape(-1, 3), emb, t, palette, schedule)
    flat = regions.ravel()
    summaries = np.zeros((len(layout.objects) + 1, emb.d))
    for r, keys in enumerate(_region_keys(layout, emb, palette, mode, background_caption)):
        sel = flat == r
        if sel.any():
            summaries[r] = cross_attention(queries[sel], keys, keys).mean(axis=0)
    return summaries


def region_aligned_attention(z_t, layout: Layout, emb: EmbeddingSet, palette: Palette, t: int,
                             schedule: NoiseSchedule, background_caption: bool = True) -> np.ndarray:
    """Per-region mean attended vector, each region seeing only its own category's keys."""
    return _attend(z_t, layout, emb, palette, t, schedule, Mode.RACA, background_caption)


def global_attention(z_t, layout: Layout, emb: EmbeddingSet, palette: Palette, t: int,
                     schedule: NoiseSchedule, background_caption: bool = True) -> np.ndarray:
    """Per-region mean attended vector with every caption category's keys visible."""
    return _attend(z_t, layout, emb, palette, t, schedule, Mode.GLOBAL, background_caption)


def masked_attention(z_t, layout: Layout, emb: EmbeddingSet, palette: Palette, t: int,
                     schedule: NoiseSchedule, background_caption: bool = True) -> np.ndarray:
    """Own-category attention over keys built from self-attention-mixed embeddings."""
    return _attend(z_t, layout, emb, palette, t, schedule, Mode.MASKED, background_caption)


ATTENTION = {Mode.RACA: region_aligned_attention, Mode.GLOBAL: global_attention,
             Mode.MASKED: masked_attention}


def conditioning_from_attention(summaries: np.ndarray, mode, layout: Layout, emb: EmbeddingSet,
                                palette: Palette, gamma: float,
                                control_map: np.ndarray) -> Conditioning:
    """Turn per-region summaries into component priors over the mode's support."""
    mode = Mode(mode)
    summaries = np.asarray(summaries, dtype=float)
    if summaries.shape != (len(layout.objects) + 1, emb.d):
        raise EmbeddingError(f"expected one summary per region, got shape {summaries.shape}")
    support = allowed_support(layout, palette, mode)
    logits = summaries @ emb.keys_for(mode).T / np.sqrt(emb.d)
    logits = np.where(support, logits, -np.inf)
    logits -= logits.max(axis=1, keepdims=True)
    w = np.exp(logits)
    priors = w / w.sum(axis=1, keepdims=True)
    return Conditioning(layout, mode, priors, np.asarray(control_map, dtype=float), gamma, palette)


def build_conditioning(z_T, layout: Layout, emb: EmbeddingSet, palette: Palette,
                       schedule: NoiseSchedule, mode, gamma: float, control_map: np.ndarray,
                       background_caption: bool = True) -> Conditioning:
    """Attention at the first sampling step, converted to region priors."""
    mode = Mode(mode)
    t = schedule.ddim_steps[0]
    summaries = ATTENTION[mode](z_T, layout, emb, palette, t, schedule, background_caption)
    return conditioning_from_attention(summaries, mode, layout, emb, palette, gamma, control_map)
