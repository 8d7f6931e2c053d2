"""Synthetic layout world: palettes, layouts, scene sampling, control maps and file IO.

Images and diffusion latents share one representation: a float64 array of
shape ``(H, W, 3)``.  Control maps are ``(H, W)`` float arrays in ``[0, 1]``.
"""
from __future__ import annotations

import itertools
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

GRID_MAGIC = b"RCG1"
MIN_BOX_AREA = 16
MIN_OBJECTS = 3
MAX_OBJECTS = 8


class LayoutError(ValueError):
    """A layout, palette or grid violates its invariants."""


@dataclass(frozen=True)
class Component:
    color: tuple[float, float, float]
    weight: float


@dataclass(frozen=True)
class CategorySpec:
    id: int
    name: str
    components: tuple[Component, ...]

    def __post_init__(self):
        if self.id < 0:
            raise LayoutError(f"category id must be nonnegative, got {self.id}")
        if not self.components:
            raise LayoutError(f"category {self.id} has no components")
        total = sum(c.weight for c in self.components)
        if abs(total - 1.0) > 1e-9:
            raise LayoutError(f"category {self.id} weights sum to {total}, expected 1")
        for c in self.components:
            if c.weight <= 0:
                raise LayoutError(f"category {self.id} has a non-positive weight")
            if len(c.color) != 3 or not all(0.0 <= v <= 1.0 for v in c.color):
                raise LayoutError(f"category {self.id} color {c.color} outside [0,1]^3")


@dataclass(frozen=True)
class Palette:
    """Per-category Gaussian mixture defining the exact image distribution.

    Components are also addressed by a flat index ``k`` (categories in id
    order, components in list order); ``means``, ``component_category`` and
    ``weights`` are arrays over that flat index.
    """

    categories: tuple[CategorySpec, ...]
    pixel_sigma: float

    def __post_init__(self):
        ids = [c.id for c in self.categories]
        if ids != list(range(len(ids))):
            raise LayoutError(f"category ids must be 0..C-1 in order, got {ids}")
        # zero noise is accepted for noiseless renders; the cap keeps detection solvable
        if not 0.0 <= self.pixel_sigma <= 0.1:
            raise LayoutError(f"pixel_sigma must lie in [0, 0.1], got {self.pixel_sigma}")
        for a, b in itertools.combinations(self.categories, 2):
            for ca in a.components:
                for cb in b.components:
                    d = float(np.linalg.norm(np.subtract(ca.color, cb.color)))
                    if d < 0.2:
                        raise LayoutError(
                            f"categories {a.id} and {b.id} have components {d:.3f} apart (< 0.2)"
                        )
        means = np.array([c.color for cat in self.categories for c in cat.components], dtype=float)
        owner = np.array([cat.id for cat in self.categories for _ in cat.components], dtype=np.int64)
        weights = np.array([c.weight for cat in self.categories for c in cat.components], dtype=float)
        offsets = np.concatenate([[0], np.cumsum([len(c.components) for c in self.categories])])
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "component_category", owner)
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "_offsets", offsets)

    @property
    def num_categories(self) -> int:
        return len(self.categories)

    @property
    def num_components(self) -> int:
        return len(self.means)

    def flat_index(self, category: int, component: int) -> int:
        if not 0 <= component < len(self.categories[category].components):
            raise LayoutError(f"category {category} has no component {component}")
        return int(self._offsets[category] + component)

    def category_slice(self, category: int) -> slice:
        return slice(int(self._offsets[category]), int(self._offsets[category + 1]))

    def min_inter_category_distance(self) -> float:
        cat = self.component_category
        d = np.linalg.norm(self.means[:, None, :] - self.means[None, :, :], axis=-1)
        d[cat[:, None] == cat[None, :]] = np.inf
        return float(d.min()) if np.isfinite(d).any() else np.inf

    def with_sigma(self, pixel_sigma: float) -> "Palette":
        return Palette(self.categories, pixel_sigma)


def default_palette(pixel_sigma: float = 0.05) -> Palette:
    """Background plus four foreground categories, 2-3 components each."""

    def cat(i, name, comps):
        return CategorySpec(i, name, tuple(Component(tuple(c), w) for c, w in comps))

    return Palette(
        (
            cat(0, "background", [((0.40, 0.40, 0.34), 0.6), ((0.58, 0.52, 0.56), 0.4)]),
            cat(1, "red", [((0.92, 0.12, 0.12), 0.5), ((0.72, 0.05, 0.35), 0.5)]),
            cat(2, "green", [((0.10, 0.82, 0.15), 0.4), ((0.35, 0.95, 0.40), 0.3),
                             ((0.02, 0.68, 0.45), 0.3)]),
            cat(3, "blue", [((0.10, 0.18, 0.92), 0.5), ((0.42, 0.05, 0.80), 0.5)]),
            cat(4, "yellow", [((0.95, 0.92, 0.12), 0.4), ((0.80, 0.70, 0.02), 0.3),
                              ((0.98, 0.72, 0.40), 0.3)]),
        ),
        pixel_sigma,
    )


@dataclass(frozen=True)
class Box:
    """Half-open pixel rectangle ``[x0, x1) x [y0, y1)``."""

    x0: int
    y0: int
    x1: int
    y1: int

    def __post_init__(self):
        if not (self.x0 < self.x1 and self.y0 < self.y1):
            raise LayoutError(f"degenerate box {self.as_list()}")

    @property
    def area(self) -> int:
        return (self.x1 - self.x0) * (self.y1 - self.y0)

    def as_list(self) -> list[int]:
        return [self.x0, self.y0, self.x1, self.y1]

    def slices(self) -> tuple[slice, slice]:
        return slice(self.y0, self.y1), slice(self.x0, self.x1)

    def fits(self, width: int, height: int) -> bool:
        return 0 <= self.x0 and self.x1 <= width and 0 <= self.y0 and self.y1 <= height


@dataclass(frozen=True)
class LayoutObject:
    box: Box
    label: int


@dataclass(frozen=True)
class Layout:
    width: int
    height: int
    objects: tuple[LayoutObject, ...] = ()
    caption: frozenset[int] = field(default_factory=frozenset)

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise LayoutError("layout dimensions must be positive")
        for i, obj in enumerate(self.objects):
            if not obj.box.fits(self.width, self.height):
                raise LayoutError(f"objects[{i}].box {obj.box.as_list()} outside the frame")
            if obj.label < 1:
                raise LayoutError(f"objects[{i}].label must be >= 1 (0 is background)")
        missing = {o.label for o in self.objects} - set(self.caption)
        if missing:
            raise LayoutError(f"caption is missing object labels {sorted(missing)}")

    @property
    def boxes(self) -> list[tuple[Box, int]]:
        return [(o.box, o.label) for o in self.objects]

    def validate(self, palette: Palette, strict: bool = True) -> None:
        """Check palette-dependent invariants; ``strict`` adds object count and area floors."""
        for i, obj in enumerate(self.objects):
            if obj.label >= palette.num_categories:
                raise LayoutError(f"objects[{i}].label {obj.label} is not a palette category")
            if strict and obj.box.area < MIN_BOX_AREA:
                raise LayoutError(f"objects[{i}].box area {obj.box.area} < {MIN_BOX_AREA}")
        for c in self.caption:
            if not 1 <= c < palette.num_categories:
                raise LayoutError(f"caption category {c} is not a foreground palette category")
        if strict and not MIN_OBJECTS <= len(self.objects) <= MAX_OBJECTS:
            raise LayoutError(
                f"layout has {len(self.objects)} objects, expected {MIN_OBJECTS}..{MAX_OBJECTS}"
            )


@dataclass(frozen=True)
class SceneSample:
    layout: Layout
    background_component: int
    object_components: tuple[int, ...]
    image: np.ndarray


def random_layout(
    rng: np.random.Generator,
    palette: Palette,
    width: int = 64,
    height: int = 64,
    n_objects: tuple[int, int] = (MIN_OBJECTS, MAX_OBJECTS),
    side: tuple[int, int] = (5, 20),
    gap: int = 1,
    min_categories: int = 1,
    max_tries: int = 2000,
) -> Layout:
    """Draw a layout of non-touching boxes.

    Boxes keep at least ``gap`` background pixels between each other so that
    4-connected same-category objects never merge.
    """
    n = int(rng.integers(n_objects[0], n_objects[1] + 1))
    fg = np.arange(1, palette.num_categories)
    if min_categories > len(fg):
        raise LayoutError("palette has too few foreground categories")
    occupied = np.zeros((height, width), dtype=bool)
    objects: list[LayoutObject] = []
    tries = 0
    while len(objects) < n:
        tries += 1
        if tries > max_tries:
            # restart with a fresh placement rather than loop forever on a crowded frame
            return random_layout(rng, palette, width, height, n_objects, side, gap,
                                 min_categories, max_tries)
        w = int(rng.integers(side[0], side[1] + 1))
        h = int(rng.integers(side[0], side[1] + 1))
        if w * h < MIN_BOX_AREA or w > width or h > height:
            continue
        x0 = int(rng.integers(0, width - w + 1))
        y0 = int(rng.integers(0, height - h + 1))
        ys = slice(max(0, y0 - gap), y0 + h + gap)
        xs = slice(max(0, x0 - gap), x0 + w + gap)
        if occupied[ys, xs].any():
            continue
        occupied[y0:y0 + h, x0:x0 + w] = True
        objects.append(LayoutObject(Box(x0, y0, x0 + w, y0 + h), 0))
    labels = rng.choice(fg, size=n)
    if min_categories > 1:
        forced = rng.choice(fg, size=min_categories, replace=False)
        labels[:min_categories] = forced
        rng.shuffle(labels)
    objects = [LayoutObject(o.box, int(lab)) for o, lab in zip(objects, labels)]
    return Layout(width, height, tuple(objects), frozenset(int(x) for x in labels))


def render_mean_field(
    layout: Layout,
    palette: Palette,
    object_components,
    background_component: int = 0,
) -> np.ndarray:
    """Per-pixel mixture mean; later objects paint over earlier ones."""
    if len(object_components) != len(layout.objects):
        raise LayoutError(
            f"{len(object_components)} component choices for {len(layout.objects)} objects"
        )
    layout.validate(palette, strict=False)
    img = np.empty((layout.height, layout.width, 3), dtype=float)
    img[...] = palette.means[palette.flat_index(0, background_component)]
    for obj, comp in zip(layout.objects, object_components):
        img[obj.box.slices()] = palette.means[palette.flat_index(obj.label, comp)]
    return img


def sample_scene(layout: Layout, palette: Palette, rng_seed: int) -> SceneSample:
    layout.validate(palette, strict=False)
    rng = np.random.default_rng(rng_seed)
    bg = int(rng.choice(len(palette.categories[0].components),
                        p=[c.weight for c in palette.categories[0].components]))
    comps = tuple(
        int(rng.choice(len(palette.categories[o.label].components),
                       p=[c.weight for c in palette.categories[o.label].components]))
        for o in layout.objects
    )
    mean = render_mean_field(layout, palette, comps, bg)
    noise = rng.standard_normal(mean.shape)
    image = mean + palette.pixel_sigma * noise if palette.pixel_sigma > 0 else mean
    return SceneSample(layout, bg, comps, image)


def make_control_map(layout: Layout) -> np.ndarray:
    """1 on each box's one-pixel perimeter, 0 elsewhere (toy edge map)."""
    cmap = np.zeros((layout.height, layout.width), dtype=float)
    for obj in layout.objects:
        b = obj.box
        cmap[b.y0, b.x0:b.x1] = 1.0
        cmap[b.y1 - 1, b.x0:b.x1] = 1.0
        cmap[b.y0:b.y1, b.x0] = 1.0
        cmap[b.y0:b.y1, b.x1 - 1] = 1.0
    return cmap


# --- file IO ---------------------------------------------------------------

def layout_to_dict(layout: Layout) -> dict:
    return {
        "width": layout.width,
        "height": layout.height,
        "objects": [{"box": o.box.as_list(), "label": o.label} for o in layout.objects],
        "caption": sorted(layout.caption),
    }


def _field(obj, key, kind, where):
    if not isinstance(obj, dict) or key not in obj:
        raise LayoutError(f"missing field '{where}{key}'")
    value = obj[key]
    if kind is int and (isinstance(value, bool) or not isinstance(value, int)):
        raise LayoutError(f"field '{where}{key}' must be an integer")
    if kind is list and not isinstance(value, list):
        raise LayoutError(f"field '{where}{key}' must be a list")
    if kind is float and (isinstance(value, bool) or not isinstance(value, (int, float))):
        raise LayoutError(f"field '{where}{key}' must be a number")
    if kind is str and not isinstance(value, str):
        raise LayoutError(f"field '{where}{key}' must be a string")
    return value


def layout_from_dict(data: dict, palette: Palette | None = None, strict: bool = True) -> Layout:
    width = _field(data, "width", int, "")
    height = _field(data, "height", int, "")
    objects = []
    for i, raw in enumerate(_field(data, "objects", list, "")):
        box = _field(raw, "box", list, f"objects[{i}].")
        if len(box) != 4 or not all(isinstance(v, int) and not isinstance(v, bool) for v in box):
            raise LayoutError(f"field 'objects[{i}].box' must be four integers")
        label = _field(raw, "label", int, f"objects[{i}].")
        objects.append(LayoutObject(Box(*box), label))
    caption = _field(data, "caption", list, "")
    if not all(isinstance(c, int) and not isinstance(c, bool) for c in caption):
        raise LayoutError("field 'caption' must be a list of integers")
    layout = Layout(width, height, tuple(objects), frozenset(caption))
    if palette is not None:
        layout.validate(palette, strict=strict)
    return layout


def save_layout(layout: Layout, path) -> None:
    Path(path).write_text(json.dumps(layout_to_dict(layout), indent=1) + "\n")


def load_layout(path, palette: Palette | None = None, strict: bool = True) -> Layout:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise LayoutError(f"{path}: not valid JSON ({exc})") from exc
    return layout_from_dict(data, palette, strict)


def palette_to_dict(palette: Palette) -> dict:
    return {
        "pixel_sigma": palette.pixel_sigma,
        "categories": [
            {
                "id": c.id,
                "name": c.name,
                "components": [{"color": list(m.color), "weight": m.weight} for m in c.components],
            }
            for c in palette.categories
        ],
    }


def palette_from_dict(data: dict) -> Palette:
    sigma = _field(data, "pixel_sigma", float, "")
    cats = []
    for i, raw in enumerate(_field(data, "categories", list, "")):
        comps = []
        for j, rc in enumerate(_field(raw, "components", list, f"categories[{i}].")):
            color = _field(rc, "color", list, f"categories[{i}].components[{j}].")
            if len(color) != 3:
                raise LayoutError(f"field 'categories[{i}].components[{j}].color' needs 3 values")
            weight = _field(rc, "weight", float, f"categories[{i}].components[{j}].")
            comps.append(Component(tuple(float(v) for v in color), float(weight)))
        cats.append(CategorySpec(_field(raw, "id", int, f"categories[{i}]."),
                                 _field(raw, "name", str, f"categories[{i}]."), tuple(comps)))
    return Palette(tuple(cats), float(sigma))


def save_palette(palette: Palette, path) -> None:
    Path(path).write_text(json.dumps(palette_to_dict(palette), indent=1) + "\n")


def load_palette(path) -> Palette:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise LayoutError(f"{path}: not valid JSON ({exc})") from exc
    return palette_from_dict(data)


def save_image(grid: np.ndarray, path) -> None:
    grid = np.asarray(grid, dtype=float)
    if grid.ndim != 3 or grid.shape[2] != 3 or 0 in grid.shape:
        raise LayoutError(f"expected a non-empty (H, W, 3) grid, got shape {grid.shape}")
    h, w, _ = grid.shape
    with open(path, "wb") as fh:
        fh.write(GRID_MAGIC + struct.pack("<II", h, w))
        fh.write(np.ascontiguousarray(grid, dtype="<f8").tobytes())


def load_image(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != GRID_MAGIC:
        raise OSError(f"{path}: not an RCG1 grid file")
    h, w = struct.unpack("<II", raw[4:12])
    expected = 12 + h * w * 3 * 8
    if len(raw) != expected:
        raise OSError(f"{path}: expected {expected} bytes, found {len(raw)} (truncated?)")
    return np.frombuffer(raw, dtype="<f8", offset=12).reshape(h, w, 3).astype(float)


def to_uint8(grid: np.ndarray) -> np.ndarray:
    return np.round(np.clip(grid, 0.0, 1.0) * 255.0).astype(np.uint8)


def export_ppm(grid: np.ndarray, path) -> None:
    pixels = to_uint8(grid)
    h, w, _ = pixels.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())
