"""Compare the compiled and pure-Python perception kernels on toy-world workloads."""
import argparse
import timeit

import numpy as np

from recon import _kernels_py
from recon.experiments import make_scenes
from recon.perception import classify_pixels
from recon.toyworld import default_palette

try:
    from recon import _kernels as _kernels_cy
except ImportError:
    _kernels_cy = None


def workloads(n_scenes: int, seed: int):
    pal = default_palette()
    classes = [classify_pixels(sc.image, pal)[0].astype(np.int32)
               for sc, _ in make_scenes(n_scenes, seed, pal)]
    rng = np.random.default_rng(seed)
    masks = []
    for _ in range(n_scenes):
        owner = rng.integers(0, 6, size=(64, 64))
        keep = rng.random((64, 64)) < 0.02
        masks.append(np.stack([(owner == i) & keep for i in range(6)]).view(np.uint8))
    return classes, masks


def bench(mod, classes, masks, repeat: int) -> dict:
    def label():
        for c in classes:
            mod.label_components(c)

    def stats():
        for c in classes:
            mod.component_stats(*mod.label_components(c))

    def owner():
        for m in masks:
            mod.chebyshev_owner(m, 3)

    return {name: min(timeit.repeat(fn, number=1, repeat=repeat)) / len(classes)
            for name, fn in (("label_components", label), ("label+stats", stats),
                             ("chebyshev_owner r=3", owner))}


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--scenes", type=int, default=50)
    parser.add_argument("--repeat", type=int, default=5)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()
    classes, masks = workloads(args.scenes, args.seed)
    py = bench(_kernels_py, classes, masks, args.repeat)
    cy = bench(_kernels_cy, classes, masks, args.repeat) if _kernels_cy else None
    print(f"{'kernel':<22}{'python (us)':>14}{'cython (us)':>14}{'speedup':>10}")
    for name, t_py in py.items():
        if cy:
            print(f"{name:<22}{t_py * 1e6:>14.1f}{cy[name] * 1e6:>14.1f}{t_py / cy[name]:>9.1f}x")
        else:
            print(f"{name:<22}{t_py * 1e6:>14.1f}{'n/a':>14}{'':>10}")


if __name__ == "__main__":
    main()
