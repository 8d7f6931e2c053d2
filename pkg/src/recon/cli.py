"""Batch command-line front end.

    recon <gen-dataset|sample|experiment> [--config PATH] [--set k=v]... [--jobs N] [--seed S] [--out DIR]

Every command is a pure function of the resolved config and the seed.  The
resolved config is written next to the outputs and its digest is stamped on
every CSV row.
"""
from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import experiments as ex
from .denoiser import DEFAULT_GAMMA, Mode
from .diffusion import ScheduleError, linear_schedule
from .metrics import append_metric_rows, format_value, layout_consistency
from .raca import EmbeddingError, build_embeddings
from .rgr import ConfigError, RectificationConfig, TargetMode
from .toyworld import (LayoutError, SceneSample, default_palette, load_image, load_layout,
                       load_palette, sample_scene, save_image, save_layout)

COMMANDS = ("gen-dataset", "sample", "experiment")
SAMPLE_MODES = ("baseline", "raca", "rgr", "recon", "sdedit", "masked")
TRACE_COLUMNS = ["run_id", "stage_index", "t", "mask_area_ratio", "fp_count", "fn_count",
                 "config_hash"]

DEFAULTS = {
    "palette": None,
    "dataset": None,
    "layouts": None,
    "n": 10,
    "width": 64,
    "height": 64,
    "min_categories": 2,
    "schedule": {"T": 1000, "beta_start": 1e-4, "beta_end": 0.02, "ddim_steps": 25},
    "mode": "recon",
    "conditioning": None,
    "rectification": {
        "stage_fractions": [0.75, 0.5, 0.25, 0.1],
        "lookahead_N": 5,
        "tau": 0.5,
        "target_mode": "LOOKAHEAD",
        "dilate_kernel": 7,
        "reuse_initial_noise": True,
        "min_area": 16,
    },
    "gamma": DEFAULT_GAMMA,
    "background_caption": True,
    "sdedit_strength": 0.5,
    "embedding": {"d": 16, "seed": 0},
    "repetitions": 10,
    "seed": None,
    "out": None,
}


class UsageError(Exception):
    """Bad command line or config; exits with status 2."""


# --- config --------------------------------------------------------------------

def _merge(base: dict, over: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in over.items():
        if key not in base:
            raise UsageError(f"unknown config field '{where}{key}'")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise UsageError(f"config field '{where}{key}' must be an object")
            out[key] = _merge(base[key], value, f"{where}{key}.")
        else:
            out[key] = value
    return out


def _parse_set(item: str) -> dict:
    if "=" not in item:
        raise UsageError(f"--set expects key=value, got {item!r}")
    key, raw = item.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node: dict = {}
    parts = key.strip().split(".")
    cur = node
    for p in parts[:-1]:
        cur = cur.setdefault(p, {})
    cur[parts[-1]] = value
    return node


def resolve_config(config_path: str | None, sets, seed, out) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if config_path is not None:
        path = Path(config_path)
        if not path.is_file():
            raise UsageError(f"config file not found: {config_path}")
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file {config_path} is not valid JSON: {exc}") from exc
        if not isinstance(raw, dict):
            raise UsageError("config file must hold a JSON object")
        cfg = _merge(cfg, raw)
    for item in sets or ():
        cfg = _merge(cfg, _parse_set(item))
    if seed is not None:
        cfg["seed"] = seed
    if out is not None:
        cfg["out"] = out
    if cfg["seed"] is None:
        raise UsageError("field 'seed' is required (--seed or config)")
    if not isinstance(cfg["seed"], int) or isinstance(cfg["seed"], bool) or cfg["seed"] < 0:
        raise UsageError("field 'seed' must be a non-negative integer")
    if cfg["out"] is None:
        raise UsageError("field 'out' is required (--out or config)")
    for key in ("palette", "dataset", "layouts"):
        if cfg[key] is not None and not Path(cfg[key]).exists():
            raise UsageError(f"field '{key}': path does not exist: {cfg[key]}")
    if not isinstance(cfg["n"], int) or cfg["n"] < 0:
        raise UsageError("field 'n' must be a non-negative integer")
    if cfg["mode"] not in SAMPLE_MODES:
        raise UsageError(f"field 'mode' must be one of {', '.join(SAMPLE_MODES)}")
    if cfg["conditioning"] not in (None, "GLOBAL", "RACA", "MASKED"):
        raise UsageError("field 'conditioning' must be null, GLOBAL, RACA or MASKED")
    return cfg


def _hashed(cfg: dict) -> dict:
    # the output location never changes artifact contents
    return {k: v for k, v in cfg.items() if k != "out"}


def config_hash(cfg: dict) -> str:
    canon = json.dumps(_hashed(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:16]


@dataclass(frozen=True)
class RunConfig:
    """Everything a worker needs, rebuilt from the resolved config dict."""

    raw: dict
    digest: str

    @classmethod
    def from_dict(cls, cfg: dict) -> "RunConfig":
        return cls(cfg, config_hash(cfg))

    def world(self) -> ex.World:
        palette = load_palette(self.raw["palette"]) if self.raw["palette"] else default_palette()
        s = self.raw["schedule"]
        schedule = linear_schedule(int(s["T"]), float(s["beta_start"]), float(s["beta_end"]),
                                   int(s["ddim_steps"]))
        e = self.raw["embedding"]
        emb = build_embeddings(palette, int(e["d"]), int(e["seed"]))
        return ex.World(palette, schedule, emb, float(self.raw["gamma"]),
                        bool(self.raw["background_caption"]))

    def rectification(self) -> RectificationConfig:
        r = self.raw["rectification"]
        return RectificationConfig(tuple(r["stage_fractions"]), int(r["lookahead_N"]),
                                   float(r["tau"]), TargetMode(r["target_mode"]),
                                   int(r["dilate_kernel"]), bool(r["reuse_initial_noise"]),
                                   int(r["min_area"]))


def validate(run: RunConfig) -> ex.World:
    """Build the world and rectification config once up front so errors surface as usage errors."""
    try:
        world = run.world()
        run.rectification()
    except (ConfigError, ScheduleError, LayoutError, EmbeddingError, KeyError, TypeError,
            ValueError) as exc:
        raise UsageError(f"invalid config: {exc}") from exc
    return world


# --- scenes --------------------------------------------------------------------

def _read_manifest(dataset: Path) -> list[dict]:
    path = dataset / "manifest.csv"
    if not path.is_file():
        raise UsageError(f"field 'dataset': no manifest.csv in {dataset}")
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def scene_ids(run: RunConfig) -> list[str]:
    cfg = run.raw
    if cfg["dataset"]:
        return [row["id"] for row in _read_manifest(Path(cfg["dataset"]))]
    if cfg["layouts"]:
        files = sorted(Path(cfg["layouts"]).glob("*.json"))
        if not files:
            raise UsageError(f"field 'layouts': no *.json files in {cfg['layouts']}")
        return [f.stem for f in files]
    return [f"{i:05d}" for i in range(cfg["n"])]


def load_scene(run: RunConfig, world: ex.World, index: int) -> tuple[str, SceneSample, int]:
    cfg = run.raw
    seed = cfg["seed"]
    if cfg["dataset"]:
        root = Path(cfg["dataset"])
        row = _read_manifest(root)[index]
        layout = load_layout(root / row["layout_file"], world.palette)
        drawn = sample_scene(layout, world.palette, int(row["seed"]))
        scene = SceneSample(layout, drawn.background_component, drawn.object_components,
                            load_image(root / row["image_file"]))
        return row["id"], scene, ex.derive_seed(seed, index, 2)
    if cfg["layouts"]:
        path = sorted(Path(cfg["layouts"]).glob("*.json"))[index]
        layout = load_layout(path, world.palette)
        scene = sample_scene(layout, world.palette, ex.derive_seed(seed, index, 1))
        return path.stem, scene, ex.derive_seed(seed, index, 2)
    scene, run_seed = ex.scene_at(index, seed, world.palette, cfg["width"], cfg["height"],
                                  cfg["min_categories"])
    return f"{index:05d}", scene, run_seed


def _pool_map(fn, run: RunConfig, n: int, jobs: int):
    """Ordered map over scene indices; results come back in index order."""
    if jobs <= 1 or n <= 1:
        return [fn(run, i) for i in range(n)]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, [run] * n, range(n)))


# --- gen-dataset ---------------------------------------------------------------

def _gen_one(run: RunConfig, i: int):
    world = run.world()
    scene, _ = ex.scene_at(i, run.raw["seed"], world.palette, run.raw["width"],
                           run.raw["height"], run.raw["min_categories"])
    return f"{i:05d}", scene, ex.derive_seed(run.raw["seed"], i, 1)


def cmd_gen_dataset(run: RunConfig, jobs: int = 1) -> None:
    validate(run)
    out = Path(run.raw["out"])
    (out / "layouts").mkdir(parents=True, exist_ok=True)
    (out / "images").mkdir(parents=True, exist_ok=True)
    rows = []
    for sid, scene, seed in _pool_map(_gen_one, run, run.raw["n"], jobs):
        save_layout(scene.layout, out / "layouts" / f"{sid}.json")
        save_image(scene.image, out / "images" / f"{sid}.rcg")
        rows.append([sid, f"layouts/{sid}.json", f"images/{sid}.rcg", seed])
    _write_csv(out / "manifest.csv", ["id", "layout_file", "image_file", "seed"], rows)
    _write_config(out, run)


# --- sample --------------------------------------------------------------------

def _sample_one(run: RunConfig, i: int):
    world = run.world()
    sid, scene, seed = load_scene(run, world, i)
    mode = run.raw["mode"]
    cfg = run.rectification()
    cond = run.raw["conditioning"]
    image, trace = ex.run_arm(scene, world, mode, cfg, seed, float(run.raw["sdedit_strength"]),
                              None if cond is None else Mode(cond))
    ok, n_fp, n_fn = layout_consistency(image, scene.layout, world.palette, cfg.tau, cfg.min_area)
    stages = [] if trace is None else [
        (s.stage_index, s.t, s.area_ratio, s.fp_count, s.fn_count) for s in trace.stages]
    return sid, image, stages, (ok, n_fp, n_fn)


def cmd_sample(run: RunConfig, jobs: int = 1) -> None:
    validate(run)
    out = Path(run.raw["out"])
    (out / "images").mkdir(parents=True, exist_ok=True)
    n = len(scene_ids(run))
    results = _pool_map(_sample_one, run, n, jobs)
    seed, digest = run.raw["seed"], run.digest
    trace_rows, metric_rows = [], []
    for sid, image, stages, (ok, n_fp, n_fn) in results:
        save_image(image, out / "images" / f"{sid}.rcg")
        for k, t, ratio, fp, fn in stages:
            trace_rows.append([sid, k, t, format_value(ratio), fp, fn, digest])
        metric_rows += [(f"{sid}/layout_consistent", ok, 1, seed, digest),
                        (f"{sid}/fp_count", n_fp, 1, seed, digest),
                        (f"{sid}/fn_count", n_fn, 1, seed, digest)]
    rate = float(np.mean([r[3][0] for r in results])) if results else 0.0
    metric_rows.append(("layout_consistency_rate", rate, n, seed, digest))
    _write_csv(out / "trace.csv", TRACE_COLUMNS, trace_rows)
    _fresh(out / "metrics.csv")
    append_metric_rows(out / "metrics.csv", metric_rows)
    _write_config(out, run)


# --- experiment ----------------------------------------------------------------

def cmd_experiment(run: RunConfig, name: str) -> ex.ExperimentResult:
    if name not in ex.EXPERIMENTS:
        raise UsageError(f"unknown experiment {name!r}; choose from {', '.join(ex.EXPERIMENTS)}")
    world = validate(run)
    cfg = run.rectification()
    seed = run.raw["seed"]
    if name == "downstream":
        result = ex.downstream(world, seed, int(run.raw["repetitions"]), config=cfg)
    else:
        scenes = [load_scene(run, world, i)[1:] for i in range(len(scene_ids(run)))]
        if not scenes:
            raise UsageError(f"experiment {name} needs at least one scene (field 'n')")
        result = ex.EXPERIMENTS[name](scenes, world, cfg)
    out = Path(run.raw["out"])
    out.mkdir(parents=True, exist_ok=True)
    columns: list[str] = []
    for row in result.rows:
        columns += [k for k in row if k not in columns]
    _write_csv(out / f"{name}.csv", columns + ["config_hash"],
               [[_cell(row.get(c, "")) for c in columns] + [run.digest] for row in result.rows])
    _fresh(out / "metrics.csv")
    append_metric_rows(out / "metrics.csv",
                       [(m, v, n, seed, run.digest) for m, v, n in result.metrics])
    lines = [f"experiment: {name}", f"seed: {seed}", f"config_hash: {run.digest}",
             f"criterion: {result.criterion}"]
    lines += [f"{m} = {format_value(v)} (n={n})" for m, v, n in result.metrics]
    lines.append(f"result: {'PASS' if result.passed else 'FAIL'}")
    (out / "report.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    _write_config(out, run)
    return result


# --- files ---------------------------------------------------------------------

def _cell(v):
    if isinstance(v, (float, np.floating, bool, np.bool_, int, np.integer)):
        return format_value(v)
    return v


def _fresh(path: Path) -> None:
    if path.exists():
        path.unlink()


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def _write_config(out: Path, run: RunConfig) -> None:
    text = json.dumps({"config": _hashed(run.raw), "config_hash": run.digest}, indent=1, sort_keys=True)
    (out / "config.json").write_text(text + "\n", encoding="utf-8")


# --- entry point ---------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="recon", description=__doc__.split("\n")[0])
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("experiment", nargs="?", help="experiment name (experiment command only)")
    parser.add_argument("--config", help="JSON config file")
    parser.add_argument("--set", action="append", default=[], metavar="K=V",
                        help="override a config field; dotted keys reach nested fields")
    parser.add_argument("--jobs", type=int, default=1)
    parser.add_argument("--seed", type=int)
    parser.add_argument("--out")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        if args.jobs < 1:
            raise UsageError("--jobs must be >= 1")
        if (args.command == "experiment") != (args.experiment is not None):
            raise UsageError("an experiment name is required for, and only for, 'experiment'")
        run = RunConfig.from_dict(resolve_config(args.config, args.set, args.seed, args.out))
        if args.command == "gen-dataset":
            cmd_gen_dataset(run, args.jobs)
        elif args.command == "sample":
            cmd_sample(run, args.jobs)
        else:
            result = cmd_experiment(run, args.experiment)
            print(f"{args.experiment}: {'PASS' if result.passed else 'FAIL'}")
    except UsageError as exc:
        print(f"recon: error: {exc}", file=sys.stderr)
        return 2
    except (LayoutError, ConfigError) as exc:
        print(f"recon: config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - any runtime failure maps to exit 1
        print(f"recon: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
