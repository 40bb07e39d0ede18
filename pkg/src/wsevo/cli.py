"""Command-line driver: ``wsevo prepare | evolve | finetune | evaluate | report``.

Options can also come from a TOML config file (``--config``), either as
top-level keys or under a ``[<command>]`` table; command-line flags win.
Keys use the long option name with underscores (``batch_size = 8``).
The seed falls back to the ``WSE_SEED`` environment variable, then 0.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
import zlib
from pathlib import Path

import numpy as np

from . import __version__
from .dataset import (
    DatasetError, DatasetManifest, SynthConfig, WsePoint, assign_wse, generate_synthetic, load_samples,
    save_samples, split_dataset, tile_rasters,
)
from .evolution import EvolutionConfig, ExperimentLog, evolve, train_genome
from .finetune import FinetuneConfig, finetune, write_history_csv
from .genome import GenomeError, load_checkpoint, save_checkpoint
from .metrics import mae, predict_wse, rmse
from .preprocess import DatasetStats, compute_dsm_sigma, prepare_samples
from .tensor import EngineError

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

DEFAULTS = {
    # prepare
    "synthetic": False, "n": 64, "tile": 32, "out": None, "noise_m": 0.05, "bias_m": 0.3,
    "ratio": "8:2", "sigma_scope": "train", "ortho": None, "dsm": None, "points": None,
    "origin": None, "px_size": None, "idw_power": 2.0, "tile_size_m": 10.0,
    # evolve
    "data": None, "population": 16, "iterations": 20, "epochs": 6, "batch_size": 8, "jobs": 1,
    # finetune
    "model": None, "generations": 20, "percentage": 0.1, "scale": 50.0, "ft_population": 8,
    # evaluate / report
    "split": "test", "run": None, "json": False,
}


METRICS_SCHEMA = {
    "type": "object",
    "required": ["split", "n", "rmse_m", "mae_m", "residuals"],
    "properties": {
        "split": {"enum": ["train", "test", "all"]},
        "n": {"type": "integer", "minimum": 0},
        "rmse_m": {"type": ["number", "null"], "minimum": 0},
        "mae_m": {"type": ["number", "null"], "minimum": 0},
        "residuals": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["sample_id", "pred_wse_m", "true_wse_m", "residual_m"],
                "properties": {
                    "sample_id": {"type": "integer"},
                    "pred_wse_m": {"type": "number"},
                    "true_wse_m": {"type": "number"},
                    "residual_m": {"type": "number"},
                },
            },
        },
    },
}


class UsageError(Exception):
    pass


def stream_seed(seed: int, name: str) -> int:
    """Independent 64-bit seed for one named component, derived from the master seed."""
    return int(np.random.SeedSequence([seed, zlib.crc32(name.encode())]).generate_state(1, np.uint64)[0])


# ---------------------------------------------------------------------------
# option resolution


def _load_config(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except OSError as exc:
        raise UsageError(f"cannot read config file: {exc}") from None
    except tomllib.TOMLDecodeError as exc:
        raise UsageError(f"malformed config file {path}: {exc}") from None


def _resolve(args, config: dict, command: str) -> dict:
    section = dict(config.get(command, {})) if isinstance(config.get(command), dict) else {}
    if command == "finetune" and "population" in section:
        section.setdefault("ft_population", section.pop("population"))
    flat = {k: v for k, v in config.items() if not isinstance(v, dict)}
    out = {}
    for key, value in vars(args).items():
        if value is not None:
            out[key] = value
        elif key in section:
            out[key] = section[key]
        elif key in flat:
            out[key] = flat[key]
        else:
            out[key] = DEFAULTS.get(key)
    if out.get("seed") is None:
        env = os.environ.get("WSE_SEED")
        try:
            out["seed"] = int(env) if env is not None else 0
        except ValueError:
            raise UsageError(f"WSE_SEED must be an integer, got {env!r}") from None
    if not 0 <= int(out["seed"]) < 2**63:
        raise UsageError("seed must be a non-negative 63-bit integer")
    return out


def _parse_ratio(text: str) -> tuple:
    try:
        a, b = (float(x) for x in str(text).split(":"))
    except ValueError:
        raise UsageError(f"ratio must look like 8:2, got {text!r}") from None
    if a <= 0 or b <= 0:
        raise UsageError("ratio parts must be positive")
    return (a, b)


# ---------------------------------------------------------------------------
# shared helpers


def _load_dataset(path):
    if path is None:
        raise UsageError("--data is required")
    samples, manifest = load_samples(path)
    if manifest is None:
        raise DatasetError(f"no manifest next to {path}")
    stats = DatasetStats(manifest.dsm_sigma)
    prepared = prepare_samples(samples, stats)
    return prepared, manifest


def _read_points(path) -> list:
    points = []
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                points.append(WsePoint(float(row["easting"]), float(row["northing"]), float(row["wse"])))
    except (KeyError, ValueError, TypeError) as exc:
        raise DatasetError(f"malformed WSE point file {path}: {exc}") from None
    if not points:
        raise DatasetError(f"no WSE points in {path}")
    return points


def _write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _finite_or_none(x):
    return x if x is not None and math.isfinite(x) else None


# ---------------------------------------------------------------------------
# commands


def cmd_prepare(o: dict) -> int:
    if o["n"] is not None and int(o["n"]) < 1 and o["synthetic"]:
        raise UsageError("--n must be at least 1")
    ratio = _parse_ratio(o["ratio"])
    out = Path(o["out"] or "dataset.wsed")
    seed = int(o["seed"])
    if o["synthetic"]:
        cfg = SynthConfig(n=int(o["n"]), tile_px=int(o["tile"]), tile_size_m=float(o["tile_size_m"]),
                          noise_m=float(o["noise_m"]), bias_m=float(o["bias_m"]))
        samples = generate_synthetic(cfg, stream_seed(seed, "dataset"))
        generator = {"kind": "synthetic", "n": cfg.n, "tile_px": cfg.tile_px, "noise_m": cfg.noise_m,
                     "bias_m": cfg.bias_m, "tile_size_m": cfg.tile_size_m}
    else:
        missing = [k for k in ("ortho", "dsm", "points", "origin", "px_size") if o[k] is None]
        if missing:
            raise UsageError("raster mode needs --" + ", --".join(m.replace("_", "-") for m in missing)
                             + " (or use --synthetic)")
        try:
            ortho = np.load(o["ortho"], allow_pickle=False)
            dsm = np.load(o["dsm"], allow_pickle=False)
        except (OSError, ValueError) as exc:
            raise DatasetError(f"cannot read raster: {exc}") from None
        samples = tile_rasters(ortho, dsm, tuple(o["origin"]), float(o["px_size"]), int(o["tile"]))
        assign_wse(samples, _read_points(o["points"]), float(o["idw_power"]))
        generator = {"kind": "rasters", "ortho": str(o["ortho"]), "dsm": str(o["dsm"]),
                     "points": str(o["points"]), "px_size_m": float(o["px_size"]), "tile_px": int(o["tile"]),
                     "idw_power": float(o["idw_power"])}
    train_ids, test_ids = split_dataset(samples, ratio, stream_seed(seed, "split"))
    scope = o["sigma_scope"]
    if scope not in ("train", "all"):
        raise UsageError("--sigma-scope must be 'train' or 'all'")
    sigma_from = train_ids if scope == "train" else range(len(samples))
    sigma = compute_dsm_sigma([samples[i].dsm for i in sigma_from])
    manifest = DatasetManifest(count=len(samples), train_ids=train_ids, test_ids=test_ids, dsm_sigma=sigma,
                               seed=seed, split_ratio=ratio, sigma_scope=scope, generator=generator)
    save_samples(out, samples, manifest)
    print(f"wrote {len(samples)} samples to {out} (train {len(train_ids)} / test {len(test_ids)}, "
          f"dsm_sigma {sigma:.4f} m)")
    return 0


def cmd_evolve(o: dict) -> int:
    data, manifest = _load_dataset(o["data"])
    train_set, val_set = data.subset(manifest.train_ids), data.subset(manifest.test_ids)
    try:
        cfg = EvolutionConfig(population_size=int(o["population"]), iterations=int(o["iterations"]),
                              epochs=int(o["epochs"]), batch_size=int(o["batch_size"]),
                              seed=stream_seed(int(o["seed"]), "evolution"), jobs=int(o["jobs"]))
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    out = Path(o["out"] or "run")
    out.mkdir(parents=True, exist_ok=True)

    def progress(s):
        print(f"iteration {s.iteration:3d}  best {s.best_rmse:.4f} m  mean {s.mean_rmse:.4f} m  "
              f"({s.n_evaluated} evaluated)", flush=True)

    with ExperimentLog(out / "log.ndjson") as log:
        pop = evolve(cfg, train_set, val_set, log=log, progress=progress)
    summary = {
        "config": {"population_size": cfg.population_size, "iterations": cfg.iterations, "epochs": cfg.epochs,
                   "batch_size": cfg.batch_size, "seed": int(o["seed"])},
        "iterations": [{"iteration": s.iteration, "best_rmse": _finite_or_none(s.best_rmse),
                        "mean_rmse": _finite_or_none(s.mean_rmse), "n_evaluated": s.n_evaluated,
                        "best_id": s.best_id} for s in pop.history],
    }
    best = pop.best
    if best.fitness.diverged:
        _write_json(out / "summary.json", summary)
        print("error: every genome diverged during training", file=sys.stderr)
        return 1
    summary["best"] = {"genome_id": best.genome.id, "val_rmse_m": best.fitness.val_error,
                       "n_params": best.fitness.n_params}
    _write_json(out / "summary.json", summary)
    _write_json(out / "best_genome.json", best.genome.to_dict())
    model, _ = train_genome(best.genome, train_set, cfg.budget())
    save_checkpoint(out / "best_model.npz", model, best.genome)
    print(f"best genome {best.genome.id}: validation RMSE {best.fitness.val_error:.4f} m -> {out}")
    return 0


def _load_model(path):
    if path is None:
        raise UsageError("--model is required")
    if not Path(path).exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return load_checkpoint(path)


def cmd_finetune(o: dict) -> int:
    model, genome = _load_model(o["model"])
    data, manifest = _load_dataset(o["data"])
    train_set, val_set = data.subset(manifest.train_ids), data.subset(manifest.test_ids)
    try:
        cfg = FinetuneConfig(generations=int(o["generations"]), percentage=float(o["percentage"]),
                             scale=float(o["scale"]), population_size=int(o["ft_population"]),
                             seed=stream_seed(int(o["seed"]), "finetune"))
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    before = rmse(predict_wse(model, val_set), val_set.wse)
    tuned, history = finetune(model, train_set, val_set, cfg)
    after = rmse(predict_wse(tuned, val_set), val_set.wse)
    out = Path(o["out"] or "finetune")
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out / "finetuned_model.npz", tuned, genome)
    write_history_csv(out / "history.csv", history)
    print(f"before RMSE: {before:.6f} m")
    print(f"after RMSE:  {after:.6f} m")
    return 0


def evaluation_report(model, data, ids, split: str) -> dict:
    subset = data.subset(ids)
    pred = predict_wse(model, subset)
    resid = pred - subset.wse
    return {
        "split": split,
        "n": int(len(subset)),
        "rmse_m": _finite_or_none(rmse(pred, subset.wse)) if len(subset) else None,
        "mae_m": _finite_or_none(mae(pred, subset.wse)) if len(subset) else None,
        "residuals": [{"sample_id": int(i), "pred_wse_m": float(p), "true_wse_m": float(t), "residual_m": float(r)}
                      for i, p, t, r in zip(subset.ids, pred, subset.wse, resid)],
    }


def cmd_evaluate(o: dict) -> int:
    model, _ = _load_model(o["model"])
    data, manifest = _load_dataset(o["data"])
    if data.input_shape != model.input_shape:
        raise EngineError(f"model expects input {model.input_shape}, dataset provides {data.input_shape}")
    ids = {"train": manifest.train_ids, "test": manifest.test_ids, "all": list(range(len(data)))}.get(o["split"])
    if ids is None:
        raise UsageError("--split must be train, test or all")
    report = evaluation_report(model, data, ids, o["split"])
    if o["out"]:
        _write_json(o["out"], report)
    else:
        print(json.dumps(report, indent=2, sort_keys=True))
    return 0


def cmd_report(o: dict) -> int:
    run = Path(o["run"] or "run")
    summary_path = run / "summary.json"
    if not summary_path.exists():
        raise FileNotFoundError(f"no summary.json in {run}")
    summary = json.loads(summary_path.read_text())
    history = []
    hist_path = run / "history.csv"
    if hist_path.exists():
        with open(hist_path, newline="") as fh:
            history = [{"generation": int(r["generation"]), "best_rmse": float(r["best_rmse"]),
                        "mean_rmse": float(r["mean_rmse"])} for r in csv.DictReader(fh)]
    if o["json"]:
        print(json.dumps({"summary": summary, "finetune_history": history}, indent=2, sort_keys=True))
        return 0
    print(f"{'iter':>4}  {'best RMSE (m)':>14}  {'mean RMSE (m)':>14}  {'evaluated':>9}")
    for row in summary["iterations"]:
        best = "diverged" if row["best_rmse"] is None else f"{row['best_rmse']:.4f}"
        mean = "n/a" if row["mean_rmse"] is None else f"{row['mean_rmse']:.4f}"
        print(f"{row['iteration']:>4}  {best:>14}  {mean:>14}  {row['n_evaluated']:>9}")
    if "best" in summary:
        b = summary["best"]
        print(f"best genome {b['genome_id']}: {b['val_rmse_m']:.4f} m, {b['n_params']} parameters")
    for h in history:
        print(f"finetune gen {h['generation']:>3}: best {h['best_rmse']:.4f} m")
    return 0


COMMANDS = {"prepare": cmd_prepare, "evolve": cmd_evolve, "finetune": cmd_finetune,
            "evaluate": cmd_evaluate, "report": cmd_report}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="wsevo", description="Neuroevolution of river WSE regressors.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("--config", help="TOML config file; flags override its values")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--seed", type=int, help="master seed (default: $WSE_SEED or 0)")
        sp.add_argument("--out", help="output path")

    sp = sub.add_parser("prepare", help="build a dataset container and manifest")
    common(sp)
    sp.add_argument("--synthetic", action="store_true", default=None, help="generate synthetic river tiles")
    sp.add_argument("--n", type=int, help="number of synthetic tiles (default 64)")
    sp.add_argument("--tile", type=int, help="tile size in pixels (default 32)")
    sp.add_argument("--tile-size-m", type=float, help="synthetic tile side in metres (default 10)")
    sp.add_argument("--noise-m", type=float, help="synthetic water-surface noise amplitude (m)")
    sp.add_argument("--bias-m", type=float, help="synthetic max below-surface bias (m)")
    sp.add_argument("--ratio", help="train:test ratio (default 8:2)")
    sp.add_argument("--sigma-scope", choices=("train", "all"), help="samples used for dsm_sigma")
    sp.add_argument("--ortho", help="orthophoto raster (.npy, 3xHxW in [0, 1])")
    sp.add_argument("--dsm", help="DSM raster (.npy, HxW, m MSL)")
    sp.add_argument("--points", help="CSV of WSE points with columns easting,northing,wse")
    sp.add_argument("--origin", type=float, nargs=2, metavar=("EASTING", "NORTHING"),
                    help="upper-left corner of the rasters")
    sp.add_argument("--px-size", type=float, help="pixel size in metres")
    sp.add_argument("--idw-power", type=float, help="IDW distance exponent (default 2)")

    sp = sub.add_parser("evolve", help="run the architecture search")
    common(sp)
    sp.add_argument("--data", help="dataset container")
    sp.add_argument("--population", type=int, help="population size (default 16)")
    sp.add_argument("--iterations", type=int, help="iterations (default 20, max 40)")
    sp.add_argument("--epochs", type=int, help="training epochs per fitness evaluation (default 6)")
    sp.add_argument("--batch-size", type=int, help="mini-batch size (default 8)")
    sp.add_argument("--jobs", type=int, help="parallel fitness evaluations (default 1)")

    sp = sub.add_parser("finetune", help="perturbation fine-tuning of a checkpoint")
    common(sp)
    sp.add_argument("--model", help="checkpoint (.npz) written by evolve or finetune")
    sp.add_argument("--data", help="dataset container")
    sp.add_argument("--generations", type=int, help="generations (default 20)")
    sp.add_argument("--percentage", type=float, help="share of each tensor perturbed (default 0.1)")
    sp.add_argument("--scale", type=float, help="perturbation step is max|tensor| / scale (default 50)")
    sp.add_argument("--population", dest="ft_population", type=int, help="population size (default 8)")

    sp = sub.add_parser("evaluate", help="RMSE / MAE / residuals of a checkpoint")
    common(sp)
    sp.add_argument("--model", help="checkpoint (.npz)")
    sp.add_argument("--data", help="dataset container")
    sp.add_argument("--split", choices=("train", "test", "all"), help="split to score (default test)")

    sp = sub.add_parser("report", help="summarise an evolve / finetune output directory")
    common(sp)
    sp.add_argument("--run", help="directory containing summary.json")
    sp.add_argument("--json", action="store_true", default=None, help="machine-readable output")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    command = args.command
    try:
        config = _load_config(args.config)
        del args.config, args.command
        opts = _resolve(args, config, command)
        return COMMANDS[command](opts)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"wsevo {command}: error: {exc}", file=sys.stderr)
        return 2
    except (DatasetError, EngineError, GenomeError, OSError, ValueError) as exc:
        print(f"wsevo {command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
