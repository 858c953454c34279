"""Command-line entry points.

Experiments are described by a TOML file::

    seeds = [0, 1, 2]

    [data.synthetic]        # or [data.csv] with path, mode, n_tasks / group_map, split_seed
    n_tasks = 5
    conflict = 60.0

    [model]
    hidden = [32]
    feature_dim = 16
    k = 1
    background = "high"     # low | medium | high
    dropout_rate = 0.0
    match_budget = false    # narrow hidden layers so k learners fit one reference learner

    [reg]                   # any RegConfig field
    lambda_sp = 100.0

    [train]                 # any TrainConfig field except seed
    epochs = 20

    [run]
    with_scratch = true

Unknown keys are errors. Outputs go under ``--out``, else ``$CAFLAB_OUT``,
else ``./caflab_out``.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .bounds import BoundDomainError, BoundInputs, bound_report, divergence_estimate
from .continual import GridSpec, ModelConfig, run_sequence, grid_search
from .metrics import (
    ModelObjective,
    ProbeConfig,
    diversity,
    discrimination_error,
    flatness_probe,
    robust_risk,
    write_metrics_csv,
)
from .model import DiversityBackground, learner_predictions, load_checkpoint, mcl_forward_with_cache, save_checkpoint, width_for_budget, with_hidden_width
from .numerics import LearnerSpec
from .optim import TrainConfig
from .regularize import RegConfig
from .tasks import SyntheticSpec, TaskSequence, export_sequence_csv, gen_synthetic_sequence, load_csv_dataset, split_dataset

SCHEMA_VERSION = "1.0"
ENV_OUT = "CAFLAB_OUT"
DEFAULT_OUT = "caflab_out"

EXIT_CONFIG = 2
EXIT_RUNTIME = 3


class ConfigError(ValueError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path
        self.message = message

    def __reduce__(self):
        return ConfigError, (self.path, self.message)


class StageError(RuntimeError):
    def __init__(self, stage: str, exc: Exception):
        super().__init__(f"stage {stage!r} failed: {exc}")
        self.stage = stage
        self.detail = str(exc)

    def __reduce__(self):
        return StageError, (self.stage, RuntimeError(self.detail))


# --- configuration --------------------------------------------------------------

_MODEL_KEYS = {"hidden", "feature_dim", "k", "background", "dropout_rate", "match_budget", "init_scheme", "relu_output"}
_CSV_KEYS = {"path", "mode", "n_tasks", "group_map", "split_seed"}
_TOP_KEYS = {"seeds", "data", "model", "reg", "train", "run", "output_dir"}
_RUN_KEYS = {"with_scratch"}


def _check_keys(table: dict, allowed: set[str], where: str) -> None:
    if not isinstance(table, dict):
        raise ConfigError(where, "expected a table")
    for key in table:
        if key not in allowed:
            raise ConfigError(f"{where}.{key}" if where else key, "unknown key")


def _build(cls, table: dict, where: str, exclude=()):
    allowed = {f.name for f in fields(cls)} - set(exclude)
    _check_keys(table, allowed, where)
    try:
        return cls(**table)
    except (TypeError, ValueError) as exc:
        raise ConfigError(where, str(exc)) from None


@dataclass
class ExperimentConfig:
    source: str
    synthetic: SyntheticSpec | None
    csv: dict[str, Any] | None
    model: dict[str, Any]
    reg: RegConfig
    train: TrainConfig
    seeds: list[int]
    with_scratch: bool = True
    output_dir: str | None = None
    raw: dict[str, Any] = field(default_factory=dict)

    def sequence(self, seed: int, base_dir: Path | None = None) -> TaskSequence:
        if self.source == "synthetic":
            return gen_synthetic_sequence(self.synthetic, seed)
        c = self.csv
        path = Path(c["path"])
        if not path.is_absolute() and base_dir is not None:
            path = base_dir / path
        ds = load_csv_dataset(path)
        gm = c.get("group_map")
        gm = None if gm is None else {int(k): int(v) for k, v in gm.items()}
        return split_dataset(ds, c.get("mode", "random"), c.get("n_tasks"), gm, c.get("split_seed", 0))

    def model_config(self, n_inputs: int) -> ModelConfig:
        m = self.model
        hidden = [int(h) for h in m.get("hidden", [32])]
        k = int(m.get("k", 1))
        spec = LearnerSpec(
            layer_widths=(n_inputs, *hidden, int(m.get("feature_dim", 16))),
            dropout_rate=float(m.get("dropout_rate", 0.0)),
            init_scheme=m.get("init_scheme", "glorot_uniform"),
            relu_output=bool(m.get("relu_output", True)),
        )
        if m.get("match_budget", False) and hidden:
            spec = with_hidden_width(spec, width_for_budget(k, spec))
        return ModelConfig(spec, k, DiversityBackground(m.get("background", "high")))


def parse_config(raw: dict[str, Any]) -> ExperimentConfig:
    _check_keys(raw, _TOP_KEYS, "")
    seeds = raw.get("seeds", [0])
    if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) for s in seeds):
        raise ConfigError("seeds", "must be a nonempty list of integers")
    data = raw.get("data")
    if data is None:
        raise ConfigError("data", "missing task source")
    _check_keys(data, {"synthetic", "csv"}, "data")
    if len(data) != 1:
        raise ConfigError("data", "exactly one of data.synthetic or data.csv is required")
    synthetic = csv_cfg = None
    if "synthetic" in data:
        synthetic = _build(SyntheticSpec, data["synthetic"], "data.synthetic")
        source = "synthetic"
    else:
        csv_cfg = data["csv"]
        _check_keys(csv_cfg, _CSV_KEYS, "data.csv")
        if "path" not in csv_cfg:
            raise ConfigError("data.csv.path", "required")
        source = "csv"
    model = raw.get("model", {})
    _check_keys(model, _MODEL_KEYS, "model")
    try:
        DiversityBackground(model.get("background", "high"))
    except ValueError:
        raise ConfigError("model.background", f"unknown background {model.get('background')!r}") from None
    if int(model.get("k", 1)) < 1:
        raise ConfigError("model.k", "must be >= 1")
    reg = _build(RegConfig, raw.get("reg", {}), "reg")
    train = _build(TrainConfig, raw.get("train", {}), "train", exclude=("seed",))
    run = raw.get("run", {})
    _check_keys(run, _RUN_KEYS, "run")
    return ExperimentConfig(source, synthetic, csv_cfg, model, reg, train, list(seeds),
                            bool(run.get("with_scratch", True)), raw.get("output_dir"), raw)


def load_toml(path: str | Path) -> dict[str, Any]:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(str(path), "config file not found")
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(str(path), f"invalid TOML: {exc}") from None


def load_config(path: str | Path) -> ExperimentConfig:
    return parse_config(load_toml(path))


# --- output helpers ---------------------------------------------------------------


def _out_dir(args, cfg_dir: str | None = None) -> Path:
    if args.out:
        return Path(args.out)
    if cfg_dir:
        return Path(cfg_dir)
    return Path(os.environ.get(ENV_OUT, DEFAULT_OUT))


def _prepare_out(path: Path, force: bool) -> None:
    if path.exists() and any(path.iterdir()) and not force:
        raise ConfigError(str(path), "output directory is not empty (use --force to overwrite)")
    path.mkdir(parents=True, exist_ok=True)


def _json_default(v):
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    if isinstance(v, np.ndarray):
        return v.tolist()
    raise TypeError(f"cannot serialise {type(v).__name__}")


def _clean(obj):
    """Replace NaN/inf by None so the JSON stays standard."""
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    return obj


def write_json(obj, path: Path) -> None:
    text = json.dumps(_clean(json.loads(json.dumps(obj, default=_json_default))), indent=2, sort_keys=True)
    path.write_text(text + "\n")


def _parse_seeds(text: str | None, default: list[int]) -> list[int]:
    if not text:
        return default
    try:
        seeds = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise ConfigError("--seeds", f"expected comma-separated integers, got {text!r}") from None
    if not seeds:
        raise ConfigError("--seeds", "no seeds given")
    return seeds


def _sem(values: list[float]) -> float | None:
    if len(values) < 2:
        return None
    return float(np.std(values, ddof=1) / math.sqrt(len(values)))


# --- run ----------------------------------------------------------------------------


def _run_one(cfg: ExperimentConfig, seed: int, out: Path, base_dir: Path) -> dict[str, Any]:
    try:
        seq = cfg.sequence(seed, base_dir)
    except Exception as exc:
        raise StageError("data", exc) from exc
    model_cfg = cfg.model_config(seq[0].train.dim)
    try:
        res = run_sequence(seq, cfg.reg, cfg.train, model_cfg, seed, cfg.with_scratch)
    except Exception as exc:
        raise StageError("train", exc) from exc
    seed_dir = out / f"seed{seed}"
    seed_dir.mkdir(parents=True, exist_ok=True)
    res.state.accuracy.write_csv(seed_dir / "accuracy.csv")
    metrics = {
        "schema_version": SCHEMA_VERSION,
        "seed": seed,
        **res.metrics,
        "accuracy": res.state.accuracy.to_dict(),
        "alpha_sum_max_error": float(max((abs(s - 1.0) for s in res.state.alpha_sums), default=0.0)),
    }
    write_json(metrics, seed_dir / "metrics.json")
    save_checkpoint(seed_dir / "checkpoint.caf", res.state.model, metadata={"config": cfg.raw, "run_seed": seed, "config_dir": str(base_dir)})
    return metrics


def _aggregate(per_seed: list[dict[str, Any]]) -> dict[str, Any]:
    out = {"schema_version": SCHEMA_VERSION, "seeds": [m["seed"] for m in per_seed], "metrics": {}}
    for key in ("aac", "fwt", "fwt_diagonal", "bwt", "cos", "euc"):
        vals = [m.get(key) for m in per_seed]
        if any(v is None for v in vals):
            out["metrics"][key] = {"mean": None, "sem": None, "n": len(vals)}
        else:
            out["metrics"][key] = {"mean": float(np.mean(vals)), "sem": _sem(vals), "n": len(vals)}
    return out


def cmd_run(args) -> int:
    cfg_path = Path(args.config)
    cfg = load_config(cfg_path)
    seeds = _parse_seeds(args.seeds, cfg.seeds)
    out = _out_dir(args, cfg.output_dir)
    _prepare_out(out, args.force)
    base = cfg_path.resolve().parent
    if args.jobs > 1 and len(seeds) > 1:
        with ProcessPoolExecutor(args.jobs) as pool:
            per_seed = list(pool.map(_run_one, [cfg] * len(seeds), seeds, [out] * len(seeds), [base] * len(seeds)))
    else:
        per_seed = [_run_one(cfg, s, out, base) for s in seeds]
    write_json(_aggregate(per_seed), out / "aggregate.json")
    print(f"wrote results for {len(seeds)} seed(s) to {out}")
    return 0


# --- grid ---------------------------------------------------------------------------


def load_grid(path: str | Path) -> GridSpec:
    raw = load_toml(path)
    _check_keys(raw, {"axes", "protocol", "cv_tasks"}, "")
    if "axes" not in raw:
        raise ConfigError("axes", "required")
    try:
        return GridSpec(raw["axes"], raw.get("protocol", "full"), raw.get("cv_tasks"))
    except ValueError as exc:
        raise ConfigError("axes", str(exc)) from None


def cmd_grid(args) -> int:
    if not args.grid:
        raise ConfigError("--grid", "required")
    cfg_path = Path(args.config)
    cfg = load_config(cfg_path)
    grid = load_grid(args.grid)
    seeds = _parse_seeds(args.seeds, cfg.seeds)
    out = _out_dir(args, cfg.output_dir)
    _prepare_out(out, args.force)
    base = cfg_path.resolve().parent
    try:
        seqs = {s: cfg.sequence(s, base) for s in seeds}
    except Exception as exc:
        raise StageError("data", exc) from exc
    model_cfg = cfg.model_config(seqs[seeds[0]][0].train.dim)
    try:
        cells = grid_search(seqs.__getitem__, grid, cfg.reg, cfg.train, model_cfg, seeds, cfg.with_scratch)
    except Exception as exc:
        raise StageError("grid", exc) from exc
    names = list(grid.axes)
    with open(out / "grid.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["rank", *names, "aac", "fwt", "bwt"])
        for rank, c in enumerate(cells):
            w.writerow([rank, *[c.params[n] for n in names], repr(c.aac),
                        "" if c.fwt is None else repr(c.fwt), "" if c.bwt is None else repr(c.bwt)])
    index = {json.dumps(cell, sort_keys=True): i for i, cell in enumerate(grid.cells())}
    for rank, c in enumerate(cells):
        cell_dir = out / "cells" / f"cell{index[json.dumps(c.params, sort_keys=True)]}"
        cell_dir.mkdir(parents=True, exist_ok=True)
        write_json({"schema_version": SCHEMA_VERSION, "params": c.params, "rank": rank,
                    "aac": c.aac, "fwt": c.fwt, "bwt": c.bwt, "seeds": seeds}, cell_dir / "metrics.json")
    print(f"ranked {len(cells)} cell(s) into {out / 'grid.csv'}")
    return 0


# --- probe --------------------------------------------------------------------------


def _load_probe_config(path: str | None) -> tuple[ProbeConfig, list[float]]:
    if path is None:
        return ProbeConfig(), []
    raw = load_toml(path)
    radii = raw.pop("robust_radii", [])
    return _build(ProbeConfig, raw, "probe"), [float(r) for r in radii]


def cmd_probe(args) -> int:
    if not args.checkpoint:
        raise ConfigError("--checkpoint", "required")
    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        raise ConfigError(str(ckpt), "checkpoint not found")
    probe, radii = _load_probe_config(args.config)
    out = _out_dir(args)
    _prepare_out(out, args.force)
    model, _, meta = load_checkpoint(ckpt)
    if "config" not in meta:
        raise ConfigError(str(ckpt), "checkpoint carries no experiment config")
    cfg = parse_config(meta["config"])
    try:
        seq = cfg.sequence(int(meta.get("run_seed", model.seed)), Path(meta.get("config_dir", ckpt.resolve().parent)))
    except Exception as exc:
        raise StageError("data", exc) from exc
    tasks = [t for t in seq if t.task_id in model.heads]
    try:
        objective = ModelObjective(model, [(t.task_id, *t.train.as_batch()) for t in tasks])
        theta = objective.theta0()
        flat = flatness_probe(objective, theta, probe)
        risks = [robust_risk(objective.value_and_grad, theta, ProbeConfig(**{**asdict(probe), "b": b})) for b in (radii or [probe.b])]
        feats = [mcl_forward_with_cache(model, t.test.features, t.task_id).fused for t in tasks]
        disc = discrimination_error(feats, probe.seed) if len(tasks) >= 2 else []
        div = None
        if model.k >= 2:
            cos, euc = zip(*(diversity(np.stack(learner_predictions(model, t.test.features, t.task_id))) for t in tasks))
            div = {"cos": float(np.mean(cos)), "euc": float(np.mean(euc))}
    except Exception as exc:
        raise StageError("probe", exc) from exc
    report = {
        "schema_version": SCHEMA_VERSION,
        "probe": asdict(probe),
        "perturbation": "uniform random unit directions in parameter space, scaled by radius",
        "training_loss": flat.base,
        "flatness": {"radii": flat.radii.tolist(), "mean": flat.mean_curve.tolist(), "curves": flat.curves.tolist()},
        "robust_risk": [{"b": r.b, "value": r.value, "base": r.base} for r in risks],
        "discrimination_bce": disc,
        "diversity": div,
    }
    write_json(report, out / "probe.json")
    rows = [("training_loss", None, flat.base)]
    rows += [(f"flatness_r{r:.6g}", None, v) for r, v in zip(flat.radii, flat.mean_curve)]
    rows += [(f"robust_risk_b{r.b:.6g}", None, r.value) for r in risks]
    rows += [("discrimination_bce", t.task_id, v) for t, v in zip(tasks, disc)]
    if div:
        rows += [("cos", None, div["cos"]), ("euc", None, div["euc"])]
    write_metrics_csv(rows, out / "probe.csv")
    print(f"wrote probe report to {out}")
    return 0


# --- bounds -------------------------------------------------------------------------


def _read_features(path: Path) -> np.ndarray:
    try:
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    except (OSError, ValueError) as exc:
        raise ConfigError(str(path), f"cannot read feature file: {exc}") from None
    return data


def cmd_bounds(args) -> int:
    if not args.config:
        raise ConfigError("--config", "required (bound inputs JSON)")
    path = Path(args.config)
    if not path.is_file():
        raise ConfigError(str(path), "bound inputs file not found")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(str(path), f"invalid JSON: {exc}") from None
    _check_keys(raw, {"inputs", "flatness_gap_old", "flatness_gap_new", "div_old_new", "div_new_old", "features", "seed"}, "")
    if "inputs" not in raw:
        raise ConfigError("inputs", "required")
    try:
        inputs = BoundInputs.from_dict(raw["inputs"])
    except (BoundDomainError, TypeError) as exc:
        raise ConfigError("inputs", str(exc)) from None
    base = path.resolve().parent
    div_on, div_no = raw.get("div_old_new"), raw.get("div_new_old")
    if "features" in raw:
        feats = raw["features"]
        _check_keys(feats, {"old", "new"}, "features")
        old = [_read_features(base / p) for p in feats["old"]]
        new = _read_features(base / feats["new"])
        seed = int(raw.get("seed", 0))
        try:
            div_on = [divergence_estimate(o, new, seed) for o in old]
            div_no = [divergence_estimate(new, o, seed) for o in old]
        except ValueError as exc:
            raise StageError("divergence", exc) from exc
    if div_on is None or div_no is None:
        raise ConfigError("div_old_new", "give divergences directly or a features table")
    out = _out_dir(args)
    _prepare_out(out, args.force)
    try:
        rep = bound_report(inputs, float(raw.get("flatness_gap_old", 0.0)), float(raw.get("flatness_gap_new", 0.0)), div_on, div_no)
    except (BoundDomainError, ValueError) as exc:
        raise StageError("bounds", exc) from exc
    write_json({"schema_version": SCHEMA_VERSION, "inputs": asdict(inputs), **rep.to_dict()}, out / "bounds.json")
    print(f"wrote bound report to {out / 'bounds.json'}")
    return 0


# --- gen-data -----------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    raw = load_toml(args.config)
    _check_keys(raw, {"seed", "synthetic"}, "")
    spec = _build(SyntheticSpec, raw.get("synthetic", {}), "synthetic")
    seed = _parse_seeds(args.seeds, [int(raw.get("seed", 0))])[0]
    out = _out_dir(args)
    _prepare_out(out, args.force)
    paths = export_sequence_csv(gen_synthetic_sequence(spec, seed), out)
    print(f"wrote {len(paths)} files to {out}")
    return 0


# --- entry point --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="caflab", description="Continual-learning experiments with active forgetting.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config_help):
        sp.add_argument("--config", required=config_help is not None, help=config_help)
        sp.add_argument("--out", help=f"output directory (default ${ENV_OUT} or ./{DEFAULT_OUT})")
        sp.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")
        sp.add_argument("--seeds", help="comma-separated seeds overriding the config")
        sp.add_argument("--jobs", type=int, default=1, help="worker processes for seeds")

    common(sub.add_parser("run", help="train a task sequence for each seed"), "experiment TOML")
    g = sub.add_parser("grid", help="rank hyperparameter cells by AAC")
    common(g, "experiment TOML")
    g.add_argument("--grid", help="grid TOML with an [axes] table")
    pr = sub.add_parser("probe", help="flatness, robust risk, discrimination and diversity of a checkpoint")
    common(pr, None)
    pr.add_argument("--checkpoint", help="checkpoint written by 'run'")
    common(sub.add_parser("bounds", help="bound terms from an inputs JSON"), "bound inputs JSON")
    common(sub.add_parser("gen-data", help="export a synthetic sequence as CSV"), "TOML with a [synthetic] table")
    return p


COMMANDS = {"run": cmd_run, "grid": cmd_grid, "probe": cmd_probe, "bounds": cmd_bounds, "gen-data": cmd_gen_data}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
