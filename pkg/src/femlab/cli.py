"""Command-line entry point: ``femlab <experiment> [options]``.

Configuration is resolved as built-in defaults < YAML file (``--config``) <
command-line flags.  Every run writes report files plus a ``manifest.json``
echoing the resolved configuration.
"""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import yaml

from . import __version__
from . import benchgen as bg
from . import eval as ev
from . import fem_model as fm

log = logging.getLogger("femlab")

EXPERIMENTS = ("train", "sample", "bridge", "exp1", "exp2", "exp3", "kx-sweep", "ci-violation",
               "highcard", "lowrank", "continuous-query", "uci")

# config file sections -> ExperimentConfig fields they may set
SECTIONS = {
    "spec": ("D", "K_X", "mode_scale", "sigma_y", "n_train"),
    "train": ("lambda_valley", "hidden", "lr", "batch_size", "epochs", "max_steps", "mdn_components"),
    "eval": ("n_queries", "grid_D", "grid_mode_scales", "grid_seeds", "kx_values", "n_leaves", "leaf_dim",
             "delta", "n_samples", "hist_bins", "langevin_steps", "langevin_step_scale", "highcard_M",
             "highcard_K", "lowrank_ambient", "lowrank_rank"),
    "data": ("data_path", "label_column"),
}
TOP_LEVEL = ("experiment", "seeds", "output_dir", "workers", "cache_dir", "model", "class_index", "sections")
# runners whose outer loop is over cfg.seeds can be split per seed
SEED_SPLIT = {"exp1", "exp2", "ci-violation", "continuous-query", "highcard", "lowrank"}


class ConfigError(ValueError):
    pass


@dataclasses.dataclass
class RunConfig:
    experiment: str
    params: ev.ExperimentConfig
    output_dir: Path
    workers: int = 1
    model: str | None = None          # checkpoint for ``sample``
    class_index: int = 1              # class for ``sample`` / ``bridge``

    def to_dict(self) -> dict:
        return {"experiment": self.experiment, "output_dir": str(self.output_dir), "workers": self.workers,
                "model": self.model, "class_index": self.class_index, "params": self.params.to_dict()}


_FIELD_TYPES = {f.name: f for f in dataclasses.fields(ev.ExperimentConfig)}


def _coerce(key: str, value: Any, path: str) -> Any:
    default = getattr(ev.ExperimentConfig(), key)
    try:
        if isinstance(default, tuple):
            if not isinstance(value, (list, tuple)):
                value = [value]
            elem = type(default[0]) if default else float
            return tuple(elem(v) for v in value)
        if value is None:
            return None
        if isinstance(default, bool):
            return bool(value)
        if isinstance(default, int) and not isinstance(default, bool):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError("expected an integer")
            return int(value)
        if isinstance(default, float):
            return float(value)
        if key in ("lambda_valley", "delta"):
            return float(value)
        if key == "max_steps":
            return int(value)
        return str(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: invalid value {value!r} ({exc})") from None


def _flatten(raw: dict) -> dict:
    """Turn a (possibly sectioned) mapping into flat ExperimentConfig / RunConfig keys."""
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")
    flat = {}
    for key, value in raw.items():
        if key in SECTIONS:
            if value is None:
                continue
            if not isinstance(value, dict):
                raise ConfigError(f"{key}: expected a mapping")
            for sub, v in value.items():
                if sub not in SECTIONS[key]:
                    raise ConfigError(f"{key}.{sub}: unknown key")
                flat[sub] = (f"{key}.{sub}", v)
        elif key in TOP_LEVEL:
            flat[key] = (key, value)
        else:
            raise ConfigError(f"{key}: unknown key")
    return flat


def load_config_file(path: str | Path) -> dict:
    try:
        with open(path) as fh:
            raw = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"malformed config {path}: {exc}") from None
    return {} if raw is None else raw


def parse_config(experiment: str, raw: dict | None = None, overrides: dict | None = None) -> RunConfig:
    """Resolve defaults, a raw config mapping and flat flag overrides into a RunConfig."""
    if experiment not in EXPERIMENTS:
        raise ConfigError(f"experiment: unknown id {experiment!r}")
    flat = _flatten(raw or {})
    for k, v in (overrides or {}).items():
        flat[k] = (f"--{k}", v)
    if "experiment" in flat and flat["experiment"][1] != experiment:
        raise ConfigError(f"experiment: config says {flat['experiment'][1]!r}, command line says {experiment!r}")
    params = {}
    for key, (path, value) in flat.items():
        if key in _FIELD_TYPES:
            params[key] = _coerce(key, value, path)
    if experiment == "uci":
        params.setdefault("lambda_valley", 0.0)
    try:
        cfg = ev.ExperimentConfig(**params)
        if cfg.lambda_valley is None and experiment in ("exp1", "train", "bridge"):
            fm.lambda_lookup(cfg.D)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    out = Path(flat.get("output_dir", (None, f"runs/{experiment}"))[1])
    workers = flat.get("workers", (None, None))[1]
    workers = os.cpu_count() or 1 if workers is None else int(workers)
    if workers < 1:
        raise ConfigError("workers: must be >= 1")
    model = flat.get("model", (None, None))[1]
    if experiment == "sample" and not model:
        raise ConfigError("model: the sample experiment needs a checkpoint path")
    return RunConfig(experiment, cfg, out, workers, model, int(flat.get("class_index", (None, 1))[1]))


# ---------------------------------------------------------------------------
# dispatch

def code_version() -> str:
    h = hashlib.sha256()
    for p in sorted(Path(__file__).parent.glob("*.py")):
        h.update(p.name.encode() + p.read_bytes())
    return f"{__version__}+{h.hexdigest()[:12]}"


def _run_seed(args: tuple[str, ev.ExperimentConfig]) -> ev.ExperimentReport:
    name, cfg = args
    return ev.RUNNERS[name](cfg)


def _merge(name: str, parts: Sequence[ev.ExperimentReport]) -> ev.ExperimentReport:
    rep = ev.ExperimentReport(name)
    for p in parts:
        rep.records += p.records
        rep.timings += p.timings
        rep.notes.update(p.notes)
    return rep


def run_report(rc: RunConfig) -> tuple[ev.ExperimentReport, list[str]]:
    """Run an eval-module experiment; per-seed failures are collected, not raised."""
    name = rc.experiment
    cfg = rc.params
    runner = ev.RUNNERS[name]
    if name not in SEED_SPLIT or len(cfg.seeds) == 1:
        return runner(cfg), []
    jobs = [(name, dataclasses.replace(cfg, seeds=(s,))) for s in cfg.seeds]
    parts, failures = [], []
    if rc.workers > 1:
        with ProcessPoolExecutor(max_workers=min(rc.workers, len(jobs))) as pool:
            futures = [pool.submit(_run_seed, j) for j in jobs]
            for (_, c), fut in zip(jobs, futures):
                try:
                    parts.append(fut.result())
                except (fm.TrainingAborted, fm.SamplingDiverged) as exc:
                    failures.append(f"seed {c.seeds[0]}: {exc}")
    else:
        for j in jobs:
            try:
                parts.append(_run_seed(j))
            except (fm.TrainingAborted, fm.SamplingDiverged) as exc:
                failures.append(f"seed {j[1].seeds[0]}: {exc}")
    return _merge(name, parts), failures


def _synthetic_data(cfg: ev.ExperimentConfig, seed: int):
    if cfg.data_path:
        split = bg.load_tabular(cfg.data_path, cfg.label_column, seed=42)
        return split.y_train, split.X_train, len(split.classes), None
    data, truth = bg.gen_anticorr_bimodal(cfg.spec(seed))
    return data.labels, data.y, cfg.K_X, truth


def _write_manifest(rc: RunConfig, artifacts: list[str], failures: list[str]) -> Path:
    manifest = {
        "config": rc.to_dict(),
        "seeds": list(rc.params.seeds),
        "code_version": code_version(),
        "reduced_budget": rc.params.max_steps is not None,
        "artifacts": sorted(artifacts),
        "aborted": failures,
    }
    path = rc.output_dir / "manifest.json"
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def dispatch(rc: RunConfig) -> int:
    rc.output_dir.mkdir(parents=True, exist_ok=True)
    cfg = rc.params
    artifacts: list[str] = []
    failures: list[str] = []
    name = rc.experiment
    if name == "train":
        for seed in cfg.seeds:
            k, y, K, _ = _synthetic_data(cfg, seed)
            lam = cfg.lambda_valley if cfg.data_path or cfg.lambda_valley is not None else fm.lambda_lookup(cfg.D)
            try:
                model = ev.fit_energy_model(k, y, K, cfg.mode_scale, lam, seed, cfg)
            except fm.TrainingAborted as exc:
                failures.append(f"seed {seed}: {exc}")
                continue
            path = rc.output_dir / f"model_seed{seed}.npz"
            model.save(path)
            artifacts.append(path.name)
    elif name == "sample":
        model = fm.EnergyModel.load(rc.model)
        for seed in cfg.seeds:
            try:
                s = fm.sample_langevin(model, rc.class_index, cfg.n_samples, cfg.langevin_steps,
                                       cfg.langevin_step_scale, seed)
            except fm.SamplingDiverged as exc:
                failures.append(f"seed {seed}: {exc}")
                continue
            path = rc.output_dir / f"samples_class{rc.class_index}_seed{seed}.csv"
            np.savetxt(path, s, delimiter=",", header=",".join(f"y{j}" for j in range(s.shape[1])),
                       comments="")
            artifacts.append(path.name)
    elif name == "bridge":
        for seed in cfg.seeds:
            data, truth = bg.gen_anticorr_bimodal(cfg.spec(seed))
            m_a, m_b = truth.classes[rc.class_index].means[:2]
            for label, lam in (("cebm", 0.0), ("fem", cfg.fem_lambda(cfg.D))):
                try:
                    model = ev.fit_energy_model(data.labels, data.y, cfg.K_X, cfg.mode_scale, lam, seed, cfg)
                except fm.TrainingAborted as exc:
                    failures.append(f"seed {seed} {label}: {exc}")
                    continue
                sweep = ev.bridge_sweep(model.energies, truth, m_a, m_b, 101, rc.class_index)
                path = rc.output_dir / f"bridge_{label}_seed{seed}.csv"
                sweep.write(path)
                artifacts.append(path.name)
    else:
        try:
            rep, failures = run_report(rc)
        except (fm.TrainingAborted, fm.SamplingDiverged) as exc:
            rep, failures = None, [str(exc)]
        if rep is not None and rep.records:
            artifacts += [p.name for p in rep.write(rc.output_dir)]
    _write_manifest(rc, artifacts, failures)
    if failures:
        print(f"{name}: {len(failures)} cell(s) aborted:", file=sys.stderr)
        for f in failures:
            print(f"  {f}", file=sys.stderr)
        return 1
    print(f"{name}: wrote {len(artifacts)} artifact(s) to {rc.output_dir}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing

def _kv(text: str) -> tuple[str, Any]:
    if "=" not in text:
        raise argparse.ArgumentTypeError(f"expected KEY=VALUE, got {text!r}")
    k, v = text.split("=", 1)
    return k.strip(), yaml.safe_load(v)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="femlab", description="Energy-model inference laboratory")
    p.add_argument("--version", action="version", version=f"femlab {__version__}")
    p.add_argument("experiment", choices=EXPERIMENTS, help="experiment id")
    p.add_argument("-c", "--config", help="YAML config file")
    p.add_argument("-o", "--out", dest="output_dir", help="output directory (default runs/<experiment>)")
    p.add_argument("--seeds", type=int, nargs="+", help="seed list")
    p.add_argument("--lambda", dest="lambda_valley", type=float,
                   help="valley weight; overrides the per-dimension lookup")
    p.add_argument("--max-steps", type=int, dest="max_steps", help="optimizer step cap per model")
    p.add_argument("--epochs", type=int, help="epoch count")
    p.add_argument("--data", dest="data_path", help="delimited dataset path")
    p.add_argument("--label-column", dest="label_column")
    p.add_argument("--model", help="checkpoint for the sample experiment")
    p.add_argument("--class", dest="class_index", type=int, help="class index for sample/bridge")
    p.add_argument("--cache-dir", dest="cache_dir", help="reuse trained models across runs")
    p.add_argument("--workers", type=int, help="parallel seeds (default: available cores)")
    p.add_argument("--set", dest="sets", type=_kv, action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key, e.g. --set train.lr=3e-4")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _sets_to_raw(sets: Sequence[tuple[str, Any]]) -> dict:
    raw: dict = {}
    for key, value in sets:
        if "." in key:
            sec, sub = key.split(".", 1)
            raw.setdefault(sec, {})
            if not isinstance(raw[sec], dict):
                raise ConfigError(f"{sec}: expected a mapping")
            raw[sec][sub] = value
        else:
            raw[key] = value
    return raw


def _deep_merge(a: dict, b: dict) -> dict:
    out = dict(a)
    for k, v in b.items():
        out[k] = _deep_merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        raw = load_config_file(args.config) if args.config else {}
        raw = _deep_merge(raw, _sets_to_raw(args.sets))
        overrides = {k: getattr(args, k) for k in ("output_dir", "seeds", "lambda_valley", "max_steps", "epochs",
                                                   "data_path", "label_column", "model", "class_index",
                                                   "cache_dir", "workers")
                     if getattr(args, k) is not None}
        rc = parse_config(args.experiment, raw, overrides)
        return dispatch(rc)
    except ConfigError as exc:
        print(f"femlab: config error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError) as exc:
        print(f"femlab: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
