"""Metrics, the mode-bridge diagnostic and the experiment runners.

Every method is wrapped as a *predictor*: a callable taking evidence as a
list of ``(leaf_id, y)`` pairs (``y`` of shape (n, d)) and returning an
(n, K) posterior.  Runners train/fit methods per seed, evaluate them against
the exact Bayes oracle and collect records in an :class:`ExperimentReport`.
"""
from __future__ import annotations

import csv
import hashlib
import itertools
import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.special import logsumexp
from scipy.stats import norm

from . import baselines as bl
from . import benchgen as bg
from . import fem_model as fm
from .theory import measured_gap

log = logging.getLogger(__name__)

PROB_FLOOR = fm.PROB_FLOOR
Evidence = Sequence[tuple[int, np.ndarray]]
Predictor = Callable[[Evidence], np.ndarray]


# ---------------------------------------------------------------------------
# metrics

def kl_divergence(truth, pred, floor: float = PROB_FLOOR):
    """KL(truth || pred) with ``pred`` floored at ``floor`` and 0 log 0 = 0.

    Accepts vectors or (n, K) batches (one KL per row).
    """
    p = np.asarray(truth, dtype=float)
    q = np.asarray(pred, dtype=float)
    if p.shape != q.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {q.shape}")
    q = np.maximum(q, floor)
    safe_p = np.where(p > 0, p, 1.0)
    terms = np.where(p > 0, p * (np.log(safe_p) - np.log(q)), 0.0)
    out = np.maximum(terms.sum(axis=-1), 0.0)
    return float(out) if out.ndim == 0 else out


def nll_accuracy(probs: np.ndarray, labels: np.ndarray, floor: float = PROB_FLOOR) -> tuple[float, float]:
    """Mean -log P(true class) with a floor, and top-1 accuracy."""
    probs = np.atleast_2d(probs)
    labels = np.asarray(labels, dtype=int).reshape(-1)
    if len(labels) == 0:
        raise ValueError("empty test set")
    p_true = np.maximum(probs[np.arange(len(labels)), labels], floor)
    return float(-np.mean(np.log(p_true))), float(np.mean(probs.argmax(axis=1) == labels))


def nll_accuracy_eval(predict: Predictor, X: np.ndarray, labels: np.ndarray) -> tuple[float, float]:
    return nll_accuracy(predict([(0, np.atleast_2d(X))]), labels)


def draw_queries(truth: bg.GroundTruth, n: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """In-data queries from the joint mixture (class ~ prior, y ~ class conditional)."""
    return truth.sample(n, np.random.default_rng([seed, 1]))


def sampled_query_eval(predict: Predictor, truth: bg.GroundTruth, n_queries: int = 200,
                       seed: int = 0) -> float:
    _, y = draw_queries(truth, n_queries, seed)
    return float(np.mean(kl_divergence(bg.true_posterior(truth, y), predict([(0, y)]))))


def midpoint_kl(predict: Predictor, K: int, D: int, n_leaves: int = 1) -> float:
    """KL at the all-zero query, where the symmetric layouts have uniform truth."""
    ev = [(i, np.zeros((1, D))) for i in range(n_leaves)]
    return float(kl_divergence(np.full(K, 1.0 / K), predict(ev)[0]))


# ---------------------------------------------------------------------------
# predictors

def fem_predictor(model: fm.EnergyModel, prior: np.ndarray | None = None) -> Predictor:
    def predict(evidence: Evidence) -> np.ndarray:
        return np.atleast_2d(fm.posterior(model, [(i, np.atleast_2d(y)) for i, y in evidence], prior))
    return predict


def baseline_predictor(methods, prior: np.ndarray | None = None) -> Predictor:
    def predict(evidence: Evidence) -> np.ndarray:
        return np.atleast_2d(bl.baseline_posterior(methods, [(i, np.atleast_2d(y)) for i, y in evidence], prior))
    return predict


def pattern_predictor(classifiers: Mapping[tuple[int, ...], bl.PatternClassifier]) -> Predictor:
    def predict(evidence: Evidence) -> np.ndarray:
        ev = {i: np.atleast_2d(y) for i, y in evidence}
        return np.atleast_2d(classifiers[tuple(sorted(ev))].posterior(ev))
    return predict


def oracle_predictor(truth: bg.GroundTruth) -> Predictor:
    def predict(evidence: Evidence) -> np.ndarray:
        return np.atleast_2d(bg.true_posterior_multi(truth, [np.atleast_2d(y) for _, y in evidence]))
    return predict


# ---------------------------------------------------------------------------
# mode bridge

@dataclass
class BridgeSweep:
    t: np.ndarray
    points: np.ndarray
    energies: np.ndarray       # (n, K); -log density for density baselines
    posteriors: np.ndarray
    truth: np.ndarray
    bimodal_class: int
    delta_bridge: float

    def rows(self) -> list[list[float]]:
        return [[float(t), *map(float, e), *map(float, p), *map(float, q)]
                for t, e, p, q in zip(self.t, self.energies, self.posteriors, self.truth)]

    def header(self) -> list[str]:
        K = self.energies.shape[1]
        return (["t"] + [f"E_{k}" for k in range(K)] + [f"p_{k}" for k in range(K)]
                + [f"truth_{k}" for k in range(K)])

    def write(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.header())
            w.writerows(self.rows())


def bridge_sweep(energy_fn: Callable[[np.ndarray], np.ndarray], truth: bg.GroundTruth,
                 m_a: np.ndarray, m_b: np.ndarray, n_points: int = 101,
                 bimodal_class: int = 1, prior: np.ndarray | None = None) -> BridgeSweep:
    """Energies and posteriors along ``y(t) = (1 - t) m_a + t m_b``.

    ``energy_fn`` maps (n, D) points to (n, K) energies.  ``delta_bridge`` is
    the bimodal class's energy at the midpoint minus its mean endpoint energy.
    """
    if n_points < 3:
        raise ValueError("need at least 3 points")
    m_a = np.asarray(m_a, dtype=float)
    m_b = np.asarray(m_b, dtype=float)
    t = np.linspace(0.0, 1.0, n_points)
    pts = (1.0 - t)[:, None] * m_a + t[:, None] * m_b
    pts[0], pts[-1] = m_a, m_b
    E = np.asarray(energy_fn(pts), dtype=float)
    K = E.shape[1]
    prior = np.full(K, 1.0 / K) if prior is None else prior
    post = fm.posterior_from_energies([E], prior)
    mid = energy_fn(0.5 * (m_a + m_b)[None, :])[0, bimodal_class]
    delta = float(mid - 0.5 * (E[0, bimodal_class] + E[-1, bimodal_class]))
    return BridgeSweep(t, pts, E, post, bg.true_posterior(truth, pts), bimodal_class, delta)


# ---------------------------------------------------------------------------
# reports

@dataclass
class ExperimentReport:
    experiment: str
    records: list[dict] = field(default_factory=list)
    timings: list[dict] = field(default_factory=list)
    notes: dict = field(default_factory=dict)

    def add(self, cell: str, seed: int, method: str, runtime: float | None = None, **metrics) -> None:
        rec = {"cell": cell, "seed": int(seed), "method": method}
        rec.update({k: float(v) for k, v in metrics.items()})
        self.records.append(rec)
        if runtime is not None:
            self.timings.append({"cell": cell, "seed": int(seed), "method": method, "runtime_s": runtime})

    def metric_names(self) -> list[str]:
        names = set()
        for r in self.records:
            names.update(k for k in r if k not in ("cell", "seed", "method"))
        return sorted(names)

    def select(self, cell: str | None = None, method: str | None = None, metric: str | None = None):
        out = [r for r in self.records
               if (cell is None or r["cell"] == cell) and (method is None or r["method"] == method)]
        if metric is None:
            return out
        return [r[metric] for r in out if metric in r]

    def aggregate(self) -> list[dict]:
        """mean and std (ddof=1) per (cell, method, metric); std is None for one seed."""
        out = []
        keys = list(dict.fromkeys((r["cell"], r["method"]) for r in self.records))
        for cell, method in keys:
            rows = self.select(cell, method)
            for m in self.metric_names():
                vals = [r[m] for r in rows if m in r]
                if not vals:
                    continue
                arr = np.array(vals)
                out.append({"cell": cell, "method": method, "metric": m, "n": len(vals),
                            "mean": float(arr.mean()),
                            "std": float(arr.std(ddof=1)) if len(vals) > 1 else None,
                            "single_seed": len(vals) == 1})
        return out

    def mean(self, cell: str, method: str, metric: str) -> float:
        vals = self.select(cell, method, metric)
        if not vals:
            raise KeyError(f"no {metric} records for {cell}/{method}")
        return float(np.mean(vals))

    def write(self, outdir: str | Path) -> list[Path]:
        """``<id>_records.csv``, ``<id>_summary.json`` and ``<id>_timings.csv``.

        Records and summary are deterministic; wall-clock times live in the
        separate timings file.
        """
        outdir = Path(outdir)
        outdir.mkdir(parents=True, exist_ok=True)
        metrics = self.metric_names()
        rec_path = outdir / f"{self.experiment}_records.csv"
        with open(rec_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["experiment", "cell", "seed", "method", *metrics])
            for r in self.records:
                w.writerow([self.experiment, r["cell"], r["seed"], r["method"],
                            *[repr(r[m]) if m in r else "" for m in metrics]])
        sum_path = outdir / f"{self.experiment}_summary.json"
        with open(sum_path, "w") as fh:
            json.dump({"experiment": self.experiment, "aggregate": self.aggregate(), "notes": self.notes},
                      fh, indent=2, sort_keys=True)
            fh.write("\n")
        t_path = outdir / f"{self.experiment}_timings.csv"
        with open(t_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["cell", "seed", "method", "runtime_s"])
            for t in self.timings:
                w.writerow([t["cell"], t["seed"], t["method"], f"{t['runtime_s']:.3f}"])
        return [rec_path, sum_path, t_path]


# ---------------------------------------------------------------------------
# configuration and cached training

@dataclass
class ExperimentConfig:
    D: int = 5
    K_X: int = 3
    mode_scale: float = 2.0
    sigma_y: float = 0.4
    n_train: int = 30000
    seeds: tuple[int, ...] = (42, 43, 44, 45)
    lambda_valley: float | None = None     # None -> lambda_lookup(D)
    hidden: tuple[int, ...] = (64, 64)
    lr: float = 1e-3
    batch_size: int = 256
    epochs: int = 200
    max_steps: int | None = 4000
    n_queries: int = 200
    mdn_components: int = 3
    cache_dir: str | None = None
    # generality grid / K_X sweep
    grid_D: tuple[int, ...] = (2, 5, 10)
    grid_mode_scales: tuple[float, ...] = (1.0, 1.5, 2.0)
    grid_seeds: tuple[int, ...] = (42, 43)
    kx_values: tuple[int, ...] = (3, 5, 7)
    # multi-leaf / CI violation
    n_leaves: int = 3
    leaf_dim: int = 2
    delta: float | None = None             # None -> mode_scale / 2
    # continuous query
    n_samples: int = 5000
    hist_bins: int = 20
    langevin_steps: int = 100
    langevin_step_scale: float = 2e-5
    # high-cardinality parents
    highcard_M: tuple[int, ...] = (2, 8)
    highcard_K: int = 3
    # low rank
    lowrank_ambient: int = 8
    lowrank_rank: int = 2
    # tabular
    data_path: str | None = None
    label_column: str = "label"

    def __post_init__(self):
        for name in ("seeds", "hidden", "grid_D", "grid_mode_scales", "grid_seeds", "kx_values", "highcard_M"):
            setattr(self, name, tuple(getattr(self, name)))
        if not self.seeds:
            raise ValueError("seeds must be non-empty")
        if self.lambda_valley is not None and self.lambda_valley < 0:
            raise ValueError("lambda_valley must be >= 0")

    def spec(self, seed: int, **over) -> bg.SyntheticSpec:
        kw = dict(D=self.D, K_X=self.K_X, mode_scale=self.mode_scale, sigma_y=self.sigma_y,
                  n_train=self.n_train, seed=seed)
        kw.update(over)
        return bg.SyntheticSpec(**kw)

    def fem_lambda(self, D: int) -> float:
        return fm.lambda_lookup(D) if self.lambda_valley is None else self.lambda_valley

    def fit_config(self, seed: int) -> bl.FitConfig:
        return bl.FitConfig(hidden=self.hidden, lr=self.lr, batch_size=self.batch_size,
                            epochs=self.epochs, max_steps=self.max_steps, seed=seed)

    def to_dict(self) -> dict:
        return {f.name: (list(v) if isinstance(v := getattr(self, f.name), tuple) else v) for f in fields(self)}


def _fingerprint(arrays: Sequence[np.ndarray], meta: dict) -> str:
    h = hashlib.sha256()
    for a in arrays:
        a = np.ascontiguousarray(a)
        h.update(str(a.dtype).encode() + str(a.shape).encode())
        h.update(a.tobytes())
    h.update(json.dumps(meta, sort_keys=True).encode())
    return h.hexdigest()[:24]


def fit_energy_model(k, y, cards, mode_scale: float, lam: float, seed: int, cfg: ExperimentConfig,
                     lambda_xent: float = 1.0, xent_negatives: int | None = None) -> fm.EnergyModel:
    """Train (or load from ``cfg.cache_dir``) one energy model."""
    y = np.atleast_2d(np.asarray(y, dtype=float))
    k = np.asarray(k)
    tcfg = fm.TrainConfig(lambda_valley=lam, lambda_xent=lambda_xent, lr=cfg.lr, batch_size=cfg.batch_size,
                          epochs=cfg.epochs, seed=seed, max_steps=cfg.max_steps, xent_negatives=xent_negatives)
    cards = [int(cards)] if np.isscalar(cards) else [int(c) for c in cards]
    meta = {"train": asdict(tcfg), "hidden": list(cfg.hidden), "cards": cards, "ms": mode_scale,
            "version": fm.CHECKPOINT_VERSION}
    path = None
    if cfg.cache_dir:
        path = Path(cfg.cache_dir) / f"fem_{_fingerprint([k, y], meta)}.npz"
        if path.exists():
            return fm.EnergyModel.load(path)
    model = fm.build_model(y.shape[1], cards if len(cards) > 1 else cards[0], mode_scale,
                           seed=seed, hidden=cfg.hidden)
    fm.train(model, k, y, tcfg)
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_name(path.stem + f".tmp{os.getpid()}.npz")
        model.save(tmp)
        os.replace(tmp, path)
    return model


def _timed(fn, *a, **kw):
    t0 = time.perf_counter()
    out = fn(*a, **kw)
    return out, time.perf_counter() - t0


def cell_name(**kv) -> str:
    return "_".join(f"{k}{v}" for k, v in kv.items())


# ---------------------------------------------------------------------------
# runners

def run_head_to_head(cfg: ExperimentConfig | None = None) -> ExperimentReport:
    """CEBM (lambda=0), MDN and FEM (lambda from the lookup) on the bimodal benchmark."""
    cfg = cfg or ExperimentConfig()
    rep = ExperimentReport("exp1", notes={"lambda_fem": cfg.fem_lambda(cfg.D)})
    cell = cell_name(D=cfg.D, ms=cfg.mode_scale, K=cfg.K_X)
    for seed in cfg.seeds:
        data, truth = bg.gen_anticorr_bimodal(cfg.spec(seed))
        K = cfg.K_X
        for name, lam in (("CEBM", 0.0), ("FEM", cfg.fem_lambda(cfg.D))):
            model, rt = _timed(fit_energy_model, data.labels, data.y, K, cfg.mode_scale, lam, seed, cfg)
            pred = fem_predictor(model)
            rep.add(cell, seed, name, rt, midpoint_kl=midpoint_kl(pred, K, cfg.D),
                    in_data_kl=sampled_query_eval(pred, truth, cfg.n_queries, seed))
        mdn, rt = _timed(bl.fit_mdn, data.labels, data.y, cfg.mdn_components, K,
                         np.full(K, 1.0 / K), cfg.fit_config(seed))
        pred = baseline_predictor(mdn)
        rep.add(cell, seed, "MDN", rt, midpoint_kl=midpoint_kl(pred, K, cfg.D),
                in_data_kl=sampled_query_eval(pred, truth, cfg.n_queries, seed))
    return rep


def pattern_label(pattern: Sequence[int]) -> str:
    return "Y" + "".join(str(i + 1) for i in pattern)


def run_multileaf(cfg: ExperimentConfig | None = None) -> ExperimentReport:
    """Shared FEM / shared CEBM / per-leaf MDN / per-pattern MLP over every evidence subset."""
    cfg = cfg or ExperimentConfig()
    D, K, L = cfg.leaf_dim, cfg.K_X, cfg.n_leaves
    lam = cfg.fem_lambda(D)
    rep = ExperimentReport("exp2", notes={"lambda_fem": lam, "leaf_dim": D, "n_leaves": L})
    patterns = bl.evidence_patterns(L)
    uniform = np.full(K, 1.0 / K)
    for seed in cfg.seeds:
        leaves, truth = bg.gen_multileaf(cfg.spec(seed, D=D), L)
        labels = leaves[0].labels
        pooled_k = np.concatenate([lf.labels for lf in leaves])
        pooled_y = np.concatenate([lf.y for lf in leaves])
        preds, rts = {}, {}
        for name, l in (("FEM", lam), ("CEBM", 0.0)):
            model, rts[name] = _timed(fit_energy_model, pooled_k, pooled_y, K, cfg.mode_scale, l, seed, cfg)
            preds[name] = fem_predictor(model)
        t0 = time.perf_counter()
        mdns = {i: bl.fit_mdn(labels, lf.y, cfg.mdn_components, K, uniform, cfg.fit_config(seed + 1000 * i))
                for i, lf in enumerate(leaves)}
        rts["MDN"] = time.perf_counter() - t0
        preds["MDN"] = baseline_predictor(mdns)
        t0 = time.perf_counter()
        mlps = {p: bl.fit_pattern_mlp(p, labels, [lf.y for lf in leaves], K, cfg.fit_config(seed + 7 * j))
                for j, p in enumerate(patterns)}
        rts["MLP"] = time.perf_counter() - t0
        preds["MLP"] = pattern_predictor(mlps)

        rng = np.random.default_rng([seed, 2])
        qk = rng.choice(K, size=100, p=truth.prior)
        q_leaves = []
        for _ in range(L):
            y = np.empty((100, D))
            for c in range(K):
                sel = qk == c
                y[sel] = truth.classes[c].sample(int(sel.sum()), rng)
            q_leaves.append(y)
        full_truth = bg.true_posterior_multi(truth, q_leaves)
        for name, pred in preds.items():
            for p in patterns:
                ev = [(i, np.zeros((1, D))) for i in p]
                rep.add(pattern_label(p), seed, name, rts[name] if p == patterns[0] else None,
                        zero_kl=float(kl_divergence(uniform, pred(ev)[0])))
            full = pred([(i, q_leaves[i]) for i in range(L)])
            rep.add("in_data", seed, name, in_data_kl=float(np.mean(kl_divergence(full_truth, full))))
    return rep


def _grid_cell(cfg: ExperimentConfig, D: int, ms: float, K: int, seed: int, rep: ExperimentReport,
               cell: str) -> None:
    spec = cfg.spec(seed, D=D, mode_scale=ms, K_X=K)
    data, truth = bg.gen_anticorr_bimodal(spec)
    for name, lam in (("CEBM", 0.0), ("FEM", cfg.fem_lambda(D))):
        model, rt = _timed(fit_energy_model, data.labels, data.y, K, ms, lam, seed, cfg)
        pred = fem_predictor(model)
        bimodal = truth.classes[1].means
        rep.add(cell, seed, name, rt, midpoint_kl=midpoint_kl(pred, K, D),
                in_data_kl=sampled_query_eval(pred, truth, cfg.n_queries, seed),
                cross_gap=bridge_gap(model.energies, bimodal),
                delta_bridge=bridge_sweep(model.energies, truth, bimodal[0], bimodal[1], 21).delta_bridge)


def bridge_gap(energy_fn: Callable[[np.ndarray], np.ndarray], bimodal_modes: np.ndarray,
               owner: int = 1) -> float:
    """Cross-class gap at the bridge endpoints: mean E_other(m) - E_owner(m) over the bimodal modes."""
    modes = np.asarray(bimodal_modes, dtype=float)
    return measured_gap(energy_fn(modes), np.full(len(modes), owner))


def _ratio_notes(rep: ExperimentReport) -> dict:
    out = {}
    for cell in dict.fromkeys(r["cell"] for r in rep.records):
        c = rep.mean(cell, "CEBM", "midpoint_kl")
        f = rep.mean(cell, "FEM", "midpoint_kl")
        out[cell] = {"cebm": c, "fem": f, "ratio": c / max(f, PROB_FLOOR), "winner": "FEM" if f < c else "CEBM"}
    return out


def run_generality_grid(cfg: ExperimentConfig | None = None) -> ExperimentReport:
    """CEBM vs auto-lambda FEM over the (D, mode-scale) grid."""
    cfg = cfg or ExperimentConfig()
    rep = ExperimentReport("exp3")
    for D, ms in itertools.product(cfg.grid_D, cfg.grid_mode_scales):
        for seed in cfg.grid_seeds:
            _grid_cell(cfg, D, ms, cfg.K_X, seed, rep, cell_name(D=D, ms=ms))
    rep.notes["cells"] = _ratio_notes(rep)
    rep.notes["reduced_budget"] = cfg.max_steps is not None
    return rep


def run_kx_sweep(cfg: ExperimentConfig | None = None) -> ExperimentReport:
    cfg = cfg or ExperimentConfig()
    rep = ExperimentReport("kx-sweep")
    for K in cfg.kx_values:
        for seed in cfg.grid_seeds:
            _grid_cell(cfg, cfg.D, cfg.mode_scale, K, seed, rep, cell_name(K=K))
    rep.notes["cells"] = _ratio_notes(rep)
    return rep


def run_ci_violation(cfg: ExperimentConfig | None = None) -> ExperimentReport:
    """Per-leaf methods (product composition) vs a shared FEM on the joint input."""
    cfg = cfg or ExperimentConfig()
    D, K = cfg.leaf_dim, cfg.K_X
    delta = cfg.mode_scale / 2.0 if cfg.delta is None else cfg.delta
    rep = ExperimentReport("ci-violation", notes={"delta": delta, "leaf_dim": D})
    for seed in cfg.seeds:
        data, joint_truth, marg_truth = bg.gen_confounded(cfg.spec(seed, D=D), delta)
        base = bg.ladder_truth(D, K, cfg.mode_scale, cfg.sigma_y)
        q = bg.anti_aligned_queries(base, delta)
        truth_q = bg.true_posterior(joint_truth, q)
        ev = [(0, q[:, :D]), (1, q[:, D:])]
        methods: dict[str, Predictor] = {}
        rts = {}
        pooled_k = np.concatenate([data.labels, data.labels])
        pooled_y = np.concatenate([data.y1, data.y2])
        uniform = np.full(K, 1.0 / K)
        for name, fit in (("CLG", bl.fit_clg), ("KDE", bl.fit_kde), ("Hist", bl.fit_histogram)):
            t0 = time.perf_counter()
            per_leaf = {0: fit(data.labels, data.y1, n_classes=K, prior=uniform),
                        1: fit(data.labels, data.y2, n_classes=K, prior=uniform)}
            rts[name] = time.perf_counter() - t0
            methods[name] = baseline_predictor(per_leaf)
        model, rts["FEM-leaf"] = _timed(fit_energy_model, pooled_k, pooled_y, K, cfg.mode_scale,
                                        cfg.fem_lambda(D), seed, cfg)
        methods["FEM-leaf"] = fem_predictor(model)
        joint, rts["FEM-joint"] = _timed(fit_energy_model, data.labels, data.joint.y, K, cfg.mode_scale,
                                         cfg.fem_lambda(2 * D), seed, cfg)
        jpred = fem_predictor(joint)
        methods["FEM-joint"] = lambda e, jp=jpred: jp([(0, np.concatenate([y for _, y in e], axis=1))])
        _, yq = draw_queries(joint_truth, cfg.n_queries, seed)
        in_truth = bg.true_posterior(joint_truth, yq)
        for name, pred in methods.items():
            rep.add("anti_aligned", seed, name, rts[name],
                    kl=float(np.mean(kl_divergence(truth_q, pred(ev)))),
                    in_data_kl=float(np.mean(kl_divergence(in_truth, pred([(0, yq[:, :D]), (1, yq[:, D:])])))))
        # CI control: with delta = 0 the per-leaf product is the exact joint posterior
        _, j0, m0 = bg.gen_confounded(cfg.spec(seed, D=D, n_train=10), 0.0)
        q0 = bg.anti_aligned_queries(base, delta)
        gap = kl_divergence(bg.true_posterior(j0, q0), bg.true_posterior_multi(m0, [q0[:, :D], q0[:, D:]]))
        rep.add("delta0_control", seed, "product-truth", kl=float(np.mean(gap)))
    return rep


# ---- continuous query ----

def mixture_cell_probs(mix: bg.Mixture, edges: Sequence[np.ndarray]) -> np.ndarray:
    """Exact probability mass per histogram cell for a diagonal Gaussian mixture."""
    if mix.covs is not None:
        raise ValueError("cell probabilities need isotropic components")
    probs = 0.0
    for w, mu, sd in zip(mix.weights, mix.means, mix.stds):
        per_dim = [np.diff(norm.cdf(e, loc=mu[j], scale=sd)) for j, e in enumerate(edges)]
        cell = per_dim[0]
        for pd_ in per_dim[1:]:
            cell = np.multiply.outer(cell, pd_)
        probs = probs + w * cell
    return probs


def sample_histogram(samples: np.ndarray, edges: Sequence[np.ndarray]) -> np.ndarray:
    """Normalized cell frequencies; out-of-range samples clamp to the edge cells."""
    idx = []
    for j, e in enumerate(edges):
        nb = len(e) - 1
        idx.append(np.clip(np.searchsorted(e, samples[:, j], side="right") - 1, 0, nb - 1))
    counts = np.zeros(tuple(len(e) - 1 for e in edges))
    np.add.at(counts, tuple(idx), 1.0)
    return counts / len(samples)


def histogram_kl(mix: bg.Mixture, samples: np.ndarray, bins: int = 20, pad: float = 4.0) -> float:
    """KL(sample cells || truth cells) on a grid spanning the modes +- pad * std.

    The sample histogram is the first argument: empty sample cells then cost
    nothing, so the estimator's bias stays at roughly (occupied cells)/(2n),
    while samples in regions the truth does not support are penalized.
    """
    lo = mix.means.min(axis=0) - pad * mix.stds.max()
    hi = mix.means.max(axis=0) + pad * mix.stds.max()
    edges = [np.linspace(a, b, bins + 1) for a, b in zip(lo, hi)]
    truth = mixture_cell_probs(mix, edges)
    truth = truth / truth.sum()
    return float(kl_divergence(sample_histogram(samples, edges).ravel(), truth.ravel()))


def mode_coverage(samples: np.ndarray, modes: np.ndarray) -> np.ndarray:
    d2 = ((samples[:, None, :] - modes[None, :, :]) ** 2).sum(axis=2)
    return np.bincount(d2.argmin(axis=1), minlength=len(modes)) / len(samples)


def run_continuous_query(cfg: ExperimentConfig | None = None, target_class: int = 1) -> ExperimentReport:
    """Sample the bimodal class with each method and compare binned samples to the truth."""
    cfg = cfg or ExperimentConfig()
    D, K = cfg.leaf_dim, cfg.K_X
    rep = ExperimentReport("continuous-query", notes={"dim": D, "class": target_class, "bins": cfg.hist_bins})
    for seed in cfg.seeds:
        data, truth = bg.gen_anticorr_bimodal(cfg.spec(seed, D=D))
        mix = truth.classes[target_class]
        rng = np.random.default_rng([seed, 3])
        samplers = {"truth": lambda: mix.sample(cfg.n_samples, rng)}
        model = fit_energy_model(data.labels, data.y, K, cfg.mode_scale, cfg.fem_lambda(D), seed, cfg)
        samplers["FEM"] = lambda: fm.sample_langevin(model, target_class, cfg.n_samples, cfg.langevin_steps,
                                                     cfg.langevin_step_scale, seed)
        clg = bl.fit_clg(data.labels, data.y, K)
        kde = bl.fit_kde(data.labels, data.y, K)
        samplers["CLG"] = lambda: clg.sample(target_class, cfg.n_samples, rng)
        samplers["KDE"] = lambda: kde.sample(target_class, cfg.n_samples, rng)
        for name, draw in samplers.items():
            s, rt = _timed(draw)
            cov = mode_coverage(s, mix.means)
            rep.add(cell_name(D=D, k=target_class), seed, name, rt,
                    hist_kl=histogram_kl(mix, s, cfg.hist_bins), min_mode_mass=float(cov.min()))
    return rep


# ---- high-cardinality parents ----

@dataclass
class ConfigKDE:
    """Per-configuration Gaussian KDE; configurations without data get the density floor."""
    y: np.ndarray
    cfg_idx: np.ndarray
    h: np.ndarray       # per-row bandwidth (of its configuration)
    n_configs: int
    counts: np.ndarray

    def log_density(self, q: np.ndarray) -> np.ndarray:
        q = np.atleast_2d(q)
        out = np.full((q.shape[0], self.n_configs), bl.LOG_DENSITY_FLOOR)
        seen = self.counts > 0
        norm_ = -np.log(self.h).sum(axis=1) - 0.5 * q.shape[1] * math.log(2 * math.pi) \
            - np.log(self.counts[self.cfg_idx])
        for i in range(q.shape[0]):
            z = (q[i] - self.y) / self.h
            lk = -0.5 * np.sum(z * z, axis=1) + norm_
            m = np.full(self.n_configs, -np.inf)
            np.maximum.at(m, self.cfg_idx, lk)
            acc = np.zeros(self.n_configs)
            np.add.at(acc, self.cfg_idx, np.exp(lk - m[self.cfg_idx]))
            with np.errstate(divide="ignore"):
                val = m + np.log(acc)
            out[i, seen] = np.maximum(val[seen], bl.LOG_DENSITY_FLOOR)
        return out


def fit_config_kde(configs: np.ndarray, y: np.ndarray, K: int) -> ConfigKDE:
    idx = bg.config_index(configs, K)
    n_cfg = K ** configs.shape[1]
    counts = np.bincount(idx, minlength=n_cfg)
    D = y.shape[1]
    h_cfg = np.zeros((n_cfg, D))
    ok = counts >= 2
    order = np.argsort(idx, kind="stable")
    bounds = np.concatenate([[0], np.cumsum(counts)])
    for c in np.flatnonzero(ok):
        h_cfg[c] = bl.silverman_bandwidth(y[order[bounds[c]:bounds[c + 1]]])
    good = h_cfg[ok & np.all(h_cfg > 0, axis=1)]
    fallback = np.median(good, axis=0) if len(good) else np.full(D, 1.0)
    bad = ~(ok & np.all(h_cfg > 0, axis=1))
    h_cfg[bad] = fallback
    return ConfigKDE(y, idx, h_cfg[idx], n_cfg, counts)


def fit_config_histogram(configs: np.ndarray, y: np.ndarray, K: int, bins: int = 20, alpha: float = 1.0):
    """Product-of-marginals histogram per configuration; returns a log-density function."""
    idx = bg.config_index(configs, K)
    n_cfg = K ** configs.shape[1]
    D = y.shape[1]
    lo, hi = y.min(axis=0), y.max(axis=0)
    width = (hi - lo) / bins
    cell = np.clip(((y - lo) / width).astype(int), 0, bins - 1)
    counts = np.zeros((n_cfg, D, bins))
    for j in range(D):
        np.add.at(counts, (idx, j, cell[:, j]), 1.0)
    n_c = np.bincount(idx, minlength=n_cfg)[:, None, None]
    logp = np.log((counts + alpha) / (n_c + alpha * bins)) - np.log(width)[None, :, None]

    def log_density(q: np.ndarray) -> np.ndarray:
        qc = np.clip(((np.atleast_2d(q) - lo) / width).astype(int), 0, bins - 1)
        return sum(logp[:, j, qc[:, j]].T for j in range(D))
    return log_density


def _config_posterior(logdens: np.ndarray) -> np.ndarray:
    return np.exp(logdens - logsumexp(logdens, axis=1, keepdims=True))


def brute_force_config_posterior(truth: bg.HighCardTruth, q: np.ndarray) -> np.ndarray:
    """Enumerate every configuration and evaluate its Gaussian density directly."""
    from scipy.stats import multivariate_normal
    configs = truth.all_configs()
    ll = np.empty((len(q), len(configs)))
    for c, cfg in enumerate(configs):
        mu = sum(truth.W[:, m, cfg[m]] for m in range(truth.M))
        ll[:, c] = multivariate_normal(mu, truth.sigma_y ** 2 * np.eye(len(mu))).logpdf(q)
    return _config_posterior(ll)


def run_highcard(cfg: ExperimentConfig | None = None) -> ExperimentReport:
    """FEM with per-parent embeddings vs per-configuration KDE / histogram."""
    cfg = cfg or ExperimentConfig()
    K = cfg.highcard_K
    rep = ExperimentReport("highcard")
    for M in cfg.highcard_M:
        for seed in cfg.seeds:
            data, truth = bg.gen_highcard_parents(M, K, cfg.n_train, seed, D=cfg.D,
                                                  mode_scale=cfg.mode_scale, sigma_y=cfg.sigma_y)
            rng = np.random.default_rng([seed, 4])
            n_q = min(cfg.n_queries, 200)
            qc = rng.integers(0, K, size=(n_q, M))
            q = truth.means(qc) + cfg.sigma_y * rng.standard_normal((n_q, cfg.D))
            p_true = truth.posterior(q)
            all_cfg = truth.all_configs()
            model, rt_fem = _timed(fit_energy_model, data.labels, data.y, [K] * M, cfg.mode_scale, 0.0,
                                   seed, cfg, 1.0, 16 if M > 2 else None)
            E = np.concatenate([model.energies(q[i:i + 1], configs=all_cfg) for i in range(n_q)])
            posts = {"FEM": _config_posterior(-E)}
            kde, rt_kde = _timed(fit_config_kde, data.labels, data.y, K)
            posts["KDE"] = _config_posterior(kde.log_density(q))
            hist, rt_hist = _timed(fit_config_histogram, data.labels, data.y, K, cfg.hist_bins)
            posts["Hist"] = _config_posterior(hist(q))
            rts = {"FEM": rt_fem, "KDE": rt_kde, "Hist": rt_hist}
            oracle = brute_force_config_posterior(truth, q) if K ** M <= 81 else None
            for name, p in posts.items():
                extra = {}
                if oracle is not None:
                    extra["oracle_kl_gap"] = float(abs(np.mean(kl_divergence(oracle, p))
                                                       - np.mean(kl_divergence(p_true, p))))
                rep.add(cell_name(M=M, K=K), seed, name, rts[name],
                        kl=float(np.mean(kl_divergence(p_true, p))), **extra)
            if oracle is not None:
                rep.add(cell_name(M=M, K=K), seed, "oracle-check",
                        kl=float(np.mean(kl_divergence(p_true, oracle))))
    return rep


# ---- low rank ----

def run_lowrank(cfg: ExperimentConfig | None = None) -> ExperimentReport:
    cfg = cfg or ExperimentConfig()
    Da, r, K = cfg.lowrank_ambient, cfg.lowrank_rank, cfg.K_X
    rep = ExperimentReport("lowrank", notes={"ambient": Da, "rank": r})
    for seed in cfg.seeds:
        lr_data, truth = bg.gen_lowrank(Da, r, cfg.spec(seed, D=r))
        data = lr_data.dataset
        uniform = np.full(K, 1.0 / K)
        preds, rts = {}, {}
        model, rts["FEM"] = _timed(fit_energy_model, data.labels, data.y, K, cfg.mode_scale,
                                   cfg.fem_lambda(r), seed, cfg)
        preds["FEM"] = fem_predictor(model)
        for name, fit in (("CLG", bl.fit_clg), ("KDE", bl.fit_kde)):
            m, rts[name] = _timed(fit, data.labels, data.y, n_classes=K, prior=uniform)
            preds[name] = baseline_predictor(m)
        for name, pred in preds.items():
            rep.add(cell_name(D=Da, r=r), seed, name, rts[name], midpoint_kl=midpoint_kl(pred, K, Da),
                    in_data_kl=sampled_query_eval(pred, truth, cfg.n_queries, seed))
    return rep


# ---- tabular ----

def default_data_path(name: str = "breast_cancer") -> Path:
    return Path(__file__).resolve().parents[2] / "data" / f"{name}.csv"


def run_uci(cfg: ExperimentConfig | None = None, paths: Sequence[str | Path] | None = None,
            fem_lambda: float = 0.0) -> ExperimentReport:
    """Held-out NLL and accuracy for CLG, KDE, Histogram and FEM on tabular files.

    FEM uses ``cfg.lambda_valley`` when set, otherwise ``fem_lambda`` (0 by default).
    """
    cfg = cfg or ExperimentConfig()
    if cfg.lambda_valley is not None:
        fem_lambda = cfg.lambda_valley
    if paths is None:
        paths = [cfg.data_path] if cfg.data_path else [default_data_path()]
    rep = ExperimentReport("uci", notes={"fem_lambda": fem_lambda})
    seed = cfg.seeds[0]
    for path in paths:
        split = bg.load_tabular(path, cfg.label_column, seed=42)
        K = len(split.classes)
        cell = Path(path).stem
        for name, fit in (("CLG", bl.fit_clg), ("KDE", bl.fit_kde), ("Hist", bl.fit_histogram)):
            m, rt = _timed(fit, split.y_train, split.X_train, n_classes=K, prior=split.priors)
            nll, acc = nll_accuracy_eval(baseline_predictor(m), split.X_test, split.y_test)
            rep.add(cell, seed, name, rt, nll=nll, accuracy=acc)
        # small tables: stretch the epoch count so FEM gets the same number of optimizer steps
        fcfg = cfg
        if cfg.max_steps is not None:
            per_epoch = math.ceil(len(split.y_train) / cfg.batch_size)
            fcfg = replace(cfg, epochs=max(cfg.epochs, math.ceil(cfg.max_steps / per_epoch)))
        model, rt = _timed(fit_energy_model, split.y_train, split.X_train, K, 1.0, fem_lambda, seed, fcfg)
        nll, acc = nll_accuracy_eval(fem_predictor(model, split.priors), split.X_test, split.y_test)
        rep.add(cell, seed, "FEM", rt, nll=nll, accuracy=acc)
    return rep


RUNNERS: dict[str, Callable[[ExperimentConfig], ExperimentReport]] = {
    "exp1": run_head_to_head,
    "exp2": run_multileaf,
    "exp3": run_generality_grid,
    "kx-sweep": run_kx_sweep,
    "ci-violation": run_ci_violation,
    "continuous-query": run_continuous_query,
    "highcard": run_highcard,
    "lowrank": run_lowrank,
    "uci": run_uci,
}
