"""Comparison methods behind one interface: per-class log-densities plus a prior.

CLG, KDE, histogram and MDN all expose ``log_density(y) -> (n, K)``; the
posterior for any set of conditionally independent leaves is then the same
floor-clamped product rule for every method.  Per-pattern MLP classifiers
are the discriminative exception and return posteriors directly.
"""
from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.special import logsumexp

from . import ndcore as nd
from .fem_model import Adam, TrainingAborted

log = logging.getLogger(__name__)

DENSITY_FLOOR = 1e-300
LOG_DENSITY_FLOOR = math.log(DENSITY_FLOOR)
_LOG_2PI = math.log(2.0 * math.pi)


def _split_by_class(labels: np.ndarray, y: np.ndarray, n_classes: int | None = None):
    labels = np.asarray(labels).reshape(-1)
    y = np.atleast_2d(np.asarray(y, dtype=float))
    K = int(labels.max()) + 1 if n_classes is None else n_classes
    return [y[labels == k] for k in range(K)]


def _empirical_prior(labels: np.ndarray, K: int) -> np.ndarray:
    counts = np.bincount(np.asarray(labels).reshape(-1), minlength=K).astype(float)
    return counts / counts.sum()


@dataclass
class ClassConditionalMethod:
    kind: str
    prior: np.ndarray
    flags: list[str] = field(default_factory=list)

    @property
    def n_classes(self) -> int:
        return len(self.prior)

    def log_density(self, y) -> np.ndarray:
        raise NotImplementedError

    def clamped_log_density(self, y) -> np.ndarray:
        return np.maximum(self.log_density(y), LOG_DENSITY_FLOOR)


# ---------------------------------------------------------------------------
# CLG

@dataclass
class CLG(ClassConditionalMethod):
    means: np.ndarray = None
    covs: np.ndarray = None

    def log_density(self, y) -> np.ndarray:
        y = np.atleast_2d(np.asarray(y, dtype=float))
        out = np.empty((y.shape[0], self.n_classes))
        for k in range(self.n_classes):
            chol = np.linalg.cholesky(self.covs[k])
            z = np.linalg.solve(chol, (y - self.means[k]).T)
            logdet = 2.0 * np.log(np.diag(chol)).sum()
            out[:, k] = -0.5 * (np.sum(z * z, axis=0) + logdet + y.shape[1] * _LOG_2PI)
        return out

    def sample(self, k: int, n: int, rng: np.random.Generator) -> np.ndarray:
        return rng.multivariate_normal(self.means[k], self.covs[k], size=n)


def fit_clg(labels, y, n_classes: int | None = None, prior=None, ridge: float = 1e-6) -> CLG:
    """One Gaussian per class: sample mean, full covariance plus ``ridge * I``.

    Classes with fewer than D+2 rows fall back to a diagonal covariance and
    are listed in ``flags``.
    """
    groups = _split_by_class(labels, y, n_classes)
    D = groups[0].shape[1] if len(groups[0]) else np.atleast_2d(y).shape[1]
    means, covs, flags = [], [], []
    for k, g in enumerate(groups):
        if len(g) < 2:
            raise ValueError(f"class {k} has fewer than 2 rows")
        mu = g.mean(axis=0)
        if len(g) >= D + 2:
            cov = np.atleast_2d(np.cov(g, rowvar=False))
        else:
            cov = np.diag(g.var(axis=0, ddof=1))
            flags.append(f"class {k}: diagonal covariance (n={len(g)} < D+2)")
        cov = cov + ridge * np.eye(D)
        try:
            np.linalg.cholesky(cov)
        except np.linalg.LinAlgError as exc:
            raise ValueError(f"class {k}: covariance singular after ridge") from exc
        means.append(mu)
        covs.append(cov)
    K = len(groups)
    prior = _empirical_prior(labels, K) if prior is None else np.asarray(prior, dtype=float)
    return CLG("CLG", prior, flags, np.array(means), np.array(covs))


# ---------------------------------------------------------------------------
# KDE

def silverman_bandwidth(x: np.ndarray) -> np.ndarray:
    """Per-dimension ``1.06 * std_j * n**(-1/(D+4))``."""
    x = np.atleast_2d(x)
    n, D = x.shape
    return 1.06 * x.std(axis=0, ddof=1) * n ** (-1.0 / (D + 4))


@dataclass
class KDE(ClassConditionalMethod):
    points: list = None
    bandwidths: list = None

    def log_density(self, y) -> np.ndarray:
        y = np.atleast_2d(np.asarray(y, dtype=float))
        out = np.empty((y.shape[0], self.n_classes))
        for k, (pts, h) in enumerate(zip(self.points, self.bandwidths)):
            norm = -np.log(h).sum() - 0.5 * y.shape[1] * _LOG_2PI - math.log(len(pts))
            for start in range(0, y.shape[0], 256):
                q = y[start:start + 256] / h
                p = pts / h
                d2 = (np.sum(q * q, axis=1)[:, None] - 2.0 * q @ p.T + np.sum(p * p, axis=1)[None, :])
                out[start:start + 256, k] = logsumexp(-0.5 * np.maximum(d2, 0.0), axis=1) + norm
        return out

    def sample(self, k: int, n: int, rng: np.random.Generator) -> np.ndarray:
        pts = self.points[k]
        idx = rng.integers(0, len(pts), size=n)
        return pts[idx] + self.bandwidths[k] * rng.standard_normal((n, pts.shape[1]))


def fit_kde(labels, y, n_classes: int | None = None, prior=None) -> KDE:
    """Gaussian product-kernel KDE per class with Silverman per-dim bandwidths."""
    groups = _split_by_class(labels, y, n_classes)
    pts, bws, flags = [], [], []
    for k, g in enumerate(groups):
        if len(g) < 2:
            raise ValueError(f"class {k} has fewer than 2 rows")
        h = silverman_bandwidth(g)
        if np.any(h <= 0):
            flags.append(f"class {k}: zero-variance dimension jittered")
            h = np.where(h > 0, h, 1e-9)
        pts.append(g)
        bws.append(h)
    K = len(groups)
    prior = _empirical_prior(labels, K) if prior is None else np.asarray(prior, dtype=float)
    return KDE("KDE", prior, flags, pts, bws)


# ---------------------------------------------------------------------------
# Histogram

def default_bins(D: int) -> int:
    return 20 if D <= 2 else 8 if D <= 4 else 20


@dataclass
class Histogram(ClassConditionalMethod):
    edges: list = None          # per-dim bin edges
    log_cell: list = None       # per class: dense log-density array, or list of per-dim arrays
    product: bool = False

    def _cells(self, y: np.ndarray) -> np.ndarray:
        idx = np.empty(y.shape, dtype=np.int64)
        for j, e in enumerate(self.edges):
            nb = len(e) - 1
            idx[:, j] = np.clip(np.searchsorted(e, y[:, j], side="right") - 1, 0, nb - 1)
        return idx

    def log_density(self, y) -> np.ndarray:
        y = np.atleast_2d(np.asarray(y, dtype=float))
        idx = self._cells(y)
        out = np.empty((y.shape[0], self.n_classes))
        for k in range(self.n_classes):
            if self.product:
                out[:, k] = sum(self.log_cell[k][j][idx[:, j]] for j in range(y.shape[1]))
            else:
                out[:, k] = self.log_cell[k][tuple(idx.T)]
        return out


def fit_histogram(labels, y, bins: int | None = None, alpha: float = 1.0,
                  n_classes: int | None = None, prior=None, product: bool | None = None,
                  extent: np.ndarray | None = None) -> Histogram:
    """Laplace-smoothed histogram density per class.

    Dense grid for D <= 4, product of per-dimension histograms beyond (or when
    ``product=True``).  Bin edges span ``extent`` (default: the data range);
    out-of-range queries clamp to the edge cell.
    """
    y = np.atleast_2d(np.asarray(y, dtype=float))
    D = y.shape[1]
    bins = default_bins(D) if bins is None else int(bins)
    if bins < 2:
        raise ValueError("need at least 2 bins per dimension")
    flags = []
    if product is None:
        product = D > 4
    if product:
        flags.append("product-of-marginals histogram")
    ext = np.stack([y.min(axis=0), y.max(axis=0)], axis=1) if extent is None else np.asarray(extent)
    edges = []
    for lo, hi in ext:
        if hi <= lo:
            hi = lo + 1e-9
        edges.append(np.linspace(lo, hi, bins + 1))
    widths = np.array([e[1] - e[0] for e in edges])
    groups = _split_by_class(labels, y, n_classes)
    model = Histogram("Histogram", np.ones(len(groups)) / len(groups), flags, edges, [], product)
    for k, g in enumerate(groups):
        n = len(g)
        idx = model._cells(g) if n else np.zeros((0, D), dtype=np.int64)
        if product:
            per_dim = []
            for j in range(D):
                counts = np.bincount(idx[:, j], minlength=bins).astype(float)
                p = (counts + alpha) / (n + alpha * bins)
                per_dim.append(np.log(p) - math.log(widths[j]))
            model.log_cell.append(per_dim)
        else:
            counts = np.zeros((bins,) * D)
            np.add.at(counts, tuple(idx.T), 1.0)
            n_cells = bins ** D
            p = (counts + alpha) / (n + alpha * n_cells)
            model.log_cell.append(np.log(p) - np.log(widths).sum())
    K = len(groups)
    model.prior = _empirical_prior(labels, K) if prior is None else np.asarray(prior, dtype=float)
    return model


# ---------------------------------------------------------------------------
# neural baselines

@dataclass
class FitConfig:
    hidden: tuple[int, ...] = (64, 64)
    lr: float = 1e-3
    batch_size: int = 256
    epochs: int = 200
    max_steps: int | None = None
    seed: int = 0


def _init_mlp(sizes: Sequence[int], rng: np.random.Generator) -> list[tuple[nd.Tensor, nd.Tensor]]:
    layers = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = 1.0 / math.sqrt(fan_in)
        layers.append((nd.Tensor(rng.uniform(-bound, bound, (fan_in, fan_out)), requires_grad=True),
                       nd.Tensor(rng.uniform(-bound, bound, (fan_out,)), requires_grad=True)))
    return layers


def _mlp(layers, x: nd.Tensor) -> nd.Tensor:
    h = x
    for i, (w, b) in enumerate(layers):
        h = nd.add(nd.matmul(h, w), b)
        if i < len(layers) - 1:
            h = nd.gelu(h)
    return h


def _minibatch_fit(params, loss_fn, n: int, cfg: FitConfig, what: str) -> list[float]:
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(params, lr=cfg.lr)
    steps_per_epoch = max(1, math.ceil(n / cfg.batch_size))
    history, step = [], 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        tot = 0.0
        for b in range(steps_per_epoch):
            idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            try:
                loss = loss_fn(idx)
                grads = [g.data for g in nd.grad(loss, params, allow_unused=True)]
            except nd.NonFiniteError as exc:
                raise TrainingAborted(f"{what}: non-finite loss at epoch {epoch}: {exc}") from exc
            opt.step(grads)
            tot += float(loss.data)
            step += 1
            if cfg.max_steps is not None and step >= cfg.max_steps:
                break
        history.append(tot / (b + 1))
        if cfg.max_steps is not None and step >= cfg.max_steps:
            break
    return history


@dataclass
class MDN(ClassConditionalMethod):
    layers: list = None
    n_mix: int = 3
    dim: int = 0
    std_floor: float = 1e-3
    history: list = field(default_factory=list)

    def _raw(self, onehot: nd.Tensor) -> tuple[nd.Tensor, nd.Tensor, nd.Tensor]:
        out = _mlp(self.layers, onehot)
        J, D = self.n_mix, self.dim
        sel = np.eye(out.shape[1])
        logits = nd.matmul(out, nd.Tensor(sel[:, :J]))
        means = nd.matmul(out, nd.Tensor(sel[:, J:J + J * D]))
        stds = nd.add(nd.softplus(nd.matmul(out, nd.Tensor(sel[:, J + J * D:]))), self.std_floor)
        return logits, means, stds

    def mixture_params(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(weights (K,J), means (K,J,D), stds (K,J,D)) for every class."""
        with nd.no_grad():
            logits, means, stds = self._raw(nd.Tensor(np.eye(self.n_classes)))
        lw = logits.data - logsumexp(logits.data, axis=1, keepdims=True)
        K, J, D = self.n_classes, self.n_mix, self.dim
        return np.exp(lw), means.data.reshape(K, J, D), stds.data.reshape(K, J, D)

    def log_density(self, y) -> np.ndarray:
        y = np.atleast_2d(np.asarray(y, dtype=float))
        w, mu, sd = self.mixture_params()
        out = np.empty((y.shape[0], self.n_classes))
        for k in range(self.n_classes):
            comp = []
            for j in range(self.n_mix):
                z = (y - mu[k, j]) / sd[k, j]
                comp.append(np.log(w[k, j]) - np.log(sd[k, j]).sum()
                            - 0.5 * np.sum(z * z, axis=1) - 0.5 * self.dim * _LOG_2PI)
            out[:, k] = logsumexp(np.stack(comp, axis=1), axis=1)
        return out


def _mdn_batch_nll(model: MDN, k: np.ndarray, y: np.ndarray) -> nd.Tensor:
    K, J, D = model.n_classes, model.n_mix, model.dim
    logits, means, stds = model._raw(nd.Tensor(np.eye(K)))
    lw = nd.take_rows(nd.log_softmax(logits, axis=1), k)
    mu = nd.take_rows(means, k)
    sd = nd.take_rows(stds, k)
    sel = np.eye(J * D)
    yt = nd.Tensor(y)
    comps = []
    for j in range(J):
        pick = nd.Tensor(sel[:, j * D:(j + 1) * D])
        z = nd.div(nd.sub(yt, nd.matmul(mu, pick)), nd.matmul(sd, pick))
        lp = nd.neg(nd.add(nd.sum(nd.log(nd.matmul(sd, pick)), axis=1),
                           nd.mul(nd.sum(nd.square(z), axis=1), 0.5)))
        comps.append(nd.reshape(lp, (len(k), 1)))
    lp_all = nd.add(nd.concat(comps), lw)
    return nd.add(nd.neg(nd.mean(nd.logsumexp(lp_all, axis=1))), 0.5 * D * _LOG_2PI)


def fit_mdn(labels, y, n_mix: int = 3, n_classes: int | None = None, prior=None,
            config: FitConfig | None = None) -> MDN:
    """MDN on one-hot parent input with softmax weights, means and softplus stds.

    Trained by maximum likelihood with Adam.
    """
    if n_mix < 1:
        raise ValueError("need at least one mixture component")
    cfg = config or FitConfig()
    labels = np.asarray(labels).reshape(-1)
    y = np.atleast_2d(np.asarray(y, dtype=float))
    K = int(labels.max()) + 1 if n_classes is None else n_classes
    D = y.shape[1]
    rng = np.random.default_rng(cfg.seed)
    layers = _init_mlp([K, *cfg.hidden, n_mix * (1 + 2 * D)], rng)
    prior = _empirical_prior(labels, K) if prior is None else np.asarray(prior, dtype=float)
    model = MDN("MDN", prior, [], layers, n_mix, D)
    params = [p for layer in layers for p in layer]
    model.history = _minibatch_fit(params, lambda idx: _mdn_batch_nll(model, labels[idx], y[idx]),
                                   len(y), cfg, "MDN")
    return model


@dataclass
class PatternClassifier:
    pattern: tuple[int, ...]
    layers: list
    n_classes: int
    history: list = field(default_factory=list)

    def predict_proba(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        with nd.no_grad():
            logits = _mlp(self.layers, nd.Tensor(x)).data
        z = logits - logits.max(axis=1, keepdims=True)
        p = np.exp(z)
        return p / p.sum(axis=1, keepdims=True)

    def posterior(self, evidence: Mapping[int, np.ndarray]) -> np.ndarray:
        """Posterior from a {leaf: y} mapping whose keys equal the pattern."""
        if tuple(sorted(evidence)) != self.pattern:
            raise ValueError(f"classifier trained for pattern {self.pattern}, got {tuple(sorted(evidence))}")
        single = np.asarray(evidence[self.pattern[0]]).ndim == 1
        x = np.concatenate([np.atleast_2d(evidence[i]) for i in self.pattern], axis=1)
        p = self.predict_proba(x)
        return p[0] if single else p


def fit_pattern_mlp(pattern: Sequence[int], labels, leaves: Sequence[np.ndarray],
                    n_classes: int | None = None, config: FitConfig | None = None) -> PatternClassifier:
    """Cross-entropy MLP on the concatenated leaves named by ``pattern``."""
    pattern = tuple(sorted(pattern))
    if not pattern:
        raise ValueError("pattern must be non-empty")
    cfg = config or FitConfig()
    labels = np.asarray(labels).reshape(-1)
    K = int(labels.max()) + 1 if n_classes is None else n_classes
    x = np.concatenate([np.atleast_2d(leaves[i]) for i in pattern], axis=1)
    rng = np.random.default_rng(cfg.seed)
    layers = _init_mlp([x.shape[1], *cfg.hidden, K], rng)
    onehot = np.eye(K)[labels]

    def loss(idx):
        lsm = nd.log_softmax(_mlp(layers, nd.Tensor(x[idx])), axis=1)
        return nd.neg(nd.mean(nd.sum(nd.mul(lsm, onehot[idx]), axis=1)))

    clf = PatternClassifier(pattern, layers, K)
    clf.history = _minibatch_fit([p for layer in layers for p in layer], loss, len(x), cfg,
                                 f"MLP{pattern}")
    return clf


def evidence_patterns(n_leaves: int) -> list[tuple[int, ...]]:
    """All non-empty leaf subsets, singletons first."""
    return [c for r in range(1, n_leaves + 1) for c in itertools.combinations(range(n_leaves), r)]


# ---------------------------------------------------------------------------
# composition

def baseline_posterior(methods: ClassConditionalMethod | Mapping[int, ClassConditionalMethod],
                       evidence: Sequence[tuple[int, np.ndarray]], prior=None) -> np.ndarray:
    """softmax_k(log prior_k + sum over leaves of floor-clamped log p(y_i | k)).

    ``methods`` is one method shared by every leaf or a {leaf: method} map.
    """
    if not evidence:
        raise ValueError("evidence must be non-empty")
    total = None
    ref = None
    for leaf, y in evidence:
        if isinstance(methods, ClassConditionalMethod):
            m = methods
        else:
            if leaf not in methods:
                raise KeyError(f"no fitted method for leaf {leaf}")
            m = methods[leaf]
        ref = ref or m
        ld = m.clamped_log_density(y)
        total = ld if total is None else total + ld
    prior = ref.prior if prior is None else np.asarray(prior, dtype=float)
    with np.errstate(divide="ignore"):
        logits = np.log(prior) + total
    p = np.exp(logits - logsumexp(logits, axis=1, keepdims=True))
    single = np.asarray(evidence[0][1]).ndim == 1
    return p[0] if single else p
