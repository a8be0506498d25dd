"""Synthetic hybrid-BN benchmarks with exact Bayes-oracle posteriors, plus tabular loading.

Every generator is a pure function of its spec and seed.  Ground truth is kept
as explicit Gaussian mixtures per parent value so that posteriors can be
computed exactly in log space.
"""
from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import logsumexp

LAYOUTS = ("anticorr-bimodal", "multi-leaf", "confounded", "highcard-parents", "low-rank")
_LOG_2PI = np.log(2.0 * np.pi)


@dataclass(frozen=True)
class SyntheticSpec:
    D: int = 5
    K_X: int = 3
    mode_scale: float = 2.0
    sigma_y: float = 0.4
    n_train: int = 30000
    seed: int = 42
    layout: str = "anticorr-bimodal"

    def __post_init__(self):
        if self.D < 1:
            raise ValueError("D must be >= 1")
        if self.mode_scale <= 0 or self.sigma_y <= 0:
            raise ValueError("mode_scale and sigma_y must be positive")
        if self.layout not in LAYOUTS:
            raise ValueError(f"unknown layout {self.layout!r}")
        if self.layout in ("anticorr-bimodal", "multi-leaf", "confounded", "low-rank") and self.K_X < 3:
            raise ValueError("anticorrelated layouts need K_X >= 3")
        if self.n_train < 1:
            raise ValueError("n_train must be positive")


@dataclass
class Mixture:
    """Gaussian mixture for one parent value.  ``covs`` overrides isotropic ``stds``."""
    weights: np.ndarray
    means: np.ndarray
    stds: np.ndarray
    covs: np.ndarray | None = None

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        self.means = np.atleast_2d(np.asarray(self.means, dtype=float))
        self.stds = np.broadcast_to(np.asarray(self.stds, dtype=float), self.weights.shape).copy()
        if abs(self.weights.sum() - 1.0) > 1e-12:
            raise ValueError("mixture weights must sum to 1")

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def log_pdf(self, y: np.ndarray) -> np.ndarray:
        y = np.atleast_2d(y)
        comps = []
        for j, (w, mu) in enumerate(zip(self.weights, self.means)):
            if self.covs is not None:
                comps.append(np.log(w) + _mvn_logpdf(y, mu, self.covs[j]))
            else:
                s = self.stds[j]
                d2 = np.sum((y - mu) ** 2, axis=1)
                comps.append(np.log(w) - 0.5 * d2 / s ** 2 - self.dim * (np.log(s) + 0.5 * _LOG_2PI))
        return logsumexp(np.stack(comps, axis=1), axis=1)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        comp = rng.choice(len(self.weights), size=n, p=self.weights)
        out = np.empty((n, self.dim))
        for j in range(len(self.weights)):
            sel = comp == j
            m = int(sel.sum())
            if not m:
                continue
            if self.covs is not None:
                out[sel] = rng.multivariate_normal(self.means[j], self.covs[j], size=m)
            else:
                out[sel] = self.means[j] + self.stds[j] * rng.standard_normal((m, self.dim))
        return out


def _mvn_logpdf(y: np.ndarray, mu: np.ndarray, cov: np.ndarray) -> np.ndarray:
    chol = np.linalg.cholesky(cov)
    z = np.linalg.solve(chol, (y - mu).T)
    logdet = 2.0 * np.log(np.diag(chol)).sum()
    return -0.5 * (np.sum(z * z, axis=0) + logdet + len(mu) * _LOG_2PI)


@dataclass
class GroundTruth:
    classes: list[Mixture]
    prior: np.ndarray

    def __post_init__(self):
        self.prior = np.asarray(self.prior, dtype=float)
        if abs(self.prior.sum() - 1.0) > 1e-12:
            raise ValueError("prior must sum to 1")

    @property
    def n_classes(self) -> int:
        return len(self.classes)

    @property
    def dim(self) -> int:
        return self.classes[0].dim

    def log_likelihood(self, y) -> np.ndarray:
        """(n, K) matrix of log p(y | k)."""
        y = np.atleast_2d(np.asarray(y, dtype=float))
        if y.shape[1] != self.dim:
            raise ValueError(f"query has dim {y.shape[1]}, truth has {self.dim}")
        return np.stack([c.log_pdf(y) for c in self.classes], axis=1)

    def sample(self, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        k = rng.choice(self.n_classes, size=n, p=self.prior)
        y = np.empty((n, self.dim))
        for c in range(self.n_classes):
            sel = k == c
            if sel.any():
                y[sel] = self.classes[c].sample(int(sel.sum()), rng)
        return k, y


@dataclass
class Dataset:
    labels: np.ndarray
    y: np.ndarray
    leaf: int = 0

    def __post_init__(self):
        self.labels = np.asarray(self.labels)
        self.y = np.atleast_2d(np.asarray(self.y, dtype=float))
        if len(self.labels) != len(self.y):
            raise ValueError("labels and y have different lengths")

    def __len__(self) -> int:
        return len(self.y)

    @property
    def extent(self) -> np.ndarray:
        return np.stack([self.y.min(axis=0), self.y.max(axis=0)], axis=1)


def _posterior_from_loglik(loglik: np.ndarray, prior: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore"):
        logits = np.log(prior) + loglik
    return np.exp(logits - logsumexp(logits, axis=-1, keepdims=True))


def true_posterior(truth: GroundTruth, y) -> np.ndarray:
    """Exact Bayes posterior over parent values; one row per query row."""
    y = np.asarray(y, dtype=float)
    post = _posterior_from_loglik(truth.log_likelihood(y), truth.prior)
    return post[0] if y.ndim == 1 else post


def true_posterior_multi(truth: GroundTruth, ys: Sequence[np.ndarray]) -> np.ndarray:
    """Exact posterior for conditionally independent leaves sharing one conditional."""
    if not ys:
        raise ValueError("evidence must be non-empty")
    single = np.asarray(ys[0]).ndim == 1
    loglik = sum(truth.log_likelihood(y) for y in ys)
    post = _posterior_from_loglik(loglik, truth.prior)
    return post[0] if single else post


# ---------------------------------------------------------------------------
# anticorrelated bimodal layout

def sign_patterns(D: int, count: int) -> np.ndarray:
    """``count`` distinct sign vectors (up to global sign), most balanced first.

    The all-ones direction is reserved for the two corner classes and never
    returned.
    """
    cands = []
    for tail in itertools.product((1, -1), repeat=D - 1):
        r = np.array((1,) + tail)
        if np.all(r == 1):
            continue
        cands.append(r)
    if len(cands) < count:
        raise ValueError(f"D={D} admits only {len(cands)} bimodal sign patterns, need {count}")
    cands.sort(key=lambda r: (abs(int(r.sum())), tuple(-r)))
    return np.array(cands[:count], dtype=float).reshape(count, D)


def anticorr_truth(D: int, K_X: int, mode_scale: float, sigma_y: float) -> GroundTruth:
    """Class 0 at -s*1, class K-1 at +s*1, the rest bimodal at +-s*r_j."""
    s = mode_scale
    ones = np.ones(D)
    patterns = sign_patterns(D, K_X - 2)
    classes = [Mixture([1.0], [-s * ones], [sigma_y])]
    for r in patterns:
        classes.append(Mixture([0.5, 0.5], [s * r, -s * r], [sigma_y, sigma_y]))
    classes.append(Mixture([1.0], [s * ones], [sigma_y]))
    return GroundTruth(classes, np.full(K_X, 1.0 / K_X))


def gen_anticorr_bimodal(spec: SyntheticSpec) -> tuple[Dataset, GroundTruth]:
    truth = anticorr_truth(spec.D, spec.K_X, spec.mode_scale, spec.sigma_y)
    rng = np.random.default_rng(spec.seed)
    k, y = truth.sample(spec.n_train, rng)
    return Dataset(k, y), truth


def gen_multileaf(spec: SyntheticSpec, n_leaves: int = 3) -> tuple[list[Dataset], GroundTruth]:
    """Shared parent per row; each leaf drawn independently from the same conditional."""
    if n_leaves < 2:
        raise ValueError("need at least two leaves")
    truth = anticorr_truth(spec.D, spec.K_X, spec.mode_scale, spec.sigma_y)
    rng = np.random.default_rng(spec.seed)
    k = rng.choice(spec.K_X, size=spec.n_train, p=truth.prior)
    leaves = []
    for leaf in range(n_leaves):
        y = np.empty((spec.n_train, spec.D))
        for c in range(spec.K_X):
            sel = k == c
            y[sel] = truth.classes[c].sample(int(sel.sum()), rng)
        leaves.append(Dataset(k, y, leaf=leaf))
    return leaves, truth


# ---------------------------------------------------------------------------
# hidden confounder

@dataclass
class ConfoundedData:
    labels: np.ndarray
    z: np.ndarray
    y1: np.ndarray
    y2: np.ndarray
    delta: float

    @property
    def joint(self) -> Dataset:
        return Dataset(self.labels, np.concatenate([self.y1, self.y2], axis=1))

    def leaf(self, i: int) -> Dataset:
        return Dataset(self.labels, self.y1 if i == 0 else self.y2, leaf=i)


def confounded_truth(base: GroundTruth, delta: float) -> tuple[GroundTruth, GroundTruth]:
    """(joint truth over (y1, y2), per-leaf marginal truth) with Z ~ Bernoulli(1/2) shift."""
    D = base.dim
    shift = delta * np.ones(D)
    joint, marg = [], []
    for mix in base.classes:
        w, mu = [], []
        for zval in (0.0, 1.0):
            for (wa, ma), (wb, mb) in itertools.product(zip(mix.weights, mix.means), repeat=2):
                w.append(0.5 * wa * wb)
                mu.append(np.concatenate([ma + zval * shift, mb + zval * shift]))
        joint.append(Mixture(w, mu, mix.stds[0]))
        if delta == 0:
            marg.append(Mixture(mix.weights, mix.means, mix.stds))
        else:
            marg.append(Mixture(np.concatenate([0.5 * mix.weights, 0.5 * mix.weights]),
                                np.concatenate([mix.means, mix.means + shift]), mix.stds[0]))
    return GroundTruth(joint, base.prior), GroundTruth(marg, base.prior)


def ladder_truth(D: int, K_X: int, mode_scale: float, sigma_y: float) -> GroundTruth:
    """Single-mode classes spaced ``mode_scale / 2`` apart along the all-ones direction.

    With the confounder shift equal to the spacing, class k under Z=1 sits
    exactly on class k+1 under Z=0, so per-leaf marginals overlap and only
    the Z-consistency across leaves separates the classes.
    """
    step = mode_scale / 2.0
    ones = np.ones(D)
    classes = [Mixture([1.0], [(k - (K_X - 1) / 2.0) * step * ones], [sigma_y]) for k in range(K_X)]
    return GroundTruth(classes, np.full(K_X, 1.0 / K_X))


def gen_confounded(spec: SyntheticSpec, delta: float | None = None
                   ) -> tuple[ConfoundedData, GroundTruth, GroundTruth]:
    """Two leaves whose means both shift by ``delta * 1`` when hidden Z = 1.

    The base conditional is :func:`ladder_truth`.  Returns the data, the exact
    joint truth (Z summed out) and the per-leaf marginal truth that a
    CI-assuming product would use.
    """
    delta = spec.mode_scale / 2.0 if delta is None else float(delta)
    base = ladder_truth(spec.D, spec.K_X, spec.mode_scale, spec.sigma_y)
    rng = np.random.default_rng(spec.seed)
    n = spec.n_train
    k = rng.choice(spec.K_X, size=n, p=base.prior)
    z = rng.integers(0, 2, size=n)
    ys = []
    for _ in range(2):
        y = np.empty((n, spec.D))
        for c in range(spec.K_X):
            sel = k == c
            y[sel] = base.classes[c].sample(int(sel.sum()), rng)
        ys.append(y + delta * z[:, None])
    joint, marg = confounded_truth(base, delta)
    return ConfoundedData(k, z, ys[0], ys[1], delta), joint, marg


def anti_aligned_queries(base: GroundTruth, delta: float) -> np.ndarray:
    """Joint queries (y1, y2) with one leaf at a class mode under Z=0 and the other under Z=1.

    Both leaf orders are included for every mode of every class.
    """
    shift = delta * np.ones(base.dim)
    rows = []
    for mix in base.classes:
        for m in mix.means:
            rows.append(np.concatenate([m, m + shift]))
            rows.append(np.concatenate([m + shift, m]))
    return np.array(rows)


# ---------------------------------------------------------------------------
# high-cardinality parents

@dataclass
class HighCardTruth:
    W: np.ndarray  # (D, M, K)
    sigma_y: float

    @property
    def M(self) -> int:
        return self.W.shape[1]

    @property
    def K(self) -> int:
        return self.W.shape[2]

    @property
    def n_configs(self) -> int:
        return self.K ** self.M

    def all_configs(self) -> np.ndarray:
        return np.array(list(itertools.product(range(self.K), repeat=self.M)), dtype=np.int64)

    def means(self, configs: np.ndarray) -> np.ndarray:
        configs = np.atleast_2d(configs)
        return sum(self.W[:, m, configs[:, m]].T for m in range(self.M))

    def log_likelihood(self, y: np.ndarray, configs: np.ndarray | None = None) -> np.ndarray:
        configs = self.all_configs() if configs is None else configs
        mu = self.means(configs)
        y = np.atleast_2d(y)
        D = y.shape[1]
        d2 = (np.sum(y ** 2, axis=1)[:, None] - 2.0 * y @ mu.T + np.sum(mu ** 2, axis=1)[None, :])
        return -0.5 * np.maximum(d2, 0.0) / self.sigma_y ** 2 - D * (np.log(self.sigma_y) + 0.5 * _LOG_2PI)

    def posterior(self, y: np.ndarray) -> np.ndarray:
        """Exact posterior over all K^M configurations (uniform prior)."""
        ll = self.log_likelihood(y)
        return np.exp(ll - logsumexp(ll, axis=1, keepdims=True))


def config_index(configs: np.ndarray, K: int) -> np.ndarray:
    configs = np.atleast_2d(configs)
    M = configs.shape[1]
    return configs @ (K ** np.arange(M - 1, -1, -1))


def gen_highcard_parents(M: int, K: int, n: int, seed: int, D: int = 5,
                         mode_scale: float = 2.0, sigma_y: float = 0.4
                         ) -> tuple[Dataset, HighCardTruth]:
    """Y | c ~ N(sum_m W[:, m, c_m], sigma_y^2 I) with W ~ N(0, 1) * s / sqrt(M)."""
    if n < 1 or M < 1 or K < 2:
        raise ValueError("need n >= 1, M >= 1, K >= 2")
    if M * np.log(K) > 31 * np.log(2):
        raise OverflowError(f"K^M = {K}^{M} exceeds 2^31 configurations")
    rng = np.random.default_rng(seed)
    W = rng.standard_normal((D, M, K)) * mode_scale / np.sqrt(M)
    truth = HighCardTruth(W, sigma_y)
    configs = rng.integers(0, K, size=(n, M))
    y = truth.means(configs) + sigma_y * rng.standard_normal((n, D))
    return Dataset(configs, y), truth


# ---------------------------------------------------------------------------
# low-rank evidence

@dataclass
class LowRankData:
    dataset: Dataset
    Q: np.ndarray
    latent: np.ndarray


def gen_lowrank(D_ambient: int, r: int, spec: SyntheticSpec) -> tuple[LowRankData, GroundTruth]:
    """r-dim anticorrelated bimodal latent embedded by an orthonormal Q plus small noise."""
    if r >= D_ambient:
        raise ValueError("need r < D_ambient")
    base = anticorr_truth(r, spec.K_X, spec.mode_scale, spec.sigma_y)
    rng = np.random.default_rng(spec.seed)
    Q, _ = np.linalg.qr(rng.standard_normal((D_ambient, r)))
    k, z = base.sample(spec.n_train, rng)
    noise = spec.sigma_y / 10.0
    y = z @ Q.T + noise * rng.standard_normal((spec.n_train, D_ambient))
    cov = spec.sigma_y ** 2 * Q @ Q.T + noise ** 2 * np.eye(D_ambient)
    classes = []
    for mix in base.classes:
        means = mix.means @ Q.T
        classes.append(Mixture(mix.weights, means, mix.stds, covs=np.stack([cov] * len(mix.weights))))
    return LowRankData(Dataset(k, y), Q, z), GroundTruth(classes, base.prior)


# ---------------------------------------------------------------------------
# tabular data

@dataclass
class TabularSplit:
    X_train: np.ndarray
    y_train: np.ndarray
    X_test: np.ndarray
    y_test: np.ndarray
    priors: np.ndarray
    feature_names: list[str]
    classes: list[str]
    mean: np.ndarray = field(repr=False)
    std: np.ndarray = field(repr=False)

    @property
    def n_features(self) -> int:
        return self.X_train.shape[1]


def read_delimited(path: str | Path, label_column: str, delimiter: str = ","
                   ) -> tuple[np.ndarray, np.ndarray, list[str]]:
    """Read a header-row delimited file into (features, raw labels, feature names)."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh, delimiter=delimiter)
        header = next(reader, None)
        if header is None:
            raise ValueError(f"{path}: empty file")
        header = [h.strip() for h in header]
        if label_column not in header:
            raise ValueError(f"{path}: label column {label_column!r} not found")
        li = header.index(label_column)
        feats = [h for i, h in enumerate(header) if i != li]
        X, labels = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise ValueError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            lab = row[li].strip()
            if not lab:
                raise ValueError(f"{path}:{lineno}: missing label")
            vals = []
            for i, cell in enumerate(row):
                if i == li:
                    continue
                try:
                    vals.append(float(cell))
                except ValueError:
                    raise ValueError(f"{path}:{lineno}: non-numeric value {cell!r} "
                                     f"in column {header[i]!r}") from None
            X.append(vals)
            labels.append(lab)
    return np.array(X, dtype=float), np.array(labels), feats


def stratified_split(labels: np.ndarray, test_size: float = 0.2, seed: int = 42
                     ) -> tuple[np.ndarray, np.ndarray]:
    from sklearn.model_selection import train_test_split

    idx = np.arange(len(labels))
    tr, te = train_test_split(idx, test_size=test_size, stratify=labels, random_state=seed)
    return np.sort(tr), np.sort(te)


def load_tabular(path: str | Path, label_column: str = "label", seed: int = 42) -> TabularSplit:
    """Stratified 80/20 split (fixed seed), standardized with train-set statistics."""
    X, raw, feats = read_delimited(path, label_column)
    classes = sorted(set(raw.tolist()), key=_label_key)
    counts = {c: int(np.sum(raw == c)) for c in classes}
    small = [c for c, n in counts.items() if n < 2]
    if small:
        raise ValueError(f"classes with fewer than 2 rows: {small}")
    y = np.array([classes.index(v) for v in raw])
    tr, te = stratified_split(y, 0.2, seed)
    mean = X[tr].mean(axis=0)
    std = X[tr].std(axis=0)
    std[std == 0] = 1.0
    Xtr = (X[tr] - mean) / std
    Xte = (X[te] - mean) / std
    priors = np.bincount(y[tr], minlength=len(classes)) / len(tr)
    return TabularSplit(Xtr, y[tr], Xte, y[te], priors, feats, classes, mean, std)


def _label_key(v: str):
    try:
        return (0, float(v), v)
    except ValueError:
        return (1, 0.0, v)
