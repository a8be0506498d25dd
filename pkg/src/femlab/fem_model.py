"""The FEM energy network: losses, training, posterior, composition, sampling.

The energy of evidence ``y`` under parent value ``k`` at noise level ``sigma``
is an MLP over ``concat[prototype_k, y, sigma_embedding(sigma)]``.  Training
combines denoising score matching with a cross-entropy anchor at the smallest
noise level, prototype repulsion, and the valley term that asks for uniform
posteriors at random off-data points.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import ndcore as nd

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = "femlab-checkpoint/1"
PROB_FLOOR = 1e-12

# Calibrated valley weight per evidence dimension (K_X=3 anticorrelated bimodal setup).
LAMBDA_TABLE = {2: 0.3, 3: 0.3, 4: 0.3, 5: 1.5, 6: 2.0, 7: 5.0, 8: 5.0, 9: 15.0, 10: 25.0, 11: 55.0}


class TrainingAborted(RuntimeError):
    """A loss went non-finite; carries the epoch/step where it happened."""


class SamplingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class SigmaSchedule:
    levels: tuple[float, ...]

    def __post_init__(self):
        lv = np.asarray(self.levels, dtype=float)
        if lv.size == 0 or np.any(lv <= 0) or np.any(np.diff(lv) >= 0):
            raise ValueError("sigma levels must be positive and strictly decreasing")

    @classmethod
    def geometric(cls, sigma_max: float, sigma_min: float = 0.01, n_levels: int = 10) -> "SigmaSchedule":
        if not sigma_max > sigma_min > 0:
            raise ValueError("need sigma_max > sigma_min > 0")
        return cls(tuple(float(v) for v in np.geomspace(sigma_max, sigma_min, n_levels)))

    @property
    def sigma_min(self) -> float:
        return self.levels[-1]

    @property
    def sigma_max(self) -> float:
        return self.levels[0]

    def __len__(self) -> int:
        return len(self.levels)


@dataclass
class TrainConfig:
    lambda_valley: float = 0.0
    lambda_proto: float = 0.1
    lambda_xent: float = 1.0
    lr: float = 1e-3
    batch_size: int = 256
    epochs: int = 200
    seed: int = 0
    max_steps: int | None = None
    # Sampled negatives for the CE anchor when the parent space is huge; None = all values.
    xent_negatives: int | None = None

    def __post_init__(self):
        for name in ("lambda_valley", "lambda_proto", "lambda_xent"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.lr <= 0 or self.batch_size < 1 or self.epochs < 1:
            raise ValueError("lr, batch_size and epochs must be positive")


def lambda_lookup(D: int) -> float:
    """Calibrated valley weight for evidence dimension ``D`` (2..11, no extrapolation)."""
    if D not in LAMBDA_TABLE:
        raise ValueError(f"no calibrated lambda for D={D}; table covers 2..11")
    return LAMBDA_TABLE[D]


def sigma_embedding(sigma, dim: int = 16) -> np.ndarray:
    """Interleaved sin/cos features of ``log sigma``.

    Frequencies are ``2**(i - dim/4)`` for ``i = 0..dim/2-1``, so at
    ``sigma = 1`` the vector is ``(0, 1, 0, 1, ...)``.  Accepts a scalar or a
    1-D array of sigmas (one row per sigma).
    """
    if dim <= 0 or dim % 2:
        raise ValueError("embedding dim must be a positive even integer")
    s = np.asarray(sigma, dtype=float)
    if np.any(s <= 0):
        raise ValueError("sigma must be positive")
    half = dim // 2
    freqs = 2.0 ** (np.arange(half) - half / 2)
    angles = np.log(s)[..., None] * freqs
    out = np.empty(angles.shape[:-1] + (dim,))
    out[..., 0::2] = np.sin(angles)
    out[..., 1::2] = np.cos(angles)
    return out


def _uniform_init(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class EnergyModel:
    """Conditional energy ``E(k, y, sigma)`` over one or several discrete parents.

    ``parent_cards`` lists the cardinality of each parent.  A single parent
    gets one prototype table of width ``proto_dim``; several parents get one
    table each of width ``parent_dim`` whose selected rows are concatenated,
    so no table over the joint configuration space is ever built.
    """

    def __init__(self, input_dim: int, parent_cards: Sequence[int], schedule: SigmaSchedule,
                 hidden: Sequence[int] = (128, 128), proto_dim: int = 8, parent_dim: int = 4,
                 sigma_embed_dim: int = 16, seed: int = 0, extent: np.ndarray | None = None):
        if input_dim < 1:
            raise ValueError("input_dim must be >= 1")
        self.input_dim = int(input_dim)
        self.parent_cards = tuple(int(c) for c in parent_cards)
        if not self.parent_cards or min(self.parent_cards) < 1:
            raise ValueError("need at least one parent with cardinality >= 1")
        self.schedule = schedule
        self.hidden = tuple(int(h) for h in hidden)
        self.proto_dim = int(proto_dim)
        self.parent_dim = int(parent_dim)
        self.sigma_embed_dim = int(sigma_embed_dim)
        if self.sigma_embed_dim % 2:
            raise ValueError("sigma_embed_dim must be even")
        self.seed = int(seed)
        self.extent = None if extent is None else np.asarray(extent, dtype=float)

        rng = np.random.default_rng(seed)
        width = self.proto_dim if self.single_parent else self.parent_dim
        self.tables = [nd.Tensor(rng.normal(size=(c, width)), requires_grad=True)
                       for c in self.parent_cards]
        sizes = [self.embed_dim + self.input_dim + self.sigma_embed_dim, *self.hidden, 1]
        self.layers = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            w = nd.Tensor(_uniform_init(rng, fan_in, (fan_in, fan_out)), requires_grad=True)
            b = nd.Tensor(_uniform_init(rng, fan_in, (fan_out,)), requires_grad=True)
            self.layers.append((w, b))

    # -- structure ---------------------------------------------------------
    @property
    def single_parent(self) -> bool:
        return len(self.parent_cards) == 1

    @property
    def n_classes(self) -> int:
        """Number of values of the (single) parent; joint size for several parents."""
        return int(np.prod(self.parent_cards, dtype=np.int64))

    @property
    def embed_dim(self) -> int:
        if self.single_parent:
            return self.proto_dim
        return self.parent_dim * len(self.parent_cards)

    @property
    def prototypes(self) -> np.ndarray:
        return np.concatenate([t.data for t in self.tables], axis=0)

    def parameters(self) -> list[nd.Tensor]:
        return [*self.tables, *(p for layer in self.layers for p in layer)]

    # -- energy ------------------------------------------------------------
    def _config_array(self, k) -> np.ndarray:
        k = np.asarray(k, dtype=np.int64)
        if self.single_parent:
            if k.ndim == 2 and k.shape[1] == 1:
                k = k[:, 0]
            k = k.reshape(-1)
            if k.size and (k.min() < 0 or k.max() >= self.parent_cards[0]):
                raise IndexError(f"class index out of range [0, {self.parent_cards[0]})")
            return k[:, None]
        k = np.atleast_2d(k)
        if k.shape[1] != len(self.parent_cards):
            raise IndexError(f"parent config needs {len(self.parent_cards)} entries")
        if np.any(k < 0) or np.any(k >= np.asarray(self.parent_cards)):
            raise IndexError("parent value out of range")
        return k

    def embed(self, k) -> nd.Tensor:
        cfg = self._config_array(k)
        parts = [nd.take_rows(t, cfg[:, m]) for m, t in enumerate(self.tables)]
        return parts[0] if len(parts) == 1 else nd.concat(parts)

    def energy_tensor(self, k, y, sigma) -> nd.Tensor:
        """Batched energies, one per row of ``y`` (``k`` and ``sigma`` broadcast per row)."""
        y = y if isinstance(y, nd.Tensor) else nd.Tensor(np.atleast_2d(np.asarray(y, dtype=float)))
        n = y.shape[0]
        if y.shape[1] != self.input_dim:
            raise ValueError(f"evidence has dim {y.shape[1]}, model expects {self.input_dim}")
        cfg = self._config_array(k)
        if cfg.shape[0] == 1 and n > 1:
            cfg = np.repeat(cfg, n, axis=0)
        sig = np.broadcast_to(np.asarray(sigma, dtype=float), (n,))
        phi = nd.Tensor(sigma_embedding(sig, self.sigma_embed_dim))
        x = nd.concat([self.embed(cfg), y, phi])
        return nd.forward_mlp(self.layers, x)

    def energy(self, k, y, sigma: float | None = None) -> float:
        """Scalar energy for one parent value/config and one evidence vector."""
        y = np.asarray(y, dtype=float)
        if y.shape != (self.input_dim,):
            raise ValueError(f"evidence must have shape ({self.input_dim},)")
        sigma = self.schedule.sigma_min if sigma is None else sigma
        with nd.no_grad():
            return float(self.energy_tensor([k] if self.single_parent else [k], y[None], sigma).data[0])

    def energies(self, y, sigma: float | None = None, configs: np.ndarray | None = None) -> np.ndarray:
        """Energy matrix of shape (n, n_values) at ``sigma`` (default sigma_min).

        For multi-parent models pass ``configs`` (rows of parent values) to pick
        the columns; otherwise every value of the single parent is used.
        """
        y = np.atleast_2d(np.asarray(y, dtype=float))
        sigma = self.schedule.sigma_min if sigma is None else sigma
        if configs is None:
            if not self.single_parent:
                raise ValueError("multi-parent energies need explicit configs")
            configs = np.arange(self.parent_cards[0])[:, None]
        configs = np.atleast_2d(configs) if not self.single_parent else np.asarray(configs).reshape(-1, 1)
        n, c = y.shape[0], configs.shape[0]
        out = np.empty((n, c))
        chunk = max(1, 65536 // max(n, 1))
        with nd.no_grad():
            for start in range(0, c, chunk):
                cfg = configs[start:start + chunk]
                rows_cfg = np.repeat(cfg, n, axis=0)
                rows_y = np.tile(y, (cfg.shape[0], 1))
                e = self.energy_tensor(rows_cfg, nd.Tensor(rows_y), sigma).data
                out[:, start:start + cfg.shape[0]] = e.reshape(cfg.shape[0], n).T
        return out

    def _class_energy_tensor(self, y: nd.Tensor, sigma: float, values: np.ndarray) -> nd.Tensor:
        """(n, len(values)) energies as a graph node, single-parent only."""
        n = y.shape[0]
        k = np.repeat(values, n)
        rows = nd.concat([y] * len(values), axis=0) if len(values) > 1 else y
        e = self.energy_tensor(k, rows, sigma)
        return nd.transpose(nd.reshape(e, (len(values), n)))

    def score(self, k, y, sigma: float) -> np.ndarray:
        """Model score ``-dE/dy`` for a batch of evidence rows."""
        y_t = nd.Tensor(np.atleast_2d(np.asarray(y, dtype=float)), requires_grad=True)
        e = self.energy_tensor(k, y_t, sigma)
        return -nd.grad(nd.sum(e), [y_t])[0].data

    # -- persistence -------------------------------------------------------
    def hyperparameters(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "parent_cards": list(self.parent_cards),
            "schedule": list(self.schedule.levels),
            "hidden": list(self.hidden),
            "proto_dim": self.proto_dim,
            "parent_dim": self.parent_dim,
            "sigma_embed_dim": self.sigma_embed_dim,
            "seed": self.seed,
            "extent": None if self.extent is None else self.extent.tolist(),
        }

    def save(self, path: str | Path) -> None:
        meta = {"version": CHECKPOINT_VERSION, "hyperparameters": self.hyperparameters()}
        arrays = {f"table_{i}": t.data for i, t in enumerate(self.tables)}
        for i, (w, b) in enumerate(self.layers):
            arrays[f"w_{i}"] = w.data
            arrays[f"b_{i}"] = b.data
        with open(path, "wb") as fh:
            np.savez(fh, meta=np.array(json.dumps(meta)), **arrays)

    @classmethod
    def load(cls, path: str | Path) -> "EnergyModel":
        with np.load(path, allow_pickle=False) as z:
            meta = json.loads(str(z["meta"]))
            if meta.get("version") != CHECKPOINT_VERSION:
                raise ValueError(f"unsupported checkpoint version {meta.get('version')!r}")
            hp = meta["hyperparameters"]
            model = cls(hp["input_dim"], hp["parent_cards"], SigmaSchedule(tuple(hp["schedule"])),
                        hidden=hp["hidden"], proto_dim=hp["proto_dim"], parent_dim=hp["parent_dim"],
                        sigma_embed_dim=hp["sigma_embed_dim"], seed=hp["seed"], extent=hp["extent"])
            for i, t in enumerate(model.tables):
                t.data = z[f"table_{i}"].copy()
            for i, (w, b) in enumerate(model.layers):
                w.data = z[f"w_{i}"].copy()
                b.data = z[f"b_{i}"].copy()
        return model


def build_model(input_dim: int, n_classes: int | Sequence[int], mode_scale: float,
                seed: int = 0, hidden: Sequence[int] = (128, 128), n_levels: int = 10,
                sigma_min: float = 0.01, extent: np.ndarray | None = None) -> EnergyModel:
    """Model with the default schedule: geometric, sigma_max = 2 * mode_scale."""
    cards = [n_classes] if isinstance(n_classes, (int, np.integer)) else list(n_classes)
    schedule = SigmaSchedule.geometric(2.0 * mode_scale, sigma_min, n_levels)
    return EnergyModel(input_dim, cards, schedule, hidden=hidden, seed=seed, extent=extent)


# ---------------------------------------------------------------------------
# losses

def dsm_loss(model: EnergyModel, k, y, sigma_idx=None, noise=None,
             rng: np.random.Generator | None = None) -> nd.Tensor:
    """sigma^2-weighted denoising score matching, averaged over the batch.

    ``mean_i || sigma_i * dE/dz(z_i) - eps_i ||^2`` with ``z_i = y_i + sigma_i * eps_i``,
    which equals ``sigma^2 * ||score - (y - z)/sigma^2||^2``.
    """
    y = np.atleast_2d(np.asarray(y, dtype=float))
    n = y.shape[0]
    if n == 0:
        raise ValueError("empty batch")
    rng = rng if rng is not None else np.random.default_rng()
    levels = np.asarray(model.schedule.levels)
    if sigma_idx is None:
        sigma_idx = rng.integers(0, len(levels), size=n)
    sig = levels[np.asarray(sigma_idx)].reshape(n)
    eps = rng.standard_normal(y.shape) if noise is None else np.asarray(noise, dtype=float)
    z = nd.Tensor(y + sig[:, None] * eps, requires_grad=True)
    e = model.energy_tensor(k, z, sig)
    g = nd.grad(nd.sum(e), [z], create_graph=True)[0]
    resid = nd.sub(nd.mul(g, sig[:, None]), eps)
    return nd.mean(nd.sum(nd.square(resid), axis=1))


def _pair_matrix(n: int) -> np.ndarray:
    pairs = [(i, j) for i in range(n) for j in range(i + 1, n)]
    s = np.zeros((len(pairs), n))
    for r, (i, j) in enumerate(pairs):
        s[r, i], s[r, j] = 1.0, -1.0
    return s


def proto_repulsion_loss(model: EnergyModel, margin: float) -> nd.Tensor:
    """Negative mean pairwise squared distance, each pair clipped at ``margin**2``.

    Clipped pairs contribute the constant ``-margin**2`` and no gradient.  With
    several parent tables the per-table losses are averaged.
    """
    terms = []
    for table in model.tables:
        n = table.shape[0]
        if n < 2:
            continue
        if n > 64:
            # all-pairs is quadratic; large tables are not repelled
            continue
        diffs = nd.matmul(nd.Tensor(_pair_matrix(n)), table)
        d2 = nd.sum(nd.square(diffs), axis=1)
        keep = (d2.data < margin ** 2).astype(float)
        clipped = nd.add(nd.mul(d2, keep), (1.0 - keep) * margin ** 2)
        terms.append(nd.neg(nd.mean(clipped)))
    if not terms:
        return nd.Tensor(0.0)
    total = terms[0]
    for t in terms[1:]:
        total = nd.add(total, t)
    return nd.mul(total, 1.0 / len(terms))


def xent_anchor_loss(model: EnergyModel, k, y, negatives: int | None = None,
                     rng: np.random.Generator | None = None) -> nd.Tensor:
    """Cross-entropy of softmax(-E(., y, sigma_min)) against the true value.

    For multi-parent models the candidate set is the true configuration plus
    ``negatives`` random configurations (sampled softmax), since the joint
    space is too large to enumerate per step.
    """
    y = np.atleast_2d(np.asarray(y, dtype=float))
    n = y.shape[0]
    if n == 0:
        raise ValueError("empty batch")
    smin = model.schedule.sigma_min
    y_t = nd.Tensor(y)
    if model.single_parent and negatives is None:
        k = np.asarray(k, dtype=np.int64).reshape(-1)
        K = model.parent_cards[0]
        logits = nd.neg(model._class_energy_tensor(y_t, smin, np.arange(K)))
        onehot = np.zeros((n, K))
        onehot[np.arange(n), k] = 1.0
    else:
        rng = rng if rng is not None else np.random.default_rng()
        cfg = model._config_array(k)
        n_neg = negatives or 16
        cols = [cfg] + [np.stack([rng.integers(0, c, size=n) for c in model.parent_cards], axis=1)
                        for _ in range(n_neg)]
        rows = np.concatenate(cols, axis=0)
        e = model.energy_tensor(rows, nd.concat([y_t] * len(cols), axis=0), smin)
        logits = nd.neg(nd.transpose(nd.reshape(e, (len(cols), n))))
        onehot = np.zeros((n, len(cols)))
        onehot[:, 0] = 1.0
    lsm = nd.log_softmax(logits, axis=1)
    return nd.neg(nd.mean(nd.sum(nd.mul(lsm, onehot), axis=1)))


def valley_box(extent: np.ndarray, scale: float = 1.5) -> np.ndarray:
    """Per-dim (lo, hi) box: the data extent scaled about its center."""
    ext = np.asarray(extent, dtype=float)
    if ext.ndim != 2 or ext.shape[1] != 2 or np.any(ext[:, 1] < ext[:, 0]):
        raise ValueError("extent must be an array of (min, max) rows")
    center = ext.mean(axis=1)
    half = 0.5 * (ext[:, 1] - ext[:, 0]) * scale
    return np.stack([center - half, center + half], axis=1)


def _floored_log_softmax(logits: nd.Tensor, floor: float) -> nd.Tensor:
    lsm = nd.log_softmax(logits, axis=1)
    keep = (lsm.data > math.log(floor)).astype(float)
    return nd.add(nd.mul(lsm, keep), (1.0 - keep) * math.log(floor))


def valley_loss_tensor(model: EnergyModel, y_r: np.ndarray, floor: float = PROB_FLOOR) -> nd.Tensor:
    K = model.parent_cards[0]
    logits = nd.neg(model._class_energy_tensor(nd.Tensor(y_r), model.schedule.sigma_min, np.arange(K)))
    lsm = _floored_log_softmax(logits, floor)
    return nd.neg(nd.mean(nd.mul(nd.sum(lsm, axis=1), 1.0 / K)))


def valley_loss(model: EnergyModel, extent, n_samples: int, rng: np.random.Generator | None = None,
                floor: float = PROB_FLOOR) -> float:
    """Mean over uniform off-data points of -(1/K) sum_k log softmax_k, floored at ``floor``.

    Bounded below by log K (uniform softmax everywhere).
    """
    if n_samples <= 0:
        raise ValueError("n_samples must be positive")
    if not model.single_parent:
        raise ValueError("valley loss is defined for single-parent models")
    rng = rng if rng is not None else np.random.default_rng()
    box = valley_box(extent)
    y_r = rng.uniform(box[:, 0], box[:, 1], size=(n_samples, box.shape[0]))
    with nd.no_grad():
        return float(valley_loss_tensor(model, y_r, floor).data)


def valley_from_logits(logits: np.ndarray, floor: float = PROB_FLOOR) -> float:
    """Valley value computed from a logit matrix (n, K); used to check the bound directly."""
    logits = np.atleast_2d(logits)
    lsm = logits - _lse(logits)[:, None]
    lsm = np.maximum(lsm, math.log(floor))
    return float(-np.mean(lsm.mean(axis=1)))


def _lse(a: np.ndarray) -> np.ndarray:
    m = a.max(axis=1, keepdims=True)
    return (m + np.log(np.exp(a - m).sum(axis=1, keepdims=True)))[:, 0]


# ---------------------------------------------------------------------------
# training

class Adam:
    def __init__(self, params: Sequence[nd.Tensor], lr: float = 1e-3,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, grads: Sequence[np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class LossHistory:
    dsm: list[float] = field(default_factory=list)
    proto: list[float] = field(default_factory=list)
    xent: list[float] = field(default_factory=list)
    valley: list[float] = field(default_factory=list)
    total: list[float] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.total)

    def as_dict(self) -> dict:
        return asdict(self)


def data_extent(y: np.ndarray) -> np.ndarray:
    y = np.atleast_2d(y)
    return np.stack([y.min(axis=0), y.max(axis=0)], axis=1)


def train(model: EnergyModel, k, y, config: TrainConfig, margin: float | None = None
          ) -> tuple[EnergyModel, LossHistory]:
    """Fit the model in place with Adam on the four-term objective.

    ``k`` holds class labels (or parent-config rows), ``y`` the evidence rows.
    Returns the model and per-epoch means of each loss component.
    """
    y = np.atleast_2d(np.asarray(y, dtype=float))
    cfg_all = model._config_array(k)
    n = y.shape[0]
    if n == 0:
        raise ValueError("empty dataset")
    if not np.all(np.isfinite(y)):
        raise ValueError("evidence contains non-finite values")
    if model.extent is None:
        model.extent = data_extent(y)
    box = valley_box(model.extent)
    if margin is None:
        # sigma_max = 2 * mode_scale, so this is 4 * mode_scale
        margin = 2.0 * model.schedule.sigma_max
    use_valley = config.lambda_valley > 0 and model.single_parent
    use_proto = config.lambda_proto > 0 and len(model.tables[0].data) >= 2

    rng = np.random.default_rng(config.seed)
    opt = Adam(model.parameters(), lr=config.lr)
    params = model.parameters()
    hist = LossHistory()
    steps_per_epoch = max(1, math.ceil(n / config.batch_size))
    step = 0
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        sums = np.zeros(5)
        count = 0
        for b in range(steps_per_epoch):
            idx = order[b * config.batch_size:(b + 1) * config.batch_size]
            kb = cfg_all[idx] if not model.single_parent else cfg_all[idx, 0]
            yb = y[idx]
            try:
                l_dsm = dsm_loss(model, kb, yb, rng=rng)
                total = l_dsm
                l_proto = l_xent = l_valley = None
                if use_proto:
                    l_proto = proto_repulsion_loss(model, margin)
                    total = nd.add(total, nd.mul(l_proto, config.lambda_proto))
                if config.lambda_xent > 0:
                    l_xent = xent_anchor_loss(model, kb, yb, negatives=config.xent_negatives, rng=rng)
                    total = nd.add(total, nd.mul(l_xent, config.lambda_xent))
                if use_valley:
                    y_r = rng.uniform(box[:, 0], box[:, 1], size=(len(idx), box.shape[0]))
                    l_valley = valley_loss_tensor(model, y_r)
                    total = nd.add(total, nd.mul(l_valley, config.lambda_valley))
                grads = nd.second_order_param_grad(total, params)
            except nd.NonFiniteError as exc:
                raise TrainingAborted(f"non-finite loss at epoch {epoch}, step {step}: {exc}") from exc
            opt.step(grads)
            vals = [l_dsm, l_proto, l_xent, l_valley, total]
            sums += [0.0 if v is None else float(v.data) for v in vals]
            count += 1
            step += 1
            if config.max_steps is not None and step >= config.max_steps:
                break
        means = sums / count
        hist.dsm.append(means[0])
        hist.proto.append(means[1])
        hist.xent.append(means[2])
        hist.valley.append(means[3])
        hist.total.append(means[4])
        log.debug("epoch %d: %s", epoch, means)
        if config.max_steps is not None and step >= config.max_steps:
            break
    return model, hist


# ---------------------------------------------------------------------------
# inference

def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    p = np.exp(z)
    return p / p.sum(axis=-1, keepdims=True)


def posterior_from_energies(leaf_energies: Sequence[np.ndarray], prior: np.ndarray) -> np.ndarray:
    """softmax_k(log prior_k - sum_i E_i[k]); zero prior entries stay at zero."""
    prior = np.asarray(prior, dtype=float)
    if not leaf_energies:
        raise ValueError("evidence must be non-empty")
    if abs(prior.sum() - 1.0) > 1e-9 or np.any(prior < 0):
        raise ValueError("prior must be a probability vector")
    total = np.sum(np.stack([np.asarray(e, dtype=float) for e in leaf_energies]), axis=0)
    with np.errstate(divide="ignore"):
        logits = np.log(prior) - total
    return _softmax_rows(logits)


def posterior(model: EnergyModel, evidence: Sequence[tuple[int, np.ndarray]] | Sequence[np.ndarray],
              prior: np.ndarray | None = None) -> np.ndarray:
    """Posterior over parent values given CI leaves, by energy addition at sigma_min.

    ``evidence`` is a sequence of ``(leaf_id, y)`` pairs (or bare ``y`` vectors);
    every leaf shares the same energy factor.  ``y`` may be a single vector or a
    batch of rows, giving one posterior per row.
    """
    if len(evidence) == 0:
        raise ValueError("evidence must be non-empty")
    ys = [e[1] if isinstance(e, tuple) else e for e in evidence]
    K = model.n_classes
    prior = np.full(K, 1.0 / K) if prior is None else prior
    single = np.asarray(ys[0]).ndim == 1
    energies = [model.energies(np.atleast_2d(y)) for y in ys]
    post = posterior_from_energies(energies, prior)
    return post[0] if single else post


def sample_langevin(model: EnergyModel, k, n_samples: int, n_per_level: int = 100,
                    step_scale: float = 2e-5, seed: int = 0) -> np.ndarray:
    """Annealed Langevin samples from E(k, ., sigma) over the full schedule.

    Step size at level i is ``step_scale * sigma_i**2 / sigma_min**2`` and the
    update is ``y <- y - (a/2) dE/dy + sqrt(a) * noise``.  Chains start uniform
    in the valley box.
    """
    if model.extent is None:
        raise ValueError("model has no data extent; train it first")
    rng = np.random.default_rng(seed)
    box = valley_box(model.extent)
    y = rng.uniform(box[:, 0], box[:, 1], size=(n_samples, model.input_dim))
    smin = model.schedule.sigma_min
    for sigma in model.schedule.levels:
        alpha = step_scale * sigma ** 2 / smin ** 2
        for _ in range(n_per_level):
            g = -model.score(k, y, sigma)
            y = y - 0.5 * alpha * g + math.sqrt(alpha) * rng.standard_normal(y.shape)
            if not np.all(np.isfinite(y)) or np.abs(y).max() > 1e6:
                raise SamplingDiverged(f"Langevin chain diverged at sigma={sigma:.4g}")
    return y
