"""Closed-form predictors for the energy landscape and the valley-weight curve.

All functions are pure.  ``measured_gap`` and ``fit_linear`` connect the
predictors to trained models via energies evaluated at the class modes.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .fem_model import LAMBDA_TABLE

# log-lambda slope per unit D in the two growth phases
PHASE2_SLOPE = 0.54
PHASE3_SLOPE = 0.80
FLAT_LAMBDA = 0.3


@dataclass(frozen=True)
class LandscapeParams:
    D: int
    s: float
    sigma_y: float
    K_X: int = 3
    R: float = 10.0
    delta_E: float = 0.0

    def __post_init__(self):
        if self.D < 1:
            raise ValueError("D must be >= 1")
        if min(self.s, self.sigma_y, self.K_X, self.R) <= 0:
            raise ValueError("s, sigma_y, K_X and R must be positive")


def ideal_center_energy(D: float, s: float, sigma_y: float) -> float:
    """Energy of a Gaussian class at the origin when its mode sits at distance s per dim.

    ``D * s**2 / (2 * sigma_y**2)``; the additive normalizer is dropped.
    """
    if sigma_y <= 0:
        raise ValueError("sigma_y must be positive")
    ratio = s / sigma_y
    return D * ratio * ratio / 2.0


def softmax_peak(delta_E: float) -> float:
    """Approximate winning softmax probability ``1 - exp(-delta_E)``.

    Only meaningful for delta_E >> 0; the result is clamped to the open
    interval (0, 1) so that tiny or negative gaps do not return 0 or below.
    """
    tiny = np.finfo(float).tiny
    return float(min(max(-math.expm1(-delta_E), tiny), 1.0 - np.finfo(float).eps))


def conflict_probability(K_X: int, sigma_y: float, R: float, D: float) -> float:
    """Chance that a uniform off-data point lands in some class-mode neighbourhood.

    ``K_X * (sigma_y * sqrt(2 pi) / R) ** D`` clamped to [0, 1].  It decays in
    D only when ``R > sigma_y * sqrt(2 pi)``.
    """
    if R <= 0 or sigma_y <= 0:
        raise ValueError("R and sigma_y must be positive")
    val = K_X * (sigma_y * math.sqrt(2.0 * math.pi) / R) ** D
    return float(min(max(val, 0.0), 1.0))


def solve_box_half_range(target: float, K_X: int, sigma_y: float, D: float) -> float:
    """Invert ``conflict_probability`` for R."""
    if not 0 < target < K_X:
        raise ValueError("target must lie in (0, K_X)")
    return sigma_y * math.sqrt(2.0 * math.pi) / (target / K_X) ** (1.0 / D)


@dataclass(frozen=True)
class Phase:
    phase: int
    slope: float
    lambda_hat: float


def phase_classify(D: int) -> Phase:
    """Three-regime predictor of the valley weight.

    Phase 1 (D <= 4) is flat at 0.3.  Phase 2 (5 <= D <= 8) grows by
    ``exp(0.54)`` per dimension from the calibrated weight at D=5, and phase 3
    (D >= 9) grows by ``exp(0.80)`` from the calibrated weight at D=8.
    """
    if D < 2:
        raise ValueError("D must be >= 2")
    if D <= 4:
        return Phase(1, 0.0, FLAT_LAMBDA)
    if D <= 8:
        return Phase(2, PHASE2_SLOPE, LAMBDA_TABLE[5] * math.exp(PHASE2_SLOPE * (D - 5)))
    return Phase(3, PHASE3_SLOPE, LAMBDA_TABLE[8] * math.exp(PHASE3_SLOPE * (D - 8)))


def measured_gap(energies_at_modes: np.ndarray, owners: np.ndarray) -> float:
    """Mean cross-class gap: E_other(mode) - E_owner(mode), over modes and other classes.

    ``energies_at_modes`` is (n_modes, K) at sigma_min; ``owners`` the owning
    class of each mode row.
    """
    E = np.atleast_2d(np.asarray(energies_at_modes, dtype=float))
    owners = np.asarray(owners, dtype=int).reshape(-1)
    if E.shape[0] != owners.size:
        raise ValueError("one owner per mode row required")
    own = E[np.arange(E.shape[0]), owners]
    mask = np.ones_like(E, dtype=bool)
    mask[np.arange(E.shape[0]), owners] = False
    return float(np.mean((E - own[:, None])[mask]))


def fit_linear(x, y) -> tuple[float, float, float]:
    """Least-squares line; returns (slope, intercept, R^2)."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_tot = np.sum((y - y.mean()) ** 2)
    r2 = 1.0 - np.sum(resid ** 2) / ss_tot if ss_tot > 0 else 1.0
    return float(slope), float(intercept), float(r2)
