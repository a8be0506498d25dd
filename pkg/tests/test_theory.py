import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from femlab import theory as th
from femlab.fem_model import LAMBDA_TABLE


def test_ideal_center_energy_examples():
    assert th.ideal_center_energy(5, 2, 0.4) == 62.5
    assert th.ideal_center_energy(0, 2, 0.4) == 0.0
    with pytest.raises(ValueError):
        th.ideal_center_energy(5, 2, 0.0)


@given(st.integers(1, 50), st.floats(0.1, 5), st.floats(0.05, 2))
def test_ideal_center_energy_linear_in_D(D, s, sy):
    assert th.ideal_center_energy(2 * D, s, sy) == pytest.approx(2 * th.ideal_center_energy(D, s, sy), rel=1e-12)


def test_softmax_peak():
    assert th.softmax_peak(5.0) == pytest.approx(0.99326, abs=1e-5)
    xs = np.linspace(0.01, 30, 200)
    vals = [th.softmax_peak(x) for x in xs]
    assert all(b >= a for a, b in zip(vals, vals[1:]))
    for x in (0.0, -3.0, 1e-300, 800.0):
        assert 0.0 < th.softmax_peak(x) < 1.0


def test_conflict_probability():
    assert th.conflict_probability(3, 0.4, 10.57, 2) == pytest.approx(0.027, abs=5e-4)
    vals = [th.conflict_probability(3, 0.4, 10.57, D) for D in range(1, 12)]
    assert all(b < a for a, b in zip(vals, vals[1:]))
    assert th.conflict_probability(3, 0.4, 10.57, 400) == 0.0
    assert th.conflict_probability(3, 1.0, 0.5, 3) == 1.0  # clamped when R is inside the mode scale
    with pytest.raises(ValueError):
        th.conflict_probability(3, 0.4, 0.0, 2)


def test_solve_box_half_range_inverts():
    R = th.solve_box_half_range(0.027, 3, 0.4, 2)
    assert R == pytest.approx(10.57, abs=0.01)
    assert th.conflict_probability(3, 0.4, R, 2) == pytest.approx(0.027, rel=1e-12)
    with pytest.raises(ValueError):
        th.solve_box_half_range(5.0, 3, 0.4, 2)


def test_phase_classify():
    p = th.phase_classify(3)
    assert (p.phase, p.lambda_hat) == (1, 0.3)
    assert th.phase_classify(6).phase == 2
    assert th.phase_classify(9).phase == 3
    assert th.phase_classify(7).slope == pytest.approx(0.54)
    for D in range(2, 5):
        assert th.phase_classify(D).lambda_hat == LAMBDA_TABLE[D]
    for D in range(5, 12):
        ratio = th.phase_classify(D).lambda_hat / LAMBDA_TABLE[D]
        assert 0.5 <= ratio <= 2.0, (D, ratio)
    with pytest.raises(ValueError):
        th.phase_classify(1)


def test_landscape_params_validation():
    assert th.LandscapeParams(5, 2.0, 0.4).K_X == 3
    with pytest.raises(ValueError):
        th.LandscapeParams(0, 2.0, 0.4)
    with pytest.raises(ValueError):
        th.LandscapeParams(5, -1.0, 0.4)


def test_measured_gap_examples():
    E = np.array([[0.0, 10.0, 30.0],
                  [5.0, 1.0, 3.0]])
    # row 0 owner 0: gaps 10, 30; row 1 owner 1: gaps 4, 2
    assert th.measured_gap(E, [0, 1]) == pytest.approx(11.5)
    with pytest.raises(ValueError):
        th.measured_gap(E, [0])


def test_measured_gap_gaussian_ideal_matches_formula():
    # Gaussian energies ||y - m||^2 / (2 s^2) at modes +-s*1: the cross gap equals 4x the center energy.
    D, s, sy = 5, 2.0, 0.4
    modes = np.array([-s * np.ones(D), s * np.ones(D)])
    E = np.sum((modes[:, None, :] - modes[None, :, :]) ** 2, axis=2) / (2 * sy ** 2)
    assert th.measured_gap(E, [0, 1]) == pytest.approx(4 * th.ideal_center_energy(D, s, sy))


def test_fit_linear():
    x = np.array([2.0, 5.0, 10.0])
    slope, icpt, r2 = th.fit_linear(x, 3 * x + 1)
    assert (slope, icpt, r2) == pytest.approx((3.0, 1.0, 1.0))
    assert th.fit_linear(x, np.ones(3))[2] == 1.0
    _, _, r2 = th.fit_linear([0, 1, 2, 3], [0, 1, 0, 1])
    assert r2 < 0.5
    assert math.isfinite(r2)


def test_bridge_gap_gaussian_ideal():
    from femlab import benchgen as bg
    from femlab.eval import bridge_gap
    truth = bg.anticorr_truth(5, 3, 2.0, 0.4)
    gap = bridge_gap(lambda y: -truth.log_likelihood(y), truth.classes[1].means)
    m1 = truth.classes[1].means
    others = np.array([truth.classes[0].means[0], truth.classes[2].means[0]])
    d2 = ((m1[:, None, :] - others[None, :, :]) ** 2).sum(axis=2)
    # the other modes are far, so E_other - E_own = d^2 / (2 sigma^2) - ln 2 (the bimodal class halves its mass)
    assert gap == pytest.approx(np.mean(d2) / (2 * 0.16) - math.log(2), rel=1e-9)
