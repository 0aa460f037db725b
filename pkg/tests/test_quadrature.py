from __future__ import annotations

import math

import numpy as np
import pytest

from metaqr import quadrature as qd

VOLUME = ("II", "II", "II")
COPLANAR = ("PP", "II", "II")


def _static_pair(kinds, offsets, rule) -> float:
    """Sum of w * overlap / |x - y| over a difference rule (unit boxes, no phase)."""
    d = qd.difference_vectors(kinds, rule.var, np.asarray(offsets, dtype=float))[0]
    overlap = np.ones(rule.size)
    for ax, kind in enumerate(kinds):
        if kind == "II":
            overlap = overlap * qd.correlation(rule.var[:, ax], None, None)
    return float(np.sum(rule.weights * overlap / np.linalg.norm(d, axis=1)))


def test_gauss_and_tensor_rules_are_normalised():
    x, w = qd.gauss01(4)
    assert w.sum() == pytest.approx(1.0)
    assert np.all((x > 0) & (x < 1))
    pts, wts = qd.tensor_rule(3, 3)
    assert pts.shape == (27, 3)
    assert wts.sum() == pytest.approx(1.0)


def test_graded_rule_integrates_polynomials():
    t, w = qd.graded_rule(5, 4)
    assert w.sum() == pytest.approx(1.0)
    assert np.sum(w * t**4) == pytest.approx(0.2)
    assert t.min() > 0.0


@pytest.mark.parametrize(
    "e, first, second, expected",
    [(0.0, None, None, 1.0), (0.5, None, None, 0.5), (-0.25, None, None, 0.75),
     (0.0, 1, 1, 1 / 3), (0.0, 0, 1, 1 / 6), (0.0, 0, 0, 1 / 3)],
)
def test_correlation_values(e, first, second, expected):
    assert float(qd.correlation(np.array([e]), first, second)[0]) == pytest.approx(expected)


def test_critical_point():
    assert qd.critical_point(VOLUME, (0.0, 0.0, 0.0)) == (0.0, 0.0, 0.0)
    assert qd.critical_point(VOLUME, (1.0, 0.0, -1.0)) == (1.0, 0.0, -1.0)
    assert qd.critical_point(VOLUME, (2.0, 0.0, 0.0)) is None
    assert qd.critical_point(COPLANAR, (1.0, 0.0, 0.0)) is None


def test_regular_rule_integrates_the_overlap_exactly():
    rule = qd.regular_rule(VOLUME, 5)
    overlap = np.prod(1.0 - np.abs(rule.var), axis=1)
    assert np.sum(rule.weights * overlap) == pytest.approx(1.0, rel=1e-13)


def test_coincident_cubes_match_the_known_integral():
    rule = qd.singular_rule(VOLUME, (0.0, 0.0, 0.0), 5, 3)
    assert _static_pair(VOLUME, (0.0, 0.0, 0.0), rule) == pytest.approx(1.8823126, rel=1e-5)


def test_coincident_squares_match_the_closed_form():
    exact = 4.0 * math.log(1.0 + math.sqrt(2.0)) - 4.0 * (math.sqrt(2.0) - 1.0) / 3.0
    rule = qd.singular_rule(COPLANAR, (0.0, 0.0, 0.0), 5, 3)
    assert _static_pair(COPLANAR, (0.0, 0.0, 0.0), rule) == pytest.approx(exact, rel=1e-5)


def test_adding_graded_levels_changes_little():
    coarse = _static_pair(VOLUME, (0.0, 0.0, 0.0), qd.singular_rule(VOLUME, (0.0, 0.0, 0.0), 5, 3))
    fine = _static_pair(VOLUME, (0.0, 0.0, 0.0), qd.singular_rule(VOLUME, (0.0, 0.0, 0.0), 5, 4))
    assert abs(fine - coarse) <= 1e-6 * abs(fine)


def test_touching_cubes_are_finite_and_below_the_coincident_value():
    rule = qd.singular_rule(VOLUME, (1.0, 0.0, 0.0), 5, 3)
    value = _static_pair(VOLUME, (1.0, 0.0, 0.0), rule)
    assert 0.5 < value < 1.8823126


def test_separated_cubes_look_like_point_charges():
    rule = qd.regular_rule(VOLUME, 5)
    assert _static_pair(VOLUME, (4.0, 0.0, 0.0), rule) == pytest.approx(0.25, rel=1e-3)


def test_difference_vectors_per_kind():
    var = np.array([[0.25, 0.5, 0.0]])
    d = qd.difference_vectors(("II", "PI", "PP"), var, np.array([[1.0, 2.0, 3.0]]))
    assert d.shape == (1, 1, 3)
    assert d[0, 0].tolist() == [-0.75, -2.5, -3.0]


def test_helmholtz_kernel():
    value = qd.helmholtz(np.array([2.0]), math.pi / 2)[0]
    assert value == pytest.approx(np.exp(-1j * math.pi) / (8.0 * math.pi))
