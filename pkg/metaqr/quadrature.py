"""Gauss rules and difference-variable rules for pairs of axis-aligned boxes.

A pair of boxes (cells or facets, in units of the voxel size) is described per
axis by one of four kinds:

    II  both boxes span the axis    -> variable e = xi - eta in [-1, 1]
    IP  first spans, second is flat -> variable u = xi in [0, 1]
    PI  first is flat, second spans -> variable u = eta in [0, 1]
    PP  both flat                   -> no variable

and by the offset ``lo2 - lo1`` of the lower corners.  Integrating over the
difference variable turns the 6-D (or 4-D) pair integral into at most three
dimensions; the separation vector x - y is then an affine function of the
variables.  When the boxes touch, x - y vanishes at a corner of one of the
sub-boxes and that sub-box is integrated with a pyramid (Duffy) map whose
radial variable uses geometrically graded panels.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Optional, Sequence, Tuple

import numpy as np
from numpy.polynomial.legendre import leggauss

Kinds = Tuple[str, str, str]

_SPLITS = {"II": (-1.0, 0.0, 1.0), "IP": (0.0, 1.0), "PI": (0.0, 1.0)}


@dataclass(frozen=True)
class DifferenceRule:
    var: np.ndarray       # (n, 3); zero on PP axes
    weights: np.ndarray   # (n,)

    @property
    def size(self) -> int:
        return int(self.weights.size)


@lru_cache(maxsize=None)
def gauss01(order: int) -> Tuple[np.ndarray, np.ndarray]:
    x, w = leggauss(order)
    return 0.5 * (x + 1.0), 0.5 * w


def tensor_rule(order: int, dim: int) -> Tuple[np.ndarray, np.ndarray]:
    x, w = gauss01(order)
    pts = np.array(list(itertools.product(x, repeat=dim)), dtype=float).reshape(-1, dim)
    wts = np.array([math.prod(c) for c in itertools.product(w, repeat=dim)], dtype=float)
    return pts, wts


def graded_rule(order: int, levels: int) -> Tuple[np.ndarray, np.ndarray]:
    """Composite Gauss on [0, 1] with panels [0, 2^-(L-1)], ..., [1/2, 1]."""
    breaks = [0.0] + [2.0 ** (-k) for k in range(levels - 1, -1, -1)]
    x, w = gauss01(order)
    pts, wts = [], []
    for a, b in zip(breaks[:-1], breaks[1:]):
        pts.append(a + (b - a) * x)
        wts.append((b - a) * w)
    return np.concatenate(pts), np.concatenate(wts)


def correlation(e: np.ndarray, first: Optional[int], second: Optional[int]) -> np.ndarray:
    """int phi_first(x) phi_second(x - e) dx over the overlap of [0,1] and [e, 1+e].

    Sides: 0 -> 1 - x, 1 -> x, None -> 1.  Two-point Gauss is exact here.
    """
    e = np.asarray(e, dtype=float)
    lo = np.maximum(0.0, e)
    hi = np.minimum(1.0, 1.0 + e)
    half = 0.5 * (hi - lo)
    mid = 0.5 * (hi + lo)
    total = np.zeros_like(e)
    for g in (-1.0 / math.sqrt(3.0), 1.0 / math.sqrt(3.0)):
        x = mid + half * g
        total += half * _shape(first, x) * _shape(second, x - e)
    return total


def _shape(side: Optional[int], x: np.ndarray) -> np.ndarray:
    if side is None:
        return np.ones_like(x)
    return x if side == 1 else 1.0 - x


def _variable_axes(kinds: Kinds) -> Tuple[int, ...]:
    return tuple(ax for ax, kind in enumerate(kinds) if kind != "PP")


def critical_point(kinds: Kinds, offsets: Sequence[float], tol: float = 1e-12) -> Optional[Tuple[float, ...]]:
    """Variable values where x - y = 0, or None when the boxes do not touch."""
    point = []
    for kind, off in zip(kinds, offsets):
        if kind == "PP":
            if abs(off) > tol:
                return None
            continue
        c = off if kind in ("II", "IP") else -off
        lo, hi = (-1.0, 1.0) if kind == "II" else (0.0, 1.0)
        if c < lo - tol or c > hi + tol:
            return None
        point.append(min(max(c, lo), hi))
    return tuple(point)


def difference_vectors(kinds: Kinds, var: np.ndarray, offsets: np.ndarray) -> np.ndarray:
    """x - y (voxel units) for nodes `var` (n, 3) and offsets (m, 3) -> (m, n, 3)."""
    offsets = np.atleast_2d(np.asarray(offsets, dtype=float))
    d = np.empty((offsets.shape[0], var.shape[0], 3))
    for ax, kind in enumerate(kinds):
        off = offsets[:, ax][:, None]
        if kind in ("II", "IP"):
            d[:, :, ax] = var[None, :, ax] - off
        elif kind == "PI":
            d[:, :, ax] = -off - var[None, :, ax]
        else:
            d[:, :, ax] = -off
    return d


def _tensor_box(bounds, order: int) -> Tuple[np.ndarray, np.ndarray]:
    pts, wts = tensor_rule(order, len(bounds))
    lo = np.array([a for a, _ in bounds])
    span = np.array([b - a for a, b in bounds])
    return lo + pts * span, wts * float(np.prod(span))


def _duffy_box(bounds, corner, order: int, levels: int) -> Tuple[np.ndarray, np.ndarray]:
    """Pyramid split of a box with the integrable 1/r point at `corner`."""
    dim = len(bounds)
    t, wt = graded_rule(order, levels)
    if dim > 1:
        s, ws = tensor_rule(order, dim - 1)
    else:
        s, ws = np.zeros((1, 0)), np.ones(1)
    start = np.array(corner, dtype=float)
    direction = np.array([1.0 if abs(c - a) < 1e-12 else -1.0 for c, (a, _) in zip(corner, bounds)])
    span = np.array([b - a for a, b in bounds])
    pts, wts = [], []
    for m in range(dim):
        unit = np.empty((t.size, s.shape[0], dim))
        unit[:, :, m] = t[:, None]
        others = [ax for ax in range(dim) if ax != m]
        for col, ax in enumerate(others):
            unit[:, :, ax] = t[:, None] * s[None, :, col]
        weight = (wt * t ** (dim - 1))[:, None] * ws[None, :]
        pts.append(start + direction * span * unit.reshape(-1, dim))
        wts.append(weight.ravel() * float(np.prod(span)))
    return np.concatenate(pts), np.concatenate(wts)


def _assemble(kinds: Kinds, boxes) -> DifferenceRule:
    axes = _variable_axes(kinds)
    pts = np.concatenate([p for p, _ in boxes]) if boxes else np.zeros((0, len(axes)))
    wts = np.concatenate([w for _, w in boxes]) if boxes else np.zeros(0)
    var = np.zeros((wts.size, 3))
    var[:, list(axes)] = pts
    var.setflags(write=False)
    wts.setflags(write=False)
    return DifferenceRule(var=var, weights=wts)


@lru_cache(maxsize=None)
def regular_rule(kinds: Kinds, order: int) -> DifferenceRule:
    """Offset-independent nodes for boxes that do not touch."""
    axes = _variable_axes(kinds)
    pieces = [list(zip(_SPLITS[kinds[ax]][:-1], _SPLITS[kinds[ax]][1:])) for ax in axes]
    boxes = [_tensor_box(bounds, order) for bounds in itertools.product(*pieces)]
    return _assemble(kinds, boxes)


@lru_cache(maxsize=None)
def singular_rule(kinds: Kinds, offsets: Tuple[float, float, float], order: int, levels: int) -> DifferenceRule:
    """Nodes for touching boxes; the coincident point is a corner of every sub-box holding it."""
    point = critical_point(kinds, offsets)
    if point is None:
        return regular_rule(kinds, order)
    axes = _variable_axes(kinds)
    pieces = []
    for ax, c in zip(axes, point):
        cuts = sorted(set(_SPLITS[kinds[ax]]) | {c})
        pieces.append(list(zip(cuts[:-1], cuts[1:])))
    boxes = []
    for bounds in itertools.product(*pieces):
        touches = all(a - 1e-12 <= c <= b + 1e-12 for (a, b), c in zip(bounds, point))
        if touches:
            boxes.append(_duffy_box(bounds, point, order, levels))
        else:
            boxes.append(_tensor_box(bounds, order))
    return _assemble(kinds, boxes)


def helmholtz(dist: np.ndarray, kappa: float) -> np.ndarray:
    """exp(-j kappa r) / (4 pi r) on separations already known to be nonzero."""
    return np.exp(-1j * kappa * dist) / (4.0 * math.pi * dist)
