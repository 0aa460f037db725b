"""Full (unrestarted) GMRES, left-preconditioned by the inverse of Z_D."""

from __future__ import annotations

import hashlib
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import scipy.linalg

from .core import MetaQRError

LOGGER = logging.getLogger(__name__)

Operator = Union[np.ndarray, Callable[[np.ndarray], np.ndarray], object]


class SolverError(MetaQRError):
    module = "solver"


class PreconditionerBreakdown(SolverError):
    def __init__(self, message: str, block: int = -1):
        super().__init__(message)
        self.block = block


class SolverBreakdown(SolverError):
    def __init__(self, message: str, iteration: int = -1):
        super().__init__(message)
        self.iteration = iteration


@dataclass
class Preconditioner:
    factors: List[Tuple[np.ndarray, np.ndarray]]
    atom_factor: np.ndarray
    dofs_per_atom: int

    @property
    def n_factors(self) -> int:
        return len(self.factors)

    def apply(self, x: np.ndarray) -> np.ndarray:
        p = self.dofs_per_atom
        y = np.empty(self.atom_factor.size * p, dtype=complex)
        for atom, k in enumerate(self.atom_factor):
            s = slice(atom * p, (atom + 1) * p)
            y[s] = scipy.linalg.lu_solve(self.factors[k], x[s])
        return y

    __call__ = apply


def _fingerprint(block: np.ndarray) -> str:
    return hashlib.sha1(np.ascontiguousarray(block).tobytes()).hexdigest()


def factor_preconditioner(diagonal: Sequence[np.ndarray]) -> Preconditioner:
    """One LU per distinct diagonal block; identical atoms share it."""
    if not diagonal:
        raise SolverError("no diagonal blocks to factor")
    p = diagonal[0].shape[0]
    seen: Dict[str, List[int]] = {}
    factors: List[Tuple[np.ndarray, np.ndarray]] = []
    originals: List[np.ndarray] = []
    owner = np.zeros(len(diagonal), dtype=np.int64)
    for atom, block in enumerate(diagonal):
        match = next((k for k in seen.get(_fingerprint(block), []) if np.array_equal(originals[k], block)), None)
        if match is not None:
            owner[atom] = match
            continue
        if not np.all(np.isfinite(block)):
            raise PreconditionerBreakdown(f"preconditioner breakdown: diagonal block {atom} is not finite", atom)
        lu, piv = scipy.linalg.lu_factor(block, check_finite=False)
        pivots = np.abs(np.diag(lu))
        if pivots.min() <= np.finfo(float).eps * p * pivots.max():
            raise PreconditionerBreakdown(f"preconditioner breakdown: diagonal block {atom} is numerically singular", atom)
        seen.setdefault(_fingerprint(block), []).append(len(factors))
        owner[atom] = len(factors)
        factors.append((lu, piv))
        originals.append(block)
    LOGGER.debug("preconditioner: %d factorization(s) for %d atoms", len(factors), len(diagonal))
    return Preconditioner(factors, owner, p)


@dataclass
class SolveReport:
    solution: np.ndarray
    residuals: List[float]            # relative preconditioned residual, entry 0 = start
    iterations: int
    converged: bool
    rel_tol: float
    true_residual: float = float("nan")
    true_residuals: List[float] = field(default_factory=list)
    elapsed: float = 0.0
    metrics: Dict[str, float] = field(default_factory=dict)


def _matvec(operator: Operator) -> Callable[[np.ndarray], np.ndarray]:
    if isinstance(operator, np.ndarray):
        return lambda x: operator @ x
    apply = getattr(operator, "apply", None)
    if callable(apply):
        return apply
    if callable(operator):
        return operator
    raise SolverError(f"cannot multiply by {type(operator).__name__}")


def gmres(
    operator: Operator,
    preconditioner: Optional[Preconditioner],
    v0: np.ndarray,
    rel_tol: float = 1e-4,
    max_iter: int = 5000,
    record_true: bool = False,
) -> SolveReport:
    """Arnoldi with modified Gram-Schmidt and complex Givens rotations.

    Convergence is judged on the preconditioned residual |M^-1 (v0 - Z x)| / |M^-1 v0|;
    with ``record_true`` the unpreconditioned residual is tracked per iteration too.
    """
    if not 0.0 < rel_tol < 1.0:
        raise SolverError(f"rel_tol must lie in (0, 1), got {rel_tol}")
    if max_iter < 1:
        raise SolverError(f"max_iter must be >= 1, got {max_iter}")
    started = time.perf_counter()
    A = _matvec(operator)
    M = preconditioner.apply if preconditioner is not None else (lambda x: x)
    v0 = np.asarray(v0, dtype=complex).reshape(-1)
    n = v0.size
    v0_norm = float(np.linalg.norm(v0))

    if v0_norm == 0.0:
        return SolveReport(np.zeros(n, dtype=complex), [0.0], 0, True, rel_tol, 0.0, [0.0] if record_true else [])

    b = M(v0)
    beta = float(np.linalg.norm(b))
    if not math.isfinite(beta) or beta == 0.0:
        raise SolverBreakdown("breakdown at iteration 0: preconditioned right-hand side is degenerate", 0)

    basis: List[np.ndarray] = [b / beta]
    columns: List[np.ndarray] = []
    cs: List[complex] = []
    sn: List[complex] = []
    g: List[complex] = [complex(beta)]
    history = [1.0]
    true_history = [1.0] if record_true else []

    def _solution(k: int) -> np.ndarray:
        R = np.zeros((k, k), dtype=complex)
        for col, h in enumerate(columns[:k]):
            R[: col + 1, col] = h[: col + 1]
        y = scipy.linalg.solve_triangular(R, np.asarray(g[:k]))
        return np.stack(basis[:k], axis=1) @ y

    converged = False
    iterations = 0
    for j in range(max_iter):
        w = M(A(basis[j]))
        if not np.all(np.isfinite(w)):
            raise SolverBreakdown(f"breakdown at iteration {j + 1}: non-finite values", j + 1)
        h = np.zeros(j + 2, dtype=complex)
        for i in range(j + 1):
            h[i] = np.vdot(basis[i], w)
            w = w - h[i] * basis[i]
        h[j + 1] = np.linalg.norm(w)

        for i in range(j):
            top = np.conj(cs[i]) * h[i] + np.conj(sn[i]) * h[i + 1]
            h[i + 1] = -sn[i] * h[i] + cs[i] * h[i + 1]
            h[i] = top
        radius = math.hypot(abs(h[j]), abs(h[j + 1]))
        if radius == 0.0 or not math.isfinite(radius):
            raise SolverBreakdown(f"breakdown at iteration {j + 1}: singular Hessenberg column", j + 1)
        c, s = h[j] / radius, h[j + 1] / radius
        cs.append(c)
        sn.append(s)
        h[j] = radius
        h[j + 1] = 0.0
        g.append(-s * g[j])
        g[j] = np.conj(c) * g[j]
        columns.append(h)

        iterations = j + 1
        residual = abs(g[j + 1]) / beta
        history.append(residual)
        if record_true:
            x = _solution(iterations)
            true_history.append(float(np.linalg.norm(v0 - A(x)) / v0_norm))
        LOGGER.debug("gmres iteration %d: residual %.3e", iterations, residual)

        subdiagonal = float(np.linalg.norm(w))
        if residual <= rel_tol or subdiagonal == 0.0:
            converged = residual <= rel_tol
            break
        basis.append(w / subdiagonal)

    x = _solution(iterations)
    true_residual = float(np.linalg.norm(v0 - A(x)) / v0_norm)
    report = SolveReport(
        solution=x,
        residuals=history,
        iterations=iterations,
        converged=converged,
        rel_tol=rel_tol,
        true_residual=true_residual,
        true_residuals=true_history,
        elapsed=time.perf_counter() - started,
    )
    level = logging.INFO if converged else logging.WARNING
    LOGGER.log(level, "gmres %s after %d iteration(s), residual %.3e (true %.3e)",
               "converged" if converged else "stopped", iterations, history[-1], true_residual)
    return report


def solution_error(current: np.ndarray, reference: np.ndarray) -> float:
    current = np.asarray(current, dtype=complex)
    reference = np.asarray(reference, dtype=complex)
    if current.shape != reference.shape:
        raise SolverError(f"length mismatch: {current.size} vs {reference.size}")
    norm = float(np.linalg.norm(reference))
    if norm == 0.0:
        raise SolverError("zero reference norm: solution accuracy undefined")
    return float(np.linalg.norm(current - reference) / norm)


def solution_accuracy(current: np.ndarray, reference: np.ndarray) -> float:
    """A_s = -log10 of the relative solution error; infinite when they agree exactly."""
    error = solution_error(current, reference)
    return math.inf if error == 0.0 else -math.log10(error)


def dense_reference(dense: np.ndarray, v0: np.ndarray) -> np.ndarray:
    lu = scipy.linalg.lu_factor(dense)
    return scipy.linalg.lu_solve(lu, np.asarray(v0, dtype=complex))
