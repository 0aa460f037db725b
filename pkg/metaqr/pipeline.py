"""Command implementations.

geometry -> basis -> assembly -> compression -> schedule -> GMRES, plus the dense
oracle checks and the three experiments.  Every function here takes a validated
:class:`~metaqr.scenario.Scenario` and writes its tables into
``scenario.output_dir``.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import reports
from .assembly import AtomAssembler, assemble_dense, assemble_excitation
from .basis import BasisSet, build_loop_star, verify_basis
from .compression import (
    LEDGER_HEADER,
    CompressedOperator,
    block_gain_records,
    build_compressed_operator,
    compression_gain,
    ledger_records,
    lowrank_qr,
    product_error,
    reconstruct,
)
from .core import COEFF_BYTES
from .geometry import ArrayLayout, BlockTree, Mesh, build_block_tree, build_voxel_sphere, layout_records, tree_records
from .logging_utils import event_log, progress_bar
from .parallel import balance_stats, spread
from .scenario import Scenario, ScenarioError
from .solver import (
    Preconditioner,
    SolveReport,
    dense_reference,
    factor_preconditioner,
    gmres,
    solution_error,
)

LOGGER = logging.getLogger(__name__)

RESIDUAL_HEADER = ["iteration", "residual", "true_residual"]
LAYOUT_HEADER = ["atom", "x", "y", "z", "radius"]
TREE_HEADER = ["record", "level", "a", "b", "c", "members"]
GAIN_HEADER = ["kind", "level", "rows", "cols", "rank", "gain"]


def digits(error: float) -> float:
    """-log10(error), infinite for an exact result."""
    return math.inf if error == 0.0 else -math.log10(error)


# ---------- Problem set-up ----------

@dataclass
class Problem:
    scenario: Scenario
    mesh: Mesh
    basis: BasisSet
    layout: ArrayLayout
    tree: BlockTree
    assembler: AtomAssembler

    @property
    def n_dofs(self) -> int:
        return self.layout.atom_count * self.basis.n_dofs


def build_problem(scenario: Scenario, keep_blocks: Optional[bool] = None) -> Problem:
    """Mesh, basis, layout, tree and assembler.  Mutual blocks are memoised when the
    dense oracle will need them again (or when ``keep_blocks`` says so)."""
    started = time.perf_counter()
    mesh = build_voxel_sphere(scenario.radius, scenario.voxel_size, centered=scenario.centered_lattice)
    basis = build_loop_star(mesh)
    layout = scenario.build_layout()
    tree = build_block_tree(layout, scenario.level1_blocks)
    assembler = AtomAssembler(mesh, basis, layout, scenario.material, scenario.excitation, scenario.quad)
    problem = Problem(scenario, mesh, basis, layout, tree, assembler)
    if keep_blocks is None:
        keep_blocks = problem.n_dofs <= scenario.dense_cap
    assembler.keep_blocks = keep_blocks
    LOGGER.info(
        "%d atom(s) x %d DoFs (%d loops, %d stars) on %d voxels; tree depth %d",
        layout.atom_count, basis.n_dofs, basis.n_loops, basis.n_stars, mesh.n_cells, tree.depth,
    )
    event_log(
        "setup",
        atoms=layout.atom_count,
        cells=mesh.n_cells,
        dofs_per_atom=basis.n_dofs,
        levels=tree.depth,
        seconds=round(time.perf_counter() - started, 3),
    )
    return problem


def _block_calls(tree: BlockTree) -> int:
    total = tree.atom_count + len(tree.finest_pairs) // 2
    for grid in tree.levels:
        for it in tree.far_pairs(grid.level):
            total += len(grid.members[it.block_i]) * len(grid.members[it.block_j])
    return total


def compress(problem: Problem, eps: float) -> CompressedOperator:
    s = problem.scenario
    started = time.perf_counter()
    with progress_bar(_block_calls(problem.tree), f"blocks eps={eps:g}") as bar:

        def block_fn(i: int, j: int) -> np.ndarray:
            block = problem.assembler.block(i, j)
            bar.update()
            LOGGER.debug("assembled block (%d, %d)", i, j)
            return block

        op = build_compressed_operator(
            problem.tree,
            block_fn,
            problem.basis.n_dofs,
            eps,
            n_workers=s.workers,
            method=s.compression,
            deterministic=s.deterministic,
        )
    event_log(
        "compression",
        eps=eps,
        method=s.compression,
        n_qr=op.n_qr,
        gain=compression_gain(op),
        dense_blocks=op.dense_kept,
        seconds=round(time.perf_counter() - started, 3),
    )
    return op


def _preconditioner(scenario: Scenario, op: CompressedOperator) -> Optional[Preconditioner]:
    return factor_preconditioner(op.diagonal) if scenario.preconditioner else None


def operator_metrics(op: CompressedOperator) -> Dict[str, object]:
    stored = op.stored_per_item
    stats = balance_stats(op.plan, memory=stored * COEFF_BYTES)
    product = spread(op.product_loads)
    return {
        "atoms": op.n_atoms,
        "dofs_per_atom": op.dofs_per_atom,
        "n_dofs": op.n_dofs,
        "n_qr": op.n_qr,
        "n_far": op.n_far,
        "n_near": op.n_near,
        "gain": compression_gain(op),
        "blocks": len(op.blocks),
        "dense_blocks": op.dense_kept,
        "workers": op.plan.n_workers,
        "load_mean": stats.load.mean,
        "load_std": stats.load.std,
        "load_cv": stats.load.normalized,
        "product_load_mean": product.mean,
        "product_load_cv": product.normalized,
        "interactions_cv": stats.interactions.normalized,
        "memory_mean": stats.memory.mean,
        "memory_cv": stats.memory.normalized,
    }


# ---------- solve ----------

@dataclass
class SolveOutcome:
    problem: Problem
    operator: CompressedOperator
    report: SolveReport
    v0: np.ndarray
    dense: Optional[np.ndarray] = None
    reference: Optional[np.ndarray] = None
    paths: Dict[str, Path] = field(default_factory=dict)


def residual_rows(report: SolveReport) -> List[List[object]]:
    rows: List[List[object]] = []
    for k, value in enumerate(report.residuals):
        true = report.true_residuals[k] if k < len(report.true_residuals) else None
        rows.append([k, value, true])
    return rows


def run_solve(scenario: Scenario, write: bool = True) -> SolveOutcome:
    problem = build_problem(scenario)
    v0 = assemble_excitation(problem.assembler)
    op = compress(problem, scenario.qr_eps)
    pre = _preconditioner(scenario, op)
    report = gmres(op, pre, v0, scenario.rel_tol, scenario.max_iter, record_true=scenario.true_history)
    event_log("gmres", iterations=report.iterations, converged=report.converged,
              residual=report.residuals[-1], seconds=round(report.elapsed, 3))

    metrics = operator_metrics(op)
    metrics.update(
        qr_eps=scenario.qr_eps,
        rel_tol=scenario.rel_tol,
        preconditioner=scenario.preconditioner,
        iterations=report.iterations,
        converged=report.converged,
        final_residual=report.residuals[-1],
        true_residual=report.true_residual,
    )
    outcome = SolveOutcome(problem, op, report, v0)
    if op.n_dofs <= scenario.dense_cap:
        outcome.dense = assemble_dense(problem.assembler, scenario.dense_cap)
        outcome.reference = dense_reference(outcome.dense, v0)
        p_err = product_error(op, outcome.dense)
        s_err = solution_error(report.solution, outcome.reference)
        metrics.update(product_error=p_err, P_c=digits(p_err), solution_error=s_err, A_s=digits(s_err))
    else:
        LOGGER.info("dense oracle skipped: %d DoFs above cap %d", op.n_dofs, scenario.dense_cap)
    report.metrics = metrics

    if write:
        out = Path(scenario.output_dir)
        kinds = problem.basis.dof_kinds
        outcome.paths = {
            "currents": reports.write_table(out / "currents.tsv", reports.CURRENT_HEADER,
                                            reports.current_rows(report.solution, kinds)),
            "residuals": reports.write_table(out / "residuals.tsv", RESIDUAL_HEADER, residual_rows(report)),
            "ledger": reports.write_table(out / "ledger.tsv", LEDGER_HEADER, ledger_records(op)),
            "block_gains": reports.write_table(out / "block_gains.tsv", GAIN_HEADER, block_gain_records(op)),
            "metrics": reports.write_report(out / "metrics.txt", metrics),
        }
    return outcome


# ---------- generate ----------

def run_generate(scenario: Scenario) -> Dict[str, Path]:
    mesh = build_voxel_sphere(scenario.radius, scenario.voxel_size, centered=scenario.centered_lattice)
    basis = build_loop_star(mesh)
    layout = scenario.build_layout()
    tree = build_block_tree(layout, scenario.level1_blocks)
    b0, b1, b2 = mesh.betti_numbers()
    summary: Dict[str, object] = dict(mesh.summary())
    summary.update(
        radius=scenario.radius,
        centered_lattice=scenario.centered_lattice,
        loops=basis.n_loops,
        stars=basis.n_stars,
        dofs_per_atom=basis.n_dofs,
        components=b0,
        handles=b1,
        cavities=b2,
        atoms=layout.atom_count,
        tree_levels=tree.depth,
        far_pairs=sum(len(tree.far_pairs(g.level)) for g in tree.levels),
        finest_pairs=len(tree.finest_pairs) // 2,
    )
    out = Path(scenario.output_dir)
    paths = {
        "layout": reports.write_table(out / "layout.tsv", LAYOUT_HEADER, layout_records(layout)),
        "tree": reports.write_table(out / "tree.tsv", TREE_HEADER, tree_records(tree)),
        "mesh": reports.write_report(out / "mesh.txt", summary),
    }
    event_log("generate", **{k: str(v) for k, v in paths.items()})
    return paths


# ---------- verify ----------

@dataclass
class Check:
    name: str
    value: float
    limit: float

    @property
    def passed(self) -> bool:
        return bool(self.value <= self.limit)


@dataclass
class VerifyOutcome:
    solve: SolveOutcome
    checks: List[Check]
    paths: Dict[str, Path] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)


def _symmetry(problem: Problem, dense: np.ndarray) -> float:
    """Relative asymmetry of a freshly integrated pair, or of Z itself for one atom."""
    if problem.layout.atom_count < 2:
        return float(np.linalg.norm(dense - dense.T) / np.linalg.norm(dense))
    forward = problem.assembler.mutual_block(0, 1)
    backward = problem.assembler.mutual_block(1, 0)
    return float(np.linalg.norm(forward - backward.T) / np.linalg.norm(forward))


def run_verify(scenario: Scenario) -> VerifyOutcome:
    outcome = run_solve(scenario, write=True)
    problem, op = outcome.problem, outcome.operator
    if outcome.dense is None:
        # raises the dense-cap error
        assemble_dense(problem.assembler, scenario.dense_cap)
    dense, reference = outcome.dense, outcome.reference

    basis_report = verify_basis(problem.mesh, problem.basis)
    first = op.diagonal[0]
    checks = [
        Check("basis_residual", max(basis_report.divergence_residual, basis_report.loop_boundary_max,
                                    basis_report.star_flux_max), 1e-12),
        Check("basis_rank_deficiency", float(basis_report.rank_deficiency), 0.0),
        Check("symmetry", _symmetry(problem, dense), 1e-8),
        Check("diagonal_spread", max(float(np.linalg.norm(d - first)) for d in op.diagonal), 0.0),
        Check("reconstruction", float(np.linalg.norm(reconstruct(op) - dense) / np.linalg.norm(dense)),
              2.0 * scenario.qr_eps),
        Check("product_error", float(outcome.report.metrics["product_error"]), 10.0 * scenario.qr_eps),
        Check("solution_error", float(outcome.report.metrics["solution_error"]),
              10.0 * max(scenario.qr_eps, scenario.rel_tol)),
    ]
    values: Dict[str, object] = {"passed": all(c.passed for c in checks)}
    for c in checks:
        values[f"{c.name}.value"] = c.value
        values[f"{c.name}.limit"] = c.limit
        values[f"{c.name}.passed"] = c.passed
        log = LOGGER.info if c.passed else LOGGER.error
        log("check %-22s %.3e (limit %.1e) %s", c.name, c.value, c.limit, "ok" if c.passed else "FAILED")

    out = Path(scenario.output_dir)
    result = VerifyOutcome(outcome, checks)
    result.paths = {
        "reference": reports.write_table(out / "reference_currents.tsv", reports.CURRENT_HEADER,
                                         reports.current_rows(reference, problem.basis.dof_kinds)),
        "verify": reports.write_report(out / "verify.txt", values),
    }
    return result


# ---------- report ----------

def run_report(output_dir: Path) -> Dict[str, object]:
    """Recompute G, iterations, final residual (and A_s) from the dumped tables."""
    out = Path(output_dir)
    ledger = reports.read_table(out / "ledger.tsv")
    try:
        stored = sum(int(row["stored"]) for row in ledger)
        n_dofs = sum(int(row["rows"]) for row in ledger if row["kind"] == "diagonal")
    except (KeyError, ValueError) as exc:
        raise reports.ReportError(f"ledger.tsv: malformed ({exc})") from exc
    if stored == 0:
        raise reports.ReportError("ledger.tsv: no stored coefficients")
    residuals = reports.read_table(out / "residuals.tsv")
    if not residuals:
        raise reports.ReportError("residuals.tsv: empty")

    metrics_path = out / "metrics.txt"
    metrics: Dict[str, object] = dict(reports.read_report(metrics_path)) if metrics_path.exists() else {}
    metrics.update(
        n_dofs=n_dofs,
        n_qr=stored,
        gain=n_dofs**2 / stored,
        iterations=int(residuals[-1]["iteration"]),
        final_residual=float(residuals[-1]["residual"]),
    )
    reference_path = out / "reference_currents.tsv"
    if reference_path.exists():
        error = solution_error(reports.read_currents(out / "currents.tsv"), reports.read_currents(reference_path))
        metrics.update(solution_error=error, A_s=digits(error))
    reports.write_report(metrics_path, metrics)
    return metrics


# ---------- experiments ----------

@dataclass
class ExperimentResult:
    name: str
    header: List[str]
    rows: List[List[object]]
    summary: Dict[str, object] = field(default_factory=dict)
    paths: Dict[str, Path] = field(default_factory=dict)

    def column(self, name: str) -> List[object]:
        k = self.header.index(name)
        return [row[k] for row in self.rows]

    def write(self, output_dir: Path) -> "ExperimentResult":
        out = Path(output_dir)
        self.paths["table"] = reports.write_table(out / f"{self.name}.tsv", self.header, self.rows)
        self.paths["summary"] = reports.write_report(out / f"{self.name}.txt", self.summary)
        return self


def _inversions(values: Sequence[float], increasing: bool) -> int:
    pairs = zip(values[:-1], values[1:])
    return sum(1 for a, b in pairs if (b < a if increasing else b > a))


def run_experiment_consistency(scenario: Scenario, eps_list: Sequence[float]) -> ExperimentResult:
    """P_c, A_s and G for each tolerance, from the largest to the smallest."""
    problem = build_problem(scenario, keep_blocks=True)
    dense = assemble_dense(problem.assembler, scenario.dense_cap)
    v0 = assemble_excitation(problem.assembler)
    reference = dense_reference(dense, v0)

    header = ["eps", "product_error", "P_c", "solution_error", "A_s", "gain", "iterations"]
    rows: List[List[object]] = []
    for eps in sorted(eps_list, reverse=True):
        op = compress(problem, eps)
        report = gmres(op, _preconditioner(scenario, op), v0, scenario.rel_tol, scenario.max_iter)
        p_err = product_error(op, dense)
        s_err = solution_error(report.solution, reference)
        rows.append([eps, p_err, digits(p_err), s_err, digits(s_err), compression_gain(op), report.iterations])

    result = ExperimentResult("consistency", header, rows)
    result.summary = {
        "points": len(rows),
        "A_s_inversions": _inversions(result.column("A_s"), increasing=True),
        "gain_inversions": _inversions(result.column("gain"), increasing=False),
    }
    return result.write(scenario.output_dir)


def run_experiment_scaling(
    scenario: Scenario,
    atoms_list: Sequence[int],
    eps_list: Sequence[float],
    unpreconditioned: bool = False,
) -> ExperimentResult:
    header = ["atoms", "eps", "n_dofs", "gain", "iterations", "converged", "unpreconditioned_iterations"]
    rows: List[List[object]] = []
    out = Path(scenario.output_dir)
    for n_atoms in atoms_list:
        sc = scenario.replace(atoms=int(n_atoms))
        problem = build_problem(sc, keep_blocks=len(eps_list) > 1)
        v0 = assemble_excitation(problem.assembler)
        for eps in eps_list:
            op = compress(problem, eps)
            report = gmres(op, _preconditioner(sc, op), v0, sc.rel_tol, sc.max_iter)
            reports.write_table(out / f"residuals_N{n_atoms}_eps{eps:g}.tsv", RESIDUAL_HEADER, residual_rows(report))
            plain = None
            if unpreconditioned:
                bare = gmres(op, None, v0, sc.rel_tol, sc.max_iter)
                plain = bare.iterations
                reports.write_table(out / f"residuals_N{n_atoms}_eps{eps:g}_unpreconditioned.tsv",
                                    RESIDUAL_HEADER, residual_rows(bare))
            rows.append([n_atoms, eps, op.n_dofs, compression_gain(op), report.iterations, report.converged, plain])

    result = ExperimentResult("scaling", header, rows)
    result.summary = {"runs": len(rows), "unpreconditioned": unpreconditioned}
    return result.write(out)


def split_columns(centroids: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Halve DoFs at the median centroid along the axis of widest spread."""
    centroids = np.asarray(centroids, dtype=float)
    axis = int(np.argmax(np.ptp(centroids, axis=0)))
    order = np.argsort(centroids[:, axis], kind="stable")
    half = order.size // 2
    return np.sort(order[:half]), np.sort(order[half:])


def _storage(block) -> int:
    m, n = block.shape
    return min(m * n, (m + n) * block.rank)


def matched_gains(errors: Sequence[float], curve_errors: Sequence[float], curve_gains: Sequence[float]) -> List[Optional[float]]:
    """Gain of a (error, gain) curve at each requested error, linear in log10(error)."""
    points = sorted((math.log10(e), g) for e, g in zip(curve_errors, curve_gains) if e > 0)
    if len(points) < 2:
        return [None] * len(errors)
    xs = np.array([p[0] for p in points])
    ys = np.array([p[1] for p in points])
    matched: List[Optional[float]] = []
    for e in errors:
        if e <= 0:
            matched.append(None)
            continue
        x = math.log10(e)
        matched.append(float(np.interp(x, xs, ys)) if xs[0] <= x <= xs[-1] else None)
    return matched


def run_experiment_split(scenario: Scenario, eps_list: Sequence[float]) -> ExperimentResult:
    """Compress Z_12 whole and with atom 2's DoFs split into two spatial halves."""
    if scenario.atoms != 2:
        raise ScenarioError(f"split experiment needs exactly 2 atoms, got {scenario.atoms}")
    problem = build_problem(scenario, keep_blocks=False)
    z = problem.assembler.block(0, 1)
    norm = float(np.linalg.norm(z))
    first, second = split_columns(problem.basis.dof_centroids(problem.mesh))
    m, n = z.shape

    whole_err, whole_gain, split_err, split_gain = [], [], [], []
    for eps in eps_list:
        whole = lowrank_qr(z, eps)
        whole_err.append(float(np.linalg.norm(z - whole.to_dense()) / norm))
        whole_gain.append(m * n / max(_storage(whole), 1))
        parts = [lowrank_qr(z[:, cols], eps) for cols in (first, second)]
        residual = sum(float(np.linalg.norm(z[:, cols] - part.to_dense())) ** 2 for cols, part in zip((first, second), parts))
        split_err.append(math.sqrt(residual) / norm)
        split_gain.append(m * n / max(sum(_storage(p) for p in parts), 1))

    matched = matched_gains(whole_err, split_err, split_gain)
    header = ["eps", "error_no_split", "gain_no_split", "error_split", "gain_split", "gain_split_matched"]
    rows = [list(r) for r in zip(eps_list, whole_err, whole_gain, split_err, split_gain, matched)]
    result = ExperimentResult("split", header, rows)
    compared = [(g, s) for g, s in zip(whole_gain, matched) if s is not None]
    result.summary = {
        "rows": m,
        "cols_first_half": int(first.size),
        "cols_second_half": int(second.size),
        "matched_points": len(compared),
        "no_split_wins": sum(1 for g, s in compared if g >= s),
    }
    return result.write(scenario.output_dir)
