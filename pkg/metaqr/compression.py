"""QR-recursive compressed operator.

Z = Z_D + sum over levels of far block pairs + finest-level atom pairs.  Every
off-diagonal piece is stored once per unordered pair as Q R (or dense when the
factorization would not save storage); the mirrored piece is applied through the
transpose, Z being complex symmetric.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
import scipy.linalg

from .core import COEFF_BYTES, MetaQRError
from .geometry import BlockTree
from .parallel import Schedule, reduce_partials, run_partitioned, schedule

LOGGER = logging.getLogger(__name__)

BlockFn = Callable[[int, int], np.ndarray]

METHODS = ("qr", "aca")


class CompressionError(MetaQRError):
    module = "compression"


@dataclass(frozen=True)
class LowRankBlock:
    q: np.ndarray
    r: np.ndarray
    rows: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    cols: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    level: int = 0
    pair: Tuple[int, int] = (-1, -1)
    kind: str = "far"
    dense: Optional[np.ndarray] = None

    @property
    def shape(self) -> Tuple[int, int]:
        if self.dense is not None:
            return self.dense.shape
        return (self.q.shape[0], self.r.shape[1])

    @property
    def rank(self) -> int:
        if self.dense is not None:
            return min(self.dense.shape)
        return int(self.q.shape[1])

    @property
    def is_dense(self) -> bool:
        return self.dense is not None

    @property
    def stored(self) -> int:
        m, n = self.shape
        return m * n if self.is_dense else (m + n) * self.rank

    def to_dense(self) -> np.ndarray:
        if self.dense is not None:
            return self.dense
        return self.q @ self.r

    def product(self, x: np.ndarray) -> np.ndarray:
        if self.dense is not None:
            return self.dense @ x
        return self.q @ (self.r @ x)

    def transposed_product(self, x: np.ndarray) -> np.ndarray:
        if self.dense is not None:
            return self.dense.T @ x
        return self.r.T @ (self.q.T @ x)


def _as_array(block) -> np.ndarray:
    entries = getattr(block, "entries", block)
    return np.asarray(entries, dtype=complex)


def lowrank_qr(block, eps: float, **meta) -> LowRankBlock:
    """Column-pivoted QR truncated where the trailing rows of R drop below eps*||A||_F."""
    if not 0.0 < eps < 1.0:
        raise CompressionError(f"tolerance must lie in (0, 1), got {eps}")
    a = _as_array(block)
    if not np.all(np.isfinite(a)):
        raise CompressionError("block contains non-finite entries")
    m, n = a.shape
    norm = float(np.linalg.norm(a))
    if norm == 0.0:
        return LowRankBlock(np.zeros((m, 0), dtype=complex), np.zeros((0, n), dtype=complex), **meta)

    q, r, piv = scipy.linalg.qr(a, mode="economic", pivoting=True)
    row_energy = np.sum(np.abs(r) ** 2, axis=1)
    tail = np.sqrt(np.append(np.cumsum(row_energy[::-1])[::-1], 0.0))
    rank = int(np.flatnonzero(tail <= eps * norm)[0])
    factor = np.zeros((rank, n), dtype=complex)
    factor[:, piv] = r[:rank]
    return LowRankBlock(np.ascontiguousarray(q[:, :rank]), factor, **meta)


def lowrank_aca(
    row_fn: Callable[[int], np.ndarray],
    col_fn: Callable[[int], np.ndarray],
    shape: Tuple[int, int],
    eps: float,
    **meta,
) -> LowRankBlock:
    """Partially pivoted cross approximation, returned with orthonormal Q."""
    if not 0.0 < eps < 1.0:
        raise CompressionError(f"tolerance must lie in (0, 1), got {eps}")
    m, n = shape
    us: List[np.ndarray] = []
    vs: List[np.ndarray] = []
    used_rows: set = set()
    used_cols: set = set()
    norm_sq = 0.0
    i = 0
    for _ in range(min(m, n)):
        row = np.array(row_fn(i), dtype=complex)
        for u, v in zip(us, vs):
            row -= u[i] * v
        used_rows.add(i)
        scores = np.abs(row)
        scores[list(used_cols)] = -1.0
        j = int(np.argmax(scores))
        if scores[j] <= 0.0:
            remaining = [k for k in range(m) if k not in used_rows]
            if not remaining:
                break
            i = remaining[0]
            continue
        v = row / row[j]
        col = np.array(col_fn(j), dtype=complex)
        for u_old, v_old in zip(us, vs):
            col -= v_old[j] * u_old
        used_cols.add(j)

        term = float(np.vdot(col, col).real * np.vdot(v, v).real)
        cross = sum(2.0 * abs(np.vdot(u_old, col)) * abs(np.vdot(v_old, v)) for u_old, v_old in zip(us, vs))
        us.append(col)
        vs.append(v)
        norm_sq += term + cross
        if term <= eps**2 * norm_sq:
            break
        scores = np.abs(col)
        scores[list(used_rows)] = -1.0
        i = int(np.argmax(scores))

    if not us:
        return LowRankBlock(np.zeros((m, 0), dtype=complex), np.zeros((0, n), dtype=complex), **meta)
    q, ru = scipy.linalg.qr(np.stack(us, axis=1), mode="economic")
    return LowRankBlock(q, ru @ np.stack(vs, axis=0), **meta)


# ---------- Operator ----------

@dataclass
class CompressedOperator:
    n_atoms: int
    dofs_per_atom: int
    diagonal: List[np.ndarray]
    far_blocks: List[List[LowRankBlock]]
    finest_blocks: List[LowRankBlock]
    plan: Schedule
    dense_kept: int = 0
    deterministic: bool = True
    _flat: List[LowRankBlock] = field(init=False, repr=False)
    _work: List[List[int]] = field(init=False, repr=False)

    def __post_init__(self) -> None:
        self._flat = [b for level in self.far_blocks for b in level] + list(self.finest_blocks)
        self._work = [self.plan.items_of(k) for k in range(self.plan.n_workers)]

    @property
    def n_dofs(self) -> int:
        return self.n_atoms * self.dofs_per_atom

    @property
    def blocks(self) -> List[LowRankBlock]:
        return self._flat

    @property
    def stored_per_item(self) -> np.ndarray:
        """Coefficients held per schedule item: diagonals first, then blocks."""
        p = self.dofs_per_atom
        return np.array([p * p] * self.n_atoms + [b.stored for b in self._flat], dtype=float)

    @property
    def product_loads(self) -> np.ndarray:
        return self.plan.totals(self.stored_per_item)

    @property
    def n_far(self) -> int:
        return sum(b.stored for b in self.blocks)

    @property
    def n_near(self) -> int:
        return self.n_atoms * self.dofs_per_atom**2

    @property
    def n_qr(self) -> int:
        return self.n_far + self.n_near

    def atom_slice(self, atom: int) -> slice:
        p = self.dofs_per_atom
        return slice(atom * p, (atom + 1) * p)

    def _apply_item(self, item: int, x: np.ndarray, y: np.ndarray) -> None:
        if item < self.n_atoms:
            s = self.atom_slice(item)
            y[s] += self.diagonal[item] @ x[s]
            return
        block = self._flat[item - self.n_atoms]
        y[block.rows] += block.product(x[block.cols])
        y[block.cols] += block.transposed_product(x[block.rows])

    def _partial(self, worker: int, x: np.ndarray) -> np.ndarray:
        y = np.zeros(self.n_dofs, dtype=complex)
        for item in self._work[worker]:
            self._apply_item(item, x, y)
        return y

    def apply(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=complex).reshape(-1)
        if x.size != self.n_dofs:
            raise CompressionError(f"length mismatch: vector has {x.size} entries, operator {self.n_dofs}")
        workers = self.plan.n_workers
        if workers == 1:
            return self._partial(0, x)
        with ThreadPoolExecutor(max_workers=workers, thread_name_prefix="metaqr-apply") as pool:
            futures = [pool.submit(self._partial, k, x) for k in range(workers)]
            if self.deterministic:
                partials = [f.result() for f in futures]
            else:
                partials = [f.result() for f in as_completed(futures)]
        return reduce_partials(partials)

    __matmul__ = apply


def _dof_indices(atoms: Sequence[int], per_atom: int) -> np.ndarray:
    return np.concatenate([np.arange(a * per_atom, (a + 1) * per_atom) for a in atoms]).astype(np.int64)


@dataclass(frozen=True)
class _Job:
    kind: str
    level: int
    pair: Tuple[int, int]
    atoms_i: Tuple[int, ...]
    atoms_j: Tuple[int, ...]


def _jobs(tree: BlockTree) -> List[_Job]:
    jobs: List[_Job] = []
    for grid in tree.levels:
        for it in tree.far_pairs(grid.level):
            jobs.append(_Job("far", grid.level, (it.block_i, it.block_j),
                             tuple(grid.members[it.block_i]), tuple(grid.members[it.block_j])))
    for a, b in tree.finest_pairs:
        if a < b:
            jobs.append(_Job("finest", tree.depth, (a, b), (a,), (b,)))
    return jobs


def build_compressed_operator(
    tree: BlockTree,
    block_fn: BlockFn,
    dofs_per_atom: int,
    eps: float,
    n_workers: int = 1,
    method: str = "qr",
    deterministic: bool = True,
) -> CompressedOperator:
    if method not in METHODS:
        raise CompressionError(f"unknown compression method {method!r}; expected one of {METHODS}")
    if not 0.0 < eps < 1.0:
        raise CompressionError(f"tolerance must lie in (0, 1), got {eps}")
    n_atoms = tree.atom_count
    p = dofs_per_atom
    jobs = _jobs(tree)

    def _factor(job: _Job) -> LowRankBlock:
        rows = _dof_indices(job.atoms_i, p)
        cols = _dof_indices(job.atoms_j, p)
        meta = dict(rows=rows, cols=cols, level=job.level, pair=job.pair, kind=job.kind)
        dense = np.block([[_as_array(block_fn(a, b)) for b in job.atoms_j] for a in job.atoms_i])
        if method == "aca":
            lr = lowrank_aca(lambda i: dense[i], lambda j: dense[:, j], dense.shape, eps, **meta)
        else:
            lr = lowrank_qr(dense, eps, **meta)
        m, n = dense.shape
        if (m + n) * lr.rank >= m * n:
            return LowRankBlock(np.zeros((m, 0), dtype=complex), np.zeros((0, n), dtype=complex), dense=dense, **meta)
        return lr

    def _build(item: int):
        if item < n_atoms:
            return _as_array(block_fn(item, item))
        return _factor(jobs[item - n_atoms])

    # one placement for assembly and every product; ranks are unknown until factored
    sizes = [p * p] * n_atoms + [len(j.atoms_i) * len(j.atoms_j) * p * p for j in jobs]
    plan = schedule(sizes, n_workers, [s * COEFF_BYTES for s in sizes])
    built = run_partitioned(plan, _build)

    diagonal = built[:n_atoms]
    blocks: List[LowRankBlock] = built[n_atoms:]
    far_blocks: List[List[LowRankBlock]] = [[] for _ in tree.levels]
    finest: List[LowRankBlock] = []
    for block in blocks:
        if block.kind == "far":
            far_blocks[block.level - 1].append(block)
        else:
            finest.append(block)
    dense_kept = sum(1 for b in blocks if b.is_dense)
    if dense_kept:
        LOGGER.warning("%d of %d off-diagonal blocks kept dense (no rank reduction at eps=%g)", dense_kept, len(blocks), eps)

    op = CompressedOperator(n_atoms, p, diagonal, far_blocks, finest, plan, dense_kept, deterministic)
    if [id(b) for b in op.blocks] != [id(b) for b in blocks]:
        raise CompressionError("block order does not match the schedule's item order")
    LOGGER.info(
        "compressed operator: %d DoFs, %d blocks (%d dense), N_QR=%d, G=%.3f",
        op.n_dofs, len(blocks), dense_kept, op.n_qr, compression_gain(op),
    )
    return op


# ---------- Accounting and oracle checks ----------

def compression_gain(op: CompressedOperator) -> float:
    return op.n_dofs**2 / op.n_qr


def reconstruct(op: CompressedOperator) -> np.ndarray:
    z = scipy.linalg.block_diag(*op.diagonal).astype(complex)
    for block in op.blocks:
        dense = block.to_dense()
        z[np.ix_(block.rows, block.cols)] += dense
        z[np.ix_(block.cols, block.rows)] += dense.T
    return z


def product_error(op: CompressedOperator, dense: Optional[np.ndarray]) -> float:
    """||Z_QR u - Z u|| / ||Z u|| for u = (1+j)[1, ..., 1]."""
    if dense is None:
        raise CompressionError("oracle required: product precision needs the dense matrix")
    u = np.full(op.n_dofs, 1.0 + 1.0j)
    reference = dense @ u
    return float(np.linalg.norm(op.apply(u) - reference) / np.linalg.norm(reference))


def product_precision(op: CompressedOperator, dense: Optional[np.ndarray]) -> float:
    """P_c = -log10(eps_prod); infinite when the product is exact."""
    error = product_error(op, dense)
    return math.inf if error == 0.0 else -math.log10(error)


LEDGER_HEADER = ["kind", "level", "block_i", "block_j", "rows", "cols", "rank", "stored", "dense"]


def ledger_records(op: CompressedOperator) -> List[List[object]]:
    p = op.dofs_per_atom
    rows: List[List[object]] = [["diagonal", 0, a, a, p, p, p, p * p, 1] for a in range(op.n_atoms)]
    for block in op.blocks:
        m, n = block.shape
        rows.append([block.kind, block.level, block.pair[0], block.pair[1], m, n, block.rank, block.stored,
                     int(block.is_dense)])
    return rows


def block_gain_records(op: CompressedOperator) -> List[List[object]]:
    """Per off-diagonal block: size and the gain m*n/stored it achieves."""
    records: List[List[object]] = []
    for block in op.blocks:
        m, n = block.shape
        gain = math.inf if block.stored == 0 else m * n / block.stored
        records.append([block.kind, block.level, m, n, block.rank, gain])
    return records
