from __future__ import annotations

import math

import numpy as np
import pytest

from metaqr.compression import (
    CompressionError,
    block_gain_records,
    build_compressed_operator,
    compression_gain,
    ledger_records,
    lowrank_aca,
    lowrank_qr,
    product_error,
    product_precision,
    reconstruct,
)
from metaqr.geometry import build_block_tree, line_layout, vogel_spiral
from metaqr.pipeline import compress
from metaqr.solver import factor_preconditioner


def _rel(a, b) -> float:
    return float(np.linalg.norm(a - b) / np.linalg.norm(b))


def _decaying(m: int, n: int, seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    u, _ = np.linalg.qr(rng.normal(size=(m, m)) + 1j * rng.normal(size=(m, m)))
    v, _ = np.linalg.qr(rng.normal(size=(n, n)) + 1j * rng.normal(size=(n, n)))
    k = min(m, n)
    s = 10.0 ** (-1.3 * np.arange(k))
    return (u[:, :k] * s) @ v[:, :k].conj().T


def _operator(kernel_blocks, layout, eps, per_atom=6, **kwargs):
    blocks = kernel_blocks(layout, per_atom=per_atom, **{k: kwargs.pop(k) for k in ("k", "coupling") if k in kwargs})
    op = build_compressed_operator(build_block_tree(layout), blocks, per_atom, eps, **kwargs)
    return op, blocks


# ---------- single blocks ----------

def test_rank_one_block():
    rng = np.random.default_rng(1)
    x = rng.normal(size=8) + 1j * rng.normal(size=8)
    y = rng.normal(size=5) + 1j * rng.normal(size=5)
    a = np.outer(x, y)
    lr = lowrank_qr(a, 1e-12)
    assert lr.rank == 1
    assert _rel(lr.to_dense(), a) <= 1e-12


def test_zero_block_has_rank_zero():
    lr = lowrank_qr(np.zeros((4, 3)), 1e-3)
    assert lr.rank == 0
    assert lr.stored == 0
    assert np.array_equal(lr.to_dense(), np.zeros((4, 3)))
    assert np.array_equal(lr.product(np.ones(3)), np.zeros(4))


def test_truncation_meets_the_tolerance():
    a = _decaying(12, 9)
    lr = lowrank_qr(a, 1e-3)
    assert _rel(lr.to_dense(), a) <= 1e-3
    assert np.linalg.norm(lr.q.conj().T @ lr.q - np.eye(lr.rank)) <= 1e-12
    s = np.linalg.svd(a, compute_uv=False)
    tails = np.sqrt(np.cumsum((s**2)[::-1])[::-1])
    optimal = int(np.flatnonzero(np.append(tails, 0.0) <= 1e-3 * np.linalg.norm(a))[0])
    assert optimal == 3
    assert abs(lr.rank - optimal) <= 1


def test_rank_grows_as_the_tolerance_shrinks():
    a = _decaying(12, 9, seed=3)
    ranks = [lowrank_qr(a, eps).rank for eps in (1e-1, 1e-2, 1e-4, 1e-6)]
    assert ranks == sorted(ranks)


def test_transposed_product_uses_the_same_factors():
    a = _decaying(7, 5, seed=2)
    lr = lowrank_qr(a, 1e-10)
    x = np.arange(7, dtype=float)
    assert lr.transposed_product(x) == pytest.approx(lr.to_dense().T @ x)


@pytest.mark.parametrize("eps", [0.0, 1.0, -1e-3])
def test_tolerance_must_lie_in_the_unit_interval(eps):
    with pytest.raises(CompressionError, match="tolerance"):
        lowrank_qr(np.eye(3), eps)


def test_non_finite_block_is_rejected():
    a = np.eye(3)
    a[1, 1] = np.nan
    with pytest.raises(CompressionError):
        lowrank_qr(a, 1e-3)


def test_cross_approximation_on_a_smooth_kernel(kernel_blocks):
    blocks = kernel_blocks(line_layout(2, 12.0, 1.0), per_atom=20, k=0.0)
    a = blocks(0, 1)
    lr = lowrank_aca(lambda i: a[i], lambda j: a[:, j], a.shape, 1e-8)
    assert _rel(lr.to_dense(), a) <= 1e-6
    assert lr.rank < 20
    assert np.linalg.norm(lr.q.conj().T @ lr.q - np.eye(lr.rank)) <= 1e-10


def test_cross_approximation_of_zero():
    lr = lowrank_aca(lambda i: np.zeros(4), lambda j: np.zeros(3), (3, 4), 1e-6)
    assert lr.rank == 0


def test_rank_falls_with_distance(kernel_blocks):
    ranks = []
    for d in (3.0, 6.0, 12.0, 24.0):
        blocks = kernel_blocks(line_layout(2, d, 1.0), per_atom=20, k=0.0)
        ranks.append(lowrank_qr(blocks(0, 1), 1e-6).rank)
    assert ranks[0] > ranks[-1]


# ---------- the compressed operator ----------

def test_single_atom_has_unit_gain(kernel_blocks):
    op, blocks = _operator(kernel_blocks, vogel_spiral(1, 1.0), 1e-3)
    assert op.blocks == []
    assert compression_gain(op) == 1.0
    x = np.arange(6) + 1j
    assert op.apply(x) == pytest.approx(blocks.diagonal @ x)


def test_two_distant_atoms_give_one_far_block(kernel_blocks):
    op, blocks = _operator(kernel_blocks, line_layout(2, 10.0, 1.0), 1e-3)
    assert [len(level) for level in op.far_blocks] == [1]
    assert op.finest_blocks == []
    assert _rel(reconstruct(op), blocks.dense()) <= 1e-3


@pytest.mark.parametrize("eps", [1e-2, 1e-4])
def test_reconstruction_error_tracks_eps(kernel_blocks, eps):
    op, blocks = _operator(kernel_blocks, vogel_spiral(20, 1.0), eps, per_atom=8)
    dense = blocks.dense()
    assert _rel(reconstruct(op), dense) <= 2 * eps
    assert product_error(op, dense) <= 10 * eps


def test_storage_accounting(kernel_blocks):
    op, _ = _operator(kernel_blocks, vogel_spiral(20, 1.0), 1e-3, per_atom=8)
    assert op.n_near == 20 * 64
    assert op.n_qr == op.n_near + sum(b.stored for b in op.blocks)
    assert compression_gain(op) == pytest.approx((20 * 8) ** 2 / op.n_qr)
    ledger = ledger_records(op)
    assert len(ledger) == 20 + len(op.blocks)
    assert sum(row[7] for row in ledger) == op.n_qr
    assert len(block_gain_records(op)) == len(op.blocks)


def test_every_atom_pair_is_stored_once(kernel_blocks):
    op, _ = _operator(kernel_blocks, vogel_spiral(20, 1.0), 1e-3, per_atom=2)
    seen = np.zeros((40, 40), dtype=int)
    for block in op.blocks:
        seen[np.ix_(block.rows, block.cols)] += 1
        seen[np.ix_(block.cols, block.rows)] += 1
    for a in range(20):
        seen[2 * a:2 * a + 2, 2 * a:2 * a + 2] += 1
    assert np.all(seen == 1)


def test_zero_coupling_stores_only_the_diagonal(kernel_blocks):
    op, _ = _operator(kernel_blocks, vogel_spiral(10, 1.0), 1e-3, coupling=0.0)
    assert all(b.rank == 0 for b in op.blocks)
    assert op.n_qr == op.n_near
    assert compression_gain(op) == pytest.approx(10.0)


def test_product_matches_the_dense_matrix(kernel_blocks):
    op, blocks = _operator(kernel_blocks, vogel_spiral(6, 1.0), 1e-12)
    rng = np.random.default_rng(5)
    x = rng.normal(size=op.n_dofs) + 1j * rng.normal(size=op.n_dofs)
    y = rng.normal(size=op.n_dofs)
    dense = blocks.dense()
    assert _rel(op @ x, dense @ x) <= 1e-10
    assert _rel(op.apply(x), reconstruct(op) @ x) <= 1e-12
    assert _rel(op.apply(2.0 * x + 3.0 * y), 2.0 * op.apply(x) + 3.0 * op.apply(y)) <= 1e-12
    assert np.array_equal(op.apply(np.zeros(op.n_dofs)), np.zeros(op.n_dofs))


def test_length_mismatch(kernel_blocks):
    op, _ = _operator(kernel_blocks, vogel_spiral(3, 1.0), 1e-3)
    with pytest.raises(CompressionError, match="length mismatch"):
        op.apply(np.ones(op.n_dofs + 1))


def test_precision_needs_the_oracle(kernel_blocks):
    op, _ = _operator(kernel_blocks, vogel_spiral(3, 1.0), 1e-3)
    with pytest.raises(CompressionError, match="oracle required"):
        product_precision(op, None)
    single, blocks = _operator(kernel_blocks, vogel_spiral(1, 1.0), 1e-3)
    assert product_precision(single, blocks.dense()) == math.inf


def test_workers_do_not_change_the_product(kernel_blocks):
    layout = vogel_spiral(16, 1.0)
    serial, _ = _operator(kernel_blocks, layout, 1e-4)
    threaded, _ = _operator(kernel_blocks, layout, 1e-4, n_workers=3)
    assert threaded.plan.n_workers == 3
    x = np.linspace(-1.0, 1.0, serial.n_dofs) * (1 + 0.5j)
    assert _rel(threaded.apply(x), serial.apply(x)) <= 1e-13
    assert np.array_equal(threaded.apply(x), threaded.apply(x))


def test_assembly_and_products_share_one_schedule(kernel_blocks, monkeypatch):
    import metaqr.compression as compression

    plans, assembled = [], []
    original_schedule, original_run = compression.schedule, compression.run_partitioned

    def _schedule(*args, **kwargs):
        plans.append(original_schedule(*args, **kwargs))
        return plans[-1]

    def _run(plan, fn):
        assembled.append(plan)
        return original_run(plan, fn)

    monkeypatch.setattr(compression, "schedule", _schedule)
    monkeypatch.setattr(compression, "run_partitioned", _run)
    layout = vogel_spiral(16, 1.0)
    op = build_compressed_operator(build_block_tree(layout), kernel_blocks(layout, per_atom=6), 6, 1e-4, n_workers=3)

    assert len(plans) == 1
    assert len(assembled) == 1
    assert assembled[0] is op.plan and op.plan is plans[0]
    assert op.plan.n_items == op.n_atoms + len(op.blocks)
    assert op.plan.counts.sum() == op.plan.n_items
    assert op.plan.weights[op.n_atoms:].tolist() == [b.shape[0] * b.shape[1] for b in op.blocks]
    assert op.product_loads.sum() == op.n_qr
    assert op.product_loads.tolist() == [
        sum(op.stored_per_item[i] for i in op.plan.items_of(k)) for k in range(3)
    ]


def test_cross_approximation_operator(kernel_blocks):
    op, blocks = _operator(kernel_blocks, vogel_spiral(12, 1.0), 1e-6, method="aca")
    assert _rel(reconstruct(op), blocks.dense()) <= 1e-5


def test_unknown_method(kernel_blocks):
    with pytest.raises(CompressionError, match="unknown compression method"):
        _operator(kernel_blocks, vogel_spiral(2, 1.0), 1e-3, method="svd")


# ---------- on the assembled 8-atom array ----------

@pytest.mark.parametrize("eps", [1e-2, 1e-4])
def test_assembled_reconstruction(eight_atoms, eps):
    problem, dense = eight_atoms
    op = compress(problem, eps)
    assert _rel(reconstruct(op), dense) <= 2 * eps


def test_product_precision_improves_with_tighter_eps(eight_atoms):
    problem, dense = eight_atoms
    coarse = product_precision(compress(problem, 1e-2), dense)
    fine = product_precision(compress(problem, 1e-4), dense)
    assert fine > coarse


def test_identical_atoms_share_diagonal_blocks(eight_atoms):
    problem, _ = eight_atoms
    op = compress(problem, 1e-3)
    assert all(np.array_equal(d, op.diagonal[0]) for d in op.diagonal)
    assert factor_preconditioner(op.diagonal).n_factors == 1
