"""Divergence-free loop/star current basis on a voxel mesh.

Every candidate function is the discrete curl of one mesh edge, i.e. the signed
cycle of facets around it.  Edges inside the solid give loops (no boundary
trace); edges on the surface give stars, whose cycle is truncated to the facets
that exist and therefore crosses the boundary.  A spanning tree built on the
boundary edges first and then extended inward removes the gradient null space;
the cotree edges are the retained functions.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import List

import numpy as np
from scipy import sparse
from scipy.sparse.csgraph import minimum_spanning_tree

from .core import MetaQRError
from .geometry import Mesh

LOGGER = logging.getLogger(__name__)


class BasisError(MetaQRError):
    module = "basis"


@dataclass(frozen=True)
class BasisSet:
    facet_count: int
    loop_edges: np.ndarray
    star_edges: np.ndarray
    combination: sparse.csc_matrix   # (facets, N_L + N_S), loops first

    @property
    def n_loops(self) -> int:
        return int(self.loop_edges.size)

    @property
    def n_stars(self) -> int:
        return int(self.star_edges.size)

    @property
    def n_dofs(self) -> int:
        return self.n_loops + self.n_stars

    @property
    def empty(self) -> bool:
        return self.n_dofs == 0

    @property
    def dof_kinds(self) -> List[str]:
        return ["loop"] * self.n_loops + ["star"] * self.n_stars

    @property
    def loop_functions(self) -> List[sparse.csc_matrix]:
        return [self.combination[:, k] for k in range(self.n_loops)]

    @property
    def star_functions(self) -> List[sparse.csc_matrix]:
        return [self.combination[:, k] for k in range(self.n_loops, self.n_dofs)]

    def dof_centroids(self, mesh: Mesh) -> np.ndarray:
        """|coefficient|-weighted mean of facet centres per DoF (local coordinates)."""
        weights = abs(self.combination).tocsc()
        centers = mesh.face_centers()
        totals = np.asarray(weights.sum(axis=0)).ravel()
        totals[totals == 0] = 1.0
        return np.asarray((weights.T @ centers)) / totals[:, None]


@dataclass(frozen=True)
class BasisReport:
    divergence_residual: float
    loop_boundary_max: float
    star_flux_max: float
    rank: int
    rank_deficiency: int
    admissible_dimension: int

    @property
    def ok(self) -> bool:
        return (
            self.divergence_residual <= 1e-12
            and self.loop_boundary_max <= 1e-12
            and self.star_flux_max <= 1e-12
            and self.rank_deficiency == 0
        )


def divergence_matrix(mesh: Mesh) -> sparse.csr_matrix:
    """Per-cell outward facet incidence."""
    rows: List[int] = []
    cols: List[int] = []
    vals: List[float] = []
    for f in range(mesh.n_faces):
        if mesh.face_owner[f] >= 0:
            rows.append(int(mesh.face_owner[f]))
            cols.append(f)
            vals.append(1.0)
        if mesh.face_neighbor[f] >= 0:
            rows.append(int(mesh.face_neighbor[f]))
            cols.append(f)
            vals.append(-1.0)
    return sparse.csr_matrix((vals, (rows, cols)), shape=(mesh.n_cells, mesh.n_faces))


def flux_matrix(mesh: Mesh) -> sparse.csr_matrix:
    """One row per boundary component: signed outward sum of its facets."""
    sign = mesh.face_outward_sign
    rows: List[int] = []
    cols: List[int] = []
    vals: List[float] = []
    for c, faces in enumerate(mesh.boundary_components):
        rows.extend([c] * faces.size)
        cols.extend(faces.tolist())
        vals.extend(sign[faces].astype(float).tolist())
    shape = (len(mesh.boundary_components), mesh.n_faces)
    return sparse.csr_matrix((vals, (rows, cols)), shape=shape)


def constraint_matrix(mesh: Mesh) -> sparse.csr_matrix:
    return sparse.vstack([divergence_matrix(mesh), flux_matrix(mesh)]).tocsr()


def _spanning_tree_edges(mesh: Mesh) -> np.ndarray:
    """Edges of a spanning tree that contains a spanning forest of the boundary edges."""
    a, b = mesh.edge_nodes[:, 0], mesh.edge_nodes[:, 1]
    lo, hi = np.minimum(a, b), np.maximum(a, b)
    weight = np.where(mesh.edge_boundary, 1.0, 2.0)
    graph = sparse.csr_matrix((weight, (lo, hi)), shape=(mesh.n_nodes, mesh.n_nodes))
    tree = minimum_spanning_tree(graph).tocoo()
    lookup = {(int(i), int(j)): e for e, (i, j) in enumerate(zip(lo.tolist(), hi.tolist()))}
    picked = [lookup[(min(i, j), max(i, j))] for i, j in zip(tree.row.tolist(), tree.col.tolist())]
    return np.array(sorted(picked), dtype=np.int64)


def build_loop_star(mesh: Mesh) -> BasisSet:
    b0, b1, _ = mesh.betti_numbers()
    if b0 != 1 or b1 != 0:
        raise BasisError(f"unsupported topology: {b0} component(s), {b1} handle(s)")

    if mesh.interior_faces.size == 0:
        LOGGER.warning("empty basis: mesh has no interior facets")
        none = np.zeros(0, dtype=np.int64)
        return BasisSet(mesh.n_faces, none, none, sparse.csc_matrix((mesh.n_faces, 0)))

    in_tree = np.zeros(mesh.n_edges, dtype=bool)
    in_tree[_spanning_tree_edges(mesh)] = True
    cotree = ~in_tree
    loops = np.flatnonzero(cotree & ~mesh.edge_boundary)
    stars = np.flatnonzero(cotree & mesh.edge_boundary)
    combination = mesh.curl[:, np.concatenate([loops, stars])].tocsc()
    combination.eliminate_zeros()
    LOGGER.debug("basis: %d loops, %d stars on %d facets", loops.size, stars.size, mesh.n_faces)
    return BasisSet(mesh.n_faces, loops, stars, combination)


def verify_basis(mesh: Mesh, basis: BasisSet) -> BasisReport:
    c = basis.combination.tocsc()
    flux = flux_matrix(mesh)
    a = constraint_matrix(mesh)

    def _absmax(m) -> float:
        m = sparse.csr_matrix(m)
        return float(abs(m).max()) if m.nnz else 0.0

    divergence_residual = _absmax(a @ c)
    loops = c[:, : basis.n_loops]
    loop_boundary = _absmax(loops[mesh.boundary_faces, :]) if basis.n_loops else 0.0
    star_flux = _absmax(flux @ c[:, basis.n_loops:]) if basis.n_stars else 0.0
    dense = c.toarray()
    rank = int(np.linalg.matrix_rank(dense)) if dense.size else 0
    # a mesh without interior facets carries no admissible current by convention
    if mesh.interior_faces.size == 0:
        admissible = 0
    else:
        admissible = mesh.n_faces - int(np.linalg.matrix_rank(a.toarray()))
    return BasisReport(
        divergence_residual=divergence_residual,
        loop_boundary_max=loop_boundary,
        star_flux_max=star_flux,
        rank=rank,
        rank_deficiency=max(basis.n_dofs, admissible) - rank,
        admissible_dimension=admissible,
    )
