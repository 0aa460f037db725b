"""Per-atom voxel meshes, Vogel-spiral layouts and the multilevel block tree.

Meshes live on an integer lattice: cell (i, j, k) occupies the unit cube
[i, i+1] x [j, j+1] x [k, k+1] in lattice units, scaled by ``voxel_size`` and
shifted by ``origin``.  A facet is keyed by (axis, i, j, k): the square
perpendicular to ``axis`` whose lowest corner is the lattice point (i, j, k),
oriented along +axis.  An edge is keyed the same way and runs along +axis from
its lattice point.

The block tree is two dimensional (the array plane) and follows the usual
near/far rule: two blocks are near when they share at least one grid node.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple

import numpy as np
from scipy import sparse
from scipy.sparse.csgraph import connected_components

from .core import MetaQRError

LOGGER = logging.getLogger(__name__)

GOLDEN_RATIO = (1.0 + math.sqrt(5.0)) / 2.0
GOLDEN_ANGLE = 2.0 * math.pi / GOLDEN_RATIO**2
MAX_TREE_LEVELS = 40

_UNIT = np.eye(3, dtype=np.int64)


class GeometryError(MetaQRError):
    module = "geometry"


# ---------- Mesh ----------

@dataclass
class Mesh:
    voxel_size: float
    origin: np.ndarray
    cells: np.ndarray            # (Nc, 3) lattice coordinates
    faces: np.ndarray            # (Nf, 4) axis, i, j, k
    face_owner: np.ndarray       # cell on the -axis side, -1 if none
    face_neighbor: np.ndarray    # cell on the +axis side, -1 if none
    edges: np.ndarray            # (Ne, 4) axis, i, j, k
    edge_boundary: np.ndarray    # bool per edge
    edge_nodes: np.ndarray       # (Ne, 2) node indices
    nodes: np.ndarray            # (Nn, 3) lattice points
    curl: sparse.csc_matrix      # (Nf, Ne) signed facet cycle around each edge
    boundary_components: List[np.ndarray] = field(default_factory=list)

    # -- sizes --
    @property
    def n_cells(self) -> int:
        return int(self.cells.shape[0])

    @property
    def n_faces(self) -> int:
        return int(self.faces.shape[0])

    @property
    def n_edges(self) -> int:
        return int(self.edges.shape[0])

    @property
    def n_nodes(self) -> int:
        return int(self.nodes.shape[0])

    @property
    def cell_volume(self) -> float:
        return self.voxel_size**3

    @property
    def boundary_faces(self) -> np.ndarray:
        return np.flatnonzero((self.face_owner < 0) | (self.face_neighbor < 0))

    @property
    def interior_faces(self) -> np.ndarray:
        return np.flatnonzero((self.face_owner >= 0) & (self.face_neighbor >= 0))

    @property
    def face_outward_sign(self) -> np.ndarray:
        """+1 where +axis points out of the mesh, -1 where it points in, 0 inside."""
        sign = np.zeros(self.n_faces, dtype=np.int64)
        sign[(self.face_owner >= 0) & (self.face_neighbor < 0)] = 1
        sign[(self.face_owner < 0) & (self.face_neighbor >= 0)] = -1
        return sign

    def cell_corners(self) -> np.ndarray:
        return self.origin + self.voxel_size * self.cells.astype(float)

    def cell_centers(self) -> np.ndarray:
        return self.cell_corners() + 0.5 * self.voxel_size

    def face_corners(self) -> np.ndarray:
        return self.origin + self.voxel_size * self.faces[:, 1:].astype(float)

    def face_centers(self) -> np.ndarray:
        centers = self.face_corners() + 0.5 * self.voxel_size
        axes = self.faces[:, 0]
        centers[np.arange(self.n_faces), axes] -= 0.5 * self.voxel_size
        return centers

    def cell_faces(self) -> np.ndarray:
        """(Nc, 3, 2) facet index per cell, axis and side (0 lower, 1 upper)."""
        table = np.full((self.n_cells, 3, 2), -1, dtype=np.int64)
        for f in range(self.n_faces):
            axis = int(self.faces[f, 0])
            if self.face_owner[f] >= 0:
                table[self.face_owner[f], axis, 1] = f
            if self.face_neighbor[f] >= 0:
                table[self.face_neighbor[f], axis, 0] = f
        return table

    def euler_characteristic(self) -> int:
        return self.n_nodes - self.n_edges + self.n_faces - self.n_cells

    def betti_numbers(self) -> Tuple[int, int, int]:
        """(components, handles, cavities) of the voxel solid."""
        interior = self.interior_faces
        adjacency = sparse.coo_matrix(
            (np.ones(interior.size), (self.face_owner[interior], self.face_neighbor[interior])),
            shape=(self.n_cells, self.n_cells),
        )
        b0, _ = connected_components(adjacency, directed=False)
        per_component = len(self.boundary_components)
        b2 = max(per_component - b0, 0)
        b1 = b0 + b2 - self.euler_characteristic()
        return int(b0), int(b1), int(b2)

    def summary(self) -> Dict[str, float]:
        return {
            "voxel_size": self.voxel_size,
            "cells": self.n_cells,
            "faces": self.n_faces,
            "interior_faces": int(self.interior_faces.size),
            "boundary_faces": int(self.boundary_faces.size),
            "edges": self.n_edges,
            "boundary_edges": int(self.edge_boundary.sum()),
            "nodes": self.n_nodes,
            "boundary_components": len(self.boundary_components),
        }

    @classmethod
    def from_cells(cls, cells, voxel_size: float, origin=None) -> "Mesh":
        cells = np.asarray(cells, dtype=np.int64).reshape(-1, 3)
        if cells.shape[0] == 0:
            raise GeometryError("degenerate mesh: no cells")
        if voxel_size <= 0:
            raise GeometryError(f"degenerate mesh: voxel_size must be positive, got {voxel_size}")
        cells = np.unique(cells, axis=0)
        origin = np.zeros(3) if origin is None else np.asarray(origin, dtype=float)
        cell_index = {tuple(c): n for n, c in enumerate(cells.tolist())}

        face_index: Dict[Tuple[int, int, int, int], int] = {}
        owners: List[int] = []
        neighbors: List[int] = []
        for n, c in enumerate(cells.tolist()):
            for axis in range(3):
                for side in (0, 1):
                    p = list(c)
                    p[axis] += side
                    key = (axis, p[0], p[1], p[2])
                    if key not in face_index:
                        face_index[key] = len(owners)
                        owners.append(-1)
                        neighbors.append(-1)
                    f = face_index[key]
                    # lower facet of the cell: the cell sits on its +axis side
                    if side == 0:
                        neighbors[f] = n
                    else:
                        owners[f] = n
        faces = np.array(list(face_index.keys()), dtype=np.int64)

        edge_index: Dict[Tuple[int, int, int, int], int] = {}
        node_index: Dict[Tuple[int, int, int], int] = {}
        edge_nodes: List[Tuple[int, int]] = []

        def _node(p) -> int:
            key = (int(p[0]), int(p[1]), int(p[2]))
            if key not in node_index:
                node_index[key] = len(node_index)
            return node_index[key]

        for c in cells:
            for axis in range(3):
                u, v = (axis + 1) % 3, (axis + 2) % 3
                for du in (0, 1):
                    for dv in (0, 1):
                        p = c + du * _UNIT[u] + dv * _UNIT[v]
                        key = (axis, int(p[0]), int(p[1]), int(p[2]))
                        if key in edge_index:
                            continue
                        edge_index[key] = len(edge_nodes)
                        edge_nodes.append((_node(p), _node(p + _UNIT[axis])))
        edges = np.array(list(edge_index.keys()), dtype=np.int64)

        # Discrete curl: counter-clockwise facet cycle around +axis of each edge.
        rows: List[int] = []
        cols: List[int] = []
        vals: List[float] = []
        for e, (axis, i, j, k) in enumerate(edges.tolist()):
            p = np.array([i, j, k], dtype=np.int64)
            u, v = (axis + 1) % 3, (axis + 2) % 3
            cycle = (
                (u, p, -1.0),
                (v, p - _UNIT[u], -1.0),
                (u, p - _UNIT[v], 1.0),
                (v, p, 1.0),
            )
            for face_axis, corner, sign in cycle:
                f = face_index.get((face_axis, int(corner[0]), int(corner[1]), int(corner[2])))
                if f is None:
                    continue
                rows.append(f)
                cols.append(e)
                vals.append(sign)
        curl = sparse.csc_matrix((vals, (rows, cols)), shape=(len(faces), len(edges)))

        owners_arr = np.array(owners, dtype=np.int64)
        neighbors_arr = np.array(neighbors, dtype=np.int64)
        is_boundary_face = (owners_arr < 0) | (neighbors_arr < 0)
        boundary_incidence = abs(curl[is_boundary_face.nonzero()[0], :])
        edge_boundary = np.asarray(boundary_incidence.sum(axis=0)).ravel() > 0

        nodes = np.array(list(node_index.keys()), dtype=np.int64)
        mesh = cls(
            voxel_size=float(voxel_size),
            origin=origin,
            cells=cells,
            faces=faces,
            face_owner=owners_arr,
            face_neighbor=neighbors_arr,
            edges=edges,
            edge_boundary=edge_boundary,
            edge_nodes=np.array(edge_nodes, dtype=np.int64),
            nodes=nodes,
            curl=curl,
        )
        mesh.boundary_components = _boundary_components(mesh)
        LOGGER.debug("mesh built: %s", mesh.summary())
        return mesh


def _boundary_components(mesh: Mesh) -> List[np.ndarray]:
    """Boundary facets grouped by edge connectivity."""
    boundary = mesh.boundary_faces
    if boundary.size == 0:
        return []
    incidence = abs(mesh.curl[boundary, :]).tocsr()
    adjacency = incidence @ incidence.T
    count, labels = connected_components(adjacency, directed=False)
    return [boundary[labels == c] for c in range(count)]


def build_voxel_sphere(radius: float, voxel_size: float, centered: bool = False) -> Mesh:
    """Staircase sphere: every lattice cell whose centre lies strictly inside `radius`.

    With ``centered=False`` cell centres sit at h*(i + 1/2) so the sphere centre is a
    lattice node; ``centered=True`` puts a cell centre at the origin instead.
    """
    if radius <= 0 or voxel_size <= 0:
        raise GeometryError(f"degenerate mesh: radius={radius}, voxel_size={voxel_size}")
    h = float(voxel_size)
    shift = 0.0 if centered else 0.5
    n = int(math.ceil(radius / h)) + 1
    idx = np.arange(-n, n + 1)
    lattice = np.stack(np.meshgrid(idx, idx, idx, indexing="ij"), axis=-1).reshape(-1, 3)
    centers = h * (lattice + shift)
    inside = np.einsum("ij,ij->i", centers, centers) < radius * radius
    if not inside.any():
        raise GeometryError(f"degenerate mesh: no cell center inside radius {radius} at voxel size {voxel_size}")
    origin = np.full(3, -0.5 * h if centered else 0.0)
    return Mesh.from_cells(lattice[inside], h, origin)


def build_voxel_box(shape: Sequence[int], voxel_size: float = 1.0) -> Mesh:
    nx, ny, nz = (int(s) for s in shape)
    if min(nx, ny, nz) < 1:
        raise GeometryError(f"degenerate mesh: box shape {tuple(shape)}")
    grid = np.stack(np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij"), axis=-1)
    origin = -0.5 * voxel_size * np.array([nx, ny, nz], dtype=float)
    return Mesh.from_cells(grid.reshape(-1, 3), voxel_size, origin)


# ---------- Layout ----------

@dataclass(frozen=True)
class ArrayLayout:
    centers: np.ndarray
    sphere_radius: float
    scale: float

    @property
    def atom_count(self) -> int:
        return int(self.centers.shape[0])


def vogel_spiral(n_atoms: int, radius: float) -> ArrayLayout:
    """Sunflower layout r_i = c*sqrt(i), theta_i = i*golden_angle, c = R*sqrt(3)."""
    if n_atoms < 1:
        raise GeometryError(f"atom count must be >= 1, got {n_atoms}")
    if radius <= 0:
        raise GeometryError(f"sphere radius must be positive, got {radius}")
    scale = radius * math.sqrt(3.0)
    i = np.arange(1, n_atoms + 1, dtype=float)
    r = scale * np.sqrt(i)
    theta = i * GOLDEN_ANGLE
    centers = np.stack([r * np.cos(theta), r * np.sin(theta), np.zeros_like(r)], axis=1)
    return ArrayLayout(centers=centers, sphere_radius=float(radius), scale=scale)


def line_layout(n_atoms: int, spacing: float, radius: float) -> ArrayLayout:
    """Atoms on the x axis; used by sweeps over separation."""
    x = spacing * np.arange(n_atoms, dtype=float)
    centers = np.stack([x, np.zeros_like(x), np.zeros_like(x)], axis=1)
    return ArrayLayout(centers=centers, sphere_radius=float(radius), scale=float(spacing))


def layout_records(layout: ArrayLayout) -> List[List[object]]:
    return [[a, *layout.centers[a].tolist(), layout.sphere_radius] for a in range(layout.atom_count)]


# ---------- Block tree ----------

@dataclass
class GridLevel:
    level: int
    blocks_per_side: int
    block_size: float
    origin: np.ndarray
    atom_block: np.ndarray                   # block id per atom
    members: Dict[int, List[int]]            # block id -> atoms in atom order

    def coords(self, block: int) -> Tuple[int, int]:
        return divmod(int(block), self.blocks_per_side)

    def near(self, b1: int, b2: int) -> bool:
        (x1, y1), (x2, y2) = self.coords(b1), self.coords(b2)
        return abs(x1 - x2) <= 1 and abs(y1 - y2) <= 1


@dataclass(frozen=True)
class Interaction:
    level: int
    block_i: int
    block_j: int
    kind: str


@dataclass
class BlockTree:
    levels: List[GridLevel]
    interactions: List[List[Interaction]] = field(default_factory=list)
    finest_pairs: List[Tuple[int, int]] = field(default_factory=list)

    @property
    def atom_count(self) -> int:
        return int(self.levels[0].atom_block.size)

    @property
    def depth(self) -> int:
        return len(self.levels)

    def atom_to_block(self, level: int) -> np.ndarray:
        return self.levels[level - 1].atom_block

    def far_pairs(self, level: int) -> List[Interaction]:
        return [it for it in self.interactions[level - 1] if it.kind == "far"]

    def near_pairs(self, level: int) -> List[Interaction]:
        return [it for it in self.interactions[level - 1] if it.kind == "near"]


def _block_index(u: np.ndarray, n: int) -> np.ndarray:
    # coordinates on a grid line fall into the lower block
    return np.clip(np.ceil(u).astype(np.int64) - 1, 0, n - 1)


def build_block_tree(layout: ArrayLayout, level1_blocks_per_side: int = 4) -> BlockTree:
    if level1_blocks_per_side < 2:
        raise GeometryError(f"level-1 grid needs >= 2 blocks per side, got {level1_blocks_per_side}")
    xy = np.asarray(layout.centers, dtype=float)[:, :2]
    if xy.shape[0] == 0:
        raise GeometryError("empty layout")
    if np.unique(xy, axis=0).shape[0] != xy.shape[0]:
        raise GeometryError("indistinguishable atoms: two atoms share the same center")

    lo = xy.min(axis=0)
    side = float((xy.max(axis=0) - lo).max())
    if side == 0.0:
        side = 1.0
    levels: List[GridLevel] = []
    n = level1_blocks_per_side
    while True:
        size = side / n
        u = (xy - lo) / size
        ix, iy = _block_index(u[:, 0], n), _block_index(u[:, 1], n)
        block = ix * n + iy
        members: Dict[int, List[int]] = {}
        for atom, b in enumerate(block.tolist()):
            members.setdefault(b, []).append(atom)
        levels.append(GridLevel(len(levels) + 1, n, size, lo.copy(), block, members))
        if max(len(m) for m in members.values()) <= 1:
            break
        if len(levels) >= MAX_TREE_LEVELS:
            raise GeometryError("indistinguishable atoms: refinement cannot separate them")
        n *= 2

    tree = BlockTree(levels=levels)
    classify_interactions(tree)
    LOGGER.debug("block tree: %d level(s), finest grid %dx%d", tree.depth, n, n)
    return tree


def classify_interactions(tree: BlockTree) -> BlockTree:
    """Fill per-level near/far lists and the finest-level atom pairs."""
    tree.interactions = []
    tree.finest_pairs = []
    first = tree.levels[0]
    occupied = sorted(first.members)
    candidates = [(a, b) for i, a in enumerate(occupied) for b in occupied[i:]]

    for depth, grid in enumerate(tree.levels):
        records: List[Interaction] = []
        following: List[Tuple[int, int]] = []
        is_finest = depth == len(tree.levels) - 1
        child = None if is_finest else tree.levels[depth + 1]
        for b1, b2 in candidates:
            kind = "near" if grid.near(b1, b2) else "far"
            records.append(Interaction(grid.level, b1, b2, kind))
            if kind == "far":
                continue
            if is_finest:
                if b1 != b2:
                    for a in grid.members[b1]:
                        for b in grid.members[b2]:
                            tree.finest_pairs.extend([(a, b), (b, a)])
                continue
            kids1 = sorted({int(child.atom_block[a]) for a in grid.members[b1]})
            kids2 = sorted({int(child.atom_block[a]) for a in grid.members[b2]})
            if b1 == b2:
                following.extend((c1, c2) for i, c1 in enumerate(kids1) for c2 in kids1[i:])
            else:
                following.extend((min(c1, c2), max(c1, c2)) for c1 in kids1 for c2 in kids2)
        tree.interactions.append(records)
        candidates = sorted(following)
    tree.finest_pairs.sort()
    return tree


def coverage_counts(tree: BlockTree) -> Dict[Tuple[int, int], int]:
    """Number of coverage records per ordered distinct-atom pair."""
    counts: Dict[Tuple[int, int], int] = {}
    for depth, grid in enumerate(tree.levels):
        for it in tree.interactions[depth]:
            if it.kind != "far":
                continue
            for a in grid.members[it.block_i]:
                for b in grid.members[it.block_j]:
                    counts[(a, b)] = counts.get((a, b), 0) + 1
                    counts[(b, a)] = counts.get((b, a), 0) + 1
    for pair in tree.finest_pairs:
        counts[pair] = counts.get(pair, 0) + 1
    return counts


def tree_records(tree: BlockTree) -> List[List[object]]:
    rows: List[List[object]] = []
    for grid in tree.levels:
        for b in sorted(grid.members):
            ix, iy = grid.coords(b)
            rows.append(["block", grid.level, b, ix, iy, " ".join(map(str, grid.members[b]))])
    for records in tree.interactions:
        for it in records:
            rows.append(["pair", it.level, it.block_i, it.block_j, it.kind, ""])
    for a, b in tree.finest_pairs:
        rows.append(["finest", tree.depth, a, b, "near", ""])
    return rows
