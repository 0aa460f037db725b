"""Atom-atom interaction blocks Z_ij = R_ij + j w mu0 L_ij + D_ij / (j w eps0).

Everything is first integrated against the lowest-order facet functions of the
shared atom mesh and then projected onto the loop/star basis, Z = C^T Z_facet C.
The facet function of facet F inside a cell is (xi or 1 - xi) / h^2 along the
facet axis, so its flux through F is one.

Cell pairs of one atom, and cell or facet pairs of two atoms that are closer than
``near_factor`` diagonals, go through the difference-variable rules of
:mod:`metaqr.quadrature`; everything else uses tensor Gauss points per cell.
"""

from __future__ import annotations

import logging
import math
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.spatial.distance import cdist

from . import quadrature as qd
from . import reports
from .basis import BasisSet
from .core import EPS0, MU0, MetaQRError
from .geometry import ArrayLayout, Mesh

LOGGER = logging.getLogger(__name__)

DEFAULT_DENSE_CAP = 5000
_VOLUME = ("II", "II", "II")


class AssemblyError(MetaQRError):
    module = "assembly"


class QuadratureError(AssemblyError):
    def __init__(self, message: str, pair: Tuple[int, int] = (-1, -1), estimate: float = float("nan")):
        super().__init__(message)
        self.pair = pair
        self.estimate = estimate


def green(r, k: float):
    """e^{-jkr} / (4 pi r)."""
    r = np.asarray(r, dtype=float)
    if np.any(r <= 0.0):
        raise AssemblyError("singular evaluation: green() needs r > 0")
    value = np.exp(-1j * k * r) / (4.0 * math.pi * r)
    return complex(value) if value.ndim == 0 else value


# ---------- Inputs ----------

@dataclass(frozen=True)
class Material:
    sigma: float = 0.0
    chi: complex = 0j

    @classmethod
    def from_permittivity(cls, eps_r: complex, sigma: float = 0.0) -> "Material":
        return cls(sigma=float(sigma), chi=complex(eps_r) - 1.0)

    def admittance(self, omega: float) -> complex:
        return self.sigma + 1j * omega * EPS0 * self.chi

    def resistivity(self, omega: float) -> complex:
        y = self.admittance(omega)
        if y == 0:
            raise AssemblyError(f"material admittance sigma + j w eps0 chi vanishes for {self}")
        return 1.0 / y


@dataclass(frozen=True)
class Excitation:
    omega: float
    amplitude: Tuple[complex, complex, complex]
    direction: Tuple[float, float, float]

    @classmethod
    def plane_wave(cls, frequency: float, amplitude: Sequence[complex], direction: Sequence[float]) -> "Excitation":
        if frequency <= 0:
            raise AssemblyError(f"frequency must be positive, got {frequency}")
        d = np.asarray(direction, dtype=float)
        norm = float(np.linalg.norm(d))
        if norm == 0.0:
            raise AssemblyError("propagation direction must be nonzero")
        d = d / norm
        a = np.asarray(amplitude, dtype=complex)
        if abs(np.dot(a, d)) > 1e-9 * max(float(np.linalg.norm(a)), 1.0):
            raise AssemblyError("plane-wave amplitude must be perpendicular to the propagation direction")
        return cls(2.0 * math.pi * frequency, tuple(complex(x) for x in a), tuple(float(x) for x in d))

    @property
    def wavenumber(self) -> float:
        return self.omega * math.sqrt(EPS0 * MU0)

    @property
    def e0(self) -> np.ndarray:
        return np.asarray(self.amplitude, dtype=complex)

    @property
    def k_hat(self) -> np.ndarray:
        return np.asarray(self.direction, dtype=float)


@dataclass(frozen=True)
class QuadConfig:
    far_order: int = 3          # Gauss points per axis for separated cells/facets
    near_order: int = 5         # per axis in difference-variable rules
    surface_order: int = 3
    self_levels: int = 3        # graded radial panels at coincident points
    max_levels: int = 8
    max_order: int = 11
    near_factor: float = 2.0    # in cell (or facet) diagonals
    eps_quad: float = 1e-6


@dataclass(frozen=True)
class DenseBlock:
    atom_i: int
    atom_j: int
    entries: np.ndarray

    @property
    def rows(self) -> int:
        return int(self.entries.shape[0])

    @property
    def cols(self) -> int:
        return int(self.entries.shape[1])


# ---------- Assembler ----------

class AtomAssembler:
    """Produces Z_ij on demand for atoms sharing one mesh and basis."""

    def __init__(
        self,
        mesh: Mesh,
        basis: BasisSet,
        layout: ArrayLayout,
        materials: Union[Material, Sequence[Material]],
        excitation: Excitation,
        quad: Optional[QuadConfig] = None,
    ):
        if basis.empty:
            raise AssemblyError("empty basis: the atom mesh carries no admissible current")
        self.mesh = mesh
        self.basis = basis
        self.layout = layout
        if isinstance(materials, Material):
            materials = [materials] * layout.atom_count
        if len(materials) != layout.atom_count:
            raise AssemblyError(f"{len(materials)} materials for {layout.atom_count} atoms")
        self.materials: List[Material] = list(materials)
        self.excitation = excitation
        self.quad = quad or QuadConfig()
        self.h = mesh.voxel_size
        self.kappa = excitation.wavenumber * self.h
        self.combination = basis.combination.toarray()
        self.cell_faces = mesh.cell_faces()
        self._lock = threading.Lock()
        self._self_geometry: Optional[Tuple[np.ndarray, np.ndarray, np.ndarray]] = None
        self._self_blocks: Dict[Material, np.ndarray] = {}
        self._pair_cache: Dict[tuple, object] = {}
        self.keep_blocks = False
        self._mutual_blocks: Dict[Tuple[int, int], np.ndarray] = {}
        self.self_estimate = float("nan")
        self._sample_volume()
        self._sample_surface()

    @property
    def atom_count(self) -> int:
        return self.layout.atom_count

    @property
    def dofs_per_atom(self) -> int:
        return self.basis.n_dofs

    @property
    def n_dofs(self) -> int:
        return self.atom_count * self.dofs_per_atom

    # -- sampling --
    def _sample_volume(self) -> None:
        h = self.h
        xi, w = qd.tensor_rule(self.quad.far_order, 3)
        corners = self.mesh.cell_corners()
        nq = w.size
        npts = self.mesh.n_cells * nq
        self.vol_points = np.empty((npts, 3))
        self.vol_weights = np.tile(w * h**3, self.mesh.n_cells)
        self.vol_cell = np.repeat(np.arange(self.mesh.n_cells), nq)
        self.vol_values = np.zeros((3, npts, self.dofs_per_atom))
        for c in range(self.mesh.n_cells):
            rows = slice(c * nq, (c + 1) * nq)
            self.vol_points[rows] = corners[c] + h * xi
            for a in range(3):
                lower = self.combination[self.cell_faces[c, a, 0]]
                upper = self.combination[self.cell_faces[c, a, 1]]
                t = xi[:, a][:, None]
                self.vol_values[a, rows] = ((1.0 - t) * lower + t * upper) / h**2

    def _sample_surface(self) -> None:
        h = self.h
        uv, w = qd.tensor_rule(self.quad.surface_order, 2)
        self.boundary = self.mesh.boundary_faces
        self.boundary_sign = self.mesh.face_outward_sign[self.boundary].astype(float)
        self.boundary_axis = self.mesh.faces[self.boundary, 0]
        self.boundary_corner = self.mesh.face_corners()[self.boundary]
        nq = w.size
        npts = self.boundary.size * nq
        self.srf_points = np.empty((npts, 3))
        self.srf_weights = np.tile(w * h**2, self.boundary.size)
        self.srf_face = np.repeat(np.arange(self.boundary.size), nq)
        self.srf_values = np.zeros((npts, self.dofs_per_atom))
        for p, f in enumerate(self.boundary):
            axis = int(self.boundary_axis[p])
            u, v = (axis + 1) % 3, (axis + 2) % 3
            rows = slice(p * nq, (p + 1) * nq)
            pts = np.repeat(self.boundary_corner[p][None, :], nq, axis=0)
            pts[:, u] += h * uv[:, 0]
            pts[:, v] += h * uv[:, 1]
            self.srf_points[rows] = pts
            self.srf_values[rows] = self.boundary_sign[p] * self.combination[f] / h**2

    # -- difference-rule kernels (voxel units, without the h factors) --
    def _volume_weights(self, rule: qd.DifferenceRule) -> np.ndarray:
        key = ("vw", id(rule))
        cached = self._pair_cache.get(key)
        if cached is None:
            flat = [qd.correlation(rule.var[:, b], None, None) for b in range(3)]
            cached = np.empty((3, 2, 2, rule.size))
            for a in range(3):
                base = np.prod([flat[b] for b in range(3) if b != a], axis=0)
                for s in (0, 1):
                    for t in (0, 1):
                        cached[a, s, t] = base * qd.correlation(rule.var[:, a], s, t) * rule.weights
            self._pair_cache[key] = cached
        return cached

    def _surface_weights(self, kinds, rule: qd.DifferenceRule) -> np.ndarray:
        key = ("sw", kinds, id(rule))
        cached = self._pair_cache.get(key)
        if cached is None:
            cached = rule.weights.copy()
            for ax, kind in enumerate(kinds):
                if kind == "II":
                    cached = cached * qd.correlation(rule.var[:, ax], None, None)
            self._pair_cache[key] = cached
        return cached

    def _cell_pair(self, offset: Tuple[int, int, int], levels: int) -> np.ndarray:
        singular = qd.critical_point(_VOLUME, offset) is not None
        key = ("cell", offset, levels if singular else None)
        cached = self._pair_cache.get(key)
        if cached is None:
            if singular:
                rule = qd.singular_rule(_VOLUME, tuple(float(o) for o in offset), self.quad.near_order, levels)
            else:
                rule = qd.regular_rule(_VOLUME, self.quad.near_order)
            d = qd.difference_vectors(_VOLUME, rule.var, np.asarray(offset, dtype=float))[0]
            g = qd.helmholtz(np.linalg.norm(d, axis=1), self.kappa)
            cached = self._volume_weights(rule) @ g
            self._pair_cache[key] = cached
        return cached

    def _facet_kinds(self, p: int, q: int) -> Tuple[str, str, str]:
        a, b = int(self.boundary_axis[p]), int(self.boundary_axis[q])
        kinds = ["II", "II", "II"]
        if a == b:
            kinds[a] = "PP"
        else:
            kinds[a] = "PI"
            kinds[b] = "IP"
        return tuple(kinds)

    def _facet_pair(self, kinds, offset: Tuple[int, int, int], levels: int) -> complex:
        singular = qd.critical_point(kinds, offset) is not None
        key = ("facet", kinds, offset, levels if singular else None)
        cached = self._pair_cache.get(key)
        if cached is None:
            if singular:
                rule = qd.singular_rule(kinds, tuple(float(o) for o in offset), self.quad.near_order, levels)
            else:
                rule = qd.regular_rule(kinds, self.quad.near_order)
            d = qd.difference_vectors(kinds, rule.var, np.asarray(offset, dtype=float))[0]
            g = qd.helmholtz(np.linalg.norm(d, axis=1), self.kappa)
            cached = complex(self._surface_weights(kinds, rule) @ g)
            self._pair_cache[key] = cached
        return cached

    # -- self block --
    def _self_facet_matrices(self, levels: int) -> Tuple[np.ndarray, np.ndarray]:
        mesh, h = self.mesh, self.h
        nf = mesh.n_faces
        L = np.zeros((nf, nf), dtype=complex)
        cells = mesh.cells
        for c1 in range(mesh.n_cells):
            for c2 in range(c1, mesh.n_cells):
                offset = tuple(int(x) for x in cells[c2] - cells[c1])
                block = self._cell_pair(offset, levels)
                rows = self.cell_faces[c1]
                cols = self.cell_faces[c2]
                for a in range(3):
                    for s in (0, 1):
                        for t in (0, 1):
                            L[rows[a, s], cols[a, t]] += block[a, s, t]
                            if c1 != c2:
                                L[cols[a, t], rows[a, s]] += block[a, s, t]
        L = 0.5 * h * (L + L.T)

        D = np.zeros((nf, nf), dtype=complex)
        lattice = mesh.faces[self.boundary, 1:]
        for p in range(self.boundary.size):
            for q in range(p, self.boundary.size):
                kinds = self._facet_kinds(p, q)
                offset = tuple(int(x) for x in lattice[q] - lattice[p])
                value = self._facet_pair(kinds, offset, levels)
                value *= self.boundary_sign[p] * self.boundary_sign[q] / h
                F, G = self.boundary[p], self.boundary[q]
                D[F, G] += value
                if p != q:
                    D[G, F] += value
        return L, D

    def _resistance_facets(self) -> np.ndarray:
        nf = self.mesh.n_faces
        R = np.zeros((nf, nf))
        mass = np.array([[1.0 / 3.0, 1.0 / 6.0], [1.0 / 6.0, 1.0 / 3.0]]) / self.h
        for c in range(self.mesh.n_cells):
            for a in range(3):
                idx = self.cell_faces[c, a]
                R[np.ix_(idx, idx)] += mass
        return R

    def _project(self, facet_matrix: np.ndarray) -> np.ndarray:
        return self.combination.T @ facet_matrix @ self.combination

    def self_parts(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Projected (R, L, D) of the self block, refined until stable to eps_quad."""
        if self._self_geometry is not None:
            return self._self_geometry
        quad = self.quad
        levels = quad.self_levels
        L0, D0 = self._self_facet_matrices(levels)
        while True:
            L1, D1 = self._self_facet_matrices(levels + 1)
            dL, dD = np.abs(L1 - L0), np.abs(D1 - D0)
            est = max(
                float(np.linalg.norm(dL) / np.linalg.norm(L1)),
                float(np.linalg.norm(dD) / np.linalg.norm(D1)) if D1.any() else 0.0,
            )
            if est <= quad.eps_quad:
                break
            if levels + 1 >= quad.max_levels:
                worst = np.unravel_index(int(np.argmax(dL + dD)), dL.shape)
                raise QuadratureError(
                    f"quadrature tolerance not met: self-block estimate {est:.3e} > {quad.eps_quad:.1e}"
                    f" (worst facet pair {worst[0]}-{worst[1]})",
                    pair=(int(worst[0]), int(worst[1])),
                    estimate=est,
                )
            levels += 1
            L0, D0 = L1, D1
        self.self_estimate = est
        LOGGER.debug("self block converged at %d graded levels (estimate %.2e)", levels + 1, est)
        self._self_geometry = (self._project(self._resistance_facets()), self._project(L1), self._project(D1))
        return self._self_geometry

    def self_block(self, atom: int) -> np.ndarray:
        material = self.materials[atom]
        with self._lock:
            block = self._self_blocks.get(material)
            if block is None:
                R, L, D = self.self_parts()
                omega = self.excitation.omega
                geometric = 1j * omega * MU0 * L + D / (1j * omega * EPS0)
                block = material.resistivity(omega) * R + geometric
                block.setflags(write=False)
                self._self_blocks[material] = block
        return block

    # -- mutual blocks --
    def _far_product(self, values, weights, points, cell_of, shift, near) -> np.ndarray:
        dist = cdist(points, points + shift)
        if dist.min() <= 0.0:
            raise AssemblyError("atoms overlap: coincident quadrature points in a mutual block")
        kernel = green(dist, self.excitation.wavenumber)
        kernel[near[np.ix_(cell_of, cell_of)]] = 0.0
        if values.ndim == 2:
            values = values[None]
        total = np.zeros((values.shape[2], values.shape[2]), dtype=complex)
        for comp in values:
            weighted = comp * weights[:, None]
            total += weighted.T @ kernel @ weighted
        return total

    def _near_volume(self, pairs: np.ndarray, offsets: np.ndarray, order: int) -> np.ndarray:
        rule = qd.regular_rule(_VOLUME, order)
        d = qd.difference_vectors(_VOLUME, rule.var, offsets)
        g = qd.helmholtz(np.linalg.norm(d, axis=2), self.kappa)
        values = np.einsum("mn,astn->mast", g, self._volume_weights(rule))
        rows = self.cell_faces[pairs[:, 0]][:, :, :, None]
        cols = self.cell_faces[pairs[:, 1]][:, :, None, :]
        rows, cols = np.broadcast_arrays(rows, cols)
        out = np.zeros((self.mesh.n_faces, self.mesh.n_faces), dtype=complex)
        np.add.at(out, (rows.ravel(), cols.ravel()), values.ravel())
        return self.h * out

    def _near_surface(self, pairs: np.ndarray, offsets: np.ndarray, order: int) -> np.ndarray:
        out = np.zeros((self.mesh.n_faces, self.mesh.n_faces), dtype=complex)
        kinds_of = [self._facet_kinds(p, q) for p, q in pairs]
        for kinds in sorted(set(kinds_of)):
            sel = np.array([k == kinds for k in kinds_of])
            rule = qd.regular_rule(kinds, order)
            d = qd.difference_vectors(kinds, rule.var, offsets[sel])
            g = qd.helmholtz(np.linalg.norm(d, axis=2), self.kappa)
            values = g @ self._surface_weights(kinds, rule)
            p, q = pairs[sel, 0], pairs[sel, 1]
            values = values * self.boundary_sign[p] * self.boundary_sign[q] / self.h
            np.add.at(out, (self.boundary[p], self.boundary[q]), values)
        return out

    def _refined_near(self, build, pairs, offsets, far_part: np.ndarray) -> np.ndarray:
        """Raise the near order until two successive orders agree to eps_quad."""
        if pairs.size == 0:
            return far_part
        quad = self.quad
        order = quad.near_order
        coarse = self._project(build(pairs, offsets, order))
        while True:
            fine = self._project(build(pairs, offsets, order + 2))
            total = far_part + fine
            est = float(np.linalg.norm(fine - coarse) / max(np.linalg.norm(total), 1e-300))
            if est <= quad.eps_quad:
                return total
            if order + 2 >= quad.max_order:
                worst = pairs[0]
                raise QuadratureError(
                    f"quadrature tolerance not met: near-pair estimate {est:.3e} > {quad.eps_quad:.1e}"
                    f" (pair {int(worst[0])}-{int(worst[1])})",
                    pair=(int(worst[0]), int(worst[1])),
                    estimate=est,
                )
            order += 2
            coarse = fine

    def mutual_parts(self, i: int, j: int) -> Tuple[np.ndarray, np.ndarray]:
        """Projected (L, D) between atoms i and j, both in metres."""
        h = self.h
        shift = self.layout.centers[j] - self.layout.centers[i]

        corners = self.mesh.cell_corners()
        offsets = (corners[None, :, :] + shift - corners[:, None, :]) / h
        near = np.linalg.norm(offsets, axis=2) < self.quad.near_factor * math.sqrt(3.0)
        far = self._far_product(self.vol_values, self.vol_weights, self.vol_points, self.vol_cell, shift, near)
        pairs = np.argwhere(near)
        L = self._refined_near(self._near_volume, pairs, offsets[near], far)

        fcorners = self.boundary_corner
        foffsets = (fcorners[None, :, :] + shift - fcorners[:, None, :]) / h
        centers = self.mesh.face_centers()[self.boundary]
        fnear = cdist(centers, centers + shift) < self.quad.near_factor * math.sqrt(2.0) * h
        far = self._far_product(self.srf_values, self.srf_weights, self.srf_points, self.srf_face, shift, fnear)
        fpairs = np.argwhere(fnear)
        D = self._refined_near(self._near_surface, fpairs, foffsets[fnear], far)
        return L, D

    def _mutual(self, i: int, j: int) -> np.ndarray:
        L, D = self.mutual_parts(i, j)
        omega = self.excitation.omega
        return 1j * omega * MU0 * L + D / (1j * omega * EPS0)

    def mutual_block(self, i: int, j: int) -> np.ndarray:
        """Z_ij for i != j, always freshly integrated."""
        if i == j:
            raise AssemblyError(f"mutual block needs two distinct atoms, got {i} twice")
        return self._mutual(i, j)

    def block(self, i: int, j: int) -> np.ndarray:
        if i == j:
            return self.self_block(i)
        if not self.keep_blocks:
            return self._mutual(i, j)
        # memoised as (low, high); the other orientation is its transpose
        key = (min(i, j), max(i, j))
        cached = self._mutual_blocks.get(key)
        if cached is None:
            cached = self._mutual(*key)
            self._mutual_blocks[key] = cached
        return cached if i < j else cached.T

    def excitation_vector(self) -> np.ndarray:
        k = self.excitation.wavenumber
        e0, k_hat = self.excitation.e0, self.excitation.k_hat
        parts = []
        for atom in range(self.atom_count):
            x = self.vol_points + self.layout.centers[atom]
            wave = np.exp(-1j * k * (x @ k_hat)) * self.vol_weights
            v = np.zeros(self.dofs_per_atom, dtype=complex)
            for a in range(3):
                if e0[a] != 0:
                    v += e0[a] * (self.vol_values[a].T @ wave)
            parts.append(v)
        return np.concatenate(parts)


# ---------- Module-level operations ----------

def assemble_block(assembler: AtomAssembler, atom_i: int, atom_j: int) -> DenseBlock:
    return DenseBlock(atom_i, atom_j, assembler.block(atom_i, atom_j))


def assemble_excitation(assembler: AtomAssembler) -> np.ndarray:
    return assembler.excitation_vector()


def assemble_dense(assembler: AtomAssembler, dense_cap: int = DEFAULT_DENSE_CAP) -> np.ndarray:
    n = assembler.n_dofs
    if n > dense_cap:
        raise AssemblyError(f"dense oracle disabled at this size: {n} DoFs > cap {dense_cap}")
    p = assembler.dofs_per_atom
    Z = np.zeros((n, n), dtype=complex)
    for i in range(assembler.atom_count):
        for j in range(i, assembler.atom_count):
            block = assembler.block(i, j)
            Z[i * p:(i + 1) * p, j * p:(j + 1) * p] = block
            if i != j:
                Z[j * p:(j + 1) * p, i * p:(i + 1) * p] = block.T
    return Z


def dump_block(path: Path, block: DenseBlock) -> Path:
    return reports.dump_block(path, block.entries, block.atom_i, block.atom_j)
