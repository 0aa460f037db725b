"""Validated run description built from a flat scenario dictionary."""

from __future__ import annotations

import dataclasses
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

import numpy as np

from .assembly import Excitation, Material, QuadConfig
from .compression import METHODS
from .core import MetaQRError
from .geometry import ArrayLayout, line_layout, vogel_spiral
from .parallel import WORKERS_ENV, resolve_worker_count
from .settings_store import DEFAULT_SCENARIO

LAYOUTS = ("vogel", "line")


def _complex_setting(value: complex):
    """A float when real, else a string that complex() parses back."""
    value = complex(value)
    return value.real if value.imag == 0 else str(value)


class ScenarioError(MetaQRError):
    module = "scenario"


@dataclass(frozen=True)
class Scenario:
    radius: float
    voxel_size: float
    centered_lattice: bool
    atoms: int
    layout: str
    spacing: float
    chi: complex
    conductivity: float
    frequency: float
    e0: Tuple[complex, complex, complex]
    direction: Tuple[float, float, float]
    level1_blocks: int
    qr_eps: float
    compression: str
    rel_tol: float
    max_iter: int
    preconditioner: bool
    quad: QuadConfig
    workers: int
    deterministic: bool
    dense_cap: int
    output_dir: Path
    debug: bool = False
    true_history: bool = False

    @classmethod
    def from_settings(cls, settings: Dict[str, Any], workers: Optional[int] = None) -> "Scenario":
        s = {**DEFAULT_SCENARIO, **(settings or {})}
        try:
            if s.get("chi_real") is not None or s.get("chi_imag") is not None:
                chi = complex(float(s.get("chi_real") or 0.0), float(s.get("chi_imag") or 0.0))
            else:
                chi = complex(float(s["permittivity_real"]), float(s["permittivity_imag"])) - 1.0
            direction = np.array([float(s["direction_x"]), float(s["direction_y"]), float(s["direction_z"])])
            e0 = np.array([complex(s["e0_x"]), complex(s["e0_y"]), complex(s["e0_z"])])
            if workers is None:
                raw = os.environ.get(WORKERS_ENV, "").strip()
                workers = int(raw) if raw else int(s["workers"])
            quad = QuadConfig(
                far_order=int(s["far_order"]),
                near_order=int(s["near_order"]),
                surface_order=int(s["surface_order"]),
                self_levels=int(s["self_levels"]),
                max_levels=int(s["max_levels"]),
                max_order=int(s["max_order"]),
                near_factor=float(s["near_factor"]),
                eps_quad=float(s["eps_quad"]),
            )
            scenario = cls(
                radius=float(s["radius"]),
                voxel_size=float(s["voxel_size"]),
                centered_lattice=bool(s["centered_lattice"]),
                atoms=int(s["atoms"]),
                layout=str(s["layout"]),
                spacing=float(s["spacing"]),
                chi=chi,
                conductivity=float(s["conductivity"]),
                frequency=float(s["frequency"]),
                e0=tuple(complex(x) for x in e0),
                direction=tuple(float(x) for x in direction),
                level1_blocks=int(s["level1_blocks"]),
                qr_eps=float(s["qr_eps"]),
                compression=str(s["compression"]),
                rel_tol=float(s["rel_tol"]),
                max_iter=int(s["max_iter"]),
                preconditioner=bool(s["preconditioner"]),
                quad=quad,
                workers=resolve_worker_count(int(workers)),
                deterministic=bool(s["deterministic"]),
                dense_cap=int(s["dense_cap"]),
                output_dir=Path(s["output_dir"]),
                debug=bool(s.get("debug", False)),
                true_history=bool(s.get("true_history", False)),
            )
        except ScenarioError:
            raise
        except (KeyError, TypeError, ValueError, MetaQRError) as exc:
            raise ScenarioError(f"invalid scenario: {exc}") from exc
        scenario.validate()
        return scenario

    def validate(self) -> None:
        positive = {
            "radius": self.radius,
            "voxel_size": self.voxel_size,
            "frequency": self.frequency,
            "spacing": self.spacing,
            "near_factor": self.quad.near_factor,
        }
        for key, value in positive.items():
            if not (math.isfinite(value) and value > 0):
                raise ScenarioError(f"{key} must be positive, got {value}")
        if self.atoms < 1:
            raise ScenarioError(f"atoms must be >= 1, got {self.atoms}")
        if self.layout not in LAYOUTS:
            raise ScenarioError(f"unknown layout {self.layout!r}; expected one of {LAYOUTS}")
        if self.compression not in METHODS:
            raise ScenarioError(f"unknown compression {self.compression!r}; expected one of {METHODS}")
        for key in ("qr_eps", "rel_tol", "eps_quad"):
            value = self.quad.eps_quad if key == "eps_quad" else getattr(self, key)
            if not 0.0 < value < 1.0:
                raise ScenarioError(f"{key} must lie in (0, 1), got {value}")
        if self.max_iter < 1 or self.dense_cap < 0 or self.level1_blocks < 2:
            raise ScenarioError("max_iter >= 1, dense_cap >= 0 and level1_blocks >= 2 are required")
        if self.conductivity < 0:
            raise ScenarioError(f"conductivity must be >= 0, got {self.conductivity}")
        if self.chi == 0 and self.conductivity == 0:
            raise ScenarioError("material has zero susceptibility and zero conductivity")
        # raises on a zero direction or a non-transverse amplitude
        try:
            self.excitation
        except MetaQRError as exc:
            raise ScenarioError(str(exc)) from exc

    @property
    def permittivity(self) -> complex:
        return self.chi + 1.0

    @property
    def material(self) -> Material:
        return Material(sigma=self.conductivity, chi=self.chi)

    @property
    def excitation(self) -> Excitation:
        return Excitation.plane_wave(self.frequency, self.e0, self.direction)

    def build_layout(self) -> ArrayLayout:
        if self.layout == "line":
            return line_layout(self.atoms, self.spacing, self.radius)
        return vogel_spiral(self.atoms, self.radius)

    def replace(self, **changes) -> "Scenario":
        return dataclasses.replace(self, **changes)

    def to_settings(self) -> Dict[str, Any]:
        """Flat, JSON-ready form (the inverse of from_settings)."""
        return {
            "radius": self.radius,
            "voxel_size": self.voxel_size,
            "centered_lattice": self.centered_lattice,
            "atoms": self.atoms,
            "layout": self.layout,
            "spacing": self.spacing,
            "permittivity_real": self.permittivity.real,
            "permittivity_imag": self.permittivity.imag,
            "chi_real": None,
            "chi_imag": None,
            "conductivity": self.conductivity,
            "frequency": self.frequency,
            "e0_x": _complex_setting(self.e0[0]),
            "e0_y": _complex_setting(self.e0[1]),
            "e0_z": _complex_setting(self.e0[2]),
            "direction_x": self.direction[0],
            "direction_y": self.direction[1],
            "direction_z": self.direction[2],
            "level1_blocks": self.level1_blocks,
            "qr_eps": self.qr_eps,
            "compression": self.compression,
            "rel_tol": self.rel_tol,
            "max_iter": self.max_iter,
            "preconditioner": self.preconditioner,
            **{f.name: getattr(self.quad, f.name) for f in dataclasses.fields(self.quad)},
            "workers": self.workers,
            "deterministic": self.deterministic,
            "dense_cap": self.dense_cap,
            "output_dir": str(self.output_dir),
            "debug": self.debug,
            "true_history": self.true_history,
        }
