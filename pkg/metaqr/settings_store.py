import json
import logging
from pathlib import Path
from typing import Optional

from .core import CONFIG_PATH, DEFAULT_OUTPUT_DIR

LOGGER = logging.getLogger(__name__)


DEFAULT_SCENARIO = {
    # Meta-atom: sphere radius and voxel edge, metres
    "radius": 100e-9,
    "voxel_size": 90e-9,
    # Put a cell centre on the sphere centre instead of a lattice node
    "centered_lattice": False,
    # Array
    "atoms": 8,
    "layout": "vogel",          # vogel | line
    "spacing": 300e-9,          # line layout only
    # Material: gold at 500 THz.  chi = permittivity - 1 unless chi_* are given
    "permittivity_real": -9.428,
    "permittivity_imag": 1.513,
    "chi_real": None,
    "chi_imag": None,
    "conductivity": 0.0,
    # Incident plane wave
    "frequency": 5e14,
    # complex components may be given as strings, e.g. "1j"
    "e0_x": 1.0,
    "e0_y": 0.0,
    "e0_z": 0.0,
    "direction_x": 0.0,
    "direction_y": 0.0,
    "direction_z": -1.0,
    # Block tree and compression
    "level1_blocks": 4,
    "qr_eps": 1e-3,
    "compression": "qr",        # qr | aca
    # GMRES
    "rel_tol": 1e-4,
    "max_iter": 5000,
    "preconditioner": True,
    # Unpreconditioned residual at every iteration (one extra product each)
    "true_history": False,
    # Quadrature
    "far_order": 3,
    "near_order": 5,
    "surface_order": 3,
    "self_levels": 3,
    "max_levels": 8,
    "max_order": 11,
    "near_factor": 2.0,
    "eps_quad": 1e-6,
    # Execution; workers = 0 means one per physical core
    "workers": 1,
    "deterministic": True,
    "dense_cap": 5000,
    "output_dir": str(DEFAULT_OUTPUT_DIR),
    "debug": False,
}


def load_scenario(path: Optional[Path] = None) -> dict:
    path = Path(path) if path is not None else CONFIG_PATH
    try:
        if path.exists():
            with open(path, "r", encoding="utf-8") as f:
                data = json.load(f)
                if isinstance(data, dict):
                    return {**DEFAULT_SCENARIO, **data}
                LOGGER.warning("ignoring scenario %s: top level is not an object", path)
    except Exception as exc:
        LOGGER.warning("ignoring unreadable scenario %s: %s", path, exc)
    return DEFAULT_SCENARIO.copy()


def save_scenario(data: dict, path: Optional[Path] = None) -> bool:
    """Merge `data` into the file on disk and write it atomically."""
    path = Path(path) if path is not None else CONFIG_PATH

    def _deep_merge(dst, src):
        if isinstance(dst, dict) and isinstance(src, dict):
            for k, v in src.items():
                if k in dst and isinstance(dst[k], dict) and isinstance(v, dict):
                    _deep_merge(dst[k], v)
                else:
                    dst[k] = v
            return dst
        return src

    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        current = {}
        if path.exists():
            try:
                with open(path, "r", encoding="utf-8") as rf:
                    current = json.load(rf) or {}
            except Exception:
                current = {}
        merged = _deep_merge(current if isinstance(current, dict) else {}, data or {})
        tmp_path = path.with_suffix(path.suffix + ".tmp")
        with open(tmp_path, "w", encoding="utf-8") as f:
            json.dump(merged, f, indent=2, sort_keys=True)
        tmp_path.replace(path)
        return True
    except Exception as exc:
        LOGGER.error("could not save scenario %s: %s", path, exc)
        return False
