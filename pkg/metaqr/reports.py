"""Columnar (tab-separated) tables and `key = value` reports.

Floats are written with %.17g so every table round-trips exactly and two runs
with the same inputs produce byte-identical files.
"""

from __future__ import annotations

import csv
import logging
import math
from pathlib import Path
from typing import Dict, Iterable, List, Sequence, Union

import numpy as np

from .core import MetaQRError

LOGGER = logging.getLogger(__name__)

Cell = Union[str, int, float, complex, bool, None]


class ReportError(MetaQRError):
    module = "report"


def format_value(value: Cell) -> str:
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return "1" if value else "0"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        value = float(value)
        if math.isinf(value):
            return "inf" if value > 0 else "-inf"
        return "%.17g" % value
    if isinstance(value, (complex, np.complexfloating)):
        raise ReportError("complex values must be split into real and imaginary columns")
    return str(value)


def write_table(path: Path, header: Sequence[str], rows: Iterable[Sequence[Cell]]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, delimiter="\t", lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            if len(row) != len(header):
                raise ReportError(f"{path.name}: row has {len(row)} fields, header {len(header)}")
            writer.writerow([format_value(v) for v in row])
    LOGGER.debug("wrote %s", path)
    return path


def read_table(path: Path) -> List[Dict[str, str]]:
    path = Path(path)
    if not path.exists():
        raise ReportError(f"missing table {path}")
    with open(path, "r", encoding="utf-8", newline="") as f:
        return list(csv.DictReader(f, delimiter="\t"))


def write_report(path: Path, values: Dict[str, Cell]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"{key} = {format_value(values[key])}" for key in sorted(values)]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    LOGGER.debug("wrote %s", path)
    return path


def read_report(path: Path) -> Dict[str, str]:
    path = Path(path)
    if not path.exists():
        raise ReportError(f"missing report {path}")
    values: Dict[str, str] = {}
    for number, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ReportError(f"{path.name}:{number}: expected 'key = value'")
        values[key.strip()] = value.strip()
    return values


CURRENT_HEADER = ["atom", "dof", "kind", "real", "imag"]


def current_rows(currents: np.ndarray, kinds: Sequence[str]) -> List[List[Cell]]:
    per_atom = len(kinds)
    rows: List[List[Cell]] = []
    for index, value in enumerate(np.asarray(currents, dtype=complex)):
        atom, dof = divmod(index, per_atom)
        rows.append([atom, dof, kinds[dof], value.real, value.imag])
    return rows


def read_currents(path: Path) -> np.ndarray:
    table = read_table(path)
    try:
        return np.array([complex(float(r["real"]), float(r["imag"])) for r in table], dtype=complex)
    except (KeyError, ValueError) as exc:
        raise ReportError(f"{Path(path).name}: malformed current table ({exc})") from exc


def dump_block(path: Path, entries: np.ndarray, atom_i: int = -1, atom_j: int = -1) -> Path:
    """One row per matrix entry, for inspecting a single interaction block."""
    entries = np.asarray(entries, dtype=complex)
    rows = [
        [atom_i, atom_j, r, c, entries[r, c].real, entries[r, c].imag]
        for r in range(entries.shape[0])
        for c in range(entries.shape[1])
    ]
    return write_table(path, ["atom_i", "atom_j", "row", "col", "real", "imag"], rows)
