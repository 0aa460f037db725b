"""Registry of the command-line commands and their options.

Each command is a dictionary containing:

* `id`: subcommand name
* `label`: one-line description shown in ``--help``
* `run`: name of the function in :mod:`metaqr.pipeline` that executes it
* `args`: option schema

An option is described by `key` (the flag), `label`, `type` (`int`, `float`,
`str`, `path`, `bool` or `list`), `default` and `help`.  Options carrying a
`setting` override that key of the scenario file; the others are passed to the
command function directly.  Experiments are nested under `experiment` through a
`subcommands` list with the same schema.
"""

from __future__ import annotations

import logging
from typing import Any, Dict, List

from .compression import METHODS

LOGGER = logging.getLogger(__name__)


def _scenario_args() -> List[Dict[str, Any]]:
    return [
        {"key": "--scenario", "label": "Scenario file", "type": "path", "default": None,
         "help": "flat JSON scenario; missing keys take the built-in defaults"},
        {"key": "--output", "label": "Output directory", "type": "path", "default": None, "setting": "output_dir",
         "help": "where tables, reports and logs are written"},
        {"key": "--atoms", "label": "Atom count", "type": "int", "default": None, "setting": "atoms"},
        {"key": "--radius", "label": "Sphere radius (m)", "type": "float", "default": None, "setting": "radius"},
        {"key": "--voxel-size", "label": "Voxel edge (m)", "type": "float", "default": None, "setting": "voxel_size"},
        {"key": "--eps", "label": "QR tolerance", "type": "float", "default": None, "setting": "qr_eps"},
        {"key": "--compression", "label": "Factorization", "type": "str", "default": None, "setting": "compression",
         "choices": list(METHODS)},
        {"key": "--level1-blocks", "label": "Level-1 grid", "type": "int", "default": None, "setting": "level1_blocks"},
        {"key": "--rel-tol", "label": "GMRES tolerance", "type": "float", "default": None, "setting": "rel_tol"},
        {"key": "--max-iter", "label": "GMRES iterations", "type": "int", "default": None, "setting": "max_iter"},
        {"key": "--dense-cap", "label": "Dense oracle cap", "type": "int", "default": None, "setting": "dense_cap"},
        {"key": "--workers", "label": "Workers", "type": "int", "default": None,
         "help": "0 = one per physical core; beats $METAQR_WORKERS and the scenario"},
        {"key": "--no-preconditioner", "label": "Disable Z_D preconditioner", "type": "bool", "default": False,
         "setting": "preconditioner", "invert": True},
        {"key": "--true-history", "label": "Record the true residual every iteration", "type": "bool",
         "default": False, "setting": "true_history"},
        {"key": "--debug", "label": "Debug logging", "type": "bool", "default": False, "setting": "debug"},
    ]


def _eps_list(default: List[float]) -> Dict[str, Any]:
    return {"key": "--eps-list", "label": "QR tolerances", "type": "list", "item": "float", "default": default,
            "help": "space-separated tolerances"}


def get_tasks() -> List[Dict[str, Any]]:
    common = _scenario_args()
    return [
        {"id": "generate", "label": "Write the layout, block tree and atom mesh summary",
         "run": "run_generate", "args": common},
        {"id": "solve", "label": "Compress, precondition and solve one scenario",
         "run": "run_solve", "args": common},
        {"id": "verify", "label": "Check the compressed solve against the dense LU oracle",
         "run": "run_verify", "args": common},
        {"id": "report", "label": "Recompute metrics from the tables of a previous solve",
         "run": "run_report",
         "args": [{"key": "--output", "label": "Run directory", "type": "path", "default": None,
                   "setting": "output_dir"},
                  {"key": "--debug", "label": "Debug logging", "type": "bool", "default": False, "setting": "debug"}]},
        {"id": "experiment", "label": "Accuracy, scaling and splitting experiments",
         "subcommands": [
             {"id": "consistency", "label": "P_c, A_s and G versus the QR tolerance",
              "run": "run_experiment_consistency",
              "args": common + [_eps_list([1e-2, 1e-3, 1e-4, 1e-5])]},
             {"id": "scaling", "label": "Gain and iterations versus the atom count",
              "run": "run_experiment_scaling",
              "args": common + [
                  _eps_list([1e-3]),
                  {"key": "--atoms-list", "label": "Atom counts", "type": "list", "item": "int",
                   "default": [16, 64]},
                  {"key": "--unpreconditioned", "label": "Also solve without preconditioner", "type": "bool",
                   "default": False},
              ]},
             {"id": "split", "label": "Whole versus split compression of a two-atom block",
              "run": "run_experiment_split",
              "args": common + [_eps_list([1e-1, 3e-2, 1e-2, 3e-3, 1e-3, 3e-4, 1e-4, 1e-6])]},
         ]},
    ]


def find_task(command: str, subcommand: str | None = None) -> Dict[str, Any]:
    for task in get_tasks():
        if task["id"] != command:
            continue
        if subcommand is None:
            return task
        for sub in task.get("subcommands", []):
            if sub["id"] == subcommand:
                return sub
    raise KeyError(f"unknown command {command} {subcommand or ''}".strip())
