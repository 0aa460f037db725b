"""`metaqr` command line.

Exit codes: 0 success / converged, 1 GMRES did not converge, 2 a MetaQRError
(logged as ``[module] message``), 3 a verification check failed, 4 anything else.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

from . import pipeline
from .core import MetaQRError
from .logging_utils import new_session_id, setup_logging
from .scenario import Scenario
from .settings_store import load_scenario
from .tasks_registry import find_task, get_tasks

LOGGER = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_NOT_CONVERGED = 1
EXIT_ERROR = 2
EXIT_VERIFY_FAILED = 3
EXIT_UNEXPECTED = 4

_TYPES = {"int": int, "float": float, "str": str, "path": Path}

# consumed while building the scenario
_SCENARIO_KEYS = ("--scenario", "--workers")


def _dest(key: str) -> str:
    return key.lstrip("-").replace("-", "_")


def _add_args(parser: argparse.ArgumentParser, args: Sequence[Dict[str, Any]]) -> None:
    for arg in args:
        kwargs: Dict[str, Any] = {"help": arg.get("help", arg["label"]), "dest": _dest(arg["key"])}
        kind = arg["type"]
        if kind == "bool":
            kwargs["action"] = "store_true"
        elif kind == "list":
            kwargs.update(nargs="+", type=_TYPES[arg["item"]], default=arg["default"])
        else:
            kwargs.update(type=_TYPES[kind], default=arg["default"])
            if "choices" in arg:
                kwargs["choices"] = arg["choices"]
        parser.add_argument(arg["key"], **kwargs)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="metaqr", description="QR-compressed volume integral solver for meta-atom arrays")
    commands = parser.add_subparsers(dest="command", required=True)
    for task in get_tasks():
        sub = commands.add_parser(task["id"], help=task["label"], description=task["label"])
        if "subcommands" in task:
            inner = sub.add_subparsers(dest="subcommand", required=True)
            for child in task["subcommands"]:
                _add_args(inner.add_parser(child["id"], help=child["label"], description=child["label"]), child["args"])
        else:
            _add_args(sub, task["args"])
    return parser


def scenario_from_args(task: Dict[str, Any], ns: argparse.Namespace) -> Scenario:
    settings = load_scenario(getattr(ns, "scenario", None))
    for arg in task["args"]:
        setting = arg.get("setting")
        if not setting:
            continue
        value = getattr(ns, _dest(arg["key"]), None)
        if arg["type"] == "bool":
            if value:
                settings[setting] = not arg.get("invert", False)
        elif value is not None:
            settings[setting] = str(value) if isinstance(value, Path) else value
    return Scenario.from_settings(settings, workers=getattr(ns, "workers", None))


def _call_args(task: Dict[str, Any], ns: argparse.Namespace) -> Dict[str, Any]:
    """Options without a scenario setting become keyword arguments of the command function."""
    return {
        _dest(arg["key"]): getattr(ns, _dest(arg["key"]))
        for arg in task["args"]
        if not arg.get("setting") and arg["key"] not in _SCENARIO_KEYS
    }


def _dispatch(ns: argparse.Namespace, task: Dict[str, Any], session: str) -> int:
    run = getattr(pipeline, task["run"])
    if ns.command == "report":
        output = Path(ns.output or load_scenario()["output_dir"])
        setup_logging({"debug": ns.debug}, session, output / "logs")
        metrics = run(output)
        print(f"G = {metrics['gain']:.6g}, {metrics['iterations']} iteration(s), residual {metrics['final_residual']:.3e}")
        return EXIT_OK

    scenario = scenario_from_args(task, ns)
    setup_logging({"debug": scenario.debug}, session, Path(scenario.output_dir) / "logs")
    LOGGER.debug("scenario: %s", scenario.to_settings())
    result = run(scenario, **_call_args(task, ns))

    if ns.command == "generate":
        for name, path in result.items():
            print(f"{name}: {path}")
        return EXIT_OK

    if ns.command == "solve":
        report = result.report
        print(
            f"{'converged' if report.converged else 'NOT converged'} after {report.iterations} iteration(s); "
            f"G = {report.metrics['gain']:.4g}; output in {scenario.output_dir}"
        )
        return EXIT_OK if report.converged else EXIT_NOT_CONVERGED

    if ns.command == "verify":
        for check in result.checks:
            print(f"{check.name:<22} {check.value:.3e}  limit {check.limit:.1e}  {'ok' if check.passed else 'FAILED'}")
        return EXIT_OK if result.passed else EXIT_VERIFY_FAILED

    print(f"{result.name}: {result.paths['table']}")
    return EXIT_OK


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    ns = parser.parse_args(argv)
    task = find_task(ns.command, getattr(ns, "subcommand", None))
    try:
        return _dispatch(ns, task, new_session_id())
    except MetaQRError as exc:
        LOGGER.error("[%s] %s", exc.module, exc)
        return EXIT_ERROR
    except Exception:
        LOGGER.exception("unexpected failure")
        return EXIT_UNEXPECTED


if __name__ == "__main__":
    sys.exit(main())
