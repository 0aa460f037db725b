import sys
import json
import logging
import logging.handlers
import uuid
from pathlib import Path
from typing import Optional

import psutil

from .core import ROOT

EVENT_LOGGER = "metaqr.events"


class SessionFilter(logging.Filter):
    def __init__(self, session: str):
        super().__init__()
        self.session = session

    def filter(self, record):
        record.session = self.session
        return True


def new_session_id() -> str:
    return str(uuid.uuid4())[:8]


def _attach(logger: logging.Logger, handler: logging.Handler, level: int, fmt: logging.Formatter,
            session: SessionFilter) -> None:
    handler.setLevel(level)
    handler.setFormatter(fmt)
    handler.addFilter(session)
    logger.addHandler(handler)


def _detach_all(logger: logging.Logger) -> None:
    for handler in list(logger.handlers):
        logger.removeHandler(handler)
        try:
            handler.close()
        except Exception:
            pass


def setup_logging(settings: dict, session_id: Optional[str] = None, log_dir: Optional[Path] = None) -> logging.Logger:
    session_id = session_id or new_session_id()
    console_level = logging.DEBUG if settings.get("debug") else logging.INFO
    log_dir = Path(log_dir) if log_dir is not None else ROOT / "logs"

    root = logging.getLogger()
    root.setLevel(logging.DEBUG)
    events = logging.getLogger(EVENT_LOGGER)
    _detach_all(root)
    _detach_all(events)

    session = SessionFilter(session_id)
    plain = logging.Formatter("[%(levelname)s] %(message)s")
    detailed = logging.Formatter(
        "%(asctime)s [%(levelname)s] [%(name)s] %(module)s:%(lineno)d | %(message)s | session=%(session)s"
    )

    # stderr: stdout carries the command summaries
    _attach(root, logging.StreamHandler(getattr(sys, "__stderr__", sys.stderr)), console_level, plain, session)
    try:
        log_dir.mkdir(parents=True, exist_ok=True)
        _attach(root, logging.FileHandler(log_dir / "latest.log", mode="w", encoding="utf-8"),
                logging.DEBUG, detailed, session)
        _attach(root, logging.handlers.RotatingFileHandler(log_dir / "debug.log", maxBytes=1_000_000,
                                                            backupCount=5, encoding="utf-8"),
                logging.DEBUG, detailed, session)
        _attach(events, logging.FileHandler(log_dir / "events.log", mode="w", encoding="utf-8"),
                logging.DEBUG, detailed, session)
        events.setLevel(logging.DEBUG)
        events.propagate = False
    except OSError as exc:
        root.warning("file logging disabled: %s", exc)

    # scipy LinAlgWarnings and friends
    logging.captureWarnings(True)

    logger = logging.getLogger("metaqr")
    logger.setLevel(logging.DEBUG)
    logger.debug("logging ready | debug=%s | session=%s | dir=%s", settings.get("debug"), session_id, log_dir)
    return logger


def event_log(event: str, **data):
    """One JSON line per pipeline stage, stamped with the process RSS."""
    try:
        data.setdefault("rss_mb", round(psutil.Process().memory_info().rss / 2**20, 1))
    except Exception:
        pass
    try:
        payload = json.dumps({"event": event, **data}, ensure_ascii=False, default=str, sort_keys=True)
    except Exception:
        payload = f"{event} {data}"
    logging.getLogger(EVENT_LOGGER).info(payload)


class _NoProgress:
    def update(self, n: int = 1):
        pass

    def close(self):
        pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        return False


def progress_bar(total: int, desc: str):
    """tqdm bar on a real terminal, a no-op otherwise."""
    try:
        from tqdm import tqdm
    except Exception:
        tqdm = None
    show = bool(total) and tqdm is not None and getattr(sys.stderr, "isatty", lambda: False)()
    if not show:
        return _NoProgress()
    return tqdm(total=total, desc=desc, unit="block", file=sys.stderr, leave=False)
