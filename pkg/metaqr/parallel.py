"""Static greedy scheduling of weighted block work onto a fixed pool of workers.

Items are taken heaviest first (ties by index) and each goes to the currently
least-loaded worker (ties by lowest worker index).  The resulting assignment is
computed once and reused: every product walks the same per-worker item lists and
partial results are summed in worker order, so results do not depend on thread
timing.
"""

from __future__ import annotations

import heapq
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, TypeVar

import numpy as np
import psutil

from .core import MetaQRError

LOGGER = logging.getLogger(__name__)

WORKERS_ENV = "METAQR_WORKERS"

T = TypeVar("T")


class ScheduleError(MetaQRError):
    module = "parallel"


@dataclass(frozen=True)
class Schedule:
    weights: np.ndarray
    memory: np.ndarray
    n_workers: int
    owner: np.ndarray       # item -> worker
    loads: np.ndarray       # per-worker summed weight
    order: np.ndarray       # items in the order they were placed

    @property
    def n_items(self) -> int:
        return int(self.weights.size)

    @property
    def counts(self) -> np.ndarray:
        return np.bincount(self.owner, minlength=self.n_workers)

    @property
    def worker_memory(self) -> np.ndarray:
        return self.totals(self.memory)

    def totals(self, values: Sequence[float]) -> np.ndarray:
        """Per-worker sums of a per-item quantity under this assignment."""
        values = np.asarray(values, dtype=float).reshape(-1)
        if values.size != self.n_items:
            raise ScheduleError(f"{values.size} values for {self.n_items} items")
        return np.bincount(self.owner, weights=values, minlength=self.n_workers)

    def items_of(self, worker: int) -> List[int]:
        return [int(i) for i in self.order if self.owner[i] == worker]


@dataclass(frozen=True)
class Spread:
    mean: float
    std: float
    normalized: Optional[float]   # None when the mean is zero


@dataclass(frozen=True)
class BalanceStats:
    load: Spread
    interactions: Spread
    memory: Spread

    @property
    def mean(self) -> float:
        return self.load.mean

    @property
    def std(self) -> float:
        return self.load.std

    @property
    def normalized(self) -> Optional[float]:
        return self.load.normalized


def resolve_worker_count(requested: Optional[int] = None) -> int:
    """Explicit value, else $METAQR_WORKERS, else 1.  Zero means physical cores."""
    value = requested
    if value is None:
        raw = os.environ.get(WORKERS_ENV, "").strip()
        value = int(raw) if raw else 1
    if value == 0:
        value = psutil.cpu_count(logical=False) or psutil.cpu_count() or 1
    if value < 1:
        raise ScheduleError(f"worker count must be >= 0, got {value}")
    return int(value)


def schedule(weights: Sequence[float], n_workers: int, memory: Optional[Sequence[float]] = None) -> Schedule:
    if n_workers < 1:
        raise ScheduleError(f"need at least one worker, got {n_workers}")
    w = np.asarray(weights, dtype=float).reshape(-1)
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ScheduleError("weights must be finite and nonnegative")
    mem = np.zeros_like(w) if memory is None else np.asarray(memory, dtype=float).reshape(-1)
    if mem.shape != w.shape:
        raise ScheduleError(f"{mem.size} memory entries for {w.size} weights")

    order = np.array(sorted(range(w.size), key=lambda i: (-w[i], i)), dtype=np.int64)
    owner = np.zeros(w.size, dtype=np.int64)
    loads = np.zeros(n_workers)
    heap = [(0.0, k) for k in range(n_workers)]
    for i in order:
        _, k = heapq.heappop(heap)
        owner[i] = k
        loads[k] += w[i]
        heapq.heappush(heap, (loads[k], k))
    return Schedule(w, mem, int(n_workers), owner, loads, order)


def spread(values: np.ndarray) -> Spread:
    values = np.asarray(values, dtype=float)
    mean = float(values.mean()) if values.size else 0.0
    std = float(values.std()) if values.size else 0.0
    return Spread(mean, std, std / mean if mean > 0 else None)


def balance_stats(plan: Schedule, memory: Optional[Sequence[float]] = None) -> BalanceStats:
    """Spread over workers; ``memory`` replaces the per-item bytes the plan was built with."""
    return BalanceStats(
        load=spread(plan.loads),
        interactions=spread(plan.counts),
        memory=spread(plan.worker_memory if memory is None else plan.totals(memory)),
    )


def run_partitioned(plan: Schedule, fn: Callable[[int], T]) -> List[T]:
    """Run fn(item) on the owning worker; results come back in item order."""
    results: List[Optional[T]] = [None] * plan.n_items

    def _work(worker: int):
        return [(i, fn(i)) for i in plan.items_of(worker)]

    if plan.n_workers == 1:
        chunks = [_work(0)]
    else:
        with ThreadPoolExecutor(max_workers=plan.n_workers, thread_name_prefix="metaqr") as pool:
            chunks = list(pool.map(_work, range(plan.n_workers)))
    for chunk in chunks:
        for i, value in chunk:
            results[i] = value
    return results  # type: ignore[return-value]


def reduce_partials(partials: Sequence[np.ndarray]) -> np.ndarray:
    """Sum per-worker partial vectors in worker order."""
    if not partials:
        raise ScheduleError("nothing to reduce")
    total = np.array(partials[0], copy=True)
    for part in partials[1:]:
        total += part
    return total
