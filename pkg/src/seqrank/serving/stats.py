"""Sliding-window per-stage latency statistics with nearest-rank percentiles."""

from __future__ import annotations

import threading
import time
from collections import deque

STAGES = ("queueing", "batch_prep", "staging", "forward", "e2e")
WINDOW_SECONDS = 60.0


class LatencyStats:
    """Records (timestamp, duration) samples per stage and answers
    nearest-rank percentile queries over the trailing window."""

    def __init__(self, window: float = WINDOW_SECONDS, clock=time.monotonic):
        self.window = window
        self.clock = clock
        self._samples: dict[str, deque] = {stage: deque() for stage in STAGES}
        self._lock = threading.Lock()

    def record(self, stage: str, seconds: float, now: float | None = None) -> None:
        if stage not in self._samples:
            raise KeyError(f"unknown stage {stage!r}")
        now = self.clock() if now is None else now
        with self._lock:
            self._samples[stage].append((now, seconds))

    def _evict(self, stage: str, now: float) -> None:
        cutoff = now - self.window
        samples = self._samples[stage]
        while samples and samples[0][0] <= cutoff:
            samples.popleft()

    def percentile(self, stage: str, p: float, now: float | None = None) -> float | None:
        """Nearest-rank percentile over the window; None when empty."""
        now = self.clock() if now is None else now
        with self._lock:
            self._evict(stage, now)
            values = sorted(v for _, v in self._samples[stage])
        if not values:
            return None
        rank = max(1, int(-(-p * len(values) // 100)))  # ceil(p/100 * n)
        return values[min(rank, len(values)) - 1]

    def summary(self, now: float | None = None) -> dict[str, dict[str, float | None]]:
        return {
            stage: {
                "p50": self.percentile(stage, 50, now),
                "p90": self.percentile(stage, 90, now),
                "p99": self.percentile(stage, 99, now),
            }
            for stage in STAGES
        }
