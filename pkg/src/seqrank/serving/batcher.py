"""Dynamic request batching: a pure flush policy plus a threaded driver.

The policy is separated from the threads so the max-wait contract can be
tested with a virtual clock."""

from __future__ import annotations

import queue
import threading
import time
from dataclasses import dataclass, field

from ..core import ValidationError


@dataclass(frozen=True)
class BatcherConfig:
    max_batch: int = 128  # items across the batch
    max_wait: float = 0.005  # seconds the oldest request may wait
    workers: int = 1

    def validate(self) -> None:
        if self.max_batch < 1 or self.workers < 1 or self.max_wait < 0:
            raise ValidationError("invalid batcher configuration")


@dataclass
class Pending:
    """One submitted request plus its completion plumbing."""

    payload: object
    items: int
    enqueue_time: float
    done: threading.Event = field(default_factory=threading.Event)
    result: object = None
    error: Exception | None = None

    def set_result(self, result) -> None:
        self.result = result
        self.done.set()

    def set_error(self, error: Exception) -> None:
        self.error = error
        self.done.set()


class BatchPolicy:
    """Flush rule: a batch forms as soon as pending items reach max_batch or
    the oldest pending request has waited max_wait."""

    def __init__(self, cfg: BatcherConfig):
        cfg.validate()
        self.cfg = cfg

    def deadline(self, oldest_enqueue: float) -> float:
        return oldest_enqueue + self.cfg.max_wait

    def should_flush(self, pending_items: int, oldest_enqueue: float, now: float) -> bool:
        if pending_items >= self.cfg.max_batch:
            return True
        return now >= self.deadline(oldest_enqueue)

    def plan(self, pending: list[Pending], now: float) -> list[Pending] | None:
        """Requests to flush now, oldest first, or None to keep waiting.

        Whole requests are packed until max_batch items; a single oversized
        request flushes alone.
        """
        if not pending:
            return None
        if not self.should_flush(sum(p.items for p in pending), pending[0].enqueue_time, now):
            return None
        batch: list[Pending] = []
        items = 0
        for p in pending:
            if batch and items + p.items > self.cfg.max_batch:
                break
            batch.append(p)
            items += p.items
        return batch


class DynamicBatcher:
    """Queue + worker pool; each worker drains batches per the policy and
    hands them to `handler(batch, worker_index)`."""

    def __init__(self, cfg: BatcherConfig, handler, clock=time.monotonic):
        self.cfg = cfg
        self.policy = BatchPolicy(cfg)
        self.handler = handler
        self.clock = clock
        self._queue: queue.Queue = queue.Queue()
        self._threads: list[threading.Thread] = []
        self._stop = threading.Event()

    def start(self) -> None:
        for i in range(self.cfg.workers):
            t = threading.Thread(target=self._worker, args=(i,), daemon=True)
            t.start()
            self._threads.append(t)

    def stop(self) -> None:
        self._stop.set()
        for t in self._threads:
            t.join(timeout=5)
        self._threads.clear()

    def submit(self, payload, items: int) -> Pending:
        pending = Pending(payload, items, self.clock())
        self._queue.put(pending)
        return pending

    def _worker(self, index: int) -> None:
        carry: Pending | None = None
        while not self._stop.is_set():
            if carry is not None:
                first, carry = carry, None
            else:
                try:
                    first = self._queue.get(timeout=0.05)
                except queue.Empty:
                    continue
            batch = [first]
            items = first.items
            deadline = self.policy.deadline(first.enqueue_time)
            while items < self.cfg.max_batch:
                remaining = deadline - self.clock()
                if remaining <= 0:
                    break
                try:
                    nxt = self._queue.get(timeout=remaining)
                except queue.Empty:
                    break
                if items + nxt.items > self.cfg.max_batch:
                    carry = nxt  # would overflow; starts the next batch
                    break
                batch.append(nxt)
                items += nxt.items
            try:
                self.handler(batch, index)
            except Exception as exc:  # noqa: BLE001 - propagate to waiters
                for p in batch:
                    p.set_error(exc)
