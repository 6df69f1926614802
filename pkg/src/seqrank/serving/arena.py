"""Per-worker bump-allocated memory arena.

One contiguous pre-allocated block handed out as aligned numpy views and
reset between batches. Overflow falls back to a counted heap allocation so
a request never fails on accounting."""

from __future__ import annotations

import numpy as np

DEFAULT_CAPACITY = 64 * 1024 * 1024
_ALIGN = 64
POISON_BYTE = 0xA5


class Arena:
    """Thread-local scratch memory; never share one arena across workers."""

    def __init__(self, capacity: int = DEFAULT_CAPACITY, poison: bool = False):
        self.capacity = int(capacity)
        self.poison = poison
        self._buf = np.zeros(self.capacity, np.uint8)
        self._offset = 0
        self.high_water = 0
        self.reset_epoch = 0
        self.overflow_count = 0

    @property
    def used(self) -> int:
        return self._offset

    def take(self, shape, dtype) -> np.ndarray:
        """Hand out an uninitialized view of the arena.

        If the request does not fit, count the overflow and fall back to a
        regular heap allocation.
        """
        dtype = np.dtype(dtype)
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        start = -self._offset % _ALIGN + self._offset
        end = start + nbytes
        if end > self.capacity:
            self.overflow_count += 1
            return np.empty(shape, dtype)
        self._offset = end
        self.high_water = max(self.high_water, end)
        return self._buf[start:end].view(dtype).reshape(shape)

    def reset(self) -> None:
        """Forget all allocations; in poison mode, overwrite the block so
        stale reads from the previous batch are detectable."""
        if self.poison:
            self._buf[: self.high_water] = POISON_BYTE
        self._offset = 0
        self.reset_epoch += 1
