"""In-memory user feature store: user id to sequences, snapshot reads."""

from __future__ import annotations

import threading

import numpy as np

from ..core import (
    IMPRESSION_CAP,
    LIFELONG_CAP,
    REALTIME_CAP,
    TokenBlock,
    UserSequences,
)
from ..dataset import read_store


def _truncate(block: TokenBlock, cap: int) -> TokenBlock:
    if len(block) <= cap:
        return block
    return block.take(np.arange(cap))


class FeatureStore:
    """Concurrent-read store; writes replace a user's value wholesale, so a
    reader always sees one consistent snapshot of that user."""

    def __init__(
        self,
        ll_cap: int = LIFELONG_CAP,
        rt_cap: int = REALTIME_CAP,
        imp_cap: int = IMPRESSION_CAP,
    ):
        self._users: dict[int, UserSequences] = {}
        self._lock = threading.Lock()
        self._caps = (ll_cap, rt_cap, imp_cap)
        self.generation = 0

    def put(self, user_id: int, seqs: UserSequences) -> None:
        """Insert or replace a user; sequences beyond the caps keep only
        their most recent tokens."""
        ll_cap, rt_cap, imp_cap = self._caps
        seqs = UserSequences(
            _truncate(seqs.lifelong, ll_cap),
            _truncate(seqs.realtime, rt_cap),
            _truncate(seqs.impression, imp_cap),
        )
        seqs.validate(ll_cap, rt_cap, imp_cap)
        with self._lock:
            self._users[user_id] = seqs
            self.generation += 1

    def get(self, user_id: int) -> UserSequences | None:
        return self._users.get(user_id)

    def __len__(self) -> int:
        return len(self._users)

    def load(self, path) -> int:
        """Bulk-load a `.tav2` store file; returns the user count."""
        users = read_store(path)
        for user_id, seqs in users:
            self.put(user_id, seqs)
        return len(users)

    @classmethod
    def from_pairs(cls, pairs, **kwargs) -> "FeatureStore":
        store = cls(**kwargs)
        for user_id, seqs in pairs:
            store.put(user_id, seqs)
        return store
