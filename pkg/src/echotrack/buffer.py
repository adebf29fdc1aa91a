"""Bounded FIFO replay buffer with uniform with-replacement sampling."""

from __future__ import annotations

import numpy as np

from .errors import ConfigError
from .numerics import RngStream


class ReplayBuffer:
    """Ring of fixed-arity tuples of arrays (e.g. (conditioner, next_state));
    oldest entries are evicted once capacity is reached."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ConfigError("buffer capacity must be positive")
        self.capacity = capacity
        self._slots: list[tuple[np.ndarray, ...]] = []
        self._next = 0

    def __len__(self) -> int:
        return len(self._slots)

    def push(self, *items: np.ndarray) -> None:
        entry = tuple(np.array(x, dtype=np.float64) for x in items)
        if len(self._slots) < self.capacity:
            self._slots.append(entry)
        else:
            self._slots[self._next] = entry
            self._next = (self._next + 1) % self.capacity

    def sample(self, batch: int, stream: RngStream) -> tuple[np.ndarray, ...]:
        """Uniform sampling with replacement; stacked along a new batch axis."""
        if not self._slots:
            raise ConfigError("cannot sample from an empty buffer")
        idx = stream.integers(0, len(self._slots), batch)
        arity = len(self._slots[0])
        return tuple(np.stack([self._slots[i][j] for i in idx]) for j in range(arity))

    def state_arrays(self, prefix: str) -> dict[str, np.ndarray]:
        out = {f"{prefix}meta": np.array([len(self._slots), self._next], dtype=np.int64)}
        if self._slots:
            arity = len(self._slots[0])
            for j in range(arity):
                out[f"{prefix}item{j}"] = np.stack([s[j] for s in self._slots])
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], prefix: str) -> None:
        count, nxt = (int(v) for v in arrays[f"{prefix}meta"])
        self._next = nxt
        self._slots = []
        if count:
            stacks = []
            j = 0
            while f"{prefix}item{j}" in arrays:
                stacks.append(arrays[f"{prefix}item{j}"])
                j += 1
            for i in range(count):
                self._slots.append(tuple(np.array(s[i], dtype=np.float64) for s in stacks))
