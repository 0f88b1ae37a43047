"""Training dataset with reward-prioritised replay (PRT) sampling."""

from __future__ import annotations

import csv
import math
from pathlib import Path

import numpy as np

from .policy import Trajectory

ORIGIN_STEP_A = "step-A"
ORIGIN_ACCEPTED = "proposal-accepted"
ORIGIN_REJECTED = "proposal-rejected"
ORIGINS = (ORIGIN_STEP_A, ORIGIN_ACCEPTED, ORIGIN_REJECTED)

TOP_FRACTION = 0.1


class ReplayDataset:
    """Append-ordered multiset of evaluated trajectories.

    With ``capacity`` set, the oldest entry is evicted first. Rewards are kept
    in a parallel numpy buffer so percentile splits stay O(n).
    """

    def __init__(self, capacity: int | None = None):
        if capacity is not None and capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self._trajs: list[Trajectory] = []
        self._meta: list[tuple[int, str]] = []
        self._logr = np.empty(1024)
        self._seq = np.empty(1024, dtype=np.int64)
        self._head = 0  # index of the oldest live entry
        self._n_inserted = 0

    def __len__(self) -> int:
        return len(self._trajs) - self._head

    def __iter__(self):
        return iter(self._trajs[self._head :])

    @property
    def entries(self) -> list[Trajectory]:
        return self._trajs[self._head :]

    @property
    def log_rewards(self) -> np.ndarray:
        return self._logr[self._head : len(self._trajs)]

    def records(self):
        for t, (rnd, origin) in zip(self._trajs[self._head :], self._meta[self._head :]):
            yield t, rnd, origin

    def insert(self, traj: Trajectory, round_index: int = 0, origin: str = ORIGIN_STEP_A) -> None:
        if not math.isfinite(traj.log_reward):
            raise ValueError("dataset entries need a finite positive reward")
        if origin not in ORIGINS:
            raise ValueError(f"unknown origin {origin!r}")
        k = len(self._trajs)
        if k == len(self._logr):
            self._compact_or_grow()
            k = len(self._trajs)
        self._trajs.append(traj)
        self._meta.append((round_index, origin))
        self._logr[k] = traj.log_reward
        self._seq[k] = self._n_inserted
        self._n_inserted += 1
        if self.capacity is not None and len(self) > self.capacity:
            self._trajs[self._head] = None  # type: ignore[call-overload]
            self._head += 1

    def _compact_or_grow(self) -> None:
        live = slice(self._head, len(self._trajs))
        logr, seq = self._logr[live].copy(), self._seq[live].copy()
        self._trajs = self._trajs[live]
        self._meta = self._meta[live]
        self._head = 0
        size = max(len(self._logr), 2 * len(logr) + 16)
        self._logr = np.empty(size)
        self._seq = np.empty(size, dtype=np.int64)
        self._logr[: len(logr)] = logr
        self._seq[: len(seq)] = seq

    def top_indices(self, fraction: float = TOP_FRACTION) -> tuple[np.ndarray, np.ndarray]:
        """Split live positions into the ceil(fraction*|D|) best and the rest.

        Ties at the boundary go to the most recently inserted entries.
        """
        n = len(self)
        if n == 0:
            raise ValueError("dataset is empty")
        k = math.ceil(fraction * n)
        logr = self.log_rewards
        if k >= n:
            return np.arange(n), np.arange(0)
        kth = np.partition(logr, n - k)[n - k]
        above = np.flatnonzero(logr > kth)
        tied = np.flatnonzero(logr == kth)
        need = k - len(above)
        seq = self._seq[self._head : self._head + n]
        tied = tied[np.argsort(-seq[tied], kind="stable")]
        top = np.sort(np.concatenate([above, tied[:need]]))
        mask = np.ones(n, dtype=bool)
        mask[top] = False
        return top, np.flatnonzero(mask)

    def sample_prt(self, batch_size: int, rng: np.random.Generator) -> list[Trajectory]:
        """Half the batch from the top decile, half from the rest, with replacement."""
        if len(self) == 0:
            raise ValueError("cannot sample from an empty dataset")
        top, rest = self.top_indices()
        n_top = batch_size - batch_size // 2
        n_rest = batch_size - n_top
        if len(rest) == 0:
            n_top, n_rest = batch_size, 0
        picks = [top[rng.integers(len(top), size=n_top)]]
        if n_rest:
            picks.append(rest[rng.integers(len(rest), size=n_rest)])
        live = self.entries
        return [live[i] for i in np.concatenate(picks)]

    def dump(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["terminal", "reward", "log_reward", "round", "origin"])
            for t, rnd, origin in self.records():
                w.writerow([t.terminal, repr(t.reward), repr(t.log_reward), rnd, origin])


def insert(dataset: ReplayDataset, traj: Trajectory, round_index: int = 0, origin: str = ORIGIN_STEP_A):
    dataset.insert(traj, round_index, origin)
    return dataset


def sample_prt(dataset: ReplayDataset, batch_size: int, rng: np.random.Generator) -> list[Trajectory]:
    return dataset.sample_prt(batch_size, rng)
