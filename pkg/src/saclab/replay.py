"""Ring-buffer transition storage and contiguous multi-step segment sampling.

Segments never cross episode boundaries: each sampled slice is truncated at
the first terminal transition, so shorter-than-n segments near episode ends
are returned as-is and the multi-step return sum simply has fewer terms.
Behavior-policy log-densities are stored at collection time because the
acting policy keeps changing while the data sits in the buffer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .env import Observation

DEFAULT_CAPACITY = 100_000
DEFAULT_WARMUP = 1_000

SNAPSHOT_VERSION = 1


class NotReadyError(RuntimeError):
    """Raised when sampling is requested before the warmup threshold."""


@dataclass(frozen=True)
class Transition:
    obs: Observation
    action: float
    reward: float
    next_obs: Observation
    behavior_log_density: float
    done: bool

    def __post_init__(self) -> None:
        if not math.isfinite(self.behavior_log_density):
            raise ValueError("behavior_log_density must be finite")
        if not math.isfinite(self.reward):
            raise ValueError("reward must be finite")


@dataclass(frozen=True)
class Segment:
    """Contiguous transitions from a single episode, terminal-truncated."""

    transitions: tuple

    def __post_init__(self) -> None:
        if len(self.transitions) == 0:
            raise ValueError("segment must contain at least one transition")
        for t in self.transitions[:-1]:
            if t.done:
                raise ValueError("only the last transition of a segment may be terminal")

    def __len__(self) -> int:
        return len(self.transitions)

    @property
    def actions(self) -> np.ndarray:
        return np.array([t.action for t in self.transitions], dtype=np.float64)

    @property
    def rewards(self) -> np.ndarray:
        return np.array([t.reward for t in self.transitions], dtype=np.float64)

    @property
    def behavior_log_densities(self) -> np.ndarray:
        return np.array([t.behavior_log_density for t in self.transitions], dtype=np.float64)

    @property
    def dones(self) -> np.ndarray:
        return np.array([t.done for t in self.transitions], dtype=bool)

    @property
    def observations(self) -> list:
        """States s_0 .. s_{J+1}: each transition's obs plus the final next_obs."""
        return [t.obs for t in self.transitions] + [self.transitions[-1].next_obs]


class ReplayBuffer:
    """Fixed-capacity ring of transitions tagged with episode ids.

    Logical order equals insertion (time) order; eviction drops the oldest
    transitions first, so surviving same-episode runs stay contiguous.
    """

    def __init__(self, capacity: int = DEFAULT_CAPACITY, warmup: int = DEFAULT_WARMUP):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        if warmup < 1 or warmup > capacity:
            raise ValueError("warmup must be in [1, capacity]")
        self.capacity = capacity
        self.warmup = warmup
        self._store: list = [None] * capacity
        self._episode_ids = np.zeros(capacity, dtype=np.int64)
        self._pos = 0
        self._full = False
        self._current_episode = 0
        self.push_count = 0

    def __len__(self) -> int:
        return self.capacity if self._full else self._pos

    def _physical(self, logical: int) -> int:
        if self._full:
            return (self._pos + logical) % self.capacity
        return logical

    def push(self, transition: Transition) -> None:
        self._store[self._pos] = transition
        self._episode_ids[self._pos] = self._current_episode
        self._pos += 1
        if self._pos == self.capacity:
            self._pos = 0
            self._full = True
        self.push_count += 1
        if transition.done:
            self._current_episode += 1

    @property
    def ready(self) -> bool:
        return len(self) >= self.warmup

    def segment_at(self, start: int, n: int) -> Segment:
        """Segment of up to n+1 transitions beginning at logical index start."""
        if not 0 <= start < len(self):
            raise IndexError(f"start index {start} out of range for buffer of length {len(self)}")
        if n < 0:
            raise ValueError("n must be >= 0")
        first = self._physical(start)
        episode = self._episode_ids[first]
        picked = []
        for offset in range(n + 1):
            logical = start + offset
            if logical >= len(self):
                break
            phys = self._physical(logical)
            if self._episode_ids[phys] != episode:
                break
            t = self._store[phys]
            picked.append(t)
            if t.done:
                break
        return Segment(tuple(picked))

    def sample_segments(self, batch: int, n: int, rng: np.random.Generator) -> list:
        """batch segments with uniform random starts, each terminal-truncated."""
        if not self.ready:
            raise NotReadyError(
                f"buffer holds {len(self)} transitions, warmup threshold is {self.warmup}"
            )
        if batch < 1:
            raise ValueError("batch must be >= 1")
        starts = rng.integers(0, len(self), size=batch)
        return [self.segment_at(int(s), n) for s in starts]

    # -- snapshot ----------------------------------------------------------------

    def save(self, path: str | Path) -> None:
        """Write buffer contents (logical order) to a .npz snapshot."""
        size = len(self)
        if size == 0:
            raise ValueError("refusing to snapshot an empty buffer")
        trans = [self._store[self._physical(i)] for i in range(size)]
        ids = np.array([self._episode_ids[self._physical(i)] for i in range(size)], dtype=np.int64)
        np.savez(
            Path(path),
            version=np.int64(SNAPSHOT_VERSION),
            capacity=np.int64(self.capacity),
            warmup=np.int64(self.warmup),
            push_count=np.int64(self.push_count),
            current_episode=np.int64(self._current_episode),
            episode_ids=ids,
            windows=np.stack([t.obs.window for t in trans]),
            balances=np.array([t.obs.balance for t in trans], dtype=np.float64),
            holdings=np.array([t.obs.holdings for t in trans], dtype=np.float64),
            next_windows=np.stack([t.next_obs.window for t in trans]),
            next_balances=np.array([t.next_obs.balance for t in trans], dtype=np.float64),
            next_holdings=np.array([t.next_obs.holdings for t in trans], dtype=np.float64),
            actions=np.array([t.action for t in trans], dtype=np.float64),
            rewards=np.array([t.reward for t in trans], dtype=np.float64),
            behavior_log_densities=np.array(
                [t.behavior_log_density for t in trans], dtype=np.float64
            ),
            dones=np.array([t.done for t in trans], dtype=bool),
        )

    @classmethod
    def load(cls, path: str | Path) -> "ReplayBuffer":
        with np.load(Path(path)) as z:
            version = int(z["version"])
            if version != SNAPSHOT_VERSION:
                raise ValueError(f"unsupported snapshot version {version}")
            buf = cls(capacity=int(z["capacity"]), warmup=int(z["warmup"]))
            ids = z["episode_ids"]
            n = len(ids)
            for i in range(n):
                obs = Observation(
                    balance=float(z["balances"][i]),
                    holdings=float(z["holdings"][i]),
                    window=z["windows"][i].copy(),
                )
                next_obs = Observation(
                    balance=float(z["next_balances"][i]),
                    holdings=float(z["next_holdings"][i]),
                    window=z["next_windows"][i].copy(),
                )
                buf._store[i] = Transition(
                    obs=obs,
                    action=float(z["actions"][i]),
                    reward=float(z["rewards"][i]),
                    next_obs=next_obs,
                    behavior_log_density=float(z["behavior_log_densities"][i]),
                    done=bool(z["dones"][i]),
                )
                buf._episode_ids[i] = ids[i]
            buf._pos = n % buf.capacity
            buf._full = n == buf.capacity
            buf._current_episode = int(z["current_episode"])
            buf.push_count = int(z["push_count"])
        return buf
