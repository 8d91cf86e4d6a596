"""Core value types and the sequence primitives used everywhere else.

Sequences are column-oriented (three parallel int64 arrays) so that search and
batching never materialize per-behavior Python objects on hot paths.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Iterator, Sequence

import numpy as np

from .errors import ConfigError, InputOrderError

SECONDS_PER_DAY = 86400
DEFAULT_BOUNDARIES = (1.0, 2.0, 4.0, 8.0, 16.0, 32.0, 64.0, 128.0, 256.0)


@dataclass(frozen=True)
class Behavior:
    item_id: int
    category_id: int
    timestamp: int

    def __post_init__(self):
        if self.item_id < 0 or self.category_id < 0 or self.timestamp < 0:
            raise ValueError(f"negative field in {self}")


@dataclass(frozen=True)
class CandidateItem:
    item_id: int
    category_id: int
    request_time: int

    def __post_init__(self):
        if self.item_id < 0 or self.category_id < 0 or self.request_time < 0:
            raise ValueError(f"negative field in {self}")


def _frozen_int_array(values) -> np.ndarray:
    arr = np.array(values, dtype=np.int64).reshape(-1)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class BehaviorSequence:
    """Chronologically ordered behaviors stored as parallel columns."""

    items: np.ndarray
    categories: np.ndarray
    timestamps: np.ndarray

    def __post_init__(self):
        items = _frozen_int_array(self.items)
        cats = _frozen_int_array(self.categories)
        times = _frozen_int_array(self.timestamps)
        if not (len(items) == len(cats) == len(times)):
            raise ValueError("column lengths differ")
        if len(times) > 1 and np.any(np.diff(times) < 0):
            raise InputOrderError("timestamps must be non-decreasing")
        object.__setattr__(self, "items", items)
        object.__setattr__(self, "categories", cats)
        object.__setattr__(self, "timestamps", times)

    @classmethod
    def empty(cls) -> "BehaviorSequence":
        return cls(np.empty(0, np.int64), np.empty(0, np.int64), np.empty(0, np.int64))

    @classmethod
    def from_behaviors(cls, behaviors: Iterable[Behavior]) -> "BehaviorSequence":
        bs = list(behaviors)
        return cls(
            [b.item_id for b in bs],
            [b.category_id for b in bs],
            [b.timestamp for b in bs],
        )

    def __len__(self) -> int:
        return len(self.items)

    def __iter__(self) -> Iterator[Behavior]:
        for i in range(len(self)):
            yield self[i]

    def __getitem__(self, i):
        if isinstance(i, slice):
            return BehaviorSequence(self.items[i], self.categories[i], self.timestamps[i])
        return Behavior(int(self.items[i]), int(self.categories[i]), int(self.timestamps[i]))

    def take(self, idx: np.ndarray) -> "BehaviorSequence":
        """Sub-sequence at ascending positions ``idx``."""
        return BehaviorSequence(self.items[idx], self.categories[idx], self.timestamps[idx])

    def concat(self, other: "BehaviorSequence") -> "BehaviorSequence":
        return BehaviorSequence(
            np.concatenate([self.items, other.items]),
            np.concatenate([self.categories, other.categories]),
            np.concatenate([self.timestamps, other.timestamps]),
        )

    def __eq__(self, other):
        if not isinstance(other, BehaviorSequence):
            return NotImplemented
        return (
            np.array_equal(self.items, other.items)
            and np.array_equal(self.categories, other.categories)
            and np.array_equal(self.timestamps, other.timestamps)
        )

    def __repr__(self):
        return f"BehaviorSequence(len={len(self)})"


@dataclass(frozen=True, eq=False)
class TrainingSample:
    user_id: int
    candidate: CandidateItem
    label: int
    short_seq: BehaviorSequence
    long_seq: BehaviorSequence

    def __post_init__(self):
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label}")
        rt = self.candidate.request_time
        for seq in (self.short_seq, self.long_seq):
            if len(seq) and seq.timestamps[-1] >= rt:
                raise InputOrderError(
                    f"user {self.user_id}: behavior at {seq.timestamps[-1]} not before request {rt}"
                )

    @property
    def history(self) -> BehaviorSequence:
        return self.long_seq.concat(self.short_seq)


@dataclass(frozen=True)
class TimeDeltaBuckets:
    boundaries: tuple[float, ...] = field(default=DEFAULT_BOUNDARIES)

    def __post_init__(self):
        b = tuple(float(x) for x in self.boundaries)
        if not b:
            raise ConfigError("time-delta buckets need at least one boundary")
        if b[0] <= 0 or any(x >= y for x, y in zip(b, b[1:])):
            raise ConfigError(f"boundaries must be positive and strictly increasing: {b}")
        object.__setattr__(self, "boundaries", b)

    @property
    def n_buckets(self) -> int:
        # one overflow bucket past the last boundary
        return len(self.boundaries) + 1


def split_short_long(seq: BehaviorSequence, short_len: int) -> tuple[BehaviorSequence, BehaviorSequence]:
    """Return ``(long, short)``: the most recent ``short_len`` behaviors go to ``short``."""
    if short_len < 0:
        raise ValueError("short_len must be >= 0")
    cut = max(len(seq) - short_len, 0)
    return seq[:cut], seq[cut:]


def time_delta_days(b: Behavior, cand: CandidateItem) -> float:
    delta = cand.request_time - b.timestamp
    if delta < 0:
        raise InputOrderError(f"behavior at {b.timestamp} is after request at {cand.request_time}")
    return delta / SECONDS_PER_DAY


def time_deltas_days(timestamps: np.ndarray, request_time: int) -> np.ndarray:
    """Vectorized :func:`time_delta_days`."""
    delta = request_time - np.asarray(timestamps, dtype=np.int64)
    if delta.size and delta.min() < 0:
        raise InputOrderError("behavior timestamp after request time")
    return delta / SECONDS_PER_DAY


def bucketize_delta(delta, buckets: TimeDeltaBuckets):
    """Index of the first boundary strictly greater than ``delta``.

    Works on scalars and arrays; deltas past the last boundary land in the
    overflow bucket ``len(boundaries)``.
    """
    if not buckets.boundaries:
        raise ConfigError("empty boundary list")
    d = np.asarray(delta, dtype=np.float64)
    if d.size and d.min() < 0:
        raise InputOrderError("negative time delta")
    out = np.searchsorted(np.asarray(buckets.boundaries), d, side="right")
    if np.ndim(out) == 0:
        return int(out)
    return out.astype(np.int64)


def make_sequence(items: Sequence[int], cats: Sequence[int], times: Sequence[int]) -> BehaviorSequence:
    return BehaviorSequence(np.asarray(items), np.asarray(cats), np.asarray(times))
