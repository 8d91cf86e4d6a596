"""User behavior tree: user_id -> category_id -> behaviors.

Each user node keeps its whole history in chronological column arrays plus a
per-category index of positions into them (CSR layout). A category lookup is a
binary search over the user's category keys followed by a slice, so its cost
depends on ``k`` and not on the user's total history length.

Trees are immutable snapshots; :func:`ubt_insert` returns a new tree that
shares every untouched user node with the old one.
"""

from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass
from typing import Iterable, Iterator

import numpy as np

from .domain import Behavior, BehaviorSequence
from .errors import ChecksumError, IngestError, StoreFormatError, StoreIOError, VersionMismatchError

MAGIC = b"SIMUBT1\x00"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<8sIIqQ")  # magic, version, reserved, build_ts, n_users
_USER_HEADER = struct.Struct("<qQQ")  # user_id, n_behaviors, n_categories
_CHECKSUM = struct.Struct("<Q")


def _checksum(data) -> int:
    return int.from_bytes(hashlib.blake2b(data, digest_size=8).digest(), "little")


def _ro(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=np.int64)
    a.flags.writeable = False
    return a


class UserNode:
    """One user's behaviors, chronological, with a category index."""

    __slots__ = ("items", "cats", "times", "cat_keys", "cat_offsets", "positions")

    def __init__(self, items, cats, times, cat_keys=None, cat_offsets=None, positions=None):
        self.items = _ro(items)
        self.cats = _ro(cats)
        self.times = _ro(times)
        if cat_keys is None:
            # stable sort keeps chronological order inside each category
            positions = np.argsort(self.cats, kind="stable")
            keys, counts = np.unique(self.cats[positions], return_counts=True)
            cat_keys = keys
            cat_offsets = np.concatenate([[0], np.cumsum(counts)])
        self.cat_keys = _ro(cat_keys)
        self.cat_offsets = _ro(cat_offsets)
        self.positions = _ro(positions)

    def __len__(self):
        return len(self.items)

    @property
    def n_categories(self) -> int:
        return len(self.cat_keys)

    def cutoff(self, before: int | None) -> int:
        """Number of behaviors strictly earlier than ``before``."""
        if before is None:
            return len(self.times)
        return int(np.searchsorted(self.times, before, side="left"))

    def category_positions(self, category_id: int) -> np.ndarray:
        i = int(np.searchsorted(self.cat_keys, category_id))
        if i == len(self.cat_keys) or self.cat_keys[i] != category_id:
            return self.positions[:0]
        return self.positions[self.cat_offsets[i]:self.cat_offsets[i + 1]]

    def query(self, category_id: int, k: int, before: int | None = None, exclude_recent: int = 0):
        """Positions of the last ``k`` same-category behaviors.

        Only behaviors earlier than ``before`` count, and the most recent
        ``exclude_recent`` of those (the short-term window) are skipped.
        """
        limit = self.cutoff(before) - exclude_recent
        pos = self.category_positions(category_id)
        if limit <= 0 or len(pos) == 0:
            return pos[:0]
        end = int(np.searchsorted(pos, limit, side="left"))
        return pos[max(0, end - k):end]

    def sequence(self, positions: np.ndarray) -> BehaviorSequence:
        return BehaviorSequence(self.items[positions], self.cats[positions], self.times[positions])

    def contains(self, item_id: int, timestamp: int) -> bool:
        lo = np.searchsorted(self.times, timestamp, side="left")
        hi = np.searchsorted(self.times, timestamp, side="right")
        return bool(np.any(self.items[lo:hi] == item_id))


@dataclass(frozen=True)
class StoreStats:
    users: int
    max_seq_len: int
    mean_seq_len: float
    categories_per_user_p99: int
    behaviors: int = 0


class UserBehaviorTree:
    """Immutable Key-Key-Value snapshot. Construct with :func:`ubt_build`."""

    def __init__(self, nodes: dict[int, UserNode], build_ts: int = 0):
        self._nodes = nodes
        self.build_ts = int(build_ts)

    # mapping-style access
    def __contains__(self, user_id) -> bool:
        return int(user_id) in self._nodes

    def __len__(self) -> int:
        return len(self._nodes)

    def users(self) -> list[int]:
        return sorted(self._nodes)

    def node(self, user_id: int) -> UserNode | None:
        return self._nodes.get(int(user_id))

    def categories(self, user_id: int) -> list[int]:
        node = self.node(user_id)
        return [] if node is None else node.cat_keys.tolist()

    def category_list(self, user_id: int, category_id: int) -> list[Behavior]:
        """The (user, category) list, most recent first."""
        node = self.node(user_id)
        if node is None:
            return []
        pos = node.category_positions(category_id)[::-1]
        return [Behavior(int(node.items[p]), int(node.cats[p]), int(node.times[p])) for p in pos]

    def user_count(self, user_id: int) -> int:
        node = self.node(user_id)
        return 0 if node is None else len(node)

    def history(self, user_id: int, before: int | None = None) -> BehaviorSequence:
        node = self.node(user_id)
        if node is None:
            return BehaviorSequence.empty()
        n = node.cutoff(before)
        return BehaviorSequence(node.items[:n], node.cats[:n], node.times[:n])

    def recent(self, user_id: int, n: int, before: int | None = None) -> BehaviorSequence:
        """The ``n`` most recent behaviors across all categories, chronological."""
        node = self.node(user_id)
        if node is None or n <= 0:
            return BehaviorSequence.empty()
        end = node.cutoff(before)
        start = max(0, end - n)
        return BehaviorSequence(node.items[start:end], node.cats[start:end], node.times[start:end])

    def stats(self) -> StoreStats:
        if not self._nodes:
            return StoreStats(0, 0, 0.0, 0, 0)
        lens = np.array([len(n) for n in self._nodes.values()])
        ncats = np.array([n.n_categories for n in self._nodes.values()])
        p99 = int(math.ceil(np.percentile(ncats, 99, method="higher")))
        return StoreStats(
            users=len(self._nodes),
            max_seq_len=int(lens.max()),
            mean_seq_len=float(lens.mean()),
            categories_per_user_p99=p99,
            behaviors=int(lens.sum()),
        )

    def validate(self) -> None:
        """Check structural invariants; raises :class:`StoreFormatError`."""
        for uid, node in self._nodes.items():
            n = len(node)
            if not (len(node.cats) == n == len(node.times) == len(node.positions)):
                raise StoreFormatError(f"user {uid}: column lengths differ")
            if n and np.any(np.diff(node.times) < 0):
                raise StoreFormatError(f"user {uid}: history not chronological")
            off = node.cat_offsets
            if len(off) != len(node.cat_keys) + 1 or off[0] != 0 or off[-1] != n:
                raise StoreFormatError(f"user {uid}: bad category offsets")
            if len(node.cat_keys) > 1 and np.any(np.diff(node.cat_keys) <= 0):
                raise StoreFormatError(f"user {uid}: category keys unsorted")
            if n and not np.array_equal(np.sort(node.positions), np.arange(n)):
                raise StoreFormatError(f"user {uid}: positions are not a permutation")
            for i, c in enumerate(node.cat_keys):
                pos = node.positions[off[i]:off[i + 1]]
                if np.any(node.cats[pos] != c) or np.any(np.diff(pos) <= 0):
                    raise StoreFormatError(f"user {uid}: category {c} list corrupt")


def _build_nodes(users, items, cats, times) -> dict[int, UserNode]:
    users = np.asarray(users, dtype=np.int64)
    items = np.asarray(items, dtype=np.int64)
    cats = np.asarray(cats, dtype=np.int64)
    times = np.asarray(times, dtype=np.int64)
    n = len(users)
    if n == 0:
        return {}
    seq = np.arange(n)
    # drop replays of (user, item, timestamp); first occurrence wins
    o = np.lexsort((seq, times, items, users))
    dup = np.zeros(n, dtype=bool)
    dup[1:] = (users[o][1:] == users[o][:-1]) & (items[o][1:] == items[o][:-1]) & (times[o][1:] == times[o][:-1])
    keep = np.sort(o[~dup])
    users, items, cats, times, seq = users[keep], items[keep], cats[keep], times[keep], seq[keep]
    # equal timestamps keep insertion order
    o = np.lexsort((seq, times, users))
    users, items, cats, times = users[o], items[o], cats[o], times[o]
    bounds = np.flatnonzero(np.diff(users)) + 1
    starts = np.concatenate([[0], bounds])
    ends = np.concatenate([bounds, [len(users)]])
    return {int(users[s]): UserNode(items[s:e], cats[s:e], times[s:e]) for s, e in zip(starts, ends)}


def ubt_from_arrays(users, items, cats, times, build_ts: int | None = None) -> UserBehaviorTree:
    """Bulk build from parallel arrays (the fast path used by the CLI)."""
    users = np.asarray(users, dtype=np.int64)
    items = np.asarray(items, dtype=np.int64)
    cats = np.asarray(cats, dtype=np.int64)
    times = np.asarray(times, dtype=np.int64)
    if len(users) and min(users.min(), items.min(), cats.min(), times.min()) < 0:
        bad = int(np.flatnonzero((users < 0) | (items < 0) | (cats < 0) | (times < 0))[0])
        raise IngestError("negative field", line=bad + 1)
    if build_ts is None:
        build_ts = int(times.max()) if len(times) else 0
    return UserBehaviorTree(_build_nodes(users, items, cats, times), build_ts)


def ubt_build(log: Iterable, build_ts: int | None = None) -> UserBehaviorTree:
    """Build a tree from ``(user_id, Behavior)`` records.

    Records may also be plain 4-tuples ``(user, item, category, timestamp)``.
    A malformed record raises :class:`IngestError` carrying its 1-based index.
    """
    us, its, cs, ts = [], [], [], []
    for lineno, rec in enumerate(log, start=1):
        try:
            if len(rec) == 2:
                user, b = rec
                item, cat, t = b.item_id, b.category_id, b.timestamp
            else:
                user, item, cat, t = rec
            user, item, cat, t = int(user), int(item), int(cat), int(t)
        except (TypeError, ValueError, AttributeError) as exc:
            raise IngestError(f"malformed record {rec!r}: {exc}", line=lineno) from None
        if min(user, item, cat, t) < 0:
            raise IngestError(f"negative field in {rec!r}", line=lineno)
        us.append(user)
        its.append(item)
        cs.append(cat)
        ts.append(t)
    return ubt_from_arrays(us, its, cs, ts, build_ts)


def ubt_query(tree: UserBehaviorTree, user_id: int, category_id: int, k: int,
              before: int | None = None, exclude_recent: int = 0) -> BehaviorSequence:
    """Up to ``k`` most recent behaviors of ``user_id`` in ``category_id``, ascending in time.

    Unknown users or categories yield an empty sequence.
    """
    if k <= 0:
        raise ValueError("k must be positive")
    node = tree.node(user_id)
    if node is None:
        return BehaviorSequence.empty()
    return node.sequence(node.query(category_id, k, before, exclude_recent))


def ubt_insert(tree: UserBehaviorTree, user_id: int, b: Behavior) -> UserBehaviorTree:
    """New snapshot with ``b`` added; duplicates of (item, timestamp) are ignored."""
    user_id = int(user_id)
    node = tree.node(user_id)
    nodes = dict(tree._nodes)
    if node is None:
        nodes[user_id] = UserNode([b.item_id], [b.category_id], [b.timestamp])
    else:
        if node.contains(b.item_id, b.timestamp):
            return UserBehaviorTree(nodes, tree.build_ts)
        at = int(np.searchsorted(node.times, b.timestamp, side="right"))
        nodes[user_id] = UserNode(
            np.insert(node.items, at, b.item_id),
            np.insert(node.cats, at, b.category_id),
            np.insert(node.times, at, b.timestamp),
        )
    return UserBehaviorTree(nodes, max(tree.build_ts, b.timestamp))


# --------------------------------------------------------------------------
# persistence
# --------------------------------------------------------------------------

def _serialize(tree: UserBehaviorTree) -> bytes:
    parts = [_HEADER.pack(MAGIC, FORMAT_VERSION, 0, tree.build_ts, len(tree))]
    for uid in tree.users():
        node = tree.node(uid)
        parts.append(_USER_HEADER.pack(uid, len(node), node.n_categories))
        for arr in (node.items, node.cats, node.times, node.cat_keys, node.cat_offsets, node.positions):
            parts.append(arr.astype("<i8").tobytes())
    body = b"".join(parts)
    return body + _CHECKSUM.pack(_checksum(body))


def ubt_save(tree: UserBehaviorTree, path) -> None:
    data = _serialize(tree)
    try:
        with open(path, "wb") as fh:
            fh.write(data)
    except OSError as exc:
        raise StoreIOError(f"cannot write index {path}: {exc}") from exc


def ubt_load(path) -> UserBehaviorTree:
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise StoreIOError(f"cannot read index {path}: {exc}") from exc
    return _deserialize(data, str(path))


def _deserialize(data: bytes, where: str = "<bytes>") -> UserBehaviorTree:
    if len(data) < len(MAGIC) or data[: len(MAGIC)] != MAGIC:
        raise StoreFormatError(f"{where}: not a behavior-tree file")
    if len(data) < _HEADER.size + _CHECKSUM.size:
        raise ChecksumError(f"{where}: truncated file")
    _, version, _, build_ts, n_users = _HEADER.unpack_from(data, 0)
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"{where}: format version {version}, expected {FORMAT_VERSION}")
    body = memoryview(data)[: -_CHECKSUM.size]
    (stored,) = _CHECKSUM.unpack_from(data, len(data) - _CHECKSUM.size)
    if _checksum(body) != stored:
        raise ChecksumError(f"{where}: checksum mismatch")
    nodes = {}
    off = _HEADER.size
    try:
        for _ in range(n_users):
            uid, n, nc = _USER_HEADER.unpack_from(body, off)
            off += _USER_HEADER.size
            arrays = []
            for count in (n, n, n, nc, nc + 1, n):
                arrays.append(np.frombuffer(body, dtype="<i8", count=count, offset=off).astype(np.int64))
                off += 8 * count
            nodes[uid] = UserNode(*arrays)
    except (struct.error, ValueError) as exc:
        raise ChecksumError(f"{where}: inconsistent block layout ({exc})") from exc
    if off != len(body):
        raise ChecksumError(f"{where}: trailing bytes after last user block")
    return UserBehaviorTree(nodes, build_ts)


def iter_records(tree: UserBehaviorTree) -> Iterator[tuple[int, Behavior]]:
    for uid in tree.users():
        node = tree.node(uid)
        for i in range(len(node)):
            yield uid, Behavior(int(node.items[i]), int(node.cats[i]), int(node.times[i]))
