"""Synthetic corpora with a planted long-term signal, and TSV log ingestion.

On-disk layout of a dataset directory::

    behaviors.tsv   user<TAB>item<TAB>category<TAB>timestamp
    train.tsv       user<TAB>item<TAB>category<TAB>request_time<TAB>label
    test.tsv        same as train.tsv
    meta.json       vocabulary sizes, short_len and generator/ingest settings

A sample's history is every behavior of its user strictly before the request
time; the most recent ``short_len`` of those form the short-term sequence.
"""

from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _accel
from .behavior_store import UserBehaviorTree, ubt_from_arrays
from .domain import CandidateItem, TrainingSample, split_short_long
from .errors import ConfigError, IngestError
from .nn import sigmoid

log = logging.getLogger(__name__)

MAX_SEQ_LEN = 54000


@dataclass(frozen=True)
class GenConfig:
    users: int = 10000
    items: int = 50000
    categories: int = 100
    seq_len_median: float = 100.0
    seq_len_sigma: float = 1.0
    min_seq_len: int = 12
    max_seq_len: int = 2000
    affinity_categories: int = 3
    affinity_prob: float = 0.7
    dirichlet_alpha: float = 0.0
    candidate_affinity_prob: float = 0.3
    samples_per_user: int = 2
    label_noise: float = 0.1
    w: float = 1.5
    b: float = -2.0
    short_len: int = 10
    span_days: float = 180.0
    test_fraction: float = 0.2
    start_time: int = 1_600_000_000
    seed: int = 0

    def __post_init__(self):
        if self.users < 1 or self.items < 1 or self.categories < 1:
            raise ConfigError("users, items and categories must be positive")
        if self.categories > self.items:
            raise ConfigError("categories must not exceed items")
        if not 0 <= self.label_noise < 0.5:
            raise ConfigError("label_noise must lie in [0, 0.5)")
        if not 1 <= self.min_seq_len <= self.max_seq_len <= MAX_SEQ_LEN:
            raise ConfigError(f"need 1 <= min_seq_len <= max_seq_len <= {MAX_SEQ_LEN}")
        if not 1 <= self.affinity_categories <= self.categories:
            raise ConfigError("affinity_categories must lie in [1, categories]")
        for name in ("affinity_prob", "candidate_affinity_prob", "test_fraction"):
            if not 0 <= getattr(self, name) <= 1:
                raise ConfigError(f"{name} must lie in [0, 1]")
        if self.samples_per_user < 1 or self.short_len < 0 or self.span_days <= 0:
            raise ConfigError("need samples_per_user >= 1, short_len >= 0, span_days > 0")
        if self.dirichlet_alpha < 0:
            raise ConfigError("dirichlet_alpha must be >= 0")
        if self.seq_len_median <= 0 or self.seq_len_sigma < 0:
            raise ConfigError("seq_len_median must be positive and seq_len_sigma non-negative")

    @classmethod
    def from_dict(cls, d: dict) -> "GenConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown generator keys: {sorted(extra)}")
        return cls(**d)


@dataclass
class BehaviorLog:
    users: np.ndarray
    items: np.ndarray
    cats: np.ndarray
    times: np.ndarray

    def __len__(self):
        return len(self.users)

    def tree(self) -> UserBehaviorTree:
        return ubt_from_arrays(self.users, self.items, self.cats, self.times)


@dataclass
class SampleTable:
    users: np.ndarray
    items: np.ndarray
    cats: np.ndarray
    times: np.ndarray
    labels: np.ndarray

    def __len__(self):
        return len(self.users)

    def subset(self, mask) -> "SampleTable":
        return SampleTable(self.users[mask], self.items[mask], self.cats[mask], self.times[mask], self.labels[mask])


@dataclass
class Dataset:
    behaviors: BehaviorLog
    train: SampleTable
    test: SampleTable
    meta: dict = field(default_factory=dict)
    n_match: np.ndarray | None = None  # generator ground truth, aligned with concat(train, test)

    @property
    def short_len(self) -> int:
        return int(self.meta.get("short_len", 10))

    def tree(self) -> UserBehaviorTree:
        return self.behaviors.tree()

    def train_samples(self, tree: UserBehaviorTree | None = None) -> list[TrainingSample]:
        return build_samples(tree or self.tree(), self.train, self.short_len)

    def test_samples(self, tree: UserBehaviorTree | None = None) -> list[TrainingSample]:
        return build_samples(tree or self.tree(), self.test, self.short_len)


def build_samples(tree: UserBehaviorTree, table: SampleTable, short_len: int) -> list[TrainingSample]:
    """Attach to each sample row its user's history before the request, split short/long."""
    out = []
    for u, i, c, t, y in zip(table.users.tolist(), table.items.tolist(), table.cats.tolist(),
                             table.times.tolist(), table.labels.tolist()):
        long_seq, short_seq = split_short_long(tree.history(u, before=t), short_len)
        out.append(TrainingSample(u, CandidateItem(i, c, t), int(y), short_seq, long_seq))
    return out


# --------------------------------------------------------------------------
# generation
# --------------------------------------------------------------------------

def generate(cfg: GenConfig) -> Dataset:
    """Deterministic synthetic corpus.

    Each user has hidden affinity categories; behaviors fall in one of them
    with probability ``affinity_prob`` and in a uniform category otherwise.
    With ``dirichlet_alpha > 0`` each user instead draws a category mix from
    Dirichlet(alpha) and behaviors (and affinity candidates) follow that mix.
    A sample's label is 1 with probability sigmoid(w * n_match + b), flipped
    with probability ``label_noise``, where n_match counts the candidate's
    category among the user's long-term behaviors.
    """
    rng = np.random.default_rng(cfg.seed)
    C, U = cfg.categories, cfg.users

    item_cat = np.concatenate([np.arange(C), rng.integers(0, C, cfg.items - C)])
    by_cat = np.argsort(item_cat, kind="stable")
    cat_count = np.bincount(item_cat, minlength=C)
    cat_start = np.concatenate([[0], np.cumsum(cat_count)[:-1]])

    def items_in(cats):
        return by_cat[cat_start[cats] + (rng.random(len(cats)) * cat_count[cats]).astype(np.int64)]

    lens = np.rint(rng.lognormal(np.log(cfg.seq_len_median), cfg.seq_len_sigma, U)).astype(np.int64)
    lens = np.clip(lens, cfg.min_seq_len, cfg.max_seq_len)
    affinity = np.argsort(rng.random((U, C)), axis=1)[:, : cfg.affinity_categories]

    users = np.repeat(np.arange(U), lens)
    n = len(users)
    if cfg.dirichlet_alpha > 0:
        mix_cdf = np.cumsum(rng.dirichlet(np.full(C, cfg.dirichlet_alpha), U), axis=1)

        def user_cats(us):
            u01 = rng.random(len(us))
            return np.minimum((mix_cdf[us] < u01[:, None]).sum(axis=1), C - 1)

        cats = user_cats(users)
    else:
        pick = rng.integers(0, cfg.affinity_categories, n)
        cats = np.where(rng.random(n) < cfg.affinity_prob, affinity[users, pick], rng.integers(0, C, n))
    items = items_in(cats)
    span = int(cfg.span_days * 86400)
    times = cfg.start_time - 1 - rng.integers(0, span, n)
    order = np.lexsort((times, users))
    cats, items, times = cats[order], items[order], times[order]

    starts = np.concatenate([[0], np.cumsum(lens)[:-1]])
    ends = starts + lens
    request_time = cfg.start_time + rng.integers(0, 86400, U)

    S = cfg.samples_per_user
    s_users = np.repeat(np.arange(U), S)
    m = len(s_users)
    if cfg.dirichlet_alpha > 0:
        preferred = user_cats(s_users)
    else:
        preferred = affinity[s_users, rng.integers(0, cfg.affinity_categories, m)]
    s_cats = np.where(rng.random(m) < cfg.candidate_affinity_prob, preferred, rng.integers(0, C, m))
    s_items = items_in(s_cats)
    long_end = np.maximum(ends - cfg.short_len, starts)
    n_match = _accel.segment_match_count(cats, starts[s_users], long_end[s_users], s_cats)
    logit = cfg.w * n_match + cfg.b
    labels = (rng.random(m) < sigmoid(logit)).astype(np.int64)
    flip = rng.random(m) < cfg.label_noise
    labels = np.where(flip, 1 - labels, labels)

    is_test_user = rng.random(U) < cfg.test_fraction
    table = SampleTable(s_users, s_items, s_cats, request_time[s_users], labels)
    test_mask = is_test_user[s_users]
    meta = {
        "n_users": U,
        "n_items": cfg.items,
        "n_categories": C,
        "short_len": cfg.short_len,
        "n_behaviors": int(n),
        "max_seq_len": int(lens.max()),
        "positive_rate": float(labels.mean()),
        "generator": dataclasses.asdict(cfg),
    }
    return Dataset(
        BehaviorLog(users, items, cats, times),
        table.subset(~test_mask),
        table.subset(test_mask),
        meta,
        n_match=np.concatenate([n_match[~test_mask], n_match[test_mask]]),
    )


# --------------------------------------------------------------------------
# files
# --------------------------------------------------------------------------

def _write_rows(path: Path, cols) -> None:
    arr = np.column_stack([np.asarray(c, dtype=np.int64) for c in cols]) if len(cols[0]) else None
    with open(path, "w", encoding="ascii") as fh:
        if arr is not None:
            fmt = "\t".join(["%d"] * arr.shape[1])
            np.savetxt(fh, arr, fmt=fmt, delimiter="\t")


def write_dataset(ds: Dataset, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    b = ds.behaviors
    _write_rows(out / "behaviors.tsv", [b.users, b.items, b.cats, b.times])
    for name, t in (("train", ds.train), ("test", ds.test)):
        _write_rows(out / f"{name}.tsv", [t.users, t.items, t.cats, t.times, t.labels])
    with open(out / "meta.json", "w") as fh:
        json.dump(ds.meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return out


def _parse_int_rows(path: Path, ncols: int) -> np.ndarray:
    """Integer TSV with exactly ``ncols`` columns; errors carry the 1-based line number."""
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != ncols:
                raise IngestError(f"expected {ncols} tab-separated fields, got {len(parts)}", lineno, str(path))
            try:
                vals = [int(p) for p in parts]
            except ValueError:
                raise IngestError(f"non-integer field in {line!r}", lineno, str(path)) from None
            if min(vals) < 0:
                raise IngestError(f"negative field in {line!r}", lineno, str(path))
            rows.append(vals)
    return np.array(rows, dtype=np.int64).reshape(-1, ncols)


def _read_int_table(path: Path, ncols: int) -> np.ndarray:
    try:
        arr = np.loadtxt(path, dtype=np.int64, delimiter="\t", ndmin=2)
    except ValueError:
        return _parse_int_rows(path, ncols)  # slow path pinpoints the bad line
    if arr.size == 0:
        return arr.reshape(0, ncols)
    if arr.shape[1] != ncols or arr.min() < 0:
        return _parse_int_rows(path, ncols)
    return arr


def read_behaviors(path) -> BehaviorLog:
    a = _read_int_table(Path(path), 4)
    return BehaviorLog(a[:, 0].copy(), a[:, 1].copy(), a[:, 2].copy(), a[:, 3].copy())


def read_samples(path) -> SampleTable:
    a = _read_int_table(Path(path), 5)
    if len(a) and not np.isin(a[:, 4], (0, 1)).all():
        bad = int(np.flatnonzero(~np.isin(a[:, 4], (0, 1)))[0])
        raise IngestError("label must be 0 or 1", bad + 1, str(path))
    return SampleTable(*(a[:, j].copy() for j in range(5)))


def load_dataset(data_dir) -> Dataset:
    d = Path(data_dir)
    if not (d / "behaviors.tsv").exists():
        raise IngestError(f"{d} has no behaviors.tsv")
    meta = {}
    if (d / "meta.json").exists():
        meta = json.loads((d / "meta.json").read_text())
    behaviors = read_behaviors(d / "behaviors.tsv")
    empty = SampleTable(*(np.empty(0, np.int64) for _ in range(5)))
    train = read_samples(d / "train.tsv") if (d / "train.tsv").exists() else empty
    test = read_samples(d / "test.tsv") if (d / "test.tsv").exists() else empty
    if "n_items" not in meta:
        meta["n_items"] = int(max(behaviors.items.max(initial=-1), train.items.max(initial=-1),
                                  test.items.max(initial=-1)) + 1)
        meta["n_categories"] = int(max(behaviors.cats.max(initial=-1), train.cats.max(initial=-1),
                                       test.cats.max(initial=-1)) + 1)
    return Dataset(behaviors, train, test, meta)


# --------------------------------------------------------------------------
# ingestion of external logs
# --------------------------------------------------------------------------

@dataclass
class IngestResult:
    dataset: Dataset
    user_ids: dict
    item_ids: dict
    category_ids: dict
    rejected: int = 0

    @property
    def stats(self) -> dict:
        return {
            "users": len(self.user_ids),
            "items": len(self.item_ids),
            "categories": len(self.category_ids),
            "behaviors": len(self.dataset.behaviors),
            "samples": len(self.dataset.train) + len(self.dataset.test),
            "rejected": self.rejected,
        }


def ingest(path, schema: str = "clicks", short_len: int = 10, test_fraction: float = 0.0,
           seed: int = 0) -> IngestResult:
    """Read a raw interaction log and remap string ids to dense integers.

    Lines are ``user<TAB>item<TAB>category<TAB>timestamp[<TAB>label]``.
    With ``schema="clicks"`` labeled lines are impression samples and the rest
    are behaviors. With ``schema="reviews"`` every line is a behavior and each
    user's last one (with at least one earlier behavior) also becomes a
    positive sample. Exact duplicate behaviors are rejected and counted. Ids
    are numbered in order of first appearance.
    """
    if schema not in ("clicks", "reviews"):
        raise IngestError(f"unknown schema {schema!r}")
    uids: dict[str, int] = {}
    iids: dict[str, int] = {}
    cids: dict[str, int] = {}
    beh, smp = [], []
    seen = set()
    rejected = 0
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) not in (4, 5) or any(not p for p in parts):
                raise IngestError(f"expected 4 or 5 non-empty tab-separated fields, got {len(parts)}", lineno, str(path))
            try:
                ts = int(parts[3])
                label = int(parts[4]) if len(parts) == 5 else None
            except ValueError:
                raise IngestError(f"unparseable timestamp or label in {line!r}", lineno, str(path)) from None
            if ts < 0 or label not in (None, 0, 1):
                raise IngestError(f"timestamp must be >= 0 and label 0/1 in {line!r}", lineno, str(path))
            u = uids.setdefault(parts[0], len(uids))
            i = iids.setdefault(parts[1], len(iids))
            c = cids.setdefault(parts[2], len(cids))
            if label is not None and schema == "clicks":
                smp.append((u, i, c, ts, label))
                continue
            key = (u, i, ts)
            if key in seen:
                rejected += 1
                continue
            seen.add(key)
            beh.append((u, i, c, ts))
    b = np.array(beh, dtype=np.int64).reshape(-1, 4)
    if len(b):
        b = b[np.lexsort((np.arange(len(b)), b[:, 3], b[:, 0]))]  # per user, by time, stable
    if schema == "reviews" and len(b):
        last = np.flatnonzero(np.append(b[1:, 0] != b[:-1, 0], True))
        first = np.flatnonzero(np.insert(b[1:, 0] != b[:-1, 0], 0, True))
        keep = last[last > first]
        smp = [(int(r[0]), int(r[1]), int(r[2]), int(r[3]), 1) for r in b[keep]]
    s = np.array(smp, dtype=np.int64).reshape(-1, 5)
    if len(s):
        s = s[np.lexsort((np.arange(len(s)), s[:, 3], s[:, 0]))]
    table = SampleTable(*(s[:, j].copy() for j in range(5)))
    test_mask = np.zeros(len(table), dtype=bool)
    if test_fraction > 0 and len(table):
        test_users = np.random.default_rng(seed).random(len(uids)) < test_fraction
        test_mask = test_users[table.users]
    meta = {
        "n_users": len(uids),
        "n_items": max(len(iids), 1),
        "n_categories": max(len(cids), 1),
        "short_len": short_len,
        "n_behaviors": int(len(b)),
        "source": str(path),
        "schema": schema,
        "rejected": rejected,
    }
    ds = Dataset(BehaviorLog(*(b[:, j].copy() for j in range(4))), table.subset(~test_mask),
                 table.subset(test_mask), meta)
    return IngestResult(ds, uids, iids, cids, rejected)


def write_id_maps(result: IngestResult, out_dir) -> None:
    out = Path(out_dir)
    with open(out / "id_maps.json", "w") as fh:
        json.dump({"users": result.user_ids, "items": result.item_ids, "categories": result.category_ids},
                  fh, sort_keys=True)
        fh.write("\n")
