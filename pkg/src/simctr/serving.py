"""Online scoring: hard-search against a behavior-tree snapshot, then batched ESU.

A :class:`ScoringService` holds one immutable ``(tree, model)`` pair. Request
handlers read the pair once and never lock; :meth:`ScoringService.snapshot_swap`
replaces it with a single reference assignment, so every request sees exactly
one snapshot.
"""

from __future__ import annotations

import json
import logging
import math
import socketserver
import threading
import time
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .behavior_store import UserBehaviorTree, ubt_from_arrays
from .domain import CandidateItem, bucketize_delta, time_deltas_days
from .errors import ConfigError, ProtocolError, SimError, SwapRejected
from .esu import EsuBatch, esu_batch_forward
from .model import SimModel

log = logging.getLogger(__name__)

MAX_CANDIDATES = 500


@dataclass(frozen=True)
class ScoreRequest:
    user_id: int
    candidates: tuple[CandidateItem, ...]
    request_time: int

    def __post_init__(self):
        if not 1 <= len(self.candidates) <= MAX_CANDIDATES:
            raise ProtocolError(f"need 1..{MAX_CANDIDATES} candidates, got {len(self.candidates)}")
        if any(c.request_time != self.request_time for c in self.candidates):
            raise ProtocolError("candidates carry different request times")

    @classmethod
    def from_dict(cls, d) -> "ScoreRequest":
        if not isinstance(d, dict):
            raise ProtocolError("request must be an object")
        missing = {"user_id", "request_time", "candidates"} - set(d)
        if missing:
            raise ProtocolError(f"request lacks {sorted(missing)}")
        try:
            user, t = _nonneg_int(d["user_id"]), _nonneg_int(d["request_time"])
            if not isinstance(d["candidates"], list):
                raise ProtocolError("candidates must be a list")
            cands = tuple(
                CandidateItem(_nonneg_int(c["item_id"]), _nonneg_int(c["category_id"]), t)
                for c in d["candidates"]
            )
        except (KeyError, TypeError) as exc:
            raise ProtocolError(f"malformed candidate: {exc}") from None
        return cls(user, cands, t)


def _nonneg_int(v) -> int:
    if isinstance(v, bool) or not isinstance(v, int) or v < 0:
        raise ProtocolError(f"expected a non-negative integer, got {v!r}")
    return v


@dataclass
class ScoreResponse:
    scores: list[float]
    sbs_lengths: list[int]
    latency_us: int
    n_lookups: int = 0

    def to_dict(self, with_latency: bool = True) -> dict:
        d = {"scores": self.scores, "sbs_lengths": self.sbs_lengths}
        if with_latency:
            d["latency_us"] = self.latency_us
        return d


@dataclass
class BenchResult:
    workload: str
    seq_len: int
    target_qps: float
    achieved_qps: float
    p50_ms: float
    p95_ms: float
    p99_ms: float
    n_requests: int
    saturated: bool = False
    length_profile: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {k: (round(v, 6) if isinstance(v, float) else v) for k, v in self.__dict__.items()}


# --------------------------------------------------------------------------
# scoring
# --------------------------------------------------------------------------

def _check_servable(model: SimModel) -> None:
    if model.config.search != "hard":
        raise ConfigError(f"serving needs a hard-search model, got search={model.config.search!r}")


def score(req: ScoreRequest, tree: UserBehaviorTree, model: SimModel) -> ScoreResponse:
    """Score every candidate with one tree lookup per distinct category."""
    t0 = time.perf_counter_ns()
    _check_servable(model)
    cfg = model.config
    t = req.request_time
    short = tree.recent(req.user_id, cfg.short_len, before=t)
    node = tree.node(req.user_id)

    cand_cats = np.fromiter((c.category_id for c in req.candidates), np.int64, len(req.candidates))
    cand_items = np.fromiter((c.item_id for c in req.candidates), np.int64, len(req.candidates))
    uniq, slot = np.unique(cand_cats, return_inverse=True)

    # one padded row per distinct category, shared by its candidates
    rows = []
    for c in uniq.tolist():
        if node is None:
            rows.append(np.empty(0, np.int64))
        else:
            rows.append(node.query(c, cfg.k, before=t, exclude_recent=cfg.short_len))
    width = max(1, max(len(p) for p in rows))
    U = len(uniq)
    items = np.zeros((U, width), np.int64)
    cats = np.zeros((U, width), np.int64)
    bks = np.zeros((U, width), np.int64)
    mask = np.zeros((U, width), bool)
    for j, pos in enumerate(rows):
        n = len(pos)
        if n:
            items[j, :n] = node.items[pos]
            cats[j, :n] = node.cats[pos]
            bks[j, :n] = bucketize_delta(time_deltas_days(node.times[pos], t), cfg.buckets)
            mask[j, :n] = True

    B = len(cand_items)
    swidth = max(1, len(short))
    s_items = np.zeros((B, swidth), np.int64)
    s_cats = np.zeros((B, swidth), np.int64)
    s_mask = np.zeros((B, swidth), bool)
    s_items[:, : len(short)] = short.items
    s_cats[:, : len(short)] = short.categories
    s_mask[:, : len(short)] = True

    batch = EsuBatch(items[slot], cats[slot], bks[slot], mask[slot], s_items, s_cats, s_mask, cand_items, cand_cats)
    p, _ = esu_batch_forward(model, batch)
    lengths = mask.sum(axis=1)[slot]
    latency = (time.perf_counter_ns() - t0) // 1000
    return ScoreResponse([float(x) for x in p], [int(n) for n in lengths], int(latency), U)


class ScoringService:
    """Lock-free readers over an atomically replaced ``(tree, model)`` snapshot."""

    def __init__(self, tree: UserBehaviorTree, model: SimModel):
        _check_servable(model)
        self._snapshot = (tree, model)
        self._swap_lock = threading.Lock()
        self.generation = 0

    @property
    def snapshot(self) -> tuple[UserBehaviorTree, SimModel]:
        return self._snapshot

    def score(self, req: ScoreRequest) -> ScoreResponse:
        tree, model = self._snapshot  # one read; the pair cannot tear
        return score(req, tree, model)

    def snapshot_swap(self, new_tree: UserBehaviorTree, new_model: SimModel | None = None) -> int:
        """Validate and install a new snapshot; returns the new generation.

        On validation failure raises :class:`SwapRejected` and keeps the old one.
        """
        with self._swap_lock:
            _, old_model = self._snapshot
            model = new_model or old_model
            try:
                if not isinstance(new_tree, UserBehaviorTree):
                    raise SimError(f"not a behavior tree: {type(new_tree).__name__}")
                new_tree.validate()
                _check_servable(model)
            except SimError as exc:
                log.warning("event=swap_rejected reason=%r", str(exc))
                raise SwapRejected(str(exc)) from exc
            self._snapshot = (new_tree, model)
            self.generation += 1
            log.info("event=swap generation=%d users=%d", self.generation, len(new_tree))
            return self.generation

    def handle_line(self, line: str, with_latency: bool = True) -> str:
        """One JSON request line in, one JSON response line out (errors included)."""
        try:
            try:
                payload = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ProtocolError(f"invalid JSON: {exc.msg}") from None
            try:
                req = ScoreRequest.from_dict(payload)
            except ValueError as exc:  # domain validation, e.g. negative ids
                raise ProtocolError(str(exc)) from None
            resp = self.score(req).to_dict(with_latency)
        except ProtocolError as exc:
            resp = {"error": str(exc)}
        return json.dumps(resp, sort_keys=True)


def snapshot_swap(service: ScoringService, new_tree: UserBehaviorTree, new_model: SimModel | None = None) -> int:
    return service.snapshot_swap(new_tree, new_model)


def serve_batch(service: ScoringService, lines: Iterable[str], with_latency: bool = True) -> Iterable[str]:
    """Batch-file mode: the socket protocol applied to each nonblank line."""
    for line in lines:
        if line.strip():
            yield service.handle_line(line, with_latency)


class _Handler(socketserver.StreamRequestHandler):
    def handle(self):
        for raw in self.rfile:
            line = raw.decode("utf-8", errors="replace")
            if not line.strip():
                continue
            self.wfile.write((self.server.service.handle_line(line) + "\n").encode())
            self.wfile.flush()


class ScoringServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, service: ScoringService, host: str = "127.0.0.1", port: int = 0):
        self.service = service
        super().__init__((host, port), _Handler)


# --------------------------------------------------------------------------
# benchmark
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class BenchProfile:
    seq_lengths: tuple[int, ...] = (1000, 50000)
    users_per_length: int = 8
    throughputs: tuple[float, ...] = (0.0, 50.0, 200.0)
    requests: int = 200
    candidates: int = 100
    categories_per_request: int = 5
    n_categories: int = 5
    seed: int = 0

    def __post_init__(self):
        if not self.seq_lengths or min(self.seq_lengths) < 1:
            raise ConfigError("seq_lengths must be positive")
        if self.users_per_length < 1 or self.requests < 1:
            raise ConfigError("users_per_length and requests must be >= 1")
        if not 1 <= self.candidates <= MAX_CANDIDATES:
            raise ConfigError(f"candidates must lie in [1, {MAX_CANDIDATES}]")
        if not 1 <= self.categories_per_request <= min(self.candidates, self.n_categories):
            raise ConfigError("categories_per_request must lie in [1, min(candidates, n_categories)]")
        if any(x < 0 for x in self.throughputs):
            raise ConfigError("throughputs must be >= 0")

    @classmethod
    def from_dict(cls, d: dict) -> "BenchProfile":
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown bench profile keys: {sorted(extra)}")
        d = dict(d)
        for key in ("seq_lengths", "throughputs"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


def bench_workload(profile: BenchProfile, model: SimModel, base: UserBehaviorTree | None = None):
    """Snapshot plus per-length user ids: synthetic users of exactly each length.

    Users are appended after the largest id in ``base`` so real users are untouched.
    Item and category ids stay inside the model vocabulary.
    """
    cfg = model.config
    rng = np.random.default_rng(profile.seed)
    n_cat = min(profile.n_categories, cfg.n_categories)
    first = (max(base.users()) + 1) if base is not None and len(base) else 0
    cols = [[], [], [], []]
    groups: dict[int, list[int]] = {}
    uid = first
    now = 1_700_000_000
    for L in profile.seq_lengths:
        groups[L] = []
        for _ in range(profile.users_per_length):
            cats = rng.integers(0, n_cat, L)
            cols[0].append(np.full(L, uid))
            cols[1].append(rng.integers(0, cfg.n_items, L))
            cols[2].append(cats)
            cols[3].append(np.sort(now - rng.integers(1, 365 * 86400, L)))
            groups[L].append(uid)
            uid += 1
    extra = [np.concatenate(c) for c in cols]
    if base is not None and len(base):
        from .behavior_store import iter_records

        recs = list(iter_records(base))
        if recs:
            bu = np.array([u for u, _ in recs])
            bi = np.array([b.item_id for _, b in recs])
            bc = np.array([b.category_id for _, b in recs])
            bt = np.array([b.timestamp for _, b in recs])
            extra = [np.concatenate([a, b]) for a, b in zip((bu, bi, bc, bt), extra)]
    return ubt_from_arrays(*extra, build_ts=now), groups, now


def _make_requests(profile: BenchProfile, model: SimModel, users: Sequence[int], now: int, rng):
    cfg = model.config
    n_cat = min(profile.n_categories, cfg.n_categories)
    reqs = []
    for r in range(profile.requests):
        cats = rng.choice(n_cat, profile.categories_per_request, replace=False)
        cc = cats[np.arange(profile.candidates) % len(cats)]
        ci = rng.integers(0, cfg.n_items, profile.candidates)
        user = int(users[r % len(users)])
        reqs.append(ScoreRequest(user, tuple(CandidateItem(int(i), int(c), now) for i, c in zip(ci, cc)), now))
    return reqs


def _percentile(x, q) -> float:
    return float(np.percentile(np.asarray(x, dtype=np.float64), q, method="higher"))


def bench(service: ScoringService, profile: BenchProfile, groups: dict[int, list[int]], now: int,
          clock=time.perf_counter) -> list[BenchResult]:
    """Paced closed-loop load, one result per (sequence length, throughput level).

    Workloads of different lengths are interleaved request by request so
    machine noise hits them equally. Level 0 issues requests back to back.
    A level whose achieved rate falls below 90% of the target is marked
    saturated rather than failing.
    """
    rng = np.random.default_rng(profile.seed + 1)
    lengths = list(groups)
    reqs = {L: _make_requests(profile, service.snapshot[1], groups[L], now, rng) for L in lengths}
    for L in lengths:  # warm caches and JIT paths outside the measured window
        for r in reqs[L][: min(5, len(reqs[L]))]:
            service.score(r)
    out = []
    for qps in profile.throughputs:
        lat = {L: [] for L in lengths}
        interval = 1.0 / qps if qps > 0 else 0.0
        n = profile.requests if qps > 0 else 1
        start = clock()
        sent = 0
        for i in range(n):
            for L in lengths:
                due = start + sent * interval
                while interval and clock() < due:
                    pass
                t0 = clock()
                service.score(reqs[L][i])
                lat[L].append((clock() - t0) * 1e3)
                sent += 1
        elapsed = clock() - start
        achieved = sent / elapsed if elapsed > 0 else math.inf
        for L in lengths:
            x = lat[L]
            out.append(BenchResult(
                workload=f"T={L}", seq_len=L, target_qps=float(qps), achieved_qps=float(achieved),
                p50_ms=_percentile(x, 50), p95_ms=_percentile(x, 95), p99_ms=_percentile(x, 99),
                n_requests=len(x), saturated=bool(qps > 0 and achieved < 0.9 * qps),
                length_profile={"seq_len": L, "users": len(groups[L]), "k": service.snapshot[1].config.k},
            ))
            r = out[-1]
            log.info("event=bench workload=%s target_qps=%g achieved_qps=%.1f p50_ms=%.3f p95_ms=%.3f p99_ms=%.3f",
                     r.workload, qps, achieved, r.p50_ms, r.p95_ms, r.p99_ms)
    return out


def decoupling_ratio(results: Sequence[BenchResult], short_len: int, long_len: int) -> float:
    """Worst p99(long) / p99(short) over throughput levels present for both."""
    by = {(r.seq_len, r.target_qps): r for r in results}
    ratios = [by[(long_len, q)].p99_ms / by[(short_len, q)].p99_ms
              for (L, q) in by if L == short_len and (long_len, q) in by]
    if not ratios:
        raise ConfigError("results lack a common throughput level for both lengths")
    return max(ratios)
