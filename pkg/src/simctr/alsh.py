"""Asymmetric LSH for maximum inner product search.

Data vectors are scaled so the largest norm is ``U`` and extended with
``||x||^2, ||x||^4, ..., ||x||^(2^m)``; queries are normalized and extended
with ``m`` halves. After that transform, ranking by Euclidean distance
approximates ranking by inner product. Each of ``L`` tables hashes the
transformed vectors with ``bits`` sign random projections. A query probes every
bucket within Hamming radius ``probe_radius`` of its own code, weighting a hit
at distance ``h`` by ``probe_radius + 1 - h``; the ``candidate_budget`` items
with the most votes are rescored exactly.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from . import _accel
from .errors import ConfigError


@dataclass(frozen=True)
class AlshConfig:
    m: int = 3
    U: float = 0.83
    tables: int = 32
    bits: int = 12
    probe_radius: int = 2
    candidate_budget: int = 1000
    exact_threshold: int = 128
    seed: int = 0

    def __post_init__(self):
        if self.m < 1:
            raise ConfigError("m must be >= 1")
        if not 0 < self.U < 1:
            raise ConfigError("U must lie in (0, 1)")
        if self.tables < 1 or not 1 <= self.bits <= 62:
            raise ConfigError("need tables >= 1 and 1 <= bits <= 62")
        if not 0 <= self.probe_radius <= self.bits:
            raise ConfigError("probe_radius must lie in [0, bits]")
        if self.candidate_budget < 1 or self.exact_threshold < 0:
            raise ConfigError("candidate_budget must be >= 1 and exact_threshold >= 0")


def preprocess_data(x: np.ndarray, max_norm: float, U: float, m: int) -> np.ndarray:
    """P(x) = [U x / max_norm, |.|^2, |.|^4, ..., |.|^(2^m)] on the scaled vector."""
    xs = x * (U / max_norm)
    n2 = np.einsum("ij,ij->i", xs, xs)
    ext = [n2]
    for _ in range(m - 1):
        ext.append(ext[-1] ** 2)
    return np.concatenate([xs, np.stack(ext, axis=1)], axis=1)


def preprocess_query(q: np.ndarray, m: int) -> np.ndarray:
    """Q(q) = [q / |q|, 1/2, ..., 1/2]."""
    q = np.atleast_2d(q)
    norm = np.linalg.norm(q, axis=1, keepdims=True)
    qn = np.divide(q, norm, out=np.zeros_like(q), where=norm > 0)
    return np.concatenate([qn, np.full((len(q), m), 0.5)], axis=1)


def _probe_masks(bits: int, radius: int):
    masks, weights = [], []
    for h in range(radius + 1):
        for combo in itertools.combinations(range(bits), h):
            masks.append(sum(1 << b for b in combo))
            weights.append(float(radius + 1 - h))
    return np.array(masks, dtype=np.int64), np.array(weights, dtype=np.float64)


class AlshIndex:
    """Immutable MIPS index. Build with :func:`alsh_build`."""

    def __init__(self, ids, vectors, cfg: AlshConfig):
        self.cfg = cfg
        self.ids = np.asarray(ids, dtype=np.int64)
        self.vectors = np.ascontiguousarray(vectors, dtype=np.float64)
        norms = np.linalg.norm(self.vectors, axis=1)
        self.max_norm = float(norms.max())
        if not self.max_norm > 0:
            raise ConfigError("cannot index a corpus whose vectors are all zero")
        self.transformed = preprocess_data(self.vectors, self.max_norm, cfg.U, cfg.m)
        self.exact_only = len(self.ids) <= cfg.exact_threshold
        if self.exact_only:
            return
        rng = np.random.default_rng(cfg.seed)
        dim = self.transformed.shape[1]
        self.planes = rng.standard_normal((cfg.tables, cfg.bits, dim))
        codes = self._codes(self.transformed)  # (L, N)
        self.perm = np.argsort(codes, axis=1, kind="stable")
        self.sorted_codes = np.take_along_axis(codes, self.perm, axis=1)
        self.probe_masks, self.probe_weights = _probe_masks(cfg.bits, cfg.probe_radius)

    def __len__(self):
        return len(self.ids)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def _codes(self, t: np.ndarray) -> np.ndarray:
        bitvals = np.left_shift(np.int64(1), np.arange(self.cfg.bits, dtype=np.int64))
        proj = np.einsum("lbd,nd->lnb", self.planes, t) > 0
        return (proj * bitvals).sum(axis=-1).astype(np.int64)

    def candidates(self, q: np.ndarray) -> np.ndarray:
        """Row positions whose buckets collide with the query, best-voted first."""
        if self.exact_only:
            return np.arange(len(self.ids))
        qt = preprocess_query(q, self.cfg.m)
        qcodes = self._codes(qt)[:, 0]  # (L,)
        probes = np.bitwise_xor(qcodes[:, None], self.probe_masks[None, :])
        votes = _accel.alsh_votes(self.sorted_codes, self.perm, probes, self.probe_weights, len(self.ids))
        hit = np.flatnonzero(votes > 0)
        budget = self.cfg.candidate_budget
        if len(hit) > budget:
            # most votes first; lower row wins ties so results are deterministic
            order = np.lexsort((hit, -votes[hit]))
            hit = np.sort(hit[order[:budget]])
        return hit


def alsh_build(vectors, cfg: AlshConfig | None = None, ids=None) -> AlshIndex:
    """Index ``vectors``: an (N, d) array, or a list of ``(id, vector)`` pairs."""
    cfg = cfg or AlshConfig()
    if ids is None and isinstance(vectors, (list, tuple)) and vectors and isinstance(vectors[0], tuple):
        ids = [i for i, _ in vectors]
        vectors = [v for _, v in vectors]
    vectors = np.asarray(vectors, dtype=np.float64)
    if vectors.ndim != 2 or len(vectors) == 0:
        raise ConfigError("need a nonempty (N, d) corpus with uniform dimension")
    if ids is None:
        ids = np.arange(len(vectors))
    if len(ids) != len(vectors):
        raise ConfigError("ids and vectors differ in length")
    return AlshIndex(ids, vectors, cfg)


def alsh_query(index: AlshIndex, q, k: int) -> list[tuple[int, float]]:
    """Up to ``k`` (id, inner product) pairs, best first, rescored exactly."""
    q = np.asarray(q, dtype=np.float64)
    if q.shape != (index.dim,):
        raise ValueError(f"query dimension {q.shape} does not match index dimension {index.dim}")
    rows = index.candidates(q)
    if len(rows) == 0:
        return []
    scores = index.vectors[rows] @ q
    order = np.lexsort((rows, -scores))[:k]
    return [(int(index.ids[rows[i]]), float(scores[i])) for i in order]


def exact_mips(vectors: np.ndarray, q: np.ndarray, k: int) -> np.ndarray:
    """Brute-force top-k rows by inner product (reference for recall)."""
    scores = np.asarray(vectors) @ np.asarray(q)
    return np.lexsort((np.arange(len(scores)), -scores))[:k]


def recall_at_k(index: AlshIndex, queries: np.ndarray, k: int) -> float:
    """Mean fraction of the exact top-k ids that the index returns."""
    hits = []
    for q in queries:
        truth = set(index.ids[exact_mips(index.vectors, q, k)].tolist())
        got = {i for i, _ in alsh_query(index, q, k)}
        hits.append(len(truth & got) / len(truth))
    return float(np.mean(hits))
