"""Hot inner loops, compiled with numba when available.

Every kernel has a pure-numpy twin with identical results. The numba path is
used unless ``SIMCTR_DISABLE_NUMBA`` is set to a truthy value (or numba is not
importable). Both sets stay importable as ``NUMBA_KERNELS`` / ``NUMPY_KERNELS``
so tests and the benchmark can compare them directly.
"""

from __future__ import annotations

import os

import numpy as np

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

_DISABLED = os.environ.get("SIMCTR_DISABLE_NUMBA", "").strip().lower() in ("1", "true", "yes", "on")
USE_NUMBA = HAVE_NUMBA and not _DISABLED


# --------------------------------------------------------------------------
# numpy implementations
# --------------------------------------------------------------------------

def np_last_k_matching(cats, target, k):
    """Indices (ascending) of the last ``k`` entries of ``cats`` equal to ``target``."""
    idx = np.flatnonzero(cats == target)
    if k < len(idx):
        idx = idx[len(idx) - k:]
    return idx.astype(np.int64)


def np_topk_recent(scores, k):
    """Indices of the ``k`` highest scores, ties going to the larger index.

    Output is sorted ascending so callers keep chronological order.
    """
    n = len(scores)
    if k >= n:
        return np.arange(n, dtype=np.int64)
    order = np.lexsort((-np.arange(n), -scores))
    return np.sort(order[:k]).astype(np.int64)


def np_scatter_add_rows(out, idx, vals):
    np.add.at(out, idx, vals)


def np_segment_match_count(cats, starts, ends, targets):
    """For each segment ``cats[starts[i]:ends[i]]`` count entries equal to ``targets[i]``."""
    counts = np.zeros(len(starts), dtype=np.int64)
    if len(starts) == 0:
        return counts
    lens = ends - starts
    seg = np.repeat(np.arange(len(starts)), lens)
    pos = np.arange(lens.sum()) - np.repeat(np.cumsum(lens) - lens, lens) + np.repeat(starts, lens)
    hit = cats[pos] == targets[seg]
    np.add.at(counts, seg[hit], 1)
    return counts


def np_alsh_votes(sorted_codes, perm, probe_codes, probe_weights, n_items):
    """Weighted collision votes for every indexed item.

    ``sorted_codes[l]`` holds table ``l``'s item codes in ascending order and
    ``perm[l]`` the item ids in that order. ``probe_codes[l, p]`` is the p-th
    bucket probed in table ``l`` with weight ``probe_weights[p]``.
    """
    votes = np.zeros(n_items, dtype=np.float64)
    n_tables = sorted_codes.shape[0]
    for t in range(n_tables):
        lo = np.searchsorted(sorted_codes[t], probe_codes[t], side="left")
        hi = np.searchsorted(sorted_codes[t], probe_codes[t], side="right")
        lens = hi - lo
        total = int(lens.sum())
        if total == 0:
            continue
        offs = np.cumsum(lens) - lens
        pos = np.arange(total) - np.repeat(offs, lens) + np.repeat(lo, lens)
        w = np.repeat(probe_weights, lens)
        votes += np.bincount(perm[t][pos], weights=w, minlength=n_items)
    return votes


# --------------------------------------------------------------------------
# numba implementations
# --------------------------------------------------------------------------

if HAVE_NUMBA:
    _jit = numba.njit(cache=True, nogil=True)

    @_jit
    def nb_last_k_matching(cats, target, k):
        buf = np.empty(min(k, len(cats)), dtype=np.int64)
        n = 0
        i = len(cats) - 1
        while i >= 0 and n < k:
            if cats[i] == target:
                buf[n] = i
                n += 1
            i -= 1
        return buf[:n][::-1].copy()

    @_jit
    def nb_topk_recent(scores, k):
        n = len(scores)
        if k >= n:
            return np.arange(n)
        thr = np.partition(scores, n - k)[n - k]  # k-th largest
        need = k
        for i in range(n):
            if scores[i] > thr:
                need -= 1
        out = np.empty(k, dtype=np.int64)
        j = k - 1
        # walk backwards so the most recent ties fill the remaining slots
        for i in range(n - 1, -1, -1):
            s = scores[i]
            if s > thr:
                out[j] = i
                j -= 1
            elif s == thr and need > 0:
                out[j] = i
                j -= 1
                need -= 1
        return out

    @_jit
    def nb_scatter_add_rows(out, idx, vals):
        d = out.shape[1]
        for i in range(len(idx)):
            r = idx[i]
            for j in range(d):
                out[r, j] += vals[i, j]

    @_jit
    def nb_segment_match_count(cats, starts, ends, targets):
        counts = np.zeros(len(starts), dtype=np.int64)
        for i in range(len(starts)):
            c = 0
            t = targets[i]
            for j in range(starts[i], ends[i]):
                if cats[j] == t:
                    c += 1
            counts[i] = c
        return counts

    @_jit
    def nb_alsh_votes(sorted_codes, perm, probe_codes, probe_weights, n_items):
        votes = np.zeros(n_items, dtype=np.float64)
        for t in range(sorted_codes.shape[0]):
            codes = sorted_codes[t]
            for p in range(probe_codes.shape[1]):
                key = probe_codes[t, p]
                lo = np.searchsorted(codes, key, side="left")
                hi = np.searchsorted(codes, key, side="right")
                w = probe_weights[p]
                for j in range(lo, hi):
                    votes[perm[t, j]] += w
        return votes


NUMPY_KERNELS = {
    "last_k_matching": np_last_k_matching,
    "topk_recent": np_topk_recent,
    "scatter_add_rows": np_scatter_add_rows,
    "segment_match_count": np_segment_match_count,
    "alsh_votes": np_alsh_votes,
}

if HAVE_NUMBA:
    NUMBA_KERNELS = {
        "last_k_matching": nb_last_k_matching,
        "topk_recent": nb_topk_recent,
        "scatter_add_rows": nb_scatter_add_rows,
        "segment_match_count": nb_segment_match_count,
        "alsh_votes": nb_alsh_votes,
    }
else:  # pragma: no cover
    NUMBA_KERNELS = dict(NUMPY_KERNELS)

_ACTIVE = NUMBA_KERNELS if USE_NUMBA else NUMPY_KERNELS

last_k_matching = _ACTIVE["last_k_matching"]
topk_recent = _ACTIVE["topk_recent"]
scatter_add_rows = _ACTIVE["scatter_add_rows"]
segment_match_count = _ACTIVE["segment_match_count"]
alsh_votes = _ACTIVE["alsh_votes"]


def backend() -> str:
    return "numba" if USE_NUMBA else "numpy"
