"""Offline evaluation: AUC, days-till-last-same-category, model comparison."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence, Union

import numpy as np

from .domain import SECONDS_PER_DAY, TrainingSample
from .errors import UndefinedMetricError
from .model import SimModel


def auc(scores, labels) -> float:
    """Probability that a random positive outranks a random negative (ties count 1/2)."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise ValueError("scores and labels differ in length")
    pos = y == 1
    n_pos = int(pos.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs both positive and negative labels")
    order = np.argsort(s, kind="mergesort")
    sorted_s = s[order]
    _, first, counts = np.unique(sorted_s, return_index=True, return_counts=True)
    avg_rank = first + (counts + 1) / 2.0  # 1-based mid-ranks of each tie group
    ranks = np.empty(len(s))
    ranks[order] = np.repeat(avg_rank, counts)
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def d_category(click: TrainingSample) -> int:
    """Whole days since the user's last earlier behavior in the click's category; -1 if none."""
    if click.label != 1:
        raise ValueError("d_category is defined for clicked samples only")
    cat = click.candidate.category_id
    for seq in (click.short_seq, click.long_seq):
        hit = np.flatnonzero(seq.categories == cat)
        if len(hit):
            ts = int(seq.timestamps[hit[-1]])
            return (click.candidate.request_time - ts) // SECONDS_PER_DAY
    return -1


def _bin_label(d: int, short_w: int, long_w: int, boundary: int) -> tuple[int, str]:
    if d < 0:
        return -1, "-1"
    if d <= boundary:
        lo = (d // short_w) * short_w
        hi = min(lo + short_w, boundary + 1)
        return lo, f"[{lo},{hi})"
    j = (d - boundary - 1) // long_w
    lo = boundary + j * long_w
    return lo + 1, f"({lo},{lo + long_w}]"


def d_category_distribution(clicks, short_bucket_days: int = 2, long_bucket_days: int = 20,
                            boundary: int = 14) -> dict[str, int]:
    """Histogram of d_category: -1 alone, 2-day bins up to ``boundary``, 20-day bins after.

    ``clicks`` may hold clicked samples or precomputed d_category values.
    Keys are ordered by bin start.
    """
    values = [d_category(c) if isinstance(c, TrainingSample) else int(c) for c in clicks]
    bins: dict[tuple[int, str], int] = {}
    for d in values:
        key = _bin_label(d, short_bucket_days, long_bucket_days, boundary)
        bins[key] = bins.get(key, 0) + 1
    return {label: n for (_, label), n in sorted(bins.items())}


@dataclass
class EvalReport:
    auc: float
    n_samples: int
    mean_d_category: float
    p_d_gt_neg1: float
    histogram: dict = field(default_factory=dict)
    n_top_clicks: int = 0

    def to_dict(self) -> dict:
        return {
            "auc": _r(self.auc),
            "n_samples": self.n_samples,
            "n_top_clicks": self.n_top_clicks,
            "mean_d_category": _r(self.mean_d_category),
            "p_d_gt_neg1": _r(self.p_d_gt_neg1),
            "histogram": dict(self.histogram),
        }


def _r(x: float):
    return None if x is None or (isinstance(x, float) and math.isnan(x)) else round(float(x), 10)


Scorer = Union[SimModel, Callable[[Sequence[TrainingSample]], np.ndarray]]


def score_samples(scorer: Scorer, samples: Sequence[TrainingSample]) -> np.ndarray:
    if isinstance(scorer, SimModel):
        from .trainer import predict

        return predict(scorer, samples)
    return np.asarray(scorer(samples), dtype=np.float64)


def evaluate(samples: Sequence[TrainingSample], scores, top_fraction: float = 0.1) -> EvalReport:
    """AUC over all samples plus d_category statistics over the top-scored clicks."""
    samples = list(samples)
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.array([s.label for s in samples])
    a = auc(scores, labels)
    clicked = np.flatnonzero(labels == 1)
    n_top = max(1, int(math.ceil(top_fraction * len(clicked))))
    top = clicked[np.lexsort((clicked, -scores[clicked]))[:n_top]]
    ds = np.array([d_category(samples[i]) for i in top])
    seen = ds[ds > -1]
    return EvalReport(
        auc=a,
        n_samples=len(samples),
        mean_d_category=float(seen.mean()) if len(seen) else float("nan"),
        p_d_gt_neg1=float((ds > -1).mean()),
        histogram=d_category_distribution(ds.tolist()),
        n_top_clicks=int(n_top),
    )


def compare_models(test_set: Iterable[TrainingSample], model_a: Scorer, model_b: Scorer,
                   top_fraction: float = 0.1):
    """Reports for both scorers and the deltas ``b - a`` of the scalar fields."""
    samples = list(test_set)
    ra = evaluate(samples, score_samples(model_a, samples), top_fraction)
    rb = evaluate(samples, score_samples(model_b, samples), top_fraction)
    deltas = {
        key: getattr(rb, key) - getattr(ra, key)
        for key in ("auc", "mean_d_category", "p_d_gt_neg1")
    }
    return ra, rb, deltas
