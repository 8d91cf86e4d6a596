"""General Search Unit: cut a lifelong sequence down to the top-K relevant behaviors.

Hard-search keeps the most recent behaviors sharing the candidate's category.
Soft-search ranks behaviors by the bilinear score (W_b e_i) . (W_a e_a) and is
trained through an auxiliary CTR head on the pooled representation
U_r = sum_i r_i e_i.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _accel
from .behavior_store import UserBehaviorTree, ubt_query
from .domain import BehaviorSequence, CandidateItem
from .errors import UndefinedMetricError
from .model import SimModel
from .nn import check_finite, mlp_backward, mlp_forward, two_way_probability


def hard_search(tree: UserBehaviorTree, user_id: int, cand: CandidateItem, k: int, **kw) -> BehaviorSequence:
    """Served hard-search: a category lookup in the behavior tree."""
    return ubt_query(tree, user_id, cand.category_id, k, **kw)


def hard_search_sequence(seq: BehaviorSequence, category_id: int, k: int) -> BehaviorSequence:
    """Hard-search over an in-memory sequence (training path)."""
    if k <= 0:
        raise ValueError("k must be positive")
    idx = _accel.last_k_matching(seq.categories, np.int64(category_id), int(k))
    return seq.take(idx)


def soft_relevance(e_i, e_a, Wb, Wa) -> float:
    """Scalar relevance (W_b e_i) . (W_a e_a)."""
    e_i = np.asarray(e_i, dtype=np.float64)
    e_a = np.asarray(e_a, dtype=np.float64)
    if e_i.shape != e_a.shape or Wb.shape != (len(e_i), len(e_i)) or Wa.shape != (len(e_a), len(e_a)):
        raise ValueError(f"dimension mismatch: e_i {e_i.shape}, e_a {e_a.shape}, Wb {Wb.shape}, Wa {Wa.shape}")
    return float((Wb @ e_i) @ (Wa @ e_a))


def soft_scores(seq: BehaviorSequence, cand: CandidateItem, model: SimModel) -> np.ndarray:
    """Relevance of every behavior in ``seq`` to ``cand``."""
    P = model.params
    e = model.behavior_vectors(seq.items, seq.categories)
    q = P["gsu.Wa"] @ model.candidate_vector(cand.item_id, cand.category_id)
    return (e @ P["gsu.Wb"].T) @ q


def soft_search_exact(seq: BehaviorSequence, cand: CandidateItem, model: SimModel, k: int) -> BehaviorSequence:
    """Top-``k`` behaviors by relevance, chronological; ties favor the more recent behavior."""
    if k <= 0:
        raise ValueError("k must be positive")
    if len(seq) == 0:
        return seq
    idx = _accel.topk_recent(soft_scores(seq, cand, model), int(k))
    return seq.take(idx)


def projected_behaviors(seq: BehaviorSequence, model: SimModel) -> np.ndarray:
    """Index-side MIPS vectors W_b e_i."""
    return model.behavior_vectors(seq.items, seq.categories) @ model.params["gsu.Wb"].T


def projected_candidate(cand: CandidateItem, model: SimModel) -> np.ndarray:
    """Query-side MIPS vector W_a e_a."""
    return model.params["gsu.Wa"] @ model.candidate_vector(cand.item_id, cand.category_id)


def sample_subsequence(seq: BehaviorSequence, max_len: int, seed) -> BehaviorSequence:
    """A uniformly placed contiguous window of ``max_len`` behaviors (identity when short enough)."""
    if max_len <= 0:
        raise ValueError("max_len must be positive")
    n = len(seq)
    if n <= max_len:
        return seq
    start = int(np.random.default_rng(seed).integers(0, n - max_len + 1))
    return seq[start:start + max_len]


# --------------------------------------------------------------------------
# auxiliary soft-search head
# --------------------------------------------------------------------------

@dataclass
class AuxBatch:
    items: np.ndarray  # (B, T)
    cats: np.ndarray
    mask: np.ndarray
    cand_items: np.ndarray
    cand_cats: np.ndarray

    def __len__(self):
        return len(self.cand_items)


def make_aux_batch(seqs, cands) -> AuxBatch:
    width = max(1, max((len(s) for s in seqs), default=0))
    B = len(seqs)
    items = np.zeros((B, width), np.int64)
    cats = np.zeros((B, width), np.int64)
    mask = np.zeros((B, width), bool)
    for i, s in enumerate(seqs):
        items[i, : len(s)] = s.items
        cats[i, : len(s)] = s.categories
        mask[i, : len(s)] = True
    return AuxBatch(
        items, cats, mask,
        np.array([c.item_id for c in cands], np.int64),
        np.array([c.category_id for c in cands], np.int64),
    )


def aux_batch_forward(model: SimModel, batch: AuxBatch, keep_cache: bool = False):
    """Returns (U_r (B, d), click probability (B,), cache)."""
    cfg, P = model.config, model.params
    ir = model.item_table.rows(batch.items)
    cr = model.cat_table.rows(batch.cats)
    e = (P["item_emb"][ir] + P["cat_emb"][cr]) * batch.mask[..., None]
    ci = model.item_table.rows(batch.cand_items)
    cc = model.cat_table.rows(batch.cand_cats)
    ea = P["item_emb"][ci] + P["cat_emb"][cc]
    pb = e @ P["gsu.Wb"].T
    pa = ea @ P["gsu.Wa"].T
    r = np.einsum("bti,bi->bt", pb, pa) * batch.mask
    u_r = np.einsum("bt,bti->bi", r, e)
    x = np.concatenate([u_r, ea], axis=1)
    out, acts = mlp_forward(P, "aux", x, cfg.n_mlp_layers)
    p = two_way_probability(out)
    if not keep_cache:
        return u_r, p, None
    check_finite("aux.logits", out)
    return u_r, p, dict(e=e, ea=ea, pb=pb, pa=pa, r=r, ir=ir, cr=cr, ci=ci, cc=cc, acts=acts)


def aux_batch_backward(model: SimModel, batch: AuxBatch, cache: dict, dlogits: np.ndarray, grads: dict) -> None:
    cfg, P = model.config, model.params
    d = cfg.dim
    dx = mlp_backward(P, "aux", cache["acts"], dlogits, cfg.n_mlp_layers, grads)
    check_finite("aux.dx", dx)
    du, dea = dx[:, :d], dx[:, d:].copy()
    e, r, pb, pa = cache["e"], cache["r"], cache["pb"], cache["pa"]
    mask = batch.mask
    dr = np.einsum("bti,bi->bt", e, du) * mask
    de = r[..., None] * du[:, None, :]
    dpb = dr[..., None] * pa[:, None, :]
    dpa = np.einsum("bt,bti->bi", dr, pb)
    grads["gsu.Wb"] += np.einsum("bti,btj->ij", dpb, e)
    de += dpb @ P["gsu.Wb"]
    grads["gsu.Wa"] += dpa.T @ cache["ea"]
    dea += dpa @ P["gsu.Wa"]
    check_finite("aux.de", de)
    de_real = de[mask]
    _accel.scatter_add_rows(grads["item_emb"], cache["ir"][mask], de_real)
    _accel.scatter_add_rows(grads["cat_emb"], cache["cr"][mask], de_real)
    _accel.scatter_add_rows(grads["item_emb"], cache["ci"], dea)
    _accel.scatter_add_rows(grads["cat_emb"], cache["cc"], dea)


def gsu_aux_forward(seq: BehaviorSequence, cand: CandidateItem, model: SimModel):
    """(U_r, click probability) of the auxiliary head; an empty sequence gives U_r = 0."""
    u_r, p, _ = aux_batch_forward(model, make_aux_batch([seq], [cand]))
    return u_r[0], float(p[0])


def coverage_stat(hard_sets, soft_sets) -> float:
    """Mean over samples of |hard & soft| / |soft|; samples with an empty soft set are skipped."""
    hard_sets = list(hard_sets)
    soft_sets = list(soft_sets)
    if len(hard_sets) != len(soft_sets):
        raise ValueError("hard and soft set lists differ in length")
    fracs = [len(set(h) & set(s)) / len(set(s)) for h, s in zip(hard_sets, soft_sets) if len(s)]
    if not fracs:
        raise UndefinedMetricError("coverage of an empty sample set")
    return float(np.mean(fracs))
