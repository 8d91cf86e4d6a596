"""Exact Search Unit: time-aware multi-head attention over the retrieved
sub-sequence, followed by the CTR MLP.

The batched forward/backward pair is the single implementation; the
per-sample functions build a batch of one.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _accel
from .domain import BehaviorSequence, CandidateItem, bucketize_delta, time_deltas_days
from .model import SimModel
from .nn import (
    PROB_CLAMP,
    binary_cross_entropy,
    check_finite,
    masked_softmax,
    mlp_backward,
    mlp_forward,
    two_way_probability,
)


@dataclass(frozen=True)
class AttentionTrace:
    scores: np.ndarray  # (heads, K)
    outputs: np.ndarray  # (heads, z_dim)

    def to_dict(self) -> dict:
        return {
            "scores": [[round(float(s), 8) for s in row] for row in self.scores],
            "outputs": [[round(float(s), 8) for s in row] for row in self.outputs],
        }


@dataclass
class EsuBatch:
    """Padded second-stage inputs for B samples."""

    sbs_items: np.ndarray  # (B, K)
    sbs_cats: np.ndarray
    sbs_buckets: np.ndarray
    sbs_mask: np.ndarray  # bool (B, K)
    short_items: np.ndarray  # (B, S)
    short_cats: np.ndarray
    short_mask: np.ndarray
    cand_items: np.ndarray  # (B,)
    cand_cats: np.ndarray

    def __len__(self):
        return len(self.cand_items)


def _pad(seqs, width, fill=0):
    out = np.full((len(seqs), width), fill, dtype=np.int64)
    mask = np.zeros((len(seqs), width), dtype=bool)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
        mask[i, : len(s)] = True
    return out, mask


def make_esu_batch(sbs_list, short_list, cands, model: SimModel) -> EsuBatch:
    """Pad per-sample sequences; time buckets are measured from each candidate's request time."""
    buckets = model.config.buckets
    width = max(1, max((len(s) for s in sbs_list), default=0))
    swidth = max(1, max((len(s) for s in short_list), default=0))
    items, mask = _pad([s.items for s in sbs_list], width)
    cats, _ = _pad([s.categories for s in sbs_list], width)
    bks = [
        bucketize_delta(time_deltas_days(s.timestamps, c.request_time), buckets) if len(s) else np.empty(0, np.int64)
        for s, c in zip(sbs_list, cands)
    ]
    bucket_ids, _ = _pad(bks, width)
    sitems, smask = _pad([s.items for s in short_list], swidth)
    scats, _ = _pad([s.categories for s in short_list], swidth)
    return EsuBatch(
        items, cats, bucket_ids, mask, sitems, scats, smask,
        np.array([c.item_id for c in cands], dtype=np.int64),
        np.array([c.category_id for c in cands], dtype=np.int64),
    )


def _encode(model: SimModel, batch: EsuBatch):
    """z = concat(behavior embedding, time embedding); empty rows get the no-history vector."""
    cfg, P = model.config, model.params
    ir = model.item_table.rows(batch.sbs_items)
    cr = model.cat_table.rows(batch.sbs_cats)
    e = P["item_emb"][ir] + P["cat_emb"][cr]
    if cfg.use_time:
        t = P["time_emb"][batch.sbs_buckets]
    else:
        t = np.zeros(e.shape[:-1] + (cfg.time_dim,))
    z = np.concatenate([e, t], axis=-1)
    mask = batch.sbs_mask
    empty = ~mask.any(axis=1)
    if empty.any():
        mask = mask.copy()
        mask[empty, 0] = True
        z[empty, 0] = P["nohist_z"]
    return z, mask, empty, ir, cr


def attention_forward(z, mask, ea2, Wb, Wa):
    """Batched multi-head target attention.

    z: (B, K, dz); mask: (B, K); ea2: (B, 2d); Wb: (H, dz, dz); Wa: (H, dz, 2d).
    Per head: logits_j = (Wb z_j) . (Wa e_a), softmax over behaviors, and the
    head output is the score-weighted sum of the projected behaviors.
    """
    kz = np.matmul(z[:, None, :, :], np.swapaxes(Wb, 1, 2)[None])  # (B, H, K, dz)
    qa = np.einsum("hij,bj->bhi", Wa, ea2)  # (B, H, dz)
    logits = np.matmul(kz, qa[..., None])[..., 0]  # (B, H, K)
    a = masked_softmax(logits, mask[:, None, :])
    head = np.matmul(a[:, :, None, :], kz)[:, :, 0, :]  # (B, H, dz)
    return head, (kz, qa, a)


def attention_backward(dhead, z, ea2, Wb, Wa, cache):
    kz, qa, a = cache
    da = np.matmul(kz, dhead[..., None])[..., 0]
    dkz = a[..., None] * dhead[:, :, None, :]
    dlog = a * (da - (a * da).sum(axis=-1, keepdims=True))
    dkz += dlog[..., None] * qa[:, :, None, :]
    dqa = np.matmul(dlog[:, :, None, :], kz)[:, :, 0, :]
    dWb = np.einsum("bhki,bkj->hij", dkz, z)
    dz = np.einsum("bhki,hij->bkj", dkz, Wb)
    dWa = np.einsum("bhi,bj->hij", dqa, ea2)
    dea2 = np.einsum("bhi,hij->bj", dqa, Wa)
    return dz, dea2, dWb, dWa


def esu_batch_forward(model: SimModel, batch: EsuBatch, keep_cache: bool = False):
    """Click probabilities for every row of ``batch`` (and the backward cache)."""
    cfg, P = model.config, model.params
    B = len(batch)
    z, mask, empty, ir, cr = _encode(model, batch)
    ci = model.item_table.rows(batch.cand_items)
    cc = model.cat_table.rows(batch.cand_cats)
    ea2 = np.concatenate([P["item_emb"][ci], P["cat_emb"][cc]], axis=-1)

    if cfg.pooling == "attention":
        head, att_cache = attention_forward(z, mask, ea2, P["esu.Wb"], P["esu.Wa"])
        long_vec = head.reshape(B, -1)
    else:
        att_cache = None
        cnt = mask.sum(axis=1, keepdims=True)
        long_vec = (z * mask[..., None]).sum(axis=1) / cnt

    sir = model.item_table.rows(batch.short_items)
    scr = model.cat_table.rows(batch.short_cats)
    se = (P["item_emb"][sir] + P["cat_emb"][scr]) * batch.short_mask[..., None]
    short_vec = se.sum(axis=1)
    short_empty = ~batch.short_mask.any(axis=1)
    short_vec[short_empty] = P["nohist_short"]

    x = np.concatenate([long_vec, short_vec, ea2], axis=1)
    out, acts = mlp_forward(P, "mlp", x, cfg.n_mlp_layers)
    p = two_way_probability(out)
    if not keep_cache:
        return p, None
    check_finite("esu.logits", out)
    cache = dict(z=z, mask=mask, empty=empty, ir=ir, cr=cr, ci=ci, cc=cc, ea2=ea2,
                 att=att_cache, sir=sir, scr=scr, short_empty=short_empty, acts=acts, p=p)
    return p, cache


def esu_batch_backward(model: SimModel, batch: EsuBatch, cache: dict, dlogits: np.ndarray, grads: dict) -> None:
    """Accumulate gradients of a loss with d(loss)/d(two-way logits) = ``dlogits``."""
    cfg, P = model.config, model.params
    d = cfg.dim
    dx = mlp_backward(P, "mlp", cache["acts"], dlogits, cfg.n_mlp_layers, grads)
    check_finite("esu.dx", dx)
    ld = cfg.long_dim
    dlong, dshort, dea2 = dx[:, :ld], dx[:, ld:ld + d], dx[:, ld + d:]
    dea2 = dea2.copy()

    z, mask = cache["z"], cache["mask"]
    if cfg.pooling == "attention":
        B = len(batch)
        dhead = dlong.reshape(B, cfg.heads, cfg.z_dim)
        dz, dea2_att, dWb, dWa = attention_backward(dhead, z, cache["ea2"], P["esu.Wb"], P["esu.Wa"], cache["att"])
        grads["esu.Wb"] += dWb
        grads["esu.Wa"] += dWa
        dea2 += dea2_att
    else:
        cnt = mask.sum(axis=1, keepdims=True)
        dz = (dlong / cnt)[:, None, :] * mask[..., None]
    check_finite("esu.dz", dz)

    empty = cache["empty"]
    if empty.any():
        grads["nohist_z"] += dz[empty, 0].sum(axis=0)
    real = batch.sbs_mask
    de = dz[..., :d][real]
    _accel.scatter_add_rows(grads["item_emb"], cache["ir"][real], de)
    _accel.scatter_add_rows(grads["cat_emb"], cache["cr"][real], de)
    if cfg.use_time:
        _accel.scatter_add_rows(grads["time_emb"], batch.sbs_buckets[real], dz[..., d:][real])

    se = cache["short_empty"]
    if se.any():
        grads["nohist_short"] += dshort[se].sum(axis=0)
    smask = batch.short_mask & ~se[:, None]
    ds = np.broadcast_to(dshort[:, None, :], smask.shape + (d,))[smask]
    _accel.scatter_add_rows(grads["item_emb"], cache["sir"][smask], ds)
    _accel.scatter_add_rows(grads["cat_emb"], cache["scr"][smask], ds)

    _accel.scatter_add_rows(grads["item_emb"], cache["ci"], dea2[:, :d])
    _accel.scatter_add_rows(grads["cat_emb"], cache["cc"], dea2[:, d:])


# --------------------------------------------------------------------------
# per-sample API
# --------------------------------------------------------------------------

def encode_sbs(sbs: BehaviorSequence, cand: CandidateItem, model: SimModel) -> np.ndarray:
    """Rows z_j = concat(e_j, time-bucket embedding of the gap to the request), shape (K, d + d_t)."""
    if len(sbs) == 0:
        raise ValueError("encode_sbs needs a nonempty sub-sequence")
    batch = make_esu_batch([sbs], [BehaviorSequence.empty()], [cand], model)
    z, _, _, _, _ = _encode(model, batch)
    return z[0, : len(sbs)]


def multi_head_attention(z: np.ndarray, e_a: np.ndarray, Wb: np.ndarray, Wa: np.ndarray):
    """Attention for one sample. Returns (U_lt of length heads*dz, AttentionTrace)."""
    z = np.asarray(z, dtype=np.float64)
    e_a = np.asarray(e_a, dtype=np.float64)
    if z.ndim != 2 or len(z) == 0:
        raise ValueError("z must be a nonempty (K, dz) array")
    if Wb.shape[1:] != (z.shape[1], z.shape[1]) or Wa.shape[1] != z.shape[1] or Wa.shape[2] != e_a.shape[0]:
        raise ValueError(f"dimension mismatch: z {z.shape}, e_a {e_a.shape}, Wb {Wb.shape}, Wa {Wa.shape}")
    mask = np.ones((1, len(z)), dtype=bool)
    head, (_, _, a) = attention_forward(z[None], mask, e_a[None], Wb, Wa)
    return head[0].reshape(-1), AttentionTrace(scores=a[0], outputs=head[0])


def esu_forward(sbs: BehaviorSequence, short_seq: BehaviorSequence, cand: CandidateItem, model: SimModel) -> float:
    batch = make_esu_batch([sbs], [short_seq], [cand], model)
    p, _ = esu_batch_forward(model, batch)
    return float(p[0])


def esu_trace(sbs: BehaviorSequence, cand: CandidateItem, model: SimModel) -> AttentionTrace:
    """Attention trace for debugging (``--dump-attention``)."""
    if model.config.pooling != "attention":
        raise ValueError("model does not use attention pooling")
    batch = make_esu_batch([sbs], [BehaviorSequence.empty()], [cand], model)
    z, mask, _, _, _ = _encode(model, batch)
    ea2 = model.candidate_pair(cand.item_id, cand.category_id)[None]
    head, (_, _, a) = attention_forward(z, mask, ea2, model.params["esu.Wb"], model.params["esu.Wa"])
    k = max(1, len(sbs))
    return AttentionTrace(scores=a[0, :, :k], outputs=head[0])


def cross_entropy(p: float, label: int) -> float:
    """Binary cross-entropy; ``p`` is clamped to [1e-7, 1 - 1e-7]."""
    if not np.isfinite(p) or p < 0 or p > 1:
        raise ValueError(f"probability out of domain: {p}")
    if label not in (0, 1):
        raise ValueError(f"label must be 0 or 1, got {label}")
    return float(binary_cross_entropy(p, label))


__all__ = [
    "AttentionTrace", "EsuBatch", "make_esu_batch", "esu_batch_forward", "esu_batch_backward",
    "encode_sbs", "multi_head_attention", "esu_forward", "esu_trace", "cross_entropy", "PROB_CLAMP",
]
