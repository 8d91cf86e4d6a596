"""Joint training of both stages under alpha * Loss_GSU + beta * Loss_ESU."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .domain import BehaviorSequence, TrainingSample
from .errors import ConfigError
from .esu import esu_batch_backward, esu_batch_forward, make_esu_batch
from .gsu import (
    aux_batch_backward,
    aux_batch_forward,
    hard_search_sequence,
    make_aux_batch,
    sample_subsequence,
    soft_search_exact,
)
from .model import SimModel
from .nn import bce_grad_wrt_logits, binary_cross_entropy

log = logging.getLogger(__name__)


def select_sbs(sample: TrainingSample, model: SimModel) -> BehaviorSequence:
    """First-stage output for ``sample`` under the model's search mode."""
    cfg = model.config
    if cfg.search == "hard":
        return hard_search_sequence(sample.long_seq, sample.candidate.category_id, cfg.k)
    if cfg.search == "soft":
        return soft_search_exact(sample.long_seq, sample.candidate, model, cfg.k)
    return sample.long_seq


def aux_sequence(sample: TrainingSample, model: SimModel, seed) -> BehaviorSequence:
    return sample_subsequence(sample.long_seq, model.config.aux_max_len, seed)


def _labels(samples) -> np.ndarray:
    return np.array([s.label for s in samples], dtype=np.int64)


def zero_grads(model: SimModel) -> dict[str, np.ndarray]:
    return {k: np.zeros_like(v) for k, v in model.params.items()}


def batch_loss(model: SimModel, samples: Sequence[TrainingSample], sbs_list, aux_seqs=None,
               with_grads: bool = False):
    """Mean combined loss over a batch with the first-stage selection held fixed.

    Returns ``(loss, {"gsu": ..., "esu": ...}, grads or None)``.
    """
    cfg = model.config
    y = _labels(samples)
    cands = [s.candidate for s in samples]
    eb = make_esu_batch(sbs_list, [s.short_seq for s in samples], cands, model)
    p_esu, ecache = esu_batch_forward(model, eb, keep_cache=with_grads)
    loss_esu = float(binary_cross_entropy(p_esu, y).mean())
    loss_gsu = 0.0
    ab = acache = p_aux = None
    if cfg.alpha > 0:
        ab = make_aux_batch(aux_seqs, cands)
        _, p_aux, acache = aux_batch_forward(model, ab, keep_cache=with_grads)
        loss_gsu = float(binary_cross_entropy(p_aux, y).mean())
    loss = cfg.alpha * loss_gsu + cfg.beta * loss_esu
    grads = None
    if with_grads:
        grads = zero_grads(model)
        esu_batch_backward(model, eb, ecache, bce_grad_wrt_logits(p_esu, y, cfg.beta), grads)
        if cfg.alpha > 0:
            aux_batch_backward(model, ab, acache, bce_grad_wrt_logits(p_aux, y, cfg.alpha), grads)
    return loss, {"gsu": loss_gsu, "esu": loss_esu}, grads


def combined_loss(sample: TrainingSample, model: SimModel, seed=0):
    """(loss, components) for one sample; components hold both unweighted losses."""
    sbs = select_sbs(sample, model)
    aux = [aux_sequence(sample, model, seed)] if model.config.alpha > 0 else None
    loss, comp, _ = batch_loss(model, [sample], [sbs], aux)
    return loss, comp


def backward(sample: TrainingSample, model: SimModel, seed=0) -> dict[str, np.ndarray]:
    """Analytic gradients of :func:`combined_loss` for every parameter."""
    sbs = select_sbs(sample, model)
    aux = [aux_sequence(sample, model, seed)] if model.config.alpha > 0 else None
    _, _, grads = batch_loss(model, [sample], [sbs], aux, with_grads=True)
    return grads


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: dict, grads: dict, state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update, applied in place."""
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name in sorted(grads):
        g = grads[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        params[name] -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def lr_schedule(epoch: int, lr0: float = 0.001, gamma: float = 0.9) -> float:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return lr0 * gamma ** epoch


def predict(model: SimModel, samples: Sequence[TrainingSample], batch_size: int = 512) -> np.ndarray:
    """Second-stage click probabilities for ``samples``."""
    out = []
    for i in range(0, len(samples), batch_size):
        chunk = samples[i:i + batch_size]
        eb = make_esu_batch([select_sbs(s, model) for s in chunk], [s.short_seq for s in chunk],
                            [s.candidate for s in chunk], model)
        p, _ = esu_batch_forward(model, eb)
        out.append(p)
    return np.concatenate(out) if out else np.empty(0)


def _check_dims(samples, model: SimModel) -> None:
    cfg = model.config
    max_item = max_cat = -1
    for s in samples:
        for seq in (s.long_seq, s.short_seq):
            if len(seq):
                max_item = max(max_item, int(seq.items.max()))
                max_cat = max(max_cat, int(seq.categories.max()))
        max_item = max(max_item, s.candidate.item_id)
        max_cat = max(max_cat, s.candidate.category_id)
    if max_item >= cfg.n_items or max_cat >= cfg.n_categories:
        raise ConfigError(
            f"dataset ids (item {max_item}, category {max_cat}) exceed model vocabulary "
            f"({cfg.n_items} items, {cfg.n_categories} categories)"
        )


def train(dataset: Sequence[TrainingSample], model: SimModel, epochs: int, seed: int = 0,
          eval_set: Sequence[TrainingSample] | None = None, state: AdamState | None = None):
    """Train ``model`` in place. Returns ``(model, history)``.

    ``history`` has one dict per epoch with the mean training loss (and its
    components) and, when ``eval_set`` is given, the held-out AUC. Soft-search
    selections are recomputed from the current embeddings at the start of each
    epoch; hard-search selections are fixed and computed once.
    """
    from .metrics import auc  # metrics imports trainer.predict

    samples = list(dataset)
    if not samples:
        raise ConfigError("empty training set")
    _check_dims(samples, model)
    cfg = model.config
    rng = np.random.default_rng(seed)
    state = state or AdamState()
    history = []
    sbs = None
    for epoch in range(epochs):
        if sbs is None or cfg.search == "soft":
            sbs = [select_sbs(s, model) for s in samples]
        lr = lr_schedule(epoch, cfg.lr0, cfg.decay)
        order = rng.permutation(len(samples))
        losses, gl, el = [], [], []
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            batch = [samples[i] for i in idx]
            aux = None
            if cfg.alpha > 0:
                aux = [aux_sequence(samples[i], model, (seed, epoch, int(i))) for i in idx]
            loss, comp, grads = batch_loss(model, batch, [sbs[i] for i in idx], aux, with_grads=True)
            adam_step(model.params, grads, state, lr)
            losses.append(loss * len(idx))
            gl.append(comp["gsu"] * len(idx))
            el.append(comp["esu"] * len(idx))
        n = len(samples)
        rec = {"epoch": epoch, "lr": lr, "loss": sum(losses) / n, "loss_gsu": sum(gl) / n, "loss_esu": sum(el) / n}
        if eval_set:
            rec["auc"] = auc(predict(model, eval_set), _labels(eval_set))
        log.info(" ".join(f"{k}={v:.6g}" if isinstance(v, float) else f"{k}={v}" for k, v in rec.items()))
        history.append(rec)
    model.snap_to_float32()
    return model, history
