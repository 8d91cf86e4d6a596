"""Random instances shared by the test modules."""

import numpy as np

from simctr.domain import BehaviorSequence, CandidateItem, TrainingSample
from simctr.model import SimConfig, init_model


def random_sequence(rng, n, n_items=50, n_cats=6, t_end=1_000_000, span=400 * 86400):
    times = np.sort(rng.integers(t_end - span, t_end, n))
    return BehaviorSequence(rng.integers(0, n_items, n), rng.integers(0, n_cats, n), times)


def random_sample(rng, n_long, n_short, n_items=50, n_cats=6, label=None, t=1_000_000):
    seq = random_sequence(rng, n_long + n_short, n_items, n_cats, t_end=t)
    cand = CandidateItem(int(rng.integers(0, n_items)), int(rng.integers(0, n_cats)), t)
    y = int(rng.integers(0, 2)) if label is None else label
    cut = len(seq) - n_short
    return TrainingSample(int(rng.integers(0, 100)), cand, y, short_seq=seq[cut:], long_seq=seq[:cut])


def small_config(**kw):
    base = dict(n_items=50, n_categories=6, dim=4, time_dim=4, heads=2, hidden=(8, 6), k=8, short_len=3)
    base.update(kw)
    return SimConfig(**base)


def small_model(seed=0, **kw):
    return init_model(small_config(**kw), seed=seed)


def finite_difference_errors(model, samples, sbs_list, aux_seqs=None, eps=1e-6):
    """Relative error ||analytic - numeric|| / max(norms) for every parameter tensor.

    Selections (and auxiliary windows) are held fixed, as in training.
    """
    from simctr.trainer import batch_loss

    _, _, grads = batch_loss(model, samples, sbs_list, aux_seqs, with_grads=True)
    errors = {}
    for name, arr in model.params.items():
        numeric = np.zeros_like(arr)
        flat, nflat = arr.reshape(-1), numeric.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + eps
            up, _, _ = batch_loss(model, samples, sbs_list, aux_seqs)
            flat[i] = old - eps
            down, _, _ = batch_loss(model, samples, sbs_list, aux_seqs)
            flat[i] = old
            nflat[i] = (up - down) / (2 * eps)
        denom = max(np.linalg.norm(grads[name]), np.linalg.norm(numeric))
        errors[name] = 0.0 if denom < 1e-10 else float(np.linalg.norm(grads[name] - numeric) / denom)
    return errors
