import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import random_sample, random_sequence, small_model
from simctr.domain import BehaviorSequence, CandidateItem, bucketize_delta, time_deltas_days
from simctr.esu import (
    cross_entropy,
    encode_sbs,
    esu_batch_forward,
    esu_forward,
    esu_trace,
    make_esu_batch,
    multi_head_attention,
)
from simctr.gsu import hard_search_sequence
from simctr.nn import mlp_forward, sigmoid


def _attention_oracle(z, e_a, Wb, Wa):
    """Loop implementation of multi-head target attention."""
    heads, scores = [], []
    for h in range(Wb.shape[0]):
        keys = [Wb[h] @ zj for zj in z]
        query = Wa[h] @ e_a
        logits = np.array([k @ query for k in keys])
        w = np.exp(logits - logits.max())
        w /= w.sum()
        heads.append(sum(wj * kj for wj, kj in zip(w, keys)))
        scores.append(w)
    return np.concatenate(heads), np.array(scores)


@settings(max_examples=50)
@given(seed=st.integers(0, 10_000), k=st.integers(1, 12), heads=st.integers(1, 4))
def test_attention_matches_loop_oracle(seed, k, heads):
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((k, 8))
    e_a = rng.standard_normal(8)
    Wb = rng.standard_normal((heads, 8, 8))
    Wa = rng.standard_normal((heads, 8, 8))
    u, trace = multi_head_attention(z, e_a, Wb, Wa)
    want_u, want_s = _attention_oracle(z, e_a, Wb, Wa)
    np.testing.assert_allclose(u, want_u, rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(trace.scores, want_s, rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(trace.scores.sum(axis=1), 1.0, atol=1e-12)


def test_attention_rejects_bad_shapes():
    with pytest.raises(ValueError):
        multi_head_attention(np.zeros((0, 8)), np.zeros(8), np.zeros((2, 8, 8)), np.zeros((2, 8, 8)))
    with pytest.raises(ValueError):
        multi_head_attention(np.zeros((3, 8)), np.zeros(5), np.zeros((2, 8, 8)), np.zeros((2, 8, 8)))


def test_encoding_concatenates_behavior_and_time_embeddings(rng):
    model = small_model()
    sbs = random_sequence(rng, 6)
    cand = CandidateItem(1, 1, 1_000_000)
    z = encode_sbs(sbs, cand, model)
    buckets = bucketize_delta(time_deltas_days(sbs.timestamps, cand.request_time), model.config.buckets)
    np.testing.assert_allclose(z[:, :4], model.behavior_vectors(sbs.items, sbs.categories))
    np.testing.assert_allclose(z[:, 4:], model.params["time_emb"][buckets])


def _esu_oracle(sbs, short, cand, model):
    """Single-sample forward written directly from the model definition."""
    P = model.params
    if len(sbs):
        z = encode_sbs(sbs, cand, model)
    else:
        z = P["nohist_z"][None]
    e_a2 = model.candidate_pair(cand.item_id, cand.category_id)
    u_lt, _ = _attention_oracle(z, e_a2, P["esu.Wb"], P["esu.Wa"])
    short_vec = model.behavior_vectors(short.items, short.categories).sum(0) if len(short) else P["nohist_short"]
    x = np.concatenate([u_lt, short_vec, e_a2])[None]
    out, _ = mlp_forward(P, "mlp", x, model.config.n_mlp_layers)
    return float(sigmoid(out[0, 1] - out[0, 0]))


@settings(max_examples=40)
@given(seed=st.integers(0, 10_000), n_long=st.integers(0, 15), n_short=st.integers(0, 4))
def test_forward_matches_oracle(seed, n_long, n_short):
    rng = np.random.default_rng(seed)
    model = small_model(seed=seed % 3)
    s = random_sample(rng, n_long, n_short)
    sbs = hard_search_sequence(s.long_seq, s.candidate.category_id, model.config.k)
    p = esu_forward(sbs, s.short_seq, s.candidate, model)
    assert 0.0 < p < 1.0
    assert p == pytest.approx(_esu_oracle(sbs, s.short_seq, s.candidate, model), rel=1e-10, abs=1e-12)


def test_batched_forward_equals_per_sample(rng):
    model = small_model()
    samples = [random_sample(rng, int(rng.integers(0, 12)), int(rng.integers(0, 4))) for _ in range(30)]
    sbs = [s.long_seq[-8:] for s in samples]
    batch = make_esu_batch(sbs, [s.short_seq for s in samples], [s.candidate for s in samples], model)
    p, _ = esu_batch_forward(model, batch)
    single = [esu_forward(b, s.short_seq, s.candidate, model) for b, s in zip(sbs, samples)]
    np.testing.assert_allclose(p, single, rtol=1e-10)


def test_empty_history_uses_no_history_vectors():
    model = small_model()
    cand = CandidateItem(1, 1, 100)
    p = esu_forward(BehaviorSequence.empty(), BehaviorSequence.empty(), cand, model)
    model.params["nohist_z"] += 1.0
    model.params["nohist_short"] += 1.0
    assert esu_forward(BehaviorSequence.empty(), BehaviorSequence.empty(), cand, model) != p


def test_avg_pooling_variant(rng):
    model = small_model(pooling="avg", search="none", use_time=False)
    s = random_sample(rng, 10, 2)
    p = esu_forward(s.long_seq, s.short_seq, s.candidate, model)
    z = np.concatenate([model.behavior_vectors(s.long_seq.items, s.long_seq.categories), np.zeros((10, 4))], 1)
    P = model.params
    x = np.concatenate([z.mean(0), model.behavior_vectors(s.short_seq.items, s.short_seq.categories).sum(0),
                        model.candidate_pair(s.candidate.item_id, s.candidate.category_id)])[None]
    out, _ = mlp_forward(P, "mlp", x, 3)
    assert p == pytest.approx(float(sigmoid(out[0, 1] - out[0, 0])), rel=1e-12)


def test_trace_is_serializable(rng):
    model = small_model()
    tr = esu_trace(random_sequence(rng, 5), CandidateItem(1, 1, 1_000_000), model)
    d = tr.to_dict()
    assert len(d["scores"]) == 2 and len(d["scores"][0]) == 5
    assert all(abs(sum(row) - 1) < 1e-6 for row in d["scores"])


def test_cross_entropy():
    assert cross_entropy(0.5, 1) == pytest.approx(np.log(2))
    assert cross_entropy(1.0, 1) == pytest.approx(-np.log1p(-1e-7))
    assert cross_entropy(0.0, 1) == pytest.approx(-np.log(1e-7))
    for bad in (-0.1, 1.1, float("nan")):
        with pytest.raises(ValueError):
            cross_entropy(bad, 0)
    with pytest.raises(ValueError):
        cross_entropy(0.5, 2)
