import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from simctr.domain import (
    Behavior,
    BehaviorSequence,
    CandidateItem,
    TimeDeltaBuckets,
    TrainingSample,
    bucketize_delta,
    make_sequence,
    split_short_long,
    time_delta_days,
    time_deltas_days,
)
from simctr.errors import ConfigError, InputOrderError


def test_sequence_rejects_time_going_backwards():
    with pytest.raises(InputOrderError):
        make_sequence([1, 2], [0, 0], [10, 5])


def test_sequence_columns_are_read_only():
    s = make_sequence([1, 2], [0, 1], [1, 2])
    with pytest.raises(ValueError):
        s.items[0] = 9


def test_negative_ids_rejected():
    with pytest.raises(ValueError):
        Behavior(-1, 0, 0)
    with pytest.raises(ValueError):
        CandidateItem(0, -2, 0)


def test_sequence_roundtrips_through_behaviors():
    s = make_sequence([3, 4, 5], [1, 1, 2], [7, 7, 9])
    again = BehaviorSequence.from_behaviors(list(s))
    assert again == s
    assert s[1] == Behavior(4, 1, 7)
    assert len(s[1:]) == 2


@given(n=st.integers(0, 60), short=st.integers(0, 80))
def test_split_short_long_partitions_sequence(n, short):
    seq = make_sequence(range(n), [0] * n, range(n))
    long_seq, short_seq = split_short_long(seq, short)
    assert len(short_seq) == min(n, short)
    assert long_seq.concat(short_seq) == seq


def test_split_short_long_examples():
    seq = make_sequence(range(1000), [0] * 1000, range(1000))
    long_seq, short_seq = split_short_long(seq, 10)
    assert (len(long_seq), len(short_seq)) == (990, 10)
    assert short_seq.items[0] == 990
    with pytest.raises(ValueError):
        split_short_long(seq, -1)


def test_training_sample_rejects_future_behaviors():
    cand = CandidateItem(1, 1, 100)
    ok = make_sequence([1], [1], [99])
    TrainingSample(0, cand, 1, ok, ok)
    with pytest.raises(InputOrderError):
        TrainingSample(0, cand, 1, make_sequence([1], [1], [100]), ok)
    with pytest.raises(ValueError):
        TrainingSample(0, cand, 2, ok, ok)


def test_time_delta_days():
    assert time_delta_days(Behavior(0, 0, 0), CandidateItem(0, 0, 86400 * 3)) == 3.0
    with pytest.raises(InputOrderError):
        time_delta_days(Behavior(0, 0, 10), CandidateItem(0, 0, 5))
    np.testing.assert_allclose(time_deltas_days(np.array([0, 43200]), 86400), [1.0, 0.5])


def _bucket_oracle(d, boundaries):
    i = 0
    while i < len(boundaries) and boundaries[i] <= d:
        i += 1
    return i


@given(st.floats(0, 1000, allow_nan=False))
def test_bucketize_matches_linear_scan(d):
    b = TimeDeltaBuckets()
    assert bucketize_delta(d, b) == _bucket_oracle(d, b.boundaries)


def test_bucketize_edges_and_arrays():
    b = TimeDeltaBuckets((1.0, 2.0, 4.0))
    assert [bucketize_delta(x, b) for x in (0, 0.99, 1, 3.9, 4, 1e9)] == [0, 0, 1, 2, 3, 3]
    np.testing.assert_array_equal(bucketize_delta(np.array([0.5, 2.5]), b), [0, 2])
    assert b.n_buckets == 4
    with pytest.raises(InputOrderError):
        bucketize_delta(-1.0, b)


@pytest.mark.parametrize("bad", [(), (2.0, 1.0), (0.0, 1.0)])
def test_bucket_boundaries_validated(bad):
    with pytest.raises(ConfigError):
        TimeDeltaBuckets(bad)


@settings(max_examples=50)
@given(st.lists(st.tuples(st.integers(0, 9), st.integers(0, 3), st.integers(0, 50)), max_size=30))
def test_take_and_concat_preserve_columns(rows):
    rows = sorted(rows, key=lambda r: r[2])
    seq = BehaviorSequence.from_behaviors(Behavior(*r) for r in rows)
    idx = np.arange(0, len(rows), 2)
    taken = seq.take(idx)
    assert [tuple(b.__dict__.values()) for b in taken] == [rows[i] for i in idx]
