import json

import numpy as np
import pytest

from simctr.datagen import (
    GenConfig,
    generate,
    ingest,
    load_dataset,
    read_samples,
    write_dataset,
    write_id_maps,
)
from simctr.errors import ConfigError, IngestError


def test_generation_is_deterministic(tmp_path):
    cfg = GenConfig(users=50, items=200, categories=8, seq_len_median=30, max_seq_len=100, seed=4)
    a = write_dataset(generate(cfg), tmp_path / "a")
    b = write_dataset(generate(cfg), tmp_path / "b")
    for name in ("behaviors.tsv", "train.tsv", "test.tsv", "meta.json"):
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_generator_respects_bounds(tiny_dataset):
    ds = tiny_dataset
    cfg = GenConfig(**ds.meta["generator"])
    b = ds.behaviors
    lens = np.bincount(b.users, minlength=cfg.users)
    assert lens.min() >= cfg.min_seq_len and lens.max() <= cfg.max_seq_len
    assert b.items.max() < cfg.items and b.cats.max() < cfg.categories
    assert len(ds.train) + len(ds.test) == cfg.users * cfg.samples_per_user
    assert not set(ds.train.users) & set(ds.test.users)


def test_items_belong_to_one_category(tiny_dataset):
    b = tiny_dataset.behaviors
    pairs = {}
    for i, c in zip(b.items.tolist(), b.cats.tolist()):
        assert pairs.setdefault(i, c) == c


def test_no_sample_sees_the_future(tiny_dataset):
    tree = tiny_dataset.tree()
    for s in tiny_dataset.train_samples(tree) + tiny_dataset.test_samples(tree):
        for seq in (s.short_seq, s.long_seq):
            assert len(seq) == 0 or seq.timestamps.max() < s.candidate.request_time


def test_labels_follow_planted_signal_by_direct_count():
    ds = generate(GenConfig(users=3000, items=5000, categories=50, seed=1))
    tree = ds.tree()
    samples = ds.train_samples(tree) + ds.test_samples(tree)
    # count same-category long-term behaviors from scratch
    n = np.array([int(np.sum(s.long_seq.categories == s.candidate.category_id)) for s in samples])
    np.testing.assert_array_equal(n, ds.n_match)
    y = np.array([s.label for s in samples])
    assert y[n > 0].mean() > y[n == 0].mean() + 0.3
    # expected rate with w=1.5, b=-2, 10% flips for candidates with no matches
    assert y[n == 0].mean() == pytest.approx(0.9 / (1 + np.exp(2)) + 0.1 * (1 - 1 / (1 + np.exp(2))), abs=0.03)


def test_infinite_weight_limit_makes_labels_a_threshold():
    ds = generate(GenConfig(users=200, items=300, categories=10, label_noise=0.0, w=1e6, b=-1e3, seed=2))
    labels = np.concatenate([ds.train.labels, ds.test.labels])
    np.testing.assert_array_equal(labels, (ds.n_match > 0).astype(int))


@pytest.mark.parametrize("kw", [dict(categories=10, items=5), dict(label_noise=0.5), dict(max_seq_len=60000),
                                dict(users=0), dict(affinity_categories=0)])
def test_infeasible_configs(kw):
    with pytest.raises(ConfigError):
        GenConfig(**kw)


def test_unknown_config_key():
    with pytest.raises(ConfigError):
        GenConfig.from_dict({"userz": 3})


def test_dataset_roundtrip(tmp_path, tiny_dataset):
    out = write_dataset(tiny_dataset, tmp_path / "d")
    again = load_dataset(out)
    np.testing.assert_array_equal(again.behaviors.times, tiny_dataset.behaviors.times)
    np.testing.assert_array_equal(again.test.labels, tiny_dataset.test.labels)
    assert again.meta["n_items"] == tiny_dataset.meta["n_items"]


def test_malformed_sample_file_reports_line(tmp_path):
    p = tmp_path / "train.tsv"
    p.write_text("1\t2\t3\t4\t1\n1\t2\tx\t4\t0\n")
    with pytest.raises(IngestError) as exc:
        read_samples(p)
    assert exc.value.line == 2
    p.write_text("1\t2\t3\t4\t1\n1\t2\t3\t4\t7\n")
    with pytest.raises(IngestError) as exc:
        read_samples(p)
    assert exc.value.line == 2


def _write(tmp_path, lines):
    p = tmp_path / "log.tsv"
    p.write_text("".join(line + "\n" for line in lines))
    return p


def test_ingest_two_line_user(tmp_path):
    res = ingest(_write(tmp_path, ["alice\tbook\tpaper\t20", "alice\tpen\tink\t10"]), schema="reviews")
    b = res.dataset.behaviors
    assert b.times.tolist() == [10, 20]
    assert len(res.dataset.train) == 1 and res.dataset.train.labels.tolist() == [1]
    s = res.dataset.train_samples()[0]
    assert len(s.history) == 1 and s.history.items.tolist() == [res.item_ids["pen"]]


def test_ingest_order_does_not_matter(tmp_path):
    lines = [f"u{u}\ti{(u * 7 + k) % 13}\tc{k % 3}\t{100 + k * 10}" for u in range(4) for k in range(6)]
    a = ingest(_write(tmp_path, lines))
    shuffled = [lines[i] for i in np.random.default_rng(0).permutation(len(lines))]
    b = ingest(_write(tmp_path, shuffled))
    inv = lambda m: {v: k for k, v in m.items()}

    def named(res):
        bb = res.dataset.behaviors
        u, i, c = inv(res.user_ids), inv(res.item_ids), inv(res.category_ids)
        return [(u[x], i[y], c[z], t) for x, y, z, t in zip(bb.users, bb.items, bb.cats, bb.times)]

    assert sorted(named(a), key=lambda r: (r[0], r[3])) == sorted(named(b), key=lambda r: (r[0], r[3]))


def test_ingest_rejects_duplicates_and_bad_lines(tmp_path):
    res = ingest(_write(tmp_path, ["a\tx\tc\t1", "a\tx\tc\t1", "a\ty\tc\t2"]))
    assert res.rejected == 1 and len(res.dataset.behaviors) == 2
    with pytest.raises(IngestError) as exc:
        ingest(_write(tmp_path, ["a\tx\tc\t1", "a\tx\tc"]))
    assert exc.value.line == 2
    with pytest.raises(IngestError) as exc:
        ingest(_write(tmp_path, ["a\tx\tc\tnoon"]))
    assert exc.value.line == 1


def test_ingest_clicks_schema_and_stats(tmp_path):
    lines = ["u1\ti1\tc1\t10", "u1\ti2\tc2\t20", "u1\ti3\tc1\t30\t1", "u2\ti1\tc1\t5", "u2\ti2\tc2\t40\t0"]
    res = ingest(_write(tmp_path, lines), schema="clicks")
    # independent scan of the raw file
    rows = [line.split("\t") for line in lines]
    assert res.stats["users"] == len({r[0] for r in rows})
    assert res.stats["items"] == len({r[1] for r in rows})
    assert res.stats["categories"] == len({r[2] for r in rows})
    assert res.stats["behaviors"] == sum(len(r) == 4 for r in rows)
    assert res.stats["samples"] == 2
    write_id_maps(res, tmp_path)
    maps = json.loads((tmp_path / "id_maps.json").read_text())
    assert maps["users"] == {"u1": 0, "u2": 1}
