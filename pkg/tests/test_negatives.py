import logging

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dualnda.data import LabelKind, LabelSpace
from dualnda.errors import ConfigError, DomainError
from dualnda.negatives import (NegativePool, build_type2_continuous, build_type2_integer, invert_jigsaw,
                               jigsaw_negative, load_pool, pool_query_many, pool_query_vicinity, save_pool,
                               strict_filter, type1_draw, type1_select)

from oracles import integer_space, oracle_keep, score_pixel, stub_generator


def test_type1_select_example():
    idx = type1_select([0.1, 0.4, 0.5, 0.9], 0.5, 0.5)
    assert idx.tolist() == [0, 3]
    assert type1_select([0.1, 0.4, 0.5, 0.9], 0.5, 1 - 1e-12).size == 0
    assert type1_select([0.3, 0.3, 0.3], 0.3, 0.5).size == 0
    with pytest.raises(ConfigError):
        type1_select([0.1], 0.1, 1.0)


def test_type1_select_matches_oracle():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        n = int(rng.integers(10, 400))
        labels = rng.uniform(0, 1, n)
        if rng.random() < 0.5:
            labels = np.round(labels, 1)  # ties
        anchor = rng.uniform(-0.5, 1.5)
        q = float(rng.uniform(0.05, 0.95))
        got = type1_select(labels, anchor, q).tolist()
        assert got == oracle_keep(np.abs(anchor - labels), q)


@given(st.lists(st.floats(0, 1), min_size=2, max_size=60, unique=True), st.floats(0, 1), st.floats(0.05, 0.95))
def test_type1_never_returns_anchor_label_and_calibrated(labels, anchor_pos, q):
    labels = np.asarray(labels)
    anchor = labels[int(anchor_pos * (len(labels) - 1))]
    idx = type1_select(labels, anchor, q)
    assert not np.any(labels[idx] == anchor)
    d = np.abs(anchor - labels)
    if len(np.unique(d)) == len(d):
        assert abs(len(idx) / len(labels) - (1 - q)) <= 2 / len(labels) + 1e-12


def test_type1_draw_membership():
    rng = np.random.default_rng(1)
    for _ in range(200):
        labels = np.round(rng.uniform(0, 1, int(rng.integers(10, 300))), int(rng.integers(1, 4)))
        anchors = rng.uniform(0, 1, 16)
        q = float(rng.uniform(0.1, 0.9))
        u = rng.random(16)
        picks = type1_draw(labels, anchors, q, u)
        for a, p, uu in zip(anchors, picks, u):
            sel = type1_select(labels, a, q)
            if sel.size == 0:
                assert p == -1
            else:
                assert p == sel[min(int(uu * sel.size), sel.size - 1)]


def test_strict_filter_counts():
    v = np.random.default_rng(2).permutation(1000).astype(float)
    keep, _ = strict_filter(v, 0.9)
    assert keep.sum() == 100
    keep, _ = strict_filter(np.arange(100.0), 0.99)
    assert keep.sum() == 1
    keep, c = strict_filter([3.0, 1.0, 2.0], 0.0)
    assert c == 1.0 and keep.tolist() == [True, False, True]


def test_integer_builder_matches_oracle():
    rng = np.random.default_rng(3)
    for case in range(200):
        n_labels = int(rng.integers(2, 6))
        m = int(rng.integers(10, 80))
        q = float(rng.uniform(0, 0.95))
        tie = rng.random() < 0.5
        seed = int(rng.integers(1 << 30))
        fn = lambda labels, r: np.round(r.uniform(0, 10, len(labels)), 0 if tie else 9)  # noqa: E731
        gen = stub_generator(fn)
        pool = build_type2_integer(gen, integer_space(n_labels), m, q, score_pixel, seed=seed, chunk=17)
        pool.check_invariants()
        # replay the generator stream per label and apply the oracle
        root = np.random.SeedSequence([seed, 2])
        expect = []
        for k, ss in enumerate(root.spawn(n_labels)):
            r = np.random.default_rng(ss)
            s = np.concatenate([fn(np.zeros(len(range(a, min(a + 17, m)))), r) for a in range(0, m, 17)])
            expect += [k * m + i for i in oracle_keep(s, q)]
        assert sorted(pool.ids.tolist()) == sorted(expect)


def test_continuous_builder_matches_oracle():
    rng = np.random.default_rng(4)
    train = rng.uniform(0, 1, 50)
    for case in range(1000):
        M = int(rng.integers(100, 400))
        q = float(rng.uniform(0, 0.95))
        tie = rng.random() < 0.5
        seed = int(rng.integers(1 << 30))
        fn = lambda labels, r: np.round(r.uniform(0, 10, len(labels)), 0 if tie else 9)  # noqa: E731
        r = np.random.default_rng(np.random.SeedSequence([seed, 3]))
        labels = r.choice(train, size=M, replace=True)
        keep = oracle_keep(fn(labels, r), q)
        if not keep:
            # every score tied at or below the threshold
            with pytest.raises(ConfigError):
                build_type2_continuous(stub_generator(fn), train, M, q, score_pixel, seed=seed)
            continue
        pool = build_type2_continuous(stub_generator(fn), train, M, q, score_pixel, seed=seed, chunk=1000)
        assert sorted(pool.ids.tolist()) == keep
        assert np.array_equal(np.sort(pool.labels), np.sort(labels[keep]))


def test_count_law_continuous():
    distinct = stub_generator(lambda labels, r: r.permutation(len(labels)).astype(float))
    pool = build_type2_continuous(distinct, np.linspace(0, 1, 30), 1000, 0.9, score_pixel)
    assert len(pool) == 100
    pool = build_type2_continuous(distinct, np.linspace(0, 1, 30), 100, 0.99, score_pixel)
    assert len(pool) == 1


def test_count_law_utkface_shape():
    # 60 labels x 10,000 samples, distinct scores, q2=0.9
    distinct = stub_generator(lambda labels, r: r.permutation(len(labels)).astype(float))
    pool = build_type2_integer(distinct, integer_space(60), 10_000, 0.9, score_pixel, chunk=10_000)
    assert abs(len(pool) - 60_000) <= 60
    per_label = np.unique(pool.labels, return_counts=True)[1]
    assert np.all(np.abs(per_label - 1000) <= 1)


def test_builder_errors_and_failed_scores():
    gen = stub_generator(lambda labels, r: r.uniform(0, 1, len(labels)))
    with pytest.raises(ConfigError):
        build_type2_integer(gen, integer_space(3), 5, 0.9, score_pixel)
    with pytest.raises(ConfigError):
        build_type2_continuous(gen, [0.5], 50, 0.9, score_pixel)
    cont = LabelSpace(0.0, 1.0, LabelKind.STRICTLY_CONTINUOUS, np.array([0.2, 0.7]))
    with pytest.raises(ConfigError):
        build_type2_integer(gen, cont, 20, 0.9, score_pixel)

    def nan_scorer(images):
        s = images[:, 0, 0, 0].astype(np.float64)
        s[::10] = np.nan
        return s, int(np.isnan(s).sum())

    pool = build_type2_continuous(gen, [0.5], 200, 0.5, nan_scorer)
    assert pool.manifest["n_failed"] == 20
    assert np.all(np.isfinite(pool.scores))


def make_pool(labels, seed=0):
    labels = np.asarray(labels, dtype=np.float64)
    n = len(labels)
    return NegativePool(np.zeros((n, 1, 2, 2), np.float32), labels, np.full(n, 2.0), np.full(n, 1.0),
                        np.arange(n), "continuous", {"global": 1.0}, {"n_generated": n + 1})


def test_pool_canonical_order_and_roundtrip(tmp_path):
    pool = make_pool([0.5, 0.1, 0.5, 0.3])
    assert pool.labels.tolist() == [0.1, 0.3, 0.5, 0.5]
    assert pool.ids.tolist() == [1, 3, 0, 2]
    save_pool(pool, tmp_path / "p.bin")
    back = load_pool(tmp_path / "p.bin")
    assert np.array_equal(back.labels, pool.labels) and np.array_equal(back.ids, pool.ids)
    save_pool(back, tmp_path / "q.bin")
    assert (tmp_path / "p.bin").read_bytes() == (tmp_path / "q.bin").read_bytes()
    bad = make_pool([0.2])
    bad.scores[:] = 1.0
    with pytest.raises(DomainError):
        bad.check_invariants()


def test_pool_query_uniform():
    pool = make_pool(np.linspace(0.48, 0.52, 5))
    idx, w = pool_query_many(pool, np.full(100_000, 0.5), 0.05, np.random.default_rng(0))
    assert w == 0
    freq = np.bincount(idx, minlength=5) / 100_000
    assert np.all(np.abs(freq - 0.2) < 0.01)


def test_pool_query_single_and_widening(caplog):
    pool = make_pool([0.1, 0.5, 0.9])
    rng = np.random.default_rng(0)
    assert all(pool_query_vicinity(pool, 0.5, 0.01, rng)[0] == 1 for _ in range(50))
    with caplog.at_level(logging.WARNING, logger="dualnda.negatives"):
        i, w = pool_query_vicinity(pool, 0.65, 0.05, rng)
    # 0.05 -> 0.1 -> 0.2 reaches 0.5 (distance 0.15) after two doublings
    assert w == 2 and abs(pool.labels[i] - 0.65) <= 4 * 0.05
    assert "widened" in caplog.text
    i, w = pool_query_vicinity(pool, 0.3, 1e-6, rng, max_doublings=1)
    assert w == 1 and pool.labels[i] in (0.1, 0.5)
    with pytest.raises(ConfigError):
        empty = NegativePool(np.zeros((0, 1, 2, 2)), np.zeros(0), np.zeros(0), np.zeros(0),
                             np.zeros(0, np.int64), "continuous", {}, {})
        pool_query_many(empty, [0.5], 0.1, rng)


@pytest.mark.parametrize("grid", [2, 4])
def test_jigsaw(grid):
    rng = np.random.default_rng(0)
    img = rng.standard_normal((3, 8, 8)).astype(np.float32)
    for _ in range(2000 if grid == 2 else 200):
        out, perm = jigsaw_negative(img, grid, rng)
        assert not np.array_equal(perm, np.arange(grid * grid))
    assert np.array_equal(np.sort(out.ravel()), np.sort(img.ravel()))
    assert np.array_equal(invert_jigsaw(out, perm, grid), img)
    with pytest.raises(DomainError):
        jigsaw_negative(np.zeros((1, 6, 6)), 4, rng)
    with pytest.raises(DomainError):
        jigsaw_negative(img, 3, rng)


def test_jigsaw_never_identity_many_draws():
    rng = np.random.default_rng(1)
    img = np.arange(16, dtype=np.float32).reshape(1, 4, 4)
    for _ in range(10_000):
        out, _ = jigsaw_negative(img, 2, rng)
        assert not np.array_equal(out, img)
