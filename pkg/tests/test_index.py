import datetime as dt
import struct

import numpy as np
import pytest
from scipy import sparse

from bugdup.embed import DimensionMismatchError, EmbeddingVector
from bugdup.index import (
    DateWindow,
    IndexFormatError,
    build_index,
    from_day,
    index_from_matrix,
    load_index,
    save_index,
    to_day,
)
from oracles import exhaustive_top_n

D0 = dt.date(2020, 1, 1)


def dense_index(rows, ids=None, dates=None):
    ids = ids or list(range(1, len(rows) + 1))
    dates = dates or [D0] * len(rows)
    return build_index((i, EmbeddingVector.dense(r), d) for i, r, d in zip(ids, rows, dates))


def test_build_small_index():
    index = dense_index([[1, 0], [0, 1], [1, 1]])
    assert len(index) == 3 and index.dim == 2 and index.kind == "dense"


def test_build_rejects_duplicate_ids_and_mixed_dims():
    with pytest.raises(ValueError, match="duplicate"):
        dense_index([[1, 0], [0, 1]], ids=[7, 7])
    with pytest.raises(DimensionMismatchError):
        build_index([(1, EmbeddingVector.dense([1, 0]), D0), (2, EmbeddingVector.dense([1, 0, 0]), D0)])
    with pytest.raises(ValueError):
        build_index([])


def test_exact_match_query():
    index = dense_index([[1, 0], [0, 1]])
    assert index.query(EmbeddingVector.dense([1, 0]), 1).ranked == [(1, 1.0)]


def test_hand_computed_dot_products():
    index = dense_index([[1, 0], [0.6, 0.8], [0, 1]])
    result = index.query(EmbeddingVector.dense([1, 0]), 2)
    assert result.ids == [1, 2]
    assert result.scores == pytest.approx([1.0, 0.6], abs=1e-7)


def test_window_excludes_old_and_future_candidates():
    dates = [dt.date(2020, 1, 1), dt.date(2020, 1, 6), dt.date(2020, 1, 10), dt.date(2020, 1, 11)]
    index = dense_index([[1, 0]] * 4, dates=dates)
    window = DateWindow(dt.date(2020, 1, 10), 5)
    assert index.query(EmbeddingVector.dense([1, 0]), 10, window).ids == [2, 3]
    assert not window.contains(dt.date(2020, 1, 1))


def test_window_must_be_positive():
    with pytest.raises(ValueError):
        DateWindow(D0, 0)


def test_empty_candidate_set_gives_empty_result():
    index = dense_index([[1, 0]], dates=[dt.date(2021, 1, 1)])
    assert index.query(EmbeddingVector.dense([1, 0]), 3, DateWindow(D0, 30)).ranked == []


def test_empty_probe_scores_zero_in_id_order():
    index = dense_index([[1, 0], [0, 1], [1, 1]], ids=[30, 10, 20])
    result = index.query(EmbeddingVector.sparse([], [], 2), 3)
    assert result.ranked == [(10, 0.0), (20, 0.0), (30, 0.0)]


def test_probe_dimension_mismatch():
    with pytest.raises(DimensionMismatchError):
        dense_index([[1, 0]]).query(EmbeddingVector.dense([1, 0, 0]), 1)


def test_n_larger_than_index_returns_everything():
    assert len(dense_index([[1, 0], [0, 1]]).query(EmbeddingVector.dense([1, 1]), 50)) == 2


def test_day_conversion():
    assert to_day(dt.date(1970, 1, 1)) == 0
    assert from_day(to_day(dt.date(2031, 7, 4))) == dt.date(2031, 7, 4)


# -- randomized oracle checks --------------------------------------------------------

def random_rows(rng, size, dim, kind):
    rows = rng.normal(size=(size, dim))
    if kind == "sparse":
        rows[rng.random(size=(size, dim)) < 0.6] = 0.0
    # exact duplicates and empty rows exercise ties
    dup = rng.random(size) < 0.15
    rows[dup] = rows[rng.integers(0, size, size=int(dup.sum()))]
    rows[rng.random(size) < 0.03] = 0.0
    return rows


def make_random_index(rng, size, dim, kind):
    rows = random_rows(rng, size, dim, kind)
    ids = rng.choice(np.arange(1, 10 * size + 1), size=size, replace=False)
    days = rng.integers(0, 400, size=size)
    if kind == "sparse":
        index = index_from_matrix(ids, sparse.csr_matrix(rows), [from_day(d) for d in days])
    else:
        index = index_from_matrix(ids, rows, [from_day(d) for d in days])
    stored = rows.astype(np.float32).astype(np.float64)
    return index, ids, stored, days


def probe_vector(rng, dim, kind, stored):
    choice = rng.random()
    if choice < 0.1:
        vec = np.zeros(dim)
    elif choice < 0.3:
        vec = stored[rng.integers(0, len(stored))]
    else:
        vec = rng.normal(size=dim)
        if kind == "sparse":
            vec[rng.random(dim) < 0.5] = 0.0
    if kind == "sparse":
        nz = np.flatnonzero(vec)
        return EmbeddingVector.sparse(nz, vec[nz], dim)
    return EmbeddingVector.dense(vec)


@pytest.mark.parametrize("kind", ["dense", "sparse"])
def test_query_matches_exhaustive_oracle(kind):
    rng = np.random.default_rng(11 if kind == "dense" else 12)
    for _ in range(150):
        size, dim = int(rng.integers(1, 200)), int(rng.integers(1, 33))
        index, ids, stored, days = make_random_index(rng, size, dim, kind)
        probe = probe_vector(rng, dim, kind, stored)
        n = int(rng.integers(1, size + 3))
        expected = exhaustive_top_n(ids, stored, probe.to_dense(), n)
        got = index.query(probe, n)
        assert got.ids == [i for i, _ in expected]
        assert got.scores == pytest.approx([s for _, s in expected], abs=1e-12)


def test_results_are_prefix_monotone_and_sorted():
    rng = np.random.default_rng(5)
    index, ids, stored, _ = make_random_index(rng, 120, 8, "dense")
    probe = probe_vector(rng, 8, "dense", stored)
    previous = []
    for n in range(1, 125):
        result = index.query(probe, n)
        assert result.ids[: len(previous)] == previous
        scores = result.scores
        assert all(-1 <= s <= 1 for s in scores)
        assert all(a > b or (a == b and i < j) for (i, a), (j, b) in zip(result.ranked, result.ranked[1:]))
        previous = result.ids


def test_window_soundness_and_completeness():
    rng = np.random.default_rng(8)
    for _ in range(100):
        index, ids, stored, days = make_random_index(rng, int(rng.integers(5, 150)), 6, "dense")
        probe = probe_vector(rng, 6, "dense", stored)
        window = DateWindow(from_day(int(rng.integers(0, 450))), int(rng.integers(1, 200)))
        n = int(rng.integers(1, 20))
        result = index.query(probe, n, window)
        allowed = [window.contains(from_day(d)) for d in days]
        in_window = {int(i) for i, ok in zip(ids, allowed) if ok}
        assert set(result.ids) <= in_window
        assert set(index.candidates(window).tolist()) == in_window
        assert set(index.candidates(window).tolist()) <= set(index.candidates(None).tolist())
        expected = exhaustive_top_n(ids, stored, probe.to_dense(), n, allowed)
        assert result.ids == [i for i, _ in expected]


def test_batch_and_single_queries_agree():
    rng = np.random.default_rng(2)
    for kind in ("dense", "sparse"):
        index, _, stored, _ = make_random_index(rng, 300, 16, kind)
        probes = [probe_vector(rng, 16, kind, stored) for _ in range(150)]
        batch = index.query_batch(probes, 7)
        for got, probe in zip(batch, probes):
            single = index.query(probe, 7)
            assert got.ids == single.ids
            assert got.scores == pytest.approx(single.scores, abs=1e-12)


def test_parallel_rows_tie_by_id():
    index = dense_index([[3.0], [0.1], [7.0], [-2.0]], ids=[9, 4, 6, 1])
    assert index.query(EmbeddingVector.dense([1.0]), 4).ranked == [(4, 1.0), (6, 1.0), (9, 1.0), (1, -1.0)]


def test_sparse_probe_on_dense_index_and_vice_versa():
    dense = dense_index([[1, 0, 0], [0, 1, 0]])
    assert dense.query(EmbeddingVector.sparse([1], [2.0], 3), 1).ids == [2]
    sp = build_index([(1, EmbeddingVector.sparse([0], [1.0], 3), D0), (2, EmbeddingVector.sparse([2], [1.0], 3), D0)])
    assert sp.kind == "sparse"
    assert sp.query(EmbeddingVector.dense([0, 0, 1]), 1).ids == [2]


# -- persistence -----------------------------------------------------------------------

@pytest.mark.parametrize("kind", ["dense", "sparse"])
def test_save_load_roundtrip(tmp_path, kind):
    rng = np.random.default_rng(4)
    index, _, stored, _ = make_random_index(rng, 60, 12, kind)
    path = tmp_path / "x.dsix"
    save_index(index, path)
    loaded = load_index(path)
    assert loaded.kind == kind and loaded.dim == 12
    assert np.array_equal(loaded.ids, index.ids) and np.array_equal(loaded.days, index.days)
    for _ in range(10):
        probe = probe_vector(rng, 12, kind, stored)
        window = DateWindow(from_day(int(rng.integers(0, 450))), 120)
        for w in (None, window):
            a, b = index.query(probe, 15, w), loaded.query(probe, 15, w)
            assert a.ids == b.ids
            assert np.max(np.abs(np.subtract(a.scores, b.scores)), initial=0) <= 1e-12


def test_file_layout_header(tmp_path):
    index = dense_index([[3, 4]], ids=[42], dates=[dt.date(1970, 1, 11)])
    path = tmp_path / "x.dsix"
    save_index(index, path)
    data = path.read_bytes()
    assert data[:4] == b"DSIX"
    assert struct.unpack_from("<HBIQ", data, 4) == (1, 1, 2, 1)
    entry_id, day = struct.unpack_from("<Qi", data, 19)
    assert (entry_id, day) == (42, 10)
    assert np.frombuffer(data, "<f4", 2, 31).tolist() == pytest.approx([0.6, 0.8])
    assert len(data) == 19 + 8 + 4 + 2 * 4


def test_sparse_layout(tmp_path):
    index = build_index([(5, EmbeddingVector.sparse([1, 3], [1.0, 1.0], 4), D0)])
    path = tmp_path / "x.dsix"
    save_index(index, path)
    data = path.read_bytes()
    assert data[6] == 0
    assert struct.unpack_from("<QiI", data, 19) == (5, to_day(D0), 2)
    pairs = struct.unpack_from("<IfIf", data, 35)
    assert pairs[0] == 1 and pairs[2] == 3 and pairs[1] == pytest.approx(2 ** -0.5)


def test_load_truncated_file(tmp_path):
    index = dense_index([[1, 0], [0, 1]])
    path = tmp_path / "x.dsix"
    save_index(index, path)
    path.write_bytes(path.read_bytes()[:-3])
    with pytest.raises(IndexFormatError):
        load_index(path)
    path.write_bytes(b"DSI")
    with pytest.raises(IndexFormatError):
        load_index(path)


def test_load_truncated_sparse_file(tmp_path):
    index = build_index([(5, EmbeddingVector.sparse([1, 3], [1.0, 1.0], 4), D0)])
    path = tmp_path / "x.dsix"
    save_index(index, path)
    path.write_bytes(path.read_bytes()[:-1])
    with pytest.raises(IndexFormatError, match="truncated"):
        load_index(path)


def test_load_newer_version(tmp_path):
    path = tmp_path / "x.dsix"
    save_index(dense_index([[1, 0]]), path)
    data = bytearray(path.read_bytes())
    struct.pack_into("<H", data, 4, 2)
    path.write_bytes(bytes(data))
    with pytest.raises(IndexFormatError, match="version 2"):
        load_index(path)


def test_load_bad_magic(tmp_path):
    path = tmp_path / "x.dsix"
    path.write_bytes(b"NOPE" + bytes(40))
    with pytest.raises(IndexFormatError, match="not an index"):
        load_index(path)


def test_cosine_symmetry():
    rng = np.random.default_rng(21)
    for kind in ("dense", "sparse"):
        index, ids, _, _ = make_random_index(rng, 150, 24, kind)
        probes = [index.vector(int(i)) for i in ids]
        scores = index.scores(probes)
        assert np.max(np.abs(scores - scores.T)) <= 1e-12
