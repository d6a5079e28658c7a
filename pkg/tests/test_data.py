import io

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from fedsps.data import (
    Dataset,
    format_libsvm,
    load_libsvm,
    parse_libsvm,
    partition_iid,
    partition_noniid_two_class,
    synth_binary_libsvm,
    synth_classification,
    synth_regression,
)
from fedsps.errors import InsufficientData, ParseError, PartitionInfeasible
from fedsps.problems import compute_heterogeneity, make_problem


def test_parse_small_example():
    ds = parse_libsvm("+1 1:0.5 3:2.0\n-1 2:1.0")
    assert ds.n_samples == 2 and ds.n_features == 3
    assert list(ds.labels) == [1, 0]
    assert ds.label_values == (-1.0, 1.0)
    np.testing.assert_array_equal(ds.dense(), [[0.5, 0, 2.0], [0, 1.0, 0]])


def test_parse_error_reports_line():
    with pytest.raises(ParseError, match="line 1"):
        parse_libsvm("1 2:abc\n")
    with pytest.raises(ParseError, match="line 2"):
        parse_libsvm("1 1:1\n1 3:1 2:1\n")


@pytest.mark.parametrize("text", ["1 0:1\n", "1 1:nan\n", "x 1:1\n", "1 1\n", ""])
def test_parse_rejects_malformed(text):
    with pytest.raises(ParseError):
        parse_libsvm(text)


def test_parse_ignores_comments_and_blank_lines():
    ds = parse_libsvm(io.StringIO("# header\n\n1 1:2 # trailing\n0 2:1\n"))
    assert ds.n_samples == 2


def test_load_from_path(tmp_path):
    path = tmp_path / "d.svm"
    path.write_text("1 1:1\n2 2:1\n3 1:1 2:1\n")
    ds = load_libsvm(path)
    assert ds.n_classes == 3


row = st.dictionaries(st.integers(1, 12), st.floats(-1e6, 1e6, allow_nan=False).filter(lambda v: v != 0), max_size=6)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.sampled_from([-1, 1, 3]), row), min_size=1, max_size=20))
def test_round_trip(rows):
    text = "".join(f"{lab} " + " ".join(f"{k}:{v!r}" for k, v in sorted(r.items())) + "\n" for lab, r in rows)
    if all(not r for _, r in rows):
        return
    ds = parse_libsvm(text)
    again = parse_libsvm(format_libsvm(ds))
    assert again.same_as(ds)


def _classes(m, k, seed=0):
    labels = np.arange(m) % k
    return Dataset(sp.csr_matrix(np.ones((m, 1))), labels, 1, k)


def test_iid_split_sizes_and_determinism():
    ds = _classes(100, 2)
    a = partition_iid(ds, 10, seed=4)
    b = partition_iid(ds, 10, seed=4)
    assert [s.size for s in a] == [10] * 10
    assert all(np.array_equal(x.indices, y.indices) for x, y in zip(a, b))
    assert [x.rng_seed for x in a] == [y.rng_seed for y in b]


@settings(max_examples=50, deadline=None)
@given(m=st.integers(1, 300), n=st.integers(1, 40), seed=st.integers(0, 2**32))
def test_iid_union_is_disjoint_cover(m, n, seed):
    ds = _classes(m, 1)
    if n > m:
        with pytest.raises(InsufficientData):
            partition_iid(ds, n, seed)
        return
    shards = partition_iid(ds, n, seed)
    allidx = np.concatenate([s.indices for s in shards])
    assert sorted(allidx.tolist()) == list(range(m))
    assert max(s.size for s in shards) - min(s.size for s in shards) <= 1


def test_two_class_mnist_like_pairs():
    ds = _classes(1000, 10)
    shards = partition_noniid_two_class(ds, 10, seed=0)
    pairs = [tuple(np.unique(ds.labels[s.indices])) for s in shards]
    assert pairs == [(0, 1), (2, 3), (4, 5), (6, 7), (8, 9)] * 2
    assert len({s.size for s in shards}) == 1


def test_two_class_binary_gives_balanced_halves():
    ds = _classes(200, 2)
    for s in partition_noniid_two_class(ds, 10, seed=1):
        counts = np.bincount(ds.labels[s.indices], minlength=2)
        assert counts[0] == counts[1] > 0


@settings(max_examples=50, deadline=None)
@given(k=st.integers(2, 12), n=st.integers(1, 15), seed=st.integers(0, 1000))
def test_two_class_histograms(k, n, seed):
    ds = _classes(600, k)
    shards = partition_noniid_two_class(ds, n, seed)
    seen = set()
    for s in shards:
        assert np.count_nonzero(np.bincount(ds.labels[s.indices], minlength=k)) <= 2
        assert seen.isdisjoint(s.indices.tolist())
        seen.update(s.indices.tolist())


def test_two_class_infeasible_reports_counts():
    ds = _classes(10, 5)
    with pytest.raises(PartitionInfeasible, match="counts"):
        partition_noniid_two_class(ds, 20, seed=0)
    with pytest.raises(PartitionInfeasible):
        partition_noniid_two_class(_classes(10, 1), 2, seed=0)


def test_synth_regression_interpolates():
    ds, shards = synth_regression(50, 80, 5, seed=2)
    rep = compute_heterogeneity(make_problem("least_squares", ds), shards)
    assert rep.sigma_f_sq == pytest.approx(0.0, abs=1e-12)


def test_synth_regression_shift_creates_heterogeneity():
    # needs m > d: an over-parameterized model fits any shift exactly
    ds, shards = synth_regression(50, 5, 5, heterogeneity=1.0, seed=2)
    rep = compute_heterogeneity(make_problem("least_squares", ds), shards)
    assert rep.sigma_f_sq > 1e-3


def test_synth_regression_reproducible():
    a, sa = synth_regression(40, 10, 4, noise=0.1, seed=9)
    b, sb = synth_regression(40, 10, 4, noise=0.1, seed=9)
    assert a.same_as(b)
    assert np.array_equal(a.targets, b.targets)
    assert [s.rng_seed for s in sa] == [s.rng_seed for s in sb]


def test_orthogonal_design_rows():
    ds, _ = synth_regression(20, 50, 4, seed=0, design="orthogonal", scale=2.0)
    A = ds.dense()
    np.testing.assert_allclose(A @ A.T, 2.0 * np.eye(20), atol=1e-12)
    with pytest.raises(ValueError):
        synth_regression(60, 50, 4, design="orthogonal")


def test_curvature_spread_scales_clients():
    ds, shards = synth_regression(100, 200, 5, seed=0, design="orthogonal", curvature_spread=16.0)
    norms = [np.einsum("ij,ij->i", ds.dense()[s.indices], ds.dense()[s.indices]).mean() for s in shards]
    assert norms[-1] / norms[0] == pytest.approx(16.0)


def test_synthetic_classification_shapes():
    ds = synth_classification(300, 6, n_classes=4, seed=1, density=0.5)
    assert ds.n_classes == 4 and ds.features.nnz < 300 * 6


def test_mushrooms_like_generator():
    ds = synth_binary_libsvm(m=500, seed=3)
    assert ds.n_features == 112 and ds.n_classes == 2
    assert np.all(np.diff(ds.features.indptr) == 22)
    assert parse_libsvm(format_libsvm(ds)).same_as(ds)
