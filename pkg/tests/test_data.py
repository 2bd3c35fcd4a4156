import gzip

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from cocoa.data import (FEATURES_AS_COLUMNS, SAMPLES_AS_COLUMNS, ColumnMatrix, ContractError, Dataset,
                        ParseError, Partition, block_matvec, load_libsvm, normalize_columns, parse_libsvm,
                        partition_balanced, write_libsvm)

TEXT = "1 1:0.5 3:-1.2\n-1 2:2.0"


def test_parse_samples_as_columns():
    ds = parse_libsvm(TEXT, SAMPLES_AS_COLUMNS)
    assert ds.matrix.shape == (3, 2)
    assert ds.matrix.columns[0] == [(0, 0.5), (2, -1.2)]
    np.testing.assert_array_equal(ds.labels, [1, -1])


def test_parse_features_as_columns():
    ds = parse_libsvm(TEXT, FEATURES_AS_COLUMNS)
    assert ds.matrix.shape == (2, 3)
    assert ds.matrix.columns[1] == [(1, 2.0)]
    assert ds.n_samples == 2 and ds.n_features == 3


@pytest.mark.parametrize("text, line", [
    ("1 2:abc", 1),
    ("1 1:1\n1 3:1 2:1", 2),
    ("1 1:1\n1 1:1 1:2", 2),
    ("1 0:1", 1),
    ("x 1:1", 1),
    ("1 1:1\n\n-1 2", 3),
])
def test_parse_errors_carry_line(text, line):
    with pytest.raises(ParseError) as err:
        parse_libsvm(text)
    assert err.value.line == line


def test_parse_empty_input():
    with pytest.raises(ParseError):
        parse_libsvm("")
    with pytest.raises(ParseError):
        parse_libsvm("# only a comment\n\n")


def test_parse_dimension_override():
    ds = parse_libsvm("1 2:1", n_features=5)
    assert ds.matrix.n_rows == 5
    with pytest.raises(ParseError):
        parse_libsvm("1 6:1", n_features=5)


def test_parse_drops_explicit_zeros():
    ds = parse_libsvm("1 1:0 2:3")
    assert ds.matrix.columns[0] == [(1, 3.0)]


def test_load_roundtrip_plain_and_gzip(tmp_path, rng):
    X = sp.random(7, 5, density=0.5, random_state=1, format="csr")
    ds = Dataset(ColumnMatrix.from_scipy(X.T.tocsc()), rng.choice([-1.0, 1.0], 7), SAMPLES_AS_COLUMNS)
    p = tmp_path / "d.svm"
    write_libsvm(ds, p)
    back = load_libsvm(p, n_features=5)
    assert back.matrix == ds.matrix
    np.testing.assert_array_equal(back.labels, ds.labels)
    gz = tmp_path / "d.svm.gz"
    with gzip.open(gz, "wt") as fh:
        fh.write(p.read_text())
    assert load_libsvm(gz, n_features=5).matrix == ds.matrix


lines = st.lists(
    st.tuples(st.sampled_from([-1.0, 1.0, 2.5]),
              st.dictionaries(st.integers(1, 12), st.floats(-5, 5, allow_nan=False).filter(lambda v: v != 0),
                              max_size=6)),
    min_size=1, max_size=8)


def _render(rows):
    return "\n".join(f"{lab} " + " ".join(f"{k}:{v!r}" for k, v in sorted(feats.items())) for lab, feats in rows)


@given(lines)
@settings(max_examples=50, deadline=None)
def test_orientation_is_transpose(rows):
    text = _render(rows)
    a = parse_libsvm(text, SAMPLES_AS_COLUMNS)
    b = parse_libsvm(text, FEATURES_AS_COLUMNS)
    np.testing.assert_array_equal(a.matrix.to_dense().T, b.matrix.to_dense())
    assert b.matrix == a.matrix.transpose()


def test_column_invariants():
    with pytest.raises(ContractError):
        ColumnMatrix.from_columns(2, [[(1, 1.0), (0, 2.0)]])
    with pytest.raises(ContractError):
        ColumnMatrix.from_columns(2, [[(2, 1.0)]])
    m = ColumnMatrix.from_columns(3, [[(0, 1.0), (1, 0.0)]])
    assert m.columns[0] == [(0, 1.0)]


def test_normalize_examples():
    m = ColumnMatrix.from_dense(np.array([[3.0, 0.1, 0.0], [4.0, 0.0, 0.0]]))
    scaled, f = normalize_columns(m)
    np.testing.assert_allclose(scaled.to_dense()[:, 0], [0.6, 0.8])
    np.testing.assert_array_equal(scaled.to_dense()[:, 1:], m.to_dense()[:, 1:])
    np.testing.assert_array_equal(f, [5.0, 1.0, 1.0])


@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 1000))
@settings(max_examples=30, deadline=None)
def test_normalized_norms_bounded(r, c, seed):
    A = np.random.default_rng(seed).standard_normal((r, c)) * 3
    scaled, f = normalize_columns(ColumnMatrix.from_dense(A))
    assert np.all(np.sqrt(scaled.column_norms_sq()) <= 1 + 1e-12)
    np.testing.assert_allclose(scaled.to_dense() * f, A, rtol=1e-14)


@pytest.mark.parametrize("n, K, sizes", [(4, 2, [2, 2]), (5, 2, [2, 3])])
def test_partition_sizes(n, K, sizes):
    assert sorted(partition_balanced(n, K, 0).block_sizes) == sizes


@pytest.mark.parametrize("n, K", [(3, 4), (3, 0)])
def test_partition_bad_k(n, K):
    with pytest.raises(ContractError):
        partition_balanced(n, K, 0)


@given(st.integers(1, 60), st.integers(1, 60), st.integers(0, 2**31))
@settings(max_examples=60, deadline=None)
def test_partition_is_balanced_bijection(n, K, seed):
    K = min(K, n)
    p = partition_balanced(n, K, seed)
    allcols = np.concatenate(p.blocks())
    assert sorted(allcols.tolist()) == list(range(n))
    assert p.block_sizes.max() - p.block_sizes.min() <= 1
    q = partition_balanced(n, K, seed)
    np.testing.assert_array_equal(p.assignment, q.assignment)


def test_partition_from_blocks_rejects_overlap():
    with pytest.raises(ContractError):
        Partition.from_blocks([[0, 1], [1]], 2)
    with pytest.raises(ContractError):
        Partition.from_blocks([[0]], 2)


def test_block_matvec_examples():
    I = ColumnMatrix.from_dense(np.eye(2))
    part = Partition.from_blocks([[0], [1]], 2)
    np.testing.assert_array_equal(block_matvec(I, part, 0, np.zeros(2)), [0, 0])
    np.testing.assert_array_equal(block_matvec(I, part, 0, np.array([3.0, 0.0])), [3, 0])
    with pytest.raises(ContractError):
        block_matvec(I, part, 0, np.array([0.0, 1.0]))


@given(st.integers(0, 10_000), st.integers(1, 4))
@settings(max_examples=40, deadline=None)
def test_block_sum_matches_dense(seed, K):
    rng = np.random.default_rng(seed)
    dense = sp.random(5, 8, density=0.4, random_state=seed).toarray()
    m = ColumnMatrix.from_dense(dense)
    part = partition_balanced(8, K, seed)
    alpha = rng.standard_normal(8)
    total = np.zeros(5)
    for k in range(K):
        a = np.where(part.assignment == k, alpha, 0.0)
        total += block_matvec(m, part, k, a)
    np.testing.assert_allclose(total, dense @ alpha, atol=1e-12)


def test_dataset_label_checks():
    m = ColumnMatrix.from_dense(np.eye(2))
    with pytest.raises(ValueError):
        Dataset(m, [1.0, np.nan])
    ds = Dataset(m, [1.0, 0.5])
    with pytest.raises(ValueError):
        ds.check_classification()
