import math

import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from repunc import lametrics as lm
from repunc.datamodel import MultiLabelSet, SegMaskSet
from repunc.errors import ValidationError
from repunc.retrieval import NeighborIndex, nearest_neighbors
from repunc.synth import oracle_la

HD_HALF = math.sqrt(0.5 * ((math.sqrt(0.5) - 1) ** 2 + 0.5))


@pytest.mark.parametrize(
    "fn,c,cs,want",
    [
        (lm.one_la, [1, 1, 0], [0, 1, 1], 1),
        (lm.one_la, [1, 0, 0], [0, 1, 1], 0),
        (lm.one_la, [1, 0, 1], [1, 0, 1], 1),
        (lm.all_la, [1, 1, 0], [1, 1, 1], 1),
        (lm.all_la, [1, 1, 0], [1, 0, 1], 0),
        (lm.all_la, [0, 1, 1], [0, 1, 1], 1),
        (lm.pct_la, [1, 1, 0], [1, 0, 1], 0.5),
        (lm.pct_la, [1, 1, 1], [1, 1, 1], 1.0),
        (lm.pct_la, [1, 1, 0], [0, 0, 1], 0.0),
    ],
)
def test_multilabel_hand_values(fn, c, cs, want):
    assert fn(c, cs) == want


@pytest.mark.parametrize("fn", [lm.one_la, lm.all_la, lm.pct_la])
def test_empty_class_vector_rejected(fn):
    with pytest.raises(ValidationError, match="empty class vector"):
        fn([0, 0, 0], [1, 0, 0])


def test_asymmetry_witness():
    assert lm.all_la([1, 0], [1, 1]) == 1 and lm.all_la([1, 1], [1, 0]) == 0
    assert lm.pct_la([1, 0], [1, 1]) == 1.0 and lm.pct_la([1, 1], [1, 0]) == 0.5


def test_hellinger_values():
    assert lm.hellinger([0.2, 0.3, 0.5], [0.2, 0.3, 0.5]) == 0.0
    assert lm.hellinger([1, 0], [0, 1]) == pytest.approx(1.0, abs=1e-15)
    assert lm.hellinger([0.5, 0.5], [1, 0]) == pytest.approx(HD_HALF, abs=1e-15)
    assert lm.hellinger([0.5, 0.5], [1, 0]) == pytest.approx(0.5411961, abs=1e-6)


@pytest.mark.parametrize("a,b", [([0.5, 0.6], [1, 0]), ([-0.1, 1.1], [1, 0]), ([0.5, 0.5], [0.5, 0.5, 0])])
def test_hellinger_rejects_bad_input(a, b):
    with pytest.raises(ValidationError):
        lm.hellinger(a, b)


simplex = st.integers(2, 8).flatmap(
    lambda k: st.tuples(*[hnp.arrays(np.float64, k, elements=st.floats(0, 1)) for _ in range(2)])
)


@given(simplex)
def test_hellinger_symmetric_and_bounded(ab):
    a, b = ab
    assume(a.sum() > 0 and b.sum() > 0)
    a, b = a / a.sum(), b / b.sum()
    h = lm.hellinger(a, b)
    assert h == lm.hellinger(b, a)
    assert 0.0 <= h <= 1.0


def _mask(rows):
    return np.array(rows)


def test_seg_all():
    M = _mask([[0, 3], [3, 0]])
    assert lm.seg_all_la(M, _mask([[0, 3], [5, 0]])) == 1
    assert lm.seg_all_la(M, _mask([[0, 0], [0, 0]])) == 0
    assert lm.seg_all_la(M, M) == 1


def test_pd_values():
    half = _mask([[0, 1], [0, 1]])
    zeros = np.zeros((2, 2), dtype=int)
    assert lm.pd_la(half, half) == 1.0
    assert lm.pd_la(zeros, np.ones((2, 2), dtype=int)) == pytest.approx(0.0, abs=1e-15)
    assert lm.pd_la(half, zeros) == pytest.approx(1 - HD_HALF, abs=1e-15)
    assert lm.pd_la(half, zeros) == pytest.approx(0.4588039, abs=1e-6)


def test_patches_quadrant_example():
    M = np.zeros((4, 4), dtype=int)
    M[:2, :2] = 1
    Ms = M.copy()
    Ms[:2, :2] = [[2, 2], [2, 1]]
    np.testing.assert_array_equal(lm.majority_matrix(M, 2), [[1, 0], [0, 0]])
    np.testing.assert_array_equal(lm.majority_matrix(Ms, 2), [[2, 0], [0, 0]])
    assert lm.patches_la(M, Ms, 2) == 0
    assert lm.patches_la(M, M, 2) == 1


def test_majority_tie_goes_to_smallest_class():
    assert lm.majority_matrix(np.array([[3, 1], [1, 3]]), 1)[0, 0] == 1


def test_cell_edges_absorb_remainder():
    np.testing.assert_array_equal(lm.cell_edges(10, 3), [0, 3, 6, 10])
    with pytest.raises(ValidationError):
        lm.cell_edges(2, 3)


def test_patches_too_large():
    with pytest.raises(ValidationError):
        lm.patches_la(np.zeros((2, 5), dtype=int), np.zeros((2, 5), dtype=int), 3)


def test_patches_pd_disjoint_is_zero():
    M = np.zeros((6, 6), dtype=int)
    assert lm.patches_pd_la(M, M + 1, 3) == pytest.approx(0.0, abs=1e-12)
    assert lm.patches_pd_la(M, M, 3) == 1.0


seg_pair = st.tuples(st.integers(1, 9), st.integers(1, 9), st.integers(2, 5)).flatmap(
    lambda s: st.tuples(
        hnp.arrays(np.int64, s[:2], elements=st.integers(0, s[2] - 1)),
        hnp.arrays(np.int64, s[:2], elements=st.integers(0, s[2] - 1)),
        st.permutations(range(s[2])),
    )
)


@given(seg_pair)
def test_p1_collapse(pair):
    M, Ms, _ = pair
    assert lm.patches_pd_la(M, Ms, 1) == pytest.approx(lm.pd_la(M, Ms), abs=1e-12)
    assert lm.patches_la(M, Ms, 1) == int(lm.majority_matrix(M, 1)[0, 0] == lm.majority_matrix(Ms, 1)[0, 0])


def _has_majority_tie(M, p, K):
    counts = lm.cell_counts(M, p, K)
    top = counts.max(axis=-1, keepdims=True)
    return bool(((counts == top).sum(axis=-1) > 1).any())


@given(seg_pair)
def test_segmentation_symmetry_range_relabeling(pair):
    M, Ms, perm = pair
    K = len(perm)
    p = min(M.shape)
    p = min(p, 3)
    assert lm.pd_la(M, Ms) == pytest.approx(lm.pd_la(Ms, M), abs=1e-15)
    assert lm.patches_pd_la(M, Ms, p) == pytest.approx(lm.patches_pd_la(Ms, M, p), abs=1e-15)
    for v in (lm.pd_la(M, Ms), lm.patches_pd_la(M, Ms, p)):
        assert 0.0 <= v <= 1.0
    assert lm.seg_all_la(M, Ms) in (0, 1) and lm.patches_la(M, Ms, p) in (0, 1)

    pm = np.asarray(perm)
    R, Rs = pm[M], pm[Ms]
    assert lm.seg_all_la(R, Rs) == lm.seg_all_la(M, Ms)
    assert lm.pd_la(R, Rs) == pytest.approx(lm.pd_la(M, Ms), abs=1e-12)
    assert lm.patches_pd_la(R, Rs, p) == pytest.approx(lm.patches_pd_la(M, Ms, p), abs=1e-12)
    if not (_has_majority_tie(M, p, K) or _has_majority_tie(Ms, p, K)):
        assert lm.patches_la(R, Rs, p) == lm.patches_la(M, Ms, p)


@given(st.integers(2, 10).flatmap(lambda k: st.tuples(
    hnp.arrays(np.int64, k, elements=st.integers(0, 1)),
    hnp.arrays(np.int64, k, elements=st.integers(0, 1)),
    st.permutations(range(k)),
)))
def test_multilabel_relabeling(triple):
    c, cs, perm = triple
    assume(c.sum() > 0)
    pm = list(perm)
    for fn in (lm.one_la, lm.all_la, lm.pct_la):
        assert fn(c[pm], cs[pm]) == fn(c, cs)


def test_dataset_la_mean_of_three():
    labels = MultiLabelSet([[1, 0, 0], [0, 1, 0], [1, 0, 1]])
    nb = NeighborIndex(np.array([2, 0, 0]), np.zeros(3), "cosine")
    v = lm.dataset_la(labels, nb, "one")
    np.testing.assert_array_equal(v.values, [1, 0, 1])
    assert v.mean == pytest.approx(2 / 3, abs=1e-12)
    assert round(v.mean, 4) == 0.6667


def test_dataset_la_identical_labels():
    rng = np.random.default_rng(0)
    nb = nearest_neighbors(rng.standard_normal((12, 3)))
    ml = MultiLabelSet(np.tile([1, 0, 1, 1], (12, 1)))
    sm = SegMaskSet(np.tile(rng.integers(0, 4, (7, 7)), (12, 1, 1)), 4)
    for labels in (ml, sm):
        for kind in lm.kinds_for(labels):
            assert lm.dataset_la(labels, nb, kind).mean == 1.0


def test_dataset_la_exclusion():
    nb = NeighborIndex(np.array([1, 0, 1, 2]), np.zeros(4), "cosine")
    v = lm.dataset_la(MultiLabelSet([[1, 0], [0, 0], [1, 1], [1, 0]]), nb, "pct")
    assert v.excluded == 1 and np.isnan(v.values[1])
    # pct values: 0 (nn empty), excluded, 0 (nn empty), 1
    assert v.mean == pytest.approx(1 / 3)
    with pytest.raises(ValidationError, match="meaningless"):
        lm.dataset_la(MultiLabelSet([[1, 0], [0, 0], [0, 0], [0, 0]]), nb, "pct")


def test_dataset_la_kind_mismatch():
    nb = NeighborIndex(np.array([1, 0]), np.zeros(2), "cosine")
    with pytest.raises(ValidationError, match="does not apply"):
        lm.dataset_la(MultiLabelSet([[1, 0], [0, 1]]), nb, "pd")


def test_ordering_law_random_pairs():
    rng = np.random.default_rng(1)
    for _ in range(2000):
        k = int(rng.integers(2, 9))
        c, cs = rng.integers(0, 2, k), rng.integers(0, 2, k)
        if c.sum() == 0:
            continue
        o, pc, a = lm.one_la(c, cs), lm.pct_la(c, cs), lm.all_la(c, cs)
        assert o >= pc >= a
        assert (a == 0 or pc == 1) and (pc < 1 or o == 1) and (o == 1 or pc == 0)


def test_differential_against_oracle():
    rng = np.random.default_rng(2)
    for trial in range(100):
        n = int(rng.integers(3, 65))
        X = rng.standard_normal((n, int(rng.integers(2, 8))))
        metric = ("cosine", "euclidean")[trial % 2]
        nb = nearest_neighbors(X, metric)
        if trial % 2:
            K = int(rng.integers(2, 7))
            labels = SegMaskSet(rng.integers(0, K, (n, int(rng.integers(3, 9)), int(rng.integers(3, 9)))), K)
        else:
            Y = (rng.random((n, int(rng.integers(2, 8)))) < 0.4).astype(np.uint8)
            Y[rng.random(n) < 0.3] = 0
            if (Y.sum(axis=1) == 0).sum() * 2 > n:
                Y[:, 0] = 1
            labels = MultiLabelSet(Y)
        for kind in lm.kinds_for(labels):
            fast = lm.dataset_la(labels, nb, kind, 3).values
            slow = oracle_la(labels, X, metric, kind, 3)
            if kind in lm.BINARY_KINDS:
                np.testing.assert_array_equal(fast, slow)
            else:
                np.testing.assert_allclose(fast, slow, rtol=0, atol=1e-12)


def test_oracle_hand_instance():
    X = np.array([[1.0, 0.0], [0.9, 0.1], [0.0, 1.0]])
    labels = MultiLabelSet([[1, 1, 0], [1, 0, 1], [0, 1, 1]])
    # nn = [1, 0, 1]
    np.testing.assert_array_equal(oracle_la(labels, X, "cosine", "pct"), [0.5, 0.5, 0.5])
    np.testing.assert_array_equal(oracle_la(labels, X, "cosine", "one"), [1, 1, 1])
    np.testing.assert_array_equal(oracle_la(labels, X, "cosine", "all"), [0, 0, 0])
