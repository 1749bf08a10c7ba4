import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from repunc.cpa import auroc, cpa, cpa_bruteforce, la_cpa, midranks, uroc_curve
from repunc.errors import ValidationError


def _pair_auroc(x, y):
    pos, neg = x[y == 1], x[y == 0]
    return np.mean([(a > b) + 0.5 * (a == b) for a in pos for b in neg])


def test_auroc_hand_value():
    assert auroc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75


def test_auroc_extremes():
    assert auroc([1, 2, 3, 4], [0, 0, 1, 1]) == 1.0
    assert auroc([5, 5, 5, 5], [0, 1, 0, 1]) == 0.5


def test_auroc_single_class():
    with pytest.raises(ValidationError, match="both outcome classes"):
        auroc([1, 2, 3], [1, 1, 1])
    with pytest.raises(ValidationError):
        auroc([1, 2, 3], [0, 1, 2])


@pytest.mark.parametrize("fn", [cpa, cpa_bruteforce])
def test_cpa_hand_values(fn):
    assert fn([1, 2, 3], [10, 20, 30]) == 1.0
    assert fn([3, 2, 1], [10, 20, 30]) == 0.0
    assert fn([2, 1, 3], [1, 2, 3]) == 0.75


@pytest.mark.parametrize("fn", [cpa, cpa_bruteforce])
def test_cpa_constant_outcome(fn):
    with pytest.raises(ValidationError, match="two distinct"):
        fn([1, 2, 3], [4, 4, 4])


def test_midranks():
    np.testing.assert_array_equal(midranks([3.0, 1.0, 3.0, 2.0]), [3.5, 1.0, 3.5, 2.0])


def test_binary_reduction_500_instances():
    rng = np.random.default_rng(0)
    done = 0
    while done < 500:
        n = int(rng.integers(2, 201))
        x = np.round(rng.standard_normal(n), int(rng.integers(0, 3)))
        y = (rng.random(n) < rng.uniform(0.1, 0.9)).astype(float)
        if np.unique(y).size < 2:
            continue
        assert abs(cpa(x, y) - auroc(x, y)) <= 1e-12
        assert abs(auroc(x, y) - _pair_auroc(x, y)) <= 1e-12
        done += 1


def test_oracle_equivalence_with_ties():
    rng = np.random.default_rng(1)
    done = 0
    while done < 200:
        n = int(rng.integers(2, 51))
        x = rng.integers(0, int(rng.integers(1, 8)), n).astype(float)
        y = rng.integers(0, int(rng.integers(2, 8)), n).astype(float)
        if np.unique(y).size < 2:
            continue
        assert abs(cpa(x, y) - cpa_bruteforce(x, y)) <= 1e-12
        done += 1


instance = st.integers(2, 40).flatmap(
    lambda n: st.tuples(
        hnp.arrays(np.float64, n, elements=st.floats(-5, 5).map(lambda v: round(v, 2))),
        hnp.arrays(np.float64, n, elements=st.integers(0, 5).map(float)),
    )
).filter(lambda t: np.unique(t[1]).size >= 2)


@given(instance)
def test_monotone_transform_invariance(xy):
    x, y = xy
    base = cpa(x, y)
    assert abs(cpa(np.exp(x), y) - base) <= 1e-12
    assert abs(cpa(3.0 * x + 7.0, y) - base) <= 1e-12
    assert 0.0 <= base <= 1.0


@given(instance)
def test_complement_symmetry(xy):
    x, y = xy
    x = x + np.arange(x.size) * 1e-3  # distinct predictor values
    assert abs(cpa(-x, y) - (1.0 - cpa(x, y))) <= 1e-12


def test_la_cpa_orientation():
    la = np.array([1.0, 0.75, 0.5, 0.25, 0.0])
    assert la_cpa(np.array([0.1, 0.2, 0.3, 0.4, 0.5]), la) == 1.0
    assert la_cpa(np.array([0.5, 0.4, 0.3, 0.2, 0.1]), la) == 0.0


def test_la_cpa_binary_reduction():
    rng = np.random.default_rng(4)
    u = rng.random(300)
    la = (rng.random(300) < 0.6).astype(float)
    assert la_cpa(u, la) == auroc(u, 1 - la)


def test_la_cpa_constant_is_undefined():
    assert la_cpa([0.1, 0.2, 0.3], [1.0, 1.0, 1.0]) is None


def test_la_cpa_drops_excluded():
    u = np.array([0.1, 0.9, 0.2, 0.8])
    la = np.array([1.0, np.nan, 0.5, 0.0])
    assert la_cpa(u, la) == cpa([0.1, 0.2, 0.8], [0.0, 0.5, 1.0])


def test_la_cpa_independent_is_half():
    vals = []
    for seed in range(100):
        rng = np.random.default_rng(seed)
        la = rng.integers(0, 5, 10_000) / 4.0
        u = rng.permutation(rng.random(10_000))
        vals.append(la_cpa(u, la))
    vals = np.asarray(vals)
    assert np.all(np.abs(vals - 0.5) <= 0.02)
    assert abs(vals.mean() - 0.5) <= 0.005


def test_uroc_area_matches_cpa():
    rng = np.random.default_rng(5)
    y = rng.integers(0, 4, 400).astype(float)
    x = y + rng.standard_normal(400)
    fpr, tpr = uroc_curve(x, y, grid=2001)
    assert fpr[0] == 0.0 and fpr[-1] == 1.0 and tpr[-1] == 1.0
    assert np.all(np.diff(tpr) >= -1e-12)
    assert float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2)) == pytest.approx(cpa(x, y), abs=2e-3)
