import numpy as np
import pytest

from dare.errors import ShapeMismatch
from dare.tensor import FeatureMap3, flatten, index_of, unflatten, zero_pad


def test_pad_single_element():
    fm = FeatureMap3(np.array([[[5.0]]]))
    padded = zero_pad(fm, 1)
    assert padded.side == 3 and padded.depth == 1
    assert padded.data[1, 1, 0] == 5.0
    assert padded.data.sum() == 5.0


def test_pad_zero_is_identity():
    fm = FeatureMap3(np.arange(12.0).reshape(2, 2, 3))
    assert zero_pad(fm, 0) is fm


def test_pad_preserves_channel_sums():
    rng = np.random.default_rng(3)
    fm = FeatureMap3(rng.normal(size=(2, 2, 2)))
    padded = zero_pad(fm, 2)
    assert padded.side == 6
    for c in range(2):
        before = sum(fm.data[i, j, c] for i in range(2) for j in range(2))
        after = sum(padded.data[i, j, c] for i in range(6) for j in range(6))
        assert after == pytest.approx(before, abs=1e-15)


def test_pad_border_is_exactly_zero():
    rng = np.random.default_rng(4)
    for _ in range(20):
        n = int(rng.integers(1, 6))
        c = int(rng.integers(1, 4))
        p = int(rng.integers(1, 4))
        fm = FeatureMap3(rng.normal(size=(n, n, c)) + 10.0)
        padded = zero_pad(fm, p)
        interior = padded.data[p:p + n, p:p + n, :]
        assert np.array_equal(interior, fm.data)
        ring = padded.data.copy()
        ring[p:p + n, p:p + n, :] = 0.0
        assert not ring.any()
        # multiset of nonzero values survives padding
        assert sorted(fm.data[fm.data != 0]) == sorted(padded.data[padded.data != 0])


def test_index_of_examples():
    assert index_of(0, 0, 0, 4, 3) == 0
    assert index_of(0, 0, 2, 4, 3) == 2
    assert index_of(1, 2, 1, 4, 3) == 19


def test_index_of_bijective_exhaustive():
    for n in range(1, 9):
        for c in range(1, 9):
            seen = {index_of(i, j, k, n, c)
                    for i in range(n) for j in range(n) for k in range(c)}
            assert seen == set(range(n * n * c))


def test_index_of_matches_flatten_layout():
    rng = np.random.default_rng(9)
    fm = FeatureMap3(rng.normal(size=(4, 4, 3)))
    vec = flatten(fm)
    for i in range(4):
        for j in range(4):
            for c in range(3):
                assert vec[index_of(i, j, c, 4, 3)] == fm.data[i, j, c]


def test_flatten_round_trip_exact():
    rng = np.random.default_rng(11)
    for _ in range(25):
        n = int(rng.integers(1, 7))
        c = int(rng.integers(1, 5))
        fm = FeatureMap3(rng.normal(size=(n, n, c)))
        back = unflatten(flatten(fm), n, c)
        assert np.array_equal(back.data, fm.data)


def test_constructor_rejects_bad_maps():
    with pytest.raises(ShapeMismatch):
        FeatureMap3(np.zeros((2, 3, 1)))
    with pytest.raises(ShapeMismatch):
        FeatureMap3(np.array([[[np.nan]]]))
    with pytest.raises(ShapeMismatch):
        FeatureMap3(np.array([[[np.inf]]]))
    with pytest.raises(ShapeMismatch):
        unflatten(np.zeros(5), 2, 2)


def test_maps_are_read_only():
    fm = FeatureMap3(np.zeros((2, 2, 1)))
    with pytest.raises(ValueError):
        fm.data[0, 0, 0] = 1.0
