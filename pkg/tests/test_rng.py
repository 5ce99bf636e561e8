import numpy as np
import pytest

from oracles import xoshiro_stream
from tripletnids.rng import Rng, _next, splitmix64


def test_xoshiro_reference_vector():
    s = np.array([1, 2, 3, 4], dtype=np.uint64)
    assert [int(_next(s)) for _ in range(4)] == [11520, 0, 1509978240, 1215971899390074240]


def test_splitmix_reference_vector():
    assert splitmix64(0)[1] == 0xE220A8397B1DCDAF


@pytest.mark.parametrize("seed", [0, 1, 19048, 39058032, 2**63 + 5])
def test_stream_matches_pure_python(seed):
    assert Rng(seed).next_u64(50).tolist() == xoshiro_stream(seed, 50)


def test_same_seed_same_stream():
    a, b = Rng(4564), Rng(4564)
    assert np.array_equal(a.random(100), b.random(100))
    assert np.array_equal(a.permutation(30), b.permutation(30))


def test_random_unit_interval():
    u = Rng(3).random(10_000)
    assert u.min() >= 0.0 and u.max() < 1.0
    assert abs(u.mean() - 0.5) < 0.01


def test_integers_in_range_and_uniform():
    x = Rng(5).integers(7, 70_000)
    assert x.min() == 0 and x.max() == 6
    freq = np.bincount(x) / len(x)
    assert np.all(np.abs(freq - 1 / 7) < 0.01)


def test_permutation_is_permutation():
    p = Rng(9).permutation(1000)
    assert sorted(p.tolist()) == list(range(1000))


def test_sample_without_replacement_distinct():
    s = Rng(2).sample_without_replacement(50, 20)
    assert len(set(s.tolist())) == 20 and s.max() < 50
    with pytest.raises(ValueError):
        Rng(2).sample_without_replacement(5, 6)


def test_normal_moments():
    z = Rng(11).normal(200_000)
    assert abs(z.mean()) < 0.01 and abs(z.std() - 1) < 0.01
