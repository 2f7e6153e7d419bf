import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nalab.rng import Rng, derive_seed, splitmix64_next


def test_splitmix64_reference_vectors():
    # canonical first outputs for seed 0
    state = 0
    outs = []
    for _ in range(3):
        state, out = splitmix64_next(state)
        outs.append(out)
    assert outs == [0xE220A8397B1DCDAF, 0x6E789E6AA1B965F4, 0x06C45D188009454F]


def test_xoshiro_hand_derived_sequence():
    # first outputs from raw state (1,2,3,4), derived step by step from the
    # update rule: rotl(s1*5,7)*9 with the standard state transition
    rng = Rng(0)
    rng._s = [1, 2, 3, 4]
    assert [rng.next_u64() for _ in range(3)] == [11520, 0, 1509978240]


def test_same_seed_same_sequence():
    a, b = Rng(12345), Rng(12345)
    assert [a.next_u64() for _ in range(100)] == [b.next_u64() for _ in range(100)]
    assert np.array_equal(a.uniform_block(257), b.uniform_block(257))
    assert np.array_equal(a.normal_block(99, std=0.5), b.normal_block(99, std=0.5))


def test_different_seeds_diverge():
    assert [Rng(1).next_u64() for _ in range(4)] != [Rng(2).next_u64() for _ in range(4)]


def test_uniform_range_and_mean():
    u = Rng(7).uniform_block(100_000)
    assert u.min() >= 0.0 and u.max() < 1.0
    assert abs(u.mean() - 0.5) < 0.01


def test_normal_block_moments_and_truncation():
    z = Rng(11).normal_block(100_000, std=2.0, trunc_sigmas=2.0)
    assert np.abs(z).max() <= 4.0  # 2 sigma * std 2.0
    assert abs(z.mean()) < 0.05


@given(st.integers(min_value=1, max_value=1000), st.integers(min_value=0, max_value=2**64 - 1))
@settings(max_examples=50)
def test_randint_in_range(bound, seed):
    rng = Rng(seed)
    for _ in range(20):
        assert 0 <= rng.randint(bound) < bound


def test_randint_rejects_nonpositive():
    with pytest.raises(ValueError):
        Rng(0).randint(0)


def test_shuffle_is_permutation_and_deterministic():
    items = list(range(50))
    a, b = items[:], items[:]
    Rng(99).shuffle(a)
    Rng(99).shuffle(b)
    assert a == b
    assert sorted(a) == items
    assert a != items  # astronomically unlikely to be identity


def test_state_roundtrip():
    rng = Rng(5)
    for _ in range(10):
        rng.next_u64()
    clone = Rng.from_state(rng.state())
    assert [rng.next_u64() for _ in range(10)] == [clone.next_u64() for _ in range(10)]


def test_derive_seed_stable_and_label_sensitive():
    s = derive_seed(42, "dropout", 3)
    assert s == derive_seed(42, "dropout", 3)
    assert s != derive_seed(42, "dropout", 4)
    assert s != derive_seed(42, "shuffle", 3)
    assert s != derive_seed(43, "dropout", 3)
