import numpy as np
import pytest
from hypothesis import given, strategies as st

from sdotflow.errors import ValidationError
from sdotflow.rng import (MASK64, mix_seed, noise_from_seed, noise_from_seeds, splitmix64_stream,
                          uniforms_from_words)


def splitmix64_reference(seed: int, count: int) -> list[int]:
    """Scalar SplitMix64 written with Python integers."""
    out = []
    state = seed & MASK64
    for _ in range(count):
        state = (state + 0x9E3779B97F4A7C15) & MASK64
        z = state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
        out.append(z ^ (z >> 31))
    return out


def test_splitmix64_known_stream():
    words = splitmix64_stream([1234567], 2)[0]
    assert [int(w) for w in words] == [6457827717110365317, 3203168211198807973]


@given(st.integers(min_value=0, max_value=MASK64))
def test_splitmix64_matches_scalar_reference(seed):
    assert [int(w) for w in splitmix64_stream([seed], 4)[0]] == splitmix64_reference(seed, 4)


@given(st.integers(min_value=0, max_value=MASK64), st.integers(min_value=0, max_value=2**40))
def test_mix_seed_matches_definition(master, j):
    expect = splitmix64_reference(master ^ ((j * 0x9E3779B97F4A7C15) & MASK64), 1)[0]
    assert mix_seed(master, j) == expect
    assert int(mix_seed(master, np.array([j], dtype=np.uint64))[0]) == expect


def test_uniforms_open_interval():
    words = np.array([0, MASK64, 1 << 63], dtype=np.uint64)
    u = uniforms_from_words(words)
    assert np.all(u > 0) and np.all(u < 1)


def test_noise_deterministic():
    a = noise_from_seed(42, 5)
    b = noise_from_seed(42, 5)
    assert a.tobytes() == b.tobytes()


def test_noise_neighbouring_seeds_differ():
    a = noise_from_seed(1000, 4)
    b = noise_from_seed(1001, 4)
    assert np.all(a != b)


def test_noise_single_matches_batch():
    seeds = np.array([3, 99, 2**63 + 5], dtype=np.uint64)
    batch = noise_from_seeds(seeds, 3)
    for row, s in zip(batch, seeds):
        assert np.array_equal(row, noise_from_seed(int(s), 3))


def test_noise_odd_dim_is_prefix_of_even():
    seeds = np.arange(10, dtype=np.uint64)
    assert np.array_equal(noise_from_seeds(seeds, 3), noise_from_seeds(seeds, 4)[:, :3])


def test_noise_moments():
    seeds = mix_seed(7, np.arange(100_000, dtype=np.uint64))
    x = noise_from_seeds(seeds, 2)
    assert np.all(np.abs(x.mean(axis=0)) < 0.02)
    assert np.all(np.abs(x.var(axis=0) - 1.0) < 0.03)


def test_noise_rejects_bad_dim():
    with pytest.raises(ValidationError):
        noise_from_seed(0, 0)
