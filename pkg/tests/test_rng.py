import numpy as np
import pytest

from swycc.rng import GAMMA, PrngState


def test_splitmix_constants_documented():
    assert GAMMA == 0x9E3779B97F4A7C15


def test_identical_seeds_identical_streams():
    a, b = PrngState(12345), PrngState(12345)
    assert [a.next_u64() for _ in range(50)] == [b.next_u64() for _ in range(50)]


def test_block_matches_sequential():
    seq = PrngState(7)
    blk = PrngState(7)
    expected = [seq.next_u64() for _ in range(33)]
    got = blk.next_u64_block(33)
    assert [int(x) for x in got] == expected
    # and the states agree afterwards
    assert seq.state == blk.state
    assert seq.next_u64() == blk.next_u64()


def test_known_first_output_frozen():
    # frozen reference value for the documented constant set, seed 42
    assert PrngState(42).next_u64() == 0xBDD732262FEB6E95


def test_copy_is_independent():
    a = PrngState(1)
    b = a.copy()
    a.next_u64()
    assert a.state != b.state


def test_spawn_diverges_from_parent():
    a = PrngState(5)
    child = a.spawn()
    assert child.state != a.state
    assert child.next_u64() != a.next_u64()


def test_uniform_range_and_moments():
    u = PrngState(3).uniform((200_000,))
    assert u.min() >= 0.0 and u.max() < 1.0
    assert abs(u.mean() - 0.5) < 5e-3
    assert abs(u.var() - 1.0 / 12.0) < 5e-3


def test_normal_moments():
    z = PrngState(4).normal((200_000,))
    assert abs(z.mean()) < 0.01
    assert abs(z.std() - 1.0) < 0.01


def test_normal_shape_and_dtype():
    z = PrngState(9).normal((3, 4, 5), dtype=np.float32)
    assert z.shape == (3, 4, 5)
    assert z.dtype == np.float32


def test_integers_bounds():
    k = PrngState(8).integers(7, (10_000,))
    assert k.min() >= 0 and k.max() <= 6
    assert len(np.unique(k)) == 7


def test_integers_rejects_nonpositive():
    with pytest.raises(ValueError):
        PrngState(0).integers(0)


def test_bernoulli_rate():
    m = PrngState(11).bernoulli(0.1, (100_000,))
    assert 0.085 <= m.mean() <= 0.115
