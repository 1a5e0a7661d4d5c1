import numpy as np
import pytest

from restocnet import rng


def test_same_key_same_stream():
    a = rng.stream(7, rng.STDP, 1, 2, 3).random(16)
    b = rng.stream(7, rng.STDP, 1, 2, 3).random(16)
    np.testing.assert_array_equal(a, b)


@pytest.mark.parametrize("other", [(8, rng.STDP, 1, 2, 3), (7, rng.INIT, 1, 2, 3),
                                   (7, rng.STDP, 1, 2, 4), (7, rng.STDP, 1, 2)])
def test_distinct_keys_give_distinct_streams(other):
    a = rng.stream(7, rng.STDP, 1, 2, 3).random(8)
    assert not np.array_equal(a, rng.stream(*other).random(8))


def test_stream_independent_of_draw_order():
    first = [rng.stream(1, rng.ENCODE, i).random(4) for i in range(5)]
    second = [rng.stream(1, rng.ENCODE, i).random(4) for i in reversed(range(5))][::-1]
    np.testing.assert_array_equal(np.array(first), np.array(second))


def test_negative_key_rejected():
    with pytest.raises(ValueError):
        rng.stream(0, rng.ENCODE, -1)


def test_phase_tags_are_distinct():
    tags = [getattr(rng, n) for n in dir(rng) if n.isupper()]
    assert len(tags) == len(set(tags))
