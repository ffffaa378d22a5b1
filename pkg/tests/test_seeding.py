import numpy as np
import pytest

from vividtoy.seeding import derive_seed, stream


def test_same_path_same_stream():
    assert np.array_equal(stream(3, "a", 1).random(5), stream(3, "a", 1).random(5))


def test_paths_are_independent():
    draws = {tuple(stream(3, *p).integers(0, 2**32, 4)) for p in [("a",), ("b",), ("a", 1), ("a", 2), ()]}
    assert len(draws) == 5


def test_wide_labels_do_not_alias():
    assert derive_seed(1, 2**40 + 7) != derive_seed(1, 7)
    assert derive_seed(2**64 - 1, "x") != derive_seed(0, "x")


def test_derive_seed_is_u64():
    s = derive_seed(123, "tile", 0, 1)
    assert 0 <= s < 2**64 and s == derive_seed(123, "tile", 0, 1)
    assert s != derive_seed(123, "tile", 1, 0)


def test_negative_label_rejected():
    with pytest.raises(ValueError):
        stream(0, -1)
