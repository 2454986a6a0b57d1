import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from agnostic_ssl.datamodel import rle


def test_reference_vector():
    # 5x2 mask, column-major: first column all ones, second column ends with two ones
    mask = np.zeros((5, 2), dtype=bool)
    mask[:, 0] = True
    mask[3:, 1] = True
    assert rle.encode_counts(mask) == [0, 5, 3, 2]
    assert rle.counts_to_string([0, 5, 3, 2]) == "053M"
    assert rle.encode(mask) == {"size": [5, 2], "counts": "053M"}
    assert np.array_equal(rle.decode({"size": [5, 2], "counts": "053M"}), mask)


def test_counts_start_with_zero_run():
    assert rle.encode_counts(np.ones((2, 2), dtype=bool)) == [0, 4]
    assert rle.encode_counts(np.zeros((2, 3), dtype=bool)) == [6]


def test_decode_accepts_uncompressed_counts():
    mask = np.array([[0, 1], [1, 1]], dtype=bool)
    counts = rle.encode_counts(mask)
    assert np.array_equal(rle.decode({"size": [2, 2], "counts": counts}), mask)


def test_bad_counts_rejected():
    with pytest.raises(ValueError):
        rle.decode_counts([3, 3], 2, 2)


def test_round_trip_1000_random_masks():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        h, w = rng.integers(1, 129, size=2)
        density = rng.uniform()
        mask = rng.uniform(size=(h, w)) < density
        enc = rle.encode(mask)
        assert np.array_equal(rle.decode(enc), mask)
        assert rle.string_to_counts(enc["counts"]) == rle.encode_counts(mask)


@settings(max_examples=200, deadline=None)
@given(arrays(np.bool_, st.tuples(st.integers(1, 40), st.integers(1, 40))))
def test_round_trip_property(mask):
    assert np.array_equal(rle.decode(rle.encode(mask)), mask)


@given(st.lists(st.integers(0, 10_000), min_size=1, max_size=30))
def test_string_codec_inverts(counts):
    assert rle.string_to_counts(rle.counts_to_string(counts)) == counts
