import numpy as np
from hypothesis import given
from hypothesis import strategies as st

from zofdi import streams


@given(seed=st.integers(0, 2**64 - 1), trial=st.integers(0, 1000), start=st.integers(0, 10**6),
       count=st.integers(1, 20))
def test_counter_lookup_matches_bulk(seed, trial, start, count):
    bulk = streams.raw_blocks(seed, trial, streams.NOISE, 0, start + count)[start:]
    assert np.array_equal(streams.raw_blocks(seed, trial, streams.NOISE, start, count), bulk)


def test_streams_are_separated_by_tag_and_trial():
    a = streams.uniform_at(5, 0, streams.NOISE, 0, 100)
    assert not np.array_equal(a, streams.uniform_at(5, 0, streams.PROBE, 0, 100))
    assert not np.array_equal(a, streams.uniform_at(5, 1, streams.NOISE, 0, 100))
    assert np.array_equal(a, streams.uniform_at(5, 0, streams.NOISE, 0, 100))


def test_trial_key_xors_seed_and_trial():
    assert np.array_equal(streams.trial_key(6, 3, 1), streams.trial_key(5, 0, 1))


def test_uniform_range_and_normal_moments():
    u = streams.uniform_at(1, 0, streams.NOISE, 0, 200_000)
    assert u.min() >= 0.0 and u.max() < 1.0
    z = streams.to_normal(streams.raw_blocks(1, 0, streams.NOISE, 0, 100_000)).ravel()
    assert abs(z.mean()) < 0.01
    assert abs(z.var() - 1.0) < 0.01


@given(dim=st.integers(1, 9), start=st.integers(0, 1000))
def test_sphere_points_unit_norm(dim, start):
    pts = streams.sphere_points(3, 2, streams.PROBE, start, 16, dim)
    assert pts.shape == (16, dim)
    np.testing.assert_allclose(np.linalg.norm(pts, axis=1), 1.0, atol=1e-12)
    again = streams.sphere_points(3, 2, streams.PROBE, start + 5, 1, dim)
    np.testing.assert_array_equal(again[0], pts[5])
