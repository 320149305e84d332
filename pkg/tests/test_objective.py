import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from zofdi.errors import ConfigurationError
from zofdi.objective import (AdversaryObjective, Reference, SmoothingParams, estimate_lipschitz, evaluate,
                             evaluate_batch, reference_at, sample_sphere, smoothed_value, sphere_gradient_samples)

Q3 = 3 * np.eye(2)


def test_evaluate_examples():
    static = AdversaryObjective(Q3, Reference.static(-1.5))
    assert evaluate(static, [0, 0], [-1.5], 1) == 0.0
    assert evaluate(static, [1, 0], [0.0], 1) == pytest.approx(1.5 + 3.0)
    ramp = AdversaryObjective(Q3, Reference.ramp(1e-4))
    assert evaluate(ramp, [0, 0], [4.0], 40_000) == pytest.approx(0.0, abs=1e-12)


def test_evaluate_uses_unsquared_norm():
    obj = AdversaryObjective(np.eye(1), Reference.static([0.0, 0.0]))
    assert evaluate(obj, [0.0], [3.0, 4.0], 1) == pytest.approx(5.0)


def test_evaluate_dimension_errors():
    obj = AdversaryObjective(Q3, Reference.static(-1.5))
    with pytest.raises(ConfigurationError):
        evaluate(obj, [0, 0, 0], [0.0], 1)
    with pytest.raises(ConfigurationError):
        evaluate(obj, [0, 0], [0.0, 1.0], 1)


def test_weight_must_be_spd():
    for bad in ([[1, 2], [0, 1]], [[1, 0], [0, -1]], [[1, 0, 0]]):
        with pytest.raises(ConfigurationError):
            AdversaryObjective(np.asarray(bad, dtype=float), Reference.static(0.0))


def test_reference_examples():
    obj = AdversaryObjective(Q3, Reference.static(-1.5))
    for k in (1, 7, 10**6):
        np.testing.assert_array_equal(reference_at(obj, k), [-1.5])
    ramp = Reference.ramp(1e-4)
    assert ramp.at(40_000)[0] == pytest.approx(4.0)
    assert ramp.at(0)[0] == 0.0
    np.testing.assert_allclose(ramp.values([0, 10, 20])[:, 0], [0, 1e-3, 2e-3])
    with pytest.raises(ConfigurationError):
        Reference("sine")


pd_mats = hnp.arrays(float, (2, 2), elements=st.floats(-2, 2)).map(lambda a: a @ a.T + 0.1 * np.eye(2))
# keep away from underflow: squares of |v| < 1e-100 vanish in double precision
finite = st.floats(-5, 5).filter(lambda v: v == 0 or abs(v) > 1e-100)
vec2 = hnp.arrays(float, 2, elements=finite)
scal = finite


@given(Q=pd_mats, theta=vec2, y=scal, ref=scal)
def test_nonnegative_and_zero_iff(Q, theta, y, ref):
    obj = AdversaryObjective(Q, Reference.static(ref))
    v = evaluate(obj, theta, [y], 1)
    assert v >= 0
    if v == 0:
        assert y == ref and not np.any(theta)
    assert evaluate(obj, [0, 0], [ref], 1) == 0


@given(Q=pd_mats, a=vec2, b=vec2, ya=scal, yb=scal, ref=scal)
def test_joint_convexity_on_segments(Q, a, b, ya, yb, ref):
    obj = AdversaryObjective(Q, Reference.static(ref))
    mid = evaluate(obj, (a + b) / 2, [(ya + yb) / 2], 1)
    ends = 0.5 * (evaluate(obj, a, [ya], 1) + evaluate(obj, b, [yb], 1))
    assert mid <= ends + 1e-9 * (1 + abs(ends))


def test_evaluate_batch_matches_scalar():
    rng = np.random.default_rng(0)
    obj = AdversaryObjective(Q3, Reference.ramp(0.1))
    th = rng.standard_normal((20, 2))
    y = rng.standard_normal((20, 1))
    ks = np.arange(20)
    batch = evaluate_batch(obj, th, y, obj.reference.values(ks))
    np.testing.assert_allclose(batch, [evaluate(obj, t, yy, k) for t, yy, k in zip(th, y, ks)], rtol=1e-14)


# -- smoothing ---------------------------------------------------------------------


def test_smoothed_constant_is_exact():
    rng = np.random.default_rng(1)
    for delta in (1e-3, 0.5, 3.0):
        mean, se = smoothed_value(lambda pts: np.full(len(pts), 2.5), [1.0, -1.0], SmoothingParams(delta, 1000), rng)
        assert mean == 2.5 and se == 0.0


def test_smoothed_square_norm_at_origin():
    rng = np.random.default_rng(2)
    for p in (1, 2, 5):
        delta = 0.3
        mean, _ = smoothed_value(lambda pts: np.sum(pts**2, axis=1), np.zeros(p), SmoothingParams(delta, 5000), rng)
        assert mean == pytest.approx(delta**2, rel=1e-12)


def test_smoothing_bound_for_lipschitz_norm():
    rng = np.random.default_rng(3)
    f = lambda pts: np.linalg.norm(np.atleast_2d(pts), axis=1)  # noqa: E731
    for _ in range(10):
        w = rng.normal(size=3) * rng.uniform(0, 2)
        delta = rng.uniform(0.01, 1.0)
        mean, se = smoothed_value(f, w, SmoothingParams(delta, 20_000), rng)
        assert abs(mean - np.linalg.norm(w)) <= delta + 3 * se


def test_smoothing_params_validation():
    with pytest.raises(ConfigurationError):
        SmoothingParams(0.0)
    with pytest.raises(ConfigurationError):
        SmoothingParams(0.1, 0)


def test_scalar_only_evaluator_is_supported():
    rng = np.random.default_rng(4)

    def scalar(x):
        x = np.asarray(x)
        if x.ndim != 1:
            raise ValueError("points only")
        return float(x @ x)

    mean, _ = smoothed_value(scalar, np.zeros(2), SmoothingParams(0.5, 200), rng)
    assert mean == pytest.approx(0.25)


def test_sphere_sampling_is_unit_and_centered():
    rng = np.random.default_rng(5)
    v = sample_sphere(rng, 3, 100_000)
    np.testing.assert_allclose(np.linalg.norm(v, axis=1), 1.0, atol=1e-12)
    assert np.all(np.abs(v.mean(axis=0)) < 0.01)


def test_gradient_samples_unbiased_for_quadratic():
    # f(w) = w'Aw + b'w: smoothing only adds a constant, so grad f_delta = 2Aw + b
    rng = np.random.default_rng(6)
    A = np.array([[2.0, 0.3], [0.3, 1.0]])
    b = np.array([0.5, -1.0])
    f = lambda pts: np.einsum("ni,ij,nj->n", pts, A, pts) + pts @ b  # noqa: E731
    w = np.array([0.4, -0.2])
    v = sample_sphere(rng, 2, 400_000)
    g = sphere_gradient_samples(f, w, 0.1, v).mean(axis=0)
    exact = 2 * A @ w + b
    assert np.linalg.norm(g - exact) / np.linalg.norm(exact) < 0.05


def test_lipschitz_estimate_is_lower_bound():
    rng = np.random.default_rng(7)
    est = estimate_lipschitz(lambda pts: pts @ np.array([3.0, 4.0]), 1.0, 2, rng, pairs=10_000)
    assert 4.5 < est <= 5.0 + 1e-9
