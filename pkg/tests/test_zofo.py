import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from zofdi import AdversaryObjective, NoiseSource, Reference, get_scenario
from zofdi.analysis import TheoryConstants, kappa_star, step_size_schedule
from zofdi.dynamics import simulate, tanh_scenario
from zofdi.errors import ConfigurationError, NumericOverflowError
from zofdi.zofo import (AttackConfig, OptimizerState, attack_step, initial_solution, probe_block, probe_signal,
                        project_ball, residual_gradient_estimate, run_attack, run_batch)

Q3 = 3 * np.eye(2)


@pytest.fixture
def static_obj():
    return AdversaryObjective(Q3, Reference.static(-1.5))


# -- config --------------------------------------------------------------------------


def test_config_validation():
    for kw in ({"eta": 0.0}, {"eta": 1.0}, {"eta": -0.1}, {"delta": 0.0}, {"R": 0.0}, {"T": 0},
               {"probe": "walk"}, {"hold": 0}, {"probe": "trig", "attack_dim": 3}):
        with pytest.raises(ConfigurationError):
            AttackConfig(**kw)
    AttackConfig(eta=0.0, diagnostic=True)
    AttackConfig(eta=0.0, delta=0.0, zero_attack=True)


def test_fingerprint_tracks_fields():
    a = AttackConfig()
    assert a.fingerprint() == AttackConfig().fingerprint()
    assert a.fingerprint() != AttackConfig(eta=1e-4).fingerprint()


# -- probes --------------------------------------------------------------------------


def test_trig_probe_values():
    cfg = AttackConfig(probe="trig")
    np.testing.assert_allclose(probe_signal(cfg, 0), [1 / np.sqrt(2), 0.0], atol=1e-15)
    k = 7
    np.testing.assert_allclose(probe_signal(cfg, k), [np.cos(k) / np.sqrt(2), np.sin(k) / np.sqrt(2)])


@given(k=st.integers(0, 10**7), seed=st.integers(0, 2**63), p=st.integers(1, 6))
def test_sphere_probe_unit_norm(k, seed, p):
    cfg = AttackConfig(probe="sphere", attack_dim=p)
    v = probe_signal(cfg, k, seed, 1)
    assert abs(np.linalg.norm(v) - 1.0) <= 1e-12


def test_sphere_probe_mean_near_zero():
    v = probe_block(AttackConfig(probe="sphere"), 9, 0, 0, 100_000)
    assert np.all(np.abs(v.mean(axis=0)) < 0.02)


# -- gradient estimate and projection ----------------------------------------------------


def test_residual_gradient_examples():
    np.testing.assert_allclose(residual_gradient_estimate(0.5, 0.4, [1, 0], 1e-3, 2), [200.0, 0.0])
    np.testing.assert_array_equal(residual_gradient_estimate(0.7, 0.7, [0.6, 0.8], 1e-3, 2), [0.0, 0.0])
    np.testing.assert_allclose(residual_gradient_estimate(1.0, 3.0, [0, 1], 0.1, 2), [0.0, -40.0])
    with pytest.raises(ConfigurationError):
        residual_gradient_estimate(1.0, 0.0, [1, 0], 0.0, 2)


def test_project_examples():
    np.testing.assert_array_equal(project_ball([3, 4], 25), [3, 4])
    np.testing.assert_allclose(project_ball([6, 8], 25), [3, 4], atol=1e-15)
    np.testing.assert_array_equal(project_ball([0, 0], 2.0), [0, 0])
    with pytest.raises(NumericOverflowError):
        project_ball([np.nan, 0], 1.0)
    with pytest.raises(ConfigurationError):
        project_ball([1, 0], 0.0)


pts = hnp.arrays(float, 3, elements=st.floats(-1e6, 1e6))
budgets = st.floats(1e-6, 1e4)


@given(a=pts, R=budgets)
def test_projection_feasible_and_idempotent(a, R):
    pa = project_ball(a, R)
    assert pa @ pa <= R * (1 + 1e-12)
    np.testing.assert_allclose(project_ball(pa, R), pa, rtol=1e-12, atol=0)


@given(a=pts, b=pts, R=budgets)
def test_projection_nonexpansive(a, b, R):
    d = np.linalg.norm(project_ball(a, R) - project_ball(b, R))
    assert d <= np.linalg.norm(a - b) * (1 + 1e-12) + 1e-12


# -- attack_step ----------------------------------------------------------------------


def test_attack_step_zero_step_size():
    cfg = AttackConfig(eta=0.0, diagnostic=True, delta=1e-3, probe="trig")
    st0 = OptimizerState(w=np.array([0.2, 0.1]), v=probe_signal(cfg, 1), phi_prev=0.3, k=1)
    st1, theta = attack_step(st0, 0.9, cfg)
    np.testing.assert_array_equal(st1.w, st0.w)
    np.testing.assert_allclose(theta, st0.w + 1e-3 * probe_signal(cfg, 2))
    assert st1.phi_prev == 0.9 and st1.k == 2


def test_attack_step_equal_evaluations_keep_w():
    cfg = AttackConfig(probe="trig")
    st0 = OptimizerState(w=np.array([0.2, -0.1]), v=probe_signal(cfg, 1), phi_prev=0.5, k=1)
    st1, _ = attack_step(st0, 0.5, cfg)
    np.testing.assert_array_equal(st1.w, st0.w)


def test_attack_step_hand_computation():
    cfg = AttackConfig(delta=1e-3, eta=7.5e-5, R=1.0, probe="trig")
    st0 = OptimizerState(w=np.zeros(2), v=np.array([1.0, 0.0]), phi_prev=0.4, k=1)
    st1, _ = attack_step(st0, 0.5, cfg)
    np.testing.assert_allclose(st1.grad, [200.0, 0.0])
    np.testing.assert_allclose(st1.w, [-0.015, 0.0], atol=1e-15)


# -- run_attack ------------------------------------------------------------------------


def test_zero_attack_matches_nominal(static_obj):
    sc = get_scenario("stable-linear")
    cfg = AttackConfig(delta=0.0, eta=0.0, zero_attack=True, T=50)
    for engine in ("python", "kernel"):
        rec = run_attack(sc, static_obj, cfg, engine=engine)
        xs = simulate(sc.plant, sc.x0, np.zeros((51, 2)))
        np.testing.assert_allclose(rec.y[:, 0], xs[2:].sum(axis=1), atol=1e-14)
        assert not np.any(rec.theta)


def test_record_layout_and_evaluation_count(static_obj):
    sc = get_scenario("paper-linear")
    T = 300
    rec = run_attack(sc, static_obj, AttackConfig(T=T, probe="trig"), engine="python")
    assert rec.rows == T
    np.testing.assert_array_equal(rec.k, np.arange(1, T + 1))
    assert rec.evaluations == T + 1
    np.testing.assert_allclose(rec.theta, rec.w + 1e-3 * rec.v, atol=1e-15)
    # phi pairs theta_k with the output measured after injecting it
    ref = -1.5
    phi = np.abs(rec.y[:, 0] - ref) + 3 * np.sum(rec.theta**2, axis=1)
    np.testing.assert_allclose(rec.phi, phi, rtol=1e-12)


@pytest.mark.parametrize("noise", [None, NoiseSource.gaussian(0, 0.02), NoiseSource.uniform(0, 0.02)])
def test_engines_agree(static_obj, noise):
    sc = get_scenario("stable-linear")
    cfg = AttackConfig(T=400, probe="sphere", hold=3)
    a = run_attack(sc, static_obj, cfg, noise, trial=2, seed=5, engine="python")
    b = run_attack(sc, static_obj, cfg, noise, trial=2, seed=5, engine="kernel")
    for name in ("w", "v", "theta", "y", "phi", "grad", "x_pre"):
        np.testing.assert_allclose(getattr(a, name), getattr(b, name), rtol=1e-9, atol=1e-9)
    assert a.evaluations == b.evaluations == 401


def test_engines_agree_on_tanh():
    sc = tanh_scenario()
    obj = AdversaryObjective(Q3, Reference.ramp(1e-3))
    cfg = AttackConfig(T=300)
    a = run_attack(sc, obj, cfg, engine="python")
    b = run_attack(sc, obj, cfg, engine="kernel")
    np.testing.assert_allclose(a.y, b.y, rtol=1e-12, atol=1e-12)


def test_batch_equals_single_trials(static_obj):
    sc = get_scenario("paper-linear")
    cfg = AttackConfig(T=200, probe="trig")
    batch = run_batch(sc, static_obj, cfg, NoiseSource.gaussian(0, 0.02), [0, 1, 2], seed=4)
    for rec in batch:
        single = run_attack(sc, static_obj, cfg, NoiseSource.gaussian(0, 0.02), trial=rec.trial, seed=4)
        assert np.array_equal(rec.y, single.y) and np.array_equal(rec.w, single.w)


def test_seeded_determinism(static_obj):
    sc = get_scenario("stable-linear")
    cfg = AttackConfig(T=500)
    a = run_attack(sc, static_obj, cfg, NoiseSource.uniform(), trial=1, seed=3)
    b = run_attack(sc, static_obj, cfg, NoiseSource.uniform(), trial=1, seed=3)
    c = run_attack(sc, static_obj, cfg, NoiseSource.uniform(), trial=1, seed=4)
    for name in ("w", "v", "theta", "y", "phi", "grad"):
        assert np.array_equal(getattr(a, name), getattr(b, name))
    assert not np.array_equal(a.y, c.y)


@given(seed=st.integers(0, 2**32), R=st.floats(0.05, 4.0), eta=st.floats(1e-5, 0.5))
def test_iterates_stay_feasible(seed, R, eta):
    sc = get_scenario("stable-linear")
    obj = AdversaryObjective(Q3, Reference.static(-1.5))
    cfg = AttackConfig(T=200, R=R, eta=eta, delta=1e-2)
    rec = run_attack(sc, obj, cfg, seed=seed)
    assert np.all(np.sum(rec.w**2, axis=1) <= R * (1 + 1e-12))
    assert np.all(np.linalg.norm(rec.theta, axis=1) <= np.sqrt(R) + cfg.delta + 1e-12)


def test_initial_solution_is_projected_uniform():
    cfg = AttackConfig(R=0.25)
    w = np.stack([initial_solution(AttackConfig(R=100.0), 0, t) for t in range(2000)])
    assert w.min() >= 0 and w.max() < 1
    assert abs(w.mean() - 0.5) < 0.02
    for t in range(50):
        v = initial_solution(cfg, 1, t)
        assert v @ v <= 0.25 * (1 + 1e-12)


def test_divergence_is_recorded(static_obj):
    from zofdi.dynamics import linear_scenario

    with pytest.warns(UserWarning):
        sc = linear_scenario("blowup", [[3.0, 0.0], [0.0, 3.0]], [[0.0], [0.0]], [[1.0, 1.0]], [[0.0, 0.0]],
                             np.eye(2), [1.0, 1.0])
    cfg = AttackConfig(T=100)
    a = run_attack(sc, static_obj, cfg, engine="python")
    b = run_attack(sc, static_obj, cfg, engine="kernel")
    assert a.diverged and b.diverged
    assert a.diverged_at == b.diverged_at
    assert a.rows == b.rows == a.diverged_at - 1
    assert np.all(np.abs(a.y) < 1e13)


def test_dimension_mismatch_rejected():
    sc = get_scenario("stable-linear")
    with pytest.raises(ConfigurationError):
        run_attack(sc, AdversaryObjective(np.eye(3), Reference.static(0.0)), AttackConfig(attack_dim=3))
    with pytest.raises(ConfigurationError):
        run_attack(sc, AdversaryObjective(Q3, Reference.static([0.0, 1.0])), AttackConfig())


def test_known_function_sanity():
    # static quadratic, no plant; step sizes from the noiseless schedule with kappa = kappa*/2
    target = np.array([0.3, -0.2])
    R, T, p, eps = 1.0, 100_000, 2, 0.05
    M = 2 * (np.sqrt(R) + np.linalg.norm(target))  # Lipschitz constant on the ball
    c = TheoryConstants(M, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0)
    delta, eta = step_size_schedule(eps, c, p, T, kappa_star(c, T).kappa / 2)
    cfg = AttackConfig(delta=delta, eta=eta, R=R, T=T)

    def f(t):
        d = t - target
        return float(d @ d)

    V = probe_block(cfg, 0, 0, 0, T + 1)
    w = initial_solution(cfg, 0, 0)
    state = OptimizerState(w=w, v=V[1], phi_prev=f(w + delta * V[0]), k=1)
    vals = np.empty(T)
    for k in range(1, T + 1):
        vals[k - 1] = f(state.w)
        phi = f(state.w + delta * state.v)
        g = residual_gradient_estimate(phi, state.phi_prev, state.v, delta, p)
        w = project_ball(state.w - eta * g, R)
        state = OptimizerState(w=w, v=V[k + 1] if k < T else V[k], phi_prev=phi, k=k + 1)
    assert vals.mean() < 0.1 * vals[0]
