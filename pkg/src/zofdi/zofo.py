"""Residual-feedback zeroth-order attack loop.

Each iteration injects ``theta_k = w_k + delta v_k``, lets the plant respond,
measures one objective value ``Phi_k`` and forms the gradient estimate
``(p / delta) (Phi_k - Phi_{k-1}) v_k`` from the current and the stored previous
measurement.  The solution is then moved against the estimate and projected
back onto the energy ball ``w' w <= R``.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import kernels, streams
from .dynamics import DIVERGENCE_LIMIT, NoiseSource, Scenario, noise_sequence, observe, step_attacked
from .errors import ConfigurationError, NumericOverflowError
from .objective import AdversaryObjective, evaluate

PROBES = ("sphere", "trig")


@dataclass(frozen=True)
class AttackConfig:
    """Optimizer hyperparameters.

    Parameters
    ----------
    delta, eta, R, T
        Smoothing radius, step size, energy budget (bound on ``theta' theta``)
        and number of iterations.
    probe
        ``"sphere"`` (i.i.d. uniform on the unit sphere) or ``"trig"``
        (``[cos k, sin k] / sqrt(2)``, two-dimensional only).
    hold
        Plant steps per optimizer iteration; 1 is the plain sampled loop.
    zero_attack
        Diagnostic mode: inject nothing and never update.
    diagnostic
        Allow ``eta = 0`` (frozen optimizer) for testing.
    """

    delta: float = 1e-3
    eta: float = 7.5e-5
    R: float = 1.0
    T: int = 20_000
    probe: str = "sphere"
    attack_dim: int = 2
    hold: int = 1
    zero_attack: bool = False
    diagnostic: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.probe not in PROBES:
            raise ConfigurationError(f"probe must be one of {PROBES}, got {self.probe!r}")
        if int(self.attack_dim) < 1:
            raise ConfigurationError("attack_dim must be >= 1")
        if self.probe == "trig" and self.attack_dim != 2:
            raise ConfigurationError("the trig probe is defined for attack_dim = 2 only")
        if int(self.T) < 1:
            raise ConfigurationError("horizon T must be >= 1")
        if int(self.hold) < 1:
            raise ConfigurationError("hold must be >= 1")
        if not self.R > 0:
            raise ConfigurationError("energy budget R must be positive")
        if self.zero_attack:
            if self.delta < 0 or self.eta < 0:
                raise ConfigurationError("delta and eta must be nonnegative")
            return
        if not self.delta > 0:
            raise ConfigurationError("delta must be positive")
        lo_ok = self.eta >= 0 if self.diagnostic else self.eta > 0
        if not (lo_ok and self.eta < 1):
            raise ConfigurationError(f"step size must satisfy 0 < eta < 1, got {self.eta}")

    def describe(self) -> dict:
        d = asdict(self)
        d["w1_init"] = "uniform(0,1) per coordinate, projected"
        return d

    def fingerprint(self) -> str:
        return _digest(self.describe())


def _digest(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class OptimizerState:
    w: np.ndarray  # projected solution w_k
    v: np.ndarray  # probe v_k currently injected
    phi_prev: float  # Phi_{k-1}
    k: int = 1
    grad: np.ndarray | None = None  # last gradient estimate


@dataclass(eq=False)
class TrajectoryRecord:
    """Per-iteration log; row ``r`` holds iteration ``k = r + 1``.

    ``y[r]`` is the output measured after injecting ``theta[r]`` and ``x_pre[r]``
    the state just before that injection.
    """

    k: np.ndarray
    w: np.ndarray
    v: np.ndarray
    theta: np.ndarray
    y: np.ndarray
    phi: np.ndarray
    grad: np.ndarray
    x_pre: np.ndarray
    scenario_fingerprint: str
    config_fingerprint: str
    seed: int
    trial: int
    evaluations: int
    diverged_at: int | None = None
    gap: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    @property
    def rows(self) -> int:
        return int(self.k.size)

    @property
    def diverged(self) -> bool:
        return self.diverged_at is not None


# ---------------------------------------------------------------------------
# building blocks


def probe_block(config: AttackConfig, seed: int, trial: int, start: int, count: int) -> np.ndarray:
    """Probes ``v_start .. v_{start+count-1}`` as a ``(count, p)`` array."""
    if config.probe == "trig":
        k = np.arange(int(start), int(start) + int(count), dtype=float)
        return np.stack([np.cos(k), np.sin(k)], axis=1) / np.sqrt(2.0)
    return streams.sphere_points(seed, trial, streams.PROBE, start, count, config.attack_dim)


def probe_signal(config: AttackConfig, k: int, seed: int = 0, trial: int = 0) -> np.ndarray:
    return probe_block(config, seed, trial, k, 1)[0]


def residual_gradient_estimate(phi_curr, phi_prev, v, delta, p=None) -> np.ndarray:
    """``(p / delta) (phi_curr - phi_prev) v``."""
    v = np.atleast_1d(np.asarray(v, dtype=float))
    if not delta > 0:
        raise ConfigurationError("delta must be positive")
    p = v.size if p is None else int(p)
    return (p / delta) * (float(phi_curr) - float(phi_prev)) * v


def project_ball(w, R) -> np.ndarray:
    """Euclidean projection onto ``{w : w' w <= R}``."""
    w = np.atleast_1d(np.asarray(w, dtype=float))
    if not R > 0:
        raise ConfigurationError("R must be positive")
    n2 = float(np.sum(w * w))
    if not np.isfinite(n2):
        raise NumericOverflowError("non-finite point passed to the projection")
    if n2 <= R:
        return w.copy()
    return w * (np.sqrt(R) / np.sqrt(n2))


def initial_solution(config: AttackConfig, seed: int, trial: int) -> np.ndarray:
    """``w_1``: per-coordinate U(0, 1), projected onto the ball."""
    p = config.attack_dim
    raw = streams.raw_blocks(seed, trial, streams.INIT, 0, -(-p // 4)).reshape(-1)[:p]
    return project_ball(streams.to_uniform(raw), config.R)


def attack_step(state: OptimizerState, phi_curr: float, config: AttackConfig, seed: int = 0,
                trial: int = 0) -> tuple[OptimizerState, np.ndarray]:
    """Gradient estimate, projected update and next attack; returns ``(state', theta_next)``."""
    p = config.attack_dim
    g = residual_gradient_estimate(phi_curr, state.phi_prev, state.v, config.delta, p)
    w = project_ball(state.w - config.eta * g, config.R)
    v = probe_signal(config, state.k + 1, seed, trial)
    new = OptimizerState(w=w, v=v, phi_prev=float(phi_curr), k=state.k + 1, grad=g)
    return new, w + config.delta * v


# ---------------------------------------------------------------------------
# closed loop


def _check_dims(scenario: Scenario, objective: AdversaryObjective, config: AttackConfig) -> None:
    p = scenario.plant.attack_dim
    if config.attack_dim != p:
        raise ConfigurationError(f"config attack_dim={config.attack_dim} but plant has p={p}")
    if objective.attack_dim != p:
        raise ConfigurationError(f"Q is {objective.attack_dim}x{objective.attack_dim}, plant has p={p}")
    if objective.output_dim != scenario.plant.output_dim:
        raise ConfigurationError(
            f"reference has dimension {objective.output_dim}, plant output {scenario.plant.output_dim}")


def _noise_for(noise: NoiseSource | None, seed: int, trial: int, steps: int) -> np.ndarray:
    if noise is None or noise.kind == "none":
        return np.zeros(steps)
    return noise_sequence(noise.with_seed(seed), trial, 0, steps)


def _meta(objective, noise, engine):
    return {"objective": objective.describe(),
            "noise": (noise or NoiseSource()).describe(),
            "engine": engine}


def _run_python(scenario, objective, config, noise, seed, trial) -> TrajectoryRecord:
    model = scenario.plant
    T, hold, p = int(config.T), int(config.hold), config.attack_dim
    q, n = model.output_dim, model.state_dim
    d = _noise_for(noise, seed, trial, (T + 1) * hold)
    rec = {name: np.zeros((T, p)) for name in ("w", "v", "theta", "grad")}
    ys, phis, xs = np.zeros((T, q)), np.zeros(T), np.zeros((T, n))
    evaluations = 0
    x = np.array(scenario.x0, dtype=float)

    def advance(x, theta, k):
        for s in range(hold):
            x = step_attacked(model, x, theta, d[k * hold + s], iteration=k)
            if np.max(np.abs(x)) > DIVERGENCE_LIMIT:
                raise NumericOverflowError("state exceeded divergence limit", k)
        return x

    w = initial_solution(config, seed, trial)
    v = probe_signal(config, 0, seed, trial)
    zero = config.zero_attack
    done, diverged = 0, None
    try:
        theta = np.zeros(p) if zero else w + config.delta * v
        x = advance(x, theta, 0)
        phi_prev = evaluate(objective, theta, observe(model, x, d[hold - 1]), 0)
        evaluations += 1
        state = OptimizerState(w=w, v=probe_signal(config, 1, seed, trial), phi_prev=phi_prev, k=1)
        for k in range(1, T + 1):
            r = k - 1
            xs[r] = x
            theta = np.zeros(p) if zero else state.w + config.delta * state.v
            x = advance(x, theta, k)
            y = observe(model, x, d[k * hold + hold - 1])
            phi = evaluate(objective, theta, y, k)
            evaluations += 1
            rec["w"][r], rec["v"][r], rec["theta"][r] = state.w, state.v, theta
            ys[r], phis[r] = y, phi
            if zero:
                rec["grad"][r] = 0.0
                state = OptimizerState(w=state.w, v=probe_signal(config, k + 1, seed, trial),
                                       phi_prev=phi, k=k + 1, grad=np.zeros(p))
            else:
                state, _ = attack_step(state, phi, config, seed, trial)
                rec["grad"][r] = state.grad
            done = k
    except NumericOverflowError as exc:
        diverged = exc.iteration if exc.iteration is not None else done + 1
    return TrajectoryRecord(
        k=np.arange(1, done + 1), w=rec["w"][:done], v=rec["v"][:done], theta=rec["theta"][:done],
        y=ys[:done], phi=phis[:done], grad=rec["grad"][:done], x_pre=xs[:done],
        scenario_fingerprint=scenario.fingerprint(), config_fingerprint=config.fingerprint(),
        seed=int(seed), trial=int(trial), evaluations=evaluations, diverged_at=diverged,
        meta=_meta(objective, noise, "python"))


def _kernel_inputs(scenario: Scenario):
    if scenario.kind == "linear" and scenario.linear is not None:
        return kernels.LINEAR, 0.0, scenario.linear.closed_loop, scenario.linear.C
    if scenario.kind == "tanh":
        n = scenario.plant.state_dim
        return kernels.TANH, scenario.gain, np.zeros((n, n)), np.ones((1, n))
    return None


def supports_kernel(scenario: Scenario) -> bool:
    return _kernel_inputs(scenario) is not None


def run_batch(scenario: Scenario, objective: AdversaryObjective, config: AttackConfig,
              noise: NoiseSource | None = None, trials=(0,), seed: int = 0, *, backend=None,
              store_states: bool = True) -> list[TrajectoryRecord]:
    """Run several trials through the compiled kernel; same results as ``run_attack``."""
    _check_dims(scenario, objective, config)
    spec = _kernel_inputs(scenario)
    if spec is None:
        raise ConfigurationError(f"scenario {scenario.name!r} has no kernel form; use engine='python'")
    kind, gain, acl, C = spec
    trials = [int(t) for t in trials]
    T, hold, p = int(config.T), int(config.hold), config.attack_dim
    w1 = np.stack([initial_solution(config, seed, t) for t in trials])
    probes = np.stack([probe_block(config, seed, t, 0, T + 1) for t in trials])
    noise_arr = np.stack([_noise_for(noise, seed, t, (T + 1) * hold) for t in trials])
    refs = objective.reference.values(np.arange(T + 1))
    out = kernels.attack_loop(
        kind, gain, acl, C, scenario.plant.attack_selection, objective.weight, scenario.x0, w1, probes,
        noise_arr, refs, delta=config.delta, eta=config.eta, R=config.R, hold=hold,
        zero_attack=config.zero_attack, limit=DIVERGENCE_LIMIT, store_states=store_states, backend=backend)
    sfp, cfp = scenario.fingerprint(), config.fingerprint()
    meta = _meta(objective, noise, f"kernel:{backend or kernels.default_backend()}")
    records = []
    for i, t in enumerate(trials):
        raw = int(out["done"][i])
        done = max(raw, 0)
        diverged = None if raw == T else raw + 1
        evaluations = raw + 1  # bootstrap plus one per completed iteration
        records.append(TrajectoryRecord(
            k=np.arange(1, done + 1), w=out["w"][i, :done], v=probes[i, 1:done + 1],
            theta=out["theta"][i, :done], y=out["y"][i, :done], phi=out["phi"][i, :done],
            grad=out["grad"][i, :done], x_pre=out["x"][i, :done] if store_states else np.zeros((done, 0)),
            scenario_fingerprint=sfp, config_fingerprint=cfp, seed=int(seed), trial=t,
            evaluations=evaluations, diverged_at=diverged, meta=dict(meta)))
    return records


def run_attack(scenario: Scenario, objective: AdversaryObjective, config: AttackConfig,
               noise: NoiseSource | None = None, trial: int = 0, seed: int = 0, *,
               engine: str = "auto", backend=None) -> TrajectoryRecord:
    """Execute the closed-loop attack for one trial.

    ``engine="python"`` steps the generic :class:`PlantModel` callables;
    ``"kernel"`` uses the compiled loop (linear and tanh scenarios); ``"auto"``
    picks the kernel when available.
    """
    _check_dims(scenario, objective, config)
    if engine == "auto":
        engine = "kernel" if supports_kernel(scenario) else "python"
    if engine == "kernel":
        return run_batch(scenario, objective, config, noise, [trial], seed, backend=backend)[0]
    if engine == "python":
        return _run_python(scenario, objective, config, noise, seed, trial)
    raise ConfigurationError(f"unknown engine {engine!r}")


def with_horizon(config: AttackConfig, T: int) -> AttackConfig:
    return replace(config, T=int(T))
