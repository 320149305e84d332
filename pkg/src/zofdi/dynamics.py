"""Discrete-time plants: nominal, attacked and noisy stepping.

The attacked plant is ``x+ = f(x, u, d) + Gamma @ theta`` with ``u = controller(x)``
and output ``y = g(x, d)``.  Noise is a single scalar per plant step, added to
every state component and to the output.
"""

from __future__ import annotations

import hashlib
import json
import warnings
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from . import streams
from .errors import ConfigurationError, NumericOverflowError, SteadyStateUndefinedError

DIVERGENCE_LIMIT = 1e12
MARGINAL_TOL = 1e-9


def spectral_radius(matrix) -> float:
    """Largest eigenvalue modulus of a square matrix."""
    m = np.asarray(matrix, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ConfigurationError(f"spectral_radius needs a square matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ConfigurationError("spectral_radius needs finite entries")
    if m.size == 0:
        return 0.0
    return float(np.max(np.abs(np.linalg.eigvals(m))))


def stability_label(rho: float) -> str:
    if abs(rho - 1.0) <= MARGINAL_TOL:
        return "marginal (ρ(A_cl)=1)"
    return "stable" if rho < 1.0 else "unstable"


def selection_matrix(compromised, n: int) -> np.ndarray:
    """Build Gamma from the indices of compromised state components."""
    idx = [int(i) for i in compromised]
    if len(set(idx)) != len(idx) or not idx or any(i < 0 or i >= n for i in idx):
        raise ConfigurationError(f"bad compromised indices {idx} for n={n}")
    gamma = np.zeros((n, len(idx)))
    for col, row in enumerate(sorted(idx)):
        gamma[row, col] = 1.0
    return gamma


def _check_selection(gamma: np.ndarray) -> None:
    if gamma.ndim != 2:
        raise ConfigurationError("attack selection matrix must be 2-D")
    n, p = gamma.shape
    if not (n >= p >= 1):
        raise ConfigurationError(f"need state_dim >= attack_dim >= 1, got n={n}, p={p}")
    if not np.all((gamma == 0.0) | (gamma == 1.0)):
        raise ConfigurationError("attack selection matrix must be binary")
    if not np.all(gamma.sum(axis=0) == 1.0):
        raise ConfigurationError("each column of the selection matrix needs exactly one 1")
    if np.any(gamma.sum(axis=1) > 1.0):
        raise ConfigurationError("each row of the selection matrix may hold at most one 1")


def _zero_control(x):
    return np.zeros(1)


@dataclass(frozen=True, eq=False)
class PlantModel:
    state_dim: int
    input_dim: int
    output_dim: int
    transition: Callable  # (x, u, d) -> x
    observation: Callable  # (x, d) -> y
    attack_selection: np.ndarray
    controller: Callable = _zero_control

    def __post_init__(self):
        gamma = np.asarray(self.attack_selection, dtype=float)
        object.__setattr__(self, "attack_selection", gamma)
        _check_selection(gamma)
        if gamma.shape[0] != self.state_dim:
            raise ConfigurationError(
                f"selection matrix has {gamma.shape[0]} rows, state_dim is {self.state_dim}")
        for name in ("state_dim", "input_dim", "output_dim"):
            if int(getattr(self, name)) < 1:
                raise ConfigurationError(f"{name} must be a positive integer")

    @property
    def attack_dim(self) -> int:
        return self.attack_selection.shape[1]


@dataclass(frozen=True, eq=False)
class LinearScenario:
    """``x+ = A x + B u``, ``y = C x`` under state feedback ``u = -K x``."""

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    K: np.ndarray

    def __post_init__(self):
        for name in "ABCK":
            object.__setattr__(self, name, np.atleast_2d(np.asarray(getattr(self, name), dtype=float)))
        n = self.A.shape[0]
        if self.A.shape != (n, n):
            raise ConfigurationError(f"A must be square, got {self.A.shape}")
        m = self.B.shape[1]
        if self.B.shape[0] != n:
            raise ConfigurationError(f"B must have {n} rows, got {self.B.shape}")
        if self.C.shape[1] != n:
            raise ConfigurationError(f"C must have {n} columns, got {self.C.shape}")
        if self.K.shape != (m, n):
            raise ConfigurationError(f"K must be {m}x{n}, got {self.K.shape}")

    @property
    def closed_loop(self) -> np.ndarray:
        return self.A - self.B @ self.K

    @property
    def rho(self) -> float:
        return spectral_radius(self.closed_loop)

    @property
    def stable(self) -> bool:
        return self.rho < 1.0

    def plant(self, gamma) -> PlantModel:
        A, B, C, K = self.A, self.B, self.C, self.K

        def transition(x, u, d):
            return A @ x + B @ u + d

        def observation(x, d):
            return C @ x + d

        def controller(x):
            return -(K @ x)

        return PlantModel(
            state_dim=A.shape[0],
            input_dim=B.shape[1],
            output_dim=C.shape[0],
            transition=transition,
            observation=observation,
            attack_selection=gamma,
            controller=controller,
        )


def _as_vec(name, v, dim):
    v = np.atleast_1d(np.asarray(v, dtype=float))
    if v.shape != (dim,):
        raise ConfigurationError(f"{name} must have shape ({dim},), got {v.shape}")
    return v


def _as_noise(d, dim):
    d = np.asarray(d, dtype=float)
    if d.ndim == 0 or d.shape == (1,) or d.shape == (dim,):
        return d.reshape(-1) if d.ndim else d
    raise ConfigurationError(f"noise must be scalar, length 1 or length {dim}, got {d.shape}")


def step_attacked(model: PlantModel, x, theta, d=0.0, *, iteration=None) -> np.ndarray:
    """One attacked transition ``f(x, controller(x), d) + Gamma theta``."""
    x = _as_vec("state", x, model.state_dim)
    theta = _as_vec("attack", theta, model.attack_dim)
    d = _as_noise(d, model.state_dim)
    with np.errstate(invalid="ignore", over="ignore"):
        x_next = np.asarray(model.transition(x, model.controller(x), d), dtype=float) + model.attack_selection @ theta
    if not np.all(np.isfinite(x_next)):
        raise NumericOverflowError("non-finite state", iteration)
    return x_next


def observe(model: PlantModel, x, d=0.0) -> np.ndarray:
    x = _as_vec("state", x, model.state_dim)
    d = _as_noise(d, model.output_dim)
    return np.atleast_1d(np.asarray(model.observation(x, d), dtype=float))


def steady_state_state(scenario: LinearScenario, gamma, theta) -> np.ndarray:
    """``(I - A_cl)^{-1} Gamma theta``; needs a strictly stable closed loop."""
    a_cl = scenario.closed_loop
    rho = spectral_radius(a_cl)
    if not rho < 1.0 - MARGINAL_TOL:
        raise SteadyStateUndefinedError(f"spectral radius of A_cl is {rho:.12g}; no unique steady state")
    gamma = np.asarray(gamma, dtype=float)
    theta = _as_vec("attack", theta, gamma.shape[1])
    n = a_cl.shape[0]
    return np.linalg.solve(np.eye(n) - a_cl, gamma @ theta)


def steady_state_output(scenario: LinearScenario, gamma, theta) -> np.ndarray:
    """Noiseless steady-state output ``C (I - A_cl)^{-1} Gamma theta``."""
    return scenario.C @ steady_state_state(scenario, gamma, theta)


# ---------------------------------------------------------------------------
# noise


@dataclass(frozen=True)
class NoiseSource:
    kind: str = "none"  # none | gaussian | uniform
    mean: float = 0.0
    variance: float = 0.0
    lo: float = 0.0
    hi: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("none", "gaussian", "uniform"):
            raise ConfigurationError(f"unknown noise kind {self.kind!r}")
        if self.kind == "gaussian" and not self.variance > 0:
            raise ConfigurationError("gaussian noise needs variance > 0")
        if self.kind == "uniform" and not self.lo < self.hi:
            raise ConfigurationError("uniform noise needs lo < hi")

    @classmethod
    def gaussian(cls, mean=0.0, variance=0.02, seed=0):
        return cls("gaussian", mean=mean, variance=variance, seed=seed)

    @classmethod
    def uniform(cls, lo=0.0, hi=0.02, seed=0):
        return cls("uniform", lo=lo, hi=hi, seed=seed)

    def with_seed(self, seed: int) -> "NoiseSource":
        return NoiseSource(self.kind, self.mean, self.variance, self.lo, self.hi, int(seed))

    def describe(self) -> dict:
        if self.kind == "gaussian":
            return {"kind": "gaussian", "mean": self.mean, "variance": self.variance}
        if self.kind == "uniform":
            return {"kind": "uniform", "lo": self.lo, "hi": self.hi}
        return {"kind": "none"}


def noise_sequence(source: NoiseSource, trial: int, start: int, count: int) -> np.ndarray:
    """Scalar noise for plant steps ``start .. start+count-1`` of one trial."""
    if source.kind == "none":
        return np.zeros(int(count))
    if source.kind == "gaussian":
        z = streams.normal_at(source.seed, trial, streams.NOISE, start, count)
        return source.mean + np.sqrt(source.variance) * z
    u = streams.uniform_at(source.seed, trial, streams.NOISE, start, count)
    return source.lo + (source.hi - source.lo) * u


def sample_noise(source: NoiseSource, trial: int, k: int) -> np.ndarray:
    """Noise at plant step ``k`` of ``trial`` as a length-1 vector."""
    return noise_sequence(source, trial, k, 1)


# ---------------------------------------------------------------------------
# registered scenarios


@dataclass(frozen=True, eq=False)
class Scenario:
    name: str
    plant: PlantModel
    x0: np.ndarray
    kind: str = "custom"  # linear | tanh | custom
    linear: LinearScenario | None = None
    gain: float = 0.5  # contraction factor of the tanh plant
    spec: Mapping = field(default_factory=dict)

    @property
    def rho(self) -> float | None:
        return self.linear.rho if self.linear is not None else None

    @property
    def stability(self) -> str:
        if self.linear is not None:
            return stability_label(self.linear.rho)
        if self.kind == "tanh":
            return "stable"
        return "unknown"

    @property
    def has_exact_steady_state(self) -> bool:
        if self.kind == "tanh":
            return True
        return self.linear is not None and self.linear.rho < 1.0 - MARGINAL_TOL

    def steady_state(self, theta) -> np.ndarray:
        """Steady state for a constant attack (linear solve or fixed-point iteration)."""
        gamma = self.plant.attack_selection
        if self.kind == "tanh":
            return tanh_fixed_point(self.gain, gamma @ np.asarray(theta, dtype=float))
        if self.linear is None:
            raise SteadyStateUndefinedError(f"scenario {self.name!r} has no steady-state map")
        return steady_state_state(self.linear, gamma, theta)

    def fingerprint(self) -> str:
        blob = json.dumps(_jsonable(self.spec), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def tanh_fixed_point(gain, offset, tol=1e-15, max_iter=10_000) -> np.ndarray:
    """Solve ``x = gain * tanh(x) + offset`` (vectorised over leading axes)."""
    offset = np.asarray(offset, dtype=float)
    x = offset.copy()
    for _ in range(max_iter):
        x_new = gain * np.tanh(x) + offset
        if np.max(np.abs(x_new - x), initial=0.0) <= tol * (1.0 + np.max(np.abs(x_new), initial=0.0)):
            return x_new
        x = x_new
    return x


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, Mapping):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    return obj


def linear_scenario(name, A, B, C, K, gamma=None, x0=None, *, require_stable=False) -> Scenario:
    lin = LinearScenario(A, B, C, K)
    n = lin.A.shape[0]
    gamma = np.eye(n) if gamma is None else np.atleast_2d(np.asarray(gamma, dtype=float))
    x0 = np.zeros(n) if x0 is None else _as_vec("x0", x0, n)
    rho = lin.rho
    if require_stable and not rho < 1.0:
        raise ConfigurationError(f"scenario {name!r} must be strictly stable, ρ(A_cl)={rho:.6g}")
    if not rho < 1.0 - MARGINAL_TOL:
        warnings.warn(f"scenario {name!r}: ρ(A_cl)={rho:.6g}, no unique steady state", stacklevel=2)
    spec = {"name": name, "kind": "linear", "A": lin.A, "B": lin.B, "C": lin.C, "K": lin.K,
            "gamma": gamma, "x0": x0}
    return Scenario(name=name, plant=lin.plant(gamma), x0=x0, kind="linear", linear=lin, spec=spec)


def tanh_scenario(name="tanh-contraction", n=2, gamma=None, x0=None, gain=0.5) -> Scenario:
    """``x+ = gain * tanh(x) + d + Gamma theta``, ``y = sum(x) + d``."""
    gamma = np.eye(n) if gamma is None else np.atleast_2d(np.asarray(gamma, dtype=float))
    x0 = np.zeros(n) if x0 is None else _as_vec("x0", x0, n)
    if not 0.0 < gain < 1.0:
        raise ConfigurationError("tanh gain must lie in (0, 1) for a contraction")

    def transition(x, u, d):
        return gain * np.tanh(x) + d

    def observation(x, d):
        return np.array([np.sum(x)]) + d

    plant = PlantModel(state_dim=n, input_dim=1, output_dim=1, transition=transition,
                       observation=observation, attack_selection=gamma)
    spec = {"name": name, "kind": "tanh", "n": n, "gain": gain, "gamma": gamma, "x0": x0}
    return Scenario(name=name, plant=plant, x0=x0, kind="tanh", gain=gain, spec=spec)


NOMINAL_A = [[0.0, 1.0], [2.0, -1.0]]
NOMINAL_B = [[0.0, 0.0], [1.0, 0.0]]
NOMINAL_C = [[1.0, 1.0]]
NOMINAL_K = [[1.5, -1.5], [0.2, 0.1]]
STABLE_K = [[2.0, -1.5], [0.2, 0.1]]  # A_cl = [[0, 1], [0, 0.5]]
NOMINAL_X0 = [1.0, -3.0]


def _paper_linear():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return linear_scenario("paper-linear", NOMINAL_A, NOMINAL_B, NOMINAL_C, NOMINAL_K, np.eye(2), NOMINAL_X0)


def _stable_linear():
    sc = linear_scenario("stable-linear", NOMINAL_A, NOMINAL_B, NOMINAL_C, STABLE_K, np.eye(2), NOMINAL_X0,
                         require_stable=True)
    if not sc.rho <= 0.5 + 1e-12:
        raise ConfigurationError(f"stable-linear gain gives ρ(A_cl)={sc.rho}")
    return sc


def _tanh():
    return tanh_scenario("tanh-contraction", 2, np.eye(2), NOMINAL_X0, 0.5)


REGISTRY: dict[str, Callable[[], Scenario]] = {
    "paper-linear": _paper_linear,
    "stable-linear": _stable_linear,
    "tanh-contraction": _tanh,
}


def get_scenario(name: str) -> Scenario:
    try:
        factory = REGISTRY[name]
    except KeyError:
        raise ConfigurationError(f"unknown scenario {name!r}; known: {', '.join(sorted(REGISTRY))}") from None
    return factory()


def scenario_from_mapping(spec: Mapping) -> Scenario:
    """Build a scenario from config keys (matrices as row-major nested lists).

    ``kind = "linear"`` needs ``A, B, C, K`` and optionally ``gamma``/``compromised``,
    ``x0``; ``kind = "tanh"`` takes ``n``, ``gain``, ``gamma``, ``x0``.  A bare
    ``name`` matching the registry loads the registered scenario.
    """
    kind = spec.get("kind")
    name = spec.get("name", "custom")
    if kind is None:
        return get_scenario(name)
    gamma = spec.get("gamma")
    if gamma is None and "compromised" in spec:
        n = len(spec["A"]) if kind == "linear" else int(spec.get("n", 2))
        gamma = selection_matrix(spec["compromised"], n)
    if kind == "linear":
        try:
            A, B, C, K = (spec[key] for key in "ABCK")
        except KeyError as exc:
            raise ConfigurationError(f"linear scenario missing matrix {exc.args[0]}") from None
        return linear_scenario(name, A, B, C, K, gamma, spec.get("x0"))
    if kind == "tanh":
        return tanh_scenario(name, int(spec.get("n", 2)), gamma, spec.get("x0"), float(spec.get("gain", 0.5)))
    raise ConfigurationError(f"unknown scenario kind {kind!r}")


def simulate(model: PlantModel, x0, thetas, noise=None) -> np.ndarray:
    """Iterate ``step_attacked`` over an attack sequence; returns states ``x_0 .. x_T``."""
    thetas = np.asarray(thetas, dtype=float)
    xs = np.empty((thetas.shape[0] + 1, model.state_dim))
    xs[0] = _as_vec("x0", x0, model.state_dim)
    for k, theta in enumerate(thetas):
        d = 0.0 if noise is None else noise[k]
        xs[k + 1] = step_attacked(model, xs[k], theta, d, iteration=k)
    return xs
