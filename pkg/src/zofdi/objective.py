"""Adversary cost, reference trajectories and the sphere-smoothed surrogate."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ConfigurationError


@dataclass(frozen=True)
class Reference:
    """Expected output trajectory: constant (``static``) or ``slope * k`` (``ramp``)."""

    kind: str = "static"
    value: tuple = (0.0,)
    slope: tuple = (0.0,)

    def __post_init__(self):
        if self.kind not in ("static", "ramp"):
            raise ConfigurationError(f"unknown reference kind {self.kind!r}")
        object.__setattr__(self, "value", tuple(np.atleast_1d(np.asarray(self.value, dtype=float)).tolist()))
        object.__setattr__(self, "slope", tuple(np.atleast_1d(np.asarray(self.slope, dtype=float)).tolist()))

    @classmethod
    def static(cls, value):
        return cls("static", value=value)

    @classmethod
    def ramp(cls, slope):
        return cls("ramp", slope=slope)

    @property
    def dim(self) -> int:
        return len(self.value) if self.kind == "static" else len(self.slope)

    def at(self, k) -> np.ndarray:
        if self.kind == "static":
            return np.array(self.value)
        return np.array(self.slope) * float(k)

    def values(self, ks) -> np.ndarray:
        """Reference rows for an array of iteration indices, shape ``(len(ks), q)``."""
        ks = np.asarray(ks, dtype=float)
        if self.kind == "static":
            return np.broadcast_to(np.array(self.value), (ks.size, self.dim)).copy()
        return ks[:, None] * np.array(self.slope)[None, :]

    def describe(self) -> dict:
        if self.kind == "static":
            return {"kind": "static", "value": list(self.value)}
        return {"kind": "ramp", "slope": list(self.slope)}


def _check_pd(Q: np.ndarray) -> None:
    if Q.ndim != 2 or Q.shape[0] != Q.shape[1]:
        raise ConfigurationError(f"weight matrix must be square, got {Q.shape}")
    if not np.allclose(Q, Q.T, rtol=0, atol=1e-12 * max(1.0, np.max(np.abs(Q)))):
        raise ConfigurationError("weight matrix must be symmetric")
    if not np.all(np.linalg.eigvalsh(Q) > 0):
        raise ConfigurationError("weight matrix must be positive definite")


@dataclass(frozen=True, eq=False)
class AdversaryObjective:
    """``Phi(theta, y) = ||y - ybar_k|| + theta' Q theta``."""

    weight: np.ndarray
    reference: Reference

    def __post_init__(self):
        Q = np.atleast_2d(np.asarray(self.weight, dtype=float))
        _check_pd(Q)
        object.__setattr__(self, "weight", Q)

    @property
    def attack_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def output_dim(self) -> int:
        return self.reference.dim

    def describe(self) -> dict:
        return {"Q": self.weight.tolist(), "reference": self.reference.describe()}


def reference_at(obj: AdversaryObjective, k) -> np.ndarray:
    return obj.reference.at(k)


def evaluate(obj: AdversaryObjective, theta, y, k) -> float:
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=float))
    if theta.shape != (obj.attack_dim,):
        raise ConfigurationError(f"attack has shape {theta.shape}, expected ({obj.attack_dim},)")
    if y.shape != (obj.output_dim,):
        raise ConfigurationError(f"output has shape {y.shape}, expected ({obj.output_dim},)")
    r = y - obj.reference.at(k)
    return float(math.hypot(*r) + theta @ obj.weight @ theta)


def evaluate_batch(obj: AdversaryObjective, theta, y, ref) -> np.ndarray:
    """Vectorised ``evaluate`` over leading axes; ``ref`` broadcasts against ``y``."""
    theta = np.asarray(theta, dtype=float)
    r = np.asarray(y, dtype=float) - ref
    quad = np.einsum("...i,ij,...j->...", theta, obj.weight, theta)
    return np.sqrt(np.sum(r * r, axis=-1)) + quad


# ---------------------------------------------------------------------------
# smoothing


@dataclass(frozen=True)
class SmoothingParams:
    delta: float
    sample_count: int = 100_000

    def __post_init__(self):
        if not self.delta > 0:
            raise ConfigurationError("smoothing radius must be positive")
        if int(self.sample_count) < 1:
            raise ConfigurationError("sample_count must be positive")


def sample_sphere(rng: np.random.Generator, dim: int, size: int) -> np.ndarray:
    """Uniform draws on the unit sphere; zero Gaussian pre-images are redrawn."""
    g = rng.standard_normal((size, dim))
    nrm = np.linalg.norm(g, axis=1)
    bad = nrm == 0.0
    while np.any(bad):
        g[bad] = rng.standard_normal((int(bad.sum()), dim))
        nrm[bad] = np.linalg.norm(g[bad], axis=1)
        bad = nrm == 0.0
    return g / nrm[:, None]


def _vectorised(func, points):
    try:
        out = np.asarray(func(points), dtype=float)
        if out.shape == (points.shape[0],):
            return out
    except Exception:
        pass
    return np.array([func(pt) for pt in points], dtype=float)


def smoothed_value(func: Callable, w, params: SmoothingParams, rng: np.random.Generator):
    """Monte Carlo estimate of ``E_v[func(w + delta v)]`` with its standard error.

    ``func`` may accept a batch ``(N, p)`` or a single point; a batch call is
    tried first.
    """
    w = np.atleast_1d(np.asarray(w, dtype=float))
    v = sample_sphere(rng, w.size, int(params.sample_count))
    vals = _vectorised(func, w[None, :] + params.delta * v)
    n = vals.size
    stderr = float(np.std(vals, ddof=1) / np.sqrt(n)) if n > 1 else 0.0
    return float(np.mean(vals)), stderr


def sphere_gradient_samples(func: Callable, w, delta, v) -> np.ndarray:
    """Single-point estimator samples ``(p / delta) func(w + delta v) v`` for given probes."""
    w = np.atleast_1d(np.asarray(w, dtype=float))
    vals = _vectorised(func, w[None, :] + delta * v)
    return (w.size / delta) * vals[:, None] * v


def estimate_lipschitz(func: Callable, R: float, dim: int, rng: np.random.Generator,
                       pairs: int = 10_000) -> float:
    """Empirical Lipschitz estimate: max finite-difference ratio over random pairs in the ball.

    This is a lower estimate of the true constant, not a certificate.
    """
    def in_ball(size):
        d = sample_sphere(rng, dim, size)
        r = np.sqrt(R) * rng.random(size) ** (1.0 / dim)
        return d * r[:, None]

    a, b = in_ball(pairs), in_ball(pairs)
    fa, fb = _vectorised(func, a), _vectorised(func, b)
    dist = np.linalg.norm(a - b, axis=1)
    ok = dist > 0
    return float(np.max(np.abs(fa[ok] - fb[ok]) / dist[ok]))
