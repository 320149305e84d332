"""Oracles, optimality gap, ensemble statistics and theory calculators."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .dynamics import Scenario, simulate
from .errors import AssumptionViolation, ConfigurationError, OracleUnavailableError
from .objective import AdversaryObjective

# ---------------------------------------------------------------------------
# theory constants


@dataclass(frozen=True)
class TheoryConstants:
    """Lipschitz and Lyapunov constants.

    ``alpha1..alpha3`` play the role of ``c1..c3`` in the noisy setting and
    ``sigma`` bounds the standard deviation of a noisy objective evaluation.
    Lipschitz constants may be zero (degenerate, decoupled case).
    """

    M: float
    M_x: float
    M_y: float
    M_g: float
    alpha1: float
    alpha2: float
    alpha3: float
    sigma: float | None = None

    def __post_init__(self):
        for name in ("M", "M_x", "M_y", "M_g"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v >= 0):
                raise ConfigurationError(f"{name} must be a finite nonnegative number, got {v}")
        for name in ("alpha1", "alpha2", "alpha3"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v > 0):
                raise ConfigurationError(f"{name} must be positive, got {v}")
        if self.sigma is not None and not self.sigma > 0:
            raise ConfigurationError("sigma must be positive")

    @classmethod
    def from_mapping(cls, data) -> "TheoryConstants":
        aliases = {"c1": "alpha1", "c2": "alpha2", "c3": "alpha3", "Mx": "M_x", "My": "M_y", "Mg": "M_g"}
        kw = {aliases.get(k, k): float(v) for k, v in data.items()}
        known = set(cls.__dataclass_fields__)
        unknown = set(kw) - known
        if unknown:
            raise ConfigurationError(f"unknown constants: {sorted(unknown)}")
        try:
            return cls(**kw)
        except TypeError as exc:
            raise ConfigurationError(f"incomplete constants: {exc}") from None


def convergence_rate_mu(c: TheoryConstants) -> tuple[float, bool]:
    """``mu = 2 a2 / a1 (1 - a3 / a2)`` and whether ``0 <= mu < 1``."""
    mu = 2.0 * c.alpha2 / c.alpha1 * (1.0 - c.alpha3 / c.alpha2)
    return mu, bool(0.0 <= mu < 1.0)


@dataclass(frozen=True)
class CouplingMatrix:
    p11: float
    p12: float
    p21: float
    p22: float
    d1: float = 0.0
    d2: float = 0.0

    @classmethod
    def from_entries(cls, p11, p12, p21, p22, d1=0.0, d2=0.0) -> "CouplingMatrix":
        return cls(float(p11), float(p12), float(p21), float(p22), float(d1), float(d2))

    @property
    def matrix(self) -> np.ndarray:
        off = math.sqrt(self.p12 * self.p21)
        return np.array([[self.p11, off], [off, self.p22]])

    @property
    def rho(self) -> float:
        half = 0.5 * (self.p11 - self.p22)
        return 0.5 * (self.p11 + self.p22) + math.sqrt(half * half + self.p12 * self.p21)

    @property
    def feasible(self) -> bool:
        return self.rho < 1.0

    def as_dict(self) -> dict:
        return {"p11": self.p11, "p12": self.p12, "p21": self.p21, "p22": self.p22,
                "d1": self.d1, "d2": self.d2, "rho": self.rho, "feasible": self.feasible}


def coupling_matrix(c: TheoryConstants, eta: float, delta: float, p: int, noisy: bool = False) -> CouplingMatrix:
    """Entries of the 2x2 recursion coupling gradient-estimate energy and Lyapunov value."""
    if not (eta > 0 and delta > 0):
        raise ConfigurationError("eta and delta must be positive")
    if int(p) < 1:
        raise ConfigurationError("p must be >= 1")
    mu, _ = convergence_rate_mu(c)
    a2 = c.alpha2
    lip = c.M_x**2 * c.M_y**2 * c.M_g**2
    base = c.M**2 + mu * lip
    yg = c.M_y**2 * c.M_g**2
    if not noisy:
        return CouplingMatrix(
            p11=6 * p**2 * eta**2 / delta**2 * base,
            p12=3 * mu * p**2 * yg * (1 + mu) / (2 * a2 * delta**2),
            p21=4 * a2 * eta**2 * c.M_x**2,
            p22=mu,
            d1=24 * p**2 * base,
            d2=16 * a2 * delta**2 * c.M_x**2,
        )
    if c.sigma is None:
        raise ConfigurationError("the noisy coupling matrix needs sigma")
    s2 = c.sigma**2
    return CouplingMatrix(
        p11=12 * p**2 * eta**2 / delta**2 * base,
        p12=3 * mu * p**2 * yg * (1 + mu) / (2 * a2 * delta**2),
        p21=8 * a2 * eta**2 * c.M_x**2,
        p22=mu,
        d1=48 * p**2 * base + (24 * p**2 * s2 * (1 + mu * yg) + 12 * p**2 * eta**2 * mu * lip) / delta**2,
        d2=32 * a2 * delta**2 * c.M_x**2 + 16 * a2 * s2,
    )


@dataclass(frozen=True)
class KappaStar:
    kappa: float
    xi1: float
    xi2: float
    xi3: float

    def violations(self, kappa: float) -> list[str]:
        """Names of the step-size inequalities that ``kappa`` breaks."""
        out = []
        if not self.xi1 * kappa**2 + self.xi2 * kappa < 1:
            out.append("xi1*kappa^2 + xi2*kappa < 1")
        if not self.xi3 + self.xi2 * kappa < 1:
            out.append("xi3 + xi2*kappa < 1")
        return out


def kappa_star(c: TheoryConstants, T: int) -> KappaStar:
    """Upper end of the feasible ``kappa`` range for the noiseless schedule."""
    if int(T) < 1:
        raise ConfigurationError("T must be >= 1")
    mu, _ = convergence_rate_mu(c)
    if mu >= 1.0:
        raise AssumptionViolation(f"mu = {mu:.6g} >= 1; the plant contraction assumption fails")
    if mu < 0.0:
        raise AssumptionViolation(f"mu = {mu:.6g} < 0: alpha3 exceeds alpha2")
    lip = c.M_x**2 * c.M_y**2 * c.M_g**2
    xi1 = 6 * c.M**2 * (c.M**2 + mu * lip) / T**2
    xi2 = c.M * c.M_x * c.M_y * c.M_g * math.sqrt(6 * mu * (1 + mu)) / T if mu > 0 else 0.0
    xi3 = mu
    # 2 / (xi2 + sqrt(xi2^2 + 4 xi1)) is the positive root without cancellation
    denom = xi2 + math.sqrt(xi2 * xi2 + 4 * xi1)
    first = 2.0 / denom if denom > 0 else math.inf
    second = (1 - xi3) / xi2 if xi2 > 0 else math.inf
    return KappaStar(min(first, second), xi1, xi2, xi3)


def step_size_schedule(eps: float, c: TheoryConstants, p: int, T: int, kappa: float,
                       variant: str = "noiseless") -> tuple[float, float]:
    """``(delta, eta)`` schedules for a target precision ``eps``."""
    if not eps > 0:
        raise ConfigurationError("eps must be positive")
    if not c.M > 0:
        raise ConfigurationError("the schedule needs M > 0")
    if not kappa > 0:
        raise ConfigurationError("kappa must be positive")
    delta = eps / c.M
    if variant == "noiseless":
        ks = kappa_star(c, T)
        if not kappa < ks.kappa:
            bad = ks.violations(kappa) or [f"kappa < kappa* = {ks.kappa:.6g}"]
            raise ConfigurationError(f"kappa = {kappa:.6g} is infeasible: violates {'; '.join(bad)}")
        eta = kappa * eps / (p * T)
    elif variant == "noisy":
        if c.sigma is None:
            raise ConfigurationError("the noisy schedule needs sigma")
        bound = p**2 * math.sqrt(T) / (c.sigma * eps)
        if not kappa < bound:
            raise ConfigurationError(f"kappa = {kappa:.6g} is infeasible: violates kappa < p^2 sqrt(T)/(sigma eps) "
                                     f"= {bound:.6g}")
        eta = kappa * c.sigma * eps / (p**2 * math.sqrt(T))
    else:
        raise ConfigurationError(f"unknown schedule variant {variant!r}")
    if not 0 < eta < 1:
        raise ConfigurationError(f"schedule gives eta = {eta:.6g}, outside (0, 1)")
    return delta, eta


# ---------------------------------------------------------------------------
# steady-state maps


@dataclass(frozen=True, eq=False)
class AffineMap:
    """``h(theta) = h0 + H theta`` with ``H`` of shape ``(q, p)``."""

    H: np.ndarray
    h0: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "H", np.atleast_2d(np.asarray(self.H, dtype=float)))
        object.__setattr__(self, "h0", np.atleast_1d(np.asarray(self.h0, dtype=float)))

    def __call__(self, theta) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        return self.h0 + theta @ self.H.T

    def jacobian(self, theta) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        return np.broadcast_to(self.H, theta.shape[:-1] + self.H.shape)


@dataclass(frozen=True, eq=False)
class TanhSteadyMap:
    """Steady output of ``x = g tanh(x) + Gamma theta``, ``y = sum(x)``."""

    gain: float
    gamma: np.ndarray

    def state(self, theta) -> np.ndarray:
        from .dynamics import tanh_fixed_point

        return tanh_fixed_point(self.gain, np.asarray(theta, dtype=float) @ self.gamma.T)

    def __call__(self, theta) -> np.ndarray:
        return np.sum(self.state(theta), axis=-1, keepdims=True)

    def jacobian(self, theta) -> np.ndarray:
        x = self.state(theta)
        # dx/dtheta = diag(1 / (1 - g sech^2 x)) Gamma
        scale = 1.0 / (1.0 - self.gain / np.cosh(x) ** 2)
        jx = scale[..., :, None] * self.gamma
        return np.sum(jx, axis=-2, keepdims=True)


def steady_map(scenario: Scenario):
    """Exact noiseless steady-state map of a scenario."""
    if scenario.kind == "tanh":
        return TanhSteadyMap(scenario.gain, scenario.plant.attack_selection)
    if not scenario.has_exact_steady_state:
        raise OracleUnavailableError(
            f"scenario {scenario.name!r} ({scenario.stability}) has no unique steady state")
    lin = scenario.linear
    n = lin.A.shape[0]
    gain = lin.C @ np.linalg.solve(np.eye(n) - lin.closed_loop, scenario.plant.attack_selection)
    return AffineMap(gain, np.zeros(lin.C.shape[0]))


def finite_horizon_map(scenario: Scenario, x0=None, N: int = 2000) -> AffineMap:
    """Output after ``N`` steps under a constant attack, as an affine map of the attack.

    Used for marginally stable plants where no steady state exists.  Built by
    superposition from simulations of the zero attack and each unit attack.
    """
    if scenario.linear is None:
        raise OracleUnavailableError("finite-horizon maps are built for linear scenarios only")
    model = scenario.plant
    p, n = model.attack_dim, model.state_dim
    x0 = scenario.x0 if x0 is None else np.asarray(x0, dtype=float)
    C = scenario.linear.C
    base = C @ simulate(model, x0, np.zeros((N, p)))[-1]
    cols = []
    for j in range(p):
        e = np.zeros(p)
        e[j] = 1.0
        cols.append(C @ simulate(model, np.zeros(n), np.tile(e, (N, 1)))[-1])
    return AffineMap(np.stack(cols, axis=1), base)


# ---------------------------------------------------------------------------
# oracles


def composite_value(h, objective: AdversaryObjective, theta, ref) -> np.ndarray:
    """``Phi(theta, h(theta))`` vectorised over leading axes of ``theta``."""
    theta = np.asarray(theta, dtype=float)
    r = h(theta) - ref
    quad = np.einsum("...i,ij,...j->...", theta, objective.weight, theta)
    return np.sqrt(np.sum(r * r, axis=-1)) + quad


def _bisect(fn, lo, hi, iters=200):
    """Vectorised bisection for a decreasing ``fn`` crossing zero in ``[lo, hi]``."""
    lo, hi = np.array(lo, dtype=float), np.array(hi, dtype=float)
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        pos = fn(mid) > 0
        lo = np.where(pos, mid, lo)
        hi = np.where(pos, hi, mid)
    return hi


def _exact_scalar_affine(H: AffineMap, Q: np.ndarray, R: float, refs: np.ndarray):
    """Exact minimiser of ``|h0 + g'theta - ref| + theta'Q theta`` over the ball for many refs."""
    g = H.H[0]
    b = np.asarray(refs, dtype=float).reshape(-1) - H.h0[0]
    qv, V = np.linalg.eigh(Q)
    gt = V.T @ g
    gg = float(g @ g)
    cands = []

    # smooth pieces: theta = -s/2 (Q + lam I)^-1 g, independent of the reference
    def piece_excess(lam):
        return 0.25 * np.sum(gt**2 / (qv + lam[..., None]) ** 2, axis=-1) - R

    lam = 0.0
    if piece_excess(np.zeros(1))[0] > 0:
        lam = float(_bisect(piece_excess, np.zeros(1), np.full(1, 0.5 * math.sqrt(gg / R) + 1.0))[0])
    u = V @ (gt / (qv + lam))
    for s in (1.0, -1.0):
        cands.append(np.broadcast_to(-0.5 * s * u, (b.size, g.size)))

    # kink: min theta'Q theta on {g'theta = b} within the ball, lam = t / (1 - t)
    if gg > 0:
        def kink(t):
            lam = t / (1.0 - t)
            a = gt[None, :] / (qv[None, :] + lam[:, None])
            return a / np.sum(gt[None, :] * a, axis=1, keepdims=True)

        def kink_excess(t):
            a = kink(t)
            return b**2 * np.sum(a * a, axis=1) - R

        feasible = b**2 / gg <= R
        t0 = np.zeros(b.size)
        need = feasible & (kink_excess(t0) > 0)
        t = np.where(need, _bisect(kink_excess, t0, np.full(b.size, 1.0 - 1e-15)), t0)
        theta_k = b[:, None] * (V @ kink(t).T).T
        # keep infeasible lines harmless: project (still a feasible point)
        nrm2 = np.sum(theta_k**2, axis=1)
        over = nrm2 > R
        theta_k[over] *= (math.sqrt(R) / np.sqrt(nrm2[over]))[:, None]
        cands.append(theta_k)

    cands = np.stack(cands, axis=1)  # (B, C, p)
    vals = np.abs(cands @ g - b[:, None]) + np.einsum(
        "bci,ij,bcj->bc", cands, Q, cands)
    best = np.argmin(vals, axis=1)
    idx = np.arange(b.size)
    return cands[idx, best], vals[idx, best]


def _ball_grid(R: float, step: float, center=None, half=None) -> np.ndarray:
    r = math.sqrt(R)
    if center is None:
        ax = np.arange(-r, r + 0.5 * step, step)
        ax = ax[np.abs(ax) <= r + 1e-15]
        gx, gy = np.meshgrid(ax, ax, indexing="ij")
        pts = np.stack([gx.ravel(), gy.ravel()], axis=1)
        return pts[np.sum(pts**2, axis=1) <= R]
    ax = np.linspace(-half, half, 41)
    gx, gy = np.meshgrid(center[0] + ax, center[1] + ax, indexing="ij")
    pts = np.stack([gx.ravel(), gy.ravel()], axis=1)
    n2 = np.sum(pts**2, axis=1)
    over = n2 > R
    pts[over] *= (r / np.sqrt(n2[over]))[:, None]
    return pts


class GridOracle:
    """Dense ball grid (p = 2) with local zoom refinement.

    The steady map is evaluated on the grid once and reused for every reference.
    """

    def __init__(self, h, objective: AdversaryObjective, R: float, resolution: float | None = None,
                 zoom_levels: int = 8):
        if objective.attack_dim != 2:
            raise ConfigurationError("the grid oracle is implemented for p = 2")
        self.h, self.obj, self.R = h, objective, float(R)
        self.step = resolution if resolution is not None else 2e-3 * math.sqrt(R)
        self.points = _ball_grid(self.R, self.step)
        self.hvals = h(self.points)
        self.quad = np.einsum("ni,ij,nj->n", self.points, objective.weight, self.points)
        self.zoom_levels = zoom_levels

    def coarse(self, ref) -> tuple[np.ndarray, float]:
        r = self.hvals - np.asarray(ref, dtype=float)
        vals = np.sqrt(np.sum(r * r, axis=1)) + self.quad
        i = int(np.argmin(vals))
        return self.points[i], float(vals[i])

    def solve(self, ref) -> tuple[np.ndarray, float]:
        theta, val = self.coarse(ref)
        half = self.step
        for _ in range(self.zoom_levels):
            pts = _ball_grid(self.R, 0.0, theta, half)
            vals = composite_value(self.h, self.obj, pts, ref)
            i = int(np.argmin(vals))
            if vals[i] <= val:
                theta, val = pts[i], float(vals[i])
            half /= 10.0
        return theta, val


def projected_gradient_oracle(h, objective: AdversaryObjective, R: float, ref, *, starts: int = 8,
                              seed: int = 0, iters: int = 400) -> tuple[np.ndarray, float]:
    """Multi-start projected gradient on ``sqrt(|h - ref|^2 + tau^2) + theta'Q theta``.

    ``tau`` is driven from 1e-1 to 1e-12 (continuation) so the kink of the
    unsquared norm is approached smoothly.  Step sizes use Armijo backtracking.
    """
    from .zofo import project_ball

    ref = np.atleast_1d(np.asarray(ref, dtype=float))
    Q = objective.weight
    p = Q.shape[0]
    rng = np.random.default_rng(seed)
    r = math.sqrt(R)
    inits = [np.zeros(p)]
    for _ in range(starts - 1):
        d = rng.standard_normal(p)
        inits.append(d / np.linalg.norm(d) * r * rng.random() ** (1.0 / p))

    def value(th, tau):
        res = h(th) - ref
        return math.sqrt(float(res @ res) + tau * tau) + float(th @ Q @ th)

    def grad(th, tau):
        res = h(th) - ref
        J = np.asarray(h.jacobian(th))
        return J.T @ res / math.sqrt(float(res @ res) + tau * tau) + 2.0 * Q @ th

    best_t, best_v = None, math.inf
    for th in inits:
        th = project_ball(th, R)
        step = 1.0
        for tau in 10.0 ** -np.arange(1, 13):
            f = value(th, tau)
            for _ in range(iters):
                g = grad(th, tau)
                while True:
                    cand = project_ball(th - step * g, R)
                    fc = value(cand, tau)
                    if fc <= f - 1e-4 / step * float((cand - th) @ (cand - th)) or step < 1e-16:
                        break
                    step *= 0.5
                moved = float(np.linalg.norm(cand - th))
                th, f = cand, fc
                step = min(step * 2.0, 1e3)
                if moved < 1e-14 * (1.0 + r):
                    break
        v = float(composite_value(h, objective, th, ref))
        if v < best_v:
            best_t, best_v = th, v
    return best_t, best_v


def oracle_optimum(h, objective: AdversaryObjective, k, R: float, method: str = "auto"):
    """Minimiser of ``Phi(theta, h(theta))`` over the ball ``theta'theta <= R`` at iteration ``k``.

    ``method``: ``"exact"`` (scalar-output affine maps), ``"pgd"``, ``"grid"``
    or ``"auto"`` (exact when possible, else projected gradient).
    """
    if h is None:
        raise OracleUnavailableError("no steady-state map; use the empirical-best mode")
    ref = objective.reference.at(k)
    if method == "auto":
        method = "exact" if isinstance(h, AffineMap) and h.H.shape[0] == 1 else "pgd"
    if method == "exact":
        if not (isinstance(h, AffineMap) and h.H.shape[0] == 1):
            raise ConfigurationError("the exact oracle needs a scalar-output affine map")
        theta, val = _exact_scalar_affine(h, objective.weight, R, ref)
        return theta[0], float(val[0])
    if method == "pgd":
        return projected_gradient_oracle(h, objective, R, ref)
    if method == "grid":
        return GridOracle(h, objective, R).solve(ref)
    raise ConfigurationError(f"unknown oracle method {method!r}")


# ---------------------------------------------------------------------------
# optimality gap


@dataclass
class GapReport:
    mode: str  # exact | empirical-best
    gap_mean: np.ndarray  # per-iteration ensemble mean
    running_average: np.ndarray
    phi_star: np.ndarray
    time_averaged: float
    tail_average: float  # mean of the final 10 %
    max_after_burnin: float  # max after the first 5 %
    trial_count: int
    diverged: int
    per_trial: dict = field(default_factory=dict)
    notes: list = field(default_factory=list)

    def summary(self) -> dict:
        return {"mode": self.mode, "time_averaged_gap": self.time_averaged,
                "tail_gap_final_10pct": self.tail_average, "max_gap_after_5pct_burnin": self.max_after_burnin,
                "trials": self.trial_count, "diverged_trials": self.diverged,
                "per_trial_time_averaged": self.per_trial, "notes": list(self.notes)}


def _check_fingerprints(records):
    if not records:
        raise ConfigurationError("no records")
    s = {r.scenario_fingerprint for r in records}
    c = {r.config_fingerprint for r in records}
    if len(s) != 1 or len(c) != 1:
        raise ConfigurationError("records mix scenario or config fingerprints")


class GapOracle:
    """Per-iteration ``Phi(theta_k*)`` and ``Phi(theta_k, h(theta_k))`` for a scenario."""

    def __init__(self, scenario: Scenario, objective: AdversaryObjective, R: float, *,
                 horizon: int = 2000, max_oracle_points: int = 513):
        self.objective, self.R = objective, float(R)
        self.notes = []
        try:
            self.h = steady_map(scenario)
            self.mode = "exact"
        except OracleUnavailableError:
            self.h = finite_horizon_map(scenario, N=horizon)
            self.mode = "empirical-best"
            self.notes.append(f"{scenario.name}: no steady state; gap measured as logged Phi_k against the "
                              f"best Phi of a {horizon}-step simulation over the ball")
        self.max_points = max_oracle_points
        self._grid = None

    def phi_star(self, ks) -> np.ndarray:
        ks = np.asarray(ks)
        ref = self.objective.reference
        if ref.kind == "static":
            val = self._solve(ref.values([ks[0]]))[0]
            return np.full(ks.size, val)
        if isinstance(self.h, AffineMap) and self.h.H.shape[0] == 1:
            return self._solve(ref.values(ks))
        # non-affine map with a moving reference: solve on a sub-grid of k and interpolate
        sub = np.unique(np.linspace(ks[0], ks[-1], min(self.max_points, ks.size)).round().astype(int))
        vals = self._solve(ref.values(sub))
        self.notes.append(f"Phi* solved at {sub.size} iterations and linearly interpolated")
        return np.interp(ks, sub, vals)

    def _solve(self, refs: np.ndarray) -> np.ndarray:
        if isinstance(self.h, AffineMap) and self.h.H.shape[0] == 1:
            return _exact_scalar_affine(self.h, self.objective.weight, self.R, refs[:, 0])[1]
        if self.objective.attack_dim == 2:
            if self._grid is None:
                self._grid = GridOracle(self.h, self.objective, self.R, resolution=2e-2 * math.sqrt(self.R))
            return np.array([self._grid.solve(r)[1] for r in refs])
        return np.array([projected_gradient_oracle(self.h, self.objective, self.R, r)[1] for r in refs])

    def achieved(self, record) -> np.ndarray:
        if self.mode == "empirical-best":
            return np.asarray(record.phi, dtype=float)
        refs = self.objective.reference.values(record.k)
        return composite_value(self.h, self.objective, record.theta, refs)


def optimality_gap(records: Sequence, scenario: Scenario, objective: AdversaryObjective, R: float,
                   oracle: GapOracle | None = None) -> GapReport:
    """Ensemble optimality gap ``Phi(theta_k, h(theta_k)) - Phi(theta_k*)``."""
    _check_fingerprints(records)
    oracle = oracle or GapOracle(scenario, objective, R)
    full = [r for r in records if not r.diverged]
    diverged = len(records) - len(full)
    if not full:
        raise ConfigurationError("every trial diverged; no gap to report")
    ks = full[0].k
    star = oracle.phi_star(ks)
    gaps = np.stack([oracle.achieved(r) - star for r in full])
    mean = gaps.mean(axis=0)
    T = mean.size
    running = np.cumsum(mean) / np.arange(1, T + 1)
    tail = mean[T - max(1, T // 10):]
    burn = mean[int(math.ceil(0.05 * T)):] if T > 1 else mean
    per_trial = {int(r.trial): float(g.mean()) for r, g in zip(full, gaps)}
    notes = list(oracle.notes)
    if diverged:
        notes.append(f"{diverged} diverged trial(s) excluded")
    return GapReport(mode=oracle.mode, gap_mean=mean, running_average=running, phi_star=star,
                     time_averaged=float(mean.mean()), tail_average=float(tail.mean()),
                     max_after_burnin=float(burn.max()), trial_count=len(full), diverged=diverged,
                     per_trial=per_trial, notes=notes)


def steady_state_error(record, scenario: Scenario, objective: AdversaryObjective,
                       constants: TheoryConstants | None = None) -> dict:
    """``Phi(theta_k, y_{k+1}) - Phi(theta_k, h(theta_k))`` per iteration.

    With ``constants`` the bound ``sqrt(mu My^2 Mg^2 / (2 a2) V)`` is added,
    using the proxy ``V = a2 |x_k - x_ss(theta_k)|^2`` on the logged states.
    """
    try:
        h = steady_map(scenario)
    except OracleUnavailableError as exc:
        raise OracleUnavailableError(f"steady-state error unavailable: {exc}") from None
    refs = objective.reference.values(record.k)
    err = np.asarray(record.phi) - composite_value(h, objective, record.theta, refs)
    out = {"k": np.asarray(record.k), "error": err, "bound": None}
    if constants is not None and record.x_pre.shape[-1]:
        mu, _ = convergence_rate_mu(constants)
        xss = np.stack([scenario.steady_state(t) for t in record.theta])
        V = constants.alpha2 * np.sum((record.x_pre - xss) ** 2, axis=1)
        coef = max(mu, 0.0) * constants.M_y**2 * constants.M_g**2 / (2 * constants.alpha2)
        out["bound"] = np.sqrt(coef * V)
    return out


# ---------------------------------------------------------------------------
# ensemble statistics


def boxplot_stats(values) -> dict:
    """Median, quartiles (linear interpolation), 1.5 IQR whiskers and outliers."""
    v = np.asarray(values, dtype=float).ravel()
    q1, med, q3 = np.percentile(v, [25, 50, 75])
    iqr = q3 - q1
    lo_fence, hi_fence = q1 - 1.5 * iqr, q3 + 1.5 * iqr
    inside = v[(v >= lo_fence) & (v <= hi_fence)]
    out = v[(v < lo_fence) | (v > hi_fence)]
    return {"mean": float(v.mean()), "median": float(med), "q1": float(q1), "q3": float(q3),
            "whisker_low": float(inside.min()), "whisker_high": float(inside.max()),
            "outliers": int(out.size), "count": int(v.size)}


def ensemble_statistics(records: Sequence, quantity: str | Callable = "y") -> dict:
    """Per-iteration boxplot statistics across trials plus a pooled summary."""
    if len(records) < 2:
        raise ConfigurationError("ensemble statistics need at least two records")
    get = quantity if callable(quantity) else (lambda r: getattr(r, quantity))
    rows = min(r.rows for r in records)
    data = np.stack([np.asarray(get(r), dtype=float).reshape(r.rows, -1)[:rows, 0] for r in records])
    q1, med, q3 = np.percentile(data, [25, 50, 75], axis=0)
    iqr = q3 - q1
    lo, hi = q1 - 1.5 * iqr, q3 + 1.5 * iqr
    outl = (data < lo) | (data > hi)
    return {
        "mean": data.mean(axis=0), "median": med, "q1": q1, "q3": q3,
        "whisker_low": np.where(outl, np.inf, data).min(axis=0),
        "whisker_high": np.where(outl, -np.inf, data).max(axis=0),
        "outliers": outl.sum(axis=0), "pooled": boxplot_stats(data),
    }
