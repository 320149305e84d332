"""Hot loop of the closed-loop attack, with a numba and a pure-numpy backend.

Both backends consume pre-drawn probes and noise and perform the same
floating-point operations in the same order, so they agree to the last bit on
linear plants (the tanh plant may differ by libm rounding).

Backend choice: ``ZOFDI_BACKEND=numpy`` forces the fallback; otherwise numba is
used when importable.
"""

from __future__ import annotations

import os
import warnings

import numpy as np

BACKEND_ENV = "ZOFDI_BACKEND"

LINEAR = 0
TANH = 1

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAVE_NUMBA = False


def _jit(fn):
    if not HAVE_NUMBA:
        return fn
    return numba.njit(cache=True, nogil=True, error_model="numpy")(fn)


def default_backend() -> str:
    want = os.environ.get(BACKEND_ENV, "numba").strip().lower()
    if want not in ("numba", "numpy"):
        raise ValueError(f"{BACKEND_ENV} must be 'numba' or 'numpy', got {want!r}")
    if want == "numba" and not HAVE_NUMBA:
        warnings.warn("numba not importable; using the numpy backend", RuntimeWarning, stacklevel=2)
        return "numpy"
    return want


# ---------------------------------------------------------------------------
# scalar kernel, compiled when numba is present


@_jit
def _plant_step(kind, gain, acl, G, x, th, d, out):
    n = x.shape[0]
    p = th.shape[0]
    for i in range(n):
        acc = 0.0
        if kind == LINEAR:
            for j in range(n):
                acc += acl[i, j] * x[j]
        else:
            acc = gain * np.tanh(x[i])
        acc += d
        for j in range(p):
            acc += G[i, j] * th[j]
        out[i] = acc


@_jit
def _cost(C, Q, x, th, d, ref, y):
    q = C.shape[0]
    n = x.shape[0]
    p = th.shape[0]
    ss = 0.0
    for i in range(q):
        acc = 0.0
        for j in range(n):
            acc += C[i, j] * x[j]
        acc += d
        y[i] = acc
        r = acc - ref[i]
        ss += r * r
    quad = 0.0
    for i in range(p):
        for j in range(p):
            quad += th[i] * Q[i, j] * th[j]
    return np.sqrt(ss) + quad


@_jit
def _advance(kind, gain, acl, G, x, th, noise_row, base, hold, limit, buf):
    """Hold ``th`` for ``hold`` plant steps; returns False on divergence."""
    n = x.shape[0]
    for s in range(hold):
        _plant_step(kind, gain, acl, G, x, th, noise_row[base + s], buf)
        for i in range(n):
            x[i] = buf[i]
        for i in range(n):
            if not (abs(x[i]) <= limit):
                return False
    return True


def _attack_loop_scalar(kind, gain, acl, C, G, Q, x0, w1, probes, noise, refs, delta, eta, R,
                        hold, zero_attack, limit, store_states, W, TH, Y, PHI, GR, X, done):
    N = w1.shape[0]
    T = probes.shape[1] - 1
    n = x0.shape[0]
    p = w1.shape[1]
    q = C.shape[0]
    x = np.empty(n)
    buf = np.empty(n)
    w = np.empty(p)
    th = np.empty(p)
    u = np.empty(p)
    y = np.empty(q)
    scale = p / delta if delta > 0 else 0.0
    sqrt_r = np.sqrt(R)
    for t in range(N):
        done[t] = -1
        for i in range(n):
            x[i] = x0[i]
        for j in range(p):
            w[j] = w1[t, j]
        for j in range(p):
            th[j] = 0.0 if zero_attack else w[j] + delta * probes[t, 0, j]
        if not _advance(kind, gain, acl, G, x, th, noise[t], 0, hold, limit, buf):
            continue
        done[t] = 0
        phi_prev = _cost(C, Q, x, th, noise[t, hold - 1], refs[0], y)
        for k in range(1, T + 1):
            r = k - 1
            if store_states:
                for i in range(n):
                    X[t, r, i] = x[i]
            for j in range(p):
                th[j] = 0.0 if zero_attack else w[j] + delta * probes[t, k, j]
            if not _advance(kind, gain, acl, G, x, th, noise[t], k * hold, hold, limit, buf):
                break
            phi = _cost(C, Q, x, th, noise[t, k * hold + hold - 1], refs[k], y)
            c = scale * (phi - phi_prev)
            for j in range(p):
                W[t, r, j] = w[j]
                TH[t, r, j] = th[j]
                GR[t, r, j] = 0.0 if zero_attack else c * probes[t, k, j]
            for i in range(q):
                Y[t, r, i] = y[i]
            PHI[t, r] = phi
            done[t] = k
            phi_prev = phi
            if zero_attack:
                continue
            n2 = 0.0
            for j in range(p):
                u[j] = w[j] - eta * GR[t, r, j]
                n2 += u[j] * u[j]
            if not (n2 <= R):
                if not np.isfinite(n2):
                    break
                s = sqrt_r / np.sqrt(n2)
                for j in range(p):
                    w[j] = u[j] * s
            else:
                for j in range(p):
                    w[j] = u[j]


_attack_loop_nb = _jit(_attack_loop_scalar) if HAVE_NUMBA else None


# ---------------------------------------------------------------------------
# numpy fallback, vectorised over trials


def _attack_loop_numpy(kind, gain, acl, C, G, Q, x0, w1, probes, noise, refs, delta, eta, R,
                       hold, zero_attack, limit, store_states, W, TH, Y, PHI, GR, X, done):
    N, p = w1.shape
    T = probes.shape[1] - 1
    n = x0.shape[0]
    q = C.shape[0]
    scale = p / delta if delta > 0 else 0.0
    sqrt_r = np.sqrt(R)
    x = np.repeat(x0[None, :], N, axis=0).astype(float)
    w = w1.astype(float).copy()
    alive = np.ones(N, dtype=bool)
    done[:] = -1

    def advance(th, base):
        nonlocal x
        ok = np.ones(N, dtype=bool)
        for s in range(hold):
            d = noise[:, base + s]
            nx = np.empty_like(x)
            for i in range(n):
                if kind == LINEAR:
                    acc = np.zeros(N)
                    for j in range(n):
                        acc = acc + acl[i, j] * x[:, j]
                else:
                    acc = gain * np.tanh(x[:, i])
                acc = acc + d
                for j in range(p):
                    acc = acc + G[i, j] * th[:, j]
                nx[:, i] = acc
            x = nx
            ok &= np.all(np.abs(x) <= limit, axis=1)
        return ok

    def cost(th, d, ref):
        y = np.empty((N, q))
        ss = np.zeros(N)
        for i in range(q):
            acc = np.zeros(N)
            for j in range(n):
                acc = acc + C[i, j] * x[:, j]
            acc = acc + d
            y[:, i] = acc
            r = acc - ref[i]
            ss = ss + r * r
        quad = np.zeros(N)
        for i in range(p):
            for j in range(p):
                quad = quad + th[:, i] * Q[i, j] * th[:, j]
        return np.sqrt(ss) + quad, y

    with np.errstate(all="ignore"):
        th = np.zeros((N, p)) if zero_attack else w + delta * probes[:, 0, :]
        alive &= advance(th, 0)
        done[alive] = 0
        phi_prev, _ = cost(th, noise[:, hold - 1], refs[0])
        for k in range(1, T + 1):
            if not alive.any():
                break
            r = k - 1
            if store_states:
                X[:, r, :] = x
            th = np.zeros((N, p)) if zero_attack else w + delta * probes[:, k, :]
            alive &= advance(th, k * hold)
            phi, y = cost(th, noise[:, k * hold + hold - 1], refs[k])
            c = scale * (phi - phi_prev)
            g = np.zeros((N, p)) if zero_attack else c[:, None] * probes[:, k, :]
            W[alive, r] = w[alive]
            TH[alive, r] = th[alive]
            GR[alive, r] = g[alive]
            Y[alive, r] = y[alive]
            PHI[alive, r] = phi[alive]
            done[alive] = k
            phi_prev = phi
            if zero_attack:
                continue
            u = w - eta * g
            n2 = np.zeros(N)
            for j in range(p):
                n2 = n2 + u[:, j] * u[:, j]
            alive &= np.isfinite(n2)
            out = ~(n2 <= R)
            s = np.where(out, sqrt_r / np.sqrt(np.where(out, n2, 1.0)), 1.0)
            w = np.where(out[:, None], u * s[:, None], u)


def attack_loop(kind, gain, acl, C, G, Q, x0, w1, probes, noise, refs, *, delta, eta, R, hold=1,
                zero_attack=False, limit=1e12, store_states=True, backend=None):
    """Run the closed-loop attack for a batch of trials.

    Parameters
    ----------
    probes : (N, T+1, p) probe vectors, row 0 is the bootstrap probe.
    noise : (N, (T+1)*hold) scalar noise per plant step.
    refs : (T+1, q) reference values.

    Returns
    -------
    dict of arrays ``w, theta, y, phi, grad, x`` (iteration-major per trial) and
    ``done`` (completed iterations per trial; fewer than T means divergence,
    -1 means the bootstrap step already diverged).
    """
    backend = backend or default_backend()
    f64 = lambda a: np.ascontiguousarray(a, dtype=np.float64)  # noqa: E731
    acl, C, G, Q, x0, w1, probes, noise, refs = map(f64, (acl, C, G, Q, x0, w1, probes, noise, refs))
    N, p = w1.shape
    T = probes.shape[1] - 1
    n, q = x0.shape[0], C.shape[0]
    W = np.zeros((N, T, p))
    TH = np.zeros((N, T, p))
    Y = np.zeros((N, T, q))
    PHI = np.zeros((N, T))
    GR = np.zeros((N, T, p))
    X = np.zeros((N, T if store_states else 0, n))
    done = np.zeros(N, dtype=np.int64)
    args = (int(kind), float(gain), acl, C, G, Q, x0, w1, probes, noise, refs, float(delta), float(eta),
            float(R), int(hold), bool(zero_attack), float(limit), bool(store_states), W, TH, Y, PHI, GR, X, done)
    if backend == "numba":
        if _attack_loop_nb is None:  # pragma: no cover
            raise RuntimeError("numba backend requested but numba is unavailable")
        _attack_loop_nb(*args)
    elif backend == "numpy":
        _attack_loop_numpy(*args)
    else:
        raise ValueError(f"unknown backend {backend!r}")
    return {"w": W, "theta": TH, "y": Y, "phi": PHI, "grad": GR, "x": X, "done": done}
