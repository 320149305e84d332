"""Counter-addressed random streams.

Every draw is a pure function of ``(master_seed, trial, tag, counter)``: the
Philox key is ``[master_seed ^ trial, tag]`` and block ``counter`` yields four
64-bit words.  Bulk generation and single-index lookups return identical values,
so trials can be split across workers in any way without changing results.
"""

import numpy as np

MASK64 = (1 << 64) - 1

PROBE = 1
NOISE = 2
INIT = 3
SMOOTHING = 4

_TWO_PI = 2.0 * np.pi
_INV_2_53 = 1.0 / 9007199254740992.0


def trial_key(seed, trial, tag):
    return np.array([(int(seed) ^ int(trial)) & MASK64, int(tag) & MASK64], dtype=np.uint64)


def raw_blocks(seed, trial, tag, start, count):
    """Return ``(count, 4)`` uint64 words for counters ``start .. start+count-1``."""
    bg = np.random.Philox(key=trial_key(seed, trial, tag), counter=int(start))
    return bg.random_raw(4 * int(count)).reshape(int(count), 4)


def to_uniform(raw):
    """Map uint64 words onto [0, 1) with 53 bits of resolution."""
    return (raw >> np.uint64(11)).astype(np.float64) * _INV_2_53


def to_normal(raw):
    """Box-Muller on consecutive word pairs; shape ``(..., 4)`` -> ``(..., 4)``."""
    u = to_uniform(raw)
    u1 = 1.0 - u[..., 0::2]  # (0, 1]
    u2 = u[..., 1::2]
    r = np.sqrt(-2.0 * np.log(u1))
    out = np.empty(u.shape, dtype=np.float64)
    out[..., 0::2] = r * np.cos(_TWO_PI * u2)
    out[..., 1::2] = r * np.sin(_TWO_PI * u2)
    return out


def uniform_at(seed, trial, tag, start, count):
    """One U[0,1) draw per counter."""
    return to_uniform(raw_blocks(seed, trial, tag, start, count)[:, 0])


def normal_at(seed, trial, tag, start, count):
    """One standard-normal draw per counter."""
    return to_normal(raw_blocks(seed, trial, tag, start, count))[:, 0]


def sphere_points(seed, trial, tag, start, count, dim):
    """Uniform points on the unit sphere in ``dim`` dimensions, one per counter.

    Each point consumes ``ceil(dim / 4)`` consecutive blocks.  A point whose
    Gaussian pre-image is exactly zero is redrawn from a shifted tag.
    """
    dim = int(dim)
    per = -(-dim // 4)
    raw = raw_blocks(seed, trial, tag, int(start) * per, int(count) * per)
    g = to_normal(raw).reshape(int(count), per * 4)[:, :dim]
    nrm = np.sqrt(np.sum(g * g, axis=1))
    bad = np.flatnonzero(nrm == 0.0)
    for i in bad:
        retry = 1
        while nrm[i] == 0.0:
            alt = to_normal(raw_blocks(seed, trial, tag + (retry << 32), (int(start) + i) * per, per))
            g[i] = alt.reshape(per * 4)[:dim]
            nrm[i] = np.sqrt(np.sum(g[i] * g[i]))
            retry += 1
    return g / nrm[:, None]
