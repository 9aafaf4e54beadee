"""Hot numeric kernels, each with a numba twin and a pure-numpy twin.

Public entry points (mix_components, biquad, grid_sse, min_sqdist) dispatch
to one twin based on _accel.NUMBA_ENABLED. The twins themselves are module
level and importable so tests can check agreement and the benchmark can
time both.

Twin-agreement notes:
  * min_sqdist twins are bitwise identical: both use the same 3-term
    sequential sum per point pair and numba's default (no fastmath, no FMA)
    float semantics. Do not "optimize" the reduction order.
  * mix_components twins agree to ~1e-12 relative: the loop twin generates
    each damped sinusoid with its exact 2-pole recurrence (cheap per
    sample), the numpy twin evaluates the closed form with vectorized
    transcendentals.
"""
from __future__ import annotations

import numpy as np

from ._accel import NUMBA_ENABLED, jit

# envelope support is cut where exp(-lam*t) falls below e^-18 (~1.5e-8)
_ENVELOPE_CUT = 18.0


@jit
def _component_span(lam, fs):
    return int(_ENVELOPE_CUT / lam * fs) + 2


# ------------------------------------------------------------------
# damped-sinusoid mixdown
# ------------------------------------------------------------------

def mix_components_numpy(n, fs, onset_s, delays, gains, freqs, decays, amps, phases):
    """Sum damped cosines a*exp(-lam*t)*cos(w*t+ph) onto S sensor channels.

    Each sensor s hears every component delayed by delays[s] seconds and
    scaled by gains[s]; the waveform is sampled at t_rel = i/fs - onset -
    delay, which realizes fractional delays exactly.
    """
    S = delays.shape[0]
    K = freqs.shape[0]
    out = np.zeros((S, n))
    times = np.arange(n) / fs
    for s in range(S):
        t0 = onset_s + delays[s]
        i0 = max(0, int(np.ceil(t0 * fs)))
        for k in range(K):
            lam = decays[k]
            i1 = min(n, i0 + _component_span(lam, fs))
            if i0 >= i1:
                continue
            tr = times[i0:i1] - t0
            w = 2.0 * np.pi * freqs[k]
            out[s, i0:i1] += (amps[k] * gains[s]) * np.exp(-lam * tr) * np.cos(w * tr + phases[k])
    return out


def _mix_components_loop(n, fs, onset_s, delays, gains, freqs, decays, amps, phases):
    S = delays.shape[0]
    K = freqs.shape[0]
    out = np.zeros((S, n))
    dt = 1.0 / fs
    for s in range(S):
        t0 = onset_s + delays[s]
        i0 = int(np.ceil(t0 * fs))
        if i0 < 0:
            i0 = 0
        for k in range(K):
            lam = decays[k]
            i1 = i0 + _component_span(lam, fs)
            if i1 > n:
                i1 = n
            if i0 >= i1:
                continue
            w = 2.0 * np.pi * freqs[k]
            a = amps[k] * gains[s]
            # exact 2-pole recurrence for a damped cosine of any phase
            r = np.exp(-lam * dt)
            c1 = 2.0 * r * np.cos(w * dt)
            c2 = r * r
            tr = i0 * dt - t0
            y2 = a * np.exp(-lam * tr) * np.cos(w * tr + phases[k])
            out[s, i0] += y2
            if i0 + 1 >= i1:
                continue
            tr1 = tr + dt
            y1 = a * np.exp(-lam * tr1) * np.cos(w * tr1 + phases[k])
            out[s, i0 + 1] += y1
            for i in range(i0 + 2, i1):
                y0 = c1 * y1 - c2 * y2
                out[s, i] += y0
                y2 = y1
                y1 = y0
    return out


_mix_components_jit = jit(_mix_components_loop)


def mix_components(n, fs, onset_s, delays, gains, freqs, decays, amps, phases):
    f = _mix_components_jit if NUMBA_ENABLED else mix_components_numpy
    return f(int(n), float(fs), float(onset_s),
             np.ascontiguousarray(delays, dtype=np.float64),
             np.ascontiguousarray(gains, dtype=np.float64),
             np.ascontiguousarray(freqs, dtype=np.float64),
             np.ascontiguousarray(decays, dtype=np.float64),
             np.ascontiguousarray(amps, dtype=np.float64),
             np.ascontiguousarray(phases, dtype=np.float64))


# ------------------------------------------------------------------
# biquad lowpass (transposed direct form II)
# ------------------------------------------------------------------

def _biquad_loop(x, b0, b1, b2, a1, a2):
    y = np.empty_like(x)
    z1 = 0.0
    z2 = 0.0
    for i in range(x.shape[0]):
        xi = x[i]
        yi = b0 * xi + z1
        z1 = b1 * xi + z2 - a1 * yi
        z2 = b2 * xi - a2 * yi
        y[i] = yi
    return y


_biquad_jit = jit(_biquad_loop)


def biquad_numpy(x, b0, b1, b2, a1, a2):
    from scipy.signal import lfilter
    return lfilter([b0, b1, b2], [1.0, a1, a2], x)


def biquad(x, b0, b1, b2, a1, a2):
    x = np.ascontiguousarray(x, dtype=np.float64)
    if NUMBA_ENABLED:
        return _biquad_jit(x, float(b0), float(b1), float(b2), float(a1), float(a2))
    return biquad_numpy(x, b0, b1, b2, a1, a2)


# ------------------------------------------------------------------
# grid scoring for multilateration
# ------------------------------------------------------------------

def grid_sse_numpy(pred, obs):
    """Sum of squared TDOA residuals per candidate. pred (C,P), obs (P,) -> (C,)."""
    d = pred - obs[None, :]
    return np.einsum("cp,cp->c", d, d)


def _grid_sse_loop(pred, obs):
    C, P = pred.shape
    out = np.empty(C)
    for c in range(C):
        s = 0.0
        for p in range(P):
            d = obs[p] - pred[c, p]
            s += d * d
        out[c] = s
    return out


_grid_sse_jit = jit(_grid_sse_loop)


def grid_sse(pred, obs):
    pred = np.ascontiguousarray(pred, dtype=np.float64)
    obs = np.ascontiguousarray(obs, dtype=np.float64)
    if NUMBA_ENABLED:
        return _grid_sse_jit(pred, obs)
    return grid_sse_numpy(pred, obs)


# ------------------------------------------------------------------
# nearest-neighbor squared distances (chamfer support)
# ------------------------------------------------------------------

def min_sqdist_numpy(a, b):
    """For each row of a (N,3): min over rows of b (M,3) of squared distance."""
    n = a.shape[0]
    out = np.empty(n)
    # chunk rows of a so the (chunk, M, 3) temporary stays around ~50 MB
    step = max(1, int(2_000_000 // max(b.shape[0], 1)))
    for i0 in range(0, n, step):
        d = a[i0:i0 + step, None, :] - b[None, :, :]
        out[i0:i0 + step] = (d * d).sum(axis=2).min(axis=1)
    return out


def _min_sqdist_loop(a, b):
    n = a.shape[0]
    m = b.shape[0]
    out = np.empty(n)
    for i in range(n):
        best = np.inf
        for j in range(m):
            dx = a[i, 0] - b[j, 0]
            dy = a[i, 1] - b[j, 1]
            dz = a[i, 2] - b[j, 2]
            s = (dx * dx + dy * dy) + dz * dz
            if s < best:
                best = s
        out[i] = best
    return out


_min_sqdist_jit = jit(_min_sqdist_loop)


def min_sqdist(a, b):
    a = np.ascontiguousarray(a, dtype=np.float64)
    b = np.ascontiguousarray(b, dtype=np.float64)
    if NUMBA_ENABLED:
        return _min_sqdist_jit(a, b)
    return min_sqdist_numpy(a, b)
