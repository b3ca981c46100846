"""Time-stepping kernels for the two-sided book.

Two implementations of the same scheme live here: a numba ``@njit`` loop and a
vectorised numpy loop. ``run_book`` dispatches to numba unless numba is missing
or the environment variable ``LOBSTEFAN_PURE_NUMPY`` is set to a truthy value.

One step, from row ``k`` to ``k + 1`` (all profiles are densities):

1. boundary velocity from the one-sided slopes of row ``k``;
2. explicit diffusion with ghost 0 at ``x = 0`` and a replicated ghost past
   the far end;
3. additive noise increments (already scaled to density units);
4. mid-price moves by ``velocity * dt``; both profiles are linearly
   re-interpolated onto the grid relative to the new mid;
5. negative densities are clamped to 0.
"""
from __future__ import annotations

import math
import os

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover - numba is a hard dependency in practice
    numba = None

PURE_NUMPY = os.environ.get("LOBSTEFAN_PURE_NUMPY", "").strip().lower() in {"1", "true", "yes", "on"}
USE_NUMBA = numba is not None and not PURE_NUMPY


# ---------------------------------------------------------------------------
# numpy path
# ---------------------------------------------------------------------------
def diffuse_np(v: np.ndarray, r: float) -> np.ndarray:
    left = np.empty_like(v)
    left[0] = 0.0
    left[1:] = v[:-1]
    right = np.empty_like(v)
    right[:-1] = v[1:]
    right[-1] = v[-1]
    return v + r * (right - 2.0 * v + left)


def shift_np(v: np.ndarray, s: float) -> np.ndarray:
    """Sample ``v`` at fractional cell positions ``j + s``.

    Position -1 is the boundary (value 0); anything left of it is 0 and
    anything past the last cell takes the last value.
    """
    n = v.shape[0]
    pad = np.empty(n + 2)
    pad[0] = 0.0
    pad[1:-1] = v
    pad[-1] = v[-1]
    pos = np.arange(n) + s
    i0 = np.floor(pos)
    f = pos - i0
    i0 = i0.astype(np.int64)

    def take(i):
        out = pad[np.clip(i + 1, 0, n + 1)]
        return np.where(i < -1, 0.0, out)

    return (1.0 - f) * take(i0) + f * take(i0 + 1)


def run_book_np(ask0, bid0, mid0, r_ask, r_bid, noise_ask, noise_bid, dx, dt, rho, threshold, n_steps):
    n = ask0.shape[0]
    ask_path = np.zeros((n_steps + 1, n))
    bid_path = np.zeros((n_steps + 1, n))
    mid_path = np.zeros(n_steps + 1)
    drift = np.zeros(n_steps)
    ask_path[0] = ask0
    bid_path[0] = bid0
    mid_path[0] = mid0
    noisy = noise_ask.shape[0] > 0
    a = ask0.copy()
    b = bid0.copy()
    mid = mid0
    for k in range(n_steps):
        vel = (a[0] - b[0]) / (dx * rho)
        if not math.isfinite(vel) or abs(vel) >= threshold:
            drift[k] = vel
            return ask_path, bid_path, mid_path, drift, k
        drift[k] = vel
        na = diffuse_np(a, r_ask)
        nb = diffuse_np(b, r_bid)
        if noisy:
            na = na + noise_ask[k]
            nb = nb + noise_bid[k]
        mid = mid + vel * dt
        s = vel * dt / dx
        if s != 0.0:
            na = shift_np(na, s)
            nb = shift_np(nb, -s)
        a = np.maximum(na, 0.0)
        b = np.maximum(nb, 0.0)
        ask_path[k + 1] = a
        bid_path[k + 1] = b
        mid_path[k + 1] = mid
    return ask_path, bid_path, mid_path, drift, -1


# ---------------------------------------------------------------------------
# numba path
# ---------------------------------------------------------------------------
if numba is not None:

    @numba.njit(cache=True)
    def _diffuse_nb(v, r, out):
        n = v.shape[0]
        for j in range(n):
            left = v[j - 1] if j > 0 else 0.0
            right = v[j + 1] if j < n - 1 else v[n - 1]
            out[j] = v[j] + r * (right - 2.0 * v[j] + left)

    @numba.njit(cache=True)
    def _take_nb(v, i):
        n = v.shape[0]
        if i < 0:
            return 0.0
        if i >= n:
            return v[n - 1]
        return v[i]

    @numba.njit(cache=True)
    def _shift_nb(v, s, out):
        n = v.shape[0]
        for j in range(n):
            pos = j + s
            i0 = math.floor(pos)
            f = pos - i0
            k = int(i0)
            out[j] = (1.0 - f) * _take_nb(v, k) + f * _take_nb(v, k + 1)

    @numba.njit(cache=True)
    def run_book_nb(ask0, bid0, mid0, r_ask, r_bid, noise_ask, noise_bid, dx, dt, rho, threshold, n_steps):
        n = ask0.shape[0]
        ask_path = np.zeros((n_steps + 1, n))
        bid_path = np.zeros((n_steps + 1, n))
        mid_path = np.zeros(n_steps + 1)
        drift = np.zeros(n_steps)
        ask_path[0, :] = ask0
        bid_path[0, :] = bid0
        mid_path[0] = mid0
        noisy = noise_ask.shape[0] > 0
        a = ask0.copy()
        b = bid0.copy()
        na = np.empty(n)
        nb = np.empty(n)
        mid = mid0
        for k in range(n_steps):
            vel = (a[0] - b[0]) / (dx * rho)
            drift[k] = vel
            if not math.isfinite(vel) or abs(vel) >= threshold:
                return ask_path, bid_path, mid_path, drift, k
            _diffuse_nb(a, r_ask, na)
            _diffuse_nb(b, r_bid, nb)
            if noisy:
                for j in range(n):
                    na[j] = na[j] + noise_ask[k, j]
                    nb[j] = nb[j] + noise_bid[k, j]
            mid = mid + vel * dt
            s = vel * dt / dx
            if s != 0.0:
                _shift_nb(na, s, a)
                _shift_nb(nb, -s, b)
            else:
                a[:] = na
                b[:] = nb
            for j in range(n):
                if a[j] < 0.0:
                    a[j] = 0.0
                if b[j] < 0.0:
                    b[j] = 0.0
            ask_path[k + 1, :] = a
            bid_path[k + 1, :] = b
            mid_path[k + 1] = mid
        return ask_path, bid_path, mid_path, drift, -1

else:  # pragma: no cover
    run_book_nb = None


def run_book(ask0, bid0, mid0, r_ask, r_bid, noise_ask, noise_bid, dx, dt, rho, threshold, n_steps, *, backend=None):
    """Advance both profiles ``n_steps`` times.

    Returns ``(ask_path, bid_path, mid_path, drift, stop)`` where ``stop`` is the
    index of the step whose velocity reached ``threshold`` (rows after it are
    unfilled) or -1 when the run completed.
    """
    if backend is None:
        backend = "numba" if USE_NUMBA else "numpy"
    args = (
        np.ascontiguousarray(ask0, dtype=np.float64),
        np.ascontiguousarray(bid0, dtype=np.float64),
        float(mid0),
        float(r_ask),
        float(r_bid),
        np.ascontiguousarray(noise_ask, dtype=np.float64),
        np.ascontiguousarray(noise_bid, dtype=np.float64),
        float(dx),
        float(dt),
        float(rho),
        float(threshold),
        int(n_steps),
    )
    if backend == "numba":
        if run_book_nb is None:
            raise RuntimeError("numba backend requested but numba is not importable")
        ask, bid, mid, drift, stop = run_book_nb(*args)
        return ask, bid, mid, drift, int(stop)
    if backend == "numpy":
        return run_book_np(*args)
    raise ValueError(f"unknown backend {backend!r}")
