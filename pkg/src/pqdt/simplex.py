"""Euclidean projection onto the probability simplex.

``project_simplex`` uses Condat's linear-time pivoting scheme and is the
routine the solver calls.  ``project_simplex_reference`` is the classic
sort-and-threshold method and is kept as an independent oracle.
"""
from __future__ import annotations

import os

import numpy as np
from numba import njit

_EPS = np.finfo(np.float64).eps


@njit(cache=True)
def _feasible(x):
    n = x.shape[0]
    s = 0.0
    for i in range(n):
        if x[i] < 0.0:
            return False
        s += x[i]
    return abs(s - 1.0) <= 4.0 * n * 2.220446049250313e-16


@njit(cache=True)
def _condat_threshold(y, v, vt):
    """Threshold tau of the projection of ``y``; ``v`` and ``vt`` are scratch buffers."""
    n = y.shape[0]
    nv = 1
    nt = 0
    v[0] = y[0]
    rho = y[0] - 1.0
    for k in range(1, n):
        yk = y[k]
        if yk > rho:
            rho += (yk - rho) / (nv + 1)
            if rho > yk - 1.0:
                v[nv] = yk
                nv += 1
            else:
                for j in range(nv):
                    vt[nt] = v[j]
                    nt += 1
                v[0] = yk
                nv = 1
                rho = yk - 1.0
    for j in range(nt):
        if vt[j] > rho:
            v[nv] = vt[j]
            nv += 1
            rho += (vt[j] - rho) / nv
    while True:
        before = nv
        kept = 0
        for j in range(before):
            if v[j] > rho:
                v[kept] = v[j]
                kept += 1
            else:
                nv -= 1
                rho += (rho - v[j]) / nv
        nv = kept
        if nv == before:
            break
    return rho


@njit(cache=True)
def _project_into(x, out, y, v, vt):
    n = x.shape[0]
    if _feasible(x):
        for i in range(n):
            out[i] = x[i]
        return
    # Work relative to the maximum so that exact shifts of x give identical output.
    m = x[0]
    for i in range(1, n):
        if x[i] > m:
            m = x[i]
    for i in range(n):
        y[i] = x[i] - m
    tau = _condat_threshold(y, v, vt)
    for i in range(n):
        d = y[i] - tau
        out[i] = d if d > 0.0 else 0.0


@njit(cache=True)
def _project_rows_kernel(a, out):
    n = a.shape[1]
    y = np.empty(n)
    v = np.empty(n)
    vt = np.empty(n)
    for i in range(a.shape[0]):
        _project_into(a[i], out[i], y, v, vt)


def _debug() -> bool:
    return os.environ.get("PQDT_DEBUG", "") not in ("", "0")


def check_projection(x: np.ndarray, y: np.ndarray, tol: float = 1e-10) -> None:
    """Raise unless ``y`` rows are ``max(x - tau, 0)`` for some per-row tau and sum to one."""
    x, y = np.atleast_2d(x), np.atleast_2d(y)
    for xr, yr in zip(x, y):
        if np.any(yr < 0) or abs(yr.sum() - 1.0) > tol * max(1, xr.size):
            raise AssertionError("projection left the simplex")
        pos = yr > 0
        tau = np.mean(xr[pos] - yr[pos])
        scale = 1.0 + np.max(np.abs(xr))
        if np.any(np.abs(xr[pos] - yr[pos] - tau) > tol * scale) or np.any(xr[~pos] > tau + tol * scale):
            raise AssertionError("projection is not of the form max(x - tau, 0)")


def _as_vector(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError(f"expected a 1-D vector, got shape {x.shape}")
    if x.size == 0:
        raise ValueError("cannot project an empty vector onto the simplex")
    if not np.all(np.isfinite(x)):
        raise ValueError("vector contains non-finite entries")
    return x


def project_simplex(x) -> np.ndarray:
    """Closest point to ``x`` on ``{y : y >= 0, sum(y) = 1}`` (Condat's method)."""
    x = _as_vector(x)
    out = np.empty_like(x)
    _project_rows_kernel(x[None, :], out[None, :])
    if _debug():
        check_projection(x, out)
    return out


def simplex_threshold(x) -> float:
    """The tau with ``project_simplex(x) == max(x - tau, 0)``."""
    x = _as_vector(x)
    n = x.size
    return float(_condat_threshold(x.copy(), np.empty(n), np.empty(n)))


def project_simplex_reference(x) -> np.ndarray:
    """Sort-based O(N log N) projection, used to cross-check ``project_simplex``."""
    x = _as_vector(x)
    u = np.sort(x)[::-1]
    css = np.cumsum(u) - 1.0
    k = np.arange(1, x.size + 1)
    rho = np.nonzero(u - css / k > 0)[0][-1]
    tau = css[rho] / (rho + 1)
    return np.maximum(x - tau, 0.0)


def project_rows(a) -> np.ndarray:
    """Project every row of ``a`` onto the simplex independently."""
    a = np.ascontiguousarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"expected a 2-D array, got shape {a.shape}")
    if a.shape[1] == 0:
        raise ValueError("cannot project rows of length zero")
    if not np.all(np.isfinite(a)):
        raise ValueError("matrix contains non-finite entries")
    out = np.empty_like(a)
    _project_rows_kernel(a, out)
    if _debug():
        check_projection(a, out)
    return out


def clamp_nonneg(a) -> np.ndarray:
    return np.maximum(np.asarray(a, dtype=np.float64), 0.0)
