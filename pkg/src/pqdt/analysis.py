"""Reconstruction quality and phase-space pictures of phase-insensitive POVMs.

Fidelities compare diagonal operators column by column.  Wigner functions use

    W(x, p) = sum_k theta_k (-1)**k / pi * exp(-(x**2 + p**2)) * L_k(2 (x**2 + p**2)),

which integrates to ``sum(theta)`` over the plane.  The Laguerre sum cancels
catastrophically for large k, so it is carried out in MPFR floats with a
chosen mantissa and a very wide exponent, and only the final value is rounded
to double precision.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import gmpy2
import numpy as np

DEFAULT_OCCUPANCY = 1e-3
DEFAULT_BITS = 70


def _values(x) -> np.ndarray:
    return np.asarray(getattr(x, "values", x), dtype=np.float64)


def fidelity(a, b) -> float:
    """Fidelity of two diagonal operators given by their weights."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if np.any(a < 0) or np.any(b < 0):
        raise ValueError("fidelity needs non-negative weights")
    ta, tb = a.sum(), b.sum()
    if ta == 0 or tb == 0:
        return 0.0
    # Normalise first so the product cannot overflow or underflow.
    f = float(np.sum(np.sqrt((a / ta) * (b / tb)))) ** 2
    return min(f, 1.0)


def column_fidelities(A, B) -> np.ndarray:
    A, B = _values(A), _values(B)
    if A.shape != B.shape:
        raise ValueError(f"shape mismatch {A.shape} vs {B.shape}")
    return np.array([fidelity(A[:, n], B[:, n]) for n in range(A.shape[1])])


@dataclass
class FidelityReport:
    fidelity: np.ndarray
    occupied: np.ndarray
    threshold: float = DEFAULT_OCCUPANCY

    @property
    def infidelity(self) -> np.ndarray:
        return 1.0 - self.fidelity

    @property
    def mean_occupied(self) -> float:
        return float(self.fidelity[self.occupied].mean()) if self.occupied.any() else float("nan")

    @property
    def min_occupied(self) -> float:
        return float(self.fidelity[self.occupied].min()) if self.occupied.any() else float("nan")

    def passes(self, gate: float = 0.99) -> bool:
        return bool(np.all(self.fidelity[self.occupied] >= gate))

    def to_dict(self) -> dict:
        return {
            "fidelity": self.fidelity.tolist(),
            "infidelity": self.infidelity.tolist(),
            "occupied": self.occupied.tolist(),
            "occupancy_threshold": self.threshold,
            "mean_occupied": self.mean_occupied,
            "min_occupied": self.min_occupied,
        }


def infidelity_report(Pi_rec, Pi_theo, occupancy_threshold: float = DEFAULT_OCCUPANCY) -> FidelityReport:
    """Per-outcome fidelities; outcome n counts as occupied when its analytic
    trace exceeds ``occupancy_threshold`` times the largest trace."""
    T = _values(Pi_theo)
    traces = T.sum(axis=0)
    occupied = traces > occupancy_threshold * traces.max()
    return FidelityReport(column_fidelities(Pi_rec, T), occupied, occupancy_threshold)


# ---------------------------------------------------------------------------
# Wigner functions


@dataclass
class WignerGrid:
    x: np.ndarray
    p: np.ndarray
    values: np.ndarray  # values[ix, ip]
    precision_bits: int

    def argmin(self) -> tuple[float, float, float]:
        ix, ip = np.unravel_index(np.argmin(self.values), self.values.shape)
        return float(self.x[ix]), float(self.p[ip]), float(self.values[ix, ip])

    def integral(self) -> float:
        return float(np.trapezoid(np.trapezoid(self.values, self.p, axis=1), self.x))


def make_grid(x_range=(-3.0, 3.0), p_range=None, nx: int = 101, np_: int | None = None):
    p_range = x_range if p_range is None else p_range
    np_ = nx if np_ is None else np_

    def axis(r, n):
        # a single point sits at the centre of the window
        return np.array([0.5 * (r[0] + r[1])]) if n == 1 else np.linspace(*r, n)

    return axis(x_range, nx), axis(p_range, np_)


def _mpfr_context(bits: int):
    return gmpy2.context(precision=bits, emax=gmpy2.get_emax_max(), emin=gmpy2.get_emin_min())


def wigner_radial(theta, r2, precision_bits: int = DEFAULT_BITS) -> np.ndarray:
    """W at squared radii ``r2`` (the function depends on x, p only through x**2 + p**2)."""
    if precision_bits < 53:
        raise ValueError("precision_bits must be at least 53")
    theta = np.asarray(theta, dtype=np.float64)
    if theta.ndim != 1 or not np.all(np.isfinite(theta)) or np.any(theta < 0):
        raise ValueError("theta must be a finite, non-negative vector")
    nz = np.flatnonzero(theta)
    theta = theta[: nz[-1] + 1] if nz.size else theta[:1]
    r2 = np.atleast_1d(np.asarray(r2, dtype=np.float64))
    out = np.empty(r2.shape)
    with _mpfr_context(precision_bits):
        coeffs = [gmpy2.mpfr(float(t)) if k % 2 == 0 else -gmpy2.mpfr(float(t))
                  for k, t in enumerate(theta)]
        inv_pi = 1 / gmpy2.const_pi()
        for j, s in enumerate(r2.flat):
            z = 2 * gmpy2.mpfr(float(s))
            l_prev, l_cur = gmpy2.mpfr(0), gmpy2.mpfr(1)
            acc = coeffs[0]
            for k in range(1, len(coeffs)):
                # (k) L_k = (2k - 1 - z) L_{k-1} - (k - 1) L_{k-2}
                l_prev, l_cur = l_cur, ((2 * k - 1 - z) * l_cur - (k - 1) * l_prev) / k
                if coeffs[k]:
                    acc += coeffs[k] * l_cur
            w = acc * gmpy2.exp(-z / 2) * inv_pi
            if not gmpy2.is_finite(w):
                raise OverflowError(f"Wigner sum overflowed at k={len(coeffs) - 1}, z={float(z)}")
            out.flat[j] = float(w)
    return out


def wigner_diag(theta, grid=None, precision_bits: int = DEFAULT_BITS) -> WignerGrid:
    """Wigner function of ``diag(theta)`` on ``grid = (x, p)``."""
    x, p = make_grid() if grid is None else (np.atleast_1d(np.asarray(g, dtype=np.float64))
                                              for g in grid)
    r2 = x[:, None] ** 2 + p[None, :] ** 2
    uniq, inv = np.unique(r2, return_inverse=True)
    vals = wigner_radial(theta, uniq, precision_bits)[inv].reshape(r2.shape)
    return WignerGrid(x, p, vals, precision_bits)


@dataclass
class PrecisionSweep:
    bits: list[int]
    max_deviation: list[float]
    stable_bits: int | None

    def to_dict(self) -> dict:
        return {"bits": self.bits, "max_deviation": self.max_deviation,
                "stable_bits": self.stable_bits}


def wigner_precision_sweep(theta, grid, bits_list) -> PrecisionSweep:
    """Compare down-converted grids for each mantissa size against the largest one.

    ``stable_bits`` is the smallest size from which every larger size in the
    list gives bit-identical doubles.
    """
    bits = [int(b) for b in bits_list]
    if not bits:
        raise ValueError("bits_list is empty")
    if bits != sorted(bits):
        raise ValueError("bits_list must be ascending")
    x, p = (np.atleast_1d(np.asarray(g, dtype=np.float64)) for g in grid)
    r2 = np.unique(x[:, None] ** 2 + p[None, :] ** 2)
    runs = [wigner_radial(theta, r2, b) for b in bits]
    ref = runs[-1]
    dev = [float(np.max(np.abs(r - ref))) for r in runs]
    stable = None
    for i in range(len(bits) - 1, -1, -1):
        if np.array_equal(runs[i], ref):
            stable = bits[i]
        else:
            break
    return PrecisionSweep(bits, dev, stable)


# ---------------------------------------------------------------------------
# Plot data


def emit_plot_data(obj, path, log_bins: int | None = None) -> None:
    """Write a POVM heatmap ``(i, n, value)`` or a Wigner grid ``(x, p, W)`` as CSV.

    With ``log_bins`` the POVM rows are averaged over logarithmically spaced
    bins of photon number; ``i`` is then the first photon number of each bin.
    """
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        if isinstance(obj, WignerGrid):
            w.writerow(["x", "p", "W"])
            for ix, xv in enumerate(obj.x):
                for ip, pv in enumerate(obj.p):
                    w.writerow([repr(float(xv)), repr(float(pv)), repr(float(obj.values[ix, ip]))])
            return
        A = _values(obj)
        rows = np.arange(A.shape[0])
        if log_bins:
            edges = np.unique(np.concatenate(
                [[0], np.geomspace(1, A.shape[0], log_bins).astype(np.int64)]))
            edges[-1] = A.shape[0]
            A = np.array([A[a:b].mean(axis=0) for a, b in zip(edges[:-1], edges[1:])])
            rows = edges[:-1]
        w.writerow(["i", "n", "value"])
        for r, i in enumerate(rows):
            for n in range(A.shape[1]):
                w.writerow([int(i), n, repr(float(A[r, n]))])


def read_plot_data(path) -> np.ndarray:
    return np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
