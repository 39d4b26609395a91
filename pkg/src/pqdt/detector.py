"""Time-multiplexed detector model: probe states, analytic POVMs, simulation, fitting."""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.special import gammaln
from scipy.stats import poisson

from .core import BandedMatrix, DenseMatrix, PovmMatrix

DEFAULT_TAIL_MASS = 1e-12
DEFAULT_DARK_COUNT = 5e-8
DFT_MIN_BINS = 21


@dataclass(frozen=True)
class ProbeSchedule:
    """Mean photon numbers |alpha_d|^2 of the coherent probe states."""

    mean_photons: np.ndarray

    def __post_init__(self):
        mu = np.asarray(self.mean_photons, dtype=np.float64).ravel()
        if mu.size == 0:
            raise ValueError("probe schedule is empty")
        if mu[0] < 0 or not np.all(np.isfinite(mu)):
            raise ValueError("mean photon numbers must be finite and non-negative")
        if np.any(np.diff(mu) <= 0):
            raise ValueError("mean photon numbers must be strictly increasing")
        mu.setflags(write=False)
        object.__setattr__(self, "mean_photons", mu)

    @property
    def D(self) -> int:
        return self.mean_photons.size


@dataclass(frozen=True)
class DetectorParams:
    """Loop out-coupling ``R``, loop and detection efficiencies, bin count, dark counts."""

    R: float
    eta_loop: float
    eta_det: float
    J: int
    p_dark: float = DEFAULT_DARK_COUNT

    def __post_init__(self):
        if not 0.0 < self.R < 1.0:
            raise ValueError(f"R must lie in (0, 1), got {self.R}")
        for name in ("eta_loop", "eta_det"):
            v = getattr(self, name)
            if not 0.0 < v <= 1.0:
                raise ValueError(f"{name} must lie in (0, 1], got {v}")
        if not 0.0 <= self.p_dark <= 1.0:
            raise ValueError(f"p_dark must lie in [0, 1], got {self.p_dark}")
        if int(self.J) != self.J or self.J < 1:
            raise ValueError(f"J must be a positive integer, got {self.J}")

    def bin_couplings(self) -> np.ndarray:
        """Per-photon click probability of each bin, before saturation."""
        j = np.arange(1, self.J + 1)
        x = (1 - self.R) ** 2 / self.R * (self.R * self.eta_loop) ** (j - 1) * self.eta_det
        x[0] = self.R * self.eta_det
        return x


# Parameters fitted to the measured loop detector.
FITTED_PARAMS = dict(R=0.91644, eta_loop=0.90524, eta_det=0.528)


def fitted_detector(J: int = 25, p_dark: float = DEFAULT_DARK_COUNT) -> DetectorParams:
    return DetectorParams(J=J, p_dark=p_dark, **FITTED_PARAMS)


# ---------------------------------------------------------------------------
# Probe states


def probe_schedule_quadratic(D: int, scale: float = 1.0) -> ProbeSchedule:
    """Mean photon numbers ``scale * d**2`` for ``d = 0..D-1``."""
    if D < 1:
        raise ValueError("D must be at least 1")
    if scale <= 0:
        raise ValueError("scale must be positive")
    d = np.arange(D, dtype=np.float64)
    return ProbeSchedule(scale * d * d)


def _band_limits(mu: float, tail_mass: float) -> tuple[int, int]:
    if mu == 0.0:
        return 0, 0
    lo = int(poisson.ppf(tail_mass / 2, mu))
    hi = int(poisson.isf(tail_mass / 2, mu))
    return lo, hi


def max_mean_for_dimension(M: int, tail_mass_cutoff: float = DEFAULT_TAIL_MASS) -> float:
    """Largest mean photon number whose truncated Poisson band fits in ``M`` photon numbers."""
    lo, hi = 0.0, float(M)
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if _band_limits(mid, tail_mass_cutoff)[1] <= M - 1:
            lo = mid
        else:
            hi = mid
        if hi - lo < 1e-9 * max(1.0, hi):
            break
    return lo


def quadratic_schedule_for_dimension(D: int, M: int,
                                     tail_mass_cutoff: float = DEFAULT_TAIL_MASS) -> ProbeSchedule:
    """Quadratic schedule stretched so that its brightest probe just fits into ``M``."""
    if D == 1:
        return probe_schedule_quadratic(1)
    mu_max = max_mean_for_dimension(M, tail_mass_cutoff)
    return probe_schedule_quadratic(D, scale=mu_max / (D - 1) ** 2)


_HALF_LOG_2PI = 0.5 * np.log(2 * np.pi)


def _stirlerr(n: np.ndarray) -> np.ndarray:
    """log(n!) - log(sqrt(2 pi n) (n/e)^n) for integer n >= 1."""
    n = np.asarray(n, dtype=np.float64)
    out = np.empty_like(n)
    small = n <= 15
    ns = n[small]
    out[small] = gammaln(ns + 1) - (ns + 0.5) * np.log(ns) + ns - _HALF_LOG_2PI
    nl = n[~small]
    nn = nl * nl
    s0, s1, s2, s3, s4 = 1 / 12, 1 / 360, 1 / 1260, 1 / 1680, 1 / 1188
    out[~small] = np.where(
        nl > 500, (s0 - s1 / nn) / nl,
        np.where(nl > 80, (s0 - (s1 - s2 / nn) / nn) / nl,
                 np.where(nl > 35, (s0 - (s1 - (s2 - s3 / nn) / nn) / nn) / nl,
                          (s0 - (s1 - (s2 - (s3 - s4 / nn) / nn) / nn) / nn) / nl)))
    return out


def _bd0(x: np.ndarray, mu: float) -> np.ndarray:
    """x*log(x/mu) + mu - x without cancellation near x == mu."""
    x = np.asarray(x, dtype=np.float64)
    out = x * np.log(x / mu) + mu - x
    near = np.abs(x - mu) < 0.1 * (x + mu)
    if np.any(near):
        xn = x[near]
        v = (xn - mu) / (xn + mu)
        s = (xn - mu) * v
        ej = 2 * xn * v
        v2 = v * v
        for j in range(1, 200):
            ej = ej * v2
            s_new = s + ej / (2 * j + 1)
            if np.array_equal(s_new, s):
                break
            s = s_new
        out[near] = s
    return out


def poisson_pmf(k, mu: float) -> np.ndarray:
    """Poisson pmf accurate to a few ulps in relative terms, also for mu ~ 1e6."""
    k = np.asarray(k, dtype=np.float64)
    if mu == 0.0:
        return (k == 0).astype(np.float64)
    out = np.empty_like(k)
    zero = k == 0
    out[zero] = np.exp(-mu)
    kp = k[~zero]
    out[~zero] = np.exp(-_stirlerr(kp) - _bd0(kp, mu)) / np.sqrt(2 * np.pi * kp)
    return out


def build_probe_matrix(schedule: ProbeSchedule, M: int,
                       tail_mass_cutoff: float = DEFAULT_TAIL_MASS) -> BandedMatrix:
    """Banded D x M matrix of Poisson photon-number distributions of the probes.

    Each row keeps the central band outside of which at most ``tail_mass_cutoff``
    probability is dropped.
    """
    if M < 1:
        raise ValueError("M must be at least 1")
    if not 0.0 < tail_mass_cutoff <= 1e-6:
        raise ValueError("tail_mass_cutoff must lie in (0, 1e-6]")
    starts, lengths, chunks = [], [], []
    for d, mu in enumerate(schedule.mean_photons):
        lo, hi = _band_limits(float(mu), tail_mass_cutoff)
        if hi > M - 1:
            raise ValueError(
                f"probe row {d} (mean photon number {mu:g}) needs photon numbers up to "
                f"{hi}, but M = {M}"
            )
        starts.append(lo)
        lengths.append(hi - lo + 1)
        chunks.append(poisson_pmf(np.arange(lo, hi + 1), float(mu)))
    return BandedMatrix(schedule.D, M, np.array(starts), np.array(lengths), np.concatenate(chunks))


# ---------------------------------------------------------------------------
# Bin-click probabilities and POVMs


def _with_dark_counts(p: np.ndarray, p_dark: float) -> np.ndarray:
    if p_dark == 0.0:
        return p
    return 1.0 - (1.0 - p) * (1.0 - p_dark)


def bin_click_coherent(params: DetectorParams, mean_photons) -> np.ndarray:
    """Click probability of every bin for coherent input; shape ``(..., J)``."""
    mu = np.asarray(mean_photons, dtype=np.float64)
    if np.any(mu < 0):
        raise ValueError("mean photon number must be non-negative")
    x = params.bin_couplings()
    p = -np.expm1(-mu[..., None] * x)
    return _with_dark_counts(p, params.p_dark)


def bin_click_fock(params: DetectorParams, photon_number) -> np.ndarray:
    """Click probability of every bin for a Fock state input; shape ``(..., J)``."""
    i = np.asarray(photon_number)
    if np.any(i < 0) or np.any(np.floor(i) != i):
        raise ValueError("photon number must be a non-negative integer")
    x = params.bin_couplings()
    # (1 - x)**i via log1p keeps i ~ 1e6 accurate.
    p = -np.expm1(i.astype(np.float64)[..., None] * np.log1p(-x))
    return _with_dark_counts(p, params.p_dark)


def _pb_convolution(p: np.ndarray) -> np.ndarray:
    rows, J = p.shape
    q = np.zeros((rows, J + 1))
    q[:, 0] = 1.0
    for j in range(J):
        pj = p[:, j:j + 1]
        shifted = q[:, :j + 1] * pj
        q[:, :j + 2] *= 1.0 - pj
        q[:, 1:j + 2] += shifted
    return q


def _pb_dft(p: np.ndarray, chunk: int = 4096) -> np.ndarray:
    rows, J = p.shape
    L = J + 1
    w = np.exp(2j * np.pi * np.arange(L) / L)
    q = np.empty((rows, L))
    for a in range(0, rows, chunk):
        pc = p[a:a + chunk]
        z = np.prod(1.0 - pc[:, :, None] + pc[:, :, None] * w[None, None, :], axis=1)
        q[a:a + chunk] = np.fft.fft(z, axis=1).real / L
    # The transform is only accurate to about L * eps in absolute terms.
    q[q < L * np.finfo(np.float64).eps] = 0.0
    return np.minimum(q, 1.0)


def poisson_binomial(p, method: str = "auto") -> np.ndarray:
    """Distribution of the number of successes of independent Bernoulli trials.

    ``p`` holds the success probabilities along its last axis; the result has
    one more entry on that axis (0..J successes).  ``method`` is ``"dft"``
    (closed form via the discrete Fourier transform), ``"convolution"`` or
    ``"auto"``, which uses convolution for fewer than 21 trials.
    """
    p = np.asarray(p, dtype=np.float64)
    if np.any((p < 0) | (p > 1)) or not np.all(np.isfinite(p)):
        raise ValueError("probabilities must lie in [0, 1]")
    lead = p.shape[:-1]
    J = p.shape[-1]
    flat = p.reshape(-1, J)
    if method == "auto":
        method = "dft" if J >= DFT_MIN_BINS else "convolution"
    if J == 0:
        q = np.ones((flat.shape[0], 1))
    elif method == "dft":
        q = _pb_dft(flat)
    elif method == "convolution":
        q = _pb_convolution(flat)
    else:
        raise ValueError(f"unknown method {method!r}")
    return q.reshape(*lead, J + 1)


def analytic_povm(params: DetectorParams, M: int, N: int | None = None,
                  truncation: str = "drop") -> PovmMatrix:
    """Model POVM: row ``i`` is the click-count distribution for ``i`` photons.

    With ``N < J + 1`` the outcomes beyond ``N - 1`` clicks are either dropped
    and each row renormalised (``truncation="drop"``) or added to the last
    outcome (``"accumulate"``).
    """
    J = params.J
    N = J + 1 if N is None else N
    if N > J + 1 or N < 1:
        raise ValueError(f"N = {N} outcomes is inconsistent with J = {J} bins")
    if truncation not in ("drop", "accumulate"):
        raise ValueError(f"unknown truncation policy {truncation!r}")
    q = poisson_binomial(bin_click_fock(params, np.arange(M)))
    if N < J + 1:
        tail = q[:, N:].sum(axis=1)
        q = q[:, :N].copy()
        kept = q.sum(axis=1)
        if truncation == "drop":
            empty = kept <= 0
            q[~empty] /= kept[~empty, None]
            q[empty, N - 1] = 1.0
        else:
            q[:, N - 1] += tail
    # Remove the rounding left by the DFT so rows sum to one.
    q /= q.sum(axis=1, keepdims=True)
    return PovmMatrix(q)


def simulate_outcomes(F: BandedMatrix, povm, trials: int, rng_seed: int) -> DenseMatrix:
    """Sample click-count frequencies for every probe from a multinomial.

    Probe ``d`` draws from its own generator seeded with ``(rng_seed, d)``.
    """
    if trials < 1:
        raise ValueError("trials must be at least 1")
    Pi = povm.values if isinstance(povm, PovmMatrix) else np.asarray(povm, dtype=np.float64)
    if Pi.shape[0] != F.cols:
        raise ValueError(f"F has {F.cols} columns but the POVM has {Pi.shape[0]} rows")
    exact = F.to_csr() @ Pi
    sums = exact.sum(axis=1)
    bad = np.abs(sums - 1.0) > 1e-9
    if np.any(bad):
        d = int(np.argmax(bad))
        raise ValueError(f"outcome distribution of probe {d} sums to {sums[d]:.12g}")
    P = np.empty_like(exact)
    root = np.random.SeedSequence(rng_seed)
    for d in range(exact.shape[0]):
        rng = np.random.default_rng(np.random.SeedSequence(root.entropy, spawn_key=(d,)))
        pd = np.clip(exact[d], 0.0, None)
        P[d] = rng.multinomial(trials, pd / pd.sum()) / trials
    return DenseMatrix(P)


# ---------------------------------------------------------------------------
# Parameter fit


class FitResult(NamedTuple):
    params: DetectorParams
    residual: float
    iterations: int


class FitError(RuntimeError):
    def __init__(self, message: str, best: FitResult):
        super().__init__(message)
        self.best = best


def _coherent_model(theta, mu, J):
    R, eta_loop, eta_det = theta
    j = np.arange(1, J + 1)
    logb = 2 * np.log1p(-R) - np.log(R) + (j - 1) * (np.log(R) + np.log(eta_loop)) + np.log(eta_det)
    b = np.exp(logb)
    b[0] = R * eta_det
    e = np.exp(-mu[:, None] * b[None, :])
    model = 1.0 - e
    # d model / d theta, via d b / d theta
    dlogb = np.empty((J, 3))
    dlogb[:, 0] = -2 / (1 - R) - 1 / R + (j - 1) / R
    dlogb[:, 1] = (j - 1) / eta_loop
    dlogb[:, 2] = 1 / eta_det
    dlogb[0] = (1 / R, 0.0, 1 / eta_det)
    dmodel = (mu[:, None] * e * b[None, :])[:, :, None] * dlogb[None, :, :]
    return model, dmodel


def _sigmoid(u):
    return 1.0 / (1.0 + np.exp(-u))


def fit_detector_params(schedule: ProbeSchedule, measured_bin_clicks,
                        initial=(0.9, 0.9, 0.5), max_iter: int = 300,
                        tol: float = 1e-13) -> FitResult:
    """Least-squares fit of (R, eta_loop, eta_det) to coherent-state bin-click data.

    Gauss-Newton with backtracking on logit-transformed parameters, dark
    counts neglected.  ``measured_bin_clicks`` is D x J.
    """
    mu = schedule.mean_photons
    meas = np.asarray(measured_bin_clicks, dtype=np.float64)
    if meas.ndim != 2 or meas.shape[0] != mu.size:
        raise ValueError("measured bin clicks must be a D x J array matching the schedule")
    if np.count_nonzero(mu > 0) < 3:
        raise ValueError("need at least three probe states with non-zero mean photon number")
    J = meas.shape[1]

    def cost_of(u):
        m, dm = _coherent_model(_sigmoid(u), mu, J)
        r = (m - meas).ravel()
        return 0.5 * r @ r, r, dm.reshape(-1, 3)

    u = np.log(np.asarray(initial) / (1 - np.asarray(initial)))
    cost, r, dm = cost_of(u)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        th = _sigmoid(u)
        jac = dm * (th * (1 - th))[None, :]
        step = np.linalg.lstsq(jac, -r, rcond=None)[0]
        t = 1.0
        while t > 1e-10:
            new_cost, new_r, new_dm = cost_of(u + t * step)
            if new_cost <= cost:
                break
            t *= 0.5
        else:
            converged = cost < 1e-25 * r.size
            break
        dtheta = np.max(np.abs(_sigmoid(u + t * step) - th))
        u = u + t * step
        cost, r, dm = new_cost, new_r, new_dm
        if dtheta < tol or cost < 1e-30 * r.size:
            converged = True
            break

    R, eta_loop, eta_det = _sigmoid(u)
    best = FitResult(DetectorParams(R, eta_loop, eta_det, J=J, p_dark=0.0),
                     float(np.sqrt(2 * cost)), it)
    if not converged:
        raise FitError(f"fit did not converge within {max_iter} iterations", best)
    return best
