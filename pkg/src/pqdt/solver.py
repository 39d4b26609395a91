"""Two-stage, two-metric projected truncated-Newton reconstruction of the POVM.

Minimises ``||F Pi - P||^2 + gamma * sum_n sum_i (Pi[i, n] - Pi[i+1, n])**2``
over matrices ``Pi`` whose rows lie on the probability simplex.

Stage 1 takes truncated-Newton steps and projects every trial point row-wise
onto the simplex.  Stage 2 is Bertsekas' two-metric projected Newton method:
the largest entry of each row is eliminated through the sum constraint, the
remaining coordinates are kept non-negative, and the Hessian couplings of
coordinates pinned at zero are dropped.  Both stages solve the Newton system
with diagonally preconditioned conjugate gradients and accept steps with an
Armijo rule along the projected path.
"""
from __future__ import annotations

import json
import math
import os
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .core import PovmMatrix, ProblemInstance
from .engine import Engine
from .simplex import project_rows

STATUS_CONVERGED = "converged"
STATUS_ITERATION_CAP = "iteration-cap"
STATUS_LINE_SEARCH_FAILURE = "line-search-failure"

# Jacobi weights are kept above this fraction of the largest one.  Photon numbers
# far outside every probe band have column norms down to 1e-20, and dividing by
# them turns the first CG step into a near-null direction of enormous size.
PRECOND_FLOOR = 1e-6


class SolverError(RuntimeError):
    pass


@dataclass
class SmoothingConfig:
    enabled: bool = False
    divisor: float = 50.0
    i_min: int = 100


@dataclass
class SolverConfig:
    gamma: float = 0.0
    beta: float = 0.75
    c_armijo: float = 0.1
    eps_active: float = 1e-8
    eps_stage1: float = 1e-4
    eps_kkt: float = 1e-6
    cg_max_iters: int = 50
    cg_rel_tol: float = 1e-2
    max_newton_stage1: int = 50
    max_newton_stage2: int = 2000
    max_backoffs: int = 60
    use_stage1: bool = True
    smoothing: SmoothingConfig = field(default_factory=SmoothingConfig)
    debug: bool = False

    def __post_init__(self):
        if isinstance(self.smoothing, dict):
            self.smoothing = SmoothingConfig(**self.smoothing)
        if self.gamma < 0:
            raise ValueError("gamma must be non-negative")
        if not 0 < self.beta < 1:
            raise ValueError("beta must lie in (0, 1)")
        if not 0 < self.c_armijo < 1:
            raise ValueError("c_armijo must lie in (0, 1)")
        for name in ("eps_active", "eps_stage1", "eps_kkt", "cg_rel_tol"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.smoothing.divisor < 1:
            raise ValueError("smoothing divisor must be at least 1")


# ---------------------------------------------------------------------------
# Kernels


def _neighbour_differences(X: np.ndarray) -> np.ndarray:
    """L X for the 1-D Laplacian with free ends, acting on every column."""
    out = np.zeros_like(X)
    if X.shape[0] > 1:
        diff = X[:-1] - X[1:]
        out[:-1] += diff
        out[1:] -= diff
    return out


class Problem:
    """Objective, gradient and Hessian kernels bound to an engine and data ``P``."""

    def __init__(self, engine: Engine, P: np.ndarray, gamma: float = 0.0):
        self.engine = engine
        self.P = np.asarray(P, dtype=np.float64)
        self.gamma = float(gamma)
        self.M = engine.M
        self.N = self.P.shape[1]
        self.D = engine.D
        if self.P.shape[0] != self.D:
            raise ValueError(f"P has {self.P.shape[0]} rows, F has {self.D}")

    @classmethod
    def from_instance(cls, instance: ProblemInstance, gamma: float = 0.0,
                      n_workers: int = 1, deterministic: bool = True) -> "Problem":
        return cls(Engine(instance.F, n_workers, deterministic), instance.P.values, gamma)

    def residual(self, Pi: np.ndarray) -> np.ndarray:
        return self.engine.matmul(Pi) - self.P

    def regulariser(self, Pi: np.ndarray) -> float:
        if self.gamma == 0.0 or Pi.shape[0] < 2:
            return 0.0
        diff = Pi[:-1] - Pi[1:]
        return self.gamma * float(np.vdot(diff, diff))

    def objective(self, Pi: np.ndarray, resid: np.ndarray | None = None) -> float:
        if resid is None:
            resid = self.residual(Pi)
        return float(np.vdot(resid, resid)) + self.regulariser(Pi)

    def gradient(self, Pi: np.ndarray, resid: np.ndarray | None = None) -> np.ndarray:
        if resid is None:
            resid = self.residual(Pi)
        g = 2.0 * self.engine.rmatmul(resid)
        if self.gamma:
            g += 2.0 * self.gamma * _neighbour_differences(Pi)
        return g

    def hessian_product(self, d: np.ndarray) -> np.ndarray:
        """Unmasked Hessian times ``d``; the Hessian acts on every column alike."""
        out = 2.0 * self.engine.rmatmul(self.engine.matmul(d))
        if self.gamma:
            out += 2.0 * self.gamma * _neighbour_differences(d)
        return out

    def hessian_diag(self) -> np.ndarray:
        """Diagonal of the per-column Hessian, length M."""
        diag = 2.0 * self.engine.column_sq_sums().copy()
        if self.gamma and self.M > 1:
            stencil = np.full(self.M, 4.0)
            stencil[0] = stencil[-1] = 2.0
            diag += self.gamma * stencil
        return diag


def _as_problem(instance, gamma: float) -> Problem:
    if isinstance(instance, Problem):
        if instance.gamma != gamma:
            return Problem(instance.engine, instance.P, gamma)
        return instance
    return Problem.from_instance(instance, gamma)


def objective(Pi, instance, gamma: float = 0.0) -> float:
    return _as_problem(instance, gamma).objective(np.asarray(Pi, dtype=np.float64))


def gradient(Pi, instance, gamma: float = 0.0) -> np.ndarray:
    return _as_problem(instance, gamma).gradient(np.asarray(Pi, dtype=np.float64))


def hessian_diag(instance, gamma: float = 0.0) -> np.ndarray:
    """Hessian diagonal broadcast to M x N."""
    prob = _as_problem(instance, gamma)
    return np.repeat(prob.hessian_diag()[:, None], prob.N, axis=1)


class Metric:
    """The (possibly masked) Newton matrix of one iteration.

    With ``row_max`` set, vectors live in the reduced coordinates of stage 2:
    entry ``(i, row_max[i])`` is implied by the sum constraint and ignored.
    Coordinates in ``active`` only see the diagonal of the Hessian.
    """

    def __init__(self, prob: Problem, frozen_rows: np.ndarray | None = None,
                 row_max: np.ndarray | None = None, active: np.ndarray | None = None):
        self.prob = prob
        M, N = prob.M, prob.N
        hd = prob.hessian_diag()
        self.frozen_rows = hd <= 0 if frozen_rows is None else frozen_rows
        self.row_max = row_max
        free = np.ones((M, N), dtype=bool)
        free[self.frozen_rows] = False
        if row_max is not None:
            free[np.arange(M), row_max] = False
            hd = 2.0 * hd
        self.free = free
        self.active = np.zeros((M, N), dtype=bool) if active is None else (active & free)
        self.inner = free & ~self.active
        safe = np.where(hd > 0, hd, 1.0)
        safe = np.maximum(safe, PRECOND_FLOOR * safe.max())
        self.diag = np.repeat(safe[:, None], N, axis=1)

    def __call__(self, d: np.ndarray) -> np.ndarray:
        x = np.where(self.inner, d, 0.0)
        if self.row_max is None:
            y = self.prob.hessian_product(x)
        else:
            rows = np.arange(x.shape[0])
            x[rows, self.row_max] = -x.sum(axis=1)
            y = self.prob.hessian_product(x)
            y -= y[rows, self.row_max][:, None]
        out = np.where(self.inner, y, 0.0)
        out += np.where(self.active, self.diag * d, 0.0)
        return out


def hessian_product(d, instance, gamma: float = 0.0, active=None, row_max=None) -> np.ndarray:
    """Product with the Newton matrix; ``active``/``row_max`` give the stage-2 masking."""
    prob = _as_problem(instance, gamma)
    d = np.asarray(d, dtype=np.float64)
    if active is None and row_max is None:
        return prob.hessian_product(d)
    return Metric(prob, frozen_rows=np.zeros(prob.M, dtype=bool), row_max=row_max,
                  active=active)(d)


def pcg_solve(rhs: np.ndarray, metric, diag: np.ndarray, rel_tol: float = 1e-2,
              max_iters: int = 50, dot=None) -> tuple[np.ndarray, int]:
    """Conjugate gradients on ``metric(x) = rhs`` with Jacobi preconditioner ``diag``.

    Stops at relative residual ``rel_tol``, after ``max_iters`` iterations, or
    on non-positive curvature; in the last case the current iterate (or the
    preconditioned right-hand side on the first iteration) is returned.
    """
    dot = dot or (lambda a, b: float(np.vdot(a, b)))
    x = np.zeros_like(rhs)
    r = rhs.copy()
    rhs_norm = math.sqrt(dot(rhs, rhs))
    if rhs_norm == 0.0:
        return x, 0
    z = r / diag
    p = z.copy()
    rz = dot(r, z)
    it = 0
    for it in range(1, max_iters + 1):
        Ap = metric(p)
        pAp = dot(p, Ap)
        if not (np.isfinite(pAp) and np.isfinite(rz)):
            raise SolverError("non-finite value in conjugate gradients (ill-conditioned system)")
        if pAp <= 0.0:
            if it == 1:
                x = z
            break
        a = rz / pAp
        x += a * p
        r -= a * Ap
        if math.sqrt(dot(r, r)) <= rel_tol * rhs_norm:
            break
        z = r / diag
        rz_new = dot(r, z)
        p *= rz_new / rz
        p += z
        rz = rz_new
    return x, it


def kkt_residual(Pi: np.ndarray, grad: np.ndarray) -> float:
    """RMS complementarity violation with multipliers ``max(0, -min_n grad)`` per row."""
    lam = np.maximum(0.0, -grad.min(axis=1))
    v = Pi * (grad + lam[:, None])
    return float(np.sqrt(np.vdot(v, v) / Pi.size))


def smooth_povm(Pi, divisor: float = 50.0, i_min: int = 100) -> np.ndarray:
    """Replace row ``i >= i_min`` by the mean of rows ``i - s .. i + s``, ``s = floor(i / divisor)``.

    The window is clipped to the matrix and the rows are re-projected.
    """
    if divisor < 1:
        raise ValueError("divisor must be at least 1")
    Pi = np.asarray(Pi, dtype=np.float64)
    M = Pi.shape[0]
    out = Pi.copy()
    if i_min >= M:
        return out
    i = np.arange(max(i_min, 0), M)
    s = np.floor(i / divisor).astype(np.int64)
    lo = np.maximum(i - s, 0)
    hi = np.minimum(i + s, M - 1)
    csum = np.zeros((M + 1, Pi.shape[1]))
    np.cumsum(Pi, axis=0, out=csum[1:])
    out[i] = (csum[hi + 1] - csum[lo]) / (hi - lo + 1)[:, None]
    out[i] = project_rows(out[i])
    return out


# ---------------------------------------------------------------------------
# Iteration state and reports


@dataclass
class IterationRecord:
    stage: int
    phase: str
    k: int
    objective: float
    kkt: float
    alpha: float
    cg_iters: int
    wall_ms: float
    path_derivative: float
    min_entry: float
    max_row_sum_error: float


@dataclass
class ConvergenceReport:
    records: list[IterationRecord] = field(default_factory=list)
    status: str = ""
    phase_times: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def newton_iterations(self, stage: int | None = None, phase: str | None = None) -> int:
        return sum(1 for r in self.records if r.k > 0
                   and (stage is None or r.stage == stage)
                   and (phase is None or r.phase == phase))

    def cg_iterations(self) -> list[int]:
        return [r.cg_iters for r in self.records if r.k > 0]

    @property
    def final_objective(self) -> float:
        return self.records[-1].objective if self.records else math.nan

    @property
    def final_kkt(self) -> float:
        return self.records[-1].kkt if self.records else math.nan

    def to_jsonl(self) -> str:
        lines = []
        for r in self.records:
            d = asdict(r)
            lines.append(json.dumps({k: d[k] for k in ("stage", "k", "objective", "kkt", "alpha",
                                                       "cg_iters", "wall_ms")}
                                    | {"phase": r.phase}))
        return "\n".join(lines) + ("\n" if lines else "")

    def write_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_jsonl())


@dataclass
class SolverState:
    Pi: np.ndarray
    resid: np.ndarray
    objective: float
    grad: np.ndarray
    kkt: float
    stage: int = 1
    k: int = 0
    direction: np.ndarray | None = None
    path_derivative: float = math.nan
    row_max: np.ndarray | None = None
    active: np.ndarray | None = None
    last_alpha: float = 0.0
    last_cg: int = 0
    status: str = ""


def initial_state(prob: Problem, Pi0: np.ndarray) -> SolverState:
    Pi0 = np.array(Pi0, dtype=np.float64)
    resid = prob.residual(Pi0)
    grad = prob.gradient(Pi0, resid)
    return SolverState(Pi0, resid, prob.objective(Pi0, resid), grad, kkt_residual(Pi0, grad))


def _accept(state: SolverState, prob: Problem, Pi, resid, f, alpha, cg, cfg: SolverConfig):
    state.Pi, state.resid, state.objective = Pi, resid, f
    state.grad = prob.gradient(Pi, resid)
    state.kkt = kkt_residual(Pi, state.grad)
    state.last_alpha, state.last_cg = alpha, cg
    state.k += 1
    if cfg.debug:
        fresh = prob.residual(Pi)
        if np.max(np.abs(fresh - resid)) > 1e-10:
            raise SolverError("cached residual diverged from F Pi - P")


def _frozen_rows(prob: Problem) -> np.ndarray:
    return prob.hessian_diag() <= 0


def stage1_direction(state: SolverState, prob: Problem, cfg: SolverConfig) -> None:
    """Newton direction and the slope of the objective along the projected path."""
    metric = Metric(prob, frozen_rows=_frozen_rows(prob))
    rhs = np.where(metric.free, -state.grad, 0.0)
    p, cg = pcg_solve(rhs, metric, metric.diag, cfg.cg_rel_tol, cfg.cg_max_iters,
                      prob.engine.dot)
    h = 1e-7 * (1.0 + prob.engine.norm(state.Pi))
    f_h = prob.objective(project_rows(state.Pi + h * p))
    state.direction = p
    state.path_derivative = (f_h - state.objective) / h
    state.last_cg = cg


def stage_transition_check(state: SolverState, eps_stage1: float = 1e-4) -> bool:
    """True once the projected-path slope of the stage-1 direction is at most ``eps_stage1``."""
    if state.direction is None:
        raise ValueError("no stage-1 direction has been computed")
    return abs(state.path_derivative) <= eps_stage1


def stage1_iterate(state: SolverState, prob: Problem, cfg: SolverConfig) -> bool:
    """One projected Newton step; returns False if no acceptable step length was found."""
    if state.direction is None:
        stage1_direction(state, prob, cfg)
    p, slope, cg = state.direction, state.path_derivative, state.last_cg
    state.direction = None
    if not slope < 0:
        return False
    alpha = 1.0
    for _ in range(cfg.max_backoffs + 1):
        trial = project_rows(state.Pi + alpha * p)
        resid = prob.residual(trial)
        f = prob.objective(trial, resid)
        if f <= state.objective + cfg.c_armijo * alpha * slope:
            _accept(state, prob, trial, resid, f, alpha, cg, cfg)
            return True
        alpha *= cfg.beta
    return False


def stage2_iterate(state: SolverState, prob: Problem, cfg: SolverConfig) -> bool:
    """One two-metric projected Newton step on the reduced coordinates."""
    Pi, g = state.Pi, state.grad
    M = prob.M
    rows = np.arange(M)
    m = np.argmax(Pi, axis=1)
    g_red = g - g[rows, m][:, None]
    frozen = _frozen_rows(prob)
    active = (Pi <= cfg.eps_active) & (g_red > 0)
    metric = Metric(prob, frozen_rows=frozen, row_max=m, active=active)
    g_red = np.where(metric.free, g_red, 0.0)
    p, cg = pcg_solve(-g_red, metric, metric.diag, cfg.cg_rel_tol, cfg.cg_max_iters,
                      prob.engine.dot)
    p = np.where(metric.free, p, 0.0)
    moving = metric.free & ~((Pi <= 0.0) & (p < 0.0))
    slope = float(np.sum(g_red[moving] * p[moving]))
    state.row_max, state.active = m, metric.active
    state.path_derivative = slope
    if not slope < 0:
        return False
    free = metric.free
    alpha = 1.0
    for _ in range(cfg.max_backoffs + 1):
        trial = np.where(free, np.maximum(Pi + alpha * p, 0.0), Pi)
        implied = 1.0 - (trial.sum(axis=1) - trial[rows, m])
        if np.all(implied[~frozen] >= 0.0):
            trial[rows[~frozen], m[~frozen]] = implied[~frozen]
            resid = prob.residual(trial)
            f = prob.objective(trial, resid)
            if f <= state.objective + cfg.c_armijo * alpha * slope:
                _accept(state, prob, trial, resid, f, alpha, cg, cfg)
                return True
        alpha *= cfg.beta
    return False


# ---------------------------------------------------------------------------
# Driver


def _record(report: ConvergenceReport, state: SolverState, phase: str, t0: float):
    Pi = state.Pi
    report.records.append(IterationRecord(
        stage=state.stage, phase=phase, k=state.k, objective=state.objective, kkt=state.kkt,
        alpha=state.last_alpha if state.k else 0.0, cg_iters=state.last_cg if state.k else 0,
        wall_ms=(time.perf_counter() - t0) * 1e3,
        path_derivative=float(state.path_derivative),
        min_entry=float(Pi.min()),
        max_row_sum_error=float(np.max(np.abs(Pi.sum(axis=1) - 1.0))),
    ))


def _run_stage1(state, prob, cfg, report, phase):
    state.stage, state.k = 1, 0
    _record(report, state, phase, time.perf_counter())
    while state.k < cfg.max_newton_stage1:
        t0 = time.perf_counter()
        stage1_direction(state, prob, cfg)
        if stage_transition_check(state, cfg.eps_stage1):
            return "transition"
        if not stage1_iterate(state, prob, cfg):
            return "line-search"
        _record(report, state, phase, t0)
    return "cap"


def _run_stage2(state, prob, cfg, report, phase):
    state.stage, state.k = 2, 0
    state.path_derivative = math.nan
    _record(report, state, phase, time.perf_counter())
    while True:
        if state.kkt <= cfg.eps_kkt:
            return STATUS_CONVERGED
        if state.k >= cfg.max_newton_stage2:
            return STATUS_ITERATION_CAP
        t0 = time.perf_counter()
        if not stage2_iterate(state, prob, cfg):
            return STATUS_LINE_SEARCH_FAILURE
        _record(report, state, phase, t0)


def solve_two_stage(instance, config: SolverConfig | None = None, initial=None,
                    n_workers: int = 1, deterministic: bool = True
                    ) -> tuple[PovmMatrix, ConvergenceReport]:
    """Reconstruct the POVM; see the module docstring for the method.

    ``instance`` is a :class:`ProblemInstance` or an existing :class:`Problem`.
    Starts from the uniform POVM unless ``initial`` is given.  With smoothing
    enabled the converged result is smoothed and refined by stage 2 alone.
    """
    cfg = config or SolverConfig()
    prob = instance if isinstance(instance, Problem) else Problem.from_instance(
        instance, cfg.gamma, n_workers, deterministic)
    if prob.gamma != cfg.gamma:
        prob = Problem(prob.engine, prob.P, cfg.gamma)
    M, N = prob.M, prob.N
    Pi0 = np.full((M, N), 1.0 / N) if initial is None else np.asarray(
        initial.values if isinstance(initial, PovmMatrix) else initial, dtype=np.float64)
    if Pi0.shape != (M, N):
        raise ValueError(f"initial POVM has shape {Pi0.shape}, expected {(M, N)}")

    report = ConvergenceReport()
    frozen = _frozen_rows(prob)
    report.metadata = {
        "eps_kkt": cfg.eps_kkt,
        "eps_kkt_is_default": cfg.eps_kkt == SolverConfig.eps_kkt,
        "kkt_multiplier": "max(0, -min_n grad)",
        "frozen_rows": np.flatnonzero(frozen).tolist(),
        "smoothing": asdict(cfg.smoothing),
        "smoothing_reprojects_rows": True,
    }
    state = initial_state(prob, Pi0)

    t = time.perf_counter()
    if cfg.use_stage1:
        report.metadata["stage1_exit"] = _run_stage1(state, prob, cfg, report, "main")
        report.phase_times["stage1"] = time.perf_counter() - t
        t = time.perf_counter()
    status = _run_stage2(state, prob, cfg, report, "main")
    report.phase_times["stage2"] = time.perf_counter() - t

    if cfg.smoothing.enabled and status == STATUS_CONVERGED:
        t = time.perf_counter()
        smoothed = smooth_povm(state.Pi, cfg.smoothing.divisor, cfg.smoothing.i_min)
        smoothed[frozen] = state.Pi[frozen]
        state = initial_state(prob, smoothed)
        status = _run_stage2(state, prob, cfg, report, "smoothed")
        report.phase_times["smoothed_stage2"] = time.perf_counter() - t

    report.status = status
    return PovmMatrix(state.Pi), report


def newton_iteration_budget_check(report: ConvergenceReport, stage1_max: int = 30,
                                  stage2_max: int = 400) -> bool:
    """Whether the Newton counts stay within twice the typical 15 / 200 iterations."""
    if report is None or not report.records:
        return False
    return (report.newton_iterations(stage=1) <= stage1_max
            and report.newton_iterations(stage=2) <= stage2_max)


def debug_enabled() -> bool:
    return os.environ.get("PQDT_DEBUG", "") not in ("", "0")
