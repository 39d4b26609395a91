"""Row-block distribution of the POVM and the banded F-products built on it.

The POVM matrix is split into contiguous blocks of rows, one per worker.
Each worker owns the columns of F that multiply its rows, so a product
``F @ X`` is formed in two steps: every worker computes its partial D x N
contribution, then the partials are combined along a binary tree.  The
transposed product ``F.T @ R`` needs no communication because ``R`` (D x N)
is replicated.

Workers are threads sharing one address space.  A message-passing backend
would only have to provide the same partition and reduction contracts.
"""
from __future__ import annotations

import math
import os
import time
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .core import BandedMatrix, mem_solver

_CACHE_LINE_DOUBLES = 8


@dataclass(frozen=True)
class Partition:
    """Contiguous row ranges ``[bounds[w], bounds[w + 1])`` of the M rows of the POVM."""

    M: int
    n_workers: int
    bounds: np.ndarray

    def range(self, w: int) -> tuple[int, int]:
        return int(self.bounds[w]), int(self.bounds[w + 1])

    def sizes(self) -> np.ndarray:
        return np.diff(self.bounds)

    def __iter__(self):
        return (self.range(w) for w in range(self.n_workers))


def partition_rows(M: int, n_workers: int) -> Partition:
    """Near-equal contiguous blocks; the first ``M % n_workers`` blocks get one extra row."""
    if n_workers < 1:
        raise ValueError("n_workers must be at least 1")
    base, extra = divmod(M, n_workers)
    sizes = np.full(n_workers, base, dtype=np.int64)
    sizes[:extra] += 1
    bounds = np.zeros(n_workers + 1, dtype=np.int64)
    np.cumsum(sizes, out=bounds[1:])
    return Partition(M, n_workers, bounds)


@dataclass(frozen=True)
class ReductionPlan:
    """Binomial combining tree: at level ``l`` worker ``w`` absorbs ``w + 2**l``."""

    n_workers: int

    @property
    def depth(self) -> int:
        return math.ceil(math.log2(self.n_workers)) if self.n_workers > 1 else 0

    @property
    def levels(self) -> list[list[tuple[int, int]]]:
        out = []
        for level in range(self.depth):
            stride = 1 << level
            out.append([(w, w + stride) for w in range(0, self.n_workers, 2 * stride)
                        if w + stride < self.n_workers])
        return out


def spmm_local(F_slice, Pi_block: np.ndarray) -> np.ndarray:
    """Contribution ``F[:, block] @ Pi[block]`` of one worker's rows, D x N."""
    if Pi_block.shape[0] == 0:
        return np.zeros((F_slice.shape[0], Pi_block.shape[1]))
    return np.asarray(F_slice @ Pi_block)


def reduce_partials(partials, plan: ReductionPlan | None = None,
                    deterministic: bool = True) -> np.ndarray:
    """Elementwise sum of the workers' partials.

    In deterministic mode the sum follows ``plan``, so the rounding is fixed by
    the tree shape.  Otherwise the partials are folded left to right, which is
    what an arrival-order reduction amounts to when called after the fact.
    """
    partials = list(partials)
    if not partials:
        raise ValueError("nothing to reduce")
    if len(partials) == 1:
        return np.array(partials[0], copy=True)
    if not deterministic:
        acc = np.array(partials[0], copy=True)
        for p in partials[1:]:
            acc += p
        return acc
    plan = plan or ReductionPlan(len(partials))
    if plan.n_workers != len(partials):
        raise ValueError(f"plan is for {plan.n_workers} workers, got {len(partials)} partials")
    buf = [np.array(p, copy=True) for p in partials]
    for level in plan.levels:
        for dst, src in level:
            buf[dst] += buf[src]
    return buf[0]


def allreduce_scalar(values, op: str = "sum") -> float:
    vals = [float(v) for v in values]
    if not vals:
        raise ValueError("no values to reduce")
    if op == "sum":
        # Pairwise tree, same shape as reduce_partials.
        while len(vals) > 1:
            vals = [vals[i] + vals[i + 1] if i + 1 < len(vals) else vals[i]
                    for i in range(0, len(vals), 2)]
        return vals[0]
    if op == "max":
        return max(vals)
    raise ValueError(f"unsupported reduction {op!r}")


class Engine:
    """Distributed products with the probe matrix ``F`` over row blocks of the POVM."""

    def __init__(self, F: BandedMatrix, n_workers: int = 1, deterministic: bool = True):
        self.F = F
        self.D, self.M = F.shape
        self.partition = partition_rows(self.M, n_workers)
        self.plan = ReductionPlan(n_workers)
        self.deterministic = deterministic
        csc = F.to_csr().tocsc()
        self._slices = []
        self._slices_t = []
        for r0, r1 in self.partition:
            block = csc[:, r0:r1].tocsr()
            self._slices.append(block)
            self._slices_t.append(block.T.tocsr())
        self._col_sq = np.asarray(csc.multiply(csc).sum(axis=0)).ravel()
        self._pool = ThreadPoolExecutor(n_workers) if n_workers > 1 else None
        self._buffers: dict[int, list[np.ndarray]] = {}

    @property
    def n_workers(self) -> int:
        return self.partition.n_workers

    def close(self):
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def _map(self, fn):
        if self._pool is None:
            return [fn(w) for w in range(self.n_workers)]
        futures = {self._pool.submit(fn, w): w for w in range(self.n_workers)}
        out = [None] * self.n_workers
        for fut in as_completed(futures):
            out[futures[fut]] = fut.result()
        return out

    def _partial_buffers(self, N: int) -> list[np.ndarray]:
        # Worker-owned partials, rows padded to whole cache lines.
        if N not in self._buffers:
            padded = -(-N // _CACHE_LINE_DOUBLES) * _CACHE_LINE_DOUBLES
            self._buffers[N] = [np.zeros((self.D, padded)) for _ in range(self.n_workers)]
        return self._buffers[N]

    def matmul(self, X: np.ndarray) -> np.ndarray:
        """``F @ X`` for an M x N matrix ``X``."""
        N = X.shape[1]
        bufs = self._partial_buffers(N)

        def work(w):
            r0, r1 = self.partition.range(w)
            bufs[w][:, :N] = spmm_local(self._slices[w], X[r0:r1])
            return w

        if self._pool is None or self.deterministic:
            self._map(work)
            return reduce_partials([b[:, :N] for b in bufs], self.plan, True)
        # Accumulate in completion order.
        acc = None
        futures = [self._pool.submit(work, w) for w in range(self.n_workers)]
        for fut in as_completed(futures):
            w = fut.result()
            acc = bufs[w][:, :N].copy() if acc is None else acc + bufs[w][:, :N]
        return acc

    def rmatmul(self, R: np.ndarray) -> np.ndarray:
        """``F.T @ R`` for a D x N matrix ``R``; every worker fills its own rows."""
        out = np.empty((self.M, R.shape[1]))

        def work(w):
            r0, r1 = self.partition.range(w)
            if r1 > r0:
                out[r0:r1] = self._slices_t[w] @ R

        self._map(work)
        return out

    def column_sq_sums(self) -> np.ndarray:
        """``sum_d F[d, i]**2`` for every photon number ``i``."""
        return self._col_sq

    def dot(self, a: np.ndarray, b: np.ndarray) -> float:
        """Global inner product from per-block partial sums."""
        def work(w):
            r0, r1 = self.partition.range(w)
            return float(np.vdot(a[r0:r1], b[r0:r1]))

        return allreduce_scalar(self._map(work), "sum")

    def norm(self, a: np.ndarray) -> float:
        return math.sqrt(self.dot(a, a))


# ---------------------------------------------------------------------------
# Benchmarks


class MemoryBudgetError(RuntimeError):
    pass


def available_memory_bytes() -> int:
    try:
        return os.sysconf("SC_AVPHYS_PAGES") * os.sysconf("SC_PAGE_SIZE")
    except (ValueError, OSError, AttributeError):
        return 8 * 2**30


def bench_ops(M: int, N: int, D: int, n_workers: int = 1, reps: int = 5,
              deterministic: bool = False, seed: int = 0,
              mem_budget: int | None = None, gamma: float = 0.0) -> list[dict]:
    """Time objective, gradient, Hessian product and scalar product on random data.

    Returns one record per (op, rep): ``op, M, N, D, workers, rep, wall_ms``.
    """
    from .detector import build_probe_matrix, quadratic_schedule_for_dimension
    from .simplex import project_rows
    from .solver import Problem

    budget = int(0.8 * available_memory_bytes()) if mem_budget is None else mem_budget
    need = mem_solver(M, N, D).bytes
    if need > budget:
        raise MemoryBudgetError(
            f"estimated solver memory {need / 2**30:.2f} GiB exceeds budget {budget / 2**30:.2f} GiB"
        )
    rng = np.random.default_rng(seed)
    F = build_probe_matrix(quadratic_schedule_for_dimension(D, M), M)
    P = rng.random((D, N))
    P /= P.sum(axis=1, keepdims=True)
    Pi = project_rows(rng.random((M, N)))
    d = rng.standard_normal((M, N))

    records = []
    with Engine(F, n_workers, deterministic) as engine:
        prob = Problem(engine, P, gamma)
        resid = prob.residual(Pi)
        ops = {
            "objective": lambda: prob.objective(Pi),
            "gradient": lambda: prob.gradient(Pi, resid),
            "hessian_product": lambda: prob.hessian_product(d),
            "scalar_product": lambda: engine.dot(Pi, d),
        }
        for op, fn in ops.items():
            fn()  # warm-up
            for rep in range(reps):
                t0 = time.perf_counter()
                fn()
                wall = (time.perf_counter() - t0) * 1e3
                records.append(dict(op=op, M=M, N=N, D=D, workers=n_workers, rep=rep,
                                    wall_ms=max(wall, 1e-6)))
    return records


def median_times(records) -> dict[str, float]:
    ops: dict[str, list[float]] = {}
    for r in records:
        ops.setdefault(r["op"], []).append(r["wall_ms"])
    return {op: float(np.median(v)) for op, v in ops.items()}
