import numpy as np
import pytest
from hypothesis import given, strategies as st

from pqdt.core import BandedMatrix
from pqdt.detector import build_probe_matrix, quadratic_schedule_for_dimension
from pqdt.engine import (Engine, MemoryBudgetError, ReductionPlan, allreduce_scalar, bench_ops,
                         median_times, partition_rows, reduce_partials, spmm_local)


def _instance(M=300, D=12, N=5, seed=0):
    F = build_probe_matrix(quadratic_schedule_for_dimension(D, M), M)
    X = np.random.default_rng(seed).random((M, N))
    return F, X


# -- partition -------------------------------------------------------------------

def test_partition_examples():
    assert list(partition_rows(10, 2)) == [(0, 5), (5, 10)]
    assert list(partition_rows(10, 3).sizes()) == [4, 3, 3]
    assert list(partition_rows(2, 4).sizes()) == [1, 1, 0, 0]
    with pytest.raises(ValueError):
        partition_rows(5, 0)


@given(st.integers(0, 5000), st.integers(1, 64))
def test_partition_covers_rows_once(M, w):
    part = partition_rows(M, w)
    seen = np.zeros(M, dtype=int)
    for r0, r1 in part:
        assert r0 <= r1
        seen[r0:r1] += 1
    assert np.all(seen == 1)
    sizes = part.sizes()
    assert sizes.max() - sizes.min() <= 1


def test_reduction_plan_depth():
    for w, depth in [(1, 0), (2, 1), (3, 2), (8, 3), (9, 4)]:
        plan = ReductionPlan(w)
        assert plan.depth == depth == len(plan.levels)
    # every source is absorbed exactly once
    srcs = [s for level in ReductionPlan(13).levels for _, s in level]
    assert sorted(srcs) == list(range(1, 13))


# -- local products and reductions ---------------------------------------------------

def test_spmm_single_worker_matches_dense():
    F, X = _instance()
    csr = F.to_csr()
    np.testing.assert_allclose(spmm_local(csr, X), F.to_dense() @ X, rtol=1e-12, atol=1e-14)


def test_spmm_empty_and_diagonal():
    F, X = _instance()
    np.testing.assert_array_equal(spmm_local(F.to_csr()[:, :0], X[:0]), np.zeros((12, 5)))
    diag = BandedMatrix.from_dense(np.diag([0.5, 2.0, 1.0]))
    Y = np.arange(6.0).reshape(3, 2)
    np.testing.assert_array_equal(spmm_local(diag.to_csr(), Y), np.diag([0.5, 2.0, 1.0]) @ Y)


def test_reduce_examples():
    one = np.random.default_rng(0).random((3, 2))
    np.testing.assert_array_equal(reduce_partials([one]), one)
    parts = [w * np.ones((4, 3)) for w in range(4)]
    np.testing.assert_array_equal(reduce_partials(parts), np.full((4, 3), 6.0))
    with pytest.raises(ValueError):
        reduce_partials([])


def test_reduce_eight_workers_against_fold():
    rng = np.random.default_rng(1)
    parts = [rng.standard_normal((7, 5)) * 10.0 ** rng.integers(-8, 8) for _ in range(8)]
    fold = parts[0].copy()
    for p in parts[1:]:
        fold = fold + p
    # arrival-order mode is a left fold
    np.testing.assert_array_equal(reduce_partials(parts, deterministic=False), fold)
    tree = reduce_partials(parts)
    assert np.max(np.abs(tree - fold)) <= 1e-13 * np.abs(fold).max()
    # the same tree applied by hand
    buf = [p.copy() for p in parts]
    for dst, src in [(0, 1), (2, 3), (4, 5), (6, 7), (0, 2), (4, 6), (0, 4)]:
        buf[dst] += buf[src]
    assert np.array_equal(reduce_partials(parts, ReductionPlan(8), True), buf[0])


def test_allreduce_examples():
    assert allreduce_scalar([1, 2, 3, 4]) == 10
    assert allreduce_scalar([-1, 5], "max") == 5
    with pytest.raises(ValueError):
        allreduce_scalar([1.0], "min")


def test_norm_pipeline():
    F, X = _instance(M=1001)
    with Engine(F, n_workers=4) as eng:
        assert eng.norm(X) == pytest.approx(np.linalg.norm(X), rel=1e-12)
        assert eng.dot(X, 2 * X) == pytest.approx(2 * np.sum(X * X), rel=1e-12)


# -- engine -----------------------------------------------------------------------------

@pytest.mark.parametrize("workers", [2, 3, 7])
def test_worker_count_independence(workers):
    F, X = _instance(M=500, D=15)
    R = np.random.default_rng(2).random((15, 5))
    with Engine(F, 1) as ref:
        FX, FtR = ref.matmul(X), ref.rmatmul(R)
    with Engine(F, workers, deterministic=False) as eng:
        np.testing.assert_allclose(eng.matmul(X), FX, rtol=0, atol=1e-12)
        np.testing.assert_array_equal(eng.rmatmul(R), FtR)
    with Engine(F, workers, deterministic=True) as a, Engine(F, workers, deterministic=True) as b:
        assert np.array_equal(a.matmul(X), b.matmul(X))
    np.testing.assert_allclose(FX, F.to_dense() @ X, rtol=1e-12, atol=1e-14)


def test_more_workers_than_rows():
    F = BandedMatrix.from_dense(np.array([[0.4, 0.6], [1.0, 0.0]]))
    X = np.eye(2)
    with Engine(F, 5) as eng:
        np.testing.assert_allclose(eng.matmul(X), F.to_dense())
        assert eng.rmatmul(np.ones((2, 2))).shape == (2, 2)


def test_column_sq_sums():
    F, _ = _instance()
    with Engine(F, 3) as eng:
        np.testing.assert_allclose(eng.column_sq_sums(), (F.to_dense() ** 2).sum(axis=0), rtol=1e-13)


def test_bench_ops_records():
    recs = bench_ops(2000, 4, 10, n_workers=1, reps=3)
    assert {r["op"] for r in recs} == {"objective", "gradient", "hessian_product", "scalar_product"}
    assert all(r["wall_ms"] > 0 for r in recs)
    assert set(recs[0]) == {"op", "M", "N", "D", "workers", "rep", "wall_ms"}
    med = median_times(recs)
    assert len(med) == 4 and all(v > 0 for v in med.values())
    # a small case with more workers still runs
    assert len(bench_ops(2000, 4, 10, n_workers=2, reps=1)) == 4


def test_bench_ops_memory_guard():
    with pytest.raises(MemoryBudgetError, match="GiB"):
        bench_ops(10**5, 10, 20, mem_budget=1000)
