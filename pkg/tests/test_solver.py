import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pqdt.core import BandedMatrix, ProblemInstance
from pqdt.engine import Engine
from pqdt.simplex import project_rows
from pqdt.solver import (STATUS_CONVERGED, ConvergenceReport, Metric, Problem, SolverConfig,
                         SolverError, gradient, hessian_diag, hessian_product, initial_state,
                         kkt_residual, newton_iteration_budget_check, objective, pcg_solve,
                         smooth_povm, solve_two_stage, stage1_direction, stage1_iterate,
                         stage2_iterate, stage_transition_check)


def random_problem(rng, M, N, D, gamma=0.0, workers=1):
    F = rng.random((D, M)) * (rng.random((D, M)) < 0.7)
    F /= np.maximum(F.sum(axis=1, keepdims=True), 1e-300)
    P = rng.random((D, N))
    return Problem(Engine(BandedMatrix.from_dense(F), workers), P, gamma), F, P


def naive_objective(F, P, Pi, gamma):
    D, M = F.shape
    N = P.shape[1]
    total = 0.0
    for d in range(D):
        for n in range(N):
            s = 0.0
            for i in range(M):
                s += F[d, i] * Pi[i, n]
            total += (P[d, n] - s) ** 2
    for n in range(N):
        for i in range(M - 1):
            total += gamma * (Pi[i, n] - Pi[i + 1, n]) ** 2
    return total


def simulated_instance(M=60, N=3, D=20, seed=0, noise=True):
    """A small detector-like instance with a known POVM."""
    rng = np.random.default_rng(seed)
    from pqdt.detector import analytic_povm, build_probe_matrix, fitted_detector, \
        quadratic_schedule_for_dimension, simulate_outcomes
    F = build_probe_matrix(quadratic_schedule_for_dimension(D, M), M)
    theo = analytic_povm(fitted_detector(N - 1), M).values
    if noise:
        P = simulate_outcomes(F, theo, 10**6, int(rng.integers(1 << 30))).values
    else:
        P = F.to_dense() @ theo
        P /= P.sum(axis=1, keepdims=True)
    return ProblemInstance(F, P), theo


# -- objective and derivatives ------------------------------------------------------

def test_objective_toy():
    prob = Problem(Engine(BandedMatrix.from_dense(np.array([[1.0]]))), np.array([[0.3]]))
    assert prob.objective(np.array([[0.7]])) == pytest.approx(0.16, abs=1e-15)


def test_objective_exact_fit_and_naive_loop():
    rng = np.random.default_rng(0)
    prob, F, P = random_problem(rng, 9, 3, 6, gamma=0.3)
    Pi = project_rows(rng.random((9, 3)))
    assert prob.objective(Pi) == pytest.approx(naive_objective(F, P, Pi, 0.3), rel=1e-12)
    exact = Problem(prob.engine, F @ Pi)
    assert exact.objective(Pi) <= 1e-28
    np.testing.assert_allclose(exact.gradient(Pi), 0.0, atol=1e-14)


def test_standalone_wrappers():
    inst, theo = simulated_instance(noise=False)
    assert objective(theo, inst) <= 1e-20
    np.testing.assert_allclose(gradient(theo, inst), 0.0, atol=1e-9)
    hd = hessian_diag(inst, 0.5)
    assert hd.shape == (inst.M, inst.N)
    np.testing.assert_array_equal(hd[:, 0], hd[:, -1])


@pytest.mark.parametrize("seed", range(20))
def test_gradient_and_hessian_against_finite_differences(seed):
    rng = np.random.default_rng(seed)
    M, N, D = int(rng.integers(2, 13)), int(rng.integers(1, 5)), int(rng.integers(1, 9))
    gamma = float(rng.choice([0.0, 0.1, 1.0]))
    prob, _, _ = random_problem(rng, M, N, D, gamma)
    Pi = rng.random((M, N))
    g = prob.gradient(Pi)
    fd = np.zeros_like(Pi)
    for idx in np.ndindex(Pi.shape):
        h = 1e-6 * max(1.0, abs(Pi[idx]))
        e = np.zeros_like(Pi)
        e[idx] = h
        fd[idx] = (prob.objective(Pi + e) - prob.objective(Pi - e)) / (2 * h)
    assert np.max(np.abs(fd - g)) <= 1e-6 * max(1.0, np.max(np.abs(g)))
    d = rng.standard_normal((M, N))
    h = 1e-6
    fd_h = (prob.gradient(Pi + h * d) - prob.gradient(Pi - h * d)) / (2 * h)
    Hd = prob.hessian_product(d)
    assert np.max(np.abs(fd_h - Hd)) <= 1e-5 * max(1.0, np.max(np.abs(Hd)))


def test_flat_columns_have_no_regulariser_gradient():
    prob = Problem(Engine(BandedMatrix.from_dense(np.zeros((2, 5)))), np.zeros((2, 3)), 2.0)
    Pi = np.tile([0.2, 0.3, 0.5], (5, 1))
    np.testing.assert_array_equal(prob.gradient(Pi), 0.0)
    assert prob.regulariser(Pi) == 0.0


def test_hessian_orthonormal_and_linear():
    prob = Problem(Engine(BandedMatrix.from_dense(np.eye(4))), np.zeros((4, 2)))
    d = np.random.default_rng(1).standard_normal((4, 2))
    np.testing.assert_allclose(prob.hessian_product(d), 2 * d, rtol=1e-15)
    np.testing.assert_array_equal(prob.hessian_product(np.zeros((4, 2))), 0.0)


def test_hessian_diag_oracles():
    rng = np.random.default_rng(2)
    prob, F, P = random_problem(rng, 6, 2, 4, gamma=0.7)
    hd = prob.hessian_diag()
    for i in range(6):
        e = np.zeros((6, 2))
        e[i, 1] = 1.0
        assert hd[i] == pytest.approx(prob.hessian_product(e)[i, 1], rel=1e-13)
    eye = Problem(Engine(BandedMatrix.from_dense(np.eye(3))), np.zeros((3, 2)))
    np.testing.assert_array_equal(eye.hessian_diag(), 2.0)
    gam = Problem(Engine(BandedMatrix.from_dense(np.zeros((1, 3)))), np.zeros((1, 1)), 0.5)
    np.testing.assert_allclose(gam.hessian_diag(), [1.0, 2.0, 1.0])


def test_masked_hessian_product():
    rng = np.random.default_rng(3)
    prob, _, _ = random_problem(rng, 5, 3, 4)
    F = prob.engine.F.to_dense()
    inst = ProblemInstance(F, np.full((4, 3), 1 / 3))
    d = rng.standard_normal((5, 3))
    row_max = np.array([0, 1, 2, 0, 1])
    active = np.zeros((5, 3), dtype=bool)
    active[0, 1] = active[3, 2] = True
    out = hessian_product(d, inst, active=active, row_max=row_max)
    # dense oracle in the reduced coordinates
    H = 2 * F.T @ F
    for n in range(3):
        for i in range(5):
            if n == row_max[i]:
                assert out[i, n] == 0.0
    x = np.where(~active, d, 0.0)
    x[np.arange(5), row_max] = 0.0
    full = x.copy()
    full[np.arange(5), row_max] = -x.sum(axis=1)
    y = H @ full
    y -= y[np.arange(5), row_max][:, None]
    expect = np.where(~active, y, 0.0)
    expect[active] = 4 * np.diag(F.T @ F)[np.nonzero(active)[0]] * d[active]
    expect[np.arange(5), row_max] = 0.0
    np.testing.assert_allclose(out, expect, rtol=1e-12, atol=1e-14)


def test_regulariser_consistency():
    rng = np.random.default_rng(4)
    prob, F, P = random_problem(rng, 10, 3, 5, gamma=0.37)
    plain = Problem(prob.engine, P, 0.0)
    Pi = project_rows(rng.random((10, 3)))
    reg = 0.37 * np.sum((Pi[:-1] - Pi[1:]) ** 2)
    assert prob.objective(Pi) - plain.objective(Pi) == pytest.approx(reg, rel=1e-12)


# -- conjugate gradients -----------------------------------------------------------------

def test_pcg_identity_one_iteration():
    prob = Problem(Engine(BandedMatrix.from_dense(np.eye(4))), np.zeros((4, 2)))
    metric = Metric(prob)
    G = np.random.default_rng(5).standard_normal((4, 2))
    x, it = pcg_solve(G, metric, metric.diag, 1e-12, 50)
    np.testing.assert_allclose(x, G / 2, rtol=1e-15)
    assert it == 1


def test_pcg_matches_dense_solve():
    rng = np.random.default_rng(6)
    A = rng.standard_normal((10, 10))
    A = A @ A.T + 10 * np.eye(10)
    b = rng.standard_normal((10, 2))
    x, it = pcg_solve(b, lambda v: A @ v, np.repeat(np.diag(A)[:, None], 2, axis=1), 1e-12, 100)
    np.testing.assert_allclose(x, np.linalg.solve(A, b), atol=1e-8)
    assert 1 <= it <= 100
    assert pcg_solve(np.zeros((3, 1)), lambda v: v, np.ones((3, 1)))[1] == 0


def test_pcg_non_finite_raises():
    with pytest.raises(SolverError):
        pcg_solve(np.ones((2, 1)), lambda v: np.full_like(v, np.nan), np.ones((2, 1)))


# -- KKT, stage transition, iterations --------------------------------------------------

def test_kkt_interior_optimum_is_zero():
    grad = np.tile(np.array([[-3.0], [-1.5]]), (1, 4))
    Pi = np.full((2, 4), 0.25)
    assert kkt_residual(Pi, grad) == 0.0
    # a row with an entry sitting at zero and a larger gradient is still optimal
    assert kkt_residual(np.array([[0.0, 1.0]]), np.array([[2.0, -1.0]])) == 0.0
    assert kkt_residual(np.array([[0.5, 0.5]]), np.array([[1.0, -1.0]])) > 0
    # the multiplier is clamped at zero, so a uniformly positive row counts as violation
    assert kkt_residual(np.array([[0.5, 0.5]]), np.array([[1.0, 1.0]])) == pytest.approx(0.5)


def test_transition_check_boundary():
    rng = np.random.default_rng(7)
    prob, _, _ = random_problem(rng, 4, 2, 3)
    state = initial_state(prob, np.full((4, 2), 0.5))
    with pytest.raises(ValueError):
        stage_transition_check(state)
    state.direction = np.zeros((4, 2))
    state.path_derivative = -1.0001e-4
    assert not stage_transition_check(state)
    state.path_derivative = 1e-4
    assert stage_transition_check(state)


def test_transition_far_and_near():
    inst, theo = simulated_instance(noise=False)
    prob = Problem.from_instance(inst)
    cfg = SolverConfig()
    far = initial_state(prob, np.eye(inst.N)[np.zeros(inst.M, dtype=int)])
    stage1_direction(far, prob, cfg)
    assert not stage_transition_check(far)
    near = initial_state(prob, theo)
    stage1_direction(near, prob, cfg)
    assert stage_transition_check(near)


def test_single_row_stage1():
    F = BandedMatrix.from_dense(np.array([[1.0]]))
    prob = Problem(Engine(F), np.array([[0.3, 0.7]]))
    state = initial_state(prob, np.array([[0.5, 0.5]]))
    cfg = SolverConfig(cg_rel_tol=1e-12)
    for _ in range(3):
        if state.objective <= 1e-30 or not stage1_iterate(state, prob, cfg):
            break
    np.testing.assert_allclose(state.Pi, [[0.3, 0.7]], atol=1e-12)
    assert state.k <= 3


def test_stage2_interior_stationary_point():
    F = BandedMatrix.from_dense(np.array([[1.0]]))
    prob = Problem(Engine(F), np.array([[0.3, 0.7]]))
    state = initial_state(prob, np.array([[0.3, 0.7]]))
    assert not stage2_iterate(state, prob, SolverConfig())
    assert state.kkt == 0.0


def test_stage2_steps_stay_feasible():
    inst, _ = simulated_instance(seed=1)
    prob = Problem.from_instance(inst, 1e-3)
    cfg = SolverConfig(gamma=1e-3)
    state = initial_state(prob, np.full((inst.M, inst.N), 1.0 / inst.N))
    last = state.objective
    for _ in range(15):
        if not stage2_iterate(state, prob, cfg):
            break
        assert state.Pi.min() >= 0.0
        assert np.max(np.abs(state.Pi.sum(axis=1) - 1)) <= 1e-12
        assert state.objective <= last
        last = state.objective
    assert state.k >= 3


# -- driver ----------------------------------------------------------------------------------

def test_solve_single_row():
    inst = ProblemInstance(np.array([[1.0]]), np.array([[0.3, 0.7]]))
    Pi, rep = solve_two_stage(inst)
    np.testing.assert_allclose(Pi.values, [[0.3, 0.7]], atol=1e-9)
    assert rep.status == STATUS_CONVERGED
    assert rep.final_objective <= 1e-18


def test_solve_identity_probe():
    P = np.array([[0.25, 0.75], [0.6, 0.4]])
    Pi, rep = solve_two_stage(ProblemInstance(np.eye(2), P))
    np.testing.assert_allclose(Pi.values, P, atol=1e-9)


def test_exact_recovery_small():
    inst, theo = simulated_instance(M=80, N=5, D=30, noise=False)
    cfg = SolverConfig(cg_rel_tol=1e-10, cg_max_iters=500, eps_stage1=1e-12, eps_kkt=1e-13)
    Pi, rep = solve_two_stage(inst, cfg)
    assert rep.final_objective <= 1e-10 * np.sum(inst.P.values ** 2)


def test_report_and_invariants(tmp_path):
    inst, _ = simulated_instance(seed=2)
    cfg = SolverConfig(gamma=1e-3, smoothing={"enabled": True, "divisor": 10, "i_min": 20})
    Pi, rep = solve_two_stage(inst, cfg)
    assert rep.status == STATUS_CONVERGED
    assert rep.final_kkt <= cfg.eps_kkt
    assert {r.phase for r in rep.records} == {"main", "smoothed"}
    for r in rep.records:
        assert r.min_entry >= 0.0
        assert r.max_row_sum_error <= 1e-9
    # nonincreasing within each stage and phase
    for key in {(r.stage, r.phase) for r in rep.records}:
        objs = [r.objective for r in rep.records if (r.stage, r.phase) == key]
        assert all(b <= a for a, b in zip(objs, objs[1:]))
    rep.write_jsonl(tmp_path / "r.jsonl")
    lines = (tmp_path / "r.jsonl").read_text().splitlines()
    assert len(lines) == len(rep.records)
    rec = json.loads(lines[-1])
    assert {"stage", "k", "objective", "kkt", "alpha", "cg_iters", "wall_ms"} <= set(rec)
    assert rep.metadata["eps_kkt_is_default"] and rep.metadata["smoothing_reprojects_rows"]
    assert newton_iteration_budget_check(rep)


def test_determinism_and_workers():
    inst, _ = simulated_instance(seed=3)
    cfg = SolverConfig(gamma=1e-3)
    a, ra = solve_two_stage(inst, cfg, n_workers=3)
    b, _ = solve_two_stage(inst, cfg, n_workers=3)
    assert np.array_equal(a.values, b.values)
    # other tree shapes round differently; the flat optimum is then reached elsewhere
    c, rc = solve_two_stage(inst, cfg, n_workers=1)
    assert rc.status == ra.status == STATUS_CONVERGED
    assert rc.final_objective == pytest.approx(ra.final_objective, rel=1e-4)


def test_caps_are_reported():
    inst, _ = simulated_instance(seed=4)
    cfg = SolverConfig(gamma=1e-3, use_stage1=False, max_newton_stage2=1, eps_kkt=1e-15)
    _, rep = solve_two_stage(inst, cfg)
    assert rep.status == "iteration-cap" and rep.newton_iterations(2) == 1
    # unregularised and under-determined: the reduced Newton direction is huge and
    # every trial drives an implied coordinate negative
    from pqdt.detector import analytic_povm, build_probe_matrix, fitted_detector, \
        quadratic_schedule_for_dimension, simulate_outcomes
    F = build_probe_matrix(quadratic_schedule_for_dimension(20, 60), 60)
    P = simulate_outcomes(F, analytic_povm(fitted_detector(2), 60).values, 10**6, 881)
    from pqdt.cli import DEFAULT_SOLVER
    cfg = dict(DEFAULT_SOLVER, gamma=0.0, use_stage1=False, smoothing={"enabled": False})
    _, rep = solve_two_stage(ProblemInstance(F, P), SolverConfig(**cfg))
    assert rep.status == "line-search-failure"


def test_unprobed_rows_are_frozen():
    F = np.array([[0.5, 0.5, 0.0]])
    inst = ProblemInstance(F, np.array([[0.4, 0.6]]))
    Pi, rep = solve_two_stage(inst, SolverConfig())
    assert rep.metadata["frozen_rows"] == [2]
    np.testing.assert_array_equal(Pi.values[2], [0.5, 0.5])


def test_budget_check():
    assert not newton_iteration_budget_check(ConvergenceReport())
    assert not newton_iteration_budget_check(None)


def test_config_validation():
    with pytest.raises(ValueError):
        SolverConfig(gamma=-1)
    with pytest.raises(ValueError):
        SolverConfig(beta=1.0)
    with pytest.raises(ValueError):
        SolverConfig(smoothing={"divisor": 0.5})


# -- smoothing ---------------------------------------------------------------------------------

def brute_force_smooth(Pi, divisor, i_min):
    out = Pi.copy()
    M = Pi.shape[0]
    for i in range(i_min, M):
        s = math.floor(i / divisor)
        lo, hi = max(i - s, 0), min(i + s, M - 1)
        out[i] = Pi[lo:hi + 1].mean(axis=0)
    out[i_min:] = project_rows(out[i_min:])
    return out


def test_smoothing_constant_and_low_rows():
    Pi = np.tile([0.1, 0.2, 0.7], (300, 1))
    np.testing.assert_allclose(smooth_povm(Pi), Pi, atol=1e-15)
    rnd = project_rows(np.random.default_rng(8).random((300, 3)))
    out = smooth_povm(rnd)
    assert np.array_equal(out[:100], rnd[:100])
    with pytest.raises(ValueError):
        smooth_povm(rnd, divisor=0.5)


def test_smoothing_spike_window():
    Pi = np.zeros((1000, 2))
    Pi[:, 1] = 1.0
    Pi[500] = [1.0, 0.0]
    out = smooth_povm(Pi, 50, 100)
    np.testing.assert_allclose(out, brute_force_smooth(Pi, 50, 100), atol=1e-14)
    hit = np.flatnonzero(out[:, 0] > 1e-15)
    # rows that see 500 inside their own window floor(i / 50)
    assert hit[0] == 491 and hit[-1] == 510
    np.testing.assert_allclose(out[491:500, 0], 1 / 19, rtol=1e-12)
    np.testing.assert_allclose(out[500:511, 0], 1 / 21, rtol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 200), st.floats(1, 60), st.integers(0, 220), st.integers(0, 2**31))
def test_smoothing_matches_brute_force(M, divisor, i_min, seed):
    Pi = project_rows(np.random.default_rng(seed).random((M, 3)))
    np.testing.assert_allclose(smooth_povm(Pi, divisor, i_min),
                               brute_force_smooth(Pi, divisor, min(i_min, M)), atol=1e-12)
