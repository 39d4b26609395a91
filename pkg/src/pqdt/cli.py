"""Command-line front end: simulate, reconstruct, analyse, estimate, benchmark.

Every command reads an optional JSON config.  Missing keys take the desk-scale
defaults (25-bin detector with the fitted parameters, M = 10**4, D = 101,
5e5 trials), so ``pqdt simulate && pqdt reconstruct && pqdt fidelity`` runs
the full demo.

Exit codes: 0 success, 1 fidelity gate failed, 2 invalid input or memory
guard, 3 iteration cap, 4 line-search failure.
"""
from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import re
import sys
from pathlib import Path

import numpy as np

from . import analysis, core, detector, engine, solver

log = logging.getLogger("pqdt")

EXIT_OK, EXIT_GATE, EXIT_INVALID, EXIT_CAP, EXIT_LINE_SEARCH = 0, 1, 2, 3, 4

DEFAULT_SOLVER = dict(
    gamma=2.5e-4, cg_rel_tol=1e-6, cg_max_iters=2000,
    eps_stage1=1e-9, eps_kkt=1e-9,
    smoothing=dict(enabled=True, divisor=50.0, i_min=100),
)

DEFAULTS = {
    "detector": dict(J=25, p_dark=detector.DEFAULT_DARK_COUNT, **detector.FITTED_PARAMS),
    "probes": {"mode": "quadratic", "D": 101, "means": None},
    "dims": {"M": 10_000, "N": None},
    "truncation": "drop",
    "tail_mass_cutoff": detector.DEFAULT_TAIL_MASS,
    "trials": 500_000,
    "seed": 1234,
    "solver": DEFAULT_SOLVER,
    "engine": {"n_workers": 1, "deterministic_reduction": True},
    "paths": {"workdir": "."},
    "memory_budget_bytes": None,
    "fidelity_threshold": 0.99,
    "occupancy_threshold": analysis.DEFAULT_OCCUPANCY,
}


class CliError(Exception):
    def __init__(self, message, code=EXIT_INVALID):
        super().__init__(message)
        self.code = code


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def load_config(path=None, overrides: dict | None = None) -> dict:
    """Resolved run configuration: defaults, then the JSON file, then overrides."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        try:
            cfg = _merge(cfg, json.loads(Path(path).read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            raise CliError(f"cannot read config {path}: {exc}")
    if overrides:
        cfg = _merge(cfg, overrides)
    J = int(cfg["detector"]["J"])
    if cfg["dims"]["N"] is None:
        cfg["dims"]["N"] = J + 1
    if not 1 <= cfg["dims"]["N"] <= J + 1:
        raise CliError(f"N = {cfg['dims']['N']} is inconsistent with J = {J}")
    return cfg


def check_memory(M: int, N: int, D: int, budget=None) -> int:
    """Refuse before allocating when the solver estimate exceeds the budget."""
    budget = int(0.8 * engine.available_memory_bytes()) if budget is None else int(budget)
    need = core.mem_solver(M, N, D).bytes
    if need > budget:
        raise CliError(f"estimated solver memory {need / 2**30:.3f} GiB exceeds "
                       f"budget {budget / 2**30:.3f} GiB")
    return need


def _schedule(cfg) -> detector.ProbeSchedule:
    probes = cfg["probes"]
    if probes.get("mode", "quadratic") == "explicit":
        return detector.ProbeSchedule(np.asarray(probes["means"], dtype=np.float64))
    if probes["mode"] != "quadratic":
        raise CliError(f"unknown probe mode {probes['mode']!r}")
    return detector.quadratic_schedule_for_dimension(int(probes["D"]), int(cfg["dims"]["M"]),
                                                     cfg["tail_mass_cutoff"])


def _solver_config(cfg) -> solver.SolverConfig:
    try:
        return solver.SolverConfig(**cfg["solver"])
    except (TypeError, ValueError) as exc:
        raise CliError(f"invalid solver config: {exc}")


def _workdir(cfg) -> Path:
    wd = Path(cfg["paths"]["workdir"])
    wd.mkdir(parents=True, exist_ok=True)
    return wd


def _path(cfg, key, default):
    return Path(cfg["paths"].get(key) or _workdir(cfg) / default)


# ---------------------------------------------------------------------------
# Commands


def cmd_simulate(cfg) -> int:
    M, N = int(cfg["dims"]["M"]), int(cfg["dims"]["N"])
    sched = _schedule(cfg)
    check_memory(M, N, sched.D, cfg["memory_budget_bytes"])
    params = detector.DetectorParams(**cfg["detector"])
    F = detector.build_probe_matrix(sched, M, cfg["tail_mass_cutoff"])
    theo = detector.analytic_povm(params, M, N, cfg["truncation"])
    P = detector.simulate_outcomes(F, theo, int(cfg["trials"]), int(cfg["seed"]))
    wd = _workdir(cfg)
    core.save_matrix(F, wd / "F.pqdt")
    core.save_matrix(P, wd / "P.pqdt")
    core.save_matrix(theo, wd / "Pi_theo.pqdt")
    meta = dict(config=cfg, probe_means=sched.mean_photons.tolist(), D=sched.D, M=M, N=N)
    (wd / "meta.json").write_text(json.dumps(meta, indent=2))
    log.info("wrote F (%d x %d), P and analytic POVM to %s", sched.D, M, wd)
    return EXIT_OK


def cmd_reconstruct(cfg) -> int:
    F = core.load_matrix(_path(cfg, "F", "F.pqdt"))
    P = core.load_matrix(_path(cfg, "P", "P.pqdt"))
    if not isinstance(F, core.BandedMatrix):
        F = core.BandedMatrix.from_dense(F.values)
    inst = core.ProblemInstance(F, P)
    check_memory(inst.M, inst.N, inst.D, cfg["memory_budget_bytes"])
    eng = cfg["engine"]
    Pi, report = solver.solve_two_stage(inst, _solver_config(cfg),
                                        n_workers=int(eng["n_workers"]),
                                        deterministic=bool(eng["deterministic_reduction"]))
    core.save_matrix(Pi, _path(cfg, "Pi_rec", "Pi_rec.pqdt"))
    report.write_jsonl(_path(cfg, "report", "report.jsonl"))
    log.info("status %s after %d + %d Newton iterations, objective %.6e, KKT %.3e",
             report.status, report.newton_iterations(1), report.newton_iterations(2),
             report.final_objective, report.final_kkt)
    return {solver.STATUS_CONVERGED: EXIT_OK, solver.STATUS_ITERATION_CAP: EXIT_CAP,
            solver.STATUS_LINE_SEARCH_FAILURE: EXIT_LINE_SEARCH}[report.status]


def cmd_fidelity(cfg, rec=None, theo=None, threshold=None) -> int:
    A = core.load_matrix(rec or _path(cfg, "Pi_rec", "Pi_rec.pqdt"))
    B = core.load_matrix(theo or _path(cfg, "Pi_theo", "Pi_theo.pqdt"))
    if A.shape != B.shape:
        raise CliError(f"dimension mismatch {A.shape} vs {B.shape}")
    rep = analysis.infidelity_report(A, B, cfg["occupancy_threshold"])
    gate = cfg["fidelity_threshold"] if threshold is None else threshold
    out = rep.to_dict() | {"gate": gate, "passed": rep.passes(gate)}
    _path(cfg, "fidelity_report", "fidelity.json").write_text(json.dumps(out, indent=2))
    print(f"mean fidelity {rep.mean_occupied:.6f}  min {rep.min_occupied:.6f}  "
          f"occupied {int(rep.occupied.sum())}/{rep.occupied.size}")
    return EXIT_OK if out["passed"] else EXIT_GATE


def cmd_wigner(cfg, povm=None, outcome=1, extent=3.0, points=101, bits=analysis.DEFAULT_BITS) -> int:
    Pi = core.load_matrix(povm or _path(cfg, "Pi_theo", "Pi_theo.pqdt")).values
    if not 0 <= outcome < Pi.shape[1]:
        raise CliError(f"outcome {outcome} out of range 0..{Pi.shape[1] - 1}")
    grid = analysis.make_grid((-extent, extent), nx=points)
    W = analysis.wigner_diag(Pi[:, outcome], grid, bits)
    analysis.emit_plot_data(W, _workdir(cfg) / f"wigner_{outcome}.csv")
    x, p, w = W.argmin()
    print(f"min W = {w:.6e} at x = {x:.4f}, p = {p:.4f}")
    return EXIT_OK


_SIZE = re.compile(r"^\s*([0-9.eE+-]+)\s*([KMGT]i?B?)?\s*$", re.I)


def parse_bytes(text) -> float:
    """``"200GB"`` -> 2e11, ``"1KiB"`` -> 1024; bare numbers are bytes."""
    m = _SIZE.match(str(text))
    if not m:
        raise argparse.ArgumentTypeError(f"cannot parse size {text!r}")
    value, unit = float(m.group(1)), (m.group(2) or "").upper()
    if not unit:
        return value
    power = "KMGT".index(unit[0]) + 1
    return value * (1024 ** power if "I" in unit else 1000 ** power)


def cmd_mem_estimate(M, N, D, nodes, ranks, mem_node) -> int:
    storage = core.mem_storage(M, N, D)
    solv = core.mem_solver(M, N, D)
    m_max = core.max_hilbert_dim(N, D, ranks, nodes, mem_node)
    print(f"mem_storage_bytes {storage}")
    print(f"mem_solver_bytes {solv.bytes}")
    print(f"mem_solver_slack {solv.slack}")
    print(f"max_hilbert_dim {m_max}")
    return EXIT_OK


def cmd_bench_ops(cfg, M, N, D, workers, reps, out=None) -> int:
    check_memory(M, N, D, cfg["memory_budget_bytes"])
    path = Path(out) if out else _workdir(cfg) / "bench.csv"
    det = bool(cfg["engine"]["deterministic_reduction"])
    rows = []
    for w in workers:
        rows += engine.bench_ops(M, N, D, n_workers=w, reps=reps, deterministic=det,
                                 seed=int(cfg["seed"]), mem_budget=cfg["memory_budget_bytes"])
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["op", "M", "N", "D", "workers", "rep", "wall_ms"])
        writer.writeheader()
        writer.writerows(rows)
    for w in workers:
        med = engine.median_times(r for r in rows if r["workers"] == w)
        print(f"workers={w} " + " ".join(f"{k}={v:.3f}ms" for k, v in med.items()))
    return EXIT_OK


# ---------------------------------------------------------------------------
# Argument parsing


def _bool(text) -> bool:
    t = str(text).lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _int_list(text):
    return [int(v) for v in str(text).split(",") if v]


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pqdt", description=__doc__.split("\n\n")[0])
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--workers", type=int, help="engine worker count")
    p.add_argument("--seed", type=int, help="simulation / benchmark seed")
    p.add_argument("--deterministic", type=_bool, help="fixed-order reductions")
    p.add_argument("--workdir", help="directory for inputs and outputs")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("simulate", help="sample a detector data set")

    r = sub.add_parser("reconstruct", help="run the two-stage solver")
    r.add_argument("--F", dest="F_path")
    r.add_argument("--P", dest="P_path")
    r.add_argument("--out", help="reconstructed POVM path")

    f = sub.add_parser("fidelity", help="compare a reconstruction to the analytic POVM")
    f.add_argument("reconstructed", nargs="?")
    f.add_argument("theory", nargs="?")
    f.add_argument("--threshold", type=float)

    w = sub.add_parser("wigner", help="Wigner function of one POVM element")
    w.add_argument("povm", nargs="?")
    w.add_argument("--outcome", type=int, default=1)
    w.add_argument("--extent", type=float, default=3.0)
    w.add_argument("--points", type=int, default=101)
    w.add_argument("--bits", type=int, default=analysis.DEFAULT_BITS)

    m = sub.add_parser("mem-estimate", help="closed-form memory estimates")
    m.add_argument("--M", type=int, default=1_210_581)
    m.add_argument("--N", type=int, default=151)
    m.add_argument("--D", type=int, default=1076)
    m.add_argument("--nodes", type=int, default=1)
    m.add_argument("--ranks", type=int, default=8)
    m.add_argument("--mem-node", type=parse_bytes, default=200e9)

    b = sub.add_parser("bench-ops", help="time the solver kernels")
    b.add_argument("--M", type=int, default=100_000)
    b.add_argument("--N", type=int, default=26)
    b.add_argument("--D", type=int, default=101)
    b.add_argument("--workers-list", type=_int_list, default=[1, 2, 4, 8])
    b.add_argument("--reps", type=int, default=5)
    b.add_argument("--out")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        overrides: dict = {"engine": {}, "paths": {}}
        if args.workers is not None:
            overrides["engine"]["n_workers"] = args.workers
        if args.deterministic is not None:
            overrides["engine"]["deterministic_reduction"] = args.deterministic
        if args.seed is not None:
            overrides["seed"] = args.seed
        if args.workdir is not None:
            overrides["paths"]["workdir"] = args.workdir
        if args.command == "reconstruct":
            for key, val in (("F", args.F_path), ("P", args.P_path), ("Pi_rec", args.out)):
                if val:
                    overrides["paths"][key] = val
        if args.command == "mem-estimate":
            return cmd_mem_estimate(args.M, args.N, args.D, args.nodes, args.ranks, args.mem_node)
        cfg = load_config(args.config, overrides)
        if args.command == "simulate":
            return cmd_simulate(cfg)
        if args.command == "reconstruct":
            return cmd_reconstruct(cfg)
        if args.command == "fidelity":
            return cmd_fidelity(cfg, args.reconstructed, args.theory, args.threshold)
        if args.command == "wigner":
            return cmd_wigner(cfg, args.povm, args.outcome, args.extent, args.points, args.bits)
        return cmd_bench_ops(cfg, args.M, args.N, args.D, args.workers_list, args.reps, args.out)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (ValueError, OSError, core.MatrixFormatError, engine.MemoryBudgetError,
            solver.SolverError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
