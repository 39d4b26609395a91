"""How far the method scales: memory estimates and kernel timings.

The solver keeps a handful of M x N matrices (iterate, gradient, CG vectors)
and the D x N residual, so memory grows linearly in M at fixed N and D.  The
first table evaluates the closed-form estimates; the second times the
bandwidth-bound kernels for growing M.
"""
from pqdt import max_hilbert_dim, mem_solver, mem_storage
from pqdt.engine import bench_ops, median_times

print("storage and solver memory")
print(f"{'M':>10} {'N':>5} {'D':>6} {'storage GB':>11} {'solver GB':>10}")
for M, N, D in [(10_000, 26, 101), (1_210_581, 151, 1076), (10_000_000, 151, 1076)]:
    print(f"{M:>10} {N:>5} {D:>6} {mem_storage(M, N, D) / 1e9:>11.2f} "
          f"{mem_solver(M, N, D).bytes / 1e9:>10.2f}")

print("\nlargest Hilbert space per node count (N=151, D=1076, 8 ranks, 200 GB nodes)")
for nodes in (1, 4, 16, 64):
    print(f"  {nodes:3d} nodes: M_max = {max_hilbert_dim(151, 1076, 8, nodes, 200e9):.3e}")

print("\nkernel medians (ms), N=26, D=101, one worker")
print(f"{'M':>8} " + " ".join(f"{op:>16}" for op in
                              ("objective", "gradient", "hessian_product", "scalar_product")))
for M in (50_000, 100_000, 200_000):
    med = median_times(bench_ops(M, 26, 101, n_workers=1, reps=3))
    print(f"{M:>8} " + " ".join(f"{med[op]:>16.2f}" for op in
                                ("objective", "gradient", "hessian_product", "scalar_product")))
