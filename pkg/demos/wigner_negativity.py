"""Phase-space picture of single POVM elements.

A phase-insensitive POVM element is diagonal in the photon-number basis, so
its Wigner function is radial.  The one-click element of a lossy detector is
still dominated by the single-photon projector near vacuum, which shows up
as a negative dip at the origin.  Evaluating the Laguerre sum needs more than
double precision once photon numbers reach the thousands; the sweep below
shows how many mantissa bits are enough.
"""
import numpy as np

from pqdt import analytic_povm, fitted_detector, make_grid, wigner_diag, wigner_precision_sweep

M = 10_000
theo = analytic_povm(fitted_detector(25), M).values
grid = make_grid((-3.0, 3.0), nx=61)

for n in (0, 1, 2, 5):
    W = wigner_diag(theo[:, n], grid)
    x, p, wmin = W.argmin()
    print(f"outcome {n}: W(0,0) = {W.values[30, 30]:+.5f}, min {wmin:+.5f} at ({x:+.2f}, {p:+.2f}), "
          f"integral over window {W.integral():.3f}")

# Fock state |2000><2000| needs far more than double precision at moderate radius.
theta = np.zeros(2001)
theta[2000] = 1.0
sweep = wigner_precision_sweep(theta, ([0.0, 10.0, 30.0], [0.0]), [53, 64, 96, 128, 192, 256])
print("\nFock 2000, max deviation from the 256-bit result:")
for b, dev in zip(sweep.bits, sweep.max_deviation):
    print(f"  {b:3d} bits: {dev:.3e}")
print(f"  bit-identical from {sweep.stable_bits} bits")

sweep = wigner_precision_sweep(theo[:, 1], make_grid((-3, 3), nx=13), [53, 60, 64, 70, 96])
print(f"\ndetector outcome 1 (M = {M}): bit-identical from {sweep.stable_bits} bits")
