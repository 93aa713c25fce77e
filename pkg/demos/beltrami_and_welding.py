"""Solve a Beltrami equation with a known answer, then weld two independent
chaos measures and look at the resulting curve.

    python demos/beltrami_and_welding.py
"""

import numpy as np

from gmcweld.beltrami_solver import far_field_fit, solve_beltrami
from gmcweld.homeo_extension import lattice
from gmcweld.welding_pipeline import WeldingConfig, run_welding

# mu = k on the unit disk: F = z + k conj(z) inside and z + k / z outside
k = 0.3
g = lattice((-4, 4, -4, 4), 256)
z = g.coords()
g.values = k * (np.abs(z) < 1).astype(complex)
sol = solve_beltrami(g, None, tol=1e-10)
with np.errstate(divide="ignore", invalid="ignore"):
    exact = np.where(np.abs(z) < 1, z + k * np.conj(z), z + k / z)
print(f"disk test: {sol.iterations} iterations, max error {np.max(np.abs(sol.F.values - exact)):.2e}")
print("far field |F - z| ~ c/|z| + b with (c, b) =", tuple(round(v, 4) for v in far_field_fit(sol)))

for gamma in (0.0, 0.2):
    r = run_welding(WeldingConfig(gamma=gamma, M=64, depth=3, nx=128), seed=0)
    radial = np.abs(r.curve)
    print(f"gamma={gamma}: |F| in [{radial.min():.4f}, {radial.max():.4f}], "
          f"consistency {r.consistency_error:.2e}, simple {r.simple}, "
          f"Holder alpha {r.holder_fit['alpha']:.3f}")
    print("  cascade gaps", np.round(r.cascade, 4))
