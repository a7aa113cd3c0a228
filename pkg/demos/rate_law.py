"""How the off-manifold convergence time scales with the variance ratio.

GD starts at zero on the default geometry for sigma_on / sigma_off in
{2, 4, 8, 16}.  For each ratio we count the iterations until each block of
theta is within 5% of its optimum, then fit log T against log ratio.
"""
from manifold_lab.lab import SweepConfig, run_convergence_sweep

res = run_convergence_sweep(SweepConfig.rate_sweep((2, 4, 8, 16)))
print("ratio   T_on   T_off")
for r in sorted(res.rows, key=lambda r: r.sigma_ratio):
    print(f"{r.sigma_ratio:5.0f} {r.t_on:6d} {r.t_off:7d}")
fit = res.fit_off()
print(f"\nT_off grows like ratio^{fit.slope:.2f} (r^2 = {fit.r_squared:.3f}); T_on barely moves.")
