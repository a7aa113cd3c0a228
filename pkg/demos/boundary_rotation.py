"""The decision boundary turns toward the off-manifold axis as GD runs.

Writes a score grid for a few checkpoints (d = g = 1) and prints the slope
|theta_on / theta_off| of the boundary normal, which shrinks over time.
"""
import sys
from pathlib import Path

from manifold_lab import ManifoldSpec, PopulationProxy
from manifold_lab.lab import export_boundary_grid
from manifold_lab.optimizers import OptimizerConfig, train

out = Path(sys.argv[1] if len(sys.argv) > 1 else "boundary_demo")
out.mkdir(exist_ok=True)
spec = ManifoldSpec.default(sigma_ratio=8)
proxy = PopulationProxy.build(spec, 20_000, seed=0)
checkpoints = (16, 128, 1024, 8192)
traj = train(spec, proxy, OptimizerConfig.for_spec(spec, "gd", max_iter=max(checkpoints), grad_tol=0),
             record=lambda t: t in checkpoints)
for t, th in zip(traj.t, traj.theta):
    export_boundary_grid(th, spec, resolution=81, path=out / f"boundary_t{t}.csv", config={"t": t})
    print(f"t={t:5d}  theta=({th[0]:.3f}, {th[1]:.3f})  |theta_on/theta_off| = {abs(th[0] / th[1]):.4f}")
print(f"grids written to {out}/")
