"""Loss looks converged long before the classifier is.

Along a GD run at sigma_on / sigma_off = 8 the training accuracy saturates
within a few hundred steps and the loss keeps shrinking, yet theta_off is
still far from its optimum thousands of steps later.  This prints loss,
accuracy and the distance to the optimum of each block at powers of two.
"""
import math

import numpy as np

from manifold_lab import ManifoldSpec, PopulationProxy, ovl
from manifold_lab.optimizers import OptimizerConfig, estimate_optimum, powers_of_two, train

spec = ManifoldSpec.default(sigma_ratio=8)
proxy = PopulationProxy.build(spec, 20_000, seed=0)
star = estimate_optimum(spec, proxy)
traj = train(spec, proxy, OptimizerConfig.for_spec(spec, "gd", max_iter=16_384, grad_tol=0),
             theta_star=star, record=powers_of_two(16_384))

print(f"nu ln 2 = {ovl(spec) * math.log(2):.4f}")
print("     t    loss  accuracy  |d_on|  |d_off|")
for t, th, f, don, doff in zip(traj.t, traj.theta, traj.loss, traj.dist_on, traj.dist_off):
    acc = np.mean(proxy.y * (proxy.x @ th) > 0)
    print(f"{t:6d} {f:7.4f} {acc:9.4f} {don:7.3f} {doff:8.2f}")
