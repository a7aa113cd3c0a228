"""Robust accuracy keeps improving after clean accuracy has saturated.

Half the off-manifold gap is the largest l-inf budget a perfect off-manifold
classifier can survive.  GD reaches it slowly and Newton almost at once.
"""
from manifold_lab import ManifoldSpec
from manifold_lab.lab import SweepConfig, run_robustness_curve

base = ManifoldSpec.default(sigma_ratio=8)
eps = base.off_gap() / 2
cfg = SweepConfig(base, variable="epsilon", values=(0.0, eps), methods=("gd", "newton"),
                  radius_scale=None, test_size=5000)
curve = run_robustness_curve(cfg, {"gd": 8192, "newton": 64})
for method in ("gd", "newton"):
    t, rob = curve.series(method, eps)
    _, clean = curve.series(method, eps, "clean_accuracy")
    print(f"\n{method}: eps = {eps:.4f}")
    for ti, r, c in zip(t, rob, clean):
        print(f"  t={ti:5d}  clean {c:.4f}  robust {r:.4f}")
