"""l-infinity PGD attacks and the closed-form worst case for linear scores."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .models import as_theta
from .objective import logistic_loss


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float
    step_eta: float | None = None
    n_steps: int = 20
    n_restarts: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError("epsilon must be non-negative")
        if self.step_eta is None:
            object.__setattr__(self, "step_eta", self.epsilon / 4)
        if self.epsilon > 0 and not 0 < self.step_eta <= 2 * self.epsilon:
            raise ValueError("step_eta must lie in (0, 2 * epsilon]")
        if self.n_steps < 1 or self.n_restarts < 1:
            raise ValueError("n_steps and n_restarts must be >= 1")


@dataclass(frozen=True)
class RobustnessReport:
    epsilon: float
    clean_accuracy: float
    robust_accuracy: float
    mean_l1_margin: float


def _scores(model, x: np.ndarray) -> np.ndarray:
    # row-wise reduction: a BLAS product can round differently with batch size
    return (x * as_theta(model)).sum(axis=1)


def input_gradient(model, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Gradient of ``ln(1 + exp(-y f(x)))`` with respect to ``x``.

    Both supported models are linear in ``x`` (``f = theta^T x``), so the
    gradient is ``-y sigmoid(-y f) theta``.
    """
    theta = as_theta(model)
    u = y * _scores(model, x)
    weight = -y * np.exp(-np.logaddexp(0.0, u))
    return weight[:, None] * theta[None, :]


def _restart_start(x0: np.ndarray, eps: float, seed: int, r: int) -> np.ndarray:
    # one stream per (seed, sample index) so results do not depend on batch order
    out = np.empty_like(x0)
    for i in range(x0.shape[0]):
        rng = np.random.Generator(np.random.Philox(key=[seed % 2**64, i], counter=[r, 0, 0, 0]))
        out[i] = x0[i] + rng.uniform(-eps, eps, size=x0.shape[1])
    return out


def _box(x0: np.ndarray, eps: float) -> tuple[np.ndarray, np.ndarray]:
    # pull rounded bounds inward so |x - x0| <= eps holds in floating point
    lo, hi = x0 - eps, x0 + eps
    lo = np.where(x0 - lo > eps, np.nextafter(lo, np.inf), lo)
    hi = np.where(hi - x0 > eps, np.nextafter(hi, -np.inf), hi)
    return lo, hi


def pgd_linf(model, x, y, cfg: AttackConfig) -> np.ndarray:
    """Sign-gradient ascent on the per-sample logistic loss inside the eps-box.

    Restart 0 starts at ``x``; later restarts start at a seeded uniform point in
    the box.  The highest-loss iterate seen over all steps and restarts is
    returned for each sample.
    """
    x0 = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.atleast_1d(np.asarray(y))
    eps = float(cfg.epsilon)
    if eps == 0:
        return x0.copy()
    lo, hi = _box(x0, eps)
    best = x0.copy()
    best_loss = logistic_loss(y * _scores(model, x0))
    for r in range(cfg.n_restarts):
        xa = x0.copy() if r == 0 else np.clip(_restart_start(x0, eps, cfg.seed, r), lo, hi)
        for step in range(cfg.n_steps + 1):
            if step > 0:
                xa = np.clip(xa + cfg.step_eta * np.sign(input_gradient(model, xa, y)), lo, hi)
            cur = logistic_loss(y * _scores(model, xa))
            better = cur > best_loss
            best[better] = xa[better]
            best_loss = np.where(better, cur, best_loss)
    return best


def linear_attack_oracle(theta, x, y, epsilon: float) -> np.ndarray:
    """True where an l-inf perturbation of size ``epsilon`` can flip the decision.

    For ``f = theta^T x`` the worst case moves every coordinate by
    ``-epsilon * y * sign(theta)``, lowering the margin by ``epsilon * ||theta||_1``.
    """
    theta = as_theta(theta)
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.atleast_1d(np.asarray(y))
    return y * (x @ theta) <= epsilon * np.abs(theta).sum()


def l1_margin(theta, x, y) -> np.ndarray | float:
    """``y theta^T x / ||theta||_1``, the l-inf budget needed to flip ``x``."""
    theta = as_theta(theta)
    norm = np.abs(theta).sum()
    if norm == 0:
        raise ValueError("margin undefined for a zero parameter vector")
    out = np.asarray(y) * (np.asarray(x, dtype=float) @ theta) / norm
    return float(out) if np.ndim(out) == 0 else out


def robust_accuracy(model, dataset, cfg: AttackConfig) -> RobustnessReport:
    x, y = dataset.x, dataset.labels
    if len(y) == 0:
        raise ValueError("empty dataset")
    clean = float(np.mean(y * _scores(model, x) > 0))
    x_adv = pgd_linf(model, x, y, cfg)
    robust = float(np.mean(y * _scores(model, x_adv) > 0))
    theta = as_theta(model)
    margin = float(np.mean(l1_margin(theta, x, y))) if np.any(theta != 0) else float("nan")
    return RobustnessReport(cfg.epsilon, clean, robust, margin)


def oracle_robust_accuracy(theta, dataset, epsilon: float) -> float:
    return float(np.mean(~linear_attack_oracle(theta, dataset.x, dataset.labels, epsilon)))
