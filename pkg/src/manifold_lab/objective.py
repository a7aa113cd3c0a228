"""Logistic loss and its derivatives under a fixed population proxy.

Every expectation over the data distribution is replaced by an average over a
seeded sample (the proxy), so loss, gradient and Hessian are deterministic
within a run.  :func:`quadrature_expectation` computes the same expectations
by tensor-product Gauss-Legendre quadrature and serves as an independent check
in low dimension.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .distribution import Dataset, ManifoldSpec, sample, second_moment, signed_mean
from .models import as_theta

DEFAULT_PROXY_SIZE = 200_000
QUAD_NODES = 64
QUAD_MAX_DIM = 4


def logistic_loss(u: np.ndarray) -> np.ndarray:
    """``ln(1 + exp(-u))`` without overflow."""
    u = np.asarray(u, dtype=float)
    return np.log1p(np.exp(-np.abs(u))) + np.maximum(0.0, -u)


def sigmoid(u: np.ndarray) -> np.ndarray:
    u = np.asarray(u, dtype=float)
    e = np.exp(-np.abs(u))
    return np.where(u >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid_var(z: np.ndarray) -> np.ndarray:
    """``sigmoid(z) * sigmoid(-z)`` computed as ``e / (1 + e)**2`` with ``e = exp(-|z|)``."""
    e = np.exp(-np.abs(np.asarray(z, dtype=float)))
    return e / (1.0 + e) ** 2


@dataclass(frozen=True)
class PopulationProxy:
    dataset: Dataset
    spec: ManifoldSpec

    @classmethod
    def build(cls, spec: ManifoldSpec, n: int = DEFAULT_PROXY_SIZE, seed: int = 0) -> "PopulationProxy":
        return cls(sample(spec, n, seed), spec)

    @property
    def x(self) -> np.ndarray:
        return self.dataset.x

    @property
    def y(self) -> np.ndarray:
        return self.dataset.labels

    @property
    def n(self) -> int:
        return len(self.dataset)

    def margins(self, params) -> np.ndarray:
        """``y * theta^T x`` for every proxy sample."""
        return self.y * (self.x @ as_theta(params))


def _check_dim(theta: np.ndarray, proxy: PopulationProxy) -> None:
    if theta.shape[0] != proxy.x.shape[1]:
        raise ValueError(f"theta has length {theta.shape[0]}, data has {proxy.x.shape[1]} features")


def loss(params, proxy: PopulationProxy) -> float:
    theta = as_theta(params)
    _check_dim(theta, proxy)
    return float(np.mean(logistic_loss(proxy.margins(theta))))


def loss_with_stderr(params, proxy: PopulationProxy) -> tuple[float, float]:
    per = logistic_loss(proxy.margins(params))
    return float(per.mean()), float(per.std(ddof=1) / np.sqrt(per.size))


def grad_theta(params, proxy: PopulationProxy) -> np.ndarray:
    """``-E[y x sigmoid(-y z)]`` with respect to the identifiable coefficients."""
    theta = as_theta(params)
    _check_dim(theta, proxy)
    weights = -proxy.y * sigmoid(-proxy.margins(theta))
    return weights @ proxy.x / proxy.n


def grad_with_stderr(params, proxy: PopulationProxy) -> tuple[np.ndarray, np.ndarray]:
    theta = as_theta(params)
    per = (-proxy.y * sigmoid(-proxy.margins(theta)))[:, None] * proxy.x
    return per.mean(axis=0), per.std(axis=0, ddof=1) / np.sqrt(proxy.n)


def hessian_theta(params, proxy: PopulationProxy) -> np.ndarray:
    theta = as_theta(params)
    _check_dim(theta, proxy)
    s = sigmoid_var(proxy.x @ theta)
    h = (proxy.x * s[:, None]).T @ proxy.x / proxy.n
    return 0.5 * (h + h.T)


def loss_grad_hessian(params, proxy: PopulationProxy) -> tuple[float, np.ndarray, np.ndarray]:
    """All three quantities sharing one pass over the proxy."""
    theta = as_theta(params)
    _check_dim(theta, proxy)
    z = proxy.x @ theta
    u = proxy.y * z
    val = float(np.mean(logistic_loss(u)))
    g = (-proxy.y * sigmoid(-u)) @ proxy.x / proxy.n
    s = sigmoid_var(z)
    h = (proxy.x * s[:, None]).T @ proxy.x / proxy.n
    return val, g, 0.5 * (h + h.T)


# -- theta = 0 anchors ----------------------------------------------------

def exact_moment(spec: ManifoldSpec, which: str):
    """Closed-form population values at ``theta = 0``, where ``sigmoid(0) = 1/2``.

    ``loss -> ln 2``, ``grad -> -E[y x] / 2``, ``hessian -> E[x x^T] / 4``.
    """
    if which == "loss":
        return float(np.log(2.0))
    if which == "grad":
        return -0.5 * signed_mean(spec)
    if which == "hessian":
        return 0.25 * second_moment(spec)
    raise ValueError(f"unknown quantity {which!r}")


# -- gradient decomposition ----------------------------------------------

@dataclass(frozen=True)
class GradDecomposition:
    on_separated: np.ndarray
    on_overlap: np.ndarray
    off_total: np.ndarray

    @property
    def on_total(self) -> np.ndarray:
        return self.on_separated + self.on_overlap


def grad_decomposition(params, proxy: PopulationProxy, spec: ManifoldSpec | None = None) -> GradDecomposition:
    """Split the on-manifold gradient into separated- and overlap-region parts."""
    spec = proxy.spec if spec is None else spec
    theta = as_theta(params)
    _check_dim(theta, proxy)
    weights = -proxy.y * sigmoid(-proxy.margins(theta)) / proxy.n
    x_on = proxy.dataset.x_on
    mask = proxy.dataset.overlap_mask()
    on_overlap = weights[mask] @ x_on[mask]
    on_separated = weights[~mask] @ x_on[~mask]
    off_total = weights @ proxy.dataset.x_off
    return GradDecomposition(np.atleast_1d(on_separated), np.atleast_1d(on_overlap),
                             np.atleast_1d(off_total))


def directional_loss_change(theta_t, theta_next, proxy: PopulationProxy,
                            spec: ManifoldSpec | None = None) -> tuple[float, float, float]:
    """Loss changes from moving only the on block, only the off block, and both."""
    spec = proxy.spec if spec is None else spec
    a = as_theta(theta_t)
    b = as_theta(theta_next)
    d = spec.d
    base = loss(a, proxy)
    on_only = np.concatenate([b[:d], a[d:]])
    off_only = np.concatenate([a[:d], b[d:]])
    return loss(on_only, proxy) - base, loss(off_only, proxy) - base, loss(b, proxy) - base


# -- quadrature oracle ----------------------------------------------------

def _class_nodes(spec: ManifoldSpec, label: int, n_nodes: int):
    t, w = np.polynomial.legendre.leggauss(n_nodes)
    axes, weights = [], []
    lo, hi = spec.on_bounds(label)
    for _ in range(spec.d):
        axes.append(0.5 * (hi - lo) * t + 0.5 * (hi + lo))
        weights.append(0.5 * w)
    mu = spec.mu_off(label)
    for j in range(spec.g):
        axes.append(mu[j] + spec.half_width_off * t)
        weights.append(0.5 * w)
    return axes, weights


def quadrature_expectation(params, spec: ManifoldSpec, which: str, n_nodes: int = QUAD_NODES):
    """Population ``loss``, ``grad`` or ``hessian`` by Gauss-Legendre quadrature.

    Each class box gets a tensor grid of ``n_nodes`` per axis (weights normalised
    to the uniform density) and the two classes are mixed by the prior.
    """
    if spec.D > QUAD_MAX_DIM:
        raise ValueError(f"quadrature limited to d + g <= {QUAD_MAX_DIM}")
    if which not in ("loss", "grad", "hessian"):
        raise ValueError(f"unknown quantity {which!r}")
    theta = as_theta(params)
    if theta.shape[0] != spec.D:
        raise ValueError("dimension mismatch")
    total = 0.0
    for label, prior in ((1, spec.prior_pos), (-1, 1 - spec.prior_pos)):
        if prior == 0:
            continue
        axes, weights = _class_nodes(spec, label, n_nodes)
        acc = 0.0
        # iterate over the first axis to bound memory at n_nodes**(D-1) points
        rest_pts = np.stack(np.meshgrid(*axes[1:], indexing="ij"), -1).reshape(-1, spec.D - 1) \
            if spec.D > 1 else np.zeros((1, 0))
        rest_w = np.ones(1)
        for w in weights[1:]:
            rest_w = np.multiply.outer(rest_w, w).reshape(-1)
        for x0, w0 in zip(axes[0], weights[0]):
            pts = np.hstack([np.full((rest_pts.shape[0], 1), x0), rest_pts])
            wt = w0 * rest_w
            z = pts @ theta
            if which == "loss":
                acc = acc + wt @ logistic_loss(label * z)
            elif which == "grad":
                acc = acc + (wt * (-label) * sigmoid(-label * z)) @ pts
            else:
                s = wt * sigmoid_var(z)
                acc = acc + (pts * s[:, None]).T @ pts
        total = total + prior * acc
    return float(total) if which == "loss" else np.asarray(total)


def hessian_blocks(h: np.ndarray, d: int) -> tuple[np.ndarray, np.ndarray]:
    return h[:d, :d], h[d:, d:]

