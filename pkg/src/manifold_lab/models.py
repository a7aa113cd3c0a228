"""Logistic-regression and two-layer linear network parameters."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_RADIUS = 50.0


class RankDeficientError(ValueError):
    """First-layer matrix lost full column rank."""


@dataclass(frozen=True)
class LinearParams:
    theta: np.ndarray

    def __post_init__(self):
        theta = np.array(self.theta, dtype=float).reshape(-1)
        theta.setflags(write=False)
        object.__setattr__(self, "theta", theta)

    @property
    def D(self) -> int:
        return self.theta.shape[0]


@dataclass(frozen=True)
class TwoLayerParams:
    """``f(x) = w^T A x`` with ``A`` of shape ``(m, D)``."""

    a_matrix: np.ndarray
    w: np.ndarray

    def __post_init__(self):
        a = np.array(self.a_matrix, dtype=float)
        w = np.array(self.w, dtype=float).reshape(-1)
        if a.ndim != 2 or a.shape[0] != w.shape[0]:
            raise ValueError(f"shape mismatch: A {a.shape}, w {w.shape}")
        if a.shape[0] < a.shape[1]:
            raise ValueError("two-layer model needs m >= D")
        a.setflags(write=False)
        w.setflags(write=False)
        object.__setattr__(self, "a_matrix", a)
        object.__setattr__(self, "w", w)

    @property
    def D(self) -> int:
        return self.a_matrix.shape[1]

    @property
    def m(self) -> int:
        return self.a_matrix.shape[0]

    @classmethod
    def init(cls, D: int, m: int | None = None, seed: int = 0) -> "TwoLayerParams":
        """Random orthonormal first layer (seeded) and zero output layer."""
        from .distribution import make_rng

        m = 2 * D if m is None else m
        g = make_rng(seed).standard_normal((m, D))
        q, _ = _signed_qr(g)
        return cls(q, np.zeros(m))


@dataclass(frozen=True)
class IdentifiableParams:
    theta: np.ndarray

    def __post_init__(self):
        theta = np.array(self.theta, dtype=float).reshape(-1)
        theta.setflags(write=False)
        object.__setattr__(self, "theta", theta)


def as_theta(params) -> np.ndarray:
    """Identifiable coefficient vector of any parameter record (or a raw array)."""
    if isinstance(params, (LinearParams, IdentifiableParams)):
        return params.theta
    if isinstance(params, TwoLayerParams):
        return collapse(params).theta
    return np.asarray(params, dtype=float).reshape(-1)


def score(params, x) -> np.ndarray | float:
    """Model score for one point ``(D,)`` or a batch ``(n, D)``."""
    x = np.asarray(x, dtype=float)
    D = params.D if hasattr(params, "D") else as_theta(params).shape[0]
    if x.shape[-1] != D:
        raise ValueError(f"expected inputs of dimension {D}, got {x.shape[-1]}")
    if isinstance(params, TwoLayerParams):
        out = (x @ params.a_matrix.T) @ params.w
    else:
        out = x @ as_theta(params)
    return float(out) if np.ndim(out) == 0 else out


def collapse(two_layer: TwoLayerParams) -> IdentifiableParams:
    return IdentifiableParams(two_layer.a_matrix.T @ two_layer.w)


def _signed_qr(a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    q, r = np.linalg.qr(a, mode="reduced")
    s = np.where(np.diag(r) < 0, -1.0, 1.0)
    return q * s, r * s[:, None]


def orthogonalize(two_layer: TwoLayerParams, rtol: float = 1e-12) -> TwoLayerParams:
    """Replace ``A`` by its orthonormal QR factor and refit ``w`` so ``A^T w`` is unchanged.

    The new output layer is ``Q @ theta``, the minimum-norm solution of
    ``Q^T w = theta``.
    """
    a = two_layer.a_matrix
    q, r = _signed_qr(a)
    diag = np.abs(np.diag(r))
    if diag.size and diag.min() <= rtol * max(diag.max(), 1.0):
        raise RankDeficientError("first layer is rank deficient")
    theta = a.T @ two_layer.w
    return TwoLayerParams(q, q @ theta)


def split(theta, spec) -> tuple[np.ndarray, np.ndarray]:
    t = as_theta(theta)
    if t.shape[0] != spec.D:
        raise ValueError(f"theta has length {t.shape[0]}, spec expects {spec.D}")
    return t[: spec.d].copy(), t[spec.d :].copy()


def join(theta_on, theta_off) -> np.ndarray:
    return np.concatenate([np.atleast_1d(theta_on), np.atleast_1d(theta_off)]).astype(float)


def project_to_ball(params, radius: float = DEFAULT_RADIUS):
    """Rescale onto ``||theta|| <= radius``; two-layer models rescale ``w`` only."""
    if radius <= 0:
        raise ValueError("radius must be positive")
    theta = as_theta(params)
    norm = float(np.linalg.norm(theta))
    if norm <= radius:
        return params
    scale = radius / norm
    if isinstance(params, TwoLayerParams):
        return TwoLayerParams(params.a_matrix, params.w * scale)
    if isinstance(params, LinearParams):
        return LinearParams(theta * scale)
    if isinstance(params, IdentifiableParams):
        return IdentifiableParams(theta * scale)
    return theta * scale


# -- serialisation --------------------------------------------------------

def save_params(path, params, spec, header_lines=()) -> None:
    """CSV with a one-line header naming the model kind, d, g and m.

    ``header_lines`` are written as further ``#`` comment lines.
    """
    extra = "".join(f"# {ln}\n" for ln in header_lines)
    with open(path, "w") as fh:
        if isinstance(params, TwoLayerParams):
            fh.write(f"# kind=two_layer d={spec.d} g={spec.g} m={params.m}\n{extra}")
            fh.write("row," + ",".join(f"a_{j + 1}" for j in range(params.D)) + ",w\n")
            for i in range(params.m):
                vals = ",".join(repr(float(v)) for v in params.a_matrix[i])
                fh.write(f"{i},{vals},{float(params.w[i])!r}\n")
        else:
            theta = as_theta(params)
            fh.write(f"# kind=linear d={spec.d} g={spec.g} m=0\n{extra}")
            fh.write("index,theta\n")
            for i, v in enumerate(theta):
                fh.write(f"{i},{float(v)!r}\n")


def load_params(path):
    with open(path) as fh:
        header = fh.readline().lstrip("#").split()
        meta = dict(item.split("=") for item in header)
        body = [line for line in fh if line.strip() and not line.startswith("#")]
    rows = [[float(v) for v in line.split(",")] for line in body[1:]]
    arr = np.asarray(rows).reshape(len(rows), -1)
    if meta["kind"] == "two_layer":
        return TwoLayerParams(arr[:, 1:-1], arr[:, -1])
    return LinearParams(arr[:, 1])
