"""Training procedures on the population proxy.

* ``gd`` -- full-batch gradient descent with a uniform or per-block step.
* ``agd`` -- alternating w-step / A-step descent for the two-layer network,
  with the first layer re-orthonormalised at the start of every round.
* ``newton`` -- damped Newton, solved by Cholesky.
* ``precond-diag`` / ``precond-kfac`` -- preconditioned descent.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.linalg
from scipy.optimize import brentq

from .distribution import ManifoldSpec, make_rng
from .models import (
    DEFAULT_RADIUS,
    TwoLayerParams,
    as_theta,
    collapse,
    orthogonalize,
    project_to_ball,
)
from .objective import (
    PopulationProxy,
    grad_theta,
    loss,
    loss_grad_hessian,
    sigmoid_var,
)

log = logging.getLogger(__name__)

METHODS = ("gd", "agd", "newton", "precond-diag", "precond-kfac")


class DivergenceError(FloatingPointError):
    """A gradient or iterate became non-finite."""


class ConvergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class StepPolicy:
    kind: str = "fixed-uniform"
    alpha: float = 1.5
    alpha_on: float = 1.5
    alpha_off: float = 1.5

    def __post_init__(self):
        if self.kind not in ("fixed-uniform", "per-direction"):
            raise ValueError(f"unknown step kind {self.kind!r}")
        if min(self.alpha, self.alpha_on, self.alpha_off) <= 0:
            raise ValueError("step sizes must be positive")

    @classmethod
    def uniform(cls, spec: ManifoldSpec, safety: float = 0.5) -> "StepPolicy":
        a = safety / spec.sigma_on**2
        return cls("fixed-uniform", a, a, a)

    @classmethod
    def per_direction(cls, spec: ManifoldSpec, safety: float = 0.5) -> "StepPolicy":
        a_on = safety / spec.sigma_on**2
        a_off = safety / spec.sigma_off**2
        return cls("per-direction", a_on, a_on, a_off)

    def is_valid(self, spec: ManifoldSpec) -> bool:
        if self.kind == "fixed-uniform":
            return self.alpha <= 1.0 / spec.sigma_on**2
        return self.alpha_on <= 1.0 / spec.sigma_on**2 and self.alpha_off <= 1.0 / spec.sigma_off**2

    def step_vector(self, spec: ManifoldSpec) -> np.ndarray:
        if self.kind == "fixed-uniform":
            return np.full(spec.D, self.alpha)
        return np.concatenate([np.full(spec.d, self.alpha_on), np.full(spec.g, self.alpha_off)])


def _finite(v: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(v)):
        raise DivergenceError(f"non-finite {what}")
    return v


# -- single steps ---------------------------------------------------------

def gd_step(theta, proxy: PopulationProxy, policy: StepPolicy, radius: float = DEFAULT_RADIUS) -> np.ndarray:
    t = as_theta(theta)
    g = _finite(grad_theta(t, proxy), "gradient")
    return project_to_ball(t - policy.step_vector(proxy.spec) * g, radius)


def grad_w(params: TwoLayerParams, proxy: PopulationProxy) -> np.ndarray:
    """``dL/dw = A grad_theta`` at ``theta = A^T w``."""
    return params.a_matrix @ grad_theta(collapse(params), proxy)


def grad_a(params: TwoLayerParams, proxy: PopulationProxy) -> np.ndarray:
    """``dL/dA = w grad_theta^T`` at ``theta = A^T w``."""
    return np.outer(params.w, grad_theta(collapse(params), proxy))


@dataclass(frozen=True)
class AGDRound:
    params: TwoLayerParams
    # first layer after orthogonalisation and w before/after the w-step
    a_used: np.ndarray
    w_before: np.ndarray
    w_after: np.ndarray
    theta_even: np.ndarray
    theta_odd: np.ndarray


def agd_round(two_layer: TwoLayerParams, proxy: PopulationProxy, alpha_w: float, alpha_a: float,
              radius: float = DEFAULT_RADIUS) -> AGDRound:
    """One round: orthogonalise, then a w-step, then an A-step at the updated w."""
    p = orthogonalize(two_layer)
    a, w = p.a_matrix, p.w
    theta_even = a.T @ w
    gw = _finite(a @ grad_theta(theta_even, proxy), "w-gradient")
    w_new = w - alpha_w * gw
    theta_odd = a.T @ w_new
    g = _finite(grad_theta(theta_odd, proxy), "A-gradient")
    a_new = a - alpha_a * np.outer(w_new, g)
    nxt = project_to_ball(TwoLayerParams(a_new, w_new), radius)
    return AGDRound(nxt, a, w, w_new, theta_even, theta_odd)


def _spd_solve(h: np.ndarray, g: np.ndarray, damping: float, retries: int = 3) -> tuple[np.ndarray, float]:
    lam = damping
    for attempt in range(retries + 1):
        try:
            c = scipy.linalg.cho_factor(h + lam * np.eye(h.shape[0]), lower=True, check_finite=True)
            return scipy.linalg.cho_solve(c, g), lam
        except (np.linalg.LinAlgError, scipy.linalg.LinAlgError, ValueError):
            if attempt == retries:
                break
            lam = max(lam, 1e-12) * 10.0
            log.warning("Cholesky failed, retrying with damping %.3g", lam)
    raise np.linalg.LinAlgError("damped Hessian is not positive definite")


def newton_step(theta, proxy: PopulationProxy, damping: float = 1e-8,
                radius: float = DEFAULT_RADIUS) -> np.ndarray:
    """``theta - (H + damping I)^{-1} g``, kept inside the ball.

    When the full step leaves the ball the quadratic model is minimised on
    the ball instead of projecting the step radially; a radial projection of
    a Newton step does not converge to the constrained optimum.
    """
    t = as_theta(theta)
    _, g, h = loss_grad_hessian(t, proxy)
    _finite(g, "gradient")
    return _ball_newton_step(t, g, h, radius, damping)


def diag_preconditioner(spec: ManifoldSpec, scale: float = 0.5) -> np.ndarray:
    """``scale * diag(sigma_on^-2 ..., sigma_off^-2 ...)``."""
    return scale * np.concatenate([np.full(spec.d, spec.sigma_on**-2), np.full(spec.g, spec.sigma_off**-2)])


def scaled_ball_projection(u: np.ndarray, p: np.ndarray, radius: float) -> np.ndarray:
    """Project ``u`` onto the ball in the metric ``diag(p)^-1``.

    The minimiser is ``u / (1 + mu p)`` with ``mu >= 0`` chosen so the result
    has norm ``radius``.  With a non-scalar ``p`` a Euclidean projection would
    leave fixed points that are not KKT points of the constrained problem.
    """
    if np.linalg.norm(u) <= radius:
        return u

    def excess(mu):
        return np.linalg.norm(u / (1.0 + mu * p)) - radius

    hi = 1.0 / p.min()
    while excess(hi) > 0:
        hi *= 10.0
    mu = brentq(excess, 0.0, hi, xtol=1e-300, rtol=4 * np.finfo(float).eps, maxiter=500)
    v = u / (1.0 + mu * p)
    return v * (radius / np.linalg.norm(v))


def kfac_factors(params: TwoLayerParams, proxy: PopulationProxy, damping: float = 1e-3):
    """Damped Kronecker factors for both layers of the two-layer network.

    Layer 1 (``h = A x``): input factor ``E[x x^T]`` and output factor
    ``E[delta delta^T]`` with ``delta = dl/dh = w * dl/dz``.  Layer 2
    (``z = w^T h``): input factor ``E[h h^T]`` and scalar output factor
    ``E[(dl/dz)^2]``.  Expectations use the model's own predictive
    distribution (Fisher), for which ``E[(dl/dz)^2 | x] = sigmoid(z) sigmoid(-z)``.
    """
    x = proxy.x
    n = proxy.n
    a, w = params.a_matrix, params.w
    h = x @ a.T
    z = h @ w
    fisher = sigmoid_var(z)
    a1 = x.T @ x / n
    s_mean = float(fisher.mean())
    g1 = s_mean * np.outer(w, w)
    a2 = h.T @ h / n
    g2 = s_mean
    # pi-damping splits the damping between the two factors of each layer
    def damp(left, right):
        tl = np.trace(left) / left.shape[0] if np.ndim(left) else float(left)
        tr = np.trace(right) / right.shape[0] if np.ndim(right) else float(right)
        pi = math.sqrt(max(tl, 1e-30) / max(tr, 1e-30))
        r = math.sqrt(damping)
        left = left + pi * r * np.eye(left.shape[0]) if np.ndim(left) else left + pi * r
        right = right + (r / pi) * np.eye(right.shape[0]) if np.ndim(right) else right + r / pi
        return left, right
    return damp(a1, g1), damp(a2, g2)


def kfac_direction(params: TwoLayerParams, proxy: PopulationProxy, damping: float = 1e-3):
    """Preconditioned layer updates and the induced first-order change in theta."""
    if not isinstance(params, TwoLayerParams):
        raise TypeError("KFAC preconditioning needs a two-layer model")
    (a1, g1), (a2, g2) = kfac_factors(params, proxy, damping)
    g_theta = grad_theta(collapse(params), proxy)
    ga = np.outer(params.w, g_theta)  # (m, D)
    gw = params.a_matrix @ g_theta  # (m,)
    try:
        # (A1 kron G1)^{-1} vec(GA) == G1^{-1} GA A1^{-1}
        da = scipy.linalg.solve(g1, scipy.linalg.solve(a1, ga.T, assume_a="pos").T, assume_a="pos")
        dw = scipy.linalg.solve(a2, gw, assume_a="pos") / g2
    except (np.linalg.LinAlgError, scipy.linalg.LinAlgError) as exc:
        raise np.linalg.LinAlgError("KFAC factor estimation failed") from exc
    dtheta = params.a_matrix.T @ dw + da.T @ params.w
    return da, dw, dtheta


def precond_step(params, proxy: PopulationProxy, preconditioner: str = "diag", scale: float = 0.5,
                 damping: float = 1e-3, radius: float = DEFAULT_RADIUS):
    """One preconditioned descent step.

    ``diag`` acts on the identifiable coefficients; ``kfac`` acts on the two
    layers of a :class:`TwoLayerParams` and returns a new two-layer record.
    """
    if preconditioner == "diag":
        t = as_theta(params)
        g = _finite(grad_theta(t, proxy), "gradient")
        p = diag_preconditioner(proxy.spec, scale)
        return scaled_ball_projection(t - p * g, p, radius)
    if preconditioner == "kfac":
        da, dw, _ = kfac_direction(params, proxy, damping)
        new = TwoLayerParams(params.a_matrix - scale * da, params.w - scale * dw)
        return project_to_ball(new, radius)
    raise ValueError(f"unknown preconditioner {preconditioner!r}")


# -- reference optimum ----------------------------------------------------

def kkt_residual(theta: np.ndarray, grad: np.ndarray, radius: float) -> float:
    """Norm of the projected-gradient map ``theta - P_ball(theta - grad)``; zero iff KKT."""
    return float(np.linalg.norm(theta - project_to_ball(theta - grad, radius)))


def _ball_newton_step(theta, g, h, radius, damping):
    """Minimise the local quadratic model inside the ball (one SQP step)."""
    step, _ = _spd_solve(h, g, damping)
    cand = theta - step
    if np.linalg.norm(cand) <= radius:
        return cand
    eye = np.eye(theta.shape[0])

    def excess(mu):
        s = np.linalg.solve(h + (damping + mu) * eye, -(g + mu * theta))
        return np.linalg.norm(theta + s) - radius

    hi = 1.0
    while excess(hi) > 0:
        hi *= 10.0
        if hi > 1e30:
            break
    mu = brentq(excess, 0.0, hi, xtol=1e-300, rtol=4 * np.finfo(float).eps, maxiter=500)
    s = np.linalg.solve(h + (damping + mu) * eye, -(g + mu * theta))
    out = theta + s
    return out * (radius / np.linalg.norm(out))


def estimate_optimum(spec: ManifoldSpec, proxy: PopulationProxy, radius: float = DEFAULT_RADIUS,
                     tol: float = 1e-10, damping: float = 1e-12, max_iter: int = 10_000,
                     theta0=None) -> np.ndarray:
    """Minimiser of the proxy loss on ``||theta|| <= radius`` by damped Newton.

    Stops when ``||grad|| <= tol`` in the interior, or when the KKT residual
    is below ``tol`` with the constraint active.
    """
    theta = np.zeros(spec.D) if theta0 is None else as_theta(theta0).copy()
    for it in range(max_iter):
        f, g, h = loss_grad_hessian(theta, proxy)
        _finite(g, "gradient")
        interior = np.linalg.norm(theta) < radius * (1 - 1e-12)
        if (interior and np.linalg.norm(g) <= tol) or kkt_residual(theta, g, radius) <= tol:
            return theta
        new = _ball_newton_step(theta, g, h, radius, damping)
        # guard against a non-descent step from an ill-conditioned Hessian
        if loss(new, proxy) > f + 1e-15:
            d = new - theta
            t = 1.0
            while t > 1e-8 and loss(theta + t * d, proxy) > f:
                t *= 0.5
            new = project_to_ball(theta + t * d, radius)
        if np.array_equal(new, theta):
            return theta
        theta = new
    raise ConvergenceError(f"no convergence in {max_iter} iterations")


# -- training loop --------------------------------------------------------

@dataclass(frozen=True)
class OptimizerConfig:
    method: str = "gd"
    policy: StepPolicy = field(default_factory=StepPolicy)
    damping: float = 1e-8
    max_iter: int = 1000
    grad_tol: float = 1e-8
    radius: float = DEFAULT_RADIUS
    init: str = "zero"
    init_seed: int = 0
    width: int | None = None
    precond_scale: float = 0.5
    kfac_damping: float = 1e-3

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if self.damping < 0:
            raise ValueError("damping must be >= 0")
        if self.max_iter < 0:
            raise ValueError("max_iter must be >= 0")

    @classmethod
    def for_spec(cls, spec: ManifoldSpec, method: str = "gd", **kw) -> "OptimizerConfig":
        policy = kw.pop("policy", None)
        if policy is None:
            policy = StepPolicy.per_direction(spec) if method == "precond-diag" else StepPolicy.uniform(spec)
        return cls(method=method, policy=policy, **kw)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "OptimizerConfig":
        data = dict(data)
        if isinstance(data.get("policy"), dict):
            data["policy"] = StepPolicy(**data["policy"])
        return cls(**data)


@dataclass
class Trajectory:
    """Per-iteration records; columns are parallel lists."""

    d: int
    config: dict = field(default_factory=dict)
    t: list = field(default_factory=list)
    theta: list = field(default_factory=list)
    loss: list = field(default_factory=list)
    grad_norm_on: list = field(default_factory=list)
    grad_norm_off: list = field(default_factory=list)
    dist_on: list = field(default_factory=list)
    dist_off: list = field(default_factory=list)
    robust: dict = field(default_factory=dict)
    params: list = field(default_factory=list)
    stop_reason: str = ""

    def record(self, t: int, theta: np.ndarray, f: float, g: np.ndarray, theta_star=None, params=None):
        d = self.d
        self.t.append(int(t))
        self.theta.append(np.array(theta, dtype=float))
        self.loss.append(float(f))
        self.grad_norm_on.append(float(np.linalg.norm(g[:d])))
        self.grad_norm_off.append(float(np.linalg.norm(g[d:])))
        if theta_star is not None:
            self.dist_on.append(float(np.linalg.norm(theta[:d] - theta_star[:d])))
            self.dist_off.append(float(np.linalg.norm(theta[d:] - theta_star[d:])))
        if params is not None:
            self.params.append(params)

    @property
    def final_theta(self) -> np.ndarray:
        return self.theta[-1]

    def grad_norm(self) -> np.ndarray:
        return np.hypot(self.grad_norm_on, self.grad_norm_off)

    def to_csv(self, path, header: str | None = None) -> None:
        eps_cols = sorted(self.robust)
        with open(path, "w") as fh:
            if header:
                fh.write(f"# {header}\n")
            fh.write("# config: " + json.dumps(self.config, sort_keys=True, default=str) + "\n")
            fh.write(f"# stop_reason: {self.stop_reason}\n")
            cols = ["t", "loss", "grad_norm_on", "grad_norm_off", "dist_on", "dist_off"]
            cols += [f"robust_acc_eps_{e!r}" for e in eps_cols]
            fh.write(",".join(cols) + "\n")
            for i, t in enumerate(self.t):
                row = [str(t), repr(self.loss[i]), repr(self.grad_norm_on[i]), repr(self.grad_norm_off[i])]
                row.append(repr(self.dist_on[i]) if self.dist_on else "")
                row.append(repr(self.dist_off[i]) if self.dist_off else "")
                row += [repr(self.robust[e][i]) for e in eps_cols]
                fh.write(",".join(row) + "\n")


def initial_params(cfg: OptimizerConfig, spec: ManifoldSpec):
    if cfg.method in ("agd", "precond-kfac"):
        return TwoLayerParams.init(spec.D, cfg.width, seed=cfg.init_seed)
    if cfg.init == "zero":
        return np.zeros(spec.D)
    if cfg.init == "random":
        return make_rng(cfg.init_seed).standard_normal(spec.D)
    raise ValueError(f"unknown init scheme {cfg.init!r}")


def train(spec: ManifoldSpec, proxy: PopulationProxy, cfg: OptimizerConfig, theta_star=None,
          record=None, params0=None, keep_params: bool = False, callback=None) -> Trajectory:
    """Run ``cfg.method`` from its initialisation.

    ``record`` decides which iterations are stored (default: every one); the
    final iterate is always stored.  For ``agd`` one iteration is one round.
    ``callback(t, params, traj)`` runs after each recorded iterate.
    """
    traj = Trajectory(spec.d, config={"spec": spec.to_dict(), "optimizer": cfg.to_dict()})
    params = initial_params(cfg, spec) if params0 is None else params0
    star = None if theta_star is None else as_theta(theta_star)
    keep = record if record is not None else (lambda t: True)
    pol = cfg.policy

    def store(t, params, f, g):
        traj.record(t, as_theta(params).copy(), f, g, star, params if keep_params else None)
        if callback is not None:
            callback(t, params, traj)

    t = 0
    while True:
        theta = as_theta(params)
        g = _finite(grad_theta(theta, proxy), "gradient")
        # with the ball active the projected-gradient residual replaces ||grad||
        gnorm = kkt_residual(theta, g, cfg.radius)
        done = gnorm <= cfg.grad_tol or t >= cfg.max_iter
        if done or keep(t):
            store(t, params, loss(theta, proxy), g)
        if done:
            traj.stop_reason = "grad_tol" if gnorm <= cfg.grad_tol else "max_iter"
            return traj
        if cfg.method == "gd":
            params = project_to_ball(theta - pol.step_vector(spec) * g, cfg.radius)
        elif cfg.method == "precond-diag":
            p = diag_preconditioner(spec, cfg.precond_scale)
            params = scaled_ball_projection(theta - p * g, p, cfg.radius)
        elif cfg.method == "newton":
            params = newton_step(theta, proxy, cfg.damping, cfg.radius)
        elif cfg.method == "agd":
            params = agd_round(params, proxy, pol.alpha, pol.alpha, cfg.radius).params
        elif cfg.method == "precond-kfac":
            params = precond_step(params, proxy, "kfac", cfg.precond_scale, cfg.kfac_damping, cfg.radius)
        t += 1


def iterations_to(traj: Trajectory, values, threshold: float) -> int | None:
    """First recorded ``t`` with ``values[t] <= threshold`` (None if never)."""
    for t, v in zip(traj.t, values):
        if v <= threshold:
            return t
    return None


def powers_of_two(max_iter: int):
    """Recording schedule: 0 and every power of two up to ``max_iter``."""
    keep = {0} | {2**i for i in range(int(math.log2(max(max_iter, 1))) + 1)}
    return lambda t: t in keep
