"""Experiment drivers: rate sweeps, the loss-threshold run, robustness curves.

Every table is written as CSV with a ``# config-hash:`` line so results can be
traced back to the exact configuration that produced them.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from .attacks import AttackConfig, robust_accuracy
from .distribution import ManifoldSpec, ovl, sample
from .models import DEFAULT_RADIUS, as_theta, score
from .objective import PopulationProxy, loss_grad_hessian
from .optimizers import (
    OptimizerConfig,
    _ball_newton_step,
    estimate_optimum,
    iterations_to,
    kkt_residual,
    powers_of_two,
    train,
)

log = logging.getLogger(__name__)

SWEEP_VARIABLES = ("sigma_off", "k", "epsilon")
MONOTONE_TOL = 1e-9
# relative: delta * ||theta*||; block: delta * ||theta*_block|| per block; absolute: delta
DELTA_MODES = ("relative", "block", "absolute")


class CensoredWarning(UserWarning):
    """A sweep point never reached its tolerance and was left out of a fit."""


# -- provenance -----------------------------------------------------------

def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_table(path, columns, rows, config: dict) -> None:
    """CSV preceded by ``# config-hash:`` and ``# config:`` comment lines."""
    with open(path, "w", newline="") as fh:
        fh.write(f"# config-hash: {config_hash(config)}\n")
        fh.write("# config: " + json.dumps(config, sort_keys=True, default=str) + "\n")
        w = csv.writer(fh)
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in columns])


def read_table(path) -> tuple[dict, list[dict]]:
    """Inverse of :func:`write_table`; values are left as strings."""
    meta = {}
    with open(path, newline="") as fh:
        lines = fh.readlines()
    body = []
    for ln in lines:
        if ln.startswith("# "):
            key, _, val = ln[2:].partition(":")
            meta[key.strip()] = val.strip()
        else:
            body.append(ln)
    return meta, list(csv.DictReader(body))


# -- configuration --------------------------------------------------------

@dataclass(frozen=True)
class SweepConfig:
    """One experiment: a base geometry, a swept variable and how to train.

    ``radius_scale`` sets the compact set to ``radius_scale / sigma_off`` so
    it stays the same size in data-normalised coordinates across a sigma
    sweep; ``None`` keeps the optimizer radius.  ``scale_off_means`` moves the
    off-manifold means with ``sigma_off`` for the same reason.
    """

    base: ManifoldSpec
    variable: str = "sigma_off"
    values: tuple = ()
    methods: tuple = ("gd",)
    delta: float = 0.05
    delta_mode: str = "block"
    repetitions: int = 1
    seeds: tuple = (0,)
    proxy_size: int = 20_000
    radius_scale: float | None = 1.0
    scale_off_means: bool = True
    max_iter: int = 200_000
    loss_band: float = 0.05
    test_size: int = 10_000
    test_seed: int = 10_007
    attack_steps: int = 20
    attack_restarts: int = 2
    newton_damping: float = 1e-8
    checkpoints: tuple = ()

    def __post_init__(self):
        if self.variable not in SWEEP_VARIABLES:
            raise ValueError(f"unknown sweep variable {self.variable!r}")
        vals = tuple(float(v) for v in self.values)
        if list(vals) != sorted(vals):
            raise ValueError("sweep values must be sorted")
        if self.variable == "sigma_off" and any(v <= 0 for v in vals):
            raise ValueError("sigma_off values must be positive")
        if any(v < 0 for v in vals):
            raise ValueError("sweep values must be non-negative")
        if not self.delta > 0:
            raise ValueError("delta must be positive")
        if self.delta_mode not in DELTA_MODES:
            raise ValueError(f"delta_mode must be one of {DELTA_MODES}")
        if self.repetitions < 1 or len(self.seeds) < self.repetitions:
            raise ValueError("need one seed per repetition")
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "methods", tuple(self.methods))
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        object.__setattr__(self, "checkpoints", tuple(int(t) for t in self.checkpoints))

    @classmethod
    def rate_sweep(cls, ratios=(2, 4, 8, 16), base: ManifoldSpec | None = None, **kw) -> "SweepConfig":
        """sigma_off sweep at ``sigma_on / ratio`` for each ratio."""
        base = ManifoldSpec.default() if base is None else base
        values = sorted(base.sigma_on / r for r in ratios)
        return cls(base=base, variable="sigma_off", values=tuple(values), **kw)

    def spec_at(self, value: float | None = None) -> ManifoldSpec:
        if value is None or self.variable == "epsilon":
            return self.base
        if self.variable == "k":
            return self.base.with_(k=value)
        changes = {"sigma_off": value}
        if self.scale_off_means:
            c = value / self.base.sigma_off
            changes["mu_off_pos"] = [c * m for m in self.base.mu_off_pos]
            changes["mu_off_neg"] = [c * m for m in self.base.mu_off_neg]
        return self.base.with_(**changes)

    def radius_for(self, spec: ManifoldSpec) -> float:
        return DEFAULT_RADIUS if self.radius_scale is None else self.radius_scale / spec.sigma_off

    def optimizer(self, spec: ManifoldSpec, method: str, max_iter: int | None = None,
                  grad_tol: float = 1e-8) -> OptimizerConfig:
        return OptimizerConfig.for_spec(
            spec, method, radius=self.radius_for(spec), damping=self.newton_damping,
            max_iter=self.max_iter if max_iter is None else max_iter, grad_tol=grad_tol)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["base"] = self.base.to_dict()
        d["values"] = list(self.values)
        d["methods"] = list(self.methods)
        d["seeds"] = list(self.seeds)
        d["checkpoints"] = list(self.checkpoints)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "SweepConfig":
        data = dict(data)
        base = data.pop("base", None)
        if base is None:
            base = ManifoldSpec.default()
        elif not isinstance(base, ManifoldSpec):
            base = ManifoldSpec.from_dict(base) if "sigma_off" in base else ManifoldSpec.default(**base)
        ratios = data.pop("ratios", None)
        if ratios is not None:
            return cls.rate_sweep(ratios, base, **{k: _tuple(v) for k, v in data.items()})
        return cls(base=base, **{k: _tuple(v) for k, v in data.items()})


def _tuple(v):
    return tuple(v) if isinstance(v, list) else v


# -- rate fits ------------------------------------------------------------

@dataclass(frozen=True)
class RateFit:
    slope: float
    intercept: float
    r_squared: float
    points: tuple

    def __post_init__(self):
        if len(self.points) < 3:
            raise ValueError("a rate fit needs at least 3 points")


def fit_rate(points) -> RateFit:
    """Least squares of ``log T`` on ``log x``."""
    pts = [(float(x), float(t)) for x, t in points]
    if len(pts) < 3:
        raise ValueError("fit_rate needs at least 3 points")
    if any(x <= 0 or t <= 0 for x, t in pts):
        raise ValueError("fit_rate needs positive values")
    lx = np.log([p[0] for p in pts])
    lt = np.log([p[1] for p in pts])
    if np.ptp(lt) == 0:
        # scipy reports r = 0 here already; skip the degenerate-variance warning path
        return RateFit(0.0, float(lt[0]), 0.0, tuple(zip(lx.tolist(), lt.tolist())))
    res = stats.linregress(lx, lt)
    r2 = float(min(max(res.rvalue**2, 0.0), 1.0))
    return RateFit(float(res.slope), float(res.intercept), r2, tuple(zip(lx.tolist(), lt.tolist())))


# -- parallel map with deterministic merge --------------------------------

def _pmap(fn, tasks, threads: int = 1):
    if threads <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(fn, tasks))


# -- trajectory invariants ------------------------------------------------

def monotone_violations(traj, tol: float = MONOTONE_TOL) -> dict:
    """Count loss increases and off-manifold distance increases after t = 1."""
    loss = np.asarray(traj.loss)
    out = {"loss": int(np.sum(np.diff(loss) > tol))}
    if traj.dist_off:
        dist = np.asarray(traj.dist_off)
        out["dist_off"] = int(np.sum(np.diff(dist[1:]) > tol)) if dist.size > 2 else 0
    return out


# -- convergence sweep ----------------------------------------------------

@dataclass(frozen=True)
class SweepRow:
    value: float
    sigma_ratio: float
    repetition: int
    radius: float
    theta_star: tuple
    delta_on: float
    delta_off: float
    t_on: int | None
    t_off: int | None
    iterations: int
    loss_increases: int
    dist_off_increases: int

    @property
    def censored(self) -> bool:
        return self.t_on is None or self.t_off is None


def _sweep_point(job) -> SweepRow:
    cfg, value, rep = job
    spec = cfg.spec_at(value)
    proxy = PopulationProxy.build(spec, cfg.proxy_size, seed=cfg.seeds[rep])
    radius = cfg.radius_for(spec)
    star = estimate_optimum(spec, proxy, radius=radius)
    d = spec.d
    if cfg.delta_mode == "relative":
        delta_on = delta_off = cfg.delta * float(np.linalg.norm(star))
    elif cfg.delta_mode == "block":
        delta_on = cfg.delta * float(np.linalg.norm(star[:d]))
        delta_off = cfg.delta * float(np.linalg.norm(star[d:]))
    else:
        delta_on = delta_off = cfg.delta
    opt = cfg.optimizer(spec, cfg.methods[0])
    state = {"t_on": None, "t_off": None}

    class _Done(Exception):
        pass

    holder = {}

    # stop once both blocks are within delta; the KKT stop alone could end
    # the run before the slower block arrives
    def cb(t, params, traj):
        holder["traj"] = traj
        th = traj.theta[-1]
        if state["t_on"] is None and np.linalg.norm(th[:d] - star[:d]) <= delta_on:
            state["t_on"] = t
        if state["t_off"] is None and np.linalg.norm(th[d:] - star[d:]) <= delta_off:
            state["t_off"] = t
        if state["t_on"] is not None and state["t_off"] is not None:
            raise _Done

    try:
        traj = train(spec, proxy, opt, theta_star=star, callback=cb)
    except _Done:
        traj = holder["traj"]
    viol = monotone_violations(traj)
    return SweepRow(value, spec.sigma_on / spec.sigma_off, rep, radius, tuple(star.tolist()),
                    delta_on, delta_off,
                    state["t_on"], state["t_off"], traj.t[-1], viol["loss"], viol.get("dist_off", 0))


@dataclass
class SweepResult:
    config: SweepConfig
    rows: list = field(default_factory=list)

    @property
    def censored(self) -> bool:
        return any(r.censored for r in self.rows)

    def fit_off(self) -> RateFit:
        return self._fit("t_off")

    def fit_on(self) -> RateFit:
        return self._fit("t_on")

    def _fit(self, attr: str) -> RateFit:
        pts = []
        for r in self.rows:
            t = getattr(r, attr)
            if t is None:
                warnings.warn(f"censored point at value {r.value} excluded from fit", CensoredWarning)
                continue
            # T = 0 would break the log; a run that starts inside the tolerance counts as one step
            pts.append((r.sigma_ratio, max(t, 1)))
        return fit_rate(pts)

    COLUMNS = ("value", "sigma_ratio", "repetition", "radius", "theta_star_on", "theta_star_off",
               "delta_on", "delta_off", "t_on", "t_off", "censored", "iterations", "loss_increases", "dist_off_increases")

    def table(self) -> list[dict]:
        d = self.config.base.d
        out = []
        for r in self.rows:
            row = asdict(r)
            row["theta_star_on"] = float(np.linalg.norm(r.theta_star[:d]))
            row["theta_star_off"] = float(np.linalg.norm(r.theta_star[d:]))
            row["censored"] = r.censored
            out.append(row)
        return out

    def to_csv(self, path) -> None:
        write_table(path, self.COLUMNS, self.table(), self.config.to_dict())


def run_convergence_sweep(cfg: SweepConfig, threads: int = 1) -> SweepResult:
    """GD from zero at every sweep value; first iteration within ``delta`` per block."""
    if cfg.variable != "sigma_off":
        raise ValueError("the convergence sweep varies sigma_off")
    jobs = [(cfg, v, rep) for v in cfg.values for rep in range(cfg.repetitions)]
    rows = _pmap(_sweep_point, jobs, threads)
    rows.sort(key=lambda r: (r.value, r.repetition))
    for r in rows:
        if r.censored:
            warnings.warn(f"sweep value {r.value} did not reach delta in {r.iterations} iterations",
                          CensoredWarning)
    return SweepResult(cfg, rows)


# -- loss threshold -------------------------------------------------------

@dataclass(frozen=True)
class ThresholdReport:
    k: float
    nu: float
    floor: float
    restricted_min: float
    restricted_theta_on: tuple
    t_above: int | None
    t_below: int | None
    final_loss: float
    iterations: int

    @property
    def ratio(self) -> float | None:
        if self.t_above is None or not self.t_below:
            return None
        return self.t_above / self.t_below

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ratio"] = self.ratio
        return d


def restricted_minimum(spec: ManifoldSpec, proxy: PopulationProxy, radius: float = DEFAULT_RADIUS,
                       tol: float = 1e-12, max_iter: int = 500) -> tuple[float, np.ndarray]:
    """Minimise the loss over the on-manifold block with the off block held at zero."""
    d = spec.d
    theta = np.zeros(spec.D)
    f = float("nan")
    for _ in range(max_iter):
        f, g, h = loss_grad_hessian(theta, proxy)
        if kkt_residual(theta[:d], g[:d], radius) <= tol:
            break
        theta[:d] = _ball_newton_step(theta[:d], g[:d], h[:d, :d], radius, 1e-14)
    f, _, _ = loss_grad_hessian(theta, proxy)
    return f, theta[:d].copy()


def run_loss_threshold(cfg: SweepConfig, value: float | None = None, max_iter: int | None = None) -> ThresholdReport:
    """Restricted minimum vs ``nu ln 2`` and full-GD iterations to either side of it."""
    spec = cfg.spec_at(value)
    proxy = PopulationProxy.build(spec, cfg.proxy_size, seed=cfg.seeds[0])
    radius = cfg.radius_for(spec)
    nu = ovl(spec)
    floor = nu * math.log(2.0)
    rmin, rtheta = restricted_minimum(spec, proxy, radius)
    lo_target = floor - cfg.loss_band
    budget = cfg.max_iter if max_iter is None else max_iter
    opt = cfg.optimizer(spec, cfg.methods[0], max_iter=budget, grad_tol=0.0)

    class _Done(Exception):
        pass

    holder = {}

    def cb(t, params, traj):
        holder["traj"] = traj
        if lo_target > 0 and traj.loss[-1] <= lo_target:
            raise _Done

    try:
        traj = train(spec, proxy, opt, callback=cb)
    except _Done:
        traj = holder["traj"]
    t_above = iterations_to(traj, traj.loss, floor + cfg.loss_band)
    t_below = iterations_to(traj, traj.loss, lo_target) if lo_target > 0 else None
    return ThresholdReport(spec.k, nu, floor, rmin, tuple(rtheta.tolist()), t_above, t_below,
                           traj.loss[-1], traj.t[-1])


# -- robustness over training ---------------------------------------------

ROBUST_COLUMNS = ("method", "t", "epsilon", "robust_accuracy", "clean_accuracy", "mean_l1_margin", "loss")


def _robust_rows(job):
    cfg, method, max_iter = job
    spec = cfg.base
    proxy = PopulationProxy.build(spec, cfg.proxy_size, seed=cfg.seeds[0])
    test = sample(spec, cfg.test_size, cfg.test_seed)
    opt = cfg.optimizer(spec, method, max_iter=max_iter, grad_tol=0.0)
    eps_grid = cfg.values if cfg.variable == "epsilon" else (0.0,)
    rows = []

    def cb(t, params, traj):
        for eps in eps_grid:
            acfg = AttackConfig(eps, n_steps=cfg.attack_steps, n_restarts=cfg.attack_restarts,
                                seed=cfg.seeds[0])
            rep = robust_accuracy(params, test, acfg)
            rows.append({"method": method, "t": t, "epsilon": eps,
                         "robust_accuracy": rep.robust_accuracy, "clean_accuracy": rep.clean_accuracy,
                         "mean_l1_margin": rep.mean_l1_margin, "loss": traj.loss[-1]})

    pow2 = powers_of_two(max_iter)
    extra = set(cfg.checkpoints)
    train(spec, proxy, opt, record=lambda t: pow2(t) or t in extra, callback=cb)
    return rows


@dataclass
class RobustnessCurve:
    config: SweepConfig
    max_iter: dict
    rows: list

    def series(self, method: str, epsilon: float, column: str = "robust_accuracy"):
        pts = [(r["t"], r[column]) for r in self.rows if r["method"] == method and r["epsilon"] == epsilon]
        t, v = zip(*sorted(pts))
        return np.asarray(t), np.asarray(v)

    def at(self, method: str, epsilon: float, t: int, column: str = "robust_accuracy") -> float:
        ts, vs = self.series(method, epsilon, column)
        idx = np.nonzero(ts == t)[0]
        if not idx.size:
            raise KeyError(f"iteration {t} was not recorded")
        return float(vs[idx[0]])

    def to_csv(self, path) -> None:
        cfg = dict(self.config.to_dict(), max_iter_per_method=self.max_iter)
        write_table(path, ROBUST_COLUMNS, self.rows, cfg)


def run_robustness_curve(cfg: SweepConfig, max_iter: dict | None = None, threads: int = 1) -> RobustnessCurve:
    """Train each method on the base spec; attack a held-out set at powers of two.

    Iterations listed in ``cfg.checkpoints`` are recorded as well.
    """
    if cfg.variable != "epsilon":
        raise ValueError("the robustness curve sweeps epsilon")
    max_iter = {m: cfg.max_iter for m in cfg.methods} if max_iter is None else dict(max_iter)
    jobs = [(cfg, m, max_iter[m]) for m in cfg.methods]
    parts = _pmap(_robust_rows, jobs, threads)
    rows = [r for part in parts for r in part]
    return RobustnessCurve(cfg, max_iter, rows)


# -- decision boundary ----------------------------------------------------

BOUNDARY_COLUMNS = ("x_on", "x_off", "score", "sign")


def boundary_extent(spec: ManifoldSpec, padding: float = 0.2) -> tuple[tuple, tuple]:
    on_lo = min(spec.on_bounds(1)[0], spec.on_bounds(-1)[0])
    on_hi = max(spec.on_bounds(1)[1], spec.on_bounds(-1)[1])
    mus = [spec.mu_off_pos[0], spec.mu_off_neg[0]]
    off_lo = min(mus) - spec.half_width_off
    off_hi = max(mus) + spec.half_width_off
    pad_on = padding * (on_hi - on_lo)
    pad_off = padding * (off_hi - off_lo)
    return (on_lo - pad_on, on_hi + pad_on), (off_lo - pad_off, off_hi + pad_off)


def export_boundary_grid(model, spec: ManifoldSpec, resolution: int = 101, path=None,
                         config: dict | None = None) -> list[dict]:
    """Signed model score on a regular grid over both cubes (20% padding)."""
    if spec.d != 1 or spec.g != 1:
        raise ValueError("boundary grids need d = g = 1")
    if resolution < 2:
        raise ValueError("resolution must be >= 2")
    (a0, a1), (b0, b1) = boundary_extent(spec)
    xs = np.linspace(a0, a1, resolution)
    ys = np.linspace(b0, b1, resolution)
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    pts = np.column_stack([gx.ravel(), gy.ravel()])
    s = np.atleast_1d(score(model, pts))
    rows = [{"x_on": p[0], "x_off": p[1], "score": v, "sign": int(np.sign(v))} for p, v in zip(pts, s)]
    if path is not None:
        cfg = {"spec": spec.to_dict(), "theta": as_theta(model).tolist(), "resolution": resolution}
        cfg.update(config or {})
        write_table(path, BOUNDARY_COLUMNS, rows, cfg)
    return rows


# -- report ---------------------------------------------------------------

def report(paths) -> str:
    """Plain-text summary of any CSVs written by this module."""
    lines = []
    for p in sorted(Path(x) for x in paths):
        meta, rows = read_table(p)
        h = meta.get("config-hash", "?")
        lines.append(f"{p.name}: {len(rows)} rows, config-hash {h[:12]}")
        if rows and "t_off" in rows[0]:
            done = [r for r in rows if r["censored"] == "0"]
            cens = len(rows) - len(done)
            for key in ("t_off", "t_on"):
                pts = [(float(r["sigma_ratio"]), max(int(r[key]), 1)) for r in done]
                if len(pts) >= 3:
                    f = fit_rate(pts)
                    lines.append(f"  {key}: slope {f.slope:.3f}, r^2 {f.r_squared:.3f}")
            for r in rows:
                lines.append(f"  ratio {float(r['sigma_ratio']):g}: t_on={r['t_on'] or 'censored'} "
                             f"t_off={r['t_off'] or 'censored'}")
            if cens:
                lines.append(f"  {cens} censored point(s) excluded")
        elif rows and "restricted_min" in rows[0]:
            for r in rows:
                lines.append(f"  k={float(r['k']):g}: restricted min {float(r['restricted_min']):.4f} "
                             f"(nu ln2 {float(r['floor']):.4f}), t_above={r['t_above'] or 'never'} "
                             f"t_below={r['t_below'] or 'never'}")
        elif rows and "method" in rows[0]:
            last = {}
            for r in rows:
                last[(r["method"], r["epsilon"])] = r
            for (m, e), r in sorted(last.items()):
                lines.append(f"  {m} eps={float(e):g} t={r['t']}: robust {float(r['robust_accuracy']):.4f}"
                             f" clean {float(r['clean_accuracy']):.4f}")
        elif rows and "robust_accuracy" in rows[0]:
            for r in rows:
                lines.append(f"  eps={float(r['epsilon']):g}: robust {float(r['robust_accuracy']):.4f} "
                             f"clean {float(r['clean_accuracy']):.4f}")
        elif rows and "sign" in rows[0]:
            pos = sum(r["sign"] == "1" for r in rows)
            lines.append(f"  positive cells: {pos}/{len(rows)}")
    return "\n".join(lines)
