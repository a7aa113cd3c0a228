"""Two-class overlapping-hypercube distribution.

Each class draws its on-manifold block uniformly from a d-dimensional cube of
side ``l`` (the two cubes overlap by ``k`` per axis) and its off-manifold
block uniformly from a g-dimensional cube of half-width ``sqrt(3) * sigma_off``
around a class mean.  The off-manifold cubes are disjoint, so the ambient
classes are always linearly separable.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

SQRT3 = math.sqrt(3.0)

OVERLAP = "overlap"
SEPARATED = "separated"


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based Philox generator; the only RNG used by the package."""
    return np.random.Generator(np.random.Philox(int(seed) % 2**64))


def _as_tuple(v, size: int, name: str) -> tuple[float, ...]:
    arr = np.atleast_1d(np.asarray(v, dtype=float))
    if arr.size == 1 and size > 1:
        arr = np.full(size, float(arr[0]))
    if arr.shape != (size,):
        raise ValueError(f"{name} must have length {size}, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} must be finite")
    return tuple(float(a) for a in arr)


@dataclass(frozen=True)
class ManifoldSpec:
    d: int
    g: int
    l: float
    k: float
    mu_off_pos: tuple[float, ...]
    mu_off_neg: tuple[float, ...]
    sigma_off: float
    prior_pos: float = 0.5

    def __post_init__(self):
        if int(self.d) != self.d or self.d < 1:
            raise ValueError("d must be a positive integer")
        if int(self.g) != self.g or self.g < 1:
            raise ValueError("g must be a positive integer")
        object.__setattr__(self, "d", int(self.d))
        object.__setattr__(self, "g", int(self.g))
        if not self.l > 0:
            raise ValueError("l must be positive")
        if not 0.0 <= self.k <= self.l:
            raise ValueError("k must lie in [0, l]")
        if not self.sigma_off > 0:
            raise ValueError("sigma_off must be positive")
        # degenerate priors are allowed for sampling; everything else assumes 0 < pi < 1
        if not 0.0 <= self.prior_pos <= 1.0:
            raise ValueError("prior_pos must lie in [0, 1]")
        object.__setattr__(self, "mu_off_pos", _as_tuple(self.mu_off_pos, self.g, "mu_off_pos"))
        object.__setattr__(self, "mu_off_neg", _as_tuple(self.mu_off_neg, self.g, "mu_off_neg"))
        if not self.sigma_off / self.sigma_on < 1.0:
            raise ValueError("sigma_off / sigma_on must be < 1")
        gap = np.abs(np.subtract(self.mu_off_pos, self.mu_off_neg))
        if not np.any(gap > 2 * SQRT3 * self.sigma_off):
            raise ValueError("off-manifold hypercubes must be disjoint")

    # -- derived quantities -------------------------------------------------
    @property
    def D(self) -> int:
        return self.d + self.g

    @property
    def sigma_on(self) -> float:
        return self.l / math.sqrt(12.0)

    @property
    def half_width_off(self) -> float:
        return SQRT3 * self.sigma_off

    def mu_off(self, label: int) -> np.ndarray:
        return np.asarray(self.mu_off_pos if label > 0 else self.mu_off_neg)

    def mu_on(self, label: int) -> np.ndarray:
        return np.full(self.d, label * (self.l - 2 * self.k) / 2.0)

    def on_bounds(self, label: int) -> tuple[float, float]:
        """Per-axis interval of the on-manifold cube of ``label``."""
        if label > 0:
            return -self.k, self.l - self.k
        return -(self.l - self.k), self.k

    def off_gap(self) -> float:
        """Largest per-coordinate distance between the two off-manifold cubes."""
        gap = np.abs(np.subtract(self.mu_off_pos, self.mu_off_neg)) - 2 * self.half_width_off
        return float(np.max(gap))

    def with_(self, **changes) -> "ManifoldSpec":
        data = self.to_dict()
        data.update(changes)
        return ManifoldSpec(**data)

    def to_dict(self) -> dict:
        return {
            "d": self.d,
            "g": self.g,
            "l": self.l,
            "k": self.k,
            "mu_off_pos": list(self.mu_off_pos),
            "mu_off_neg": list(self.mu_off_neg),
            "sigma_off": self.sigma_off,
            "prior_pos": self.prior_pos,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ManifoldSpec":
        keys = ("d", "g", "l", "k", "mu_off_pos", "mu_off_neg", "sigma_off", "prior_pos")
        return cls(**{k: data[k] for k in keys if k in data})

    @classmethod
    def default(
        cls,
        d: int = 1,
        g: int = 1,
        l: float = 2.0,
        k: float = 0.5,
        sigma_ratio: float = 2.0,
        prior_pos: float = 0.5,
    ) -> "ManifoldSpec":
        """Acceptance geometry with ``sigma_off = sigma_on / sigma_ratio``.

        The off-manifold means are ``+-2*sqrt(3)*sigma_off``, so the gap between
        the two off-manifold cubes equals their side.  At ``sigma_ratio = 2``
        with ``l = 2`` the means are exactly ``+-1``.
        """
        sigma_off = (l / math.sqrt(12.0)) / sigma_ratio
        mu = 2 * SQRT3 * sigma_off
        return cls(d, g, l, k, (mu,) * g, (-mu,) * g, sigma_off, prior_pos)


def ovl(spec: ManifoldSpec) -> float:
    """Overlap coefficient ``(k / l) ** d``.

    This is the class-conditional mass of the region tagged :data:`OVERLAP`
    by :func:`region`.  For ``k <= l/2`` the symmetric overlap integral
    ``int min(f+, f-)`` equals ``2**d`` times this value.
    """
    return float((spec.k / spec.l) ** spec.d)


def overlap_integral(spec: ManifoldSpec) -> float:
    """Closed form of ``int min(f+, f-)`` for the two on-manifold densities."""
    side = max(0.0, min(2 * spec.k, 2 * (spec.l - spec.k), spec.l))
    return float((side / spec.l) ** spec.d)


def region(spec: ManifoldSpec, x_on, label: int) -> str:
    """Tag an on-manifold point as overlap (every ``y*x`` in ``[-k, 0)``) or separated."""
    x = np.atleast_1d(np.asarray(x_on, dtype=float))
    if x.shape != (spec.d,):
        raise ValueError(f"x_on must have length {spec.d}")
    lo, hi = spec.on_bounds(label)
    if np.any(x < lo) or np.any(x > hi):
        raise ValueError("x_on lies outside the hypercube of its label")
    u = label * x
    return OVERLAP if np.all((u >= -spec.k) & (u < 0)) else SEPARATED


def overlap_mask(spec: ManifoldSpec, x_on: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Vectorised :func:`region` for an ``(n, d)`` block; True where overlap."""
    u = labels[:, None] * x_on
    return np.all((u >= -spec.k) & (u < 0), axis=1)


@dataclass(frozen=True)
class LabeledSample:
    x_on: np.ndarray
    x_off: np.ndarray
    label: int


@dataclass(frozen=True)
class Dataset:
    """Samples stored column-wise; iterate to get :class:`LabeledSample` rows."""

    spec: ManifoldSpec
    seed: int
    x_on: np.ndarray
    x_off: np.ndarray
    labels: np.ndarray
    _x: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        x = np.hstack([self.x_on, self.x_off])
        for arr in (self.x_on, self.x_off, self.labels, x):
            arr.setflags(write=False)
        object.__setattr__(self, "_x", x)

    @property
    def x(self) -> np.ndarray:
        """Ambient points, shape ``(n, d + g)``."""
        return self._x

    @property
    def y(self) -> np.ndarray:
        return self.labels

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def __iter__(self) -> Iterator[LabeledSample]:
        for i in range(len(self)):
            yield self[i]

    def __getitem__(self, i: int) -> LabeledSample:
        return LabeledSample(self.x_on[i].copy(), self.x_off[i].copy(), int(self.labels[i]))

    def overlap_mask(self) -> np.ndarray:
        return overlap_mask(self.spec, self.x_on, self.labels)

    def to_csv(self, path, header_lines: Sequence[str] = ()) -> None:
        write_dataset_csv(self, path, header_lines)


def sample(spec: ManifoldSpec, n: int, seed: int) -> Dataset:
    """Draw ``n`` labelled points; a pure function of ``(spec, n, seed)``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = make_rng(seed)
    labels = np.where(rng.random(n) < spec.prior_pos, 1, -1).astype(np.int64)
    # on-manifold: U[-k, l-k] for y=+1, mirrored for y=-1
    u_on = rng.random((n, spec.d))
    x_on = labels[:, None] * (-spec.k + spec.l * u_on)
    u_off = rng.random((n, spec.g))
    mu = np.where(labels[:, None] > 0, np.asarray(spec.mu_off_pos), np.asarray(spec.mu_off_neg))
    x_off = mu + spec.half_width_off * (2 * u_off - 1)
    return Dataset(spec, int(seed), x_on, x_off, labels)


def moments(spec: ManifoldSpec) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Class-conditional means and per-coordinate within-class variances."""
    mean_pos = np.concatenate([spec.mu_on(+1), spec.mu_off(+1)])
    mean_neg = np.concatenate([spec.mu_on(-1), spec.mu_off(-1)])
    var = np.concatenate([np.full(spec.d, spec.sigma_on**2), np.full(spec.g, spec.sigma_off**2)])
    return mean_pos, mean_neg, var


def second_moment(spec: ManifoldSpec) -> np.ndarray:
    """Mixture second-moment matrix ``E[x x^T]``."""
    mean_pos, mean_neg, var = moments(spec)
    p = spec.prior_pos
    return np.diag(var) + p * np.outer(mean_pos, mean_pos) + (1 - p) * np.outer(mean_neg, mean_neg)


def signed_mean(spec: ManifoldSpec) -> np.ndarray:
    """``E[y x]`` under the mixture."""
    mean_pos, mean_neg, _ = moments(spec)
    return spec.prior_pos * mean_pos - (1 - spec.prior_pos) * mean_neg


# -- serialisation --------------------------------------------------------

def save_config(path, spec: ManifoldSpec, seed: int | None = None, **extra) -> None:
    data = spec.to_dict()
    if seed is not None:
        data["seed"] = int(seed)
    data.update(extra)
    Path(path).write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


def load_config(path) -> tuple[ManifoldSpec, dict]:
    """Read a JSON config; returns the geometry and the full key/value mapping."""
    data = json.loads(Path(path).read_text())
    return ManifoldSpec.from_dict(data), data


def dataset_columns(spec: ManifoldSpec) -> list[str]:
    return (
        [f"x_on_{i + 1}" for i in range(spec.d)]
        + [f"x_off_{i + 1}" for i in range(spec.g)]
        + ["label"]
    )


def write_dataset_csv(ds: Dataset, path, header_lines: Sequence[str] = ()) -> None:
    with open(path, "w", newline="") as fh:
        for line in header_lines:
            fh.write(f"# {line}\n")
        writer = csv.writer(fh)
        writer.writerow(dataset_columns(ds.spec))
        for row, lab in zip(ds.x, ds.labels):
            writer.writerow([repr(float(v)) for v in row] + [int(lab)])


def read_dataset_csv(path, spec: ManifoldSpec, seed: int = 0) -> Dataset:
    rows = []
    with open(path, newline="") as fh:
        lines = (ln for ln in fh if not ln.startswith("#"))
        reader = csv.reader(lines)
        header = next(reader)
        if header != dataset_columns(spec):
            raise ValueError(f"unexpected columns {header}")
        for r in reader:
            rows.append([float(v) for v in r])
    arr = np.asarray(rows, dtype=float).reshape(-1, spec.D + 1)
    return Dataset(spec, seed, arr[:, : spec.d].copy(), arr[:, spec.d : spec.D].copy(),
                   arr[:, -1].astype(np.int64))
