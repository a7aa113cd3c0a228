import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from manifold_lab.distribution import (
    OVERLAP,
    SEPARATED,
    ManifoldSpec,
    load_config,
    make_rng,
    moments,
    overlap_integral,
    ovl,
    read_dataset_csv,
    region,
    sample,
    save_config,
    second_moment,
    write_dataset_csv,
)


def _spec(d=1, g=1, l=2.0, k=0.5, sigma_off=0.05, prior=0.5, mu=1.0):
    return ManifoldSpec(d, g, l, k, (mu,) * g, (-mu,) * g, sigma_off, prior)


# -- ovl --------------------------------------------------------------------

def test_ovl_closed_form_values():
    assert ovl(_spec(k=0.5)) == pytest.approx(0.25)
    assert ovl(_spec(d=3, k=0.0)) == 0.0
    assert ovl(_spec(d=2, k=0.5)) == pytest.approx(0.0625)


def test_ovl_equals_overlap_region_mass():
    # fraction of draws tagged overlap, 10^6 samples, d=2
    spec = _spec(d=2, k=0.5)
    ds = sample(spec, 1_000_000, seed=5)
    frac = ds.overlap_mask().mean()
    se = math.sqrt(ovl(spec) * (1 - ovl(spec)) / len(ds))
    assert abs(frac - ovl(spec)) < 3 * se


@pytest.mark.parametrize("d", [1, 2, 3])
def test_min_density_integral_is_2_pow_d_times_ovl(d):
    # Monte-Carlo oracle for int min(f+, f-): draw from the +1 cube, test
    # membership in the -1 cube (both densities are equal where both are nonzero)
    spec = _spec(d=d, k=0.5)
    rng = np.random.default_rng(d)
    x = -spec.k + spec.l * rng.random((400_000, d))
    lo, hi = spec.on_bounds(-1)
    inside = np.all((x >= lo) & (x <= hi), axis=1)
    est, se = inside.mean(), inside.std(ddof=1) / math.sqrt(inside.size)
    assert abs(est - overlap_integral(spec)) < 3 * se
    assert overlap_integral(spec) == pytest.approx(2**d * ovl(spec))


# -- sample -----------------------------------------------------------------

def test_degenerate_prior_gives_only_positive_labels():
    ds = sample(_spec(prior=1.0), 5, seed=9)
    assert np.all(ds.labels == 1)


def test_on_manifold_bounds_for_positive_class():
    ds = sample(_spec(), 20_000, seed=1)
    pos = ds.x_on[ds.labels == 1]
    assert pos.min() >= -0.5 and pos.max() <= 1.5


def test_signed_on_mean_matches_moment_formula():
    spec = _spec()
    ds = sample(spec, 100_000, seed=3)
    v = ds.labels * ds.x_on[:, 0]
    se = v.std(ddof=1) / math.sqrt(v.size)
    assert abs(v.mean() - (spec.l - 2 * spec.k) / 2) < 3 * se


def test_samples_inside_their_cubes():
    spec = _spec(d=2, g=3, sigma_off=0.1)
    ds = sample(spec, 2_000, seed=4)
    for s in ds:
        lo, hi = spec.on_bounds(s.label)
        assert np.all((s.x_on >= lo) & (s.x_on <= hi))
        mu = spec.mu_off(s.label)
        assert np.all(np.abs(s.x_off - mu) <= spec.half_width_off + 1e-15)


def test_sampling_is_bitwise_deterministic():
    spec = _spec(d=2)
    a, b = sample(spec, 1000, 42), sample(spec, 1000, 42)
    assert a.x.tobytes() == b.x.tobytes() and a.labels.tobytes() == b.labels.tobytes()
    assert sample(spec, 1000, 43).x.tobytes() != a.x.tobytes()


def test_generator_is_counter_based():
    assert isinstance(make_rng(0).bit_generator, np.random.Philox)


def test_data_is_linearly_separable_off_manifold():
    spec = ManifoldSpec(2, 2, 2.0, 1.0, (0.5, 0.3), (-0.2, 0.3), 0.05, 0.4)
    ds = sample(spec, 100_000, seed=8)
    normal = np.subtract(spec.mu_off_pos, spec.mu_off_neg)
    mid = 0.5 * np.add(spec.mu_off_pos, spec.mu_off_neg)
    s = (ds.x_off - mid) @ normal
    assert np.all(np.sign(s) == ds.labels)


def test_empirical_variances_match_moments():
    spec = _spec(d=2, g=2, sigma_off=0.1)
    ds = sample(spec, 100_000, seed=6)
    _, _, var = moments(spec)
    for label in (1, -1):
        x = ds.x[ds.labels == label]
        n = x.shape[0]
        emp = x.var(axis=0, ddof=1)
        # uniform: fourth central moment is 9/5 sigma^4
        se = np.sqrt((9 / 5 - 1) * var**2 / n)
        assert np.all(np.abs(emp - var) < 3 * se)


# -- moments ----------------------------------------------------------------

def test_moments_examples():
    _, _, var = moments(_spec())
    assert var[0] == pytest.approx(1 / 3)
    mp, mn, _ = moments(_spec(k=1.0))
    assert mp[0] == 0.0 and mn[0] == 0.0


def test_mixture_second_moment_on_block():
    spec = _spec()
    assert second_moment(spec)[0, 0] == pytest.approx(1 / 3 + 0.25)
    ds = sample(spec, 200_000, seed=11)
    v = ds.x_on[:, 0] ** 2
    assert abs(v.mean() - 0.58333333) < 3 * v.std(ddof=1) / math.sqrt(v.size)


# -- region -----------------------------------------------------------------

def test_region_examples():
    spec = _spec()
    assert region(spec, [-0.2], 1) == OVERLAP
    assert region(spec, [0.7], 1) == SEPARATED
    assert region(spec, [0.0], 1) == SEPARATED  # half-open [-k, 0)
    assert region(spec, [0.2], -1) == OVERLAP


def test_region_rejects_point_outside_cube():
    with pytest.raises(ValueError):
        region(_spec(), [1.7], 1)


# -- validation and serialisation -------------------------------------------

@pytest.mark.parametrize("kw", [
    dict(k=2.5), dict(k=-0.1), dict(prior=1.5), dict(sigma_off=0.0), dict(sigma_off=0.6),
    dict(mu=0.05, sigma_off=0.05),
])
def test_invalid_specs_raise(kw):
    with pytest.raises(ValueError):
        _spec(**kw)


def test_config_roundtrip(tmp_path):
    spec = _spec(d=2, g=2)
    save_config(tmp_path / "c.json", spec, seed=7)
    back, data = load_config(tmp_path / "c.json")
    assert back == spec and data["seed"] == 7
    assert set(json.loads((tmp_path / "c.json").read_text())) >= {
        "d", "g", "l", "k", "mu_off_pos", "mu_off_neg", "sigma_off", "prior_pos", "seed"}


def test_dataset_csv_roundtrip(tmp_path):
    spec = _spec(d=2, g=1)
    ds = sample(spec, 50, seed=1)
    write_dataset_csv(ds, tmp_path / "d.csv", ["config-hash: abc"])
    assert (tmp_path / "d.csv").read_text().startswith("# config-hash: abc\nx_on_1,x_on_2,x_off_1,label\n")
    back = read_dataset_csv(tmp_path / "d.csv", spec, seed=1)
    assert np.array_equal(back.x, ds.x) and np.array_equal(back.labels, ds.labels)


@settings(max_examples=30, deadline=None)
@given(d=st.integers(1, 3), g=st.integers(1, 3), k=st.floats(0.0, 2.0),
       ratio=st.floats(1.1, 20.0), seed=st.integers(0, 2**32))
def test_random_specs_sample_inside_support(d, g, k, ratio, seed):
    spec = ManifoldSpec.default(d=d, g=g, k=k, sigma_ratio=ratio)
    ds = sample(spec, 200, seed)
    u = ds.labels[:, None] * ds.x_on
    assert np.all((u >= -k) & (u <= spec.l - k))
    mu = np.where(ds.labels[:, None] > 0, spec.mu_off_pos, spec.mu_off_neg)
    assert np.all(np.abs(ds.x_off - mu) <= spec.half_width_off * (1 + 1e-12))
