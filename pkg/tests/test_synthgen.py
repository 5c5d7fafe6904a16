import numpy as np
import pytest
from scipy.stats import norm

from pmquant.errors import ConfigError
from pmquant.synthgen import SynthSpec, draw_target, generate, generate_scene, truth_triple


def test_zero_noise_collapses_quantiles():
    s = generate(SynthSpec(size=16, noise_base=0.0, noise_gain=0.0), 1)[0]
    t = truth_triple(s)
    np.testing.assert_array_equal(t.lower, t.median)
    np.testing.assert_array_equal(t.upper, t.median)
    np.testing.assert_array_equal(s.target.values, t.median)


def test_median_is_latent_field():
    spec = SynthSpec(size=16)
    _, _, _, truth = generate_scene(spec, 3)
    np.testing.assert_allclose(truth.quantile(0.5), truth.latent, rtol=0, atol=1e-12)


@pytest.mark.parametrize("q", [0.1, 0.5, 0.9])
def test_empirical_quantiles_match_truth(q):
    spec = SynthSpec(size=8)
    _, _, _, truth = generate_scene(spec, 0)
    draws = draw_target(truth, np.random.default_rng(1), size=100_000)
    below = (draws <= truth.quantile(q)).mean(axis=0)
    se = np.sqrt(q * (1 - q) / 100_000)
    assert np.all(np.abs(below - q) <= 3 * se + 1e-3)


def test_empirical_quantile_sort_oracle_one_pixel():
    spec = SynthSpec(size=8)
    _, _, _, truth = generate_scene(spec, 2)
    draws = draw_target(truth, np.random.default_rng(5), size=100_000)[:, 4, 4]
    sigma = truth.sigma[4, 4]
    for q in (0.1, 0.9):
        emp = np.sort(draws)[int(np.ceil(q * draws.size)) - 1]
        # standard error of a sample quantile: sqrt(q(1-q)/n) / density
        se = np.sqrt(q * (1 - q) / draws.size) / (norm.pdf(norm.ppf(q)) / sigma)
        assert abs(emp - truth.quantile(q)[4, 4]) <= 3 * se


def test_same_seed_bit_identical():
    a = generate(SynthSpec(size=16, seed=4), 3)
    b = generate(SynthSpec(size=16, seed=4), 3)
    for u, v in zip(a, b):
        np.testing.assert_array_equal(u.input.bands, v.input.bands)
        np.testing.assert_array_equal(u.target.values, v.target.values)
        np.testing.assert_array_equal(u.mask.validity, v.mask.validity)
    c = generate(SynthSpec(size=16, seed=5), 1)[0]
    assert not np.array_equal(a[0].target.values, c.target.values)


def test_sample_layout():
    s = generate(SynthSpec(size=16, n_bands=4), 12)
    assert s[0].input.bands.shape == (4, 16, 16)
    assert s[11].month == (2013, 2)
    assert len({x.key for x in s}) == 12
    assert 0 < s[0].mask.count < 256


def test_invalid_specs():
    for kw in ({"latent_std": 0.0}, {"size": 2}, {"n_bands": 1}, {"noise_gain": -1.0},
               {"cloud_fraction": 1.0}):
        with pytest.raises(ConfigError):
            SynthSpec(**kw)
    with pytest.raises(ConfigError):
        generate(SynthSpec(), 0)


def test_spec_round_trip():
    spec = SynthSpec(size=32, seed=9)
    assert SynthSpec.from_dict(spec.to_dict()) == spec
