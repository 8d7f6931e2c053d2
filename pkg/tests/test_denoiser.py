import numpy as np
import pytest

from recon.denoiser import (Conditioning, ConditioningError, ExactDenoiser, Mode,
                            allowed_support, apply_control, denoise, gaussian_posterior_mean,
                            region_partition, region_responsibilities)
from recon.diffusion import noise_to_t, sample_loop
from recon.toyworld import (CategorySpec, Component, Layout, Palette, make_control_map,
                            render_mean_field)

from conftest import make_layout, simple_palette

trapezoid = getattr(np, "trapezoid", None) or np.trapz


def uniform_priors(layout, palette, mode):
    sup = allowed_support(layout, palette, mode).astype(float)
    return sup / sup.sum(axis=1, keepdims=True)


def test_region_partition_cases():
    assert np.all(region_partition(Layout(8, 8)) == 0)
    reg = region_partition(make_layout([((2, 2, 6, 6), 1)], 8, 8))
    assert np.bincount(reg.ravel()).tolist() == [48, 16]
    reg = region_partition(make_layout([((0, 0, 5, 5), 1), ((3, 3, 8, 8), 2)], 8, 8))
    assert np.all(reg[3:5, 3:5] == 2)
    assert np.bincount(reg.ravel()).sum() == 64


def test_posterior_mean_limits_and_value():
    z = np.array([0.3, -1.0, 2.0])
    mu = np.array([0.5, 0.1, 0.9])
    assert np.allclose(gaussian_posterior_mean(z, mu, 0.05, 1.0), z)
    assert np.allclose(gaussian_posterior_mean(z, mu, 0.05, 1e-15), mu)
    val = gaussian_posterior_mean(np.ones(3), np.zeros(3), 0.1, 0.5)
    assert np.allclose(val, np.sqrt(0.5) * 0.01 / (0.5 * 0.01 + 0.5))
    assert abs(val[0] - 0.014003) < 1e-6


def test_posterior_mean_matches_numerical_bayes():
    grid = np.linspace(-1.5, 1.5, 200001)
    ab, sigma, zt = 0.5, 0.1, 1.0
    post = np.exp(-grid ** 2 / (2 * sigma ** 2) - (zt - np.sqrt(ab) * grid) ** 2 / (2 * (1 - ab)))
    numeric = trapezoid(grid * post, grid) / trapezoid(post, grid)
    assert abs(numeric - gaussian_posterior_mean(zt, 0.0, sigma, ab)) < 1e-9


def test_responsibility_cases(schedule, rng):
    pal = simple_palette()
    z = rng.standard_normal((4, 4, 3))
    region = np.ones((4, 4), dtype=bool)
    prior = np.zeros(pal.num_components)
    prior[2] = 1.0
    assert np.array_equal(region_responsibilities(z, region, prior, pal, 500, schedule), prior)
    # red (1,0,0) and blue (0,0,1) are symmetric about a latent equal in channels 0 and 2
    sym = np.full((4, 4, 3), 0.2)
    prior = np.array([0.0, 0.5, 0.5, 0.0])
    r = region_responsibilities(sym, region, prior, pal, 500, schedule)
    assert np.allclose(r[1:3], 0.5, atol=1e-12)
    with pytest.raises(ConditioningError):
        region_responsibilities(z, region, np.zeros(4), pal, 500, schedule)


def test_responsibility_decisive_at_high_alpha_bar(rng):
    pal = simple_palette()
    t = 0

    class Sched:
        def alpha_bar(self, t):
            return 0.9

    s = Sched()
    x0 = np.array([1.0, 0.0, 0.0]) + 0.05 * rng.standard_normal((10, 10, 3))
    zt = np.sqrt(0.9) * x0 + np.sqrt(0.1) * rng.standard_normal((10, 10, 3))
    prior = np.array([0.0, 0.5, 0.5, 0.0])
    r = region_responsibilities(zt, np.ones((10, 10), bool), prior, pal, t, s)
    # brute force: direct log-likelihood sums
    v = 0.9 * 0.05 ** 2 + 0.1
    ll = [np.sum(-(zt - np.sqrt(0.9) * pal.means[k]) ** 2 / (2 * v)) for k in (1, 2)]
    expect_red = 1.0 / (1.0 + np.exp(ll[1] - ll[0]))
    assert r[1] > 1 - 1e-6
    assert abs(r[1] - expect_red) < 1e-12


def one_box_conditioning(gamma, mode=Mode.RACA, prior=None):
    pal = simple_palette()
    lay = make_layout([((2, 2, 6, 6), 1)], 8, 8)
    prior = uniform_priors(lay, pal, mode) if prior is None else prior
    return pal, lay, Conditioning(lay, mode, prior, make_control_map(lay), gamma, pal)


def test_apply_control_cases(rng):
    pal, lay, cond = one_box_conditioning(0.0)
    z0 = rng.standard_normal((8, 8, 3))
    resp = cond.region_priors
    out = apply_control(z0, cond, resp)
    assert np.array_equal(out, z0)
    _, _, cond1 = one_box_conditioning(1.0)
    blank = Conditioning(lay, Mode.RACA, resp, np.zeros((8, 8)), 1.0, pal)
    assert np.array_equal(apply_control(z0, blank, resp), z0)
    img = render_mean_field(lay, pal, (0,)) + 0.01 * rng.standard_normal((8, 8, 3))
    snapped = apply_control(img, cond1, resp)
    edge = make_control_map(lay).astype(bool)
    assert np.array_equal(snapped[edge], np.tile(pal.means[1], (edge.sum(), 1)))


def test_denoise_single_component_is_pixelwise_posterior_mean(schedule, rng):
    pal = simple_palette()
    lay = Layout(5, 5)
    prior = np.array([[1.0, 0, 0, 0]])
    cond = Conditioning(lay, Mode.RACA, prior, np.zeros((5, 5)), 0.5, pal)
    z = rng.standard_normal((5, 5, 3))
    out = denoise(z, 400, cond, pal, schedule)
    ref = gaussian_posterior_mean(z, pal.means[0], pal.pixel_sigma, schedule.alpha_bar(400))
    assert np.allclose(out.z0_hat, ref, atol=1e-14)
    assert np.allclose(noise_to_t(out.z0_hat, 400, out.eps_hat, schedule), z, atol=1e-10)


def test_denoise_exact_against_quadrature(schedule, rng):
    comps = [((0.2, 0.3, 0.4), 0.2), ((0.6, 0.5, 0.3), 0.5), ((0.9, 0.1, 0.7), 0.3)]
    pal = Palette((CategorySpec(0, "only", tuple(Component(c, w) for c, w in comps)),), 0.08)
    lay = Layout(2, 2)
    prior = pal.weights[None, :]
    cond = Conditioning(lay, Mode.RACA, prior, np.zeros((2, 2)), 0.0, pal)
    t = 600
    ab = schedule.alpha_bar(t)
    z = rng.standard_normal((2, 2, 3))
    out = denoise(z, t, cond, pal, schedule)
    grid = np.linspace(-1.5, 2.5, 80001)
    s = pal.pixel_sigma
    log_marg, means = [], []
    for k, mu in enumerate(pal.means):
        lm, mk = np.log(pal.weights[k]), np.empty((2, 2, 3))
        for idx in np.ndindex(2, 2, 3):
            dens = (np.exp(-(grid - mu[idx[2]]) ** 2 / (2 * s * s)) / np.sqrt(2 * np.pi * s * s)
                    * np.exp(-(z[idx] - np.sqrt(ab) * grid) ** 2 / (2 * (1 - ab)))
                    / np.sqrt(2 * np.pi * (1 - ab)))
            mass = trapezoid(dens, grid)
            lm += np.log(mass)
            mk[idx] = trapezoid(grid * dens, grid) / mass
        log_marg.append(lm)
        means.append(mk)
    w = np.exp(np.array(log_marg) - max(log_marg))
    w /= w.sum()
    brute = np.tensordot(w, np.array(means), axes=1)
    assert np.max(np.abs(out.z0_hat - brute)) < 1e-9
    assert np.allclose(out.responsibilities[0], w, atol=1e-9)


def test_raca_red_box_resolves_at_half_T(schedule, palette):
    lay = make_layout([((16, 16, 40, 40), 1)], 64, 64)
    prior = uniform_priors(lay, palette, Mode.RACA)
    cond = Conditioning(lay, Mode.RACA, prior, make_control_map(lay), 0.8, palette)
    red = set(range(palette.category_slice(1).start, palette.category_slice(1).stop))
    r = np.random.default_rng(0)
    hits = 0
    for _ in range(100):
        img = render_mean_field(lay, palette, (int(r.integers(2)),)) \
            + palette.pixel_sigma * r.standard_normal((64, 64, 3))
        z = noise_to_t(img, 500, r.standard_normal(img.shape), schedule)
        resp = denoise(z, 500, cond, palette, schedule).responsibilities[1]
        hits += int(np.argmax(resp)) in red
    assert hits >= 99


def test_global_ambiguity_early(schedule, palette):
    lay = make_layout([((16, 16, 40, 40), 1)], 64, 64, caption={1, 3})
    prior = uniform_priors(lay, palette, Mode.GLOBAL)
    cond = Conditioning(lay, Mode.GLOBAL, prior, make_control_map(lay), 0.8, palette)
    z = np.random.default_rng(2).standard_normal((64, 64, 3))
    resp = denoise(z, 900, cond, palette, schedule).responsibilities[1]
    cat = palette.component_category
    for c in (1, 3):
        assert 1e-3 < resp[cat == c].sum() < 1 - 1e-3


def test_raca_support_is_structural(schedule, palette):
    lay = make_layout([((2, 2, 12, 12), 2), ((20, 20, 30, 30), 4)], 32, 32, caption={2, 4})
    cond = Conditioning(lay, Mode.RACA, uniform_priors(lay, palette, Mode.RACA),
                        make_control_map(lay), 0.8, palette)
    z = np.random.default_rng(3).standard_normal((32, 32, 3))
    resp = denoise(z, 700, cond, palette, schedule).responsibilities
    sup = allowed_support(lay, palette, Mode.RACA)
    assert np.all(resp[~sup] == 0.0)


@pytest.mark.slow
def test_entropy_monotone_on_average(world):
    from recon.experiments import make_scenes
    from recon.raca import build_conditioning
    den = ExactDenoiser(world.palette, world.schedule)
    violations = total = 0
    for scene, seed in make_scenes(100, 31, world.palette):
        z_T = np.random.default_rng(seed).standard_normal(scene.image.shape)
        cond = build_conditioning(z_T, scene.layout, world.embeddings, world.palette,
                                  world.schedule, Mode.GLOBAL, world.gamma,
                                  make_control_map(scene.layout))
        H = []

        def recording(z, t, c):
            out = den(z, t, c)
            if 100 <= t <= 900:
                r = out.responsibilities
                H.append(-np.sum(r * np.log(np.where(r > 0, r, 1.0)), axis=1))
            return out

        sample_loop(z_T, recording, cond, world.schedule)
        d = np.diff(np.array(H), axis=0)
        violations += int((d > 1e-9).sum())
        total += d.size
    assert violations <= 0.05 * total


def test_conditioning_validation(palette):
    lay = make_layout([((2, 2, 12, 12), 2)], 16, 16)
    good = uniform_priors(lay, palette, Mode.RACA)
    cmap = make_control_map(lay)
    with pytest.raises(ConditioningError, match="shape"):
        Conditioning(lay, Mode.RACA, good[:1], cmap, 0.5, palette)
    with pytest.raises(ConditioningError, match="probability"):
        Conditioning(lay, Mode.RACA, good * 2, cmap, 0.5, palette)
    leaky = uniform_priors(lay, palette, Mode.GLOBAL)
    with pytest.raises(ConditioningError, match="support"):
        Conditioning(lay, Mode.RACA, leaky, cmap, 0.5, palette)
    with pytest.raises(ConditioningError, match="gamma"):
        Conditioning(lay, Mode.RACA, good, cmap, 1.5, palette)
    with pytest.raises(ConditioningError, match="control map"):
        Conditioning(lay, Mode.RACA, good, np.zeros((3, 3)), 0.5, palette)
