import numpy as np
import pytest

from recon.denoiser import Conditioning, ExactDenoiser, Mode
from recon.diffusion import SamplerState, fast_lookahead, noise_to_t, sample_loop
from recon.experiments import make_scenes, run_arm
from recon.raca import build_conditioning
from recon.rgr import (ConfigError, RectificationConfig, TargetMode, build_rectification_mask,
                       prepare_initial_masks, probe_latent, rectify, run_recon,
                       stage_timesteps)
from recon.toyworld import Layout, SceneSample, make_control_map, render_mean_field

from conftest import make_layout, simple_palette


@pytest.fixture(scope="module")
def scene(world):
    return make_scenes(1, 17, world.palette)[0]


def test_config_validation():
    RectificationConfig()
    for bad in [dict(stage_fractions=(0.5, 0.75)), dict(stage_fractions=(1.0,)),
                dict(lookahead_N=0), dict(dilate_kernel=4), dict(tau=0.0)]:
        with pytest.raises(ConfigError):
            RectificationConfig(**bad)
    with pytest.raises(ValueError):
        RectificationConfig(target_mode="SIDEWAYS")


def test_stage_timesteps(schedule):
    assert stage_timesteps(schedule, (0.75, 0.5, 0.25, 0.1)) == [749, 500, 250, 83]
    assert stage_timesteps(schedule, (0.999, 0.5, 0.499)) == [500]
    assert stage_timesteps(schedule, ()) == []


def test_stage1_clean_original(world, scene):
    sc, _ = scene
    rec = prepare_initial_masks(sc, world.palette, RectificationConfig())
    assert rec.fp == [] and rec.fp_regions == []
    assert np.array_equal(rec.control_map, make_control_map(sc.layout))
    stack = np.stack(rec.gt_regions)
    assert np.all(stack.sum(axis=0) <= 1)


def test_stage1_spurious_blob_suppresses_control(world, scene):
    sc, _ = scene
    pal = world.palette
    obj = sc.layout.objects[0]
    image = sc.image.copy()
    b = obj.box
    # a foreign-colored blob next to the object's right edge, clipped to the frame
    x0, x1 = b.x1 + 1, min(b.x1 + 6, sc.layout.width)
    y0, y1 = b.y0, min(b.y0 + 5, sc.layout.height)
    if x1 - x0 < 4:
        x0, x1 = max(b.x0 - 6, 0), b.x0 - 1
    other = 1 if obj.label != 1 else 2
    image[y0:y1, x0:x1] = pal.means[pal.flat_index(other, 0)]
    corrupted = SceneSample(sc.layout, sc.background_component, sc.object_components, image)
    rec = prepare_initial_masks(corrupted, pal, RectificationConfig())
    assert len(rec.fp) >= 1
    blob = np.zeros(image.shape[:2], bool)
    blob[y0:y1, x0:x1] = True
    assert np.all(rec.control_map[blob] == 0)
    fp_union = np.logical_or.reduce(rec.fp_regions)
    assert fp_union[blob].all()
    assert np.array_equal(rec.control_map[~fp_union], make_control_map(sc.layout)[~fp_union])


def test_rectification_mask_cases(world, scene):
    sc, _ = scene
    pal, cfg = world.palette, RectificationConfig()
    M, fp, fn = build_rectification_mask(sc.image, sc, pal, cfg)
    assert not M.any() and fp == fn == 0
    missing = sc.image.copy()
    obj = sc.layout.objects[1]
    missing[obj.box.slices()] = pal.means[0]
    M, fp, fn = build_rectification_mask(missing, sc, pal, cfg)
    assert fn == 1 and M[obj.box.slices()].all()
    extra = sc.image.copy()
    free = np.ones(sc.image.shape[:2], bool)
    for o in sc.layout.objects:
        y0, x0 = max(o.box.y0 - 1, 0), max(o.box.x0 - 1, 0)
        free[y0:o.box.y1 + 1, x0:o.box.x1 + 1] = False
    ys, xs = np.nonzero(free)
    for y, x in zip(ys, xs):
        if free[y:y + 5, x:x + 5].all() and y + 5 <= free.shape[0] and x + 5 <= free.shape[1]:
            break
    extra[y:y + 5, x:x + 5] = pal.means[pal.flat_index(1, 0)]
    M, fp, fn = build_rectification_mask(extra, sc, pal, cfg)
    assert fp == 1 and M[y:y + 5, x:x + 5].all()


def test_rectify_cases(rng):
    z, zo = rng.standard_normal((2, 6, 6, 3))
    assert np.array_equal(rectify(z, zo, np.ones((6, 6), bool)), zo)
    assert np.array_equal(rectify(z, zo, np.zeros((6, 6), bool)), z)
    checker = (np.indices((6, 6)).sum(axis=0) % 2).astype(bool)
    out = rectify(z, zo, checker)
    assert np.array_equal(out[checker], zo[checker]) and np.array_equal(out[~checker], z[~checker])


def test_probe_modes(world, scene):
    sc, seed = scene
    z_T = np.random.default_rng(seed).standard_normal(sc.image.shape)
    cond = build_conditioning(z_T, sc.layout, world.embeddings, world.palette, world.schedule,
                              Mode.GLOBAL, world.gamma, make_control_map(sc.layout))
    den = ExactDenoiser(world.palette, world.schedule)
    state = SamplerState(z_T, 12, z_T, seed, world.schedule)
    t = state.t
    probe = lambda m: probe_latent(z_T, t, state, RectificationConfig(target_mode=m), den, cond,
                                   world.schedule)
    assert probe(TargetMode.NOISY) is z_T
    assert np.array_equal(probe(TargetMode.ONESTEP), den(z_T, t, cond).z0_hat)
    za, ta = fast_lookahead(state, 5, den, cond, world.schedule)
    assert ta == world.schedule.ddim_steps[17]
    assert np.array_equal(probe(TargetMode.LOOKAHEAD), den(za, ta, cond).z0_hat)


def test_empty_schedule_equals_plain_sampling(world, scene):
    sc, seed = scene
    cfg = RectificationConfig(stage_fractions=())
    image, trace = run_recon(sc, world.palette, world.schedule, Mode.GLOBAL, cfg, seed,
                             embeddings=world.embeddings, gamma=world.gamma)
    z_T = np.random.default_rng(seed).standard_normal(sc.image.shape)
    cond = build_conditioning(z_T, sc.layout, world.embeddings, world.palette, world.schedule,
                              Mode.GLOBAL, world.gamma, make_control_map(sc.layout))
    plain, _ = sample_loop(z_T, ExactDenoiser(world.palette, world.schedule), cond,
                           world.schedule)
    assert np.array_equal(image, plain) and trace.stages == []
    base, _ = run_arm(sc, world, "baseline", RectificationConfig(), seed)
    assert np.array_equal(base, plain)


def test_trace_shape_and_eq5_at_every_stage(world):
    for sc, seed in make_scenes(5, 23, world.palette):
        captured = []
        import recon.rgr as rgr
        original = rgr.rectify

        def spy(z_t, z_orig, mask):
            out = original(z_t, z_orig, mask)
            captured.append((z_t, z_orig, mask, out))
            return out

        rgr.rectify = spy
        try:
            _, trace = run_recon(sc, world.palette, world.schedule, Mode.GLOBAL,
                                 RectificationConfig(), seed, embeddings=world.embeddings)
        finally:
            rgr.rectify = original
        assert len(trace.stages) == 4
        ts = [s.t for s in trace.stages]
        assert all(a > b for a, b in zip(ts, ts[1:]))
        for z_t, z_orig, mask, out in captured:
            assert np.array_equal(out[mask], z_orig[mask]) and np.array_equal(out[~mask], z_t[~mask])


def test_fresh_noise_option_changes_only_rectified_content(world):
    sc, seed = make_scenes(3, 29, world.palette)[2]
    a, ta = run_arm(sc, world, "rgr", RectificationConfig(), seed)
    b, tb = run_arm(sc, world, "rgr", RectificationConfig(reuse_initial_noise=False), seed)
    if ta.stages[0].mask.any():
        assert not np.array_equal(a, b)
    assert np.array_equal(ta.stages[0].mask, tb.stages[0].mask)


def test_locality_single_region(schedule, rng):
    pal = simple_palette()
    lay = Layout(12, 12)
    prior = np.array([[1.0, 0, 0, 0]])
    cond = Conditioning(lay, Mode.RACA, prior, np.zeros((12, 12)), 0.0, pal)
    den = ExactDenoiser(pal, schedule)
    z_T = rng.standard_normal((12, 12, 3))
    x_orig = render_mean_field(lay, pal, ())
    mask = rng.random((12, 12)) < 0.3

    def cb(z, t, state):
        return rectify(z, noise_to_t(x_orig, t, state.initial_noise, schedule), mask)

    hooked, _ = sample_loop(z_T, den, cond, schedule, [(lambda t: t in (749, 500), cb)])
    plain, _ = sample_loop(z_T, den, cond, schedule)
    assert np.array_equal(hooked[~mask], plain[~mask])
    assert not np.array_equal(hooked[mask], plain[mask])


def test_locality_all_false_masks_multi_region(world):
    for sc, seed in make_scenes(20, 31, world.palette):
        img, trace = run_arm(sc, world, "recon", RectificationConfig(), seed)
        if not any(s.mask.any() for s in trace.stages):
            plain, _ = run_arm(sc, world, "raca", RectificationConfig(), seed)
            assert np.array_equal(img, plain)
            return
    pytest.fail("no run with all-empty masks among 20 scenes")
