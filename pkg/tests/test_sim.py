import math

import numpy as np
import pytest

from strobecap.scene import ColorDictionary, FrameStack, default_schedule
from strobecap.render import render
from strobecap.sim import (KeyframedScene, SimConfig, angular_speed, backdrop, encode, make_dictionary,
                           make_rig, make_scene, simulate, subtract_background, synthesize_interframes,
                           truth_at)
from strobecap.strobe import build_dictionary, design_circle_sequence


def small(**kw):
    base = dict(width=48, height=48, n_gaussians=12, n_cameras=3)
    base.update(kw)
    return SimConfig(**base)


def centroid_x(img):
    img = np.asarray(img, dtype=np.float64)
    xs = np.arange(img.shape[1])
    return float((img.sum(axis=0) * xs).sum() / img.sum())


class TestScenes:
    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            make_scene("spiral", small())

    def test_line_mover_constant_y(self):
        cfg = small()
        truth = make_scene("line-mover", cfg)
        sched = default_schedule(design_circle_sequence(cfg.n_strobes), exposure=cfg.exposure)
        ys = [truth_at(truth, t).means[:, 1] for t in sched.centers]
        for y in ys[1:]:
            np.testing.assert_array_equal(y, ys[0])

    def test_line_mover_constant_velocity(self):
        cfg = small()
        truth = make_scene("line-mover", cfg)
        sched = default_schedule(design_circle_sequence(cfg.n_strobes), exposure=cfg.exposure)
        xs = np.array([truth_at(truth, t).means[:, 0].mean() for t in sched.centers])
        np.testing.assert_allclose(np.diff(xs), cfg.travel / cfg.n_strobes, rtol=1e-9)

    def test_rotator_angle(self):
        cfg = small()
        truth = make_scene("rotator", cfg)
        w = angular_speed(cfg)
        t0 = truth.times[0]
        c0 = truth.at(t0).means.mean(axis=0)
        center = c0 - 0.4 * np.array([math.cos(w * t0), math.sin(w * t0), 0.0])
        for t in truth.times:
            got = truth.at(t).means.mean(axis=0) - center
            np.testing.assert_allclose(got, [0.4 * math.cos(w * t), 0.4 * math.sin(w * t), 0.0], atol=1e-12)

    @pytest.mark.parametrize("kind", ["line-mover", "rotator", "tumbling-cluster"])
    def test_seed_determinism(self, kind):
        a = make_scene(kind, small(rng_seed=7, motion_variance=0.05))
        b = make_scene(kind, small(rng_seed=7, motion_variance=0.05))
        ca = a.clouds if isinstance(a, KeyframedScene) else [a.cloud]
        cb = b.clouds if isinstance(b, KeyframedScene) else [b.cloud]
        assert all(x.equals(y) for x, y in zip(ca, cb))

    def test_erratic_jitter_bounded(self):
        cfg = small(motion_variance=0.1)
        truth = make_scene("line-mover", cfg)
        assert isinstance(truth, KeyframedScene)
        straight = make_scene("line-mover", small())
        dys = [truth.at(t).means[0, 1] - truth_at(straight, t).means[0, 1] for t in truth.times]
        assert max(abs(d) for d in dys) <= 0.1
        assert len(set(np.round(dys, 12))) == len(dys)


class TestInterframes:
    def test_static_scene_frames_identical(self):
        cfg = small()
        truth = make_scene("line-mover", cfg)
        truth.field.coeffs["mean_poly"][:] = 0.0
        rig = make_rig(cfg)
        stacks = synthesize_interframes(truth, rig, default_schedule(design_circle_sequence(5)))
        for s in stacks:
            for f in s.frames[1:]:
                np.testing.assert_array_equal(f, s.frames[0])

    def test_single_strobe_is_plain_render(self):
        cfg = small(n_strobes=1)
        truth = make_scene("line-mover", cfg)
        rig = make_rig(cfg)
        sched = default_schedule(design_circle_sequence(1), exposure=cfg.exposure)
        stacks = synthesize_interframes(truth, rig, sched)
        for m in range(len(rig)):
            direct = render(truth_at(truth, sched.centers[0]), rig[m]).intensity
            np.testing.assert_allclose(stacks[m].frames[0, ..., 0], direct, rtol=1e-12, atol=1e-12)

    def test_line_mover_centroid_linear(self):
        cfg = small(width=96, height=64, travel=0.6)
        truth = make_scene("line-mover", cfg)
        rig = make_rig(cfg, n_cameras=1, novel=False)
        stacks = synthesize_interframes(truth, rig, default_schedule(design_circle_sequence(10)))
        cx = np.array([centroid_x(f[..., 0]) for f in stacks[0].frames])
        steps = np.diff(cx)
        assert np.all(steps > 0)
        # perspective bends the image-space track slightly; stays near-linear
        np.testing.assert_allclose(steps, steps.mean(), rtol=0.05)


class TestEncode:
    def frames(self, rng, n=4, h=8, w=9):
        return FrameStack(rng.uniform(0, 10, (n, h, w, 1)))

    def test_static_scene_sum_of_colors(self):
        d = build_dictionary(design_circle_sequence(6), np.eye(3) + 0.1)
        one = np.random.default_rng(0).uniform(0, 5, (7, 7))
        stack = FrameStack(np.repeat(one[None, ..., None], 6, axis=0))
        out = encode(stack, d).frames[0]
        expected = one[..., None] * d.unnormalized.sum(axis=0)[None, None, :]
        np.testing.assert_allclose(out, expected, rtol=1e-12)

    def test_single_white_strobe(self):
        d = ColorDictionary(np.eye(3), np.full((1, 3), 1 / math.sqrt(3)), np.array([math.sqrt(3)]))
        img = np.random.default_rng(1).uniform(0, 5, (1, 6, 6, 1))
        out = encode(FrameStack(img), d).frames[0]
        for c in range(3):
            np.testing.assert_allclose(out[..., c], img[0, ..., 0], rtol=1e-12)

    def test_linearity(self):
        rng = np.random.default_rng(2)
        d = build_dictionary(design_circle_sequence(4), np.eye(3) + rng.uniform(0, 0.2, (3, 3)))
        a, b = self.frames(rng), self.frames(rng)
        zero = FrameStack(np.zeros_like(a.frames))
        for kw in ({}, {"ambient_strength": 0.3, "albedo_blend": 0.4}):
            ea, eb = encode(a, d, **kw).frames, encode(b, d, **kw).frames
            eab = encode(FrameStack(a.frames + b.frames), d, **kw).frames
            e0 = encode(zero, d, **kw).frames
            np.testing.assert_allclose(eab, ea + eb - e0, rtol=1e-12)
            e3 = encode(FrameStack(3.0 * a.frames), d, **kw).frames
            np.testing.assert_allclose(e3, 3.0 * ea, rtol=1e-12)

    def test_albedo_red(self):
        rng = np.random.default_rng(3)
        d = build_dictionary(design_circle_sequence(4), np.eye(3))
        out = encode(self.frames(rng), d, albedo_blend=1.0).frames[0]
        assert not out[..., 1:].any()

    def test_ambient_only_on_object(self):
        d = build_dictionary(design_circle_sequence(3), np.eye(3))
        f = np.zeros((3, 5, 5, 1))
        f[:, 2, 2, 0] = 1.0
        base = encode(FrameStack(f), d).frames[0]
        amb = encode(FrameStack(f), d, ambient_strength=0.5).frames[0]
        diff = amb - base
        assert np.all(diff[2, 2] > 0)
        diff[2, 2] = 0
        assert not diff.any()
        # I^DC is the sum of interframes under full white
        np.testing.assert_allclose(amb[2, 2] - base[2, 2], 0.5 * 3.0 * np.ones(3))

    def test_conservation(self):
        # white dictionary colours: channel sum equals interframe sum times sum of gain * colour
        N = 5
        d = ColorDictionary(np.eye(3), np.full((N, 3), 1 / math.sqrt(3)), np.linspace(0.5, 1.5, N))
        rng = np.random.default_rng(4)
        f = rng.uniform(0, 3, (N, 6, 6, 1))
        out = encode(FrameStack(f), d).frames[0]
        expected = np.einsum("nhw,n->hw", f[..., 0], d.gains / math.sqrt(3))
        np.testing.assert_allclose(out.sum(axis=-1), 3 * expected, rtol=1e-6)

    def test_noise_seeded_and_clamped(self):
        rng = np.random.default_rng(5)
        d = build_dictionary(design_circle_sequence(4), np.eye(3))
        f = self.frames(rng)
        a = encode(f, d, noise_sigma=50.0, seed=3, stream=1).frames
        b = encode(f, d, noise_sigma=50.0, seed=3, stream=1).frames
        c = encode(f, d, noise_sigma=50.0, seed=3, stream=2).frames
        np.testing.assert_array_equal(a, b)
        assert not np.array_equal(a, c)
        assert a.min() >= 0 and (a == 0).any()

    def test_count_mismatch(self):
        d = build_dictionary(design_circle_sequence(3), np.eye(3))
        with pytest.raises(ValueError):
            encode(FrameStack(np.zeros((4, 2, 2, 1))), d)


class TestBackground:
    def test_equal_is_zero(self):
        raw = FrameStack(np.random.default_rng(0).uniform(0, 9, (1, 4, 4, 3)))
        assert not subtract_background(raw, raw).frames.any()

    def test_zero_background_identity(self):
        raw = FrameStack(np.random.default_rng(1).uniform(0, 9, (1, 4, 4, 3)))
        out = subtract_background(raw, FrameStack(np.zeros((1, 4, 4, 3))))
        np.testing.assert_array_equal(out.frames, raw.frames)

    def test_threshold_masks_dark_pixels(self):
        raw = np.zeros((1, 2, 2, 3))
        raw[0, 0, 0] = (0.5, 0.2, 0.1)
        raw[0, 1, 1] = (5.0, 0.2, 0.1)
        out = subtract_background(FrameStack(raw), FrameStack(np.zeros_like(raw)), threshold=1.0).frames
        assert not out[0, 0, 0].any()
        np.testing.assert_array_equal(out[0, 1, 1], raw[0, 1, 1])

    def test_dimension_mismatch(self):
        from strobecap.errors import StructuralError

        with pytest.raises(StructuralError):
            subtract_background(FrameStack(np.zeros((1, 4, 4, 3))), FrameStack(np.zeros((1, 4, 5, 3))))

    def test_backdrop_removed(self):
        cfg = small(background_level=30.0)
        with_bg = simulate(cfg)
        clean = simulate(small())
        for m in range(len(with_bg.rig)):
            np.testing.assert_allclose(with_bg.foreground[m].frames, clean.encoded[m].frames, atol=1e-9)

    def test_backdrop_removed_with_noise(self):
        sigma = 1.0
        noisy = simulate(small(background_level=30.0, noise_sigma=sigma))
        clean = simulate(small())
        err = np.abs(noisy.foreground[0].frames - clean.encoded[0].frames)
        # difference of two noise draws plus the 2-sigma gate
        assert err.mean() < 2 * sigma
        assert np.percentile(err, 99) < 6 * sigma


class TestSimulate:
    def test_shapes_and_heldout_camera(self):
        cfg = small()
        sim = simulate(cfg)
        assert len(sim.rig) == cfg.n_cameras + 1
        assert sim.interframes[0].frames.shape == (cfg.n_strobes, 48, 48, 1)
        assert sim.encoded[0].frames.shape == (1, 48, 48, 3)

    def test_deterministic(self):
        a, b = simulate(small(noise_sigma=2.0)), simulate(small(noise_sigma=2.0))
        for x, y in zip(a.encoded, b.encoded):
            np.testing.assert_array_equal(x.frames, y.frames)

    def test_albedo_dictionary_is_invertible(self):
        cfg = small(albedo_blend=1.0)
        d = make_dictionary(cfg, default_schedule(design_circle_sequence(cfg.n_strobes)), with_albedo=True)
        assert np.all(np.isfinite(d.colors))

    def test_backdrop_gradient(self):
        bg = backdrop(small(background_level=10.0))
        assert bg.shape == (48, 48, 3) and bg.max() <= 10.0 and bg.min() > 0
