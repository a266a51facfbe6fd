"""Synthetic ground truth: dynamic scenes, camera rigs, per-strobe interframes
and the color-encoded low-speed frames a strobed rig records."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .errors import StructuralError
from .render import BatchRender, CameraBatch
from .scene import (Camera, CameraRig, DeformationField, DynamicGaussianSet, FrameStack,
                    GaussianCloud, evaluate_at, quat_multiply, axis_angle_to_quat)
from .strobe import build_dictionary, design_circle_sequence
from .scene import default_schedule

SCENE_KINDS = ("line-mover", "rotator", "tumbling-cluster")

# LED responses with mild cross-talk, rows c_R, c_G, c_B
DEFAULT_PRIMARIES = ((1.0, 0.18, 0.04), (0.15, 0.95, 0.22), (0.03, 0.2, 1.0))


@dataclass
class SimConfig:
    n_strobes: int = 10
    n_cameras: int = 8
    width: int = 128
    height: int = 128
    exposure: float = 1.0 / 60.0
    ambient_strength: float = 0.0
    albedo_blend: float = 0.0
    motion_variance: float = 0.0
    noise_sigma: float = 0.0
    rng_seed: int = 0
    scene_kind: str = "line-mover"
    n_gaussians: int = 50
    object_radius: float = 0.15
    travel: float = 1.0
    gaussian_intensity: float = 40.0
    background_level: float = 0.0
    rig_radius: float = 4.0
    fov_deg: float = 40.0
    arc_deg: float = 120.0
    primaries: tuple = DEFAULT_PRIMARIES

    def __post_init__(self):
        if self.rng_seed is None:
            raise ValueError("rng_seed is mandatory")
        if self.n_strobes < 1 or self.n_cameras < 1:
            raise ValueError("n_strobes and n_cameras must be positive")
        if not 0.0 <= self.ambient_strength <= 1.0:
            raise ValueError("ambient_strength must lie in [0, 1]")
        if not 0.0 <= self.albedo_blend <= 1.0:
            raise ValueError("albedo_blend must lie in [0, 1]")
        if self.motion_variance < 0 or self.noise_sigma < 0:
            raise ValueError("motion_variance and noise_sigma must be non-negative")
        if self.scene_kind not in SCENE_KINDS:
            raise ValueError(f"unknown scene kind {self.scene_kind!r}")
        self.primaries = tuple(tuple(float(v) for v in row) for row in self.primaries)

    def to_dict(self):
        d = asdict(self)
        d["primaries"] = [list(r) for r in self.primaries]
        return d

    @classmethod
    def from_dict(cls, doc):
        return cls(**doc)


class KeyframedScene:
    """Ground truth stored as explicit Gaussian clouds at fixed instants.

    Used when a trajectory is outside the reconstruction's deformation family.
    """

    def __init__(self, times, clouds):
        self.times = np.asarray(times, dtype=np.float64).reshape(-1)
        self.clouds = list(clouds)
        if len(self.times) != len(self.clouds):
            raise StructuralError("one cloud per keyframe time required")

    def at(self, t):
        i = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[i] - t) > 1e-9 * max(1.0, abs(t)):
            raise ValueError(f"no keyframe at t={t}")
        return self.clouds[i]


def truth_at(truth, t):
    if isinstance(truth, KeyframedScene):
        return truth.at(t)
    return evaluate_at(truth, t)


def _cluster(rng, n, radius, intensity):
    # rejection-free ball sampling
    d = rng.normal(size=(n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    r = radius * rng.uniform(size=(n, 1)) ** (1.0 / 3.0)
    means = d * r
    scales = radius * rng.uniform(0.25, 0.45, size=(n, 3))
    quats = rng.normal(size=(n, 4))
    quats /= np.linalg.norm(quats, axis=1, keepdims=True)
    opacities = rng.uniform(0.6, 0.9, size=n)
    intensities = intensity * rng.uniform(0.8, 1.2, size=n)
    return GaussianCloud(means, scales, quats, opacities, intensities)


def _keyframe_times(config):
    n = config.n_strobes
    return config.exposure / (2 * n) + config.exposure * np.arange(n) / n


def make_scene(kind, config):
    """Ground-truth scene: a DynamicGaussianSet when the motion is representable
    by the deformation model, else a KeyframedScene at the strobe centers."""
    if kind not in SCENE_KINDS:
        raise ValueError(f"unknown scene kind {kind!r}; expected one of {SCENE_KINDS}")
    rng = np.random.default_rng(config.rng_seed)
    T = config.exposure
    base = _cluster(rng, config.n_gaussians, config.object_radius, config.gaussian_intensity)
    times = _keyframe_times(config)

    if kind == "line-mover":
        start = np.array([-0.5 * config.travel, 0.0, 0.0])
        velocity = np.array([config.travel / T, 0.0, 0.0])
        base.means += start
        fld = DeformationField(len(base), T)
        fld.coeffs["mean_poly"][:, 0, :] = velocity
        gset = DynamicGaussianSet(base, fld)
        if config.motion_variance == 0:
            return gset
        jitter = rng.uniform(-config.motion_variance, config.motion_variance, size=len(times))
        clouds = []
        for t, dy in zip(times, jitter):
            c = evaluate_at(gset, t)
            c.means[:, 1] += dy
            clouds.append(c)
        return KeyframedScene(times, clouds)

    if kind == "rotator":
        omega = angular_speed(config)
        orbit = 0.4
        base.scales *= 0.6
        base.means *= 0.6
        clouds = []
        for t in times:
            c = base.copy()
            ang = omega * t
            c.means += (orbit * math.cos(ang), orbit * math.sin(ang), 0.0)
            clouds.append(c)
        return KeyframedScene(times, clouds)

    # tumbling cluster: spins about its own center while drifting along x
    spin = np.array([0.3, 1.0, 0.2])
    spin = spin / np.linalg.norm(spin) * (math.pi / T)
    clouds = []
    for t in times:
        q = axis_angle_to_quat(spin * t)
        R = _quat_rot(q)
        c = base.copy()
        c.means = base.means @ R.T + (config.travel * (t / T - 0.5), 0.0, 0.0)
        c.rotations = quat_multiply(np.broadcast_to(q, base.rotations.shape), base.rotations)
        clouds.append(c)
    return KeyframedScene(times, clouds)


def angular_speed(config):
    """Rotator angular speed: three quarters of a turn per exposure."""
    return 1.5 * math.pi / config.exposure


def _quat_rot(q):
    from .scene import quat_to_rotmat

    return quat_to_rotmat(q)


def make_rig(config, n_cameras=None, novel=True):
    """Fitting cameras on a horizontal arc facing the origin from -z, plus an
    optional held-out novel view appended last."""
    m = config.n_cameras if n_cameras is None else n_cameras
    half = math.radians(config.arc_deg) / 2
    az = np.zeros(1) if m == 1 else np.linspace(-half, half, m)
    cams = []
    for i, a in enumerate(az):
        el = math.radians(12.0 if i % 2 == 0 else -12.0) if m > 1 else 0.0
        cams.append(_ring_camera(config, a, el))
    if novel:
        cams.append(_ring_camera(config, math.radians(17.0), math.radians(6.0)))
    return CameraRig(cams, reference=0)


def _ring_camera(config, azimuth, elevation):
    r = config.rig_radius
    eye = (r * math.cos(elevation) * math.sin(azimuth), r * math.sin(elevation),
           -r * math.cos(elevation) * math.cos(azimuth))
    return Camera.look_at(eye, (0.0, 0.0, 0.0), (0.0, -1.0, 0.0), config.fov_deg,
                          config.width, config.height)


def make_schedule(config):
    return default_schedule(design_circle_sequence(config.n_strobes), exposure=config.exposure)


def albedo_factor(albedo_blend):
    return (1.0 - albedo_blend) * np.ones(3) + albedo_blend * np.array([1.0, 0.0, 0.0])


def make_dictionary(config, schedule, with_albedo=False):
    """Dictionary from the configured LED primaries; optionally as seen on the
    simulated albedo (what calibration on the object itself would measure)."""
    P = np.asarray(config.primaries, dtype=np.float64)
    if with_albedo:
        P = P * albedo_factor(config.albedo_blend)[None, :]
        # keep the matrix invertible at a fully red albedo
        P = P + 1e-3 * np.eye(3)
    return build_dictionary(schedule, P)


def synthesize_interframes(truth, rig, schedule):
    """Per-camera stacks of N monochrome interframes rendered at the strobe centers."""
    times = schedule.centers
    clouds = [truth_at(truth, t) for t in times]
    N, M = len(times), len(rig)
    G = len(clouds[0])
    stack = lambda attr: np.stack([getattr(c, attr) for c in clouds])
    rep = lambda a: np.tile(a, (M,) + (1,) * (a.ndim - 1))
    cams = CameraBatch([rig[m] for m in range(M) for _ in range(N)])
    if G == 0:
        imgs = np.zeros((M * N, rig[0].height, rig[0].width))
    else:
        br = BatchRender(rep(stack("means")), rep(stack("scales")), rep(stack("rotations")),
                         rep(stack("opacities")), rep(stack("intensities")), cams)
        imgs = br.intensity
    imgs = imgs.reshape(M, N, rig[0].height, rig[0].width)
    return [FrameStack(imgs[m][..., None], times) for m in range(M)]


def white_color(dictionary):
    """Camera response to all three LEDs at full intensity."""
    return np.asarray(dictionary.primaries).sum(axis=0)


def encode(interframes, dictionary, albedo_blend=0.0, ambient_strength=0.0, noise_sigma=0.0,
           seed=0, stream=0, background=None):
    """Mix N interframes into one RGB frame with the dictionary's unnormalized colors.

    Ambient light adds ``ambient_strength`` times the scene under constant
    white light; it only touches pixels the object covers. ``background``
    (H, W, 3) is added before noise when given. Noise is i.i.d. Gaussian,
    clamped at zero, drawn from the stream keyed by (seed, stream).
    """
    frames = np.asarray(interframes.frames, dtype=np.float64)[..., 0]
    if len(frames) != len(dictionary):
        raise ValueError(f"{len(frames)} interframes but {len(dictionary)} dictionary colors")
    alb = albedo_factor(albedo_blend)
    mix = dictionary.unnormalized * alb[None, :]
    out = np.einsum("nhw,nc->hwc", frames, mix)
    if ambient_strength:
        dc = frames.sum(axis=0)
        out = out + ambient_strength * dc[..., None] * (white_color(dictionary) * alb)[None, None, :]
    if background is not None:
        out = out + background
    if noise_sigma > 0:
        rng = np.random.default_rng([int(seed), int(stream)])
        out = out + rng.normal(scale=noise_sigma, size=out.shape)
    out = np.maximum(out, 0.0)
    return FrameStack(out[None], [0.0])


def subtract_background(raw, background, threshold=0.0):
    """max(raw - background, 0), then zero pixels whose every channel is below ``threshold``."""
    r = np.asarray(raw.frames, dtype=np.float64)
    b = np.asarray(background.frames, dtype=np.float64)
    if r.shape[1:] != b.shape[1:]:
        raise StructuralError(f"raw {r.shape} and background {b.shape} differ in size")
    if len(b) == 1 and len(r) > 1:
        b = np.broadcast_to(b, r.shape)
    elif len(b) != len(r):
        raise StructuralError("background frame count must be 1 or match the raw stack")
    fg = np.maximum(r - b, 0.0)
    if threshold > 0:
        dark = np.all(fg < threshold, axis=-1)
        fg[dark] = 0.0
    return FrameStack(fg, raw.timestamps)


def background_threshold(noise_sigma):
    return 2.0 * noise_sigma


def backdrop(config):
    """Static background image: a smooth dim gradient at ``background_level``."""
    h, w = config.height, config.width
    yy, xx = np.mgrid[0:h, 0:w]
    ramp = 0.5 + 0.5 * (xx / max(w - 1, 1)) * (yy / max(h - 1, 1))
    return config.background_level * ramp[..., None] * np.array([1.0, 0.9, 0.8])[None, None, :]


@dataclass
class Simulation:
    config: SimConfig
    truth: object
    rig: CameraRig
    schedule: object
    dictionary: object
    interframes: list
    encoded: list
    backgrounds: list
    foreground: list


def simulate(config, kind=None, rig=None, schedule=None):
    """Full forward pipeline for one low-speed exposure."""
    kind = kind or config.scene_kind
    truth = make_scene(kind, config)
    rig = rig or make_rig(config)
    schedule = schedule or make_schedule(config)
    dictionary = make_dictionary(config, schedule)
    inter = synthesize_interframes(truth, rig, schedule)
    bg = backdrop(config) if config.background_level > 0 else None
    encoded, backgrounds, foreground = [], [], []
    tau = background_threshold(config.noise_sigma)
    for m, stack in enumerate(inter):
        raw = encode(stack, dictionary, config.albedo_blend, config.ambient_strength,
                     config.noise_sigma, seed=config.rng_seed, stream=2 * m + 1, background=bg)
        bgi = np.zeros((config.height, config.width, 3)) if bg is None else bg
        if config.noise_sigma > 0:
            rng = np.random.default_rng([config.rng_seed, 2 * m + 2])
            bgi = np.maximum(bgi + rng.normal(scale=config.noise_sigma, size=bgi.shape), 0.0)
        bstack = FrameStack(bgi[None], [0.0])
        encoded.append(raw)
        backgrounds.append(bstack)
        foreground.append(subtract_background(raw, bstack, tau))
    return Simulation(config, truth, rig, schedule, dictionary, inter, encoded, backgrounds, foreground)
