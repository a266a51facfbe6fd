"""Shared domain types: Gaussians and their deformation, cameras, strobe
schedules, color dictionaries and frame stacks.

Gaussian sets are stored as arrays (one row per Gaussian) because every
consumer is vectorized; the per-Gaussian ``Gaussian`` record is a view for
inspection and serialization.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import StructuralError

MIN_SCALE = 1e-6
POLY_DEGREE = 3
FOURIER_HARMONICS = 2


def _vec(x, n, name):
    a = np.asarray(x, dtype=np.float64)
    if a.shape != (n,):
        raise StructuralError(f"{name} must have shape ({n},), got {a.shape}")
    return a


@dataclass(frozen=True, eq=False)
class Gaussian:
    mean: np.ndarray
    scale: np.ndarray
    rotation: np.ndarray  # (w, x, y, z)
    opacity: float
    intensity: float

    def __post_init__(self):
        object.__setattr__(self, "mean", _vec(self.mean, 3, "mean"))
        object.__setattr__(self, "scale", _vec(self.scale, 3, "scale"))
        object.__setattr__(self, "rotation", _vec(self.rotation, 4, "rotation"))
        object.__setattr__(self, "opacity", float(self.opacity))
        object.__setattr__(self, "intensity", float(self.intensity))


class GaussianCloud:
    """Structure-of-arrays container for G Gaussians."""

    def __init__(self, means, scales, rotations, opacities, intensities):
        self.means = np.array(means, dtype=np.float64).reshape(-1, 3)
        n = len(self.means)
        self.scales = np.array(scales, dtype=np.float64).reshape(n, 3)
        self.rotations = np.array(rotations, dtype=np.float64).reshape(n, 4)
        self.opacities = np.array(opacities, dtype=np.float64).reshape(n)
        self.intensities = np.array(intensities, dtype=np.float64).reshape(n)

    @classmethod
    def empty(cls):
        return cls(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 4)), np.zeros(0), np.zeros(0))

    @classmethod
    def from_gaussians(cls, gaussians):
        gaussians = list(gaussians)
        if not gaussians:
            return cls.empty()
        return cls(
            [g.mean for g in gaussians],
            [g.scale for g in gaussians],
            [g.rotation for g in gaussians],
            [g.opacity for g in gaussians],
            [g.intensity for g in gaussians],
        )

    def __len__(self):
        return len(self.means)

    def __getitem__(self, i):
        return Gaussian(self.means[i], self.scales[i], self.rotations[i],
                        self.opacities[i], self.intensities[i])

    def to_list(self):
        return [self[i] for i in range(len(self))]

    def copy(self):
        return GaussianCloud(self.means, self.scales, self.rotations, self.opacities, self.intensities)

    def subset(self, idx):
        return GaussianCloud(self.means[idx], self.scales[idx], self.rotations[idx],
                             self.opacities[idx], self.intensities[idx])

    def clamp_(self):
        """Re-enforce the per-Gaussian invariants in place."""
        np.maximum(self.scales, MIN_SCALE, out=self.scales)
        np.clip(self.opacities, 0.0, 1.0, out=self.opacities)
        np.maximum(self.intensities, 0.0, out=self.intensities)
        return self

    def normalize_rotations_(self):
        norms = np.linalg.norm(self.rotations, axis=1, keepdims=True)
        bad = norms[:, 0] < 1e-12
        self.rotations[bad] = (1.0, 0.0, 0.0, 0.0)
        norms[bad] = 1.0
        self.rotations /= norms
        return self

    def is_finite(self):
        return all(np.all(np.isfinite(a)) for a in
                   (self.means, self.scales, self.rotations, self.opacities, self.intensities))

    def equals(self, other):
        return (len(self) == len(other)
                and np.array_equal(self.means, other.means)
                and np.array_equal(self.scales, other.scales)
                and np.array_equal(self.rotations, other.rotations)
                and np.array_equal(self.opacities, other.opacities)
                and np.array_equal(self.intensities, other.intensities))


# --- quaternion helpers --------------------------------------------------

def quat_multiply(p, q):
    """Hamilton product of (..., 4) arrays in (w, x, y, z) order."""
    pw, px, py, pz = np.moveaxis(p, -1, 0)
    qw, qx, qy, qz = np.moveaxis(q, -1, 0)
    return np.stack([
        pw * qw - px * qx - py * qy - pz * qz,
        pw * qx + px * qw + py * qz - pz * qy,
        pw * qy - px * qz + py * qw + pz * qx,
        pw * qz + px * qy - py * qx + pz * qw,
    ], axis=-1)


def axis_angle_to_quat(omega):
    """Unit quaternion for rotation vector(s) ``omega`` (..., 3)."""
    omega = np.asarray(omega, dtype=np.float64)
    theta = np.linalg.norm(omega, axis=-1)
    half = 0.5 * theta
    small = theta < 1e-4
    safe = np.where(small, 1.0, theta)
    # sin(theta/2)/theta with a series near zero
    s = np.where(small, 0.5 - theta * theta / 48.0, np.sin(half) / safe)
    return np.concatenate([np.cos(half)[..., None], s[..., None] * omega], axis=-1)


def quat_to_rotmat(q):
    q = np.asarray(q, dtype=np.float64)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = np.moveaxis(q, -1, 0)
    return np.stack([
        np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], -1),
        np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], -1),
        np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], -1),
    ], -2)


# --- deformation ---------------------------------------------------------

@dataclass(eq=False)
class DDDMDeformation:
    """Per-Gaussian record view of a dual-domain (polynomial + Fourier) deformation.

    ``poly_coeffs[attr]`` has shape (L, 3) for degrees 1..L and
    ``fourier_coeffs[attr]`` holds ``{"sin": (K, 3), "cos": (K, 3)}``.
    """

    poly_coeffs: dict
    fourier_coeffs: dict
    base_period: float


def deformation_basis(t, base_period, degree=POLY_DEGREE, harmonics=FOURIER_HARMONICS):
    """Return (poly, sin, cos) basis weights at time ``t``.

    Polynomial terms are t**l for l = 1..L. Fourier terms are stored as
    deviations from their t=0 value, so the cosine basis is cos(.) - 1.
    """
    t = float(t)
    poly = np.array([t ** l for l in range(1, degree + 1)], dtype=np.float64)
    k = np.arange(1, harmonics + 1, dtype=np.float64)
    phase = 2.0 * math.pi * k * t / base_period
    return poly, np.sin(phase), np.cos(phase) - 1.0


class DeformationField:
    """Deformation coefficients for a whole set, aligned with a GaussianCloud.

    Mean offsets always; rotation increments (axis-angle) only when
    ``rotation`` is enabled.
    """

    def __init__(self, n, base_period, degree=POLY_DEGREE, harmonics=FOURIER_HARMONICS,
                 rotation=False, coeffs=None):
        if base_period <= 0:
            raise ValueError("base_period must be positive")
        self.n = int(n)
        self.base_period = float(base_period)
        self.degree = int(degree)
        self.harmonics = int(harmonics)
        self.rotation = bool(rotation)
        shapes = self.coeff_shapes()
        self.coeffs = {}
        for name, shape in shapes.items():
            if coeffs is not None and name in coeffs:
                arr = np.array(coeffs[name], dtype=np.float64)
                if arr.shape != shape:
                    raise StructuralError(f"deformation '{name}' has shape {arr.shape}, expected {shape}")
            else:
                arr = np.zeros(shape)
            self.coeffs[name] = arr

    def coeff_shapes(self):
        n, L, K = self.n, self.degree, self.harmonics
        shapes = {"mean_poly": (n, L, 3), "mean_sin": (n, K, 3), "mean_cos": (n, K, 3)}
        if self.rotation:
            shapes.update({"rot_poly": (n, L, 3), "rot_sin": (n, K, 3), "rot_cos": (n, K, 3)})
        return shapes

    def copy(self):
        return DeformationField(self.n, self.base_period, self.degree, self.harmonics,
                                self.rotation, {k: v.copy() for k, v in self.coeffs.items()})

    def subset(self, idx):
        idx = np.asarray(idx)
        count = int(idx.sum()) if idx.dtype == bool else len(idx)
        return DeformationField(count, self.base_period, self.degree, self.harmonics,
                                self.rotation, {k: v[idx] for k, v in self.coeffs.items()})

    def basis(self, t):
        return deformation_basis(t, self.base_period, self.degree, self.harmonics)

    def _offset(self, prefix, t):
        poly, s, c = self.basis(t)
        return (np.einsum("l,gld->gd", poly, self.coeffs[prefix + "_poly"])
                + np.einsum("k,gkd->gd", s, self.coeffs[prefix + "_sin"])
                + np.einsum("k,gkd->gd", c, self.coeffs[prefix + "_cos"]))

    def mean_offset(self, t):
        return self._offset("mean", t)

    def rotation_offset(self, t):
        return self._offset("rot", t) if self.rotation else None

    def records(self):
        out = []
        for i in range(self.n):
            poly = {"mean": self.coeffs["mean_poly"][i]}
            four = {"mean": {"sin": self.coeffs["mean_sin"][i], "cos": self.coeffs["mean_cos"][i]}}
            if self.rotation:
                poly["rotation"] = self.coeffs["rot_poly"][i]
                four["rotation"] = {"sin": self.coeffs["rot_sin"][i], "cos": self.coeffs["rot_cos"][i]}
            out.append(DDDMDeformation(poly, four, self.base_period))
        return out

    @classmethod
    def from_records(cls, records, base_period=None):
        records = list(records)
        if not records:
            return cls(0, base_period or 1.0)
        first = records[0]
        period = first.base_period if base_period is None else base_period
        L = np.asarray(first.poly_coeffs["mean"]).shape[0]
        K = np.asarray(first.fourier_coeffs["mean"]["sin"]).shape[0]
        rot = "rotation" in first.poly_coeffs
        coeffs = {
            "mean_poly": [r.poly_coeffs["mean"] for r in records],
            "mean_sin": [r.fourier_coeffs["mean"]["sin"] for r in records],
            "mean_cos": [r.fourier_coeffs["mean"]["cos"] for r in records],
        }
        if rot:
            coeffs.update({
                "rot_poly": [r.poly_coeffs["rotation"] for r in records],
                "rot_sin": [r.fourier_coeffs["rotation"]["sin"] for r in records],
                "rot_cos": [r.fourier_coeffs["rotation"]["cos"] for r in records],
            })
        return cls(len(records), period, L, K, rot, coeffs)


class DynamicGaussianSet:
    """Initial Gaussian state G(0) plus per-Gaussian deformation D(t)."""

    def __init__(self, cloud, field):
        if len(cloud) != field.n:
            raise StructuralError(f"{len(cloud)} Gaussians but {field.n} deformations")
        self.cloud = cloud
        self.field = field

    @classmethod
    def static(cls, cloud, base_period, rotation=False):
        return cls(cloud, DeformationField(len(cloud), base_period, rotation=rotation))

    def __len__(self):
        return len(self.cloud)

    @property
    def gaussians(self):
        return self.cloud.to_list()

    @property
    def deformations(self):
        return self.field.records()

    def copy(self):
        return DynamicGaussianSet(self.cloud.copy(), self.field.copy())

    def evaluate_at(self, t):
        return evaluate_at(self, t)


def evaluate_at(gset, t):
    """Gaussians at time ``t``: G(0) + D(t), re-clamped."""
    if len(gset.cloud) != gset.field.n:
        raise StructuralError("Gaussian and deformation counts differ")
    period = gset.field.base_period
    if t < 0 or t > period:
        warnings.warn(f"t={t} outside deformation period [0, {period}]", stacklevel=2)
    out = gset.cloud.copy()
    out.means += gset.field.mean_offset(t)
    if gset.field.rotation:
        inc = axis_angle_to_quat(gset.field.rotation_offset(t))
        out.rotations = quat_multiply(inc, out.rotations)
    return out.clamp_()


# --- cameras -------------------------------------------------------------

@dataclass(eq=False)
class Camera:
    """Pinhole camera. ``rotation``/``translation`` map world to camera
    coordinates (x right, y down, z forward)."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    color_transform: np.ndarray = field(default_factory=lambda: np.eye(3))

    def __post_init__(self):
        self.rotation = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.array(self.translation, dtype=np.float64).reshape(3)
        self.color_transform = np.array(self.color_transform, dtype=np.float64).reshape(3, 3)
        self.width, self.height = int(self.width), int(self.height)
        self.validate()

    def validate(self):
        R = self.rotation
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-6) or abs(np.linalg.det(R) - 1.0) > 1e-6:
            raise StructuralError("camera rotation must be orthonormal with determinant +1")
        if self.fx <= 0 or self.fy <= 0:
            raise StructuralError("focal lengths must be positive")
        if not (0 <= self.cx <= self.width and 0 <= self.cy <= self.height):
            raise StructuralError("principal point outside the image")

    @property
    def center(self):
        return -self.rotation.T @ self.translation

    def world_to_camera(self, points):
        return np.asarray(points) @ self.rotation.T + self.translation

    @classmethod
    def look_at(cls, eye, target, up, fov_deg, width, height, **kw):
        eye, target, up = (np.asarray(v, dtype=np.float64) for v in (eye, target, up))
        z = target - eye
        z /= np.linalg.norm(z)
        x = np.cross(z, up)
        x /= np.linalg.norm(x)
        y = np.cross(z, x)
        R = np.stack([x, y, z])
        f = 0.5 * width / math.tan(math.radians(fov_deg) / 2)
        return cls(f, f, width / 2, height / 2, width, height, R, -R @ eye, **kw)


@dataclass(eq=False)
class CameraRig:
    cameras: list
    reference: int = 0

    def __post_init__(self):
        if not 0 <= self.reference < max(len(self.cameras), 1):
            raise StructuralError("reference camera index out of range")

    def __len__(self):
        return len(self.cameras)

    def __getitem__(self, i):
        return self.cameras[i]

    def subset(self, indices):
        indices = list(indices)
        ref = indices.index(self.reference) if self.reference in indices else 0
        return CameraRig([self.cameras[i] for i in indices], ref)


# --- strobing ------------------------------------------------------------

@dataclass(eq=False)
class StrobeSchedule:
    n_strobes: int
    exposure: float
    strobe_duration: float
    strobe_times: np.ndarray
    intensities: np.ndarray
    sync_margin: float
    pwm: object = None

    def __post_init__(self):
        self.strobe_times = np.array(self.strobe_times, dtype=np.float64).reshape(-1)
        self.intensities = np.array(self.intensities, dtype=np.float64).reshape(-1, 3)
        if len(self.strobe_times) != self.n_strobes or len(self.intensities) != self.n_strobes:
            raise StructuralError("strobe_times and intensities must have n_strobes entries")
        if np.any(self.intensities < 0) or np.any(self.intensities > 1):
            raise StructuralError("strobe intensities must lie in [0, 1]")
        tol = 1e-12 * max(self.exposure, 1.0)
        starts = self.strobe_times
        ends = starts + self.strobe_duration
        if np.any(starts < -tol) or np.any(ends > self.exposure + tol):
            raise StructuralError("strobe intervals must lie within [0, exposure]")
        order = np.argsort(starts)
        if np.any(starts[order][1:] < ends[order][:-1] - tol):
            raise StructuralError("strobe intervals overlap")

    @property
    def centers(self):
        """Instants at which each strobe is rendered (interval midpoints)."""
        return self.strobe_times + 0.5 * self.strobe_duration


def default_schedule(intensities, exposure=1.0 / 60.0, strobe_duration=None, pwm=None):
    """Equally spaced strobes with a T_exp/(2N) margin at both exposure ends.

    Strobe centers sit at margin + n*T_exp/N. ``strobe_duration`` defaults
    to one tenth of the strobe spacing.
    """
    intensities = np.asarray(intensities, dtype=np.float64).reshape(-1, 3)
    n = len(intensities)
    if n < 1:
        raise ValueError("need at least one strobe")
    spacing = exposure / n
    margin = exposure / (2 * n)
    if strobe_duration is None:
        strobe_duration = 0.1 * spacing
    if strobe_duration > 2 * margin:
        raise ValueError("strobe duration exceeds the strobe spacing")
    starts = margin - strobe_duration / 2 + spacing * np.arange(n)
    return StrobeSchedule(n, exposure, strobe_duration, starts, intensities, margin, pwm)


@dataclass(eq=False)
class ColorDictionary:
    primaries: np.ndarray  # rows: c_R, c_G, c_B
    colors: np.ndarray     # (N, 3), unit rows
    gains: np.ndarray      # (N,)

    def __post_init__(self):
        self.primaries = np.array(self.primaries, dtype=np.float64).reshape(3, 3)
        self.colors = np.array(self.colors, dtype=np.float64).reshape(-1, 3)
        self.gains = np.array(self.gains, dtype=np.float64).reshape(-1)
        if len(self.gains) != len(self.colors):
            raise StructuralError("gains and colors differ in length")

    def __len__(self):
        return len(self.colors)

    @property
    def unnormalized(self):
        """Per-strobe camera colors scaled back by their gains, shape (N, 3)."""
        return self.gains[:, None] * self.colors


# --- frames --------------------------------------------------------------

class FrameStack:
    """Ordered rasters of shape (frames, height, width, channels)."""

    def __init__(self, frames, timestamps=None):
        frames = np.asarray(frames)
        if frames.ndim == 3:
            frames = frames[..., None]
        if frames.ndim != 4:
            raise StructuralError(f"frames must be (F, H, W, C), got shape {frames.shape}")
        if frames.shape[-1] not in (1, 3):
            raise StructuralError("channels must be 1 or 3")
        self.frames = frames
        if timestamps is None:
            timestamps = np.zeros(len(frames))
        self.timestamps = np.asarray(timestamps, dtype=np.float64).reshape(-1)
        if len(self.timestamps) != len(frames):
            raise StructuralError("one timestamp per frame required")

    @property
    def width(self):
        return self.frames.shape[2]

    @property
    def height(self):
        return self.frames.shape[1]

    @property
    def channels(self):
        return self.frames.shape[3]

    def __len__(self):
        return len(self.frames)

    def validate(self):
        if not np.all(np.isfinite(self.frames)):
            raise StructuralError("frame stack contains NaN or Inf")
        if np.any(self.frames < 0):
            raise StructuralError("frame stack contains negative values")
        return self
