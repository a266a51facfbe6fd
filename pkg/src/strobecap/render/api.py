"""Differentiable splatting: monochrome intensity, alpha-normalized depth, and
hand-derived gradients through projection, compositing and the deformation model."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import RenderInputError, StructuralError
from ..scene import MIN_SCALE, GaussianCloud, axis_angle_to_quat, quat_multiply
from . import raster
from .projection import CameraBatch, project, project_backward


@dataclass(eq=False)
class RenderOutput:
    intensity: np.ndarray
    depth: np.ndarray  # 0 where alpha <= ALPHA_VALID
    alpha: np.ndarray

    @property
    def valid(self):
        return self.alpha > raster.ALPHA_VALID


@dataclass(eq=False)
class GradientBuffer:
    mean: np.ndarray
    scale: np.ndarray
    rotation: np.ndarray
    opacity: np.ndarray
    intensity: np.ndarray
    deformation: dict = field(default_factory=dict)

    def as_dict(self):
        out = {"mean": self.mean, "scale": self.scale, "rotation": self.rotation,
               "opacity": self.opacity, "intensity": self.intensity}
        out.update(self.deformation)
        return out


def _check_finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise RenderInputError("non-finite Gaussian parameter")


def depth_sort(gaussians, camera):
    """Stable permutation ordering Gaussians by camera-space z (ties keep input order)."""
    cloud = gaussians if isinstance(gaussians, GaussianCloud) else GaussianCloud.from_gaussians(gaussians)
    z = camera.world_to_camera(cloud.means)[:, 2] if len(cloud) else np.zeros(0)
    return np.argsort(z, kind="stable")


class BatchRender:
    """Forward render of B (Gaussian arrays, camera) pairs sharing one image size.

    Keeps what the reverse pass needs; call :meth:`backward` with upstream
    rasters for intensity and depth.
    """

    def __init__(self, means, scales, quats, opacities, intensities, cameras):
        self.cams = cams = cameras if isinstance(cameras, CameraBatch) else CameraBatch(cameras)
        B = len(cams)
        self.means = np.broadcast_to(means, (B,) + np.shape(means)[-2:])
        G = self.means.shape[1]
        self.scales = np.broadcast_to(scales, (B, G, 3))
        self.quats = np.broadcast_to(quats, (B, G, 4))
        self.opacities = np.ascontiguousarray(np.broadcast_to(opacities, (B, G)), dtype=np.float64)
        self.intensities = np.ascontiguousarray(np.broadcast_to(intensities, (B, G)), dtype=np.float64)
        _check_finite(self.means, self.scales, self.quats, self.opacities, self.intensities)
        self.H, self.W = cams.height, cams.width
        if G == 0:
            self.screen = None
            z = np.zeros((B, self.H, self.W))
            self.intensity, self.depth, self.alpha = z, z.copy(), z.copy()
            return
        self.screen, self.cache = project(self.means, self.scales, self.quats, cams)
        s = self.screen
        self.order = np.argsort(s["depth"], axis=1, kind="stable")
        self._args = (np.ascontiguousarray(s["u"]), np.ascontiguousarray(s["v"]),
                      np.ascontiguousarray(s["conic"]), self.opacities, self.intensities,
                      np.ascontiguousarray(s["depth"]), np.ascontiguousarray(s["bbox"]),
                      np.ascontiguousarray(self.order))
        self.intensity, self.depth, self.alpha = raster.rasterize_forward(*self._args, self.H, self.W)

    def output(self, b=0):
        return RenderOutput(self.intensity[b], self.depth[b], self.alpha[b])

    def backward(self, up_intensity, up_depth=None):
        """Returns (dmeans, dscales, dquats, dopacities, dintensities), each (B, G, ...)."""
        B, G = self.opacities.shape
        if self.screen is None:
            return (np.zeros((B, 0, 3)), np.zeros((B, 0, 3)), np.zeros((B, 0, 4)),
                    np.zeros((B, 0)), np.zeros((B, 0)))
        shape = (B, self.H, self.W)
        up_i = np.ascontiguousarray(np.broadcast_to(up_intensity, shape), dtype=np.float64)
        if up_depth is None:
            up_d = np.zeros(shape)
        else:
            up_d = np.ascontiguousarray(np.broadcast_to(up_depth, shape), dtype=np.float64)
        g = raster.rasterize_backward(*self._args, self.H, self.W, up_i, up_d)
        dmeans, dscales, dquats = project_backward(self.cache, g[..., 0], g[..., 1], g[..., 2:5], g[..., 7])
        return dmeans, dscales, dquats, g[..., 5], g[..., 6]


def render(gaussians, camera):
    """Render a Gaussian list or cloud through ``camera``."""
    cloud = gaussians if isinstance(gaussians, GaussianCloud) else GaussianCloud.from_gaussians(gaussians)
    br = BatchRender(cloud.means[None], cloud.scales[None], cloud.rotations[None],
                     cloud.opacities[None], cloud.intensities[None], [camera])
    return br.output(0)


# --- chain rule through evaluate_at --------------------------------------

def _left_matrix(p):
    w, x, y, z = (p[..., i] for i in range(4))
    return np.stack([
        np.stack([w, -x, -y, -z], -1),
        np.stack([x, w, -z, y], -1),
        np.stack([y, z, w, -x], -1),
        np.stack([z, -y, x, w], -1),
    ], -2)


def _right_matrix(r):
    w, x, y, z = (r[..., i] for i in range(4))
    return np.stack([
        np.stack([w, -x, -y, -z], -1),
        np.stack([x, w, z, -y], -1),
        np.stack([y, -z, w, x], -1),
        np.stack([z, y, -x, w], -1),
    ], -2)


def _axis_angle_quat_jacobian(omega):
    """d q_inc / d omega, shape (..., 4, 3)."""
    theta = np.linalg.norm(omega, axis=-1)
    small = theta < 1e-4
    safe = np.where(small, 1.0, theta)
    half = 0.5 * theta
    s = np.where(small, 0.5 - theta ** 2 / 48.0, np.sin(half) / safe)
    ds_over_theta = np.where(small, -1.0 / 24.0 + theta ** 2 / 960.0,
                             (half * np.cos(half) - np.sin(half)) / safe ** 3)
    J = np.empty(omega.shape[:-1] + (4, 3))
    J[..., 0, :] = -0.5 * s[..., None] * omega
    eye = np.eye(3)
    J[..., 1:, :] = (s[..., None, None] * eye
                     + ds_over_theta[..., None, None] * omega[..., :, None] * omega[..., None, :])
    return J


class DeformedBatch:
    """Gaussians of a DynamicGaussianSet evaluated at several times, with the
    reverse map from per-time Gaussian partials to G(0) and deformation partials."""

    def __init__(self, gset, times):
        self.gset = gset
        self.times = np.asarray(times, dtype=np.float64).reshape(-1)
        cloud, fld = gset.cloud, gset.field
        bases = [fld.basis(t) for t in self.times]
        self.poly = np.stack([b[0] for b in bases])
        self.sin = np.stack([b[1] for b in bases])
        self.cos = np.stack([b[2] for b in bases])
        c = fld.coeffs
        offset = (np.einsum("tl,gld->tgd", self.poly, c["mean_poly"])
                  + np.einsum("tk,gkd->tgd", self.sin, c["mean_sin"])
                  + np.einsum("tk,gkd->tgd", self.cos, c["mean_cos"]))
        self.means = cloud.means[None] + offset
        G = len(cloud)
        S = len(self.times)
        if fld.rotation:
            self.omega = (np.einsum("tl,gld->tgd", self.poly, c["rot_poly"])
                          + np.einsum("tk,gkd->tgd", self.sin, c["rot_sin"])
                          + np.einsum("tk,gkd->tgd", self.cos, c["rot_cos"]))
            self.qinc = axis_angle_to_quat(self.omega)
            self.quats = quat_multiply(self.qinc, np.broadcast_to(cloud.rotations, (S, G, 4)))
        else:
            self.quats = np.broadcast_to(cloud.rotations, (S, G, 4))
        raw_s = np.broadcast_to(cloud.scales, (S, G, 3))
        self.scales = np.maximum(raw_s, MIN_SCALE)
        self.opacities = np.broadcast_to(np.clip(cloud.opacities, 0.0, 1.0), (S, G))
        self.intensities = np.broadcast_to(np.maximum(cloud.intensities, 0.0), (S, G))
        self._pass_scale = cloud.scales >= MIN_SCALE
        self._pass_op = (cloud.opacities >= 0.0) & (cloud.opacities <= 1.0)
        self._pass_int = cloud.intensities >= 0.0

    def backward(self, dmeans, dscales, dquats, dops, dints):
        """Inputs are (S, G, ...) partials w.r.t. the per-time Gaussians; returns a GradientBuffer."""
        fld = self.gset.field
        dmean0 = dmeans.sum(axis=0)
        deform = {
            "mean_poly": np.einsum("tl,tgd->gld", self.poly, dmeans),
            "mean_sin": np.einsum("tk,tgd->gkd", self.sin, dmeans),
            "mean_cos": np.einsum("tk,tgd->gkd", self.cos, dmeans),
        }
        if fld.rotation:
            q0 = self.gset.cloud.rotations
            dq0 = np.einsum("tgji,tgj->gi", _left_matrix(self.qinc), dquats)
            dqinc = np.einsum("gji,tgj->tgi", _right_matrix(q0), dquats)
            domega = np.einsum("tgji,tgj->tgi", _axis_angle_quat_jacobian(self.omega), dqinc)
            deform.update({
                "rot_poly": np.einsum("tl,tgd->gld", self.poly, domega),
                "rot_sin": np.einsum("tk,tgd->gkd", self.sin, domega),
                "rot_cos": np.einsum("tk,tgd->gkd", self.cos, domega),
            })
        else:
            dq0 = dquats.sum(axis=0)
        return GradientBuffer(
            mean=dmean0,
            scale=dscales.sum(axis=0) * self._pass_scale,
            rotation=dq0,
            opacity=dops.sum(axis=0) * self._pass_op,
            intensity=dints.sum(axis=0) * self._pass_int,
            deformation=deform,
        )


def render_with_gradients(gset, camera, t, upstream_intensity, upstream_depth=None):
    """Render ``gset`` at time ``t`` and back-propagate upstream pixel partials.

    The implied scalar loss is sum(up_I * intensity) + sum(up_Z * depth).
    """
    up_i = np.asarray(upstream_intensity, dtype=np.float64)
    if up_i.shape != (camera.height, camera.width):
        raise RenderInputError(f"upstream raster {up_i.shape} does not match camera "
                               f"({camera.height}, {camera.width})")
    if upstream_depth is not None and np.shape(upstream_depth) != up_i.shape:
        raise RenderInputError("upstream depth raster does not match camera")
    if len(gset.cloud) != gset.field.n:
        raise StructuralError("Gaussian and deformation counts differ")
    db = DeformedBatch(gset, [t])
    br = BatchRender(db.means, db.scales, db.quats, db.opacities, db.intensities, [camera])
    up_d = None if upstream_depth is None else np.asarray(upstream_depth, dtype=np.float64)[None]
    grads = db.backward(*br.backward(up_i[None], up_d))
    return br.output(0), grads
