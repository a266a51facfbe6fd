"""EWA projection of 3D Gaussians to screen-space conics, batched over renders.

All arrays carry a leading render axis B and a Gaussian axis G. The
backward pass maps screen-space partials (mean2d, conic, depth) back to
world means, scales and unnormalized quaternions.
"""

import math

import numpy as np

NEAR = 0.01
MAX_OFF_AXIS = math.tan(math.radians(60.0))
DILATION = 0.3
TRUNCATION_SIGMAS = 3.0


def _rotmat(qn):
    w, x, y, z = (qn[..., i] for i in range(4))
    R = np.empty(qn.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def _rotmat_backward(qn, dR):
    w, x, y, z = (qn[..., i] for i in range(4))
    G = dR
    dw = 2 * (-z * G[..., 0, 1] + y * G[..., 0, 2] + z * G[..., 1, 0]
              - x * G[..., 1, 2] - y * G[..., 2, 0] + x * G[..., 2, 1])
    dx = 2 * (y * G[..., 0, 1] + z * G[..., 0, 2] + y * G[..., 1, 0] - 2 * x * G[..., 1, 1]
              - w * G[..., 1, 2] + z * G[..., 2, 0] + w * G[..., 2, 1] - 2 * x * G[..., 2, 2])
    dy = 2 * (-2 * y * G[..., 0, 0] + x * G[..., 0, 1] + w * G[..., 0, 2] + x * G[..., 1, 0]
              + z * G[..., 1, 2] - w * G[..., 2, 0] + z * G[..., 2, 1] - 2 * y * G[..., 2, 2])
    dz = 2 * (-2 * z * G[..., 0, 0] - w * G[..., 0, 1] + x * G[..., 0, 2] + w * G[..., 1, 0]
              - 2 * z * G[..., 1, 1] + y * G[..., 1, 2] + x * G[..., 2, 0] + y * G[..., 2, 1])
    return np.stack([dw, dx, dy, dz], axis=-1)


class CameraBatch:
    """Per-render camera parameters stacked along B."""

    def __init__(self, cameras):
        cameras = list(cameras)
        sizes = {(c.width, c.height) for c in cameras}
        if len(sizes) != 1:
            raise ValueError("all cameras in a batch must share the image size")
        (self.width, self.height), = sizes
        self.R = np.stack([c.rotation for c in cameras])
        self.t = np.stack([c.translation for c in cameras])
        self.fx = np.array([c.fx for c in cameras], dtype=np.float64)
        self.fy = np.array([c.fy for c in cameras], dtype=np.float64)
        self.cx = np.array([c.cx for c in cameras], dtype=np.float64)
        self.cy = np.array([c.cy for c in cameras], dtype=np.float64)

    def __len__(self):
        return len(self.fx)


def project(means, scales, quats, cams):
    """Project (B, G, .) Gaussian parameters; returns a dict of screen-space arrays plus a cache."""
    Rw = cams.R
    xc = np.einsum("bij,bgj->bgi", Rw, means) + cams.t[:, None, :]
    x, y, z = xc[..., 0], xc[..., 1], xc[..., 2]
    zs = np.where(z > NEAR, z, 1.0)
    visible = (z > NEAR) & (np.hypot(x, y) <= MAX_OFF_AXIS * zs)

    fx = cams.fx[:, None]
    fy = cams.fy[:, None]
    u = fx * x / zs + cams.cx[:, None]
    v = fy * y / zs + cams.cy[:, None]

    qnorm = np.linalg.norm(quats, axis=-1, keepdims=True)
    qn = quats / qnorm
    Rg = _rotmat(qn)
    M = Rg * scales[..., None, :]
    Sig = M @ np.swapaxes(M, -1, -2)

    J = np.zeros(xc.shape[:-1] + (2, 3))
    J[..., 0, 0] = fx / zs
    J[..., 0, 2] = -fx * x / (zs * zs)
    J[..., 1, 1] = fy / zs
    J[..., 1, 2] = -fy * y / (zs * zs)
    T = J @ Rw[:, None]
    S2 = T @ Sig @ np.swapaxes(T, -1, -2)
    a = S2[..., 0, 0] + DILATION
    b = S2[..., 0, 1]
    c = S2[..., 1, 1] + DILATION
    det = a * c - b * b
    conic = np.stack([c / det, -b / det, a / det], axis=-1)

    rx = TRUNCATION_SIGMAS * np.sqrt(a)
    ry = TRUNCATION_SIGMAS * np.sqrt(c)
    W, H = cams.width, cams.height
    with np.errstate(invalid="ignore"):
        x0 = np.clip(np.ceil(u - rx), 0, W).astype(np.int64)
        x1 = np.clip(np.floor(u + rx), -1, W - 1).astype(np.int64)
        y0 = np.clip(np.ceil(v - ry), 0, H).astype(np.int64)
        y1 = np.clip(np.floor(v + ry), -1, H - 1).astype(np.int64)
    empty = ~visible | (x0 > x1) | (y0 > y1)
    x0[empty], x1[empty], y0[empty], y1[empty] = 1, 0, 1, 0

    out = {"u": u, "v": v, "conic": conic, "depth": zs, "bbox": np.stack([x0, x1, y0, y1], -1),
           "visible": visible}
    cache = {"xc": xc, "zs": zs, "visible": visible, "qn": qn, "qnorm": qnorm, "Rg": Rg, "M": M,
             "Sig": Sig, "T": T, "conic": conic, "scales": scales, "Rw": Rw, "fx": fx, "fy": fy}
    return out, cache


def project_backward(cache, du, dv, dconic, ddepth):
    """Chain screen-space partials (B, G) back to (dmeans, dscales, dquats)."""
    vis = cache["visible"]
    du = np.where(vis, du, 0.0)
    dv = np.where(vis, dv, 0.0)
    ddepth = np.where(vis, ddepth, 0.0)
    dconic = np.where(vis[..., None], dconic, 0.0)

    xc, z = cache["xc"], cache["zs"]
    x, y = xc[..., 0], xc[..., 1]
    fx, fy = cache["fx"], cache["fy"]
    ca, cb, cc = (cache["conic"][..., i] for i in range(3))

    # conic = inverse(S2); off-diagonal partial is split over two symmetric entries
    Cm = np.empty(ca.shape + (2, 2))
    Cm[..., 0, 0], Cm[..., 0, 1], Cm[..., 1, 0], Cm[..., 1, 1] = ca, cb, cb, cc
    Gc = np.empty_like(Cm)
    Gc[..., 0, 0] = dconic[..., 0]
    Gc[..., 0, 1] = Gc[..., 1, 0] = 0.5 * dconic[..., 1]
    Gc[..., 1, 1] = dconic[..., 2]
    GS2 = -Cm @ Gc @ Cm

    T, Sig = cache["T"], cache["Sig"]
    GSig = np.swapaxes(T, -1, -2) @ GS2 @ T
    GT = 2.0 * GS2 @ T @ Sig
    GJ = GT @ np.swapaxes(cache["Rw"], -1, -2)[:, None]

    z2 = z * z
    z3 = z2 * z
    dx = du * fx / z - GJ[..., 0, 2] * fx / z2
    dy = dv * fy / z - GJ[..., 1, 2] * fy / z2
    dz = (ddepth - du * fx * x / z2 - dv * fy * y / z2
          - GJ[..., 0, 0] * fx / z2 + GJ[..., 0, 2] * 2 * fx * x / z3
          - GJ[..., 1, 1] * fy / z2 + GJ[..., 1, 2] * 2 * fy * y / z3)
    dxc = np.stack([dx, dy, dz], axis=-1)
    dmeans = np.einsum("bji,bgj->bgi", cache["Rw"], dxc)

    GM = 2.0 * GSig @ cache["M"]
    Rg = cache["Rg"]
    dscales = np.einsum("...ij,...ij->...j", GM, Rg)
    GR = GM * cache["scales"][..., None, :]
    dqn = _rotmat_backward(cache["qn"], GR)
    qn = cache["qn"]
    dquats = (dqn - qn * np.sum(qn * dqn, axis=-1, keepdims=True)) / cache["qnorm"]
    return dmeans, dscales, dquats
