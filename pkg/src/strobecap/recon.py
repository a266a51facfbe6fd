"""Fit a dynamic Gaussian set to one exposure's color-encoded views.

Objective: smoothed L1 between the strobe-mixed renders and the inputs,
plus a weighted total variation of rendered inverse depth averaged over
views and strobes.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from numba import njit

from .errors import OptimizationError, StructuralError
from .optim import Adam
from .render import ALPHA_VALID, BatchRender, CameraBatch, DeformedBatch
from .scene import MIN_SCALE, DeformationField, DynamicGaussianSet, FrameStack, GaussianCloud

log = logging.getLogger(__name__)

L1_SMOOTHING = 1e-4
FREEZE_OPACITY = 0.005
FREEZE_AFTER = 500
WINDOW = 200
TV_TIE = 1e-12  # relative size below which adjacent 1/Z values count as equal
DECAYED_GROUPS = ("mean", "scale", "mean_poly", "mean_sin", "mean_cos", "rot_poly", "rot_sin", "rot_cos")


@dataclass
class ReconConfig:
    iterations: int = 2500
    # geometric rates are fractions of the init-bounds diagonal per step;
    # intensity is a fraction of the initial intensity
    lr_mean: float = 2e-3
    lr_scale: float = 5e-4
    lr_rotation: float = 5e-3
    lr_opacity: float = 2e-2
    lr_intensity: float = 2e-2
    lr_poly: float = 3e-3
    lr_fourier: float = 1e-3
    lr_final_ratio: float = 1.0  # geometric groups decay exponentially to this fraction
    lambda_depth: float = 0.05
    init_count: int = 120
    init_bounds: tuple = ((-0.9, -0.45, -0.45), (0.9, 0.45, 0.45))
    seed: int = 0
    convergence_tol: float = 0.0
    deform_rotation: bool = False
    deterministic: bool = True

    def __post_init__(self):
        for name in ("lr_mean", "lr_scale", "lr_rotation", "lr_opacity", "lr_intensity",
                     "lr_poly", "lr_fourier"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.lambda_depth < 0:
            raise ValueError("lambda_depth must be non-negative")
        self.init_bounds = tuple(tuple(float(v) for v in b) for b in self.init_bounds)

    def to_dict(self):
        d = asdict(self)
        d["init_bounds"] = [list(b) for b in self.init_bounds]
        return d

    @classmethod
    def from_dict(cls, doc):
        return cls(**doc)

    def static_baseline(self):
        """Same config with deformation learning frozen."""
        d = self.to_dict()
        d.update(lr_poly=0.0, lr_fourier=0.0)
        return ReconConfig.from_dict(d)


@dataclass
class LossReport:
    total: list = field(default_factory=list)
    l1: list = field(default_factory=list)
    l1_raw: list = field(default_factory=list)
    tv: list = field(default_factory=list)
    lambda_depth: float = 0.0
    converged: bool = True
    iterations: int = 0
    mae: dict = field(default_factory=dict)  # view -> per-interframe MAE list

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["iteration", "total", "l1", "l1_unsmoothed", "tv_depth"])
            for i, row in enumerate(zip(self.total, self.l1, self.l1_raw, self.tv)):
                w.writerow([i] + [repr(float(v)) for v in row])
            for view, values in self.mae.items():
                for n, v in enumerate(values):
                    w.writerow([f"mae:{view}:{n}", repr(float(v)), "", "", ""])


# --- objective -----------------------------------------------------------

@njit(cache=True)
def _tie_sign(d, ref):
    # neighbors covered by the same single Gaussian differ only by rounding;
    # treat that as a tie so the subgradient is 0 there
    if abs(d) <= TV_TIE * abs(ref):
        return 0.0
    return 1.0 if d > 0 else -1.0


@njit(cache=True)
def _tv_kernel(depth, alpha, threshold):
    B, H, W = depth.shape
    grad = np.zeros_like(depth)
    tv = 0.0
    for b in range(B):
        for y in range(H):
            for x in range(W):
                if alpha[b, y, x] <= threshold:
                    continue
                inv = 1.0 / depth[b, y, x]
                if x + 1 < W and alpha[b, y, x + 1] > threshold:
                    d = 1.0 / depth[b, y, x + 1] - inv
                    tv += abs(d)
                    s = _tie_sign(d, inv)
                    grad[b, y, x + 1] += s
                    grad[b, y, x] -= s
                if y + 1 < H and alpha[b, y + 1, x] > threshold:
                    d = 1.0 / depth[b, y + 1, x] - inv
                    tv += abs(d)
                    s = _tie_sign(d, inv)
                    grad[b, y + 1, x] += s
                    grad[b, y, x] -= s
    # chain d|.|/d(1/Z) to d/dZ
    for b in range(B):
        for y in range(H):
            for x in range(W):
                if grad[b, y, x] != 0.0:
                    z = depth[b, y, x]
                    grad[b, y, x] *= -1.0 / (z * z)
    return tv, grad


def inverse_depth_tv(depth, alpha):
    """TV of 1/Z over horizontally and vertically adjacent pixel pairs that are
    both valid (alpha above threshold). Returns (tv, d tv / d depth)."""
    depth = np.ascontiguousarray(depth, dtype=np.float64)
    shape = depth.shape
    d3 = depth.reshape((-1,) + shape[-2:])
    a3 = np.ascontiguousarray(alpha, dtype=np.float64).reshape(d3.shape)
    tv, grad = _tv_kernel(d3, a3, ALPHA_VALID)
    return tv, grad.reshape(shape)


class Objective:
    """Strobed mixture loss for a fixed set of input views.

    ``inputs`` are foreground RGB rasters (H, W, 3) in the reference camera's
    color space, one per camera in ``cameras``.
    """

    def __init__(self, inputs, cameras, schedule, dictionary, lambda_depth=0.05,
                 smoothing=L1_SMOOTHING):
        cameras = list(cameras)
        inputs = [np.asarray(getattr(x, "frames", x), dtype=np.float64) for x in inputs]
        inputs = [x[0] if x.ndim == 4 else x for x in inputs]
        if len(inputs) != len(cameras):
            raise StructuralError(f"{len(inputs)} input views for {len(cameras)} cameras")
        if len(dictionary) != schedule.n_strobes:
            raise StructuralError("dictionary size differs from strobe count")
        self.inputs = np.stack(inputs)
        # channel-first copy for BLAS mixing: (M, 3, H*W)
        self._inputs_cf = np.ascontiguousarray(
            self.inputs.reshape(len(inputs), -1, 3).transpose(0, 2, 1))
        self.cameras = cameras
        self.schedule = schedule
        self.times = schedule.centers
        self.colors = dictionary.unnormalized  # (N, 3)
        self.lambda_depth = float(lambda_depth)
        self.smoothing = float(smoothing)
        self.M = len(cameras)
        self.N = len(self.times)
        self.cam_batch = CameraBatch([c for c in cameras for _ in range(self.N)])

    def render(self, gset):
        db = DeformedBatch(gset, self.times)
        tile = lambda a: np.tile(a, (self.M,) + (1,) * (a.ndim - 1))
        br = BatchRender(tile(db.means), tile(db.scales), tile(db.quats), tile(db.opacities),
                         tile(db.intensities), self.cam_batch)
        return db, br

    def estimate(self, intensity):
        """Mix (M, N, H, W) renders into (M, H, W, 3) encoded estimates."""
        M, N, H, W = intensity.shape
        cf = self.colors.T @ intensity.reshape(M, N, H * W)
        return cf.transpose(0, 2, 1).reshape(M, H, W, 3)

    def __call__(self, gset, grad=True):
        db, br = self.render(gset)
        M, N = self.M, self.N
        H, W = br.H, br.W
        R = br.intensity.reshape(M, N, H * W)
        r = self.colors.T @ R - self._inputs_cf
        if self.smoothing > 0:
            root = np.sqrt(r * r + self.smoothing ** 2)
            l1 = root.sum()
            dr = r / root
        else:
            l1 = np.abs(r).sum()
            dr = np.sign(r)
        l1_raw = np.abs(r).sum()
        tv_sum, dtv = inverse_depth_tv(br.depth, br.alpha)
        norm = 1.0 / (2.0 * N * M)
        tv = norm * tv_sum
        total = l1 + self.lambda_depth * tv
        terms = {"total": total, "l1": l1, "l1_raw": l1_raw, "tv": tv}
        if not grad:
            return terms, None
        up_i = (self.colors @ dr).reshape(M * N, H, W)
        up_d = (self.lambda_depth * norm * dtv).reshape(M * N, H, W)
        dm, ds, dq, do, di = br.backward(up_i, up_d)
        fold = lambda a: a.reshape((M, N) + a.shape[1:]).sum(axis=0)
        grads = db.backward(fold(dm), fold(ds), fold(dq), fold(do), fold(di))
        return terms, grads


def estimate_encoded(gset, camera, schedule, dictionary):
    obj = Objective([np.zeros((camera.height, camera.width, 3))], [camera], schedule, dictionary)
    _, br = obj.render(gset)
    return obj.estimate(br.intensity.reshape(1, obj.N, br.H, br.W))[0]


def loss(gset, inputs, cameras, schedule, dictionary, lambda_depth=0.05, smoothing=0.0):
    """(total, GradientBuffer) of the strobed objective; ``smoothing=0`` is plain L1."""
    terms, grads = Objective(inputs, cameras, schedule, dictionary, lambda_depth, smoothing)(gset)
    return terms["total"], grads


def decode_interframes(gset, cameras, schedule):
    """Render every strobe instant for each camera (novel views included)."""
    cameras = list(cameras)
    obj = Objective([np.zeros((c.height, c.width, 3)) for c in cameras], cameras, schedule,
                    _unit_dictionary(schedule.n_strobes))
    _, br = obj.render(gset)
    imgs = br.intensity.reshape(len(cameras), obj.N, br.H, br.W)
    return [FrameStack(imgs[m][..., None], schedule.centers) for m in range(len(cameras))]


def _unit_dictionary(n):
    from .scene import ColorDictionary

    return ColorDictionary(np.eye(3), np.tile([1.0, 0.0, 0.0], (n, 1)), np.ones(n))


# --- fitting -------------------------------------------------------------

def initial_set(config, inputs, dictionary, base_period):
    rng = np.random.default_rng(config.seed)
    lo, hi = (np.asarray(b) for b in config.init_bounds)
    diag = float(np.linalg.norm(hi - lo))
    n = config.init_count
    means = rng.uniform(lo, hi, size=(n, 3))
    scales = np.full((n, 3), 0.02 * diag)
    quats = np.tile([1.0, 0.0, 0.0, 0.0], (n, 1))
    opac = np.full(n, 0.1)
    stacked = np.stack([np.asarray(getattr(x, "frames", x), dtype=np.float64).reshape(-1, 3)
                        for x in inputs])
    fg = stacked[np.any(stacked > 0, axis=-1)]
    level = fg.mean() / max(dictionary.unnormalized.mean(), 1e-12) if fg.size else 1.0
    inten = np.full(n, level)
    cloud = GaussianCloud(means, scales, quats, opac, inten)
    return DynamicGaussianSet(cloud, DeformationField(n, base_period, rotation=config.deform_rotation))


def _param_views(gset):
    c = gset.cloud
    p = {"mean": c.means, "scale": c.scales, "rotation": c.rotations, "opacity": c.opacities,
         "intensity": c.intensities}
    p.update(gset.field.coeffs)
    return p


def _learning_rates(config, gset, init_intensity):
    lo, hi = (np.asarray(b) for b in config.init_bounds)
    diag = float(np.linalg.norm(hi - lo))
    P = gset.field.base_period
    L = gset.field.degree
    poly = config.lr_poly * diag / P ** np.arange(1, L + 1)
    lrs = {"mean": config.lr_mean * diag, "scale": config.lr_scale * diag,
           "rotation": config.lr_rotation, "opacity": config.lr_opacity,
           "intensity": config.lr_intensity * max(init_intensity, 1e-12),
           "mean_poly": poly[None, :, None], "mean_sin": config.lr_fourier * diag,
           "mean_cos": config.lr_fourier * diag}
    if gset.field.rotation:
        lrs.update({"rot_poly": config.lr_poly * 2 * math.pi / P ** np.arange(1, L + 1)[None, :, None],
                    "rot_sin": config.lr_fourier * 2 * math.pi, "rot_cos": config.lr_fourier * 2 * math.pi})
    if config.lr_poly == 0:
        lrs["mean_poly"] = 0.0
        lrs.pop("rot_poly", None)
    return lrs


def _first_bad_group(params, grads):
    for k in params:
        if not np.all(np.isfinite(params[k])) or not np.all(np.isfinite(grads.get(k, 0.0))):
            return k
    return None


def fit(inputs, cameras, schedule, dictionary, config=None, init=None, callback=None):
    """Minimize the strobed objective; returns (fitted set, LossReport)."""
    config = config or ReconConfig()
    cameras = list(cameras)
    if len(cameras) < 1:
        raise StructuralError("at least one view is required")
    obj = Objective(inputs, cameras, schedule, dictionary, config.lambda_depth, L1_SMOOTHING)
    gset = init.copy() if init is not None else initial_set(config, inputs, dictionary, schedule.exposure)
    init_level = float(np.mean(gset.cloud.intensities)) if len(gset) else 1.0
    opt = Adam(_learning_rates(config, gset, init_level))
    report = LossReport(lambda_depth=config.lambda_depth)
    low_count = np.zeros(len(gset), dtype=np.int64)
    frozen = np.zeros(len(gset), dtype=bool)
    best_prev_window = math.inf

    for it in range(config.iterations + 1):
        terms, grads = obj(gset, grad=it < config.iterations)
        for key in ("total", "l1", "l1_raw", "tv"):
            getattr(report, key).append(float(terms[key]))
        params = _param_views(gset)
        if not math.isfinite(terms["total"]):
            bad = _first_bad_group(params, grads.as_dict() if grads else {}) or "mean"
            raise OptimizationError(f"non-finite loss at iteration {it}; first bad group: {bad}", bad)
        if callback is not None:
            callback(it, terms, gset)
        if (it + 1) % WINDOW == 0:
            wmin = min(report.total[-WINDOW:])
            if wmin > best_prev_window * (1 + 1e-9):
                report.converged = False
            if (config.convergence_tol > 0 and math.isfinite(best_prev_window)
                    and best_prev_window - wmin < config.convergence_tol * best_prev_window):
                report.iterations = it
                break
            best_prev_window = min(best_prev_window, wmin)
        if it == config.iterations:
            report.iterations = it
            break
        g = grads.as_dict()
        bad = _first_bad_group(params, g)
        if bad is not None:
            raise OptimizationError(f"non-finite gradient at iteration {it} in group {bad}", bad)
        if frozen.any():
            for k in g:
                g[k] = g[k].copy()
                g[k][frozen] = 0.0
        decay = config.lr_final_ratio ** (it / max(config.iterations - 1, 1))
        opt.step(params, g, {k: decay for k in DECAYED_GROUPS})
        c = gset.cloud
        c.normalize_rotations_()
        np.maximum(c.scales, MIN_SCALE, out=c.scales)
        np.clip(c.opacities, 0.0, 1.0, out=c.opacities)
        np.maximum(c.intensities, 0.0, out=c.intensities)
        low = c.opacities < FREEZE_OPACITY
        low_count = np.where(low, low_count + 1, 0)
        frozen |= low_count >= FREEZE_AFTER
    return gset, report


def attach_mae(report, gset, cameras, schedule, truth_stacks, names=None):
    """Fill ``report.mae`` with per-interframe MAE for each evaluation view."""
    decoded = decode_interframes(gset, cameras, schedule)
    names = names or [str(i) for i in range(len(decoded))]
    for name, dec, tru in zip(names, decoded, truth_stacks):
        diff = np.abs(np.asarray(dec.frames, np.float64) - np.asarray(tru.frames, np.float64))
        report.mae[name] = diff.reshape(len(diff), -1).mean(axis=1).tolist()
    return report
