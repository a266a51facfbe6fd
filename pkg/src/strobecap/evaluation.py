"""Held-out-view error metrics, parameter sweeps and their trend checks."""

from __future__ import annotations

import csv
import io
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import StructuralError
from .recon import ReconConfig, decode_interframes, fit
from .sim import SimConfig, make_dictionary, simulate

SWEEP_PARAMETERS = ("n_strobes", "ambient_strength", "albedo_blend", "n_cameras", "motion_variance")


def mae(decoded, truth):
    """Mean |decoded - truth| over every pixel, channel and frame."""
    a = np.asarray(getattr(decoded, "frames", decoded), dtype=np.float64)
    b = np.asarray(getattr(truth, "frames", truth), dtype=np.float64)
    if a.shape != b.shape:
        raise StructuralError(f"stack shapes differ: {a.shape} vs {b.shape}")
    return float(np.mean(np.abs(a - b)))


def strip_image(stacks):
    """Frames of each stack side by side; one row per stack."""
    stacks = list(stacks)
    rows = []
    for s in stacks:
        frames = np.asarray(getattr(s, "frames", s))
        if frames.ndim == 3:
            frames = frames[..., None]
        rows.append(np.concatenate(list(frames), axis=1))
    shapes = {r.shape for r in rows}
    if len(shapes) != 1:
        raise StructuralError(f"stacks have mixed dimensions: {sorted(shapes)}")
    return np.concatenate(rows, axis=0)


def emit_strip(stacks, path, gain=1.0):
    """Write the strip as 8-bit PNG with value -> clip(round(value * gain), 0, 255).

    ``gain="auto"`` maps the strip maximum to 255.
    """
    from .io import to_png

    img = strip_image(stacks)
    if gain == "auto":
        peak = float(img.max())
        gain = 255.0 / peak if peak > 0 else 1.0
    return to_png(img, path, gain)


@dataclass
class SweepSpec:
    parameter: str
    values: list
    repetitions: int = 3
    sim: SimConfig = field(default_factory=SimConfig)
    recon: ReconConfig = field(default_factory=ReconConfig)
    held_out: list = field(default_factory=lambda: [-1])

    def __post_init__(self):
        if self.parameter not in SWEEP_PARAMETERS:
            raise ValueError(f"unknown sweep parameter {self.parameter!r}")
        if list(self.values) != sorted(self.values):
            raise ValueError("swept values must be sorted ascending")
        if self.repetitions < 1:
            raise ValueError("repetitions must be at least 1")
        if isinstance(self.sim, dict):
            self.sim = SimConfig.from_dict(self.sim)
        if isinstance(self.recon, dict):
            self.recon = ReconConfig.from_dict(self.recon)

    def to_dict(self):
        return {"parameter": self.parameter, "values": list(self.values),
                "repetitions": self.repetitions, "sim": self.sim.to_dict(),
                "recon": self.recon.to_dict(), "held_out": list(self.held_out)}

    @classmethod
    def from_dict(cls, doc):
        return cls(**doc)


@dataclass
class CellResult:
    value: float
    repetition: int
    mae: float
    runtime: float
    status: str = "ok"
    decoded: object = None
    truth: object = None


def cell_configs(spec, value, rep):
    """Simulation and reconstruction configs for one (value, repetition) cell.

    Repetition r reuses the same seeds for every swept value, so values are
    compared on paired scenes.
    """
    sim = replace(spec.sim, rng_seed=spec.sim.rng_seed + 1009 * rep)
    if spec.parameter in ("n_strobes", "n_cameras"):
        sim = replace(sim, **{spec.parameter: int(value)})
    else:
        sim = replace(sim, **{spec.parameter: float(value)})
    recon = replace(spec.recon, seed=spec.recon.seed + 1009 * rep)
    return sim, recon


def run_cell(spec, value, rep, keep_frames=False):
    t0 = time.perf_counter()
    try:
        sim_cfg, recon_cfg = cell_configs(spec, value, rep)
        sim = simulate(sim_cfg)
        n_rig = len(sim.rig)
        held = sorted({h % n_rig for h in spec.held_out})
        fit_ids = [i for i in range(n_rig) if i not in held]
        fit_cams = [sim.rig[i] for i in fit_ids]
        fit_inputs = [sim.foreground[i] for i in fit_ids]
        if len(fit_cams) != n_rig - len(held):
            raise StructuralError("held-out camera leaked into the fitting inputs")
        # the dictionary as calibration on the object would measure it
        dictionary = make_dictionary(sim_cfg, sim.schedule, with_albedo=True)
        gset, _ = fit(fit_inputs, fit_cams, sim.schedule, dictionary, recon_cfg)
        decoded = decode_interframes(gset, [sim.rig[i] for i in held], sim.schedule)
        truth = [sim.interframes[i] for i in held]
        err = float(np.mean([mae(d, t) for d, t in zip(decoded, truth)]))
        res = CellResult(float(value), rep, err, time.perf_counter() - t0)
        if keep_frames:
            res.decoded, res.truth = decoded, truth
        return res
    except Exception as exc:  # recorded per cell; the sweep continues
        return CellResult(float(value), rep, math.nan, time.perf_counter() - t0,
                          status=f"error: {type(exc).__name__}: {exc}")


def _run_cell_args(args):
    return run_cell(*args)


def run_sweep(spec, jobs=1, keep_frames=False, progress=None):
    """Run every (value, repetition) cell; results ordered by (value, repetition)."""
    tasks = [(spec, v, r, keep_frames) for v in spec.values for r in range(spec.repetitions)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_cell_args, tasks))
    else:
        results = []
        for t in tasks:
            results.append(run_cell(*t))
            if progress:
                progress(results[-1])
    return results


def summarize(spec, results):
    """Rows of (value, mean MAE, std MAE, total runtime) per swept value."""
    rows = []
    for v in spec.values:
        cells = [c for c in results if c.value == float(v)]
        errs = np.array([c.mae for c in cells if c.status == "ok"])
        mean = float(errs.mean()) if errs.size else math.nan
        std = float(errs.std()) if errs.size else math.nan
        rows.append((v, mean, std, float(sum(c.runtime for c in cells))))
    return rows


def sweep_csv(spec, results, deterministic=False):
    """CSV text: header, one row per value; runtime left blank when deterministic."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["value", "mae_mean", "mae_std", "runtime_s"])
    for v, m, s, rt in summarize(spec, results):
        w.writerow([repr(float(v)), repr(m), repr(s), "" if deterministic else f"{rt:.3f}"])
    return buf.getvalue()


def cells_csv(results, deterministic=False):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["value", "repetition", "mae", "status", "runtime_s"])
    for c in results:
        w.writerow([repr(c.value), c.repetition, repr(c.mae), c.status,
                    "" if deterministic else f"{c.runtime:.3f}"])
    return buf.getvalue()


# --- trend rules ---------------------------------------------------------

def check_trend(parameter, values, maes):
    """Evaluate the expected-trend rules for one panel; returns [(rule, passed)]."""
    v = [float(x) for x in values]
    e = [float(x) for x in maes]
    at = dict(zip(v, e))
    out = []
    if any(math.isnan(x) for x in e):
        return [("all cells succeeded", False)]
    if parameter == "n_strobes":
        ok = all(e[i + 1] >= 0.9 * e[i] for i in range(len(e) - 1))
        out.append(("MAE non-decreasing in N (10% slack per step)", ok))
        out.append((f"MAE(N={v[-1]:g}) > 1.5 x MAE(N={v[0]:g})", e[-1] > 1.5 * e[0]))
    elif parameter == "ambient_strength":
        out.append(("MAE strictly increasing with ambient", all(b > a for a, b in zip(e, e[1:]))))
    elif parameter == "albedo_blend":
        out.append((f"MAE(albedo={v[-1]:g}) > MAE(albedo={v[0]:g})", e[-1] > e[0]))
    elif parameter == "n_cameras":
        lo, hi = at.get(2.0, e[0]), at.get(8.0, e[-1])
        out.append(("MAE(M=8) < MAE(M=2)", hi < lo))
        if 6.0 in at:
            out.append(("MAE(M=6) within 25% of MAE(M=8)", abs(at[6.0] - hi) <= 0.25 * hi))
    elif parameter == "motion_variance":
        out.append(("MAE increasing with motion variance", all(b > a for a, b in zip(e, e[1:]))))
    return out


# --- default desk-scale panels -------------------------------------------

def panel_base_sim(**kw):
    base = dict(width=64, height=64, fov_deg=30.0, noise_sigma=1.0, n_gaussians=40)
    base.update(kw)
    return SimConfig(**base)


def panel_base_recon(**kw):
    base = dict(iterations=800, init_count=80)
    base.update(kw)
    return ReconConfig(**base)


DEFAULT_PANELS = {
    "a": ("n_strobes", [4, 10, 20, 28]),
    "b": ("ambient_strength", [0.0, 0.25, 0.5]),
    "c": ("albedo_blend", [0.0, 0.9]),
    "d": ("n_cameras", [2, 4, 6, 8]),
    "e": ("motion_variance", [0.0, 0.06, 0.15]),
}


def default_panel(name, repetitions=3):
    parameter, values = DEFAULT_PANELS[name]
    return SweepSpec(parameter, values, repetitions, panel_base_sim(), panel_base_recon())
