"""Binary frame-stack files, JSON documents for scene objects, PNG export.

Tensor layout (little-endian)::

    b"STRB"  u32 version  u32 width  u32 height  u32 channels  u32 frames
    f64[frames] timestamps
    f32[frames][height][width][channels] samples
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError, StructuralError
from .scene import (Camera, CameraRig, ColorDictionary, DeformationField, DynamicGaussianSet,
                    FrameStack, GaussianCloud, StrobeSchedule)

MAGIC = b"STRB"
VERSION = 1
_HEADER = struct.Struct("<4s5I")
MAX_PAYLOAD_BYTES = 1 << 34


def write_tensor(stack, path):
    frames = np.asarray(stack.frames)
    if not np.all(np.isfinite(frames)):
        raise StructuralError("refusing to write a frame stack containing NaN or Inf")
    if np.any(frames < 0):
        raise StructuralError("refusing to write a frame stack with negative values")
    n, h, w, c = frames.shape
    body = np.ascontiguousarray(frames, dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, w, h, c, n))
        fh.write(np.ascontiguousarray(stack.timestamps, dtype="<f8").tobytes())
        fh.write(body)
    return Path(path)


def read_tensor(path):
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise FormatError("truncated header", offset=len(data))
    magic, version, w, h, c, n = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}", offset=0)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", offset=4)
    if c not in (1, 3):
        raise FormatError(f"invalid channel count {c}", offset=16)
    payload = w * h * c * n * 4
    if payload > MAX_PAYLOAD_BYTES:
        raise FormatError(f"dimensions {n}x{h}x{w}x{c} overflow the size limit", offset=8)
    off = _HEADER.size
    ts_end = off + 8 * n
    if len(data) < ts_end:
        raise FormatError("truncated timestamps", offset=len(data))
    timestamps = np.frombuffer(data, dtype="<f8", count=n, offset=off).astype(np.float64)
    if len(data) < ts_end + payload:
        raise FormatError(f"truncated payload: expected {payload} bytes", offset=len(data))
    if len(data) > ts_end + payload:
        raise FormatError("trailing bytes after payload", offset=ts_end + payload)
    frames = np.frombuffer(data, dtype="<f4", count=w * h * c * n, offset=ts_end)
    frames = frames.reshape(n, h, w, c).astype(np.float32)
    return FrameStack(frames, timestamps)


def to_png(raster, path, gain=1.0):
    """Write a (H, W) or (H, W, 3) raster as 8-bit PNG: clip(value * gain, 0, 255)."""
    from PIL import Image

    img = np.clip(np.rint(np.asarray(raster, dtype=np.float64) * gain), 0, 255).astype(np.uint8)
    if img.ndim == 3 and img.shape[2] == 1:
        img = img[..., 0]
    Image.fromarray(img).save(path)
    return Path(path)


def file_sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def config_hash(obj):
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()


# --- JSON documents ------------------------------------------------------

def _lst(a):
    return np.asarray(a).tolist()


def gaussian_set_to_dict(gset):
    return {
        "gaussians": [
            {"mean": _lst(g.mean), "scale": _lst(g.scale), "rotation": _lst(g.rotation),
             "opacity": g.opacity, "intensity": g.intensity}
            for g in gset.gaussians
        ],
        "deformations": [
            {
                "poly_coeffs": {k: _lst(v) for k, v in d.poly_coeffs.items()},
                "fourier_coeffs": {k: {"sin": _lst(v["sin"]), "cos": _lst(v["cos"])}
                                   for k, v in d.fourier_coeffs.items()},
                "base_period": d.base_period,
            }
            for d in gset.deformations
        ],
        "base_period": gset.field.base_period,
        "rotation_deformation": gset.field.rotation,
    }


def gaussian_set_from_dict(doc):
    gs = doc["gaussians"]
    if gs:
        cloud = GaussianCloud([g["mean"] for g in gs], [g["scale"] for g in gs],
                              [g["rotation"] for g in gs], [g["opacity"] for g in gs],
                              [g["intensity"] for g in gs])
    else:
        cloud = GaussianCloud.empty()
    defs = doc["deformations"]
    if len(defs) != len(gs):
        raise StructuralError(f"{len(gs)} gaussians but {len(defs)} deformations")
    period = doc.get("base_period", defs[0]["base_period"] if defs else 1.0)
    if not defs:
        return DynamicGaussianSet(cloud, DeformationField(0, period, rotation=doc.get("rotation_deformation", False)))
    rot = "rotation" in defs[0]["poly_coeffs"]
    coeffs = {
        "mean_poly": [d["poly_coeffs"]["mean"] for d in defs],
        "mean_sin": [d["fourier_coeffs"]["mean"]["sin"] for d in defs],
        "mean_cos": [d["fourier_coeffs"]["mean"]["cos"] for d in defs],
    }
    if rot:
        coeffs.update({
            "rot_poly": [d["poly_coeffs"]["rotation"] for d in defs],
            "rot_sin": [d["fourier_coeffs"]["rotation"]["sin"] for d in defs],
            "rot_cos": [d["fourier_coeffs"]["rotation"]["cos"] for d in defs],
        })
    L = len(defs[0]["poly_coeffs"]["mean"])
    K = len(defs[0]["fourier_coeffs"]["mean"]["sin"])
    return DynamicGaussianSet(cloud, DeformationField(len(defs), period, L, K, rot, coeffs))


def camera_to_dict(cam):
    return {
        "intrinsics": {"fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy,
                       "width": cam.width, "height": cam.height},
        "pose": {"rotation": _lst(cam.rotation), "translation": _lst(cam.translation)},
        "color_transform": _lst(cam.color_transform),
    }


def camera_from_dict(doc):
    k, p = doc["intrinsics"], doc["pose"]
    return Camera(k["fx"], k["fy"], k["cx"], k["cy"], k["width"], k["height"],
                  p["rotation"], p["translation"], doc.get("color_transform", np.eye(3)))


def rig_to_dict(rig):
    return {"cameras": [camera_to_dict(c) for c in rig.cameras], "reference": rig.reference}


def rig_from_dict(doc):
    return CameraRig([camera_from_dict(c) for c in doc["cameras"]], doc.get("reference", 0))


def pwm_to_dict(pwm):
    return {"levels_per_channel": pwm.levels_per_channel, "pulse_unit": pwm.pulse_unit,
            "pulses": _lst(pwm.pulses)}


def pwm_from_dict(doc):
    from .strobe import PWMSchedule

    return PWMSchedule(doc["levels_per_channel"], doc["pulse_unit"], np.asarray(doc["pulses"], dtype=np.int64))


def schedule_to_dict(s):
    doc = {"n_strobes": s.n_strobes, "exposure": s.exposure, "strobe_duration": s.strobe_duration,
           "strobe_times": _lst(s.strobe_times), "intensities": _lst(s.intensities),
           "sync_margin": s.sync_margin}
    if s.pwm is not None:
        doc["pwm"] = pwm_to_dict(s.pwm)
    return doc


def schedule_from_dict(doc):
    pwm = pwm_from_dict(doc["pwm"]) if doc.get("pwm") else None
    return StrobeSchedule(doc["n_strobes"], doc["exposure"], doc["strobe_duration"],
                          doc["strobe_times"], doc["intensities"], doc["sync_margin"], pwm)


def dictionary_to_dict(d):
    return {"primaries": _lst(d.primaries), "colors": _lst(d.colors), "gains": _lst(d.gains)}


def dictionary_from_dict(doc):
    return ColorDictionary(doc["primaries"], doc["colors"], doc["gains"])


def save_json(doc, path):
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    return Path(path)


def load_json(path):
    return json.loads(Path(path).read_text())
