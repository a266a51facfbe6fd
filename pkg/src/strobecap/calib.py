"""Color calibration: LED primaries from single-LED frames, per-camera 3x3
transforms from color-checker tile means, and dictionary extraction."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import CalibrationError
from .strobe import build_dictionary

MAX_CONDITION = 1e6


def _patch_pixels(raster, patch):
    img = np.asarray(getattr(raster, "frames", raster), dtype=np.float64)
    if img.ndim == 4:
        img = img[0]
    if patch is None:
        px = img.reshape(-1, img.shape[-1])
    elif isinstance(patch, np.ndarray) and patch.dtype == bool:
        px = img[patch]
    else:
        y0, y1, x0, x1 = patch
        px = img[y0:y1, x0:x1].reshape(-1, img.shape[-1])
    if px.size == 0:
        raise CalibrationError("calibration patch is empty")
    return px


def estimate_primaries(single_led_frames, patch=None, saturation=255.0, max_saturated=0.01):
    """Mean patch RGB under each single LED; rows are c_R, c_G, c_B.

    ``patch`` is (y0, y1, x0, x1), a boolean mask, or None for the whole
    frame. A frame with more than ``max_saturated`` of its patch pixels at
    ``saturation`` in any channel is rejected.
    """
    frames = list(single_led_frames)
    if len(frames) != 3:
        raise CalibrationError("need exactly three single-LED frames (R, G, B)")
    rows = []
    for name, frame in zip("RGB", frames):
        px = _patch_pixels(frame, patch)
        frac = np.mean(np.any(px >= saturation, axis=-1))
        if frac > max_saturated:
            raise CalibrationError(f"{name} frame: {frac:.1%} of patch pixels saturated")
        rows.append(px.mean(axis=0))
    return np.array(rows)


@dataclass
class ColorCheckerCapture:
    """Per-camera tile means: ``tiles[camera_id][tile_id] = (r, g, b)``."""

    tiles: dict
    reference: object

    def __post_init__(self):
        if self.reference not in self.tiles:
            raise CalibrationError(f"reference camera {self.reference!r} has no measurements")
        ids = set(self.tiles[self.reference])
        for cam, t in self.tiles.items():
            if set(t) != ids:
                raise CalibrationError(f"camera {cam!r} reports a different tile set")
        if len(ids) < 4:
            raise CalibrationError("at least 4 tiles are required")

    def matrix(self, camera_id):
        order = sorted(self.tiles[self.reference])
        return np.array([self.tiles[camera_id][k] for k in order], dtype=np.float64)


def fit_color_transform(capture, camera_id):
    """Least-squares T with T @ rgb_cam ~= rgb_ref over all tiles (no offset)."""
    if camera_id not in capture.tiles:
        raise CalibrationError(f"camera {camera_id!r} not in capture")
    if camera_id == capture.reference:
        return np.eye(3)
    X = capture.matrix(camera_id)
    Y = capture.matrix(capture.reference)
    cond = np.linalg.cond(X)
    if not np.isfinite(cond) or cond >= MAX_CONDITION:
        raise CalibrationError(f"tile colors are rank deficient (condition {cond:.3g})")
    Tt, *_ = np.linalg.lstsq(X, Y, rcond=None)
    return Tt.T


def fit_all_transforms(capture):
    return {cam: fit_color_transform(capture, cam) for cam in capture.tiles}


def apply_transform(raster, transform):
    img = np.asarray(raster, dtype=np.float64)
    return img @ np.asarray(transform).T


def extract_dictionary(foreground_frames, schedule, primaries=None, patch=None):
    """Dictionary from the schedule's intensities and the LED primaries.

    When ``primaries`` is None they are estimated from ``foreground_frames``,
    which must then be the three single-LED captures.
    """
    if primaries is None:
        primaries = estimate_primaries(foreground_frames, patch)
    return build_dictionary(schedule, primaries)
