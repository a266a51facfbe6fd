"""Strobe color sequences, PWM quantization, and the camera-space color dictionary."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from functools import reduce

import numpy as np

from .errors import DegenerateColorError, QuantizationError
from .scene import ColorDictionary

DEFAULT_LEVELS = 6
DEFAULT_PULSE_UNIT = 16.7e-6


def design_circle_sequence(n):
    """N LED intensity triples sampled uniformly on a circle in (alpha, beta, gamma) space.

    Three sines with 120 degree phase offsets, mapped from [-1, 1] to [0, 1].
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    phase = 2.0 * math.pi * np.arange(n) / n
    offsets = np.array([0.0, 2.0 * math.pi / 3.0, 4.0 * math.pi / 3.0])
    return 0.5 * (1.0 + np.sin(phase[:, None] + offsets[None, :]))


@dataclass(eq=False)
class PWMSchedule:
    levels_per_channel: int
    pulse_unit: float
    pulses: np.ndarray  # (N, 3) integers in [0, levels - 1]

    def dequantize(self):
        return self.pulses / float(self.levels_per_channel - 1)

    def durations(self):
        """On-time of each LED channel per strobe, in seconds."""
        return self.pulses * self.pulse_unit


def _reduce(triple):
    g = reduce(math.gcd, (int(v) for v in triple))
    return tuple(int(v) // g for v in triple)


def scalar_multiple_pairs(pulses):
    """Index pairs (i, j), i < j, whose integer triples are positive multiples of each other."""
    keys = [_reduce(p) for p in pulses]
    return [(i, j) for i, j in itertools.combinations(range(len(keys)), 2) if keys[i] == keys[j]]


def quantize_pwm(triples, levels=DEFAULT_LEVELS, pulse_unit=DEFAULT_PULSE_UNIT, unique=False):
    """Round intensities to integer pulse counts, ties rounding up.

    With ``unique=True`` a schedule containing two scalar-multiple triples
    is rejected.
    """
    if levels < 2:
        raise ValueError("levels must be at least 2")
    x = np.asarray(triples, dtype=np.float64).reshape(-1, 3)
    if np.any(x < 0) or np.any(x > 1):
        raise ValueError("intensities must lie in [0, 1]")
    pulses = np.floor(x * (levels - 1) + 0.5).astype(np.int64)
    for i, p in enumerate(pulses):
        if not p.any():
            raise QuantizationError(f"triple {i} quantizes to (0, 0, 0)", index=i)
    if unique:
        pairs = scalar_multiple_pairs(pulses)
        if pairs:
            i, j = pairs[0]
            raise QuantizationError(f"triples {i} and {j} are scalar multiples", index=j)
    return PWMSchedule(int(levels), float(pulse_unit), pulses)


def usable_colors(levels=DEFAULT_LEVELS):
    """Distinct usable pulse triples: all combinations minus (0,0,0) and scalar multiples.

    Each direction is represented by its GCD-reduced triple.
    """
    seen = set()
    for t in itertools.product(range(levels), repeat=3):
        if any(t):
            seen.add(_reduce(t))
    return sorted(seen)


def build_dictionary(schedule_or_intensities, primaries):
    """Camera-space colors c~_n = alpha_n c_R + beta_n c_G + gamma_n c_B, L2-normalized.

    ``primaries`` rows are c_R, c_G, c_B.
    """
    P = np.asarray(primaries, dtype=np.float64).reshape(3, 3)
    cond = np.linalg.cond(P)
    if not np.isfinite(cond) or cond >= 1e6:
        raise DegenerateColorError(f"primaries are nearly dependent (condition number {cond:.3g})")
    ints = getattr(schedule_or_intensities, "intensities", schedule_or_intensities)
    ints = np.asarray(ints, dtype=np.float64).reshape(-1, 3)
    mixed = ints @ P
    gains = np.linalg.norm(mixed, axis=1)
    bad = np.flatnonzero(gains == 0)
    if bad.size:
        raise DegenerateColorError(f"strobe {bad[0]} mixes to a zero color")
    return ColorDictionary(P, mixed / gains[:, None], gains)


def min_pairwise_cosine_distance(dictionary):
    colors = np.asarray(getattr(dictionary, "colors", dictionary), dtype=np.float64)
    if len(colors) < 2:
        raise ValueError("need at least two colors")
    cos = colors @ colors.T
    iu = np.triu_indices(len(colors), k=1)
    return float(np.min(1.0 - cos[iu]))
