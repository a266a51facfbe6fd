"""Color-strobed high-speed volumetric capture: strobe design, forward
simulation of encoded multi-view frames, and dynamic Gaussian-splat recovery."""

__version__ = "0.1.0"
