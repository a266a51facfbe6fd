from .api import (BatchRender, DeformedBatch, GradientBuffer, RenderOutput, depth_sort, render,
                  render_with_gradients)
from .projection import CameraBatch
from .raster import ALPHA_VALID, TILE

__all__ = ["ALPHA_VALID", "BatchRender", "CameraBatch", "DeformedBatch", "GradientBuffer",
           "RenderOutput", "TILE", "depth_sort", "render", "render_with_gradients"]
