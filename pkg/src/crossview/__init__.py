"""Cross-view consistency blocks for parallel per-view denoising diffusion.

The package is self-contained on top of numpy: a reverse-mode autodiff
engine (:mod:`crossview.engine`), camera and voxel geometry
(:mod:`crossview.geometry`), the plug-in consistency block
(:mod:`crossview.block`), a small conditional UNet backbone
(:mod:`crossview.unet`), diffusion machinery (:mod:`crossview.diffusion`),
a procedural multi-view dataset (:mod:`crossview.synthdata`), image metrics
(:mod:`crossview.metrics`), and a command line front end
(:mod:`crossview.cli`).
"""

from crossview.engine import Tensor, backward, no_grad

__all__ = ["Tensor", "backward", "no_grad"]

__version__ = "0.1.0"
