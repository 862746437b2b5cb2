"""Learn table-top 3D occupancy from posed RGB views and verify it against depth.

Submodules:

* :mod:`worknerf.geometry` -- cameras, rays, boxes, voxel grids, interpolation
* :mod:`worknerf.scenegen` -- synthetic scenes, analytic RGB-D oracle, camera
  rig, on-disk dataset format
* :mod:`worknerf.model` -- 2D feature extractor, world-frame cost volume,
  3D U-Net, field MLP, checkpoints
* :mod:`worknerf.renderer` -- differentiable volumetric rendering and the
  opacity-threshold depth rule
* :mod:`worknerf.training` -- loss, view-selection protocol, training loop
* :mod:`worknerf.evaluation` -- masked depth MAE, PSNR, experiment matrix
* :mod:`worknerf.cli` -- batch entry points
"""

__version__ = "0.1.0"
