"""Sparse-view X-ray reconstruction with rectified 3D Gaussian splatting.

Modules, bottom-up:

* ``geometry``  - C-arm cameras, DLT/RANSAC calibration, trajectories
* ``phantom``   - synthetic volumes and ray-marched DRRs
* ``scene``     - the Gaussian kernel scene
* ``projector`` - rectified splatting renderer, its oracle and its gradients
* ``optimizer`` - loss, Adam, density control, training loop
* ``volume_post`` - voxelization, thresholding, slices, evaluation
* ``pipeline`` / ``cli`` - preprocessing, datasets, sweeps and the command line
"""
from ._accel import USE_NUMBA

__version__ = "0.1.0"

__all__ = ["USE_NUMBA", "__version__"]
