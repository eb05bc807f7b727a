"""Multi-camera multi-object tracking with learned cross-view association.

Detection embeddings per camera view feed a global track-embedding update;
a probabilistic detection-to-track association drives both the training
losses and online inference.  Everything runs on a small float64 autodiff
core with an optional compiled kernel backend.
"""

from ._kernels import BACKEND as kernel_backend

__version__ = "0.1.0"
__all__ = ["kernel_backend", "__version__"]
