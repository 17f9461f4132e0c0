"""Boundary-sensitive portrait segmentation tooling.

Soft-label boundary kernels, a position-prior loss weight, the matching
cross-entropy losses with analytic gradients, a toy numpy network that
trains on them, and evaluation/trimap utilities.
"""

from .evaluate import boundary_band_iou, make_trimap, mean_iou
from .geometry import assemble_input, augment_pair, distance_transform, extract_contour, make_band
from .kernels import compute_mean_mask, global_kernel, individual_kernel
from .loss import (attribute_loss, combined_loss, cross_entropy, gk_loss, ik_loss,
                   softmax_pixelwise)
from .net import TinyNet, TrainConfig, forward, backward, init_net, predict_mask, train
from .raster import load_mask, read_tensor, save_mask, write_tensor

__version__ = "0.1.0"
