"""GradCAM on the last backbone activation."""
from __future__ import annotations

import numpy as np

from ..core import Grid, resize
from ..errors import InputError
from .net import NUM_CLASSES, forward, logit_activation_grad


def cam_from_activation(activation: np.ndarray, grad: np.ndarray) -> np.ndarray:
    """ReLU of the gradient-weighted channel sum, at activation resolution.

    ``activation`` and ``grad`` are (K, h, w); channel weights are the spatial
    means of ``grad``.
    """
    alpha = grad.mean(axis=(1, 2))
    return np.maximum(np.tensordot(alpha, activation, axes=1), 0.0)


def normalize_map(values: np.ndarray) -> np.ndarray:
    """Min-max scale to [0, 1]; a constant map becomes all zeros."""
    lo, hi = values.min(), values.max()
    if not hi > lo:
        return np.zeros_like(values)
    return np.clip((values - lo) / (hi - lo), 0.0, 1.0)


def upsampled_cam(activation, grad, height: int, width: int) -> Grid:
    cam = cam_from_activation(activation, grad)
    return Grid(normalize_map(resize(cam, height, width)))


def grad_cam(params, image: np.ndarray, class_id: int) -> Grid:
    """GradCAM map for class index ``class_id`` (0-based) of a (3, H, W) image."""
    if not 0 <= class_id < NUM_CLASSES:
        raise InputError(f"class index must lie in [0, {NUM_CLASSES}), got {class_id}")
    _, _, cache = forward(params, image)
    a = cache.activation()[0]
    g = logit_activation_grad(params, cache, class_id)[0]
    return upsampled_cam(a, g, image.shape[1], image.shape[2])
