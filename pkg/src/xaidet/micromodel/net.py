"""Three-block convolutional detector with hand-written backward pass.

Layout (input 3 x H x W, H and W multiples of 8)::

    conv1 3->8   3x3 pad 1, ReLU, maxpool 2
    conv2 8->16  3x3 pad 1, ReLU, maxpool 2
    conv3 16->32 3x3 pad 1, ReLU, maxpool 2      -> A (32 x H/8 x W/8)
    class head: global average pool of A, linear 32->C
    box head:   linear 32->3 applied at every cell of A giving an objectness
                logit and width/height logits; the box center is the
                objectness-softmax average of the cell centers, width and
                height are sigmoids of the objectness-weighted logits.

Each input image is standardized per channel before conv1. Inputs are NCHW
and batched; layers run NHWC internally. ``forward`` keeps every intermediate
in a cache that ``backward`` and GradCAM consume.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ShapeMismatch

NUM_CLASSES = 4
CONV_SHAPES = {"conv1": (8, 3), "conv2": (16, 8), "conv3": (32, 16)}
FEATURES = 32
BOX_OUTPUTS = 3  # objectness, width logit, height logit

BACKBONE = ("conv1.w", "conv1.b", "conv2.w", "conv2.b", "conv3.w", "conv3.b")
HEADS = ("cls.w", "cls.b", "box.w", "box.b")
PARAM_NAMES = BACKBONE + HEADS

INPUT_SCALE = 0.25
STD_EPS = 1e-3


def param_shapes(num_classes: int = NUM_CLASSES) -> dict[str, tuple[int, ...]]:
    shapes = {}
    for name, (out_c, in_c) in CONV_SHAPES.items():
        shapes[f"{name}.w"] = (out_c, in_c, 3, 3)
        shapes[f"{name}.b"] = (out_c,)
    shapes["cls.w"] = (num_classes, FEATURES)
    shapes["cls.b"] = (num_classes,)
    shapes["box.w"] = (BOX_OUTPUTS, FEATURES)
    shapes["box.b"] = (BOX_OUTPUTS,)
    return shapes


def init_backbone(rng: np.random.Generator, dtype=np.float64) -> dict[str, np.ndarray]:
    """He-normal conv weights, zero biases."""
    out = {}
    for name, (out_c, in_c) in CONV_SHAPES.items():
        std = np.sqrt(2.0 / (in_c * 9))
        out[f"{name}.w"] = (rng.standard_normal((out_c, in_c, 3, 3)) * std).astype(dtype)
        out[f"{name}.b"] = np.zeros(out_c, dtype=dtype)
    return out


def init_heads(rng: np.random.Generator, num_classes: int = NUM_CLASSES, dtype=np.float64):
    std = 1.0 / np.sqrt(FEATURES)
    return {
        "cls.w": (rng.standard_normal((num_classes, FEATURES)) * std).astype(dtype),
        "cls.b": np.zeros(num_classes, dtype=dtype),
        "box.w": (rng.standard_normal((BOX_OUTPUTS, FEATURES)) * std).astype(dtype),
        "box.b": np.zeros(BOX_OUTPUTS, dtype=dtype),
    }


def init_params(rng: np.random.Generator, dtype=np.float64) -> dict[str, np.ndarray]:
    return {**init_backbone(rng, dtype), **init_heads(rng, dtype=dtype)}


def zero_params(dtype=np.float64) -> dict[str, np.ndarray]:
    return {k: np.zeros(s, dtype=dtype) for k, s in param_shapes().items()}


# ---------------------------------------------------------------- layers


def _wmat(w):
    # (O, C, 3, 3) -> (9C, O), rows ordered (ky, kx, c)
    return w.transpose(2, 3, 1, 0).reshape(-1, w.shape[0])


def conv_forward(x, w, b):
    """3x3 convolution, stride 1, zero padding 1, on NHWC input.

    Returns the NHWC output and the im2col matrix kept for the backward pass.
    """
    n, h, wd, c = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    cols = np.concatenate([xp[:, i : i + h, j : j + wd, :] for i in range(3) for j in range(3)], axis=-1)
    cols = cols.reshape(n * h * wd, 9 * c)
    out = cols @ _wmat(w) + b
    return out.reshape(n, h, wd, -1), cols


def conv_backward(dout, cols, x_shape, w, need_dx=True):
    n, h, wd, c = x_shape
    o = w.shape[0]
    d2 = dout.reshape(-1, o)
    dw = (cols.T @ d2).reshape(3, 3, c, o).transpose(3, 2, 0, 1)
    db = d2.sum(axis=0)
    if not need_dx:
        return None, dw, db
    dcols = (d2 @ _wmat(w).T).reshape(n, h, wd, 9, c)
    dxp = np.zeros((n, h + 2, wd + 2, c), dtype=dout.dtype)
    for i in range(3):
        for j in range(3):
            dxp[:, i : i + h, j : j + wd, :] += dcols[:, :, :, 3 * i + j, :]
    return dxp[:, 1:-1, 1:-1, :], dw, db


def maxpool_forward(x):
    """2x2 max pooling on NHWC input.

    Returns the pooled output and the one-hot routing mask of shape
    (N, H/2, 2, W/2, 2, C); ties route to the first element in row-major
    window order.
    """
    n, h, w, c = x.shape
    win = x.reshape(n, h // 2, 2, w // 2, 2, c)
    out = win.max(axis=(2, 4))
    hit = win == out[:, :, None, :, None, :]
    route = np.zeros_like(hit)
    taken = np.zeros_like(out, dtype=bool)
    for dy in (0, 1):
        for dx in (0, 1):
            sel = hit[:, :, dy, :, dx, :] & ~taken
            route[:, :, dy, :, dx, :] = sel
            taken |= sel
    return out, route


def maxpool_backward(dout, route, x_shape):
    return (route * dout[:, :, None, :, None, :]).reshape(x_shape)


def standardize(images):
    """Per-image, per-channel zero mean and unit spread, scaled by INPUT_SCALE.

    Removes the global background color so the filters see local contrast.
    A constant channel maps to zeros.
    """
    x = np.asarray(images, dtype=np.float64)
    mean = x.mean(axis=(2, 3), keepdims=True)
    std = x.std(axis=(2, 3), keepdims=True)
    return (x - mean) / (std + STD_EPS) * INPUT_SCALE


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def softmax(z, axis=-1):
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def cell_centers(h: int, w: int, dtype=np.float64):
    gy = ((np.arange(h) + 0.5) / h).astype(dtype)
    gx = ((np.arange(w) + 0.5) / w).astype(dtype)
    return np.repeat(gy, w), np.tile(gx, h)


# --------------------------------------------------------------- network


@dataclass
class Cache:
    """Intermediates of one batched forward pass (NHWC internally)."""

    x_shapes: list
    cols: list
    pre: list  # conv outputs before ReLU
    routes: list  # maxpool routing masks
    pooled: list  # maxpool outputs; pooled[-1] is A
    gap: np.ndarray
    logits: np.ndarray
    cell: np.ndarray  # (n, h*w, 3) per-cell head outputs
    attn: np.ndarray  # (n, h*w) objectness softmax
    box: np.ndarray  # (n, 4) cx, cy, w, h

    def activation(self) -> np.ndarray:
        """Last backbone activation A as (N, 32, h, w)."""
        return self.pooled[-1].transpose(0, 3, 1, 2)

    def relu_outputs(self) -> list[np.ndarray]:
        return [np.maximum(z, 0).transpose(0, 3, 1, 2) for z in self.pre]


def forward(params, images):
    """Batched forward pass.

    ``images`` is (N, 3, H, W) or a single (3, H, W). Returns logits (N, C),
    boxes (N, 4) as normalized (cx, cy, w, h), and the cache.
    """
    x = np.asarray(images)
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4 or x.shape[1] != 3 or x.shape[2] < 8 or x.shape[3] < 8 or x.shape[2] % 8 or x.shape[3] % 8:
        raise ShapeMismatch(f"expected (N, 3, H, W) with H, W multiples of 8, got {x.shape}")
    a = standardize(x).transpose(0, 2, 3, 1).astype(params["conv1.w"].dtype)
    cache = Cache([], [], [], [], [], None, None, None, None, None)
    for name in ("conv1", "conv2", "conv3"):
        cache.x_shapes.append(a.shape)
        z, cols = conv_forward(a, params[f"{name}.w"], params[f"{name}.b"])
        a, route = maxpool_forward(np.maximum(z, 0))
        cache.cols.append(cols)
        cache.pre.append(z)
        cache.routes.append(route)
        cache.pooled.append(a)
    n, h, w, k = a.shape
    flat = a.reshape(n, h * w, k)
    cache.gap = flat.mean(axis=1)
    cache.logits = cache.gap @ params["cls.w"].T + params["cls.b"]
    cache.cell = flat @ params["box.w"].T + params["box.b"]
    cache.attn = softmax(cache.cell[:, :, 0], axis=1)
    gy, gx = cell_centers(h, w, a.dtype)
    sw = np.einsum("np,np->n", cache.attn, cache.cell[:, :, 1])
    sh = np.einsum("np,np->n", cache.attn, cache.cell[:, :, 2])
    cache.box = np.stack([cache.attn @ gx, cache.attn @ gy, sigmoid(sw), sigmoid(sh)], axis=1)
    return cache.logits, cache.box, cache


def loss(logits, box, target_class, target_box):
    """Mean over the batch of softmax cross-entropy plus summed squared box error."""
    logits = np.atleast_2d(logits)
    box = np.atleast_2d(box)
    target_class = np.atleast_1d(target_class)
    target_box = np.atleast_2d(target_box)
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    ce = -logp[np.arange(len(target_class)), target_class]
    sq = ((box - target_box) ** 2).sum(axis=1)
    return float(np.mean(ce + sq))


def head_backward(params, cache, dlogits, dbox):
    """Head gradients and dL/dA (NHWC) given gradients at the outputs."""
    a = cache.pooled[-1]
    n, h, w, k = a.shape
    flat = a.reshape(n, h * w, k)
    grads = {"cls.w": dlogits.T @ cache.gap, "cls.b": dlogits.sum(axis=0)}
    dflat = np.broadcast_to((dlogits @ params["cls.w"])[:, None, :] / (h * w), flat.shape)

    p = cache.attn
    gy, gx = cell_centers(h, w, a.dtype)
    bw, bh = cache.box[:, 2], cache.box[:, 3]
    dsw = dbox[:, 2] * bw * (1 - bw)
    dsh = dbox[:, 3] * bh * (1 - bh)
    dp = (
        dbox[:, 0:1] * gx[None]
        + dbox[:, 1:2] * gy[None]
        + dsw[:, None] * cache.cell[:, :, 1]
        + dsh[:, None] * cache.cell[:, :, 2]
    )
    ds = p * (dp - (p * dp).sum(axis=1, keepdims=True))
    dcell = np.stack([ds, dsw[:, None] * p, dsh[:, None] * p], axis=2)  # n, hw, 3
    grads["box.w"] = dcell.reshape(-1, BOX_OUTPUTS).T @ flat.reshape(-1, k)
    grads["box.b"] = dcell.sum(axis=(0, 1))
    dflat = dflat + dcell @ params["box.w"]
    return grads, dflat.reshape(n, h, w, k)


def backbone_backward(params, cache, da):
    grads = {}
    for li in (2, 1, 0):
        name = f"conv{li + 1}"
        z = cache.pre[li]
        dz = maxpool_backward(da, cache.routes[li], z.shape) * (z > 0)
        da, grads[f"{name}.w"], grads[f"{name}.b"] = conv_backward(
            dz, cache.cols[li], cache.x_shapes[li], params[f"{name}.w"], need_dx=li > 0
        )
    return grads


def output_grads(cache, target_class, target_box):
    """d(mean loss)/d(logits) and d(mean loss)/d(box)."""
    n = cache.logits.shape[0]
    target_class = np.atleast_1d(target_class)
    dlogits = softmax(cache.logits, axis=1)
    dlogits[np.arange(n), target_class] -= 1.0
    dbox = 2.0 * (cache.box - np.atleast_2d(target_box))
    return dlogits / n, dbox / n


def backward(params, cache, target_class, target_box, backbone=True):
    """Exact gradients of ``loss`` for every parameter (heads only if ``backbone`` is False)."""
    dlogits, dbox = output_grads(cache, target_class, target_box)
    grads, da = head_backward(params, cache, dlogits, dbox)
    if backbone:
        grads.update(backbone_backward(params, cache, da))
    return grads


def logit_activation_grad(params, cache, class_id: int):
    """d logit_c / d A for every image in the cache, shape (N, 32, h, w)."""
    n = cache.logits.shape[0]
    dlogits = np.zeros_like(cache.logits)
    dlogits[:, class_id] = 1.0
    _, da = head_backward(params, cache, dlogits, np.zeros((n, 4), dtype=cache.box.dtype))
    return da.transpose(0, 3, 1, 2)
