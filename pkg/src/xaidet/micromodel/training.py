"""Training loops, transfer regimes and inference for the micro detector."""
from __future__ import annotations

import enum
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from ..core import Box
from ..detmetrics import Detection
from ..errors import Diverged, InputError
from . import net
from .augment import augment
from .optim import OptimState, PlateauState, adamw_step, plateau_step


class TransferRegime(str, enum.Enum):
    NO_PRETRAIN = "no_pretrain"
    FREEZE_BACKBONE = "freeze_backbone"
    FINE_TUNE_ALL = "fine_tune_all"


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    batch_size: int = 16
    lr: float = 1e-3
    weight_decay: float = 0.01
    patience: int = 5
    factor: float = 0.1
    min_delta: float = 1e-4
    augmentation: bool = True
    # return the parameters of the epoch with the lowest validation loss
    restore_best: bool = False
    regime: TransferRegime = TransferRegime.FINE_TUNE_ALL

    def __post_init__(self):
        object.__setattr__(self, "regime", TransferRegime(self.regime))
        if self.epochs < 0:
            raise InputError("epochs must be >= 0")
        if self.batch_size < 1:
            raise InputError("batch_size must be >= 1")

    def to_dict(self):
        d = asdict(self)
        d["regime"] = self.regime.value
        return d


@dataclass
class History:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    lr: list = field(default_factory=list)

    def to_dict(self):
        return {"train_loss": self.train_loss, "val_loss": self.val_loss, "lr": self.lr}


@dataclass
class TrainData:
    """Arrays consumed by the training loop."""

    images: np.ndarray  # (N, 3, H, W)
    labels: np.ndarray  # (N,) 0-based class indices
    boxes: np.ndarray  # (N, 4) normalized cx, cy, w, h

    def __post_init__(self):
        if not (len(self.images) == len(self.labels) == len(self.boxes)):
            raise InputError("images, labels and boxes must have the same length")

    def __len__(self):
        return len(self.labels)


def _streams(seed: int):
    """Independent generators for backbone init, head init, batch order and augmentation."""
    return [np.random.default_rng(s) for s in np.random.SeedSequence(int(seed)).spawn(4)]


def _norm_to_box(b, h, w) -> Box:
    cx, cy, bw, bh = b
    return Box((cx - bw / 2) * w, (cy - bh / 2) * h, bw * w, bh * h)


def _box_to_norm(box: Box, h, w):
    return [(box.x_min + box.width / 2) / w, (box.y_min + box.height / 2) / h, box.width / w, box.height / h]


def _augment_batch(images, boxes, rng):
    _, _, h, w = images.shape
    out_i = np.empty_like(images)
    out_b = np.empty_like(boxes)
    for n in range(len(images)):
        img, box = augment(images[n], _norm_to_box(boxes[n], h, w), rng)
        out_i[n] = img
        out_b[n] = _box_to_norm(box, h, w)
    return out_i, out_b


def evaluate_loss(params, data: TrainData, batch_size: int = 64) -> float:
    total = 0.0
    for s in range(0, len(data), batch_size):
        lg, bx, _ = net.forward(params, data.images[s : s + batch_size])
        total += net.loss(lg, bx, data.labels[s : s + batch_size], data.boxes[s : s + batch_size]) * len(lg)
    return total / len(data)


def fit(params, train_data: TrainData, val_data: TrainData | None, config: TrainConfig, seed: int, frozen=()):
    """Minibatch AdamW with plateau scheduling; updates ``params`` in place."""
    _, _, order_rng, aug_rng = _streams(seed)
    opt = OptimState(lr=config.lr, weight_decay=config.weight_decay)
    sched = PlateauState(current_lr=config.lr, patience=config.patience, factor=config.factor, min_delta=config.min_delta)
    history = History()
    backbone_trainable = not set(net.BACKBONE) <= set(frozen)
    best_val, best_params = math.inf, None
    for _ in range(config.epochs):
        perm = order_rng.permutation(len(train_data))
        opt.lr = sched.current_lr
        running, seen = 0.0, 0
        for s in range(0, len(perm), config.batch_size):
            idx = np.sort(perm[s : s + config.batch_size])
            x, b = train_data.images[idx], train_data.boxes[idx]
            if config.augmentation:
                x, b = _augment_batch(x, b, aug_rng)
            y = train_data.labels[idx]
            lg, bx, cache = net.forward(params, x)
            batch_loss = net.loss(lg, bx, y, b)
            if not math.isfinite(batch_loss):
                raise Diverged(f"non-finite training loss after {len(history.train_loss)} epochs")
            grads = net.backward(params, cache, y, b, backbone=backbone_trainable)
            adamw_step(params, grads, opt, frozen=frozen)
            running += batch_loss * len(idx)
            seen += len(idx)
        history.train_loss.append(running / seen)
        history.lr.append(sched.current_lr)
        if val_data is not None and len(val_data):
            val = evaluate_loss(params, val_data)
            if not math.isfinite(val):
                raise Diverged("non-finite validation loss")
            history.val_loss.append(val)
            plateau_step(sched, val)
            if config.restore_best and val < best_val:
                best_val, best_params = val, {k: v.copy() for k, v in params.items()}
    if best_params is not None:
        for k, v in best_params.items():
            params[k][...] = v
    return params, history


def pretrain_model(train_data: TrainData, val_data: TrainData | None, config: TrainConfig, seed: int):
    """Train the whole model, heads included, on the source domain."""
    backbone_rng, head_rng, _, _ = _streams(seed)
    params = {**net.init_backbone(backbone_rng), **net.init_heads(head_rng)}
    return fit(params, train_data, val_data, config, seed)


def pretrain(train_data: TrainData, val_data: TrainData | None, config: TrainConfig, seed: int):
    """Train on the source domain and export only the backbone."""
    params, history = pretrain_model(train_data, val_data, config, seed)
    return {k: params[k].copy() for k in net.BACKBONE}, history


def initial_params(regime: TransferRegime, seed: int, pretrained: dict | None = None) -> dict:
    """Random heads always; backbone random under NO_PRETRAIN, else copied from ``pretrained``."""
    regime = TransferRegime(regime)
    backbone_rng, head_rng, _, _ = _streams(seed)
    random_backbone = net.init_backbone(backbone_rng)
    heads = net.init_heads(head_rng)
    if regime is TransferRegime.NO_PRETRAIN:
        backbone = random_backbone
    else:
        if pretrained is None:
            raise InputError(f"regime {regime.value} needs pretrained backbone weights")
        missing = set(net.BACKBONE) - set(pretrained)
        if missing:
            raise InputError(f"pretrained weights lack {sorted(missing)}")
        backbone = {k: np.array(pretrained[k], dtype=np.float64, copy=True) for k in net.BACKBONE}
    return {**backbone, **heads}


def train(
    train_data: TrainData,
    val_data: TrainData | None,
    regime: TransferRegime,
    config: TrainConfig,
    seed: int,
    pretrained: dict | None = None,
):
    regime = TransferRegime(regime)
    params = initial_params(regime, seed, pretrained)
    frozen = net.BACKBONE if regime is TransferRegime.FREEZE_BACKBONE else ()
    return fit(params, train_data, val_data, config, seed, frozen=frozen)


def predict_detection(params, image: np.ndarray, image_id: int, score_threshold: float = 0.0) -> list[Detection]:
    """At most one detection: argmax class, its softmax probability, box in pixels."""
    logits, box, _ = net.forward(params, image)
    probs = net.softmax(logits[0])
    cls = int(np.argmax(probs))
    score = float(probs[cls])
    if score < score_threshold:
        return []
    _, h, w = image.shape
    return [Detection(int(image_id), cls + 1, _norm_to_box(box[0], h, w), score)]


def predict_batch(params, images: np.ndarray, image_ids, score_threshold: float = 0.0, batch_size: int = 64):
    out = []
    _, _, h, w = images.shape
    for s in range(0, len(images), batch_size):
        logits, box, _ = net.forward(params, images[s : s + batch_size])
        probs = net.softmax(logits, axis=1)
        for n in range(len(logits)):
            cls = int(np.argmax(probs[n]))
            score = float(probs[n, cls])
            if score >= score_threshold:
                out.append(Detection(int(image_ids[s + n]), cls + 1, _norm_to_box(box[n], h, w), score))
    return out
