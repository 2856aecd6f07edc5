"""Micro object detector: network, optimizer, augmentation, GradCAM, training."""
from .augment import augment
from .checkpoint import load_params, save_params
from .gradcam import grad_cam
from .net import BACKBONE, HEADS, NUM_CLASSES, PARAM_NAMES, backward, forward, init_params, loss
from .optim import OptimState, PlateauState, adamw_step, plateau_step
from .training import (
    TrainConfig,
    TrainData,
    TransferRegime,
    predict_batch,
    predict_detection,
    pretrain,
    train,
)
