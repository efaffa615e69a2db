"""Reference multitask network, losses, optimiser, training and saliency."""

from .checkpoint import load_checkpoint, read_train_log, save_checkpoint, write_train_log
from .losses import (
    DEFAULT_PRICES,
    LossSpec,
    age_class_weights,
    class_weights,
    clinical_loss,
    cross_entropy,
    hospital_weights,
    sex_class_weight,
    weighted_bce,
)
from .network import (
    VARIANTS,
    ModelConfig,
    Network,
    dropout_mask,
    forward,
    init_network,
    input_gradient,
    loss_and_grad,
    loss_value,
    stack_v1_to_v2,
    targets_for,
)
from .optim import AdamState, adam_step
from .saliency import saliency_map
from .training import (
    EpochLog,
    TrainConfig,
    TrainResult,
    fit,
    merge_predictions,
    predict,
    prepare_inputs,
    train,
)
