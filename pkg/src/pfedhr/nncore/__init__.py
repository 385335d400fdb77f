"""Minimal numpy neural-network engine used by clients and the server."""

from .checkpoint import dumps, load, loads, save
from .layers import (
    DTYPE,
    STITCH,
    Block,
    ChannelProjectAdapter,
    ConvUnit,
    DenseAdapter,
    FCUnit,
    Linear,
    OpType,
    Provenance,
)
from .losses import Loss, LossKind, compute_loss, cross_entropy, kl_divergence, nt_xent, softmax
from .model import (
    SGD,
    Model,
    SGDConfig,
    accuracy,
    activations,
    augment,
    backward,
    backward_and_step,
    forward,
    forward_features,
    iterate_minibatches,
    predict_logits,
)

__all__ = [
    "DTYPE", "STITCH", "Block", "ChannelProjectAdapter", "ConvUnit", "DenseAdapter", "FCUnit", "Linear",
    "OpType", "Provenance", "Loss", "LossKind", "compute_loss", "cross_entropy", "kl_divergence",
    "nt_xent", "softmax", "SGD", "Model", "SGDConfig", "accuracy", "activations", "augment",
    "backward", "backward_and_step", "forward", "forward_features", "iterate_minibatches",
    "predict_logits", "dumps", "loads", "save", "load",
]
