"""Latent-trajectory generative modeling of image sequences.

Per-timestep invertible flows carry a single latent draw across a whole
sequence; training, likelihood evaluation, imputation and generation all
run on a small numpy-based reverse-mode tape.
"""

__version__ = "0.1.0"

from .datasets import SequenceBatch, make_dataset, read_dataset, write_dataset
from .flows import FlowChain, IafBlock, SingularFlowError, chain_log_prior
from .model import LongitudinalModel, ModelSpec, build_model
from .tensor import (GraphError, NumericsError, Tensor, no_grad,
                     set_precision, using_precision)
from .training import TrainConfig, sequence_loss, train, warmup_loss

__all__ = [
    "__version__",
    "SequenceBatch", "make_dataset", "read_dataset", "write_dataset",
    "FlowChain", "IafBlock", "SingularFlowError", "chain_log_prior",
    "LongitudinalModel", "ModelSpec", "build_model",
    "GraphError", "NumericsError", "Tensor", "no_grad",
    "set_precision", "using_precision",
    "TrainConfig", "sequence_loss", "train", "warmup_loss",
]
