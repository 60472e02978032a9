"""Clip classification: score math, the toy 3D CNN and the backend protocol."""

from .backend import (
    BackendClassifier,
    BackendHandle,
    ConstantScorer,
    ToyScorer,
    backend_infer,
    serve,
    serve_tcp,
)
from .functional import ce_loss, check_one_hot, log_softmax, one_hot, softmax
from .protocol import (
    BackendError,
    BackendTimeout,
    DimensionMismatch,
    ProtocolError,
    TransportError,
    decode_clip_frame,
    encode_clip,
)
from .toy import (
    ToyClipClassifier,
    TrainConfig,
    TrainingDivergedError,
    backward_and_step,
    batch_loss,
    forward,
    load_model,
    save_model,
    sgd_update,
    weights_digest,
)

__all__ = [
    "BackendClassifier",
    "BackendError",
    "BackendHandle",
    "BackendTimeout",
    "ConstantScorer",
    "DimensionMismatch",
    "ProtocolError",
    "ToyClipClassifier",
    "ToyScorer",
    "TrainConfig",
    "TrainingDivergedError",
    "TransportError",
    "backend_infer",
    "backward_and_step",
    "batch_loss",
    "ce_loss",
    "check_one_hot",
    "decode_clip_frame",
    "encode_clip",
    "forward",
    "load_model",
    "log_softmax",
    "one_hot",
    "save_model",
    "serve",
    "serve_tcp",
    "sgd_update",
    "softmax",
    "weights_digest",
]
