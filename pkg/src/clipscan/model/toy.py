"""A small trainable 3D CNN clip classifier.

Architecture: two blocks of [3x3x3 conv (same padding) -> ReLU -> 2x max-pool]
with channels 3 -> 8 -> 16, global average pooling and an affine head.
Gradients come from torch autograd; the SGD update is applied by hand.
"""

from __future__ import annotations

import base64
import hashlib
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted
from torch import nn

from .._validation import check_clip_batch, clip_array
from .functional import softmax

FORMAT = "clipscan-toy/1"
_DTYPES = {"float32": torch.float32, "float64": torch.float64}


class TrainingDivergedError(RuntimeError):
    """Raised when a training step produces a non-finite loss."""


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.1
    weight_decay: float = 1e-5
    momentum: float = 0.9
    batch_size: int = 8
    epochs: int = 1

    def __post_init__(self):
        if self.learning_rate < 0 or self.weight_decay < 0:
            raise ValueError("learning_rate and weight_decay must be non-negative")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be positive and epochs non-negative")


class ToyNet(nn.Module):
    def __init__(self, n_classes: int = 2):
        super().__init__()
        self.conv1 = nn.Conv3d(3, 8, kernel_size=3, stride=1, padding=1)
        self.conv2 = nn.Conv3d(8, 16, kernel_size=3, stride=1, padding=1)
        self.pool = nn.MaxPool3d(2)
        self.head = nn.Linear(16, n_classes)

    def forward(self, x):
        x = self.pool(torch.relu(self.conv1(x)))
        x = self.pool(torch.relu(self.conv2(x)))
        x = x.mean(dim=(2, 3, 4))
        return self.head(x)


def init_parameters(net: ToyNet, seed: int) -> None:
    """He-uniform conv kernels, uniform head weights, zero biases."""
    g = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for conv in (net.conv1, net.conv2):
            nn.init.kaiming_uniform_(conv.weight, nonlinearity="relu", generator=g)
            conv.bias.zero_()
        bound = 1.0 / math.sqrt(net.head.in_features)
        nn.init.uniform_(net.head.weight, -bound, bound, generator=g)
        net.head.bias.zero_()


class ToyClipClassifier(ClassifierMixin, BaseEstimator):
    """Seed-reproducible toy clip classifier trained by momentum SGD.

    ``X`` is a ``(N, 3, T, S, S)`` clip array and ``y`` integer labels
    (0 = non-seizure, 1 = seizure by default).
    """

    def __init__(
        self,
        n_classes=2,
        clip_len=64,
        size=112,
        seed=0,
        learning_rate=0.1,
        weight_decay=1e-5,
        momentum=0.9,
        batch_size=8,
        epochs=1,
        dtype="float64",
    ):
        self.n_classes = n_classes
        self.clip_len = clip_len
        self.size = size
        self.seed = seed
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.momentum = momentum
        self.batch_size = batch_size
        self.epochs = epochs
        self.dtype = dtype

    # -- state -----------------------------------------------------------
    @property
    def train_config(self) -> TrainConfig:
        return TrainConfig(self.learning_rate, self.weight_decay, self.momentum, self.batch_size, self.epochs)

    @property
    def torch_dtype(self):
        if self.dtype not in _DTYPES:
            raise ValueError(f"dtype must be one of {sorted(_DTYPES)}")
        return _DTYPES[self.dtype]

    def initialize(self):
        """(Re)create parameters from ``seed`` and clear the momentum buffer."""
        self.train_config  # validates
        self.net_ = ToyNet(self.n_classes).to(self.torch_dtype)
        init_parameters(self.net_, self.seed)
        self.velocity_ = {name: torch.zeros_like(p) for name, p in self.net_.named_parameters()}
        self.classes_ = np.arange(self.n_classes)
        self.n_steps_ = 0
        self.epochs_done_ = 0
        self.loss_history_ = []
        return self

    def _ensure_initialized(self):
        if not hasattr(self, "net_"):
            self.initialize()

    @property
    def input_shape(self):
        return (3, self.clip_len, self.size, self.size)

    # -- training --------------------------------------------------------
    def partial_fit(self, X, y, classes=None):
        """One SGD step on the batch ``(X, y)``."""
        self._ensure_initialized()
        backward_and_step(self, X, y, self.train_config)
        return self

    def fit(self, X, y):
        self.initialize()
        X = check_clip_batch(X, self.input_shape)
        y = np.asarray(y, dtype=np.int64)
        for _ in range(self.epochs):
            rng = np.random.default_rng([int(self.seed), self.epochs_done_])
            order = rng.permutation(len(X))
            for lo in range(0, len(X), self.batch_size):
                b = order[lo : lo + self.batch_size]
                backward_and_step(self, X[b], y[b], self.train_config)
            self.epochs_done_ += 1
        return self

    # -- inference -------------------------------------------------------
    def decision_function(self, X) -> np.ndarray:
        check_is_fitted(self, "net_")
        return forward(self, X)

    def predict_proba(self, X) -> np.ndarray:
        return softmax(self.decision_function(X))

    def predict(self, X) -> np.ndarray:
        return self.classes_[np.argmax(self.decision_function(X), axis=-1)]

    # -- parameters as arrays ---------------------------------------------
    def parameter_arrays(self) -> dict[str, np.ndarray]:
        check_is_fitted(self, "net_")
        return {k: p.detach().cpu().numpy().copy() for k, p in self.net_.named_parameters()}

    @property
    def n_parameters(self) -> int:
        return sum(p.numel() for p in self.net_.parameters())


def forward(model: ToyClipClassifier, clip) -> np.ndarray:
    """Raw class scores for one clip ``(3, T, S, S)`` or a batch ``(N, 3, T, S, S)``."""
    data = clip_array(clip)
    single = np.ndim(data) == 4
    X = check_clip_batch(data[None] if single else data, model.input_shape)
    with torch.no_grad():
        out = model.net_(torch.from_numpy(X).to(model.torch_dtype)).numpy().astype(np.float64)
    return out[0] if single else out


def _labels_to_targets(y, n_classes: int) -> torch.Tensor:
    y = np.asarray(y)
    if y.ndim == 2:
        from .functional import check_one_hot

        y = np.argmax(check_one_hot(y), axis=1)
    y = y.astype(np.int64)
    if y.min(initial=0) < 0 or y.max(initial=0) >= n_classes:
        raise ValueError("label out of range")
    return torch.from_numpy(y)


def batch_loss(model: ToyClipClassifier, X, y) -> torch.Tensor:
    """Mean cross-entropy over the batch as a differentiable torch scalar."""
    X = check_clip_batch(clip_array(X), model.input_shape)
    logits = model.net_(torch.from_numpy(X).to(model.torch_dtype))
    return nn.functional.cross_entropy(logits, _labels_to_targets(y, model.n_classes))


def sgd_update(named_params, velocity: dict, cfg: TrainConfig) -> None:
    """In-place momentum SGD with L2 weight decay folded into the buffer.

    Parameters without a ``.grad`` are treated as having a zero data gradient.
    """
    with torch.no_grad():
        for name, p in named_params:
            v = velocity[name]
            v.mul_(cfg.momentum)
            if p.grad is not None:
                v.add_(p.grad)
            v.add_(p, alpha=cfg.weight_decay)
            p.sub_(v, alpha=cfg.learning_rate)


def backward_and_step(model: ToyClipClassifier, X, y, cfg: TrainConfig) -> float:
    """Mean-CE gradient and one momentum SGD update; returns the pre-update loss.

    ``v <- m * v + g + wd * theta``; ``theta <- theta - lr * v``.
    """
    model._ensure_initialized()
    if len(X) == 0:
        raise ValueError("empty training batch")
    model.net_.zero_grad(set_to_none=True)
    loss = batch_loss(model, X, y)
    value = float(loss.detach())
    if not math.isfinite(value):
        raise TrainingDivergedError(f"non-finite loss {value} at step {model.n_steps_}")
    loss.backward()
    sgd_update(model.net_.named_parameters(), model.velocity_, cfg)
    model.n_steps_ += 1
    model.loss_history_.append(value)
    return value


# -- persistence ------------------------------------------------------------


def _encode(arr: np.ndarray) -> dict:
    arr = np.ascontiguousarray(arr)
    return {
        "shape": list(arr.shape),
        "dtype": arr.dtype.str,
        "data": base64.b64encode(arr.tobytes()).decode("ascii"),
    }


def _decode(d: dict) -> np.ndarray:
    raw = base64.b64decode(d["data"])
    return np.frombuffer(raw, dtype=np.dtype(d["dtype"])).reshape(d["shape"]).copy()


def model_to_dict(model: ToyClipClassifier, metadata: dict | None = None) -> dict:
    check_is_fitted(model, "net_")
    params = model.parameter_arrays()
    velocity = {k: v.cpu().numpy() for k, v in model.velocity_.items()}
    return {
        "format": FORMAT,
        "params": model.get_params(),
        "state": {
            "n_steps": model.n_steps_,
            "epochs_done": model.epochs_done_,
            "loss_history": [float(x) for x in model.loss_history_],
        },
        "weights": {k: _encode(v) for k, v in params.items()},
        "velocity": {k: _encode(v) for k, v in velocity.items()},
        "metadata": metadata or {},
    }


def model_from_dict(d: dict) -> ToyClipClassifier:
    if d.get("format") != FORMAT:
        raise ValueError(f"not a toy model file (format={d.get('format')!r})")
    model = ToyClipClassifier(**d["params"]).initialize()
    with torch.no_grad():
        for name, p in model.net_.named_parameters():
            p.copy_(torch.from_numpy(_decode(d["weights"][name])))
            model.velocity_[name].copy_(torch.from_numpy(_decode(d["velocity"][name])))
    model.n_steps_ = d["state"]["n_steps"]
    model.epochs_done_ = d["state"]["epochs_done"]
    model.loss_history_ = list(d["state"]["loss_history"])
    model.metadata_ = d.get("metadata", {})
    return model


def save_model(model: ToyClipClassifier, path, metadata: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    text = json.dumps(model_to_dict(model, metadata), sort_keys=True, indent=1)
    path.write_text(text + "\n", encoding="utf-8")
    return path


def load_model(path) -> ToyClipClassifier:
    return model_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def weights_digest(model: ToyClipClassifier) -> str:
    h = hashlib.sha256()
    for name, arr in sorted(model.parameter_arrays().items()):
        h.update(name.encode())
        h.update(arr.tobytes())
    return h.hexdigest()


def train_config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
