"""scikit-learn compatible classifier built from DCLS layers.

The architecture is described by a compact layer string, e.g.::

    "pw4 dcls/2 lrelu pw4 dcls lrelu gmax fc"

Tokens: ``pw<C>`` pointwise conv to C channels; ``dcls`` depthwise DCLS conv
(``dcls/<stride>`` to subsample, ``dcls@<tag>`` to share positions and widths
with every other ``dcls@<tag>`` layer); ``relu`` or leaky ``lrelu``; ``gmax`` / ``gavg`` global
pooling; ``fc`` final linear layer onto the classes.
"""
from __future__ import annotations

import re

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .exceptions import ConfigError, NonFiniteError
from .interp import InterpolationKind
from .kernelgen import DclsGeometry
from .nn import (
    DclsConv,
    GlobalPool,
    Linear,
    Pointwise,
    ReLU,
    Sequential,
    SyncGroup,
    softmax,
    softmax_cross_entropy,
)
from .training import (
    DEFAULT_LR_SCALE,
    auto_sync_groups,
    build_param_groups,
    init_dense,
    init_params,
    make_optimizer,
)

DEFAULT_LAYERS = "pw4 dcls/2 lrelu pw4 dcls lrelu gmax fc"
LEAKY_SLOPE = 0.1
_DCLS_TOKEN = re.compile(r"^dcls(?:/(\d+))?(?:@(\w+))?$")


def check_images(X, dtype=np.float64) -> np.ndarray:
    """Validate a batch of images and return it as ``(N, C, *spatial)``.

    2-D input ``(N, L)`` is read as single-channel 1-D signals; 3-D input
    ``(N, H, W)`` as single-channel images.
    """
    X = np.asarray(X, dtype=dtype)
    if X.ndim == 2:
        X = X[:, None, :]
    elif X.ndim == 3:
        X = X[:, None]
    if X.ndim not in (3, 4, 5):
        raise ValueError(f"expected (N, C, *spatial) images, got shape {X.shape}")
    if len(X) == 0:
        raise ValueError("empty input")
    if not np.all(np.isfinite(X)):
        raise ValueError("input contains NaN or Inf")
    return np.ascontiguousarray(X)


def parse_layers(spec: str) -> list[tuple]:
    tokens = spec.replace(",", " ").split()
    out = []
    for tok in tokens:
        tok = tok.strip().lower()
        if m := _DCLS_TOKEN.match(tok):
            out.append(("dcls", int(m.group(1) or 1), m.group(2)))
        elif m := re.fullmatch(r"pw(\d+)", tok):
            out.append(("pw", int(m.group(1))))
        elif tok in ("relu", "fc"):
            out.append((tok,))
        elif tok == "lrelu":
            out.append(("relu", LEAKY_SLOPE))
        elif tok in ("gmax", "gavg"):
            out.append(("pool", tok[1:]))
        else:
            raise ConfigError(f"unknown layer token {tok!r}")
    if not out or out[-1] != ("fc",):
        raise ConfigError("layer list must end with 'fc'")
    if not any(t[0] == "pool" for t in out):
        raise ConfigError("layer list needs a global pooling layer ('gmax' or 'gavg') before 'fc'")
    return out


def build_network(
    layers: str,
    in_channels: int,
    n_classes: int,
    kind,
    kernel_count: int,
    dilated_kernel_size,
    rng,
    sync_positions: bool = False,
    rank: int = 2,
) -> Sequential:
    """Instantiate and initialize the layer stack described by ``layers``."""
    kind = InterpolationKind.from_name(kind)
    size = tuple(np.broadcast_to(np.atleast_1d(dilated_kernel_size), (rank,)).tolist())
    geom = DclsGeometry(size, kernel_count)
    plan = parse_layers(layers)

    if sync_positions:
        # untagged dcls layers with the same channel count share positions
        channels, sigs = in_channels, {}
        for i, tok in enumerate(plan):
            if tok[0] == "pw":
                channels = tok[1]
            elif tok[0] == "dcls" and tok[2] is None:
                sigs[i] = (channels, 1, kernel_count)
        for names in auto_sync_groups(sigs):
            for i in names:
                plan[i] = ("dcls", plan[i][1], f"auto{names[0]}")

    built, syncs, channels, pooled = [], {}, in_channels, False
    for i, tok in enumerate(plan):
        name = f"l{i}"
        if tok[0] == "pw":
            if pooled:
                raise ConfigError("pointwise layer after global pooling")
            layer = Pointwise(name, channels, tok[1])
            layer.weight.value[...] = init_dense((tok[1], channels), channels, rng)
            channels = tok[1]
        elif tok[0] == "dcls":
            if pooled:
                raise ConfigError("dcls layer after global pooling")
            sync = None
            if tok[2] is not None:
                if tok[2] not in syncs:
                    syncs[tok[2]] = SyncGroup(f"sync_{tok[2]}", (channels, 1, kernel_count), geom.rank)
                sync = syncs[tok[2]]
            layer = DclsConv(name, channels, channels, kernel_count, size, kind,
                             groups=channels, stride=tok[1], sync=sync)
            params = init_params(geom, kind, (channels, 1), rng)
            if sync is not None and len(sync.members) > 1:
                # shared positions keep the first member's draw
                params.positions = tuple(p.value for p in sync.positions)
                params.sigmas = tuple(s.value for s in sync.sigmas)
            layer.set_dcls_params(params)
        elif tok[0] == "relu":
            layer = ReLU(*tok[1:])
        elif tok[0] == "pool":
            layer = GlobalPool(tok[1])
            pooled = True
        else:
            if not pooled:
                raise ConfigError("'fc' needs a global pooling layer before it")
            layer = Linear(name, channels, n_classes)
            layer.weight.value[...] = init_dense((n_classes, channels), channels, rng)
        built.append(layer)
    return Sequential(built)


class DclsClassifier(ClassifierMixin, BaseEstimator):
    """Image classifier whose spatial mixing is done by DCLS depthwise layers.

    Parameters
    ----------
    layers : str
        Layer string, see the module docstring.
    kind : {"gauss", "triangle", "bilinear"}
        Interpolation used to place kernel elements.
    kernel_count : int
        Learnable elements per kernel.
    dilated_kernel_size : int or tuple
        Extent of the grid the elements move in.
    optimizer : {"adamw", "sgd"}
    lr, weight_decay : float
        Base learning rate and decoupled weight decay (weights only).
    lr_scale_positions : float
        Learning-rate multiplier for positions and widths.
    epochs, batch_size : int
    sync_positions : bool
        Share positions/widths across untagged DCLS layers with equal shape.
    dtype : {"float32", "float64"}
        Activation precision.
    random_state : int
    """

    def __init__(
        self,
        layers=DEFAULT_LAYERS,
        kind="gauss",
        kernel_count=6,
        dilated_kernel_size=23,
        optimizer="adamw",
        lr=0.005,
        weight_decay=0.0,
        lr_scale_positions=DEFAULT_LR_SCALE,
        epochs=15,
        batch_size=16,
        sync_positions=False,
        dtype="float32",
        random_state=0,
    ):
        self.layers = layers
        self.kind = kind
        self.kernel_count = kernel_count
        self.dilated_kernel_size = dilated_kernel_size
        self.optimizer = optimizer
        self.lr = lr
        self.weight_decay = weight_decay
        self.lr_scale_positions = lr_scale_positions
        self.epochs = epochs
        self.batch_size = batch_size
        self.sync_positions = sync_positions
        self.dtype = dtype
        self.random_state = random_state

    # -- setup -----------------------------------------------------------------

    def _initialize(self, X, classes):
        self.classes_ = np.asarray(classes)
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        self.input_shape_ = X.shape[1:]
        self.rng_ = np.random.default_rng(self.random_state)
        self.net_ = build_network(
            self.layers, X.shape[1], len(self.classes_), self.kind, self.kernel_count,
            self.dilated_kernel_size, self.rng_, self.sync_positions, rank=X.ndim - 2,
        )
        self.optimizer_ = make_optimizer(self.optimizer, self.lr, self.weight_decay)
        self.param_groups_ = build_param_groups(self.net_.params(), self.lr_scale_positions)
        self.history_ = []
        return self

    def initialize(self, X, y=None, classes=None):
        """Build and initialize the network without training (``epochs=0`` state)."""
        X = check_images(X)
        if classes is None:
            classes = np.unique(y)
        return self._initialize(X, classes)

    # -- training --------------------------------------------------------------

    def fit(self, X, y, X_val=None, y_val=None, callback=None, classes=None):
        """Train from scratch. ``callback(self, record)`` runs after each epoch."""
        X = check_images(X)
        y = np.asarray(y)
        if len(X) != len(y):
            raise ValueError(f"{len(X)} samples but {len(y)} labels")
        self._initialize(X, np.unique(y) if classes is None else classes)
        if X_val is not None:
            X_val = check_images(X_val)
        for _ in range(self.epochs):
            record = self.train_epoch(X, y, X_val, y_val)
            if callback is not None:
                callback(self, record)
        return self

    def _encode(self, y):
        idx = np.searchsorted(self.classes_, y)
        if np.any(idx >= len(self.classes_)) or np.any(self.classes_[np.minimum(idx, len(self.classes_) - 1)] != y):
            raise ValueError("labels not seen at initialization")
        return idx

    def train_epoch(self, X, y, X_val=None, y_val=None) -> dict:
        check_is_fitted(self, "net_")
        dtype = np.dtype(self.dtype)
        targets = self._encode(np.asarray(y))
        order = self.rng_.permutation(len(X))
        total = 0.0
        for start in range(0, len(X), self.batch_size):
            idx = order[start:start + self.batch_size]
            xb = X[idx].astype(dtype)
            self.net_.zero_grad()
            logits = self.net_.forward(xb)
            loss, grad = softmax_cross_entropy(logits.astype(np.float64), targets[idx])
            if not np.isfinite(loss):
                raise NonFiniteError(f"non-finite training loss at epoch {len(self.history_) + 1}")
            self.net_.backward(grad.astype(dtype))
            self.optimizer_.step(self.param_groups_)
            self.net_.post_step()
            total += loss * len(idx)
        record = {"epoch": len(self.history_) + 1, "train_loss": total / len(X)}
        record["val_acc"] = self.score(X_val, y_val) if X_val is not None else float("nan")
        self.history_.append(record)
        return record

    # -- inference -------------------------------------------------------------

    def decision_function(self, X, batch_size=256):
        check_is_fitted(self, "net_")
        X = check_images(X)
        if X.shape[1:] != tuple(self.input_shape_):
            raise ValueError(f"expected inputs of shape {tuple(self.input_shape_)}, got {X.shape[1:]}")
        dtype = np.dtype(self.dtype)
        out = [self.net_.forward(X[i:i + batch_size].astype(dtype)) for i in range(0, len(X), batch_size)]
        return np.concatenate(out).astype(np.float64)

    def predict_proba(self, X):
        return softmax(self.decision_function(X))

    def predict(self, X):
        return self.classes_[self.decision_function(X).argmax(axis=1)]

    def constructed_kernels(self) -> list[np.ndarray]:
        """Dense kernels of every DCLS layer, in network order."""
        check_is_fitted(self, "net_")
        return [layer.kernel().kernel for layer in self.net_.dcls_layers()]

    # -- state -----------------------------------------------------------------

    def state_arrays(self) -> dict[str, np.ndarray]:
        check_is_fitted(self, "net_")
        arrays = {f"param/{p.name}": p.value for p in self.net_.params()}
        opt = self.optimizer_.state_dict()
        arrays.update({f"opt/{k}": v for k, v in opt["arrays"].items()})
        arrays["classes"] = np.asarray(self.classes_)
        return arrays

    def state_meta(self) -> dict:
        return {
            "estimator_params": self.get_params(),
            "input_shape": list(self.input_shape_),
            "optimizer_scalars": self.optimizer_.state_dict()["scalars"],
            "rng_state": self.rng_.bit_generator.state,
            "history": self.history_,
        }

    def load_state(self, arrays, meta):
        self.set_params(**meta["estimator_params"])
        shape = tuple(meta["input_shape"])
        self._initialize(np.zeros((1,) + shape), arrays["classes"])
        for p in self.net_.params():
            p.value[...] = arrays[f"param/{p.name}"]
        opt_arrays = {k[4:]: v for k, v in arrays.items() if k.startswith("opt/")}
        self.optimizer_.load_state_dict({"scalars": meta["optimizer_scalars"], "arrays": opt_arrays}, self.net_.params())
        self.rng_.bit_generator.state = meta["rng_state"]
        self.history_ = list(meta["history"])
        return self
