"""Layers, optimizers, training loop and the 2x2x2 model pool."""

from __future__ import annotations

import contextlib
import hashlib
import io
import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import BatchNormState, Tensor, Tape
from .data import AugmentParams, Dataset, augment

CHECKPOINT_MAGIC = b"OFM1"
EVAL_BATCH = 512


class CapabilityError(RuntimeError):
    """The model cannot provide what was asked of it (e.g. gradients)."""


class TrainingError(RuntimeError):
    pass


# ------------------------------------------------------------------ configs


@dataclass(frozen=True)
class TrainingConfig:
    optimizer: str = "sgd"  # sgd | sgd_momentum | adam
    learning_rate: float = 0.01
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    lr_decay: float = 0.0
    l2_lambda: float = 0.0
    batch_size: int = 32
    epochs: int = 10
    dropout_rate: float = 0.0
    use_batchnorm: bool = False
    use_augmentation: bool = False
    normalize_inputs: bool = True
    max_shift: int = 1
    max_rotation: float = 10.0
    flip_probability: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.optimizer not in ("sgd", "sgd_momentum", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("Adam betas must lie in (0, 1)")
        if self.lr_decay < 0 or self.l2_lambda < 0:
            raise ValueError("lr_decay and l2_lambda must be nonnegative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if not 0 <= self.dropout_rate < 1:
            raise ValueError("dropout_rate must lie in [0, 1)")

    @property
    def input_range(self) -> str:
        return "unit" if self.normalize_inputs else "byte"

    @property
    def augment_params(self) -> AugmentParams:
        return AugmentParams(self.max_shift, self.max_rotation, self.flip_probability)


def reference_recipe(regularized: bool, family: str = "conv_plain", **overrides) -> TrainingConfig:
    """Full-scale training recipe for a regularized or unregularized pool model.

    Epoch counts are left at the desk-scale default; pass ``epochs=`` to change.
    """
    if family == "conv_plain":
        if regularized:
            base = dict(optimizer="sgd_momentum", learning_rate=0.1, momentum=0.9, lr_decay=1e-6,
                        l2_lambda=0.005, batch_size=128, dropout_rate=0.3, use_batchnorm=True,
                        use_augmentation=True, normalize_inputs=True)
        else:
            base = dict(optimizer="sgd", learning_rate=1e-4, batch_size=32, normalize_inputs=False)
    elif family == "conv_residual":
        if regularized:
            base = dict(optimizer="adam", learning_rate=1e-3, l2_lambda=0.005, batch_size=128,
                        use_batchnorm=True, use_augmentation=True, normalize_inputs=True)
        else:
            base = dict(optimizer="adam", learning_rate=1e-4, batch_size=16, normalize_inputs=False)
    else:
        raise ValueError(f"unknown architecture family {family!r}")
    base.update(overrides)
    return TrainingConfig(**base)


@dataclass(frozen=True)
class ModelPoolSpec:
    regularized: bool
    capacity: str = "small"  # small | large
    train_size: str = "full"  # full | reduced
    architecture_family: str = "conv_plain"  # conv_plain | conv_residual

    def __post_init__(self):
        if self.capacity not in ("small", "large"):
            raise ValueError(f"capacity must be small or large, got {self.capacity!r}")
        if self.train_size not in ("full", "reduced"):
            raise ValueError(f"train_size must be full or reduced, got {self.train_size!r}")
        if self.architecture_family not in ("conv_plain", "conv_residual"):
            raise ValueError(f"unknown family {self.architecture_family!r}")

    @property
    def pool_id(self) -> str:
        """C1..C8; regularization varies fastest, then capacity, then training-set size."""
        index = (0 if self.regularized else 1) + (2 if self.capacity == "large" else 0)
        index += 4 if self.train_size == "reduced" else 0
        return f"C{index + 1}"


def model_pool(family: str = "conv_plain") -> List[ModelPoolSpec]:
    """The eight (regularized, capacity, train_size) configurations, ordered C1..C8."""
    specs = [
        ModelPoolSpec(reg, cap, size, family)
        for size in ("full", "reduced")
        for cap in ("small", "large")
        for reg in (True, False)
    ]
    return sorted(specs, key=lambda s: int(s.pool_id[1:]))


# ------------------------------------------------------------------- layers


@dataclass
class Context:
    train: bool = False
    rng: Optional[np.random.Generator] = None


class Layer:
    kind = "layer"

    def params(self) -> List[Tuple[str, Tensor]]:
        return []

    def states(self) -> List[Tuple[str, BatchNormState]]:
        return []

    def config(self) -> dict:
        return {}

    def spec(self) -> dict:
        return {"kind": self.kind, **self.config()}

    def __call__(self, x: Tensor, ctx: Context) -> Tensor:
        raise NotImplementedError


def _he_uniform(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    limit = math.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, shape)


class Conv2D(Layer):
    kind = "conv2d"

    def __init__(self, c_in: int, c_out: int, size: int = 3, padding: str = "same", rng=None):
        self.c_in, self.c_out, self.size, self.padding = c_in, c_out, size, padding
        w = np.zeros((size, size, c_in, c_out)) if rng is None else _he_uniform(
            rng, (size, size, c_in, c_out), size * size * c_in)
        self.w = Tensor(w, requires_grad=True, name="w")
        self.b = Tensor(np.zeros(c_out), requires_grad=True, name="b")

    def params(self):
        return [("w", self.w), ("b", self.b)]

    def config(self):
        return {"c_in": self.c_in, "c_out": self.c_out, "size": self.size, "padding": self.padding}

    def __call__(self, x, ctx):
        return ad.forward("conv2d", [x, self.w, self.b], {"padding": self.padding})


class Dense(Layer):
    kind = "dense"

    def __init__(self, d_in: int, d_out: int, rng=None):
        self.d_in, self.d_out = d_in, d_out
        w = np.zeros((d_in, d_out)) if rng is None else _he_uniform(rng, (d_in, d_out), d_in)
        self.w = Tensor(w, requires_grad=True, name="w")
        self.b = Tensor(np.zeros(d_out), requires_grad=True, name="b")

    def params(self):
        return [("w", self.w), ("b", self.b)]

    def config(self):
        return {"d_in": self.d_in, "d_out": self.d_out}

    def __call__(self, x, ctx):
        return ad.add(ad.matmul(x, self.w), self.b)


class ReLU(Layer):
    kind = "relu"

    def __call__(self, x, ctx):
        return ad.relu(x)


class MaxPool(Layer):
    kind = "maxpool2d"

    def __call__(self, x, ctx):
        return ad.maxpool2d(x)


class Flatten(Layer):
    kind = "flatten"

    def __call__(self, x, ctx):
        return ad.flatten(x)


class BatchNorm(Layer):
    kind = "batchnorm"

    def __init__(self, channels: int, rng=None):
        self.channels = channels
        self.gamma = Tensor(np.ones(channels), requires_grad=True, name="gamma")
        self.beta = Tensor(np.zeros(channels), requires_grad=True, name="beta")
        self.state = BatchNormState.fresh(channels)

    def params(self):
        return [("gamma", self.gamma), ("beta", self.beta)]

    def states(self):
        return [("running", self.state)]

    def config(self):
        return {"channels": self.channels}

    def __call__(self, x, ctx):
        return ad.forward("batchnorm", [x, self.gamma, self.beta],
                          {"train": ctx.train, "state": self.state})


class Dropout(Layer):
    kind = "dropout"

    def __init__(self, rate: float, rng=None):
        self.rate = rate

    def config(self):
        return {"rate": self.rate}

    def __call__(self, x, ctx):
        return ad.forward("dropout", [x], {"rate": self.rate, "train": ctx.train, "rng": ctx.rng})


class Residual(Layer):
    """Two 3x3 convs plus identity (or 1x1 projection) shortcut, then ReLU."""

    kind = "residual"

    def __init__(self, c_in: int, c_out: int, batchnorm: bool, rng=None):
        self.c_in, self.c_out, self.batchnorm = c_in, c_out, batchnorm
        body: List[Layer] = [Conv2D(c_in, c_out, 3, rng=rng)]
        if batchnorm:
            body.append(BatchNorm(c_out))
        body += [ReLU(), Conv2D(c_out, c_out, 3, rng=rng)]
        if batchnorm:
            body.append(BatchNorm(c_out))
        self.body = body
        self.shortcut = Conv2D(c_in, c_out, 1, rng=rng) if c_in != c_out else None

    def sublayers(self) -> List[Tuple[str, Layer]]:
        named = [(f"body{i}", layer) for i, layer in enumerate(self.body)]
        if self.shortcut is not None:
            named.append(("shortcut", self.shortcut))
        return named

    def params(self):
        return [(f"{n}.{p}", t) for n, layer in self.sublayers() for p, t in layer.params()]

    def states(self):
        return [(f"{n}.{s}", st) for n, layer in self.sublayers() for s, st in layer.states()]

    def config(self):
        return {"c_in": self.c_in, "c_out": self.c_out, "batchnorm": self.batchnorm}

    def __call__(self, x, ctx):
        h = x
        for layer in self.body:
            h = layer(h, ctx)
        skip = x if self.shortcut is None else self.shortcut(x, ctx)
        return ad.relu(ad.add(h, skip))


_LAYER_TYPES: Dict[str, Callable[..., Layer]] = {
    cls.kind: cls for cls in (Conv2D, Dense, ReLU, MaxPool, Flatten, BatchNorm, Dropout, Residual)
}


def layer_from_spec(spec: dict) -> Layer:
    spec = dict(spec)
    kind = spec.pop("kind")
    try:
        cls = _LAYER_TYPES[kind]
    except KeyError:
        raise ValueError(f"unknown layer kind {kind!r}") from None
    return cls(**spec)


# -------------------------------------------------------------------- model


class Model:
    """A layer stack plus the bookkeeping a trained classifier carries."""

    differentiable = True

    def __init__(
        self,
        layers: Sequence[Layer],
        input_shape: Tuple[int, int, int],
        num_classes: int,
        input_range: str = "unit",
        pool_id: str = "",
        config: Optional[TrainingConfig] = None,
    ):
        self.layers = list(layers)
        self.input_shape = tuple(int(d) for d in input_shape)
        self.num_classes = int(num_classes)
        self.input_range = input_range
        self.pool_id = pool_id
        self.config = config
        self.history: List[Dict[str, float]] = []

    def named_parameters(self) -> List[Tuple[str, Tensor]]:
        return [(f"{i}.{n}", t) for i, layer in enumerate(self.layers) for n, t in layer.params()]

    def parameters(self) -> List[Tensor]:
        return [t for _, t in self.named_parameters()]

    def named_states(self) -> List[Tuple[str, BatchNormState]]:
        return [(f"{i}.{n}", s) for i, layer in enumerate(self.layers) for n, s in layer.states()]

    def num_parameters(self) -> int:
        return sum(t.size for t in self.parameters())

    def checksum(self) -> str:
        h = hashlib.sha256()
        for _, t in self.named_parameters():
            h.update(t.data.tobytes())
        for _, s in self.named_states():
            h.update(s.mean.tobytes())
            h.update(s.var.tobytes())
        return h.hexdigest()

    @contextlib.contextmanager
    def frozen(self) -> Iterator["Model"]:
        params = self.parameters()
        flags = [p.requires_grad for p in params]
        for p in params:
            p.requires_grad = False
        try:
            yield self
        finally:
            for p, flag in zip(params, flags):
                p.requires_grad = flag

    def _check_input(self, shape: tuple) -> None:
        if tuple(shape[1:]) != self.input_shape:
            raise ad.ShapeError(
                f"model expects inputs of shape (n, {', '.join(map(str, self.input_shape))}), got {shape}"
            )

    def logits(self, x, train: bool = False, rng: Optional[np.random.Generator] = None) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(x)
        self._check_input(x.shape)
        ctx = Context(train=train, rng=rng)
        h = x
        for layer in self.layers:
            h = layer(h, ctx)
        return h

    def predict_logits(self, images: np.ndarray) -> np.ndarray:
        """Eval-mode logits for a batch, computed in chunks without recording."""
        images = np.asarray(images, dtype=np.float64)
        self._check_input(images.shape)
        out = []
        with self.frozen():
            for start in range(0, len(images), EVAL_BATCH):
                out.append(self.logits(images[start : start + EVAL_BATCH]).data)
        return np.concatenate(out) if out else np.zeros((0, self.num_classes))


class BlackBoxModel:
    """A classifier reachable only through its logits (no gradients)."""

    differentiable = False

    def __init__(self, logits_fn: Callable[[np.ndarray], np.ndarray], input_shape, num_classes: int,
                 input_range: str = "unit", pool_id: str = "blackbox"):
        self._fn = logits_fn
        self.input_shape = tuple(input_shape)
        self.num_classes = num_classes
        self.input_range = input_range
        self.pool_id = pool_id

    def predict_logits(self, images: np.ndarray) -> np.ndarray:
        images = np.asarray(images, dtype=np.float64)
        if tuple(images.shape[1:]) != self.input_shape:
            raise ad.ShapeError(f"model expects (n, {self.input_shape}), got {images.shape}")
        return np.asarray(self._fn(images), dtype=np.float64)

    def frozen(self):
        raise CapabilityError("black-box model exposes no gradients")


TrainedModel = Model


def build_model(
    spec: ModelPoolSpec,
    input_shape: Tuple[int, int, int],
    num_classes: int,
    config: TrainingConfig,
) -> Model:
    h, w, c = input_shape
    if h < 8 or w < 8:
        raise ValueError(f"input {input_shape} too small for the pooling chain (need >= 8x8)")
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0xB0]))
    bn = spec.regularized and config.use_batchnorm
    drop = config.dropout_rate if spec.regularized else 0.0
    layers: List[Layer] = []

    def conv_block(c_in, c_out):
        layers.append(Conv2D(c_in, c_out, 3, rng=rng))
        if bn:
            layers.append(BatchNorm(c_out))
        layers.append(ReLU())

    def dense_block(d_in, d_out):
        layers.append(Dense(d_in, d_out, rng=rng))
        layers.append(ReLU())
        if drop > 0:
            layers.append(Dropout(drop))

    if spec.architecture_family == "conv_plain":
        conv_block(c, 16)
        conv_block(16, 16)
        layers.append(MaxPool())
        if drop > 0:
            layers.append(Dropout(drop))
        conv_block(16, 32)
        conv_block(32, 32)
        layers.append(MaxPool())
        if drop > 0:
            layers.append(Dropout(drop))
        layers.append(Flatten())
        flat = (h // 2 // 2) * (w // 2 // 2) * 32
        dense_block(flat, 64)
        width = 64
        if spec.capacity == "large":
            dense_block(64, 256)
            dense_block(256, 256)
            width = 256
        layers.append(Dense(width, num_classes, rng=rng))
    else:
        blocks = 3 if spec.capacity == "small" else 5
        conv_block(c, 8)
        c_prev, side_h, side_w = 8, h, w
        for stage, width in enumerate((8, 16, 32)):
            if stage > 0:
                layers.append(MaxPool())
                side_h, side_w = side_h // 2, side_w // 2
            for _ in range(blocks):
                layers.append(Residual(c_prev, width, bn, rng=rng))
                c_prev = width
        layers.append(Flatten())
        layers.append(Dense(side_h * side_w * c_prev, num_classes, rng=rng))

    return Model(layers, input_shape, num_classes, config.input_range, spec.pool_id, config)


# --------------------------------------------------------------- optimizers


class _Optimizer:
    def __init__(self, params: List[Tensor], config: TrainingConfig):
        self.params = params
        self.config = config
        self.t = 0

    def lr(self) -> float:
        return self.config.learning_rate / (1.0 + self.config.lr_decay * self.t)

    def step(self) -> None:
        lr = self.lr()
        for i, p in enumerate(self.params):
            if p.grad is not None:
                self._update(i, p, lr)
        self.t += 1


class SGD(_Optimizer):
    def _update(self, i, p, lr):
        p.data -= lr * p.grad


class Momentum(_Optimizer):
    def __init__(self, params, config):
        super().__init__(params, config)
        self.velocity = [np.zeros_like(p.data) for p in params]

    def _update(self, i, p, lr):
        v = self.velocity[i]
        v *= self.config.momentum
        v -= lr * p.grad
        p.data += v


class Adam(_Optimizer):
    def __init__(self, params, config):
        super().__init__(params, config)
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]

    def _update(self, i, p, lr):
        b1, b2 = self.config.beta1, self.config.beta2
        step = self.t + 1
        self.m[i] = b1 * self.m[i] + (1 - b1) * p.grad
        self.v[i] = b2 * self.v[i] + (1 - b2) * p.grad**2
        m_hat = self.m[i] / (1 - b1**step)
        v_hat = self.v[i] / (1 - b2**step)
        p.data -= lr * m_hat / (np.sqrt(v_hat) + self.config.adam_eps)


_OPTIMIZERS = {"sgd": SGD, "sgd_momentum": Momentum, "adam": Adam}


# ------------------------------------------------------------------ training


def penalized_loss(model: Model, logits: Tensor, labels: np.ndarray, l2_lambda: float) -> Tensor:
    """Mean cross-entropy plus ``l2_lambda * sum(theta^2)`` over all parameters."""
    loss = ad.softmax_cross_entropy(logits, labels)
    if l2_lambda > 0:
        penalty = None
        for p in model.parameters():
            term = ad.forward("sum_squares", [p])
            penalty = term if penalty is None else ad.add(penalty, term)
        loss = ad.add(loss, ad.forward("mul", [penalty, np.array(l2_lambda)]))
    return loss


def _check_labels(model, dataset: Dataset) -> None:
    if dataset.num_classes != model.num_classes:
        raise TrainingError(
            f"dataset declares {dataset.num_classes} classes, model outputs {model.num_classes}"
        )
    if dataset.labels.min() < 0 or dataset.labels.max() >= model.num_classes:
        raise TrainingError("label out of range for the model output width")


def train(
    model: Model,
    train_set: Dataset,
    val_set: Optional[Dataset],
    config: Optional[TrainingConfig] = None,
) -> Model:
    """Fit ``model`` in place with seeded minibatch updates and return it."""
    config = config or model.config
    if config is None:
        raise TrainingError("no TrainingConfig given")
    if train_set.role != "train":
        raise TrainingError(f"train_set has role {train_set.role!r}, expected 'train'")
    _check_labels(model, train_set)
    if val_set is not None:
        _check_labels(model, val_set)

    data = train_set.to_range(model.input_range)
    images, labels = data.images, data.labels
    m = len(labels)
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0x7A]))
    params = model.parameters()
    opt = _OPTIMIZERS[config.optimizer](params, config)
    aug = config.augment_params if config.use_augmentation else None
    model.config = config
    model.history = []
    for epoch in range(config.epochs):
        order = rng.permutation(m)
        for start in range(0, m, config.batch_size):
            idx = order[start : start + config.batch_size]
            xb = images[idx]
            if aug is not None:
                xb = np.stack([augment(img, aug, rng, model.input_range) for img in xb])
            with Tape() as tape:
                logits = model.logits(Tensor(xb), train=True, rng=rng)
                loss = penalized_loss(model, logits, labels[idx], config.l2_lambda)
                ad.backward(loss, tape)
            if not np.isfinite(loss.data):
                raise TrainingError(f"loss diverged in epoch {epoch + 1}")
            opt.step()
        entry = {"epoch": epoch + 1, "train_accuracy": evaluate(model, data)}
        if val_set is not None:
            entry["val_accuracy"] = evaluate(model, val_set)
        model.history.append(entry)
    return model


def predict(model, images: np.ndarray) -> np.ndarray:
    """Argmax class per image; ties go to the lowest index."""
    return np.argmax(model.predict_logits(images), axis=1)


def evaluate(model, dataset: Dataset) -> float:
    """Fraction of samples whose predicted class equals the label."""
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    data = dataset.to_range(model.input_range)
    return float(np.mean(predict(model, data.images) == data.labels))


# --------------------------------------------------------------- checkpoint


def save_model(model: Model, path) -> None:
    """Write the OFM1 container: magic, JSON header, little-endian float64 arrays."""
    arrays: List[np.ndarray] = []
    entries = []
    for name, t in model.named_parameters():
        entries.append({"name": name, "shape": list(t.shape)})
        arrays.append(t.data)
    for name, s in model.named_states():
        entries.append({"name": name + ".mean", "shape": list(s.mean.shape)})
        arrays.append(s.mean)
        entries.append({"name": name + ".var", "shape": list(s.var.shape)})
        arrays.append(s.var)
    header = {
        "layers": [layer.spec() for layer in model.layers],
        "input_shape": list(model.input_shape),
        "num_classes": model.num_classes,
        "input_range": model.input_range,
        "pool_id": model.pool_id,
        "config": asdict(model.config) if model.config is not None else None,
        "history": model.history,
        "arrays": entries,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<Q", len(blob)))
    buf.write(blob)
    for a in arrays:
        buf.write(np.ascontiguousarray(a, dtype="<f8").tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_model(path) -> Model:
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not an OFM1 checkpoint")
    (n,) = struct.unpack("<Q", raw[4:12])
    header = json.loads(raw[12 : 12 + n].decode("utf-8"))
    config = TrainingConfig(**header["config"]) if header["config"] else None
    model = Model(
        [layer_from_spec(s) for s in header["layers"]],
        tuple(header["input_shape"]),
        header["num_classes"],
        header["input_range"],
        header["pool_id"],
        config,
    )
    model.history = header["history"]
    params = dict(model.named_parameters())
    states = dict(model.named_states())
    offset = 12 + n
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        values = np.frombuffer(raw, dtype="<f8", count=count, offset=offset).astype(np.float64).reshape(shape)
        offset += 8 * count
        name = entry["name"]
        if name in params:
            params[name].data = values.copy()
        elif name.endswith(".mean") and name[:-5] in states:
            states[name[:-5]].mean = values.copy()
        elif name.endswith(".var") and name[:-4] in states:
            states[name[:-4]].var = values.copy()
        else:
            raise ValueError(f"{path}: unexpected array {name!r}")
    if offset != len(raw):
        raise ValueError(f"{path}: {len(raw) - offset} trailing bytes")
    return model
