"""Minimal reverse-mode automatic differentiation over numpy arrays.

Every operator is registered as a pair of functions: a forward rule that maps
input arrays to an output array plus saved intermediates, and a backward rule
that maps the output gradient back to one gradient per input.  Operations are
recorded on the innermost active :class:`Tape`; :func:`backward` replays the
tape in reverse.

All arithmetic is float64.  Layout for images is NHWC, conv kernels are
``(kh, kw, c_in, c_out)``.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

BN_MOMENTUM = 0.9
BN_EPS = 1e-5


class AutodiffError(Exception):
    """Raised for malformed operator calls or invalid backward requests."""


class ShapeError(AutodiffError, ValueError):
    pass


class Tensor:
    """An n-dimensional float64 array with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return int(self.data.size)

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # thin conveniences over `forward`
    def __add__(self, other: "Tensor") -> "Tensor":
        return forward("add", [self, other])

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return forward("matmul", [self, other])

    def relu(self) -> "Tensor":
        return forward("relu", [self])

    def sum(self) -> "Tensor":
        return forward("sum", [self])


@dataclass
class _Record:
    op: str
    inputs: List[Tensor]
    output: Tensor
    saved: Any
    attrs: Dict[str, Any]


@dataclass
class Tape:
    """Ordered log of differentiable operations.

    Use as a context manager; nested tapes are allowed and only the innermost
    one records.
    """

    records: List[_Record] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def __len__(self) -> int:
        return len(self.records)


_local = threading.local()


def _tape_stack() -> List[Tape]:
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


def active_tape() -> Optional[Tape]:
    stack = _tape_stack()
    return stack[-1] if stack else None


@dataclass(frozen=True)
class _Rule:
    forward: Callable
    backward: Callable
    n_inputs: tuple  # accepted input counts


_RULES: Dict[str, _Rule] = {}


def _register(name: str, n_inputs: tuple):
    def deco(fwd):
        def bind_backward(bwd):
            _RULES[name] = _Rule(fwd, bwd, n_inputs)
            return bwd

        fwd.backward = bind_backward
        return fwd

    return deco


def op_kinds() -> List[str]:
    return sorted(_RULES)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def forward(op_kind: str, inputs: Sequence, attrs: Optional[Dict[str, Any]] = None) -> Tensor:
    """Apply ``op_kind`` to ``inputs`` and record it on the active tape.

    ``inputs`` may mix Tensors and array-likes; array-likes become constant
    tensors.  Recording happens only when some input requires a gradient.
    """
    rule = _RULES.get(op_kind)
    if rule is None:
        raise AutodiffError(f"unknown op_kind {op_kind!r}; known: {op_kinds()}")
    if len(inputs) not in rule.n_inputs:
        raise AutodiffError(
            f"{op_kind} takes {' or '.join(map(str, rule.n_inputs))} inputs, got {len(inputs)}"
        )
    attrs = dict(attrs or {})
    tensors = [_as_tensor(t) for t in inputs]
    out_data, saved = rule.forward([t.data for t in tensors], attrs)
    needs_grad = any(t.requires_grad for t in tensors)
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.requires_grad = needs_grad
    out.grad = None
    out.name = op_kind
    tape = active_tape()
    if needs_grad and tape is not None:
        tape.records.append(_Record(op_kind, tensors, out, saved, attrs))
    return out


def backward(loss: Tensor, tape: Tape) -> Dict[int, np.ndarray]:
    """Reverse-mode sweep from the scalar ``loss`` over ``tape``.

    Sets ``.grad`` on every tensor with ``requires_grad`` reached from the
    loss (overwriting any previous value) and returns a map ``id(tensor) ->
    gradient``.
    """
    if loss.data.size != 1:
        raise AutodiffError(f"loss must be a scalar, got shape {loss.shape}")
    end = None
    for idx in range(len(tape.records) - 1, -1, -1):
        if tape.records[idx].output is loss:
            end = idx
            break
    if end is None:
        raise AutodiffError("loss was not produced on this tape")

    grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    owners: Dict[int, Tensor] = {id(loss): loss}
    for rec in reversed(tape.records[: end + 1]):
        g_out = grads.get(id(rec.output))
        if g_out is None:
            continue
        rule = _RULES[rec.op]
        g_in = rule.backward(g_out, [t.data for t in rec.inputs], rec.saved, rec.attrs)
        for t, g in zip(rec.inputs, g_in):
            if g is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + g
            else:
                grads[key] = g
                owners[key] = t
    for key, t in owners.items():
        if t.requires_grad:
            t.grad = grads[key]
    return grads


# ---------------------------------------------------------------- operators


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


@_register("add", (2,))
def _add_fwd(xs, attrs):
    a, b = xs
    try:
        out_shape = np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"add: cannot broadcast shapes {a.shape} and {b.shape}") from None
    del out_shape
    return a + b, None


@_add_fwd.backward
def _add_bwd(g, xs, saved, attrs):
    return [_unbroadcast(g, xs[0].shape), _unbroadcast(g, xs[1].shape)]


@_register("mul", (2,))
def _mul_fwd(xs, attrs):
    a, b = xs
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"mul: cannot broadcast shapes {a.shape} and {b.shape}") from None
    return a * b, None


@_mul_fwd.backward
def _mul_bwd(g, xs, saved, attrs):
    a, b = xs
    return [_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)]


@_register("matmul", (2,))
def _matmul_fwd(xs, attrs):
    a, b = xs
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return a @ b, None


@_matmul_fwd.backward
def _matmul_bwd(g, xs, saved, attrs):
    a, b = xs
    return [g @ b.T, a.T @ g]


@_register("relu", (1,))
def _relu_fwd(xs, attrs):
    (x,) = xs
    mask = x > 0
    return np.where(mask, x, 0.0), mask


@_relu_fwd.backward
def _relu_bwd(g, xs, mask, attrs):
    return [g * mask]


@_register("sum", (1,))
def _sum_fwd(xs, attrs):
    return np.array(xs[0].sum()), None


@_sum_fwd.backward
def _sum_bwd(g, xs, saved, attrs):
    return [np.full_like(xs[0], float(g))]


@_register("sum_squares", (1,))
def _sumsq_fwd(xs, attrs):
    (x,) = xs
    return np.array(np.dot(x.ravel(), x.ravel())), None


@_sumsq_fwd.backward
def _sumsq_bwd(g, xs, saved, attrs):
    return [2.0 * float(g) * xs[0]]


@_register("flatten", (1,))
def _flatten_fwd(xs, attrs):
    (x,) = xs
    if x.ndim < 1:
        raise ShapeError(f"flatten: needs a batch axis, got shape {x.shape}")
    return x.reshape(x.shape[0], -1), None


@_flatten_fwd.backward
def _flatten_bwd(g, xs, saved, attrs):
    return [g.reshape(xs[0].shape)]


def _conv_pads(kh: int, kw: int, padding: str):
    if padding == "valid":
        return (0, 0), (0, 0)
    if padding == "same":
        return ((kh - 1) // 2, kh // 2), ((kw - 1) // 2, kw // 2)
    raise AutodiffError(f"conv2d: padding must be 'same' or 'valid', got {padding!r}")


@_register("conv2d", (2, 3))
def _conv_fwd(xs, attrs):
    x, w = xs[0], xs[1]
    if x.ndim != 4 or w.ndim != 4 or x.shape[3] != w.shape[2]:
        raise ShapeError(f"conv2d: incompatible input {x.shape} and kernel {w.shape}")
    kh, kw, cin, cout = w.shape
    ph, pw = _conv_pads(kh, kw, attrs.get("padding", "valid"))
    xp = np.pad(x, ((0, 0), ph, pw, (0, 0))) if (sum(ph) + sum(pw)) else x
    n, hp, wp, _ = xp.shape
    ho, wo = hp - kh + 1, wp - kw + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: kernel {w.shape} larger than padded input {xp.shape}")
    # (n, ho, wo, c, kh, kw) -> (n*ho*wo, kh*kw*c)
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, kh * kw * cin)
    out = cols @ w.reshape(kh * kw * cin, cout)
    if len(xs) == 3:
        b = xs[2]
        if b.shape != (cout,):
            raise ShapeError(f"conv2d: bias shape {b.shape} does not match {cout} filters")
        out = out + b
    return out.reshape(n, ho, wo, cout), (cols, xp.shape, ph, pw)


@_conv_fwd.backward
def _conv_bwd(g, xs, saved, attrs):
    w = xs[1]
    cols, xp_shape, ph, pw = saved
    kh, kw, cin, cout = w.shape
    n, ho, wo, _ = g.shape
    g2 = g.reshape(n * ho * wo, cout)
    dw = (cols.T @ g2).reshape(w.shape)
    dcols = (g2 @ w.reshape(kh * kw * cin, cout).T).reshape(n, ho, wo, kh, kw, cin)
    dxp = np.zeros(xp_shape)
    for i in range(kh):
        for j in range(kw):
            dxp[:, i : i + ho, j : j + wo, :] += dcols[:, :, :, i, j, :]
    dx = dxp[:, ph[0] : xp_shape[1] - ph[1], pw[0] : xp_shape[2] - pw[1], :]
    grads = [dx, dw]
    if len(xs) == 3:
        grads.append(g2.sum(axis=0))
    return grads


@_register("maxpool2d", (1,))
def _pool_fwd(xs, attrs):
    (x,) = xs
    if x.ndim != 4:
        raise ShapeError(f"maxpool2d: expected NHWC input, got shape {x.shape}")
    n, h, w, c = x.shape
    ho, wo = h // 2, w // 2
    if ho < 1 or wo < 1:
        raise ShapeError(f"maxpool2d: input {x.shape} too small for 2x2 pooling")
    blocks = (
        x[:, : 2 * ho, : 2 * wo, :]
        .reshape(n, ho, 2, wo, 2, c)
        .transpose(0, 1, 3, 5, 2, 4)
        .reshape(n, ho, wo, c, 4)
    )
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]
    return out, arg


@_pool_fwd.backward
def _pool_bwd(g, xs, arg, attrs):
    (x,) = xs
    n, h, w, c = x.shape
    ho, wo = h // 2, w // 2
    blocks = np.zeros((n, ho, wo, c, 4))
    np.put_along_axis(blocks, arg[..., None], g[..., None], axis=-1)
    dx = np.zeros_like(x)
    dx[:, : 2 * ho, : 2 * wo, :] = (
        blocks.reshape(n, ho, wo, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(n, 2 * ho, 2 * wo, c)
    )
    return [dx]


@dataclass
class BatchNormState:
    """Running statistics for one batchnorm layer."""

    mean: np.ndarray
    var: np.ndarray

    @classmethod
    def fresh(cls, channels: int) -> "BatchNormState":
        return cls(np.zeros(channels), np.ones(channels))


@_register("batchnorm", (3,))
def _bn_fwd(xs, attrs):
    x, gamma, beta = xs
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(
            f"batchnorm: scale/shift shapes {gamma.shape}, {beta.shape} do not match input {x.shape}"
        )
    state: Optional[BatchNormState] = attrs.get("state")
    axes = tuple(range(x.ndim - 1))
    if attrs.get("train", False):
        mu = x.mean(axis=axes)
        var = x.var(axis=axes)
        if state is not None:
            state.mean = BN_MOMENTUM * state.mean + (1 - BN_MOMENTUM) * mu
            state.var = BN_MOMENTUM * state.var + (1 - BN_MOMENTUM) * var
        train = True
    else:
        if state is None:
            raise AutodiffError("batchnorm: eval mode needs running statistics ('state' attr)")
        mu, var = state.mean, state.var
        train = False
    inv = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (x - mu) * inv
    return xhat * gamma + beta, (xhat, inv, train)


@_bn_fwd.backward
def _bn_bwd(g, xs, saved, attrs):
    x, gamma, _ = xs
    xhat, inv, train = saved
    axes = tuple(range(x.ndim - 1))
    dgamma = (g * xhat).sum(axis=axes)
    dbeta = g.sum(axis=axes)
    dxhat = g * gamma
    if train:
        m = x.size // x.shape[-1]
        dx = inv / m * (m * dxhat - dxhat.sum(axis=axes) - xhat * (dxhat * xhat).sum(axis=axes))
    else:
        dx = dxhat * inv
    return [dx, dgamma, dbeta]


@_register("dropout", (1,))
def _dropout_fwd(xs, attrs):
    (x,) = xs
    rate = float(attrs.get("rate", 0.0))
    if not 0.0 <= rate < 1.0:
        raise AutodiffError(f"dropout: rate must be in [0, 1), got {rate}")
    if not attrs.get("train", False) or rate == 0.0:
        return x.copy(), None
    rng = attrs.get("rng")
    if rng is None:
        raise AutodiffError("dropout: train mode needs an 'rng' attr")
    keep = 1.0 - rate
    mask = (rng.random(x.shape) < keep) / keep
    return x * mask, mask


@_dropout_fwd.backward
def _dropout_bwd(g, xs, mask, attrs):
    return [g if mask is None else g * mask]


def _log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _check_labels(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    if logits.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy: logits must be 2-D, got {logits.shape}")
    labels = np.asarray(labels).reshape(-1).astype(np.int64)
    if labels.shape[0] != logits.shape[0]:
        raise ShapeError(
            f"softmax_cross_entropy: logits {logits.shape} vs labels {labels.shape}"
        )
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise AutodiffError("softmax_cross_entropy: label out of range")
    return labels


@_register("softmax_cross_entropy", (2,))
def _xent_fwd(xs, attrs):
    logits, labels = xs
    labels = _check_labels(logits, labels)
    logp = _log_softmax(logits)
    nll = -logp[np.arange(len(labels)), labels]
    reduction = attrs.get("reduction", "mean")
    total = nll.sum() if reduction == "sum" else nll.mean()
    return np.array(total), (logp, labels)


@_xent_fwd.backward
def _xent_bwd(g, xs, saved, attrs):
    logp, labels = saved
    d = np.exp(logp)
    d[np.arange(len(labels)), labels] -= 1.0
    if attrs.get("reduction", "mean") != "sum":
        d /= len(labels)
    return [float(g) * d, None]


def per_sample_loss(logits: np.ndarray, labels) -> np.ndarray:
    """Cross-entropy of each row of ``logits``; no tape involvement."""
    labels = _check_labels(np.asarray(logits, dtype=np.float64), labels)
    return -_log_softmax(np.asarray(logits, dtype=np.float64))[np.arange(len(labels)), labels]


# ------------------------------------------------------------ conveniences


def relu(x) -> Tensor:
    return forward("relu", [x])


def matmul(a, b) -> Tensor:
    return forward("matmul", [a, b])


def add(a, b) -> Tensor:
    return forward("add", [a, b])


def conv2d(x, w, b=None, padding: str = "same") -> Tensor:
    inputs = [x, w] if b is None else [x, w, b]
    return forward("conv2d", inputs, {"padding": padding})


def maxpool2d(x) -> Tensor:
    return forward("maxpool2d", [x])


def flatten(x) -> Tensor:
    return forward("flatten", [x])


def softmax_cross_entropy(logits, labels, reduction: str = "mean") -> Tensor:
    return forward("softmax_cross_entropy", [logits, labels], {"reduction": reduction})


def input_gradient(model, x, y) -> np.ndarray:
    """Gradient of the summed cross-entropy with respect to the input batch.

    Parameters are frozen for the duration of the call; neither their values
    nor their ``grad`` slots change.  ``model`` must expose ``frozen()`` and
    ``logits(x, train=False)`` returning a Tensor.
    """
    x = np.asarray(x, dtype=np.float64)
    labels = np.atleast_1d(np.asarray(y)).astype(np.int64)
    xt = Tensor(x, requires_grad=True)
    with model.frozen(), Tape() as tape:
        logits = model.logits(xt, train=False)
        loss = softmax_cross_entropy(logits, labels, reduction="sum")
        backward(loss, tape)
    return xt.grad.copy()
