"""Small deterministic reverse-mode autodiff core plus MLP models and Adam.

Only the handful of operations needed by the adaptation losses and by PGD are
provided. Everything is float64 and numpy-backed; every op output is checked
for finiteness so a NaN never propagates silently.
"""

from __future__ import annotations

import contextlib
import copy
import hashlib
import zlib
from dataclasses import dataclass
from typing import Callable, Iterable, NamedTuple, Sequence

import numpy as np

from .errors import DimensionError, NumericError, StateError

DTYPE = np.float64


# ---------------------------------------------------------------------------
# RNG plumbing
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RngSeed:
    """A seed plus a named stream; identical pairs give identical draws."""

    seed: int
    stream: str = "main"

    def generator(self) -> np.random.Generator:
        stream_id = zlib.crc32(self.stream.encode("utf-8"))
        return np.random.Generator(np.random.PCG64(np.random.SeedSequence([self.seed & (2**64 - 1), stream_id])))

    def child(self, name: str) -> "RngSeed":
        return RngSeed(self.seed, f"{self.stream}/{name}")


def make_rng(seed: int, stream: str = "main") -> np.random.Generator:
    return RngSeed(seed, stream).generator()


# ---------------------------------------------------------------------------
# Tensor and graph
# ---------------------------------------------------------------------------


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values produced by {what}")


class Tensor:
    """A float64 array that records how it was produced.

    ``shape`` and ``data`` follow numpy; ``data`` is never mutated by library
    ops. Leaves created with ``requires_grad=True`` receive ``.grad`` after a
    call to :meth:`backward` on a downstream scalar.
    """

    __slots__ = ("data", "grad", "requires_grad", "frozen", "_parents", "_backward", "op", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        self.data = np.array(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.frozen = False
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = "leaf"
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single element, shape is {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        self.grad = None

    # operator sugar -------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return tmean(self, axis)

    # autodiff ---------------------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every leaf that requires it.

        The recorded graph is released afterwards; a second call raises.
        """
        grads = _run_backward(self, grad)
        for node, g in grads:
            node.grad = g.copy() if node.grad is None else node.grad + g


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple, backward: Callable, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.frozen = False
    out.name = ""
    out.op = op
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = parents
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _topo(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def _run_backward(root: Tensor, grad: np.ndarray | None) -> list[tuple[Tensor, np.ndarray]]:
    if not root.requires_grad:
        raise StateError("backward called on a tensor with no recorded computation")
    if root._backward is None and root.op != "leaf":
        raise StateError("backward called twice or on a released graph")
    if grad is None:
        if root.data.size != 1:
            raise DimensionError("backward without an explicit gradient needs a scalar output")
        grad = np.ones_like(root.data)
    order = _topo(root)
    pending: dict[int, np.ndarray] = {id(root): np.asarray(grad, dtype=DTYPE)}
    leaves: list[tuple[Tensor, np.ndarray]] = []
    for node in reversed(order):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        _check_finite(g, f"gradient of {node.op}")
        if node._backward is None:
            if node.op == "leaf":
                leaves.append((node, g))
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = pg if key not in pending else pending[key] + pg
    for node in order:
        if node.op != "leaf":
            node._parents = ()
            node._backward = None
    return leaves


def gradients(loss: Tensor, wrt: Sequence[Tensor]) -> list[np.ndarray]:
    """Gradients of a scalar ``loss`` w.r.t. ``wrt`` without touching ``.grad``."""
    found = {id(t): g for t, g in _run_backward(loss, None)}
    return [found.get(id(t), np.zeros_like(t.data)) for t in wrt]


# ---------------------------------------------------------------------------
# Primitive ops
# ---------------------------------------------------------------------------


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data * b.data, (a, b), bw, "mul")


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shapes {a.shape} and {b.shape} do not align")

    def bw(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return _make(a.data @ b.data, (a, b), bw, "matmul")


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _make(y, (a,), lambda g: (g * (1.0 - y * y),), "tanh")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return _make(y, (a,), lambda g: (g * y,), "exp")


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise NumericError("log of a non-positive value")
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def clamp_min(a: Tensor, lo: float) -> Tensor:
    mask = a.data >= lo
    return _make(np.where(mask, a.data, lo), (a,), lambda g: (g * mask,), "clamp_min")


def square(a: Tensor) -> Tensor:
    return _make(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,), "square")


def sqrt(a: Tensor) -> Tensor:
    """Square root whose gradient is taken as 0 where the output is 0."""
    if np.any(a.data < 0):
        raise NumericError("sqrt of a negative value")
    y = np.sqrt(a.data)
    safe = np.where(y > 0, y, 1.0)
    return _make(y, (a,), lambda g: (np.where(y > 0, g / (2.0 * safe), 0.0),), "sqrt")


def tsum(a: Tensor, axis=None) -> Tensor:
    shape = a.shape

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(a.data.sum(axis=axis)), (a,), bw, "sum")


def tmean(a: Tensor, axis=None) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    return mul(tsum(a, axis), 1.0 / n)


def log_softmax(a: Tensor) -> Tensor:
    """Row-wise log-softmax with max subtraction."""
    z = a.data - a.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    y = z - lse
    p = np.exp(y)
    return _make(y, (a,), lambda g: (g - p * g.sum(axis=1, keepdims=True),), "log_softmax")


def softmax(a: Tensor) -> Tensor:
    z = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)
    return _make(p, (a,), lambda g: (p * (g - (g * p).sum(axis=1, keepdims=True)),), "softmax")


def pick(a: Tensor, cols: np.ndarray) -> Tensor:
    """``a[i, cols[i]]`` for each row i."""
    rows = np.arange(a.shape[0])
    cols = np.asarray(cols, dtype=np.int64)

    def bw(g):
        out = np.zeros_like(a.data)
        np.add.at(out, (rows, cols), g)
        return (out,)

    return _make(a.data[rows, cols], (a,), bw, "pick")


def pairwise_sqdist(f: Tensor) -> Tensor:
    """Matrix of squared Euclidean distances between rows of ``f``."""
    x = f.data
    diff = x[:, None, :] - x[None, :, :]
    d2 = np.einsum("ijk,ijk->ij", diff, diff)

    def bw(g):
        gs = g + g.T
        return (2.0 * (gs.sum(axis=1)[:, None] * x - gs @ x),)

    return _make(d2, (f,), bw, "pairwise_sqdist")


# ---------------------------------------------------------------------------
# Numerically stable helpers on plain arrays
# ---------------------------------------------------------------------------


def softmax_np(logits: np.ndarray) -> np.ndarray:
    logits = np.asarray(logits, dtype=DTYPE)
    _check_finite(logits, "softmax input")
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def log_softmax_np(logits: np.ndarray) -> np.ndarray:
    logits = np.asarray(logits, dtype=DTYPE)
    _check_finite(logits, "log_softmax input")
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


# ---------------------------------------------------------------------------
# Layers and models
# ---------------------------------------------------------------------------

ACTIVATIONS = {"tanh": tanh, "relu": relu}


def _uniform_init(rng: np.random.Generator, fan_in: int, fan_out: int) -> tuple[np.ndarray, np.ndarray]:
    bound = 1.0 / np.sqrt(fan_in)
    w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
    b = rng.uniform(-bound, bound, size=(fan_out,))
    return w, b


class Linear:
    def __init__(self, weight: np.ndarray, bias: np.ndarray, name: str = "linear"):
        self.weight = Tensor(weight, requires_grad=True, name=f"{name}.weight")
        self.bias = Tensor(bias, requires_grad=True, name=f"{name}.bias")

    @property
    def in_features(self) -> int:
        return self.weight.shape[0]

    @property
    def out_features(self) -> int:
        return self.weight.shape[1]

    def __call__(self, x: Tensor) -> Tensor:
        return matmul(x, self.weight) + self.bias

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]


class Encoder:
    """MLP mapping inputs to d-dimensional features.

    Hidden layers are followed by the activation; the last layer (the feature
    bottleneck) is linear.
    """

    def __init__(self, widths: Sequence[int], activation: str = "relu", rng: np.random.Generator | None = None):
        widths = [int(w) for w in widths]
        if len(widths) < 2 or any(w < 1 for w in widths):
            raise DimensionError(f"encoder widths must list at least input and feature sizes, got {widths}")
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        rng = rng if rng is not None else make_rng(0, "encoder-init")
        self.widths = widths
        self.activation = activation
        self.layers = []
        for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
            w, bias = _uniform_init(rng, a, b)
            self.layers.append(Linear(w, bias, name=f"encoder.{i}"))

    @property
    def input_dim(self) -> int:
        return self.widths[0]

    @property
    def feature_dim(self) -> int:
        return self.widths[-1]

    def __call__(self, x: Tensor) -> Tensor:
        act = ACTIVATIONS[self.activation]
        h = x
        for i, layer in enumerate(self.layers):
            h = layer(h)
            if i < len(self.layers) - 1:
                h = act(h)
        return h

    def parameters(self) -> list[Tensor]:
        return [p for layer in self.layers for p in layer.parameters()]

    def backbone_parameters(self) -> list[Tensor]:
        return [p for layer in self.layers[:-1] for p in layer.parameters()]

    def bottleneck_parameters(self) -> list[Tensor]:
        return self.layers[-1].parameters()


def parameter_count(widths: Sequence[int], classes: int | None = None) -> int:
    n = sum(a * b + b for a, b in zip(widths[:-1], widths[1:]))
    if classes is not None:
        n += widths[-1] * classes + classes
    return n


class Classifier(Linear):
    def __init__(self, weight: np.ndarray, bias: np.ndarray):
        super().__init__(weight, bias, name="classifier")

    @classmethod
    def init(cls, d: int, classes: int, rng: np.random.Generator) -> "Classifier":
        w, b = _uniform_init(rng, d, classes)
        return cls(w, b)

    @property
    def frozen(self) -> bool:
        return self.weight.frozen

    def freeze(self, flag: bool = True) -> None:
        for p in self.parameters():
            p.frozen = flag
            p.requires_grad = not flag


class Output(NamedTuple):
    logits: Tensor
    features: Tensor


class Model:
    """Encoder followed by a linear classifier."""

    def __init__(self, encoder: Encoder, classifier: Classifier):
        if classifier.in_features != encoder.feature_dim:
            raise DimensionError("classifier input must match encoder feature dimension")
        self.encoder = encoder
        self.classifier = classifier

    @classmethod
    def init(cls, widths: Sequence[int], classes: int, activation: str = "relu", seed: int = 0) -> "Model":
        rng = RngSeed(seed, "model-init").generator()
        enc = Encoder(widths, activation, rng)
        clf = Classifier.init(enc.feature_dim, classes, rng)
        return cls(enc, clf)

    @property
    def num_classes(self) -> int:
        return self.classifier.out_features

    @property
    def input_dim(self) -> int:
        return self.encoder.input_dim

    def _input(self, x) -> Tensor:
        x = as_tensor(x)
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise DimensionError(f"expected input of shape (batch, {self.input_dim}), got {x.shape}")
        _check_finite(x.data, "model input")
        return x

    def forward(self, x) -> Output:
        x = self._input(x)
        feats = self.encoder(x)
        return Output(self.classifier(feats), feats)

    __call__ = forward

    def predict_logits(self, x, chunk: int = 4096) -> np.ndarray:
        x = np.asarray(x, dtype=DTYPE)
        with detached(self):
            parts = [self.forward(x[i : i + chunk]).logits.data for i in range(0, len(x), chunk)]
        return np.concatenate(parts) if parts else np.zeros((0, self.num_classes))

    def features(self, x) -> np.ndarray:
        with detached(self):
            return self.forward(np.asarray(x, dtype=DTYPE)).features.data

    def predict(self, x) -> np.ndarray:
        return np.argmax(self.predict_logits(x), axis=1)

    def parameters(self) -> list[Tensor]:
        return self.encoder.parameters() + self.classifier.parameters()

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return [(p.name, p) for p in self.parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def clone(self) -> "Model":
        return copy.deepcopy(self)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for name, p in self.named_parameters():
            arr = np.asarray(state[name], dtype=DTYPE)
            if arr.shape != p.shape:
                raise DimensionError(f"{name}: expected {p.shape}, got {arr.shape}")
            p.data = arr.copy()

    def param_hash(self, which: str = "all") -> str:
        params = {"all": self.parameters, "classifier": self.classifier.parameters, "encoder": self.encoder.parameters}[which]()
        h = hashlib.sha256()
        for p in params:
            h.update(p.data.tobytes())
        return h.hexdigest()


@contextlib.contextmanager
def detached(model: Model):
    """Temporarily stop recording gradients for the model's parameters."""
    params = model.parameters()
    saved = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad = False
    try:
        yield model
    finally:
        for p, flag in zip(params, saved):
            p.requires_grad = flag


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------


class Adam:
    """Adam with one learning rate per named parameter group.

    Frozen parameters are skipped entirely: no update and no moment change.
    """

    def __init__(self, groups: dict[str, tuple[Iterable[Tensor], float]], betas=(0.9, 0.999), eps: float = 1e-8):
        self.groups = {name: (list(params), float(lr)) for name, (params, lr) in groups.items()}
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m: dict[int, np.ndarray] = {}
        self.v: dict[int, np.ndarray] = {}

    @property
    def lrs(self) -> dict[str, float]:
        return {k: lr for k, (_, lr) in self.groups.items()}

    def step(self) -> None:
        self.t += 1
        b1, b2, t = self.beta1, self.beta2, self.t
        for params, lr in self.groups.values():
            for p in params:
                if p.frozen or p.grad is None:
                    continue
                if p.grad.shape != p.shape:
                    raise DimensionError(f"gradient shape {p.grad.shape} does not match parameter {p.shape}")
                m = self.m.get(id(p))
                if m is None:
                    m = self.m[id(p)] = np.zeros_like(p.data)
                    self.v[id(p)] = np.zeros_like(p.data)
                v = self.v[id(p)]
                m *= b1
                m += (1 - b1) * p.grad
                v *= b2
                v += (1 - b2) * p.grad * p.grad
                m_hat = m / (1 - b1**t)
                v_hat = v / (1 - b2**t)
                p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def zero_grad(self) -> None:
        for params, _ in self.groups.values():
            for p in params:
                p.grad = None


def adam_for(model: Model, lr_backbone: float, lr_head: float) -> Adam:
    """Optimizer with the slow backbone group and the fast bottleneck/classifier group."""
    return Adam(
        {
            "backbone": (model.encoder.backbone_parameters(), lr_backbone),
            "head": (model.encoder.bottleneck_parameters() + model.classifier.parameters(), lr_head),
        }
    )


def adam_step(opt: Adam, params: Sequence[Tensor], grads: Sequence[np.ndarray]) -> None:
    """Assign ``grads`` to ``params`` and apply one optimizer update."""
    for p, g in zip(params, grads):
        g = np.asarray(g, dtype=DTYPE)
        if g.shape != p.shape:
            raise DimensionError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        p.grad = g
    opt.step()
