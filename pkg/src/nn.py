"""
Minimal reverse-mode automatic differentiation over numpy arrays.

Operations run eagerly. While a ``Tape`` is active every op whose inputs
require gradients is recorded; ``Tape.backward`` walks the records in
reverse order once and accumulates ``.grad`` on every tensor it reaches.
Without an active tape nothing is recorded, which is how inference runs.
"""

from collections import OrderedDict
from pathlib import Path
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union
import json
import struct

import numpy as np

from src.errors import CheckpointError, ShapeError

ArrayLike = Union["Tensor", np.ndarray, float, int]

_ACTIVE_TAPES: List["Tape"] = []


class Tensor:
    """A float64 array, optionally tracked for gradients."""

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other: ArrayLike) -> "Tensor":
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other: ArrayLike) -> "Tensor":
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other: ArrayLike) -> "Tensor":
        return add(as_tensor(other), neg(self))

    def __neg__(self) -> "Tensor":
        return neg(self)

    def __mul__(self, other: ArrayLike) -> "Tensor":
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other: ArrayLike) -> "Tensor":
        return matmul(self, other)

    def __getitem__(self, idx) -> "Tensor":
        return getitem(self, idx)


def as_tensor(x: ArrayLike) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Records ops for one backward pass; use as a context manager."""

    def __init__(self) -> None:
        self.records: List[Tuple[Tensor, Tuple[Tensor, ...], Callable]] = []

    def __enter__(self) -> "Tape":
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPES.remove(self)

    def backward(self, loss: Tensor, grad: Optional[np.ndarray] = None) -> None:
        if grad is None:
            if loss.data.size != 1:
                raise ShapeError(f"backward needs a scalar loss or an explicit grad, got shape {loss.shape}")
            grad = np.ones_like(loss.data)
        loss.grad = grad if loss.grad is None else loss.grad + grad
        for out, parents, backward_fn in reversed(self.records):
            if out.grad is None:
                continue
            for parent, g in zip(parents, backward_fn(out.grad)):
                if g is None or not parent.requires_grad:
                    continue
                parent.grad = g if parent.grad is None else parent.grad + g


def _result(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    out = Tensor(data, requires_grad=any(p.requires_grad for p in parents))
    if out.requires_grad and _ACTIVE_TAPES:
        _ACTIVE_TAPES[-1].records.append((out, tuple(parents), backward_fn))
    return out


def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# =========================
# Primitives
# =========================

def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,))


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    return _result(a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Matrix product for 2-D operands; a 1-D left operand is a row vector."""
    a, b = as_tensor(a), as_tensor(b)
    if b.data.ndim != 2 or a.data.ndim not in (1, 2) or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def backward(g: np.ndarray):
        if a.data.ndim == 1:
            return g @ b.data.T, np.outer(a.data, g)
        return g @ b.data.T, a.data.T @ g

    return _result(a.data @ b.data, (a, b), backward)


def concat(parts: Sequence[ArrayLike], axis: int = -1) -> Tensor:
    tensors = [as_tensor(p) for p in parts]
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = ", ".join(str(t.shape) for t in tensors)
        raise ShapeError(f"concat: incompatible shapes {shapes}") from None
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g: np.ndarray):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors))
        )

    return _result(data, tensors, backward)


def stack(parts: Sequence[ArrayLike]) -> Tensor:
    tensors = [as_tensor(p) for p in parts]
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise ShapeError(f"stack: incompatible shapes {', '.join(str(s) for s in sorted(shapes))}")
    return _result(np.stack([t.data for t in tensors]), tensors,
                   lambda g: tuple(g[i] for i in range(len(tensors))))


def sum_reduce(a: Tensor, axis: Optional[int] = None) -> Tensor:
    def backward(g: np.ndarray):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return _result(a.data.sum(axis=axis), (a,), backward)


def mean(a: Tensor, axis: Optional[int] = None) -> Tensor:
    count = a.data.size if axis is None else a.shape[axis]
    return mul(sum_reduce(a, axis), 1.0 / count)


def _is_basic_index(idx) -> bool:
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(p, (int, slice)) or p is Ellipsis for p in parts)


def getitem(a: Tensor, idx) -> Tensor:
    def backward(g: np.ndarray):
        full = np.zeros_like(a.data)
        if _is_basic_index(idx):
            full[idx] += g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _result(a.data[idx], (a,), backward)


def sigmoid(a: Tensor) -> Tensor:
    s = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _result(s, (a,), lambda g: (g * s * (1.0 - s),))


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.data)
    return _result(t, (a,), lambda g: (g * (1.0 - t * t),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _result(a.data * mask, (a,), lambda g: (g * mask,))


def exp(a: Tensor) -> Tensor:
    e = np.exp(a.data)
    return _result(e, (a,), lambda g: (g * e,))


def softmax(x: np.ndarray) -> np.ndarray:
    z = np.exp(x - x.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits: Tensor, target: int) -> Tensor:
    """-log softmax(logits)[target] for a 1-D logit vector."""
    if logits.data.ndim != 1 or not 0 <= target < logits.shape[0]:
        raise ShapeError(f"softmax_cross_entropy: logits {logits.shape} with target {target}")
    shifted = logits.data - logits.data.max()
    log_z = np.log(np.exp(shifted).sum())
    p = np.exp(shifted - log_z)

    def backward(g: np.ndarray):
        d = p.copy()
        d[target] -= 1.0
        return (g * d,)

    return _result(np.asarray(log_z - shifted[target]), (logits,), backward)


def bce_with_logits(logits: Tensor, targets: ArrayLike) -> Tensor:
    """Summed binary cross-entropy of sigmoid(logits) against 0/1 targets."""
    t = as_tensor(targets).data
    if t.shape != logits.shape:
        raise ShapeError(f"bce_with_logits: logits {logits.shape} and targets {t.shape}")
    x = logits.data
    loss = np.maximum(x, 0) - x * t + np.log1p(np.exp(-np.abs(x)))
    s = 0.5 * (1.0 + np.tanh(0.5 * x))
    return _result(np.asarray(loss.sum()), (logits,), lambda g: (g * (s - t),))


def squared_error(pred: Tensor, target: ArrayLike) -> Tensor:
    """Sum of squared differences."""
    t = as_tensor(target).data
    if t.shape != pred.shape:
        raise ShapeError(f"squared_error: prediction {pred.shape} and target {t.shape}")
    diff = pred.data - t
    return _result(np.asarray((diff * diff).sum()), (pred,), lambda g: (2.0 * g * diff,))


def gaussian_kl(mu: Tensor, logvar: Tensor) -> Tensor:
    """KL(N(mu, exp(logvar)) || N(0, I)) summed over dimensions."""
    if mu.shape != logvar.shape:
        raise ShapeError(f"gaussian_kl: mu {mu.shape} and logvar {logvar.shape}")
    ev = np.exp(logvar.data)
    kl = -0.5 * np.sum(1.0 + logvar.data - mu.data ** 2 - ev)
    return _result(np.asarray(kl), (mu, logvar),
                   lambda g: (g * mu.data, g * 0.5 * (ev - 1.0)))


# =========================
# Parameters and layers
# =========================

class ParamStore:
    """Named parameters in creation order."""

    def __init__(self) -> None:
        self.params: "OrderedDict[str, Tensor]" = OrderedDict()

    def create(self, name: str, data: np.ndarray) -> Tensor:
        if name in self.params:
            raise ShapeError(f"parameter '{name}' already exists")
        t = Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)
        self.params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __iter__(self) -> Iterator[Tuple[str, Tensor]]:
        return iter(self.params.items())

    def __len__(self) -> int:
        return len(self.params)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.params.items()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        missing = [n for n in self.params if n not in state]
        if missing:
            raise CheckpointError(f"checkpoint lacks parameter(s): {', '.join(missing)}")
        for name, p in self.params.items():
            if state[name].shape != p.shape:
                raise ShapeError(f"parameter '{name}': stored {state[name].shape} vs model {p.shape}")
            p.data = np.array(state[name], dtype=np.float64)


def uniform_init(rng: np.random.Generator, fan_in: int, shape: Tuple[int, ...]) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Linear:
    def __init__(self, store: ParamStore, name: str, d_in: int, d_out: int, rng: np.random.Generator,
                 bias: bool = True):
        self.d_in, self.d_out = d_in, d_out
        self.W = store.create(f"{name}.W", uniform_init(rng, d_in, (d_in, d_out)))
        self.b = store.create(f"{name}.b", uniform_init(rng, d_in, (d_out,))) if bias else None

    def __call__(self, x: ArrayLike) -> Tensor:
        y = matmul(x, self.W)
        return y if self.b is None else add(y, self.b)


class GRUCell:
    """
    Gated recurrent update h' = (1 - u) * n + u * h with
    r = sigmoid(x Wr + h Ur), u = sigmoid(x Wu + h Uu), n = tanh(x Wn + r * (h Un)).
    """

    def __init__(self, store: ParamStore, name: str, d_in: int, d_hidden: int, rng: np.random.Generator):
        self.d_in, self.d_hidden = d_in, d_hidden
        H = d_hidden
        self.W = store.create(f"{name}.W", uniform_init(rng, H, (d_in, 3 * H)))
        self.U = store.create(f"{name}.U", uniform_init(rng, H, (H, 3 * H)))
        self.bw = store.create(f"{name}.bw", uniform_init(rng, H, (3 * H,)))
        self.bu = store.create(f"{name}.bu", uniform_init(rng, H, (3 * H,)))

    def __call__(self, x: ArrayLike, h: ArrayLike) -> Tensor:
        x, h = as_tensor(x), as_tensor(h)
        if x.shape[-1] != self.d_in or h.shape[-1] != self.d_hidden:
            raise ShapeError(
                f"gru: input {x.shape} / hidden {h.shape} vs expected ({self.d_in},) / ({self.d_hidden},)"
            )
        H = self.d_hidden
        gx = add(matmul(x, self.W), self.bw)
        gh = add(matmul(h, self.U), self.bu)
        r = sigmoid(add(gx[..., :H], gh[..., :H]))
        u = sigmoid(add(gx[..., H:2 * H], gh[..., H:2 * H]))
        n = tanh(add(gx[..., 2 * H:], mul(r, gh[..., 2 * H:])))
        return add(mul(add(1.0, neg(u)), n), mul(u, h))


def gru_cell(x: ArrayLike, h: ArrayLike, cell: GRUCell) -> Tensor:
    return cell(x, h)


# =========================
# Optimization
# =========================

class SGD:
    """Stochastic gradient descent with heavy-ball momentum."""

    def __init__(self, store: ParamStore, lr: float = 1e-4, momentum: float = 0.9):
        self.store = store
        self.lr = lr
        self.momentum = momentum
        self.velocity: Dict[str, np.ndarray] = {}

    def step(self) -> None:
        for name, p in self.store:
            if p.grad is None:
                continue
            v = self.velocity.get(name)
            v = p.grad.copy() if v is None else self.momentum * v + p.grad
            self.velocity[name] = v
            p.data = p.data - self.lr * v


def sgd_step(store: ParamStore, lr: float, momentum: float = 0.0,
             velocity: Optional[Dict[str, np.ndarray]] = None) -> Dict[str, np.ndarray]:
    """Functional single update; returns the new momentum buffers."""
    opt = SGD(store, lr, momentum)
    opt.velocity = dict(velocity or {})
    opt.step()
    return opt.velocity


class PlateauSchedule:
    """
    Multiply the learning rate by ``factor`` once the moving average of the
    last ``window`` epoch losses has gone ``patience`` epochs without a
    relative improvement of at least ``threshold``.
    """

    def __init__(self, lr: float = 1e-4, factor: float = 0.1, patience: int = 20, min_lr: float = 0.0,
                 window: int = 10, threshold: float = 1e-4):
        if window < 1 or patience < 1:
            raise ValueError("window and patience must be >= 1")
        self.lr = lr
        self.factor = factor
        self.patience = patience
        self.min_lr = min_lr
        self.window = window
        self.threshold = threshold
        self.history: List[float] = []
        self.best = float("inf")
        self.bad_epochs = 0

    @property
    def smoothed(self) -> float:
        return float(np.mean(self.history)) if self.history else float("inf")

    def step(self, epoch_loss: float) -> float:
        self.history = (self.history + [float(epoch_loss)])[-self.window:]
        smoothed = self.smoothed
        if smoothed < self.best * (1.0 - self.threshold):
            self.best = smoothed
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
            if self.bad_epochs >= self.patience:
                self.lr = max(self.min_lr, self.lr * self.factor)
                self.bad_epochs = 0
        return self.lr

    def state(self) -> Dict[str, object]:
        return {"lr": self.lr, "factor": self.factor, "patience": self.patience,
                "min_lr": self.min_lr, "window": self.window, "threshold": self.threshold,
                "history": list(self.history), "best": self.best, "bad_epochs": self.bad_epochs}

    @classmethod
    def from_state(cls, state: Dict[str, object]) -> "PlateauSchedule":
        sched = cls(state["lr"], state["factor"], int(state["patience"]), state["min_lr"],
                    int(state["window"]), state["threshold"])
        sched.history = [float(v) for v in state["history"]]
        sched.best = state["best"]
        sched.bad_epochs = int(state["bad_epochs"])
        return sched


def lr_schedule(state: PlateauSchedule, epoch_loss: float) -> float:
    return state.step(epoch_loss)


# =========================
# Checkpoints
# =========================

CHECKPOINT_MAGIC = b"CKTGRIDW"
CHECKPOINT_VERSION = 1
_PREAMBLE = struct.Struct("<8sII")


def save_checkpoint(path: Path, tensors: Dict[str, np.ndarray], meta: Optional[Dict] = None) -> None:
    """
    Write magic, version, a JSON header and a little-endian float64 table.

    ``tensors`` keeps its iteration order; ``meta`` must be JSON-serializable.
    """
    entries = []
    payload = bytearray()
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": len(payload), "count": int(arr.size)})
        payload += arr.tobytes(order="C")
    header = json.dumps({"tensors": entries, "meta": meta or {}}, sort_keys=True, separators=(",", ":"))
    header_bytes = header.encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_PREAMBLE.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(header_bytes)))
        fh.write(header_bytes)
        fh.write(bytes(payload))


def load_checkpoint(path: Path) -> Tuple[Dict[str, np.ndarray], Dict]:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc.strerror}") from exc
    if len(raw) < _PREAMBLE.size:
        raise CheckpointError(f"{path}: truncated checkpoint")
    magic, version, header_len = _PREAMBLE.unpack_from(raw)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a cktgrid checkpoint")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    start = _PREAMBLE.size
    try:
        header = json.loads(raw[start:start + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header") from exc
    body = raw[start + header_len:]
    tensors: Dict[str, np.ndarray] = OrderedDict()
    for entry in header["tensors"]:
        end = entry["offset"] + 8 * entry["count"]
        if end > len(body):
            raise CheckpointError(f"{path}: truncated tensor '{entry['name']}'")
        arr = np.frombuffer(body[entry["offset"]:end], dtype="<f8").astype(np.float64)
        tensors[entry["name"]] = arr.reshape(entry["shape"])
    return tensors, header["meta"]


# =========================
# Gradient checking
# =========================

def finite_difference_check(fn: Callable[[Sequence[Tensor]], Tensor], arrays: Sequence[np.ndarray],
                            h: float = 1e-5) -> float:
    """
    Max relative error between tape gradients and central differences of
    the scalar ``fn`` with respect to every input array.
    """
    inputs = [Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in arrays]
    with Tape() as tape:
        out = fn(inputs)
    tape.backward(out)
    worst = 0.0
    for t in inputs:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        numeric = np.zeros_like(t.data)
        for idx in np.ndindex(t.shape):
            orig = t.data[idx]
            t.data[idx] = orig + h
            up = fn(inputs).item()
            t.data[idx] = orig - h
            down = fn(inputs).item()
            t.data[idx] = orig
            numeric[idx] = (up - down) / (2 * h)
        scale = np.maximum(1e-8, np.maximum(np.abs(analytic), np.abs(numeric)))
        if analytic.size:
            worst = max(worst, float(np.max(np.abs(analytic - numeric) / scale)))
    return worst
