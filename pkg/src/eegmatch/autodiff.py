"""Reverse-mode automatic differentiation over n-d float64 tensors.

A Tensor wraps a numpy array plus an optional gradient; each forward op
records a backward closure on the output node.  ``Tensor.backward`` walks
the graph once in reverse topological order and accumulates gradients into
every reachable ``requires_grad`` tensor.  Nodes whose inputs all have
``requires_grad=False`` keep no graph references, so frozen inputs (e.g. a
frozen text bank) never allocate gradients and never retain the graph.

Every forward result is checked for NaN/Inf and raises NonFiniteError on
violation.  All math is double precision; ``grad_check`` verifies any
scalar-valued function against central finite differences.
"""

from __future__ import annotations

import json
import math
import struct
from typing import Callable, Dict, Iterable, List, Sequence, Tuple

import numpy as np
from scipy.special import erf

from eegmatch import _kernels
from eegmatch.errors import FormatError, NonFiniteError, ValidationError

__all__ = [
    "Tensor", "registered_ops",
    "add", "sub", "mul", "scale", "matmul", "conv2d",
    "relu", "gelu", "exp", "softmax", "log_softmax", "layer_norm",
    "mean", "tsum", "concat", "reshape", "transpose",
    "l2_normalize", "pos_embed_add", "dropout",
    "glorot_uniform", "zeros_param", "zero_grad",
    "grad_check", "save_checkpoint", "load_checkpoint",
]

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _check_finite(data: np.ndarray, op: str) -> None:
    if not np.isfinite(data).all():
        raise NonFiniteError(f"non-finite values produced by op '{op}'")


class Tensor:
    """A float64 array node in the autodiff graph."""

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, *, op: str = "leaf",
                 _parents: Tuple["Tensor", ...] = (), _backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        _check_finite(self.data, op)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.op = op
        # graph pruning: results that cannot need gradients keep no references
        if self.requires_grad and _parents:
            self._parents = _parents
            self._backward = _backward
        else:
            self._parents = ()
            self._backward = None

    # -- basic introspection ------------------------------------------------
    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ValidationError(f"item() on non-scalar tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=False, op="detach")

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    # -- operator sugar -----------------------------------------------------
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    # -- backward pass ------------------------------------------------------
    def backward(self) -> None:
        """Backpropagate from this scalar through the recorded graph."""
        if self.data.size != 1:
            raise ValidationError(
                f"backward() requires a scalar loss; got shape {self.shape}")
        if not self.requires_grad:
            raise ValidationError("backward() on a tensor with requires_grad=False")
        topo: List[Tensor] = []
        seen = set()
        stack: List[Tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)


def _as_tensor(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=np.float64))


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad = t.grad + g


def _reduce_to_shape(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _result(data, parents: Tuple[Tensor, ...], backward, op: str) -> Tensor:
    req = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=req, op=op, _parents=parents,
                  _backward=backward if req else None)


# -- op registry --------------------------------------------------------------

OP_REGISTRY: Dict[str, Callable] = {}


def _register(name: str):
    def deco(fn):
        OP_REGISTRY[name] = fn
        return fn
    return deco


def registered_ops() -> Tuple[str, ...]:
    return tuple(sorted(OP_REGISTRY))


# -- arithmetic ----------------------------------------------------------------

@_register("add")
def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data + b.data

    def backward(g):
        _accumulate(a, _reduce_to_shape(g, a.shape))
        _accumulate(b, _reduce_to_shape(g, b.shape))

    return _result(out, (a, b), backward, "add")


@_register("sub")
def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data - b.data

    def backward(g):
        _accumulate(a, _reduce_to_shape(g, a.shape))
        _accumulate(b, _reduce_to_shape(-g, b.shape))

    return _result(out, (a, b), backward, "sub")


@_register("mul")
def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data * b.data

    def backward(g):
        _accumulate(a, _reduce_to_shape(g * b.data, a.shape))
        _accumulate(b, _reduce_to_shape(g * a.data, b.shape))

    return _result(out, (a, b), backward, "mul")


@_register("scale")
def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    out = x.data * c

    def backward(g):
        _accumulate(x, g * c)

    return _result(out, (x,), backward, "scale")


@_register("matmul")
def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading axes."""
    out = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2)
            _accumulate(a, _reduce_to_shape(ga, a.shape))
        if b.requires_grad:
            gb = np.swapaxes(a.data, -1, -2) @ g
            _accumulate(b, _reduce_to_shape(gb, b.shape))

    return _result(out, (a, b), backward, "matmul")


@_register("conv2d")
def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """x: (B, C_in, H, W), w: (C_out, C_in, k, k) -> (B, C_out, H', W')."""
    out = _kernels.conv2d_forward(x.data, w.data, stride, padding)
    if out.shape[2] < 1 or out.shape[3] < 1:
        raise ValidationError(f"conv2d produced empty output {out.shape}")
    k = w.shape[2]
    x_shape = x.shape

    def backward(g):
        g = np.ascontiguousarray(g)
        if x.requires_grad:
            _accumulate(x, _kernels.conv2d_backward_input(g, w.data, x_shape,
                                                          stride, padding))
        if w.requires_grad:
            _accumulate(w, _kernels.conv2d_backward_kernel(g, x.data, k,
                                                           stride, padding))

    return _result(out, (x, w), backward, "conv2d")


# -- nonlinearities ------------------------------------------------------------

@_register("relu")
def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = np.where(mask, x.data, 0.0)

    def backward(g):
        _accumulate(x, g * mask)

    return _result(out, (x,), backward, "relu")


@_register("gelu")
def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    out = x.data * cdf

    def backward(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x.data * x.data)
        _accumulate(x, g * (cdf + x.data * pdf))

    return _result(out, (x,), backward, "gelu")


@_register("exp")
def exp(x: Tensor) -> Tensor:
    # overflow surfaces as NonFiniteError from the result check, not a warning
    with np.errstate(over="ignore"):
        out = np.exp(x.data)

    def backward(g):
        _accumulate(x, g * out)

    return _result(out, (x,), backward, "exp")


@_register("softmax")
def softmax(x: Tensor) -> Tensor:
    """Numerically stabilized softmax over the last axis."""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        _accumulate(x, out * (g - dot))

    return _result(out, (x,), backward, "softmax")


@_register("log_softmax")
def log_softmax(x: Tensor) -> Tensor:
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)

    def backward(g):
        _accumulate(x, g - soft * g.sum(axis=-1, keepdims=True))

    return _result(out, (x,), backward, "log_softmax")


@_register("layer_norm")
def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    n = x.shape[-1]
    if gamma.shape != (n,) or beta.shape != (n,):
        raise ValidationError(
            f"layer_norm affine shape {gamma.shape}/{beta.shape} != ({n},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    out = gamma.data * xhat + beta.data

    def backward(g):
        if gamma.requires_grad:
            _accumulate(gamma, (g * xhat).reshape(-1, n).sum(axis=0))
        if beta.requires_grad:
            _accumulate(beta, g.reshape(-1, n).sum(axis=0))
        if x.requires_grad:
            dxhat = g * gamma.data
            term = dxhat - dxhat.mean(axis=-1, keepdims=True) \
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            _accumulate(x, inv_std * term)

    return _result(out, (x, gamma, beta), backward, "layer_norm")


@_register("l2_normalize")
def l2_normalize(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Scale the last axis to unit L2 norm (inputs with norm <= eps pass through /eps)."""
    norm = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True))
    denom = np.maximum(norm, eps)
    out = x.data / denom

    def backward(g):
        live = norm > eps
        dot = (g * out).sum(axis=-1, keepdims=True)
        _accumulate(x, g / denom - np.where(live, out * dot / denom, 0.0))

    return _result(out, (x,), backward, "l2_normalize")


# -- reductions and shape ops ----------------------------------------------------

@_register("mean")
def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.mean(axis=axis, keepdims=keepdims)
    count = x.data.size if axis is None else np.prod(
        [x.shape[a] for a in np.atleast_1d(axis)])

    def backward(g):
        g = np.asarray(g)
        if not keepdims and axis is not None:
            g = np.expand_dims(g, axis)
        _accumulate(x, np.broadcast_to(g, x.shape) / count)

    return _result(out, (x,), backward, "mean")


@_register("sum")
def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        g = np.asarray(g)
        if not keepdims and axis is not None:
            g = np.expand_dims(g, axis)
        _accumulate(x, np.broadcast_to(g, x.shape).copy())

    return _result(out, (x,), backward, "sum")


@_register("concat")
def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise ValidationError("concat of zero tensors")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            _accumulate(t, g[tuple(idx)])

    return _result(out, tensors, backward, "concat")


@_register("reshape")
def reshape(x: Tensor, shape) -> Tensor:
    out = x.data.reshape(shape)

    def backward(g):
        _accumulate(x, g.reshape(x.shape))

    return _result(out, (x,), backward, "reshape")


@_register("transpose")
def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    out = np.transpose(x.data, axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        _accumulate(x, np.transpose(g, inverse))

    return _result(out, (x,), backward, "transpose")


@_register("pos_embed_add")
def pos_embed_add(x: Tensor, table: Tensor) -> Tensor:
    """Add a learnable position table broadcast over leading batch axes."""
    if x.shape[x.ndim - table.ndim:] != table.shape:
        raise ValidationError(
            f"position table shape {table.shape} does not match trailing axes of {x.shape}")
    return add(x, table)


@_register("dropout")
def dropout(x: Tensor, p: float, rng: np.random.Generator,
            train: bool = True) -> Tensor:
    """Inverted dropout; identity when not training or p == 0."""
    if not 0.0 <= p < 1.0:
        raise ValidationError(f"dropout probability {p} outside [0, 1)")
    if not train or p == 0.0:
        return x
    mask = (rng.random(x.shape) >= p) / (1.0 - p)
    out = x.data * mask

    def backward(g):
        _accumulate(x, g * mask)

    return _result(out, (x,), backward, "dropout")


# -- parameter initialization ----------------------------------------------------

def glorot_uniform(shape: Sequence[int], rng: np.random.Generator,
                   fan_in: int = None, fan_out: int = None) -> Tensor:
    """Uniform in ±sqrt(6 / (fan_in + fan_out)); conv fans include kernel area."""
    shape = tuple(int(s) for s in shape)
    if fan_in is None or fan_out is None:
        if len(shape) == 2:
            fan_in, fan_out = shape[0], shape[1]
        elif len(shape) == 4:
            receptive = shape[2] * shape[3]
            fan_in, fan_out = shape[1] * receptive, shape[0] * receptive
        else:
            fan_in = fan_out = int(np.prod(shape))
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-limit, limit, size=shape), requires_grad=True)


def zeros_param(shape: Sequence[int]) -> Tensor:
    return Tensor(np.zeros(tuple(int(s) for s in shape)), requires_grad=True)


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# -- finite-difference verification -----------------------------------------------

def grad_check(f: Callable[[Tensor], Tensor], x, h: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    Relative error per coordinate is |analytic - numeric| / max(1e-8,
    |analytic| + |numeric|).  ``f`` must be a deterministic scalar-valued
    function of its tensor argument.
    """
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    probe = Tensor(base.copy(), requires_grad=True)
    out = f(probe)
    if out.data.size != 1:
        raise ValidationError("grad_check requires a scalar-valued function")
    out.backward()
    analytic = probe.grad if probe.grad is not None else np.zeros_like(base)
    analytic = np.asarray(analytic, dtype=np.float64).reshape(-1)

    worst = 0.0
    flat = base.reshape(-1)
    for i in range(flat.size):
        bumped = base.copy().reshape(-1)
        bumped[i] = flat[i] + h
        f_plus = f(Tensor(bumped.reshape(base.shape))).item()
        bumped[i] = flat[i] - h
        f_minus = f(Tensor(bumped.reshape(base.shape))).item()
        numeric = (f_plus - f_minus) / (2.0 * h)
        rel = abs(analytic[i] - numeric) / max(1e-8, abs(analytic[i]) + abs(numeric))
        worst = max(worst, rel)
    return worst


# -- checkpoint format -------------------------------------------------------------

CHECKPOINT_MAGIC = b"EEGP"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, params: Dict[str, Tensor], *, seed: int, step: int,
                    extra: dict = None) -> None:
    """Write named parameters: JSON manifest + little-endian f64 payload."""
    entries = []
    payloads = []
    for name, tensor in params.items():
        arr = np.ascontiguousarray(tensor.data, dtype=np.float64)
        entries.append({"name": name, "shape": list(arr.shape)})
        payloads.append(arr)
    manifest = {
        "schema": CHECKPOINT_VERSION,
        "seed": int(seed),
        "step": int(step),
        "params": entries,
    }
    if extra:
        manifest["extra"] = extra
    header = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for arr in payloads:
            fh.write(arr.astype("<f8", copy=False).tobytes())


def load_checkpoint(path) -> Tuple[Dict[str, np.ndarray], dict]:
    """Read a checkpoint back; returns (name -> array, manifest)."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise FormatError(f"bad checkpoint magic {magic!r}")
        version = struct.unpack("<I", fh.read(4))[0]
        if version != CHECKPOINT_VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        header_len = struct.unpack("<Q", fh.read(8))[0]
        try:
            manifest = json.loads(fh.read(header_len).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise FormatError(f"corrupt checkpoint manifest: {e}") from e
        arrays: Dict[str, np.ndarray] = {}
        for entry in manifest["params"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            raw = fh.read(count * 8)
            if len(raw) != count * 8:
                raise FormatError(
                    f"truncated checkpoint payload for parameter '{entry['name']}'")
            arrays[entry["name"]] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
        if fh.read(1):
            raise FormatError("trailing bytes after checkpoint payload")
    return arrays, manifest
