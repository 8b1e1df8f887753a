"""Minimal reverse-mode automatic differentiation over dense numpy arrays.

Only the operations the segmentation network needs are provided. Every
tensor produced by an operation on tensors that require gradients carries a
:class:`Node` describing how to push gradients back to its inputs;
:func:`backward` linearises the reachable nodes into a :class:`Tape` and runs
the rules in reverse.

Layout is single-sample channel-first ``[C, D, H, W]``. Storage is float32;
float64 tensors are accepted and preserved so that gradient checks can run in
double precision.
"""

from __future__ import annotations

import itertools
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32
_FLOAT_DTYPES = (np.float32, np.float64)

_ids = itertools.count()

# Set CORRSEG_DEBUG=1 to check every forward result for NaN/Inf.
DEBUG = os.environ.get("CORRSEG_DEBUG", "") not in ("", "0")


class Tensor:
    """N-dimensional float array with an optional link into the autodiff graph."""

    __slots__ = ("data", "requires_grad", "grad", "node", "tape_id")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is None:
            dtype = arr.dtype if arr.dtype in _FLOAT_DTYPES else DEFAULT_DTYPE
        # ascontiguousarray promotes 0-d input to shape (1,); keep scalars 0-d
        self.data: np.ndarray = np.ascontiguousarray(arr, dtype=dtype).reshape(arr.shape)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.node: Node | None = None
        self.tape_id: int | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # operator sugar; all of these dispatch to the differentiable ops below
    def __add__(self, other):
        return add(self, _as_tensor(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self))

    def __rsub__(self, other):
        return sub(_as_tensor(other, self), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other, self))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, _as_tensor(other, self))

    def __rtruediv__(self, other):
        return div(_as_tensor(other, self), self)

    def __neg__(self):
        return scale(self, -1.0)


def _not_scalar(t: Tensor):
    raise ValueError(f"item() needs a single-element tensor, got shape {t.shape}")


def _as_tensor(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.dtype), dtype=like.dtype)


class Parameter(Tensor):
    """A named leaf tensor that always requires gradients."""

    __slots__ = ("name",)

    def __init__(self, name: str, data, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.name = name
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


@dataclass
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    output_id: int = -1

    @property
    def input_ids(self) -> list[int | None]:
        return [t.tape_id for t in self.inputs]


@dataclass
class Tape:
    """Recorded operations in topological order (inputs before consumers)."""

    nodes: list[Node] = field(default_factory=list)
    outputs: list[Tensor] = field(default_factory=list)

    @classmethod
    def from_output(cls, root: Tensor) -> "Tape":
        tape = cls()
        seen: set[int] = set()
        # iterative post-order DFS; deep decoder graphs overflow recursion
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            t, expanded = stack.pop()
            if t.node is None:
                continue
            key = id(t)
            if expanded:
                tape.nodes.append(t.node)
                tape.outputs.append(t)
                continue
            if key in seen:
                continue
            seen.add(key)
            stack.append((t, True))
            for parent in t.node.inputs:
                if parent.node is not None and id(parent) not in seen:
                    stack.append((parent, False))
        return tape

    def __len__(self) -> int:
        return len(self.nodes)


def _record(out_data: np.ndarray, op: str, inputs: tuple[Tensor, ...], rule) -> Tensor:
    if DEBUG and not np.all(np.isfinite(out_data)):
        if all(np.all(np.isfinite(t.data)) for t in inputs):
            raise FloatingPointError(f"{op} produced non-finite values from finite inputs")
    out = Tensor(out_data, dtype=out_data.dtype)
    if any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.tape_id = next(_ids)
        out.node = Node(op, inputs, rule, out.tape_id)
    return out


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    Leaf gradients accumulate across calls; call ``zero_grad`` between steps.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if loss.node is None:
        raise ValueError("backward() called on a tensor that is not on the tape")
    tape = Tape.from_output(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node, out in zip(reversed(tape.nodes), reversed(tape.outputs)):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            if inp.node is None:
                if inp.grad is None:
                    inp.grad = np.zeros_like(inp.data)
                inp.grad += gi
            else:
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi


# ---------------------------------------------------------------------------
# elementwise arithmetic


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _align(a: Tensor, b: Tensor) -> tuple[np.ndarray, tuple[int, ...]]:
    """View of b broadcastable against a; [C] vectors bind to the channel axis."""
    bd = b.data
    if bd.ndim == 1 and a.data.ndim > 1 and bd.shape[0] == a.shape[0] and a.shape[0] != 1:
        bd = bd.reshape((bd.shape[0],) + (1,) * (a.data.ndim - 1))
    try:
        np.broadcast_shapes(a.shape, bd.shape)
    except ValueError:
        raise ValueError(f"shapes {a.shape} and {b.shape} are not broadcastable") from None
    return bd, bd.shape


def elementwise(a: Tensor, b: Tensor, kind: str) -> Tensor:
    """``add`` or ``mul`` with numpy broadcasting; a 1-D ``b`` of length C is per-channel."""
    if kind == "add":
        return add(a, b)
    if kind == "mul":
        return mul(a, b)
    raise ValueError(f"unknown elementwise kind {kind!r}")


def add(a: Tensor, b: Tensor) -> Tensor:
    bd, bshape = _align(a, b)
    out = a.data + bd

    def rule(g):
        return (_unbroadcast(g, a.shape), _unbroadcast(g, bshape).reshape(b.shape))

    return _record(out, "add", (a, b), rule)


def sub(a: Tensor, b: Tensor) -> Tensor:
    bd, bshape = _align(a, b)
    out = a.data - bd

    def rule(g):
        return (_unbroadcast(g, a.shape), -_unbroadcast(g, bshape).reshape(b.shape))

    return _record(out, "sub", (a, b), rule)


def mul(a: Tensor, b: Tensor) -> Tensor:
    bd, bshape = _align(a, b)
    out = a.data * bd

    def rule(g):
        ga = _unbroadcast(g * bd, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, bshape).reshape(b.shape) if b.requires_grad else None
        return (ga, gb)

    return _record(out, "mul", (a, b), rule)


def div(a: Tensor, b: Tensor) -> Tensor:
    bd, bshape = _align(a, b)
    out = a.data / bd

    def rule(g):
        ga = _unbroadcast(g / bd, a.shape)
        gb = _unbroadcast(-g * a.data / (bd * bd), bshape).reshape(b.shape)
        return (ga, gb)

    return _record(out, "div", (a, b), rule)


def scale(a: Tensor, factor: float) -> Tensor:
    out = a.data * a.data.dtype.type(factor)
    return _record(out, "scale", (a,), lambda g: (g * a.data.dtype.type(factor),))


def absolute(a: Tensor) -> Tensor:
    sign = np.where(a.data >= 0, 1.0, -1.0).astype(a.dtype)
    return _record(np.abs(a.data), "abs", (a,), lambda g: (g * sign,))


def sum(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    out = np.asarray(a.data.sum(dtype=a.dtype), dtype=a.dtype)
    return _record(out, "sum", (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))


def mean(a: Tensor) -> Tensor:
    n = a.data.size
    out = np.asarray(a.data.mean(dtype=a.dtype), dtype=a.dtype)
    return _record(out, "mean", (a,), lambda g: (np.full(a.shape, g / n, dtype=a.dtype),))


def stack_scalars(values: Sequence[Tensor]) -> Tensor:
    out = np.array([v.data.reshape(()) for v in values], dtype=values[0].dtype)

    def rule(g):
        return tuple(g[i].reshape(v.shape) for i, v in enumerate(values))

    return _record(out, "stack", tuple(values), rule)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    out = a.data.reshape(shape)
    return _record(out, "reshape", (a,), lambda g: (g.reshape(a.shape),))


# ---------------------------------------------------------------------------
# activations


def relu(x: Tensor) -> Tensor:
    mask = x.data >= 0
    return _record(np.where(mask, x.data, 0).astype(x.dtype), "relu", (x,), lambda g: (g * mask,))


def leaky_relu(x: Tensor, slope: float = 0.01) -> Tensor:
    if not 0.0 < slope < 1.0:
        raise ValueError(f"leaky_relu slope must lie in (0, 1), got {slope}")
    s = x.dtype.type(slope)
    factor = np.where(x.data >= 0, x.dtype.type(1), s)
    return _record(x.data * factor, "leaky_relu", (x,), lambda g: (g * factor,))


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    # split by sign to avoid overflow in exp
    e = np.exp(-np.abs(d))
    out = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)
    return _record(out, "sigmoid", (x,), lambda g: (g * out * (1 - out),))


def activation(x: Tensor, kind: str, slope: float = 0.01) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "leaky_relu":
        return leaky_relu(x, slope)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown activation {kind!r}")


# ---------------------------------------------------------------------------
# linear layers and volume ops


def dense(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """``weight @ x + bias`` for a single vector."""
    if x.data.ndim != 1 or weight.data.ndim != 2 or weight.shape[1] != x.shape[0]:
        raise ValueError(f"dense: weight {weight.shape} incompatible with input {x.shape}")
    if bias.shape != (weight.shape[0],):
        raise ValueError(f"dense: bias {bias.shape} does not match weight {weight.shape}")
    out = weight.data @ x.data + bias.data

    def rule(g):
        return (weight.data.T @ g, np.outer(g, x.data), g)

    return _record(out, "dense", (x, weight, bias), rule)


def _conv_geometry(size: int, k: int, dilation: int, stride: int) -> tuple[int, int]:
    pad = dilation * (k - 1) // 2
    out = (size + 2 * pad - dilation * (k - 1) - 1) // stride + 1
    return pad, out


def conv3d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor,
    dilation: int = 1,
    stride: int = 1,
) -> Tensor:
    """3D cross-correlation with zero "same" padding.

    With ``stride=1`` the output keeps the input's spatial extent; ``stride=2``
    halves it (used for downsampling). Implemented as im2col + one matmul.
    """
    if x.data.ndim != 4:
        raise ValueError(f"conv3d expects input [C,D,H,W], got shape {x.shape}")
    if weight.data.ndim != 5:
        raise ValueError(f"conv3d expects weight [C_out,C_in,k,k,k], got shape {weight.shape}")
    c_out, c_in, kd, kh, kw = weight.shape
    if c_in != x.shape[0]:
        raise ValueError(
            f"conv3d: weight shape {weight.shape} expects {c_in} input channels, "
            f"input shape {x.shape} has {x.shape[0]}"
        )
    if not (kd == kh == kw):
        raise ValueError(f"conv3d needs a cubic kernel, got {weight.shape[2:]}")
    k = kd
    if k % 2 == 0:
        raise ValueError(f"conv3d needs an odd kernel size, got {k}")
    if dilation < 1 or stride < 1:
        raise ValueError(f"dilation and stride must be positive, got {dilation}, {stride}")
    if bias.shape != (c_out,):
        raise ValueError(f"conv3d: bias shape {bias.shape} does not match {c_out} outputs")

    _, D, H, W = x.shape
    pad, Do = _conv_geometry(D, k, dilation, stride)
    _, Ho = _conv_geometry(H, k, dilation, stride)
    _, Wo = _conv_geometry(W, k, dilation, stride)
    dtype = x.dtype
    n_out = Do * Ho * Wo

    if k == 1 and stride == 1:
        cols = x.data.reshape(c_in, -1)
        offsets = None
    else:
        xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad), (pad, pad))) if pad else x.data
        offsets = list(itertools.product(range(k), repeat=3))
        cols = np.empty((c_in, len(offsets), Do, Ho, Wo), dtype=dtype)
        span = (stride * (Do - 1) + 1, stride * (Ho - 1) + 1, stride * (Wo - 1) + 1)
        for i, (a, b, c) in enumerate(offsets):
            a, b, c = a * dilation, b * dilation, c * dilation
            cols[:, i] = xp[:, a : a + span[0] : stride, b : b + span[1] : stride, c : c + span[2] : stride]
        cols = cols.reshape(c_in * len(offsets), n_out)

    w2 = weight.data.reshape(c_out, -1)
    out = (w2 @ cols).reshape(c_out, Do, Ho, Wo)
    out += bias.data.reshape(c_out, 1, 1, 1)

    def rule(g):
        g2 = g.reshape(c_out, n_out)
        gw = (g2 @ cols.T).reshape(weight.shape) if weight.requires_grad else None
        gb = g2.sum(axis=1) if bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = w2.T @ g2
            if offsets is None:
                gx = gcols.reshape(x.shape)
            else:
                gcols = gcols.reshape(c_in, len(offsets), Do, Ho, Wo)
                gxp = np.zeros((c_in, D + 2 * pad, H + 2 * pad, W + 2 * pad), dtype=dtype)
                for i, (a, b, c) in enumerate(offsets):
                    a, b, c = a * dilation, b * dilation, c * dilation
                    gxp[:, a : a + span[0] : stride, b : b + span[1] : stride, c : c + span[2] : stride] += gcols[:, i]
                gx = gxp[:, pad : pad + D, pad : pad + H, pad : pad + W] if pad else gxp
        return (gx, gw, gb)

    return _record(out, "conv3d", (x, weight, bias), rule)


def upsample3d(x: Tensor, factor: int) -> Tensor:
    """Nearest-neighbour upsampling of the three spatial axes."""
    if factor < 1:
        raise ValueError(f"upsample factor must be >= 1, got {factor}")
    if x.data.ndim != 4:
        raise ValueError(f"upsample3d expects [C,D,H,W], got shape {x.shape}")
    if factor == 1:
        return _record(x.data.copy(), "upsample3d", (x,), lambda g: (g,))
    C, D, H, W = x.shape
    f = factor
    out = np.broadcast_to(
        x.data[:, :, None, :, None, :, None], (C, D, f, H, f, W, f)
    ).reshape(C, D * f, H * f, W * f)

    def rule(g):
        return (g.reshape(C, D, f, H, f, W, f).sum(axis=(2, 4, 6)),)

    return _record(np.ascontiguousarray(out), "upsample3d", (x,), rule)


def concat_channels(inputs: Sequence[Tensor]) -> Tensor:
    if not inputs:
        raise ValueError("concat_channels needs at least one input")
    spatial = inputs[0].shape[1:]
    for t in inputs[1:]:
        if t.shape[1:] != spatial:
            raise ValueError(
                f"concat_channels: spatial shape {t.shape[1:]} does not match {spatial}"
            )
    out = np.concatenate([t.data for t in inputs], axis=0)
    bounds = np.cumsum([0] + [t.shape[0] for t in inputs])

    def rule(g):
        return tuple(g[bounds[i] : bounds[i + 1]] for i in range(len(inputs)))

    return _record(out, "concat", tuple(inputs), rule)


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    """Channels ``[start, stop)`` along axis 0 (also splits plain vectors)."""
    out = x.data[start:stop].copy()

    def rule(g):
        gx = np.zeros_like(x.data)
        gx[start:stop] = g
        return (gx,)

    return _record(out, "slice", (x,), rule)


def global_avg_pool(x: Tensor) -> Tensor:
    if x.data.ndim < 2 or x.data[0].size == 0:
        raise ValueError(f"global_avg_pool needs a nonempty [C,...] input, got {x.shape}")
    C = x.shape[0]
    n = x.data[0].size
    out = x.data.reshape(C, -1).mean(axis=1, dtype=x.dtype)

    def rule(g):
        return (np.broadcast_to((g / n).reshape((C,) + (1,) * (x.data.ndim - 1)), x.shape).copy(),)

    return _record(out, "global_avg_pool", (x,), rule)


def channel_mean(x: Tensor) -> Tensor:
    """Mean over the channel axis, keeping it as a singleton: [C,...] -> [1,...]."""
    C = x.shape[0]
    out = x.data.mean(axis=0, keepdims=True, dtype=x.dtype)
    return _record(out, "channel_mean", (x,), lambda g: (np.broadcast_to(g / C, x.shape).copy(),))


def channel_max(x: Tensor) -> Tensor:
    """Max over the channel axis; ties send the gradient to the first maximiser."""
    idx = np.argmax(x.data, axis=0)[None]
    out = np.take_along_axis(x.data, idx, axis=0)

    def rule(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, idx, g, axis=0)
        return (gx,)

    return _record(out, "channel_max", (x,), rule)


def instance_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-channel standardisation over spatial axes, no affine parameters."""
    if eps <= 0:
        raise ValueError(f"instance_norm eps must be positive, got {eps}")
    C = x.shape[0]
    flat = x.data.reshape(C, -1)
    mu = flat.mean(axis=1, keepdims=True)
    centered = flat - mu
    var = (centered * centered).mean(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + x.dtype.type(eps))
    y = centered * inv_std

    def rule(g):
        g2 = g.reshape(C, -1)
        gm = g2.mean(axis=1, keepdims=True)
        gy = (g2 * y).mean(axis=1, keepdims=True)
        return ((inv_std * (g2 - gm - y * gy)).reshape(x.shape),)

    return _record(y.reshape(x.shape), "instance_norm", (x,), rule)


# ---------------------------------------------------------------------------
# gradient checking


def _scalar(t: Tensor) -> float:
    if t.data.size != 1:
        raise ValueError(f"gradcheck needs a scalar-valued function, got shape {t.shape}")
    return float(t.data.reshape(()))


def gradcheck(
    f: Callable[[Tensor], Tensor],
    x: Tensor | np.ndarray,
    h: float = 1e-3,
    max_elements: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between the tape gradient of scalar ``f`` and central differences.

    Relative error per element is ``|a - n| / max(|a|, |n|, 1e-8)``. For large
    inputs ``max_elements`` checks a random subset of coordinates.
    """
    base = np.array(x.data if isinstance(x, Tensor) else x, copy=True)
    dtype = base.dtype if base.dtype in _FLOAT_DTYPES else np.float64
    base = base.astype(dtype)

    probe = Tensor(base, requires_grad=True, dtype=dtype)
    out = f(probe)
    backward(out)
    analytic = probe.grad if probe.grad is not None else np.zeros_like(base)

    flat_idx = np.arange(base.size)
    if max_elements is not None and base.size > max_elements:
        rng = rng or np.random.default_rng(0)
        flat_idx = rng.choice(base.size, size=max_elements, replace=False)

    worst = 0.0
    for i in flat_idx:
        idx = np.unravel_index(i, base.shape)
        plus = base.copy()
        plus[idx] += h
        minus = base.copy()
        minus[idx] -= h
        fp = _scalar(f(Tensor(plus, dtype=dtype)))
        fm = _scalar(f(Tensor(minus, dtype=dtype)))
        numeric = (fp - fm) / (2 * h)
        a = float(analytic[idx])
        err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        worst = max(worst, err)
    return worst


def param_gradcheck(
    loss_fn: Callable[[], Tensor],
    params: Iterable[Parameter],
    h: float = 1e-3,
    per_param: int = 3,
    rng: np.random.Generator | None = None,
    abs_floor: float = 1e-8,
) -> float:
    """Like :func:`gradcheck` but perturbs model parameters in place.

    ``per_param`` random coordinates of every parameter are checked.
    """
    params = list(params)
    rng = rng or np.random.default_rng(0)
    for p in params:
        p.zero_grad()
    backward(loss_fn())
    worst = 0.0
    for p in params:
        flat = p.data.reshape(-1)
        grad = p.grad.reshape(-1).copy()
        picks = rng.choice(flat.size, size=min(per_param, flat.size), replace=False)
        for i in picks:
            orig = flat[i]
            flat[i] = orig + h
            fp = _scalar(loss_fn())
            flat[i] = orig - h
            fm = _scalar(loss_fn())
            flat[i] = orig
            numeric = (fp - fm) / (2 * h)
            a = float(grad[i])
            err = abs(a - numeric) / max(abs(a), abs(numeric), abs_floor)
            worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# serialization


def save_tensor(t: Tensor | np.ndarray, path: str | os.PathLike) -> None:
    """Write ``<path>`` (little-endian float32, row-major) and ``<path>.json``."""
    data = t.data if isinstance(t, Tensor) else np.asarray(t)
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(np.ascontiguousarray(data, dtype="<f4").tobytes())
        sidecar = {"shape": list(data.shape), "dtype": "f32", "order": "row-major"}
        Path(str(path) + ".json").write_text(json.dumps(sidecar) + "\n")
    except OSError as exc:
        raise OSError(f"failed to write tensor to {path}: {exc}") from exc


def load_tensor(path: str | os.PathLike, requires_grad: bool = False) -> Tensor:
    path = Path(path)
    try:
        meta = json.loads(Path(str(path) + ".json").read_text())
        raw = path.read_bytes()
    except OSError as exc:
        raise OSError(f"failed to read tensor from {path}: {exc}") from exc
    if meta.get("dtype") != "f32" or meta.get("order") != "row-major":
        raise ValueError(f"{path}: unsupported tensor sidecar {meta}")
    shape = tuple(meta["shape"])
    arr = np.frombuffer(raw, dtype="<f4")
    if arr.size != int(np.prod(shape, dtype=np.int64)):
        raise ValueError(f"{path}: {arr.size} values do not fill shape {shape}")
    return Tensor(arr.reshape(shape).astype(np.float32), requires_grad=requires_grad)
