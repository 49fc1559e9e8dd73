"""Dense float64 tensors with a tape-based reverse-mode autodiff engine.

The backward pass is itself built from the same primitive ops, so gradients
can be differentiated again (create_graph). Guided backpropagation is a
per-ReLU rule override selected through GradMode.
"""

from __future__ import annotations

import enum
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np


class GradMode(enum.Enum):
    STANDARD = "standard"
    GUIDED = "guided"


@dataclass(frozen=True)
class BackwardOptions:
    """How a backward pass propagates: ReLU rule and re-differentiability."""

    mode: GradMode = GradMode.STANDARD
    create_graph: bool = False

    def __post_init__(self):
        if self.mode is GradMode.GUIDED and self.create_graph:
            raise ValueError(
                "guided backward is always detached; create_graph=True is not allowed"
            )


class Node:
    """One recorded primitive op. Inputs always precede the node on the tape."""

    __slots__ = ("tape", "op", "inputs", "attrs", "out", "idx")

    def __init__(self, tape, op, inputs, attrs, out, idx):
        self.tape = tape
        self.op = op
        self.inputs = inputs
        self.attrs = attrs
        self.out = out
        self.idx = idx


class Tape:
    """Append-only record of primitive ops; one tape per thread of execution."""

    def __init__(self):
        self.nodes: list[Node] = []
        self._recording = True

    def __len__(self):
        return len(self.nodes)

    def watch(self, t: "Tensor") -> "Tensor":
        """Return an alias of t registered as a differentiable leaf on this tape."""
        out = Tensor(t.data, requires_grad=True, _copy=False)
        node = Node(self, "leaf", (), None, out, len(self.nodes))
        self.nodes.append(node)
        out.node = node
        return out

    @contextmanager
    def paused(self):
        prev = self._recording
        self._recording = False
        try:
            yield
        finally:
            self._recording = prev

    def replay(self) -> bool:
        """Recompute every recorded op from its stored inputs; True iff all
        stored outputs are reproduced bit-exactly."""
        for node in self.nodes:
            if node.op == "leaf":
                continue
            spec = _REGISTRY[node.op]
            redone = spec.forward([t.data for t in node.inputs], node.attrs)
            if not np.array_equal(redone, node.out.data):
                return False
        return True


class Tensor:
    """N-d array of float64 in row-major order, optionally on a tape."""

    __slots__ = ("data", "node", "requires_grad")

    def __init__(self, data, requires_grad=False, _copy=True):
        arr = np.asarray(data, dtype=np.float64)
        if _copy:
            arr = np.ascontiguousarray(arr).copy()
        self.data = arr
        self.node: Node | None = None
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return detach(self)

    def __repr__(self):
        tag = "" if self.node is None else f", tape@{self.node.idx}"
        return f"Tensor(shape={self.shape}{tag})"

    # arithmetic sugar; python scalars go through the cheaper scale/shift path
    def __add__(self, other):
        return add(self, _as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / float(other))
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape):
        return reshape(self, shape)

    def abs(self):
        return absolute(self)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape), _copy=False)


def ones(shape) -> Tensor:
    return Tensor(np.ones(shape), _copy=False)


def detach(t: Tensor) -> Tensor:
    """Same data and shape, no tape node: a stop-gradient constant."""
    out = Tensor(t.data, _copy=False)
    return out


# --------------------------------------------------------------------------
# op registry
# --------------------------------------------------------------------------

class _OpSpec:
    __slots__ = ("forward", "backward")

    def __init__(self, forward, backward):
        self.forward = forward
        self.backward = backward


_REGISTRY: dict[str, _OpSpec] = {}


def _op(name):
    def register(pair):
        fwd, bwd = pair()
        _REGISTRY[name] = _OpSpec(fwd, bwd)
        return pair

    return register


def _tape_of(inputs) -> Tape | None:
    tape = None
    for t in inputs:
        if t.node is not None:
            if tape is None:
                tape = t.node.tape
            elif tape is not t.node.tape:
                raise ValueError("inputs recorded on different tapes")
    if tape is not None and not tape._recording:
        return None
    return tape


def _apply(kind: str, inputs, attrs=None) -> Tensor:
    spec = _REGISTRY[kind]
    out_data = spec.forward([t.data for t in inputs], attrs)
    out = Tensor(out_data, _copy=False)
    tape = _tape_of(inputs)
    if tape is not None:
        node = Node(tape, kind, tuple(inputs), attrs, out, len(tape.nodes))
        tape.nodes.append(node)
        out.node = node
    return out


def _shape_err(kind, *extents):
    return ValueError(f"{kind}: incompatible shapes {' vs '.join(map(str, extents))}")


def _reduce_to(g: Tensor, shape) -> Tensor:
    """Sum a broadcast gradient back down to the shape of a size-1 operand."""
    if g.shape == tuple(shape):
        return g
    return reshape(reduce_sum(g), shape)


def _binary_out_shape(kind, a, b):
    if a.shape == b.shape:
        return a.shape
    if a.size == 1 or b.size == 1:
        return b.shape if a.size == 1 else a.shape
    raise _shape_err(kind, a.shape, b.shape)


# ---- elementwise arithmetic ----

@_op("add")
def _add_spec():
    def fwd(xs, attrs):
        _binary_out_shape("add", *[np.asarray(x) for x in xs])
        return xs[0] + xs[1]

    def bwd(node, g, mode):
        a, b = node.inputs
        return [_reduce_to(g, a.shape), _reduce_to(g, b.shape)]

    return fwd, bwd


@_op("sub")
def _sub_spec():
    def fwd(xs, attrs):
        _binary_out_shape("sub", *[np.asarray(x) for x in xs])
        return xs[0] - xs[1]

    def bwd(node, g, mode):
        a, b = node.inputs
        return [_reduce_to(g, a.shape), _reduce_to(neg(g), b.shape)]

    return fwd, bwd


@_op("mul")
def _mul_spec():
    def fwd(xs, attrs):
        _binary_out_shape("mul", *[np.asarray(x) for x in xs])
        return xs[0] * xs[1]

    def bwd(node, g, mode):
        a, b = node.inputs
        return [_reduce_to(mul(g, b), a.shape), _reduce_to(mul(g, a), b.shape)]

    return fwd, bwd


@_op("div")
def _div_spec():
    def fwd(xs, attrs):
        _binary_out_shape("div", *[np.asarray(x) for x in xs])
        return xs[0] / xs[1]

    def bwd(node, g, mode):
        a, b = node.inputs
        out = node.out
        ga = _reduce_to(div(g, b), a.shape)
        gb = _reduce_to(neg(div(mul(g, out), b)), b.shape)
        return [ga, gb]

    return fwd, bwd


@_op("neg")
def _neg_spec():
    def fwd(xs, attrs):
        return -xs[0]

    def bwd(node, g, mode):
        return [neg(g)]

    return fwd, bwd


@_op("scale")
def _scale_spec():
    def fwd(xs, attrs):
        return xs[0] * attrs["factor"]

    def bwd(node, g, mode):
        return [scale(g, node.attrs["factor"])]

    return fwd, bwd


@_op("minimum")
def _minimum_spec():
    def fwd(xs, attrs):
        _binary_out_shape("minimum", *[np.asarray(x) for x in xs])
        return np.minimum(xs[0], xs[1])

    def bwd(node, g, mode):
        a, b = node.inputs
        # ties route to the first argument
        take_a = Tensor((a.data <= b.data).astype(np.float64), _copy=False)
        take_b = Tensor((b.data < a.data).astype(np.float64), _copy=False)
        return [_reduce_to(mul(g, take_a), a.shape), _reduce_to(mul(g, take_b), b.shape)]

    return fwd, bwd


# ---- elementwise functions ----

@_op("relu")
def _relu_spec():
    def fwd(xs, attrs):
        return np.maximum(xs[0], 0.0)

    def bwd(node, g, mode):
        gate = Tensor((node.inputs[0].data > 0).astype(np.float64), _copy=False)
        if mode is GradMode.GUIDED:
            return [mul(relu(g), gate)]
        return [mul(g, gate)]

    return fwd, bwd


@_op("abs")
def _abs_spec():
    def fwd(xs, attrs):
        return np.abs(xs[0])

    def bwd(node, g, mode):
        # subgradient 0 at exactly 0
        sign = Tensor(np.sign(node.inputs[0].data), _copy=False)
        return [mul(g, sign)]

    return fwd, bwd


@_op("log")
def _log_spec():
    def fwd(xs, attrs):
        return np.log(xs[0])

    def bwd(node, g, mode):
        return [div(g, node.inputs[0])]

    return fwd, bwd


@_op("exp")
def _exp_spec():
    def fwd(xs, attrs):
        return np.exp(xs[0])

    def bwd(node, g, mode):
        return [mul(g, node.out)]

    return fwd, bwd


@_op("sqrt")
def _sqrt_spec():
    def fwd(xs, attrs):
        return np.sqrt(xs[0])

    def bwd(node, g, mode):
        return [div(g, scale(node.out, 2.0))]

    return fwd, bwd


# ---- shape movement ----

@_op("reshape")
def _reshape_spec():
    def fwd(xs, attrs):
        return np.reshape(xs[0], attrs["shape"])

    def bwd(node, g, mode):
        return [reshape(g, node.inputs[0].shape)]

    return fwd, bwd


@_op("pad")
def _pad_spec():
    def fwd(xs, attrs):
        return np.pad(xs[0], attrs["pads"], mode="constant")

    def bwd(node, g, mode):
        return [crop(g, node.attrs["pads"])]

    return fwd, bwd


@_op("crop")
def _crop_spec():
    def fwd(xs, attrs):
        sl = tuple(
            slice(b, xs[0].shape[i] - a) for i, (b, a) in enumerate(attrs["pads"])
        )
        return np.ascontiguousarray(xs[0][sl])

    def bwd(node, g, mode):
        return [pad(g, node.attrs["pads"])]

    return fwd, bwd


@_op("broadcast_to")
def _broadcast_spec():
    def fwd(xs, attrs):
        x = xs[0]
        shape = tuple(attrs["shape"])
        if x.ndim != len(shape) or any(
            s not in (1, t) for s, t in zip(x.shape, shape)
        ):
            raise _shape_err("broadcast_to", x.shape, shape)
        return np.ascontiguousarray(np.broadcast_to(x, shape))

    def bwd(node, g, mode):
        x = node.inputs[0]
        axes = tuple(
            i for i, (s, t) in enumerate(zip(x.shape, g.shape)) if s == 1 and t != 1
        )
        return [reduce_sum(g, axis=axes, keepdims=True) if axes else g]

    return fwd, bwd


@_op("sum")
def _sum_spec():
    def fwd(xs, attrs):
        return np.asarray(np.sum(xs[0], axis=attrs["axis"], keepdims=attrs["keepdims"]))

    def bwd(node, g, mode):
        x = node.inputs[0]
        axis = node.attrs["axis"]
        if axis is None:
            axes = tuple(range(len(x.shape)))
        elif isinstance(axis, int):
            axes = (axis,)
        else:
            axes = tuple(axis)
        kshape = tuple(1 if i in axes else s for i, s in enumerate(x.shape))
        gk = g if node.attrs["keepdims"] else reshape(g, kshape)
        return [broadcast_to(gk, x.shape) if x.shape else gk]

    return fwd, bwd


# ---- linear algebra ----

@_op("matmul")
def _matmul_spec():
    def fwd(xs, attrs):
        a, b = xs
        if a.ndim != 2 or b.ndim != 2:
            raise _shape_err("matmul", a.shape, b.shape)
        ta, tb = attrs["ta"], attrs["tb"]
        inner_a = a.shape[0] if ta else a.shape[1]
        inner_b = b.shape[1] if tb else b.shape[0]
        if inner_a != inner_b:
            raise _shape_err("matmul", a.shape, b.shape)
        return (a.T if ta else a) @ (b.T if tb else b)

    def bwd(node, g, mode):
        a, b = node.inputs
        ta, tb = node.attrs["ta"], node.attrs["tb"]
        if not ta and not tb:
            return [matmul(g, b, tb=True), matmul(a, g, ta=True)]
        if ta and not tb:
            return [matmul(b, g, tb=True), matmul(a, g)]
        if not ta and tb:
            return [matmul(g, b), matmul(g, a, ta=True)]
        return [matmul(b, g, ta=True, tb=True), matmul(g, a, ta=True, tb=True)]

    return fwd, bwd


@_op("linear")
def _linear_spec():
    def fwd(xs, attrs):
        x, w = xs[0], xs[1]
        if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
            raise _shape_err("linear", x.shape, w.shape)
        out = x @ w.T
        if len(xs) == 3:
            if xs[2].shape != (w.shape[0],):
                raise _shape_err("linear bias", xs[2].shape, (w.shape[0],))
            out = out + xs[2]
        return out

    def bwd(node, g, mode):
        x, w = node.inputs[0], node.inputs[1]
        grads = [matmul(g, w), matmul(g, x, ta=True)]
        if len(node.inputs) == 3:
            grads.append(reduce_sum(g, axis=0))
        return grads

    return fwd, bwd


# ---- convolution family (mutually adjoint triple) ----

def _conv_geometry(kind, in_hw, k_hw, stride, padding):
    if stride < 1:
        raise ValueError(f"{kind}: stride must be >= 1, got {stride}")
    h = in_hw[0] + 2 * padding - k_hw[0]
    w = in_hw[1] + 2 * padding - k_hw[1]
    if h < 0 or w < 0:
        raise ValueError(
            f"{kind}: kernel {k_hw} larger than padded input "
            f"{tuple(d + 2 * padding for d in in_hw)}"
        )
    return h // stride + 1, w // stride + 1


def _conv2d_fwd(x, w, stride, padding):
    n, ci, hh, ww = x.shape
    co, ci2, kh, kw = w.shape
    if ci != ci2:
        raise _shape_err("conv2d", x.shape, w.shape)
    ho, wo = _conv_geometry("conv2d", (hh, ww), (kh, kw), stride, padding)
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    out = np.zeros((n, co, ho, wo))
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
            out += np.einsum("ncij,oc->noij", patch, w[:, :, i, j], optimize=True)
    return out


def _conv2d_input_grad_fwd(g, w, stride, padding, in_hw):
    n, co, ho, wo = g.shape
    _, ci, kh, kw = w.shape
    hh, ww = in_hw
    gxp = np.zeros((n, ci, hh + 2 * padding, ww + 2 * padding))
    for i in range(kh):
        for j in range(kw):
            contrib = np.einsum("noij,oc->ncij", g, w[:, :, i, j], optimize=True)
            gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += contrib
    if padding:
        gxp = gxp[:, :, padding:-padding, padding:-padding]
    return np.ascontiguousarray(gxp)


def _conv2d_kernel_grad_fwd(x, g, stride, padding, k_hw):
    n, ci, hh, ww = x.shape
    _, co, ho, wo = g.shape
    kh, kw = k_hw
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    gw = np.zeros((co, ci, kh, kw))
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
            gw[:, :, i, j] = np.einsum("ncij,noij->oc", patch, g, optimize=True)
    return gw


@_op("conv2d")
def _conv2d_spec():
    def fwd(xs, attrs):
        out = _conv2d_fwd(xs[0], xs[1], attrs["stride"], attrs["padding"])
        if len(xs) == 3:
            if xs[2].shape != (xs[1].shape[0],):
                raise _shape_err("conv2d bias", xs[2].shape, (xs[1].shape[0],))
            out += xs[2][None, :, None, None]
        return out

    def bwd(node, g, mode):
        x, w = node.inputs[0], node.inputs[1]
        s, p = node.attrs["stride"], node.attrs["padding"]
        gx = conv2d_input_grad(g, w, stride=s, padding=p, in_hw=x.shape[2:])
        gw = conv2d_kernel_grad(x, g, stride=s, padding=p, k_hw=w.shape[2:])
        grads = [gx, gw]
        if len(node.inputs) == 3:
            grads.append(reduce_sum(g, axis=(0, 2, 3)))
        return grads

    return fwd, bwd


@_op("conv2d_input_grad")
def _conv2d_input_grad_spec():
    def fwd(xs, attrs):
        return _conv2d_input_grad_fwd(
            xs[0], xs[1], attrs["stride"], attrs["padding"], attrs["in_hw"]
        )

    def bwd(node, g, mode):
        # bilinear in (gout, w): adjoints swap back through conv2d / kernel-corr
        gout, w = node.inputs
        s, p = node.attrs["stride"], node.attrs["padding"]
        return [
            conv2d(g, w, stride=s, padding=p),
            conv2d_kernel_grad(g, gout, stride=s, padding=p, k_hw=w.shape[2:]),
        ]

    return fwd, bwd


@_op("conv2d_kernel_grad")
def _conv2d_kernel_grad_spec():
    def fwd(xs, attrs):
        return _conv2d_kernel_grad_fwd(
            xs[0], xs[1], attrs["stride"], attrs["padding"], attrs["k_hw"]
        )

    def bwd(node, g, mode):
        x, gout = node.inputs
        s, p = node.attrs["stride"], node.attrs["padding"]
        return [
            conv2d_input_grad(gout, g, stride=s, padding=p, in_hw=x.shape[2:]),
            conv2d(x, g, stride=s, padding=p),
        ]

    return fwd, bwd


# ---- pooling (argmax indices are constants under differentiation) ----

def _pool_argmax(x, kernel, stride):
    n, c, hh, ww = x.shape
    ho, wo = _conv_geometry("maxpool2d", (hh, ww), (kernel, kernel), stride, 0)
    windows = np.empty((n, c, ho, wo, kernel * kernel))
    offsets = np.empty(kernel * kernel, dtype=np.int64)
    for i in range(kernel):
        for j in range(kernel):
            q = i * kernel + j
            windows[:, :, :, :, q] = x[
                :, :, i : i + stride * ho : stride, j : j + stride * wo : stride
            ]
            offsets[q] = i * ww + j
    pick = np.argmax(windows, axis=-1)  # first max = lowest linear index
    rows = np.arange(ho)[:, None] * stride * ww
    cols = np.arange(wo)[None, :] * stride
    base = rows + cols
    flat = base[None, None, :, :] + offsets[pick]
    out = np.take_along_axis(windows, pick[..., None], axis=-1)[..., 0]
    return out, flat


@_op("maxpool2d")
def _maxpool_spec():
    def fwd(xs, attrs):
        out, _ = _pool_argmax(xs[0], attrs["kernel"], attrs["stride"])
        return out

    def bwd(node, g, mode):
        x = node.inputs[0]
        _, idx = _pool_argmax(x.data, node.attrs["kernel"], node.attrs["stride"])
        return [pool_scatter(g, idx, in_hw=x.shape[2:])]

    return fwd, bwd


@_op("pool_scatter")
def _pool_scatter_spec():
    def fwd(xs, attrs):
        g = xs[0]
        idx = attrs["indices"]
        hh, ww = attrs["in_hw"]
        n, c = g.shape[0], g.shape[1]
        out = np.zeros((n * c, hh * ww))
        rows = np.arange(n * c)[:, None]
        np.add.at(out, (rows, idx.reshape(n * c, -1)), g.reshape(n * c, -1))
        return out.reshape(n, c, hh, ww)

    def bwd(node, g, mode):
        a = node.attrs
        return [pool_gather(g, a["indices"], out_hw=node.inputs[0].shape[2:])]

    return fwd, bwd


@_op("pool_gather")
def _pool_gather_spec():
    def fwd(xs, attrs):
        x = xs[0]
        idx = attrs["indices"]
        n, c, hh, ww = x.shape
        flat = x.reshape(n, c, hh * ww)
        picked = np.take_along_axis(flat, idx.reshape(n, c, -1), axis=2)
        return picked.reshape(idx.shape)

    def bwd(node, g, mode):
        a = node.attrs
        return [pool_scatter(g, a["indices"], in_hw=node.inputs[0].shape[2:])]

    return fwd, bwd


# ---- softmax / cross-entropy ----

@_op("softmax")
def _softmax_spec():
    def fwd(xs, attrs):
        x = xs[0]
        shifted = x - np.max(x, axis=attrs["axis"], keepdims=True)
        e = np.exp(shifted)
        return e / np.sum(e, axis=attrs["axis"], keepdims=True)

    def bwd(node, g, mode):
        p = node.out
        axis = node.attrs["axis"]
        inner = reduce_sum(mul(p, g), axis=axis, keepdims=True)
        return [mul(p, sub(g, broadcast_to(inner, g.shape)))]

    return fwd, bwd


@_op("cross_entropy_logits")
def _ce_logits_spec():
    def fwd(xs, attrs):
        y = xs[0]
        t = attrs["targets"]
        if y.ndim != 2:
            raise _shape_err("cross_entropy_logits", y.shape)
        m = np.max(y, axis=1, keepdims=True)
        lse = np.log(np.sum(np.exp(y - m), axis=1)) + m[:, 0]
        return lse - y[np.arange(y.shape[0]), t]

    def bwd(node, g, mode):
        y = node.inputs[0]
        t = node.attrs["targets"]
        onehot = np.zeros(y.shape)
        onehot[np.arange(y.shape[0]), t] = 1.0
        p = softmax(y, axis=1)
        gcol = broadcast_to(reshape(g, (y.shape[0], 1)), y.shape)
        return [mul(sub(p, Tensor(onehot, _copy=False)), gcol)]

    return fwd, bwd


# --------------------------------------------------------------------------
# public op helpers
# --------------------------------------------------------------------------

def add(a, b):
    return _apply("add", [a, b])


def sub(a, b):
    return _apply("sub", [a, b])


def mul(a, b):
    return _apply("mul", [a, b])


def div(a, b):
    return _apply("div", [a, b])


def neg(a):
    return _apply("neg", [a])


def scale(a, factor: float):
    return _apply("scale", [a], {"factor": float(factor)})


def minimum(a, b):
    return _apply("minimum", [a, b])


def relu(a):
    return _apply("relu", [a])


def absolute(a):
    return _apply("abs", [a])


def log(a):
    return _apply("log", [a])


def exp(a):
    return _apply("exp", [a])


def sqrt(a):
    return _apply("sqrt", [a])


def reshape(a, shape):
    return _apply("reshape", [a], {"shape": tuple(shape)})


def pad(a, pads):
    return _apply("pad", [a], {"pads": tuple(tuple(p) for p in pads)})


def crop(a, pads):
    return _apply("crop", [a], {"pads": tuple(tuple(p) for p in pads)})


def broadcast_to(a, shape):
    return _apply("broadcast_to", [a], {"shape": tuple(shape)})


def reduce_sum(a, axis=None, keepdims=False):
    if isinstance(axis, list):
        axis = tuple(axis)
    return _apply("sum", [a], {"axis": axis, "keepdims": keepdims})


def mean(a, axis=None, keepdims=False):
    if axis is None:
        count = a.size
    elif isinstance(axis, int):
        count = a.shape[axis]
    else:
        count = int(np.prod([a.shape[i] for i in axis]))
    return scale(reduce_sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def matmul(a, b, ta=False, tb=False):
    return _apply("matmul", [a, b], {"ta": ta, "tb": tb})


def linear(x, w, b=None):
    ins = [x, w] if b is None else [x, w, b]
    return _apply("linear", ins)


def conv2d(x, w, b=None, stride=1, padding=0):
    ins = [x, w] if b is None else [x, w, b]
    return _apply("conv2d", ins, {"stride": int(stride), "padding": int(padding)})


def conv2d_input_grad(g, w, stride, padding, in_hw):
    return _apply(
        "conv2d_input_grad",
        [g, w],
        {"stride": stride, "padding": padding, "in_hw": tuple(in_hw)},
    )


def conv2d_kernel_grad(x, g, stride, padding, k_hw):
    return _apply(
        "conv2d_kernel_grad",
        [x, g],
        {"stride": stride, "padding": padding, "k_hw": tuple(k_hw)},
    )


def maxpool2d(x, kernel=2, stride=None):
    if stride is None:
        stride = kernel
    return _apply("maxpool2d", [x], {"kernel": int(kernel), "stride": int(stride)})


def pool_scatter(g, indices, in_hw):
    return _apply("pool_scatter", [g], {"indices": indices, "in_hw": tuple(in_hw)})


def pool_gather(x, indices, out_hw):
    return _apply("pool_gather", [x], {"indices": indices, "out_hw": tuple(out_hw)})


def global_avg_pool(x):
    if len(x.shape) != 4:
        raise _shape_err("global_avg_pool", x.shape)
    return mean(x, axis=(2, 3))


def softmax(x, axis=-1):
    return _apply("softmax", [x], {"axis": axis})


def cross_entropy_logits(logits, targets):
    t = np.asarray(targets, dtype=np.int64)
    if t.ndim != 1 or t.shape[0] != logits.shape[0]:
        raise _shape_err("cross_entropy_logits targets", t.shape, logits.shape)
    if t.size and (t.min() < 0 or t.max() >= logits.shape[1]):
        raise ValueError(
            f"cross_entropy_logits: target out of range for {logits.shape[1]} classes"
        )
    return _apply("cross_entropy_logits", [logits], {"targets": t})


_PUBLIC_KINDS = {
    "add", "sub", "mul", "div", "neg", "matmul", "conv2d", "linear", "relu",
    "maxpool2d", "global_avg_pool", "softmax", "log", "exp", "abs", "minimum",
    "sum", "mean", "reshape", "pad", "scale",
}


def forward_primitive(op_kind: str, inputs, attrs=None) -> Tensor:
    """Uniform entry point over the public op vocabulary.

    `global_avg_pool` and `mean` expand to sum/scale compositions; everything
    else dispatches to one recorded primitive.
    """
    attrs = dict(attrs or {})
    if op_kind not in _PUBLIC_KINDS:
        raise ValueError(f"unknown op_kind {op_kind!r}")
    if op_kind == "global_avg_pool":
        return global_avg_pool(inputs[0])
    if op_kind == "mean":
        return mean(inputs[0], axis=attrs.get("axis"), keepdims=attrs.get("keepdims", False))
    if op_kind == "sum":
        return reduce_sum(inputs[0], axis=attrs.get("axis"), keepdims=attrs.get("keepdims", False))
    if op_kind == "scale":
        return scale(inputs[0], attrs["factor"])
    if op_kind == "reshape":
        return reshape(inputs[0], attrs["shape"])
    if op_kind == "pad":
        return pad(inputs[0], attrs["pads"])
    if op_kind == "matmul":
        return matmul(inputs[0], inputs[1], ta=attrs.get("ta", False), tb=attrs.get("tb", False))
    if op_kind == "conv2d":
        return conv2d(
            inputs[0], inputs[1], inputs[2] if len(inputs) == 3 else None,
            stride=attrs.get("stride", 1), padding=attrs.get("padding", 0),
        )
    if op_kind == "linear":
        return linear(inputs[0], inputs[1], inputs[2] if len(inputs) == 3 else None)
    if op_kind == "maxpool2d":
        return maxpool2d(inputs[0], kernel=attrs.get("kernel", 2), stride=attrs.get("stride"))
    if op_kind == "softmax":
        return softmax(inputs[0], axis=attrs.get("axis", -1))
    return _apply(op_kind, list(inputs), None)


# --------------------------------------------------------------------------
# backward
# --------------------------------------------------------------------------

def backward(
    output: Tensor,
    wrt,
    opts: BackwardOptions | None = None,
    *,
    mode: GradMode = GradMode.STANDARD,
    create_graph: bool = False,
    _relu_grad_sink: list | None = None,
):
    """Reverse-mode gradients of a scalar output w.r.t. each tensor in wrt.

    With create_graph the returned gradients carry tape nodes and can be
    differentiated again; guided mode always returns detached tensors.
    """
    if opts is None:
        opts = BackwardOptions(mode=mode, create_graph=create_graph)
    if output.data.size != 1:
        raise ValueError(f"backward: output must be scalar, got shape {output.shape}")
    if output.node is None:
        raise ValueError("backward: output is not on a tape")
    tape = output.node.tape
    wrt = list(wrt)
    for t in wrt:
        if t.node is None or t.node.tape is not tape:
            raise ValueError("backward: wrt tensor is not on the output's tape")

    adjoint: dict[int, Tensor] = {output.node.idx: ones(output.shape)}
    start = output.node.idx

    def sweep():
        for idx in range(start, -1, -1):
            g = adjoint.get(idx)
            if g is None:
                continue
            node = tape.nodes[idx]
            if node.op == "leaf":
                continue
            grads = _REGISTRY[node.op].backward(node, g, opts.mode)
            if node.op == "relu" and _relu_grad_sink is not None:
                _relu_grad_sink.append(grads[0].data)
            for t_in, gi in zip(node.inputs, grads):
                if gi is None or t_in.node is None:
                    continue
                j = t_in.node.idx
                prev = adjoint.get(j)
                adjoint[j] = gi if prev is None else add(prev, gi)

    if opts.create_graph:
        sweep()
    else:
        with tape.paused():
            sweep()

    results = []
    for t in wrt:
        g = adjoint.get(t.node.idx)
        results.append(zeros(t.shape) if g is None else g)
    return results
