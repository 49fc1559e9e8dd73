"""Finite-difference oracle and the engine verification suites.

These are the release gate behind the `gradcheck` CLI command: every
primitive's backward is compared against central differences, the
differentiable-backward path is checked end to end, and the guided ReLU
rule is checked for nonnegativity and locality.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import GradMode, Tape, Tensor, backward

REL_TOL = 1e-4
ABS_FLOOR = 1e-7


def finite_diff_gradient(fn, at: Tensor, step: float = 1e-5) -> Tensor:
    """Central-difference gradient estimate of a scalar function, per element."""
    if step <= 0:
        raise ValueError("step must be positive")
    base = at.data.copy()
    flat = base.reshape(-1)
    out = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = _scalar(fn(Tensor(base)))
        flat[i] = orig - step
        lo = _scalar(fn(Tensor(base)))
        flat[i] = orig
        out[i] = (hi - lo) / (2.0 * step)
    return Tensor(out.reshape(at.shape), _copy=False)


def _scalar(v) -> float:
    return v.item() if isinstance(v, Tensor) else float(v)


def max_scaled_error(got: np.ndarray, want: np.ndarray) -> float:
    """Element-wise |got-want| scaled so that <= 1.0 means within tolerance."""
    diff = np.abs(got - want)
    denom = np.maximum(ABS_FLOOR, REL_TOL * np.maximum(np.abs(got), np.abs(want)))
    return float(np.max(diff / denom)) if diff.size else 0.0


@contextmanager
def corrupted_backward(kind: str, scale_factor: float = 1.5):
    """Test hook: multiply one op's backward output by a wrong factor."""
    spec = T._REGISTRY[kind]
    orig = spec.backward

    def bad(node, g, mode):
        return [None if gi is None else T.scale(gi, scale_factor) for gi in orig(node, g, mode)]

    spec.backward = bad
    try:
        yield
    finally:
        spec.backward = orig


# --------------------------------------------------------------------------
# per-op gradcheck
# --------------------------------------------------------------------------

@dataclass
class OpCase:
    """One randomized check: build inputs, apply the op, scalarize, compare."""

    kind: str
    build: "callable"


def _away_from(vals, kinks, margin=1e-3):
    """Nudge samples so no coordinate sits within margin of a kink value."""
    out = vals.copy()
    for k in kinks:
        close = np.abs(out - k) < margin
        out[close] = k + margin * np.where(out[close] >= k, 1.0, -1.0) * 2.0
    return out


def _case_inputs(kind, rng):
    """Random input tensors + op lambda for one gradcheck trial."""
    if kind in ("add", "sub", "mul"):
        a = rng.normal(size=(3, 4))
        b = rng.normal(size=(3, 4))
        op = {"add": T.add, "sub": T.sub, "mul": T.mul}[kind]
        return [a, b], lambda xs: op(xs[0], xs[1])
    if kind == "div":
        a = rng.normal(size=(3, 4))
        b = _away_from(rng.normal(size=(3, 4)), [0.0], 0.5)
        return [a, b], lambda xs: T.div(xs[0], xs[1])
    if kind == "neg":
        return [rng.normal(size=(5,))], lambda xs: T.neg(xs[0])
    if kind == "scale":
        return [rng.normal(size=(2, 3))], lambda xs: T.scale(xs[0], -1.7)
    if kind == "minimum":
        a = rng.normal(size=(4, 3))
        b = a + _away_from(rng.normal(size=(4, 3)), [0.0], 1e-3)
        return [a, b], lambda xs: T.minimum(xs[0], xs[1])
    if kind == "relu":
        return [_away_from(rng.normal(size=(3, 5)), [0.0])], lambda xs: T.relu(xs[0])
    if kind == "abs":
        return [_away_from(rng.normal(size=(6,)), [0.0])], lambda xs: T.absolute(xs[0])
    if kind == "log":
        return [rng.uniform(0.5, 2.0, size=(4,))], lambda xs: T.log(xs[0])
    if kind == "exp":
        return [rng.normal(size=(4,))], lambda xs: T.exp(xs[0])
    if kind == "sqrt":
        return [rng.uniform(0.5, 2.0, size=(4,))], lambda xs: T.sqrt(xs[0])
    if kind == "reshape":
        return [rng.normal(size=(2, 6))], lambda xs: T.reshape(xs[0], (3, 4))
    if kind == "pad":
        return [rng.normal(size=(1, 2, 3, 3))], lambda xs: T.pad(
            xs[0], ((0, 0), (0, 0), (1, 1), (1, 1))
        )
    if kind == "crop":
        return [rng.normal(size=(1, 2, 5, 5))], lambda xs: T.crop(
            xs[0], ((0, 0), (0, 0), (1, 2), (2, 1))
        )
    if kind == "broadcast_to":
        return [rng.normal(size=(3, 1))], lambda xs: T.broadcast_to(xs[0], (3, 4))
    if kind == "sum":
        return [rng.normal(size=(2, 3, 4))], lambda xs: T.reduce_sum(
            xs[0], axis=(0, 2)
        )
    if kind == "mean":
        return [rng.normal(size=(2, 3, 4))], lambda xs: T.mean(xs[0], axis=(1,))
    if kind == "global_avg_pool":
        return [rng.normal(size=(2, 3, 4, 4))], lambda xs: T.global_avg_pool(xs[0])
    if kind == "matmul":
        ta, tb = rng.integers(0, 2, size=2).astype(bool)
        a = rng.normal(size=(3, 4) if not ta else (4, 3))
        b = rng.normal(size=(4, 2) if not tb else (2, 4))
        return [a, b], lambda xs: T.matmul(xs[0], xs[1], ta=bool(ta), tb=bool(tb))
    if kind == "linear":
        return [
            rng.normal(size=(3, 5)),
            rng.normal(size=(2, 5)),
            rng.normal(size=(2,)),
        ], lambda xs: T.linear(xs[0], xs[1], xs[2])
    if kind == "conv2d":
        stride = int(rng.integers(1, 3))
        return [
            rng.normal(size=(2, 2, 5, 5)),
            rng.normal(size=(3, 2, 3, 3)),
            rng.normal(size=(3,)),
        ], lambda xs: T.conv2d(xs[0], xs[1], xs[2], stride=stride, padding=1)
    if kind == "conv2d_input_grad":
        return [
            rng.normal(size=(2, 3, 4, 4)),
            rng.normal(size=(3, 2, 2, 2)),
        ], lambda xs: T.conv2d_input_grad(xs[0], xs[1], stride=1, padding=0, in_hw=(5, 5))
    if kind == "conv2d_kernel_grad":
        return [
            rng.normal(size=(2, 2, 5, 5)),
            rng.normal(size=(2, 3, 4, 4)),
        ], lambda xs: T.conv2d_kernel_grad(xs[0], xs[1], stride=1, padding=0, k_hw=(2, 2))
    if kind == "maxpool2d":
        x = rng.normal(size=(2, 2, 6, 6))
        # keep window maxima unambiguous so FD does not cross an argmax switch
        x += np.linspace(0, 0.5, x.size).reshape(x.shape)
        return [x], lambda xs: T.maxpool2d(xs[0], kernel=2, stride=2)
    if kind == "softmax":
        return [rng.normal(size=(3, 4))], lambda xs: T.softmax(xs[0], axis=1)
    if kind == "cross_entropy_logits":
        t = rng.integers(0, 4, size=3)
        return [rng.normal(size=(3, 4))], lambda xs: T.cross_entropy_logits(xs[0], t)
    raise ValueError(f"no gradcheck case for {kind!r}")


CHECKED_OPS = [
    "add", "sub", "mul", "div", "neg", "scale", "minimum", "relu", "abs",
    "log", "exp", "sqrt", "reshape", "pad", "crop", "broadcast_to", "sum",
    "mean", "global_avg_pool", "matmul", "linear", "conv2d",
    "conv2d_input_grad", "conv2d_kernel_grad", "maxpool2d", "softmax",
    "cross_entropy_logits",
]


def gradcheck_op(kind: str, seed: int) -> float:
    """Max scaled backward-vs-FD error for one op at one random point."""
    rng = np.random.default_rng(seed)
    arrays, apply_op = _case_inputs(kind, rng)
    probe = None

    def scalarize(xs):
        out = apply_op(xs)
        nonlocal probe
        if probe is None:
            probe = rng.normal(size=out.shape)
        w = Tensor(probe)
        return T.reduce_sum(T.mul(out, w))

    worst = 0.0
    for i in range(len(arrays)):
        tape = Tape()
        xs = [Tensor(a) for a in arrays]
        xs[i] = tape.watch(xs[i])
        got = backward(scalarize(xs), [xs[i]])[0].data

        def fn(v, i=i):
            xs2 = [Tensor(a) for a in arrays]
            xs2[i] = v
            return scalarize(xs2)

        want = finite_diff_gradient(fn, Tensor(arrays[i])).data
        worst = max(worst, max_scaled_error(got, want))
    return worst


def run_op_suite(seeds=50, ops=None) -> dict[str, float]:
    """Gradcheck every op over `seeds` random draws; returns max error per op."""
    report = {}
    for kind in ops or CHECKED_OPS:
        worst = 0.0
        for s in range(seeds):
            worst = max(worst, gradcheck_op(kind, 1000 + s))
        report[kind] = worst
    return report


# --------------------------------------------------------------------------
# double-backward and guided-rule suites
# --------------------------------------------------------------------------

def _tiny_net_params(rng):
    w1 = rng.normal(size=(2, 1, 2, 2)) * 0.7
    b1 = rng.normal(size=(2,)) * 0.1
    w2 = rng.normal(size=(3, 2 * 4)) * 0.7
    b2 = rng.normal(size=(3,)) * 0.1
    return [w1, b1, w2, b2]


def _tiny_net_loss(x, params, targets):
    """conv-relu-pool-linear cross-entropy on a 1x1x6x6 input batch."""
    w1, b1, w2, b2 = params
    h = T.relu(T.conv2d(x, w1, b1, stride=1, padding=0))
    h = T.maxpool2d(h, kernel=2, stride=2)  # (n,2,2,2)
    h = T.reshape(h, (x.shape[0], 2 * 4))
    logits = T.linear(h, w2, b2)
    return T.mean(T.cross_entropy_logits(logits, targets))


def run_double_backward_suite(seeds=5) -> float:
    """L2 = sum of squared input-gradients; check dL2/dtheta against FD."""
    worst = 0.0
    for s in range(seeds):
        rng = np.random.default_rng(7000 + s)
        params = _tiny_net_params(rng)
        x0 = rng.normal(size=(2, 1, 6, 6))
        targets = rng.integers(0, 3, size=2)

        def l2_value(param_tensors):
            tape = Tape()
            ps = [tape.watch(p) for p in param_tensors]
            x = tape.watch(Tensor(x0))
            loss = _tiny_net_loss(x, ps, targets)
            (gx,) = backward(loss, [x], create_graph=True)
            return T.reduce_sum(T.mul(gx, gx))

        tape = Tape()
        ps = [tape.watch(Tensor(p)) for p in params]
        x = tape.watch(Tensor(x0))
        loss = _tiny_net_loss(x, ps, targets)
        (gx,) = backward(loss, [x], create_graph=True)
        l2 = T.reduce_sum(T.mul(gx, gx))
        grads = backward(l2, ps)

        for i in range(len(params)):
            def fn(v, i=i):
                probe = [Tensor(p) for p in params]
                probe[i] = v
                return l2_value(probe)

            want = finite_diff_gradient(fn, Tensor(params[i]), step=1e-5).data
            got = grads[i].data
            diff = np.abs(got - want)
            denom = np.maximum(1e-6, 1e-3 * np.maximum(np.abs(got), np.abs(want)))
            worst = max(worst, float(np.max(diff / denom)))
    return worst


def run_guided_suite(nets=100) -> tuple[float, bool]:
    """(most-negative guided ReLU emission, positive-path equality flag)."""
    min_emitted = np.inf
    for s in range(nets):
        rng = np.random.default_rng(3000 + s)
        params = _tiny_net_params(rng)
        targets = rng.integers(0, 3, size=2)
        tape = Tape()
        ps = [tape.watch(Tensor(p)) for p in params]
        x = tape.watch(Tensor(rng.normal(size=(2, 1, 6, 6))))
        loss = _tiny_net_loss(x, ps, targets)
        sink: list[np.ndarray] = []
        backward(loss, [x], mode=GradMode.GUIDED, _relu_grad_sink=sink)
        for emitted in sink:
            min_emitted = min(min_emitted, float(emitted.min()))

    # all-positive path: positive weights, positive input, loss = sum of logits
    rng = np.random.default_rng(99)
    w1 = Tensor(rng.uniform(0.1, 1.0, size=(2, 1, 2, 2)))
    w2 = Tensor(rng.uniform(0.1, 1.0, size=(3, 8)))
    x0 = rng.uniform(0.1, 1.0, size=(1, 1, 6, 6))

    def positive_loss(tape):
        x = tape.watch(Tensor(x0))
        h = T.relu(T.conv2d(x, tape.watch(w1), stride=1, padding=0))
        h = T.maxpool2d(h, 2, 2)
        logits = T.linear(T.reshape(h, (1, 8)), tape.watch(w2))
        return T.reduce_sum(logits), x

    t1 = Tape()
    loss1, x1 = positive_loss(t1)
    (g_std,) = backward(loss1, [x1])
    t2 = Tape()
    loss2, x2 = positive_loss(t2)
    (g_gui,) = backward(loss2, [x2], mode=GradMode.GUIDED)
    equal = bool(np.array_equal(g_std.data, g_gui.data))
    return min_emitted, equal


@dataclass
class GradcheckReport:
    op_errors: dict[str, float] = field(default_factory=dict)
    double_backward_error: float = 0.0
    guided_min_emitted: float = 0.0
    guided_positive_path_equal: bool = False

    @property
    def failures(self) -> list[str]:
        bad = [k for k, v in self.op_errors.items() if v > 1.0]
        if self.double_backward_error > 1.0:
            bad.append("double_backward")
        if self.guided_min_emitted < 0.0:
            bad.append("guided_relu_nonnegative")
        if not self.guided_positive_path_equal:
            bad.append("guided_positive_path")
        return bad

    @property
    def ok(self) -> bool:
        return not self.failures


def run_all(seeds=50, nets=100) -> GradcheckReport:
    rep = GradcheckReport()
    rep.op_errors = run_op_suite(seeds=seeds)
    rep.double_backward_error = run_double_backward_suite()
    rep.guided_min_emitted, rep.guided_positive_path_equal = run_guided_suite(nets=nets)
    return rep
