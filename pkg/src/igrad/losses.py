"""Classification loss, gradient error functions, and the total training loss.

The total loss adds a regularizer that pulls the standard input-gradient of
the classification loss toward its guided-backprop counterpart; the guided
branch is detached and acts as a teacher, so parameter gradients flow only
through the classification term and the standard-gradient branch.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import GradMode, Tape, Tensor, backward

NORM_GUARD = 1e-12


class ErrorFnKind(enum.Enum):
    MAE = "mae"
    MSE = "mse"
    COSINE = "cosine"
    HIST_INTERSECT = "hist"


@dataclass(frozen=True)
class LossBreakdown:
    loss_c: float
    loss_r: float
    total: float
    lam: float


@dataclass
class InterpLossResult:
    breakdown: LossBreakdown
    total: Tensor                  # tape scalar, differentiable w.r.t. parameters
    params: list[Tensor]           # tape-watched parameter aliases
    inputs: Tensor                 # tape-watched input batch
    standard_grads: Tensor | None  # dL_C/dX, on tape (None when lam == 0)
    guided_grads: Tensor | None    # guided counterpart, always detached


def cross_entropy(probabilities, target: int) -> float:
    """-log p[target] for one probability row (the mathematical contract)."""
    p = probabilities.data if isinstance(probabilities, Tensor) else np.asarray(probabilities)
    p = p.reshape(-1)
    if not 0 <= target < p.size:
        raise ValueError(f"target {target} out of range for {p.size} classes")
    if p.min() < 0 or abs(p.sum() - 1.0) > 1e-9:
        raise ValueError("probabilities must be nonnegative and sum to 1")
    return float(-np.log(p[target]))


def cross_entropy_from_logits(logits, target: int) -> float:
    """Stable log-softmax form used internally by the training path."""
    row = Tensor(np.asarray(logits, dtype=np.float64).reshape(1, -1))
    return T.cross_entropy_logits(row, [target]).item()


def _forward_ce(model, x_batch, targets):
    """Watch inputs, run the model, return (mean CE, forward result, watched x)."""
    tape = Tape()
    x = x_batch if isinstance(x_batch, Tensor) else Tensor(np.asarray(x_batch, dtype=np.float64))
    if x.data.ndim != 4 or x.shape[0] == 0:
        raise ValueError("batch must be a nonempty (N,C,H,W) array")
    x = tape.watch(x)
    fwd = model.forward(x, tape)
    ce = T.mean(T.cross_entropy_logits(fwd.logits, targets))
    return ce, fwd, x


def classification_loss(model, x_batch, targets) -> Tensor:
    """Mean cross-entropy over the batch (Eq. form: (1/n) sum CE)."""
    ce, _, _ = _forward_ce(model, x_batch, targets)
    return ce


def _flat_axes(shape):
    return tuple(range(1, len(shape)))


def error_fn(kind: ErrorFnKind, d: Tensor, d_ref: Tensor) -> Tensor:
    """Error between two gradient images; differentiable w.r.t. the first.

    MAE and MSE are mean element-wise distances; cosine and histogram
    intersection are similarities with a negative sign. The reference is
    detached by the caller.
    """
    if d.shape != d_ref.shape:
        raise ValueError(f"error_fn: shapes differ {d.shape} vs {d_ref.shape}")
    m = d.size
    if m == 0:
        raise ValueError("error_fn: empty tensors")
    if kind is ErrorFnKind.MAE:
        return T.scale(T.reduce_sum(T.absolute(T.sub(d, d_ref))), 1.0 / m)
    if kind is ErrorFnKind.MSE:
        diff = T.sub(d, d_ref)
        return T.scale(T.reduce_sum(T.mul(diff, diff)), 1.0 / m)
    if kind is ErrorFnKind.COSINE:
        sq_a = T.reduce_sum(T.mul(d, d))
        sq_b = T.reduce_sum(T.mul(d_ref, d_ref))
        if sq_a.item() == 0.0 or sq_b.item() == 0.0:
            raise ValueError("error_fn: zero-norm input for cosine")
        inner = T.reduce_sum(T.mul(d, d_ref))
        return T.neg(T.div(inner, T.sqrt(T.mul(sq_a, sq_b))))
    if kind is ErrorFnKind.HIST_INTERSECT:
        l1_a = T.reduce_sum(T.absolute(d))
        l1_b = T.reduce_sum(T.absolute(d_ref))
        if l1_a.item() == 0.0 or l1_b.item() == 0.0:
            raise ValueError("error_fn: zero-norm input for histogram intersection")
        overlap = T.reduce_sum(T.minimum(T.absolute(d), T.absolute(d_ref)))
        return T.neg(T.div(overlap, T.mul(l1_a, l1_b)))
    raise ValueError(f"unknown error function {kind!r}")


def _per_example_errors(kind: ErrorFnKind, d: Tensor, d_ref: Tensor) -> Tensor:
    """Batched per-example errors, shape (N,), on tape.

    Cosine/histogram examples whose relevant norm falls under NORM_GUARD
    contribute exactly zero instead of erroring (dead gradients happen
    early in training).
    """
    axes = _flat_axes(d.shape)
    m = int(np.prod(d.shape[1:]))
    if kind is ErrorFnKind.MAE:
        return T.scale(T.reduce_sum(T.absolute(T.sub(d, d_ref)), axis=axes), 1.0 / m)
    if kind is ErrorFnKind.MSE:
        diff = T.sub(d, d_ref)
        return T.scale(T.reduce_sum(T.mul(diff, diff), axis=axes), 1.0 / m)

    if kind is ErrorFnKind.COSINE:
        sq_a = T.reduce_sum(T.mul(d, d), axis=axes)
        sq_b = T.reduce_sum(T.mul(d_ref, d_ref), axis=axes)
        keep = (np.sqrt(sq_a.data) >= NORM_GUARD) & (np.sqrt(sq_b.data) >= NORM_GUARD)
        mask = Tensor(keep.astype(np.float64), _copy=False)
        offset = Tensor(1.0 - keep.astype(np.float64), _copy=False)
        prod = T.add(T.mul(T.mul(sq_a, sq_b), mask), offset)
        inner = T.reduce_sum(T.mul(d, d_ref), axis=axes)
        return T.neg(T.mul(T.div(inner, T.sqrt(prod)), mask))

    if kind is ErrorFnKind.HIST_INTERSECT:
        l1_a = T.reduce_sum(T.absolute(d), axis=axes)
        l1_b = T.reduce_sum(T.absolute(d_ref), axis=axes)
        keep = (l1_a.data >= NORM_GUARD) & (l1_b.data >= NORM_GUARD)
        mask = Tensor(keep.astype(np.float64), _copy=False)
        offset = Tensor(1.0 - keep.astype(np.float64), _copy=False)
        prod = T.add(T.mul(T.mul(l1_a, l1_b), mask), offset)
        overlap = T.reduce_sum(
            T.minimum(T.absolute(d), T.absolute(d_ref)), axis=axes
        )
        return T.neg(T.mul(T.div(overlap, prod), mask))
    raise ValueError(f"unknown error function {kind!r}")


def interpretable_loss(
    model,
    x_batch,
    targets,
    kind: ErrorFnKind = ErrorFnKind.COSINE,
    lam: float = 0.0,
) -> InterpLossResult:
    """Total loss: classification plus lam times the gradient-alignment term.

    Per example, the standard input-gradient of the shared batch loss is
    taken with create_graph so the error term stays differentiable w.r.t.
    parameters; the guided gradient is computed in guided mode and detached.
    With lam == 0 the regularizer path is bypassed entirely and the result
    is bit-identical to plain cross-entropy training.
    """
    if lam < 0:
        raise ValueError(f"lam must be >= 0, got {lam}")
    ce, fwd, x = _forward_ce(model, x_batch, targets)
    n = x.shape[0]

    if lam == 0.0:
        bd = LossBreakdown(ce.item(), 0.0, ce.item(), 0.0)
        return InterpLossResult(bd, ce, fwd.params, x, None, None)

    (d_std,) = backward(ce, [x], create_graph=True)
    (d_guided,) = backward(ce, [x], mode=GradMode.GUIDED)
    errs = _per_example_errors(kind, d_std, d_guided)
    loss_r = T.scale(T.reduce_sum(errs), 1.0 / n)
    total = T.add(ce, T.scale(loss_r, lam))
    bd = LossBreakdown(ce.item(), loss_r.item(), total.item(), lam)
    return InterpLossResult(bd, total, fwd.params, x, d_std, d_guided)
