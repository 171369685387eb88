"""Minimal deterministic tensor engine with reverse-mode differentiation.

Only the primitives the quality network needs: conv2d, 2x2 max pooling,
dense, relu, mean absolute error, plus the glue (concat, reshape, add,
scale, detach) required to assemble the multi-task loss.  Everything is
numpy-backed, single image per call, no batch axis; training loops over
patches explicitly so reductions happen in a fixed order.

Gradients are recorded on a :class:`GradTape`.  Ops executed while a tape
is active append themselves in application order; replaying the tape in
reverse accumulates exact gradients of a scalar loss into ``Tensor.grad``.
With no active tape every op is a plain forward computation.
"""

from __future__ import annotations

import numpy as np
from scipy.linalg import blas as _blas

from .errors import ContractError, NumericError

_DTYPES = {"single": np.float32, "double": np.float64}

_ACTIVE_TAPE = None


def _ger_inplace(g: np.ndarray, x: np.ndarray, acc: np.ndarray) -> None:
    """acc += outer(g, x) without temporaries; acc must be F-contiguous."""
    fn = _blas.sger if acc.dtype == np.float32 else _blas.dger
    fn(1.0, g, x, a=acc, overwrite_a=1)


class Tensor:
    """N-d array wrapper carrying optional gradient state.

    ``precision`` is "single" (float32) or "double" (float64); all inputs
    to one primitive must share it.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, precision: str = "single", requires_grad: bool = False):
        if precision not in _DTYPES:
            raise ContractError(f"unknown precision {precision!r}")
        self.data = np.ascontiguousarray(data, dtype=_DTYPES[precision])
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def precision(self) -> str:
        return "single" if self.data.dtype == np.float32 else "double"

    @property
    def on_graph(self) -> bool:
        return self.requires_grad or bool(self._parents)

    def detach(self) -> "Tensor":
        """Same values, cut off from the gradient graph."""
        return Tensor(self.data.copy(), self.precision, requires_grad=False)

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype)
        else:
            self.grad += g

    def __repr__(self):
        return f"Tensor(shape={self.shape}, precision={self.precision})"


class GradTape:
    """Ordered record of primitive applications within one training step.

    Single-writer: exactly one tape may be active at a time, and the step
    that opened it owns it exclusively.
    """

    def __init__(self):
        self._nodes = []

    def __enter__(self):
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise ContractError("a GradTape is already active")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, exc_type, exc, tb):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None
        return False

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(tensor) into ``.grad`` of every graph tensor.

        Grads of everything the tape touches (leaves included) are reset
        first, so each backward call starts clean.
        """
        if loss.data.size != 1:
            raise ContractError("backward target must be a scalar")
        for node in self._nodes:
            node.grad = None
            for parent in node._parents:
                parent.grad = None
        loss.grad = np.ones_like(loss.data)
        for node in reversed(self._nodes):
            if node.grad is not None and node._backward is not None:
                node._backward(node.grad)


def _record(out: Tensor, parents, backward) -> Tensor:
    if _ACTIVE_TAPE is not None and any(p.on_graph for p in parents):
        out._parents = tuple(parents)
        out._backward = backward
        _ACTIVE_TAPE._nodes.append(out)
    return out


def _check_same_precision(*tensors: Tensor) -> str:
    precisions = {t.precision for t in tensors}
    if len(precisions) != 1:
        raise ContractError(f"mixed precisions {precisions}")
    return precisions.pop()


def _finite_or_raise(arr: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite output from {op}")


def conv2d(x: Tensor, kernels: Tensor, bias: Tensor, padding: int = 0) -> Tensor:
    """Cross-correlation of a [C,H,W] input (or a [B,C,H,W] batch) with
    [C_out,C,k,k] kernels plus a per-channel bias."""
    if x.data.ndim not in (3, 4) or kernels.data.ndim != 4 or bias.data.ndim != 1:
        raise ContractError(
            f"conv2d shapes: input {x.shape}, kernels {kernels.shape}, bias {bias.shape}")
    batched = x.data.ndim == 4
    nb = x.shape[0] if batched else 1
    cin, h, w = x.shape[-3:]
    cout, kc, kh, kw = kernels.shape
    if kc != cin or kh != kw or bias.shape[0] != cout:
        raise ContractError(
            f"conv2d mismatch: input {x.shape}, kernels {kernels.shape}, bias {bias.shape}")
    k = kh
    if k % 2 == 0:
        raise ContractError(f"kernel size {k} must be odd")
    if padding < 0:
        raise ContractError("padding must be >= 0")
    ho = h + 2 * padding - k + 1
    wo = w + 2 * padding - k + 1
    if ho < 1 or wo < 1:
        raise ContractError(f"conv2d output {ho}x{wo} would be empty")
    precision = _check_same_precision(x, kernels, bias)

    xb = x.data if batched else x.data[None]
    if padding:
        xp = np.zeros((nb, cin, h + 2 * padding, w + 2 * padding), dtype=x.data.dtype)
        xp[:, :, padding:padding + h, padding:padding + w] = xb
    else:
        xp = xb

    cols = np.empty((cin, k, k, nb, ho, wo), dtype=x.data.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = xp[:, :, i:i + ho, j:j + wo].transpose(1, 0, 2, 3)
    cols2 = cols.reshape(cin * k * k, nb * ho * wo)
    kmat = kernels.data.reshape(cout, cin * k * k)
    with np.errstate(over="ignore", invalid="ignore"):
        prod = (kmat @ cols2).reshape(cout, nb, ho, wo)
        out_data = prod.transpose(1, 0, 2, 3) + bias.data[None, :, None, None]
    if not batched:
        out_data = out_data[0]
    _finite_or_raise(out_data, "conv2d")
    out = Tensor(out_data, precision)

    def backward(g):
        gb = g if batched else g[None]
        gmat = np.ascontiguousarray(gb.transpose(1, 0, 2, 3)).reshape(
            cout, nb * ho * wo)
        if kernels.on_graph:
            kernels._accumulate((gmat @ cols2.T).reshape(kernels.shape))
        if bias.on_graph:
            bias._accumulate(gmat.sum(axis=1))
        if x.on_graph:
            dcols = (kmat.T @ gmat).reshape(cin, k, k, nb, ho, wo)
            dxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    dxp[:, :, i:i + ho, j:j + wo] += dcols[:, i, j].transpose(1, 0, 2, 3)
            if padding:
                dxp = dxp[:, :, padding:padding + h, padding:padding + w]
            x._accumulate(dxp if batched else dxp[0])

    return _record(out, (x, kernels, bias), backward)


def maxpool2(x: Tensor) -> Tensor:
    """2x2 non-overlapping max over [C,H,W] or [B,C,H,W]; ties route the
    gradient to the first position in row-major window scan order."""
    if x.data.ndim not in (3, 4):
        raise ContractError(f"maxpool2 expects [C,H,W] or [B,C,H,W], got {x.shape}")
    h, w = x.shape[-2:]
    if h % 2 or w % 2:
        raise ContractError(f"maxpool2 needs even spatial dims, got {h}x{w}")
    # window candidates in scan order (0,0),(0,1),(1,0),(1,1); argmax picks
    # the first maximum, which realizes the tie rule
    cand = np.stack([x.data[..., 0::2, 0::2], x.data[..., 0::2, 1::2],
                     x.data[..., 1::2, 0::2], x.data[..., 1::2, 1::2]], axis=0)
    idx = np.argmax(cand, axis=0)
    out_data = np.take_along_axis(cand, idx[None], axis=0)[0]
    out = Tensor(out_data, x.precision)

    def backward(g):
        if not x.on_graph:
            return
        dx = np.zeros_like(x.data)
        views = (dx[..., 0::2, 0::2], dx[..., 0::2, 1::2],
                 dx[..., 1::2, 0::2], dx[..., 1::2, 1::2])
        for sel in range(4):
            mask = idx == sel
            views[sel][mask] += g[mask]
        x._accumulate(dx)

    return _record(out, (x,), backward)


def dense(x: Tensor, weights: Tensor, bias: Tensor) -> Tensor:
    """weights @ x + bias for a flat vector, or row-wise for a [B,n] batch."""
    if x.data.ndim not in (1, 2) or weights.data.ndim != 2 or bias.data.ndim != 1:
        raise ContractError(
            f"dense shapes: input {x.shape}, weights {weights.shape}, bias {bias.shape}")
    m, n = weights.shape
    if x.shape[-1] != n or bias.shape[0] != m:
        raise ContractError(
            f"dense mismatch: input {x.shape}, weights {weights.shape}, bias {bias.shape}")
    precision = _check_same_precision(x, weights, bias)
    batched = x.data.ndim == 2
    with np.errstate(over="ignore", invalid="ignore"):
        if batched:
            out_data = x.data @ weights.data.T + bias.data[None, :]
        else:
            out_data = weights.data @ x.data + bias.data
    _finite_or_raise(out_data, "dense")
    out = Tensor(out_data, precision)

    def backward(g):
        if weights.on_graph:
            if batched:
                weights._accumulate(g.T @ x.data)
            else:
                # rank-1 updates dominate per-patch training cost;
                # accumulate in place without temporaries
                if weights.grad is None:
                    weights.grad = np.zeros(weights.shape, dtype=weights.data.dtype,
                                            order="F")
                _ger_inplace(np.ascontiguousarray(g), x.data, weights.grad)
        if bias.on_graph:
            bias._accumulate(g.sum(axis=0) if batched else g)
        if x.on_graph:
            x._accumulate(g @ weights.data if batched else weights.data.T @ g)

    return _record(out, (x, weights, bias), backward)


def relu(x: Tensor) -> Tensor:
    out = Tensor(np.maximum(x.data, 0), x.precision)

    def backward(g):
        if x.on_graph:
            x._accumulate(g * (x.data > 0))

    return _record(out, (x,), backward)


def l1_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean absolute error; subgradient is sign(pred - target)/n, zero at ties."""
    if pred.shape != target.shape:
        raise ContractError(f"l1_loss shapes differ: {pred.shape} vs {target.shape}")
    _check_same_precision(pred, target)
    diff = pred.data - target.data
    out = Tensor(np.mean(np.abs(diff)), pred.precision)
    n = diff.size

    def backward(g):
        s = np.sign(diff) * (float(np.asarray(g).reshape(-1)[0]) / n)
        if pred.on_graph:
            pred._accumulate(s)
        if target.on_graph:
            target._accumulate(-s)

    return _record(out, (pred, target), backward)


def concat(parts, axis: int = 0) -> Tensor:
    """Concatenate along one axis (flat vectors or channel-stacked maps)."""
    parts = list(parts)
    if not parts:
        raise ContractError("concat of nothing")
    ndims = {p.data.ndim for p in parts}
    if len(ndims) != 1:
        raise ContractError("concat inputs must share rank")
    if axis < 0 or axis >= ndims.pop():
        raise ContractError(f"concat axis {axis} out of range")
    precision = _check_same_precision(*parts)
    out = Tensor(np.concatenate([p.data for p in parts], axis=axis), precision)
    sizes = [p.shape[axis] for p in parts]

    def backward(g):
        offset = 0
        sl = [slice(None)] * g.ndim
        for p, size in zip(parts, sizes):
            if p.on_graph:
                sl[axis] = slice(offset, offset + size)
                p._accumulate(g[tuple(sl)])
            offset += size

    return _record(out, tuple(parts), backward)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != x.data.size:
        raise ContractError(f"cannot reshape {x.shape} to {shape}")
    out = Tensor(x.data.reshape(shape), x.precision)

    def backward(g):
        if x.on_graph:
            x._accumulate(g.reshape(x.shape))

    return _record(out, (x,), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ContractError(f"add shapes differ: {a.shape} vs {b.shape}")
    precision = _check_same_precision(a, b)
    out = Tensor(a.data + b.data, precision)
    _finite_or_raise(out.data, "add")

    def backward(g):
        if a.on_graph:
            a._accumulate(g)
        if b.on_graph:
            b._accumulate(g)

    return _record(out, (a, b), backward)


def scale(x: Tensor, factor: float) -> Tensor:
    factor = float(factor)
    out = Tensor(x.data * factor, x.precision)
    _finite_or_raise(out.data, "scale")

    def backward(g):
        if x.on_graph:
            x._accumulate(g * factor)

    return _record(out, (x,), backward)


class SgdState:
    """Momentum SGD state: one velocity buffer per parameter name."""

    def __init__(self, learning_rate: float, momentum: float = 0.9,
                 weight_decay: float = 0.0):
        if learning_rate <= 0:
            raise ContractError("learning_rate must be > 0")
        if not 0.0 <= momentum < 1.0:
            raise ContractError("momentum must be in [0, 1)")
        if weight_decay < 0:
            raise ContractError("weight_decay must be >= 0")
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {}


def sgd_update(params: dict, grads: dict, state: SgdState) -> None:
    """In-place classical-momentum step.

    v <- momentum*v + grad + weight_decay*param; param <- param - lr*v.
    """
    for name, param in params.items():
        grad = grads.get(name)
        if grad is None:
            continue
        if grad.shape != param.data.shape:
            raise ContractError(f"gradient shape mismatch for {name!r}")
        if not np.all(np.isfinite(grad)):
            raise NumericError(f"non-finite gradient for parameter {name!r}")
        vel = state.velocity.get(name)
        if vel is None:
            vel = np.zeros_like(param.data)
        effective = grad + state.weight_decay * param.data
        vel = state.momentum * vel + effective
        state.velocity[name] = vel
        param.data -= state.learning_rate * vel
