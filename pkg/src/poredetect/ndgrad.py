"""Reverse-mode differentiable engine for dense rank-4 arrays.

All arrays follow the (batch, channel, row, col) layout. Forward operators
optionally record their backward rule on a Tape; ``backward`` replays the
recorded rules in reverse order and accumulates gradients into ``Grid4.grad``.
Reductions delegate to numpy, whose accumulation order is fixed, so repeated
runs on identical inputs give bit-identical values.
"""

from __future__ import annotations

from typing import Callable, Iterable

import numpy as np
from numpy.lib.stride_tricks import as_strided

BN_EPSILON = 1e-5
BN_MOMENTUM = 0.1
PROB_CLAMP = 1e-12  # floor for log() in the domain-classifier loss

PORE_GROUP = "pore"
DOMAIN_GROUP = "domain"


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class Grid4:
    """Rank-4 value array with an optional same-shape gradient buffer.

    Values are treated as immutable once an operator has consumed them;
    optimizers mutate parameter values only between forward passes.
    """

    __slots__ = ("values", "grad", "requires_grad")

    def __init__(self, values, requires_grad: bool = False):
        arr = np.asarray(values)
        if arr.ndim != 4:
            raise ShapeError(f"Grid4 needs a rank-4 array, got shape {arr.shape}")
        if any(s <= 0 for s in arr.shape):
            raise ShapeError(f"Grid4 dimensions must be positive, got {arr.shape}")
        self.values = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.values.shape

    @property
    def dtype(self):
        return self.values.dtype

    def item(self) -> float:
        if self.values.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.values.reshape(()))

    def detach(self) -> "Grid4":
        """Same values, no gradient tracking."""
        return Grid4(self.values, requires_grad=False)

    def __repr__(self):
        return f"Grid4(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"


def param(values) -> Grid4:
    """Wrap an array as a trainable parameter."""
    return Grid4(values, requires_grad=True)


class Tape:
    """Ordered record of forward operations for one backward replay.

    A tape is single-owner while recording. ``backward`` may be called more
    than once; gradients accumulate across calls until ``Grid4.grad`` buffers
    are cleared (see ``ParamSet.zero_grads``).
    """

    def __init__(self):
        self._entries: list[tuple[Grid4, Callable[[np.ndarray], list]]] = []

    def __len__(self) -> int:
        return len(self._entries)

    def reset(self) -> None:
        self._entries.clear()


def _record(tape: Tape | None, out: Grid4, backward_fn) -> Grid4:
    if tape is not None and out.requires_grad:
        tape._entries.append((out, backward_fn))
    return out


def backward(loss: Grid4, tape: Tape) -> None:
    """Populate gradients of every requires_grad tensor reachable from loss.

    Entries are replayed in exact reverse order of recording, which is a
    reverse topological order of the forward pass. Per-call flows are kept in
    a local map and merged into ``.grad`` at the end, so a second call on the
    same tape adds a second full contribution.
    """
    if loss.values.size != 1:
        raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
    flow: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.values)}
    touched: dict[int, Grid4] = {id(loss): loss}
    for out, backward_fn in reversed(tape._entries):
        g_out = flow.get(id(out))
        if g_out is None:
            continue
        for tensor, g in backward_fn(g_out):
            if not tensor.requires_grad:
                continue
            key = id(tensor)
            if key in flow:
                flow[key] = flow[key] + g
            else:
                flow[key] = g
                touched[key] = tensor
    for key, tensor in touched.items():
        if tensor.grad is None:
            tensor.grad = flow[key]
        else:
            tensor.grad = tensor.grad + flow[key]


# ---------------------------------------------------------------------------
# convolution

def _im2col(padded: np.ndarray, k: int) -> np.ndarray:
    """(n, c, H+2p, W+2p) -> (n, c*k*k, H*W) patch matrix, C-order channels."""
    n, c, hp, wp = padded.shape
    h, w = hp - k + 1, wp - k + 1
    s0, s1, s2, s3 = padded.strides
    windows = as_strided(padded, (n, c, k, k, h, w), (s0, s1, s2, s3, s2, s3))
    return windows.reshape(n, c * k * k, h * w)


def _conv_raw(x: np.ndarray, weight: np.ndarray) -> np.ndarray:
    """Same-padding stride-1 cross-correlation, no bias."""
    c_out, c_in, k, _ = weight.shape
    n, _, h, w = x.shape
    pad = (k - 1) // 2
    padded = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = _im2col(padded, k)
    out = np.matmul(weight.reshape(c_out, c_in * k * k), cols)
    return out.reshape(n, c_out, h, w)


def conv2d_same(x: Grid4, weight: Grid4, bias: Grid4, stride: int = 1,
                tape: Tape | None = None) -> Grid4:
    """2-D convolution with zero padding that preserves the spatial size.

    weight is (c_out, c_in, k, k) with k odd; bias is (1, c_out, 1, 1).
    Only stride 1 is supported.
    """
    if stride != 1:
        raise ShapeError("conv2d_same supports stride 1 only")
    c_out, c_in, k, k2 = weight.shape
    if k != k2 or k % 2 == 0:
        raise ShapeError(f"kernel must be square with odd size, got {k}x{k2}")
    if x.shape[1] != c_in:
        raise ShapeError(f"input has {x.shape[1]} channels, weight expects {c_in}")
    if bias.shape != (1, c_out, 1, 1):
        raise ShapeError(f"bias must be (1, {c_out}, 1, 1), got {bias.shape}")
    out_vals = _conv_raw(x.values, weight.values) + bias.values
    out = Grid4(out_vals, requires_grad=x.requires_grad or weight.requires_grad
                or bias.requires_grad)

    def bwd(g: np.ndarray):
        grads = []
        if x.requires_grad:
            # dL/dx is the same-padding correlation with the transposed,
            # spatially flipped kernel.
            flipped = weight.values.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1]
            grads.append((x, _conv_raw(g, np.ascontiguousarray(flipped))))
        if weight.requires_grad:
            pad = (k - 1) // 2
            padded = np.pad(x.values, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
            cols = _im2col(padded, k)
            n = x.shape[0]
            g2 = g.reshape(n, c_out, -1)
            dw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0)
            grads.append((weight, dw.reshape(weight.shape)))
        if bias.requires_grad:
            grads.append((bias, g.sum(axis=(0, 2, 3)).reshape(1, c_out, 1, 1)))
        return grads

    return _record(tape, out, bwd)


# ---------------------------------------------------------------------------
# batch normalization

class BnState:
    """Running statistics of one batch-norm layer (per-channel mean and var)."""

    __slots__ = ("mean", "var")

    def __init__(self, channels: int, dtype=np.float32):
        self.mean = np.zeros(channels, dtype=dtype)
        self.var = np.ones(channels, dtype=dtype)

    def copy(self) -> "BnState":
        st = BnState.__new__(BnState)
        st.mean = self.mean.copy()
        st.var = self.var.copy()
        return st


def batch_norm(x: Grid4, gamma: Grid4, beta: Grid4, state: BnState, mode: str,
               tape: Tape | None = None, momentum: float = BN_MOMENTUM,
               eps: float = BN_EPSILON) -> Grid4:
    """Per-channel normalization over (batch, row, col).

    Train mode uses batch statistics (biased variance) and updates the running
    stats in place; eval mode normalizes with the running stats. gamma and
    beta are (1, c, 1, 1).
    """
    c = x.shape[1]
    if gamma.shape != (1, c, 1, 1) or beta.shape != (1, c, 1, 1):
        raise ShapeError(f"gamma/beta must be (1, {c}, 1, 1)")
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    axes = (0, 2, 3)
    if mode == "train":
        mu = x.values.mean(axis=axes)
        var = x.values.var(axis=axes)
        state.mean = ((1.0 - momentum) * state.mean + momentum * mu).astype(state.mean.dtype)
        state.var = ((1.0 - momentum) * state.var + momentum * var).astype(state.var.dtype)
    else:
        mu = state.mean.astype(x.dtype)
        var = state.var.astype(x.dtype)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.values - mu.reshape(1, c, 1, 1)) * inv_std.reshape(1, c, 1, 1)
    out_vals = gamma.values * xhat + beta.values
    out = Grid4(out_vals, requires_grad=x.requires_grad or gamma.requires_grad
                or beta.requires_grad)
    train = mode == "train"

    def bwd(g: np.ndarray):
        grads = []
        scale = (gamma.values.reshape(c) * inv_std).reshape(1, c, 1, 1)
        if x.requires_grad:
            if train:
                dx = scale * (g - g.mean(axis=axes, keepdims=True)
                              - xhat * (g * xhat).mean(axis=axes, keepdims=True))
            else:
                dx = scale * g
            grads.append((x, dx))
        if gamma.requires_grad:
            grads.append((gamma, (g * xhat).sum(axis=axes).reshape(1, c, 1, 1)))
        if beta.requires_grad:
            grads.append((beta, g.sum(axis=axes).reshape(1, c, 1, 1)))
        return grads

    return _record(tape, out, bwd)


# ---------------------------------------------------------------------------
# pointwise and shape operators

def relu(x: Grid4, tape: Tape | None = None) -> Grid4:
    out = Grid4(np.maximum(x.values, 0), requires_grad=x.requires_grad)

    def bwd(g: np.ndarray):
        return [(x, g * (x.values > 0))]

    return _record(tape, out, bwd)


def residual_add(a: Grid4, b: Grid4, tape: Tape | None = None) -> Grid4:
    if a.shape != b.shape:
        raise ShapeError(f"residual_add needs identical shapes, got {a.shape} vs {b.shape}")
    out = Grid4(a.values + b.values, requires_grad=a.requires_grad or b.requires_grad)

    def bwd(g: np.ndarray):
        return [(a, g), (b, g)]

    return _record(tape, out, bwd)


def flatten(x: Grid4, tape: Tape | None = None) -> Grid4:
    """(n, c, h, w) -> (n, c*h*w, 1, 1), row-major."""
    n = x.shape[0]
    out = Grid4(x.values.reshape(n, -1, 1, 1), requires_grad=x.requires_grad)

    def bwd(g: np.ndarray):
        return [(x, g.reshape(x.shape))]

    return _record(tape, out, bwd)


def linear(x: Grid4, weight: Grid4, bias: Grid4, tape: Tape | None = None) -> Grid4:
    """Affine map on flattened activations.

    x is (n, d, 1, 1), weight (m, d, 1, 1), bias (1, m, 1, 1); output (n, m, 1, 1).
    """
    n, d = x.shape[0], x.shape[1]
    m, d2 = weight.shape[0], weight.shape[1]
    if x.shape[2:] != (1, 1) or weight.shape[2:] != (1, 1):
        raise ShapeError("linear operates on flattened (n, d, 1, 1) grids")
    if d != d2:
        raise ShapeError(f"linear input width {d} does not match weight width {d2}")
    if bias.shape != (1, m, 1, 1):
        raise ShapeError(f"bias must be (1, {m}, 1, 1), got {bias.shape}")
    x2 = x.values.reshape(n, d)
    w2 = weight.values.reshape(m, d)
    out_vals = (x2 @ w2.T + bias.values.reshape(1, m)).reshape(n, m, 1, 1)
    out = Grid4(out_vals, requires_grad=x.requires_grad or weight.requires_grad
                or bias.requires_grad)

    def bwd(g: np.ndarray):
        g2 = g.reshape(n, m)
        grads = []
        if x.requires_grad:
            grads.append((x, (g2 @ w2).reshape(x.shape)))
        if weight.requires_grad:
            grads.append((weight, (g2.T @ x2).reshape(weight.shape)))
        if bias.requires_grad:
            grads.append((bias, g2.sum(axis=0).reshape(1, m, 1, 1)))
        return grads

    return _record(tape, out, bwd)


def softmax_rows(x: Grid4, tape: Tape | None = None) -> Grid4:
    """Row-wise softmax over the channel axis of an (n, k, 1, 1) grid."""
    if x.shape[2:] != (1, 1):
        raise ShapeError("softmax_rows operates on flattened (n, k, 1, 1) grids")
    z = x.values - x.values.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)
    out = Grid4(p, requires_grad=x.requires_grad)

    def bwd(g: np.ndarray):
        dot = (g * p).sum(axis=1, keepdims=True)
        return [(x, p * (g - dot))]

    return _record(tape, out, bwd)


# ---------------------------------------------------------------------------
# losses and reductions

def _scalar(value: float, dtype) -> np.ndarray:
    return np.full((1, 1, 1, 1), value, dtype=dtype)


def mse_loss(yhat: Grid4, y: Grid4, tape: Tape | None = None) -> Grid4:
    """Mean over every element of the squared difference."""
    if yhat.shape != y.shape:
        raise ShapeError(f"mse_loss needs identical shapes, got {yhat.shape} vs {y.shape}")
    diff = yhat.values - y.values
    out = Grid4(_scalar((diff * diff).mean(), yhat.dtype),
                requires_grad=yhat.requires_grad or y.requires_grad)
    size = diff.size

    def bwd(g: np.ndarray):
        base = (2.0 / size) * diff * g.reshape(())
        grads = []
        if yhat.requires_grad:
            grads.append((yhat, base))
        if y.requires_grad:
            grads.append((y, -base))
        return grads

    return _record(tape, out, bwd)


def cross_entropy(probs: Grid4, label: int, tape: Tape | None = None) -> Grid4:
    """Mean negative log-probability of one class shared by the whole batch.

    probs is (n, k, 1, 1) of already-normalized rows; probabilities are
    clamped at PROB_CLAMP before the log.
    """
    if probs.shape[2:] != (1, 1):
        raise ShapeError("cross_entropy operates on flattened (n, k, 1, 1) grids")
    k = probs.shape[1]
    if not 0 <= label < k:
        raise ValueError(f"label {label} out of range for {k} classes")
    n = probs.shape[0]
    p_true = np.maximum(probs.values[:, label, 0, 0], PROB_CLAMP)
    out = Grid4(_scalar(-np.log(p_true).mean(), probs.dtype),
                requires_grad=probs.requires_grad)

    def bwd(g: np.ndarray):
        dp = np.zeros_like(probs.values)
        dp[:, label, 0, 0] = -g.reshape(()) / (n * p_true)
        return [(probs, dp)]

    return _record(tape, out, bwd)


def gradient_reversal(x: Grid4, lam: float, tape: Tape | None = None) -> Grid4:
    """Identity in the forward pass; backward multiplies the gradient by -lam.

    The forward output shares the input buffer, so it is bit-identical. lam
    may be any finite real; training configs restrict it to lam >= 0.
    """
    if not np.isfinite(lam):
        raise ValueError(f"lam must be finite, got {lam}")
    out = Grid4(x.values, requires_grad=x.requires_grad)

    def bwd(g: np.ndarray):
        return [(x, (-lam) * g)]

    return _record(tape, out, bwd)


def sum_all(x: Grid4, tape: Tape | None = None) -> Grid4:
    out = Grid4(_scalar(x.values.sum(), x.dtype), requires_grad=x.requires_grad)

    def bwd(g: np.ndarray):
        return [(x, np.full_like(x.values, g.reshape(())))]

    return _record(tape, out, bwd)


# ---------------------------------------------------------------------------
# parameter registry

class ParamSet:
    """Named parameters split into the pore branch and the domain classifier.

    Iteration order is insertion order, which every consumer (initialization,
    optimizers, checkpoints) relies on for determinism. ``stats`` holds the
    batch-norm running statistics keyed by layer name.
    """

    def __init__(self):
        self._params: dict[str, Grid4] = {}
        self._groups: dict[str, str] = {}
        self.stats: dict[str, BnState] = {}

    def add(self, name: str, grid: Grid4, group: str) -> None:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        if group not in (PORE_GROUP, DOMAIN_GROUP):
            raise ValueError(f"unknown parameter group {group!r}")
        self._params[name] = grid
        self._groups[name] = group

    def __getitem__(self, name: str) -> Grid4:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def group_of(self, name: str) -> str:
        return self._groups[name]

    def group_names(self, group: str) -> list[str]:
        return [n for n, g in self._groups.items() if g == group]

    def items(self) -> Iterable[tuple[str, Grid4]]:
        return self._params.items()

    def zero_grads(self) -> None:
        for p in self._params.values():
            p.grad = None

    def copy(self) -> "ParamSet":
        """Deep copy of values, groups, and running stats (grads dropped)."""
        ps = ParamSet()
        for name, p in self._params.items():
            ps.add(name, Grid4(p.values.copy(), requires_grad=p.requires_grad),
                   self._groups[name])
        ps.stats = {k: v.copy() for k, v in self.stats.items()}
        return ps


# ---------------------------------------------------------------------------
# finite-difference self check

def finite_difference_check(loss_fn, params: list[Grid4], step: float = 1e-4,
                            rng: np.random.Generator | None = None,
                            max_elements: int | None = None) -> float:
    """Compare analytic gradients of loss_fn against central differences.

    loss_fn(tape) must rebuild the forward pass from the given parameter
    grids and return a scalar Grid4. Parameters should be float64; central
    differences at this step size are meaningless in single precision.
    Returns the worst elementwise error |a - n| / max(1, |a|, |n|).
    """
    tape = Tape()
    loss = loss_fn(tape)
    for p in params:
        p.grad = None
    backward(loss, tape)
    analytic = [np.zeros_like(p.values) if p.grad is None else p.grad.copy()
                for p in params]
    for p in params:
        p.grad = None

    worst = 0.0
    for p, a in zip(params, analytic):
        flat = p.values.reshape(-1)
        idx = np.arange(flat.size)
        if max_elements is not None and flat.size > max_elements:
            if rng is None:
                rng = np.random.default_rng(0)
            idx = rng.choice(flat.size, size=max_elements, replace=False)
        a_flat = a.reshape(-1)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + step
            up = loss_fn(None).item()
            flat[i] = orig - step
            down = loss_fn(None).item()
            flat[i] = orig
            numeric = (up - down) / (2.0 * step)
            err = abs(a_flat[i] - numeric) / max(1.0, abs(a_flat[i]), abs(numeric))
            if err > worst:
                worst = err
    return worst
