"""Dense float64 tensors with reverse-mode automatic differentiation.

The engine is define-by-run: a ``Tape`` is opened as a context manager, every
operation executed inside it appends a record (output node, input nodes,
backward rule), and :func:`backward` walks the records in reverse to
accumulate gradients for the leaf tensors. Tapes are rebuilt on every forward
pass; nothing survives between passes. Outside a tape, operations just
compute values, which is what inference uses.

All values are float64. Feature maps are laid out (channels, height, width).
Determinism: every operation is a fixed sequence of numpy calls with no
ambient RNG, so identical inputs give bit-identical outputs and gradients.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ContractViolation, ShapeError

__all__ = [
    "Tensor",
    "Tape",
    "backward",
    "record_op",
    "add",
    "scale",
    "sum_all",
    "gelu",
    "conv2d",
    "upsample_bilinear_2x",
    "concat_channels",
    "AdamState",
    "adam_step",
]

_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)
_GELU_CUBIC = 0.044715

# Innermost active tape last. Ops record onto the top of this stack only.
_TAPE_STACK: list["Tape"] = []


class Tensor:
    """A dense float64 array, optionally tracked by the active tape."""

    __slots__ = ("data", "requires_grad", "_tape", "_node")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if any(extent < 1 for extent in arr.shape):
            raise ShapeError(f"tensor extents must be positive, got {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self._tape: Tape | None = None
        self._node: int = -1

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        if self.data.shape != ():
            raise ShapeError(f"item() needs a scalar, got shape {self.data.shape}")
        return float(self.data)

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


class Tape:
    """Append-only operation record for one forward pass."""

    def __init__(self):
        # Each record is (out_node, in_nodes, rule). Rules map the upstream
        # gradient of the output to one array (or None) per input, in order.
        self._records: list[tuple[int, tuple[int, ...], Callable]] = []
        self._leaves: list[Tensor] = []
        self._n_nodes = 0

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        if not _TAPE_STACK or _TAPE_STACK[-1] is not self:
            raise ContractViolation("tape stack corrupted by mismatched enter/exit")
        _TAPE_STACK.pop()

    def _adopt(self, t: Tensor) -> int:
        # A tensor not produced on this tape becomes a leaf of this tape.
        if t._tape is not self:
            t._tape = self
            t._node = self._n_nodes
            self._n_nodes += 1
            self._leaves.append(t)
        return t._node

    def _record(self, out: Tensor, inputs: tuple[Tensor, ...], rule: Callable) -> None:
        in_nodes = tuple(self._adopt(t) for t in inputs)
        out._tape = self
        out._node = self._n_nodes
        self._n_nodes += 1
        self._records.append((out._node, in_nodes, rule))


def _active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def record_op(out: Tensor, inputs: Sequence[Tensor], rule: Callable) -> Tensor:
    """Attach a custom operation to the active tape.

    ``rule(upstream)`` receives the gradient of the output and must return a
    tuple with one gradient array (or None) per input, in order. Rules must
    not mutate ``upstream``. No-op when no tape is active or when no input
    requires a gradient; this is how loss modules extend the op set without
    touching the engine.
    """
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape._record(out, tuple(inputs), rule)
    return out


def backward(tape: Tape, loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Accumulate d(loss)/d(leaf) for every leaf of ``tape``.

    Returns a dict keyed by leaf tensor, containing an array for every leaf
    with ``requires_grad``; leaves the loss does not depend on get zeros.
    """
    if loss.data.shape != ():
        raise ContractViolation(f"backward needs a scalar loss, got shape {loss.data.shape}")
    if loss._tape is not tape:
        raise ContractViolation("loss was not produced on this tape")

    grads: dict[int, np.ndarray] = {loss._node: np.ones((), dtype=np.float64)}
    # Records are appended in execution order, so inputs always precede their
    # consumers; a single reverse sweep visits every node after all of its
    # consumers. pop() releases each upstream buffer as soon as it is used.
    for out_node, in_nodes, rule in reversed(tape._records):
        g = grads.pop(out_node, None)
        if g is None:
            continue
        contribs = rule(g)
        for node, contrib in zip(in_nodes, contribs, strict=True):
            if contrib is None:
                continue
            acc = grads.get(node)
            # Out-of-place: rules may hand back the upstream array itself.
            grads[node] = contrib if acc is None else acc + contrib

    out: dict[Tensor, np.ndarray] = {}
    for leaf in tape._leaves:
        if leaf.requires_grad:
            g = grads.get(leaf._node)
            out[leaf] = np.zeros_like(leaf.data) if g is None else np.asarray(g)
    return out


# ---------------------------------------------------------------------------
# elementwise and shape ops


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"add needs equal shapes, got {a.data.shape} and {b.data.shape}")
    out = Tensor(a.data + b.data)

    def rule(g):
        return (g if a.requires_grad else None, g if b.requires_grad else None)

    return record_op(out, (a, b), rule)


def scale(x: Tensor, factor: float) -> Tensor:
    factor = float(factor)
    out = Tensor(x.data * factor)

    def rule(g):
        return (g * factor,)

    return record_op(out, (x,), rule)


def sum_all(x: Tensor) -> Tensor:
    out = Tensor(x.data.sum())
    shape = x.data.shape

    def rule(g):
        return (np.full(shape, float(g)),)

    return record_op(out, (x,), rule)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 3 or b.data.ndim != 3:
        raise ShapeError("concat_channels needs (C, H, W) inputs")
    if a.data.shape[1:] != b.data.shape[1:]:
        raise ShapeError(
            f"concat_channels needs matching spatial dims, got {a.data.shape} and {b.data.shape}"
        )
    out = Tensor(np.concatenate((a.data, b.data), axis=0))
    ca = a.data.shape[0]

    def rule(g):
        ga = np.ascontiguousarray(g[:ca]) if a.requires_grad else None
        gb = np.ascontiguousarray(g[ca:]) if b.requires_grad else None
        return (ga, gb)

    return record_op(out, (a, b), rule)


def gelu(x: Tensor) -> Tensor:
    """Tanh approximation: 0.5*x*(1 + tanh(sqrt(2/pi)*(x + 0.044715*x^3)))."""
    # In-place arithmetic: this runs on every feature map of every step.
    # 0-d operands make ufuncs return scalars, so lift them to 1-element views.
    shape = x.data.shape
    xd = x.data.reshape(1) if x.data.ndim == 0 else x.data
    x2 = xd * xd
    inner = x2 * xd
    inner *= _GELU_CUBIC
    inner += xd
    inner *= _SQRT_2_OVER_PI
    t = np.tanh(inner, out=inner)
    y = 1.0 + t
    y *= xd
    y *= 0.5
    out = Tensor(y.reshape(shape))

    def rule(g):
        # 0.5 * ((1 + t) + x * sech^2 * d_inner/dx)
        dinner = x2 * (3.0 * _GELU_CUBIC)
        dinner += 1.0
        dinner *= _SQRT_2_OVER_PI
        s = t * t
        np.subtract(1.0, s, out=s)
        s *= dinner
        s *= xd
        s += t
        s += 1.0
        s *= 0.5
        s *= g.reshape(xd.shape)
        return (s.reshape(shape),)

    return record_op(out, (x,), rule)


# ---------------------------------------------------------------------------
# convolution

def _im2col(xpad: np.ndarray, k: int, stride: int) -> np.ndarray:
    win = np.lib.stride_tricks.sliding_window_view(xpad, (k, k), axis=(1, 2))
    win = win[:, ::stride, ::stride]  # (C, Ho, Wo, k, k)
    c, ho, wo = win.shape[:3]
    return np.ascontiguousarray(win.transpose(0, 3, 4, 1, 2)).reshape(c * k * k, ho * wo)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-d cross-correlation over a (C, H, W) input with square odd kernels.

    Output height is floor((H + 2*padding - k) / stride) + 1, same for width.
    """
    xd, wd, bd = x.data, weight.data, bias.data
    if xd.ndim != 3:
        raise ShapeError(f"conv2d input must be (C, H, W), got {xd.shape}")
    if wd.ndim != 4 or wd.shape[2] != wd.shape[3]:
        raise ShapeError(f"conv2d weight must be (Cout, Cin, k, k), got {wd.shape}")
    cout, cin, k = wd.shape[0], wd.shape[1], wd.shape[2]
    if k % 2 != 1:
        raise ShapeError(f"kernel size must be odd, got {k}")
    if xd.shape[0] != cin:
        raise ShapeError(f"input has {xd.shape[0]} channels, weight expects {cin}")
    if bd.shape != (cout,):
        raise ShapeError(f"bias must be ({cout},), got {bd.shape}")
    if stride < 1 or padding < 0:
        raise ValueError(f"bad stride/padding: {stride}/{padding}")
    h, w = xd.shape[1], xd.shape[2]
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"kernel {k} does not fit input {(h, w)} with padding {padding}")

    if k == 1 and stride == 1 and padding == 0:
        # Pointwise convolution is a plain matmul over flattened pixels.
        xmat = xd.reshape(cin, h * w)
        wmat = wd.reshape(cout, cin)
        y = wmat @ xmat
        y += bd[:, None]
        out = Tensor(y.reshape(cout, h, w))

        def rule_1x1(g):
            gmat = g.reshape(cout, h * w)
            gx = (wmat.T @ gmat).reshape(cin, h, w) if x.requires_grad else None
            gw = (gmat @ xmat.T).reshape(wd.shape) if weight.requires_grad else None
            gb = gmat.sum(axis=1) if bias.requires_grad else None
            return (gx, gw, gb)

        return record_op(out, (x, weight, bias), rule_1x1)

    if padding:
        xpad = np.zeros((cin, h + 2 * padding, w + 2 * padding))
        xpad[:, padding : padding + h, padding : padding + w] = xd
    else:
        xpad = xd
    col = _im2col(xpad, k, stride)  # (cin*k*k, ho*wo)
    wmat = wd.reshape(cout, cin * k * k)
    y = wmat @ col
    y += bd[:, None]
    out = Tensor(y.reshape(cout, ho, wo))

    def rule(g):
        gmat = g.reshape(cout, ho * wo)
        gw = (gmat @ col.T).reshape(wd.shape) if weight.requires_grad else None
        gb = gmat.sum(axis=1) if bias.requires_grad else None
        gx = None
        if x.requires_grad:
            dcol = (wmat.T @ gmat).reshape(cin, k, k, ho, wo)
            hp, wp = h + 2 * padding, w + 2 * padding
            gpad = np.zeros((cin, hp, wp))
            # col2im: each kernel offset scatters onto a strided slice; the
            # slices overlap across offsets, so they must be separate adds.
            for di in range(k):
                for dj in range(k):
                    gpad[:, di : di + stride * ho : stride, dj : dj + stride * wo : stride] += (
                        dcol[:, di, dj]
                    )
            gx = gpad
            if padding:
                gx = np.ascontiguousarray(gpad[:, padding : padding + h, padding : padding + w])
        return (gx, gw, gb)

    return record_op(out, (x, weight, bias), rule)


# ---------------------------------------------------------------------------
# bilinear upsampling

# Interpolation matrix for doubling one axis, keyed by source length. The op
# is then two matmuls, and its adjoint is the transposed matmuls.
_UP_MATRIX_CACHE: dict[int, np.ndarray] = {}


def _up_matrix(n: int) -> np.ndarray:
    m = _UP_MATRIX_CACHE.get(n)
    if m is None:
        dst = np.arange(2 * n)
        # Half-pixel centers: src = (dst + 0.5)/2 - 0.5, clamped to the edge.
        src = np.clip(dst / 2.0 - 0.25, 0.0, float(n - 1))
        lo = np.floor(src).astype(np.int64)
        hi = np.minimum(lo + 1, n - 1)
        frac = src - lo
        m = np.zeros((2 * n, n))
        np.add.at(m, (dst, lo), 1.0 - frac)
        np.add.at(m, (dst, hi), frac)
        _UP_MATRIX_CACHE[n] = m
    return m


def upsample_bilinear_2x(x: Tensor) -> Tensor:
    """Doubles both spatial extents of a (C, H, W) tensor bilinearly."""
    xd = x.data
    if xd.ndim != 3:
        raise ShapeError(f"upsample input must be (C, H, W), got {xd.shape}")
    mh = _up_matrix(xd.shape[1])
    mw = _up_matrix(xd.shape[2])
    out = Tensor(np.matmul(np.matmul(mh, xd), mw.T))

    def rule(g):
        return (np.matmul(np.matmul(mh.T, g), mw),)

    return record_op(out, (x,), rule)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    """First/second moment buffers plus the shared step counter."""

    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(cls, params: Sequence[Tensor]) -> "AdamState":
        return cls(
            step=0,
            m=[np.zeros_like(p.data) for p in params],
            v=[np.zeros_like(p.data) for p in params],
        )


def adam_step(
    params: Sequence[Tensor],
    grads: Sequence[np.ndarray],
    state: AdamState,
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One bias-corrected Adam update, in place on ``params``."""
    if not (len(params) == len(grads) == len(state.m) == len(state.v)):
        raise ContractViolation("adam_step: params, grads and state lengths differ")
    state.step += 1
    c1 = 1.0 - beta1**state.step
    c2 = 1.0 - beta2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v, strict=True):
        if p.data.shape != g.shape or m.shape != p.data.shape:
            raise ContractViolation(
                f"adam_step: shape mismatch {p.data.shape} vs {g.shape} vs {m.shape}"
            )
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
