"""Dense float64 tensors with a reverse-mode tape, core ops, and Adam.

Everything downstream (masks, encoders, losses) is built from the ops in
this module. Design rules:

* all values are 64-bit floats; op outputs are marked read-only so a tape
  can never see a mutated array,
* gradients accumulate only into ``Tensor.grad``; parameter updates rebind
  ``Tensor.data`` to a fresh read-only array between tapes,
* no global randomness: callers pass a seeded counter-based generator
  (see :func:`make_rng`).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DimensionError, GraphError


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based (Philox) generator; the only RNG used in the package."""
    return np.random.Generator(np.random.Philox(key=int(seed)))


class Tensor:
    """Immutable dense float64 array, optionally participating in a tape."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        # internal fast path: take ownership of arr without copying
        t = cls.__new__(cls)
        arr = np.asarray(arr, dtype=np.float64)
        arr.flags.writeable = False
        t.data = arr
        t.requires_grad = requires_grad
        t.grad = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def assign(self, arr: np.ndarray) -> None:
        """Rebind the value (parameter update). Never touches recorded tapes."""
        if arr.shape != self.data.shape:
            raise DimensionError(f"assign shape {arr.shape} != {self.data.shape}")
        new = np.asarray(arr, dtype=np.float64).copy()
        new.flags.writeable = False
        self.data = new

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar, mostly for tests and small compositions
    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return mul(self, _lift(other))

    def __rmul__(self, other):
        return mul(_lift(other), self)

    def __neg__(self):
        return neg(self)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


class TapeNode:
    """One recorded op: inputs, output, and the rule mapping d(out) to d(inputs)."""

    __slots__ = ("inputs", "output", "backward")

    def __init__(self, inputs, output, backward):
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Tape:
    """Ordered op record for one forward pass; replayed once, in reverse."""

    def __init__(self):
        self.nodes: list[TapeNode] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _TAPE_STACK.pop()
        return False


_TAPE_STACK: list[Tape] = []


def _make(data: np.ndarray, inputs: tuple[Tensor, ...], backward) -> Tensor:
    recording = bool(_TAPE_STACK) and any(t.requires_grad for t in inputs)
    out = Tensor._wrap(data, requires_grad=recording)
    if recording:
        _TAPE_STACK[-1].nodes.append(TapeNode(inputs, out, backward))
    return out


def backward(loss: Tensor, tape: Tape) -> None:
    """Seed d(loss)/d(loss)=1 and sweep the tape once in reverse order."""
    if loss.data.size != 1:
        raise GraphError(f"backward expects a scalar loss, got shape {loss.shape}")
    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape.nodes):
        out_grad = node.output.grad
        if out_grad is None:
            continue
        grads = node.backward(out_grad)
        for t, g in zip(node.inputs, grads):
            if g is None or not t.requires_grad:
                continue
            t.grad = g if t.grad is None else t.grad + g


def zero_grads(params) -> None:
    for p in params:
        p.grad = None


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum grad over axes that numpy broadcasting expanded."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise ops


def add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data
    ash, bsh = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, ash), _unbroadcast(g, bsh)

    return _make(data, (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    data = a.data - b.data
    ash, bsh = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, ash), _unbroadcast(-g, bsh)

    return _make(data, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data
    ad, bd = a.data, b.data

    def bw(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _make(data, (a, b), bw)


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a python constant (no gradient through c)."""
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,))


def relu(a: Tensor) -> Tensor:
    data = np.maximum(a.data, 0.0)
    mask = a.data > 0.0
    return _make(data, (a,), lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)

    def bw(g):
        return (g * out * (1.0 - out),)

    return _make(out, (a,), bw)


def exp(a: Tensor) -> Tensor:
    data = np.exp(a.data)
    return _make(data, (a,), lambda g: (g * data,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,))


# ---------------------------------------------------------------------------
# reductions and shape ops


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)
    ash = a.shape

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, ash).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, ash).copy(),)

    return _make(data, (a,), bw)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.mean(axis=axis, keepdims=keepdims)
    ash = a.shape
    if axis is None:
        count = a.data.size
    elif isinstance(axis, tuple):
        count = int(np.prod([ash[ax] for ax in axis]))
    else:
        count = ash[axis]

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g / count, ash).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, ash).copy(),)

    return _make(data, (a,), bw)


def reshape(a: Tensor, shape) -> Tensor:
    ash = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(ash),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.data.ndim)))
    inv = np.argsort(axes)
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        return tuple(
            np.take(g, np.arange(offsets[i], offsets[i + 1]), axis=axis)
            for i in range(len(sizes))
        )

    return _make(data, tuple(tensors), bw)


def index_select(a: Tensor, axis: int, indices) -> Tensor:
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1:
        raise DimensionError("index_select expects a 1-D index list")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[axis]):
        raise IndexError(f"index out of range for axis {axis} of shape {a.shape}")
    data = np.take(a.data, idx, axis=axis)
    ash = a.shape
    unique = len(np.unique(idx)) == idx.size

    def bw(g):
        ga = np.zeros(ash, dtype=np.float64)
        sl: list = [slice(None)] * len(ash)
        sl[axis] = idx
        if unique:
            ga[tuple(sl)] = g
        else:
            np.add.at(ga, tuple(sl), g)
        return (ga,)

    return _make(data, (a,), bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim not in (2, 3) or b.data.ndim not in (2, 3):
        raise DimensionError("matmul supports 2-D and batched 3-D operands")
    if a.data.ndim != b.data.ndim:
        raise DimensionError("matmul operands must have equal ndim")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    data = np.matmul(a.data, b.data)
    ad, bd = a.data, b.data

    def bw(g):
        return (
            np.matmul(g, bd.swapaxes(-1, -2)),
            np.matmul(ad.swapaxes(-1, -2), g),
        )

    return _make(data, (a, b), bw)


def logsumexp(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    """log(sum(exp(x))) with max subtraction; -inf entries contribute nothing."""
    x = a.data
    m = np.max(x, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(x - m)
    tot = e.sum(axis=axis, keepdims=True)
    out = m + np.log(tot)
    soft = e / tot
    if not keepdims:
        out = np.squeeze(out, axis=axis) if axis is not None else out.reshape(())

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (g * soft,)

    return _make(out, (a,), bw)


def normalize(a: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    """Divide by the L2 norm along `axis`, with the norm clamped below by eps."""
    x = a.data
    n = np.sqrt((x * x).sum(axis=axis, keepdims=True))
    nc = np.maximum(n, eps)
    y = x / nc
    clamped = n <= eps

    def bw(g):
        dot = (y * g).sum(axis=axis, keepdims=True)
        dot = np.where(clamped, 0.0, dot)
        return ((g - y * dot) / nc,)

    return _make(y, (a,), bw)


def cosine_similarity(a: Tensor, b: Tensor, eps: float = 1e-12) -> Tensor:
    """Cosine of the angle between two same-length vectors, in [-1, 1]."""
    if a.data.ndim != 1 or b.data.ndim != 1 or a.shape != b.shape:
        raise DimensionError(f"cosine_similarity needs equal 1-D shapes, got {a.shape}, {b.shape}")
    ua = normalize(a, axis=-1, eps=eps)
    ub = normalize(b, axis=-1, eps=eps)
    return clip_unit(tsum(mul(ua, ub)))


def clip_unit(a: Tensor) -> Tensor:
    """Clip to [-1, 1] in the forward value only (pass-through gradient)."""
    return _make(np.clip(a.data, -1.0, 1.0), (a,), lambda g: (g,))


# ---------------------------------------------------------------------------
# conv1d and instance norm


def _conv_padding(width: int, stride: int, padding) -> tuple[int, int]:
    if padding is not None:
        return int(padding), int(padding)
    if stride == 1:
        left = (width - 1) // 2
        return left, width - 1 - left
    return 1, 1


def conv1d(x: Tensor, kernels: Tensor, stride: int = 1, padding: int | None = None) -> Tensor:
    """1-D convolution (cross-correlation), no bias.

    x: [C_in, L] or [B, C_in, L]; kernels: [C_out, C_in, W].
    stride 1 uses zero same-padding, stride 2 uses padding 1 (overridable).
    """
    if stride not in (1, 2):
        raise ConfigError(f"conv1d stride must be 1 or 2, got {stride}")
    if kernels.data.ndim != 3:
        raise DimensionError(f"kernels must be [C_out, C_in, W], got {kernels.shape}")
    squeeze = x.data.ndim == 2
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 3:
        raise DimensionError(f"conv1d input must be 2-D or 3-D, got shape {x.shape}")
    batch, c_in, length = xd.shape
    c_out, kc_in, width = kernels.shape
    if kc_in != c_in:
        raise DimensionError(f"input has {c_in} channels but kernels expect {kc_in}")
    pl, pr = _conv_padding(width, stride, padding)
    lp = length + pl + pr
    if width > lp:
        raise DimensionError(f"kernel width {width} exceeds padded length {lp}")
    l_out = (lp - width) // stride + 1

    xp = np.pad(xd, ((0, 0), (0, 0), (pl, pr)))
    win = np.arange(l_out)[:, None] * stride + np.arange(width)[None, :]
    cols = xp[:, :, win]                                   # [B, C_in, L_out, W]
    cols2 = cols.transpose(0, 2, 1, 3).reshape(batch * l_out, c_in * width)
    kmat = kernels.data.reshape(c_out, c_in * width)
    out = (cols2 @ kmat.T).reshape(batch, l_out, c_out).transpose(0, 2, 1)
    if squeeze:
        out = out[0]

    def bw(g):
        gb = g[None] if squeeze else g
        g2 = gb.transpose(0, 2, 1).reshape(batch * l_out, c_out)
        gk = (g2.T @ cols2).reshape(c_out, c_in, width)
        gcols = (g2 @ kmat).reshape(batch, l_out, c_in, width).transpose(0, 2, 1, 3)
        gxp = np.zeros((batch, c_in, lp))
        for w in range(width):
            end = w + stride * (l_out - 1) + 1
            gxp[:, :, w:end:stride] += gcols[:, :, :, w]
        gx = gxp[:, :, pl:lp - pr] if pr else gxp[:, :, pl:]
        return (gx[0] if squeeze else gx, gk)

    return _make(out, (x, kernels), bw)


def instance_norm(x: Tensor, eps: float = 1e-9) -> Tensor:
    """Per-channel standardization over the time axis; no learnable affine."""
    if x.data.ndim not in (2, 3):
        raise DimensionError(f"instance_norm input must be [C, L] or [B, C, L], got {x.shape}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv

    def bw(g):
        gm = g.mean(axis=-1, keepdims=True)
        gy = (g * y).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - y * gy),)

    return _make(y, (x,), bw)


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    """Bias-corrected Adam moments for a fixed parameter list."""

    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: list = field(default_factory=list)
    second_moment: list = field(default_factory=list)


def adam_init(params, learning_rate: float = 1e-4, betas=(0.9, 0.999),
              epsilon: float = 1e-8) -> AdamState:
    return AdamState(
        learning_rate=learning_rate,
        beta1=betas[0],
        beta2=betas[1],
        epsilon=epsilon,
        step_count=0,
        first_moment=[np.zeros_like(p.data) for p in params],
        second_moment=[np.zeros_like(p.data) for p in params],
    )


def adam_step(params, grads, state: AdamState):
    """One Adam update; mutates state, rebinds each param's data. Returns both."""
    params = list(params)
    grads = list(grads)
    if len(params) != len(grads) or len(params) != len(state.first_moment):
        raise DimensionError("params/grads/state lengths disagree")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for i, (p, g) in enumerate(zip(params, grads)):
        g = np.zeros_like(p.data) if g is None else np.asarray(g, dtype=np.float64)
        if g.shape != p.data.shape:
            raise DimensionError(f"grad shape {g.shape} != param shape {p.data.shape}")
        m = state.first_moment[i]
        v = state.second_moment[i]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = state.learning_rate * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
        p.assign(p.data - update)
    return params, state


# ---------------------------------------------------------------------------
# finite-difference gradient checking


def grad_check(fn, points, h: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    fn maps one or more Tensors to a scalar Tensor. The error per coordinate
    is |analytic - fd| / max(1, |analytic|).
    """
    pts = [points] if isinstance(points, Tensor) else list(points)
    for p in pts:
        p.grad = None
        p.requires_grad = True
    with Tape() as tape:
        loss = fn(*pts)
        backward(loss, tape)
    analytic = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in pts]

    def eval_at(replaced: int, arr: np.ndarray) -> float:
        args = [
            Tensor(arr) if i == replaced else Tensor(p.data)
            for i, p in enumerate(pts)
        ]
        return fn(*args).item()

    worst = 0.0
    for i, p in enumerate(pts):
        base = p.data.ravel()
        an = analytic[i].ravel()
        for j in range(base.size):
            plus = base.copy()
            minus = base.copy()
            plus[j] += h
            minus[j] -= h
            fd = (eval_at(i, plus.reshape(p.shape)) - eval_at(i, minus.reshape(p.shape))) / (2 * h)
            err = abs(an[j] - fd) / max(1.0, abs(an[j]))
            worst = max(worst, err)
    return worst
