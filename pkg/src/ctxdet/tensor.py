"""Dense float64 tensors with a reverse-mode gradient tape.

Layout is row-major. Elementwise ops broadcast with numpy semantics;
matmul broadcasts leading batch dims only. There is no implicit rank
promotion beyond that: an op either accepts the shapes as-is or raises
ShapeError.

Gradients are recorded on an explicit per-forward-pass tape:

    with GradTape() as tape:
        loss = some_scalar_function(params)
    grads = tape.backward(loss)

Ops record a node only while a tape is active and at least one input is
tracked (a requires_grad leaf, or the output of an earlier node on the
same tape). Nodes are appended in execution order, so the node list is
already topologically sorted. A tape is single-use: `backward` frees the
node list after the sweep.

Every forward op validates that its output is finite; NaN/Inf anywhere
is a contract violation and raises ContractError. Use
`finite_checks(False)` to trade that guard for speed.

Tensors are immutable values after construction and safe to share
across threads; the active tape is thread-local, so independent tapes
may run concurrently.
"""

from __future__ import annotations

import contextlib
import threading

import numpy as np

from .errors import ContractError, OracleError, ShapeError

_tls = threading.local()

_FINITE_CHECKS = True


@contextlib.contextmanager
def finite_checks(enabled: bool):
    """Temporarily enable/disable the NaN/Inf guard on op outputs."""
    global _FINITE_CHECKS
    prev = _FINITE_CHECKS
    _FINITE_CHECKS = enabled
    try:
        yield
    finally:
        _FINITE_CHECKS = prev


def _check_finite(name, arr):
    if _FINITE_CHECKS and not np.all(np.isfinite(arr)):
        raise ContractError(f"{name} produced non-finite values")


class Tensor:
    """Immutable dense array, optionally tracked on the active gradient tape."""

    __slots__ = ("data", "requires_grad", "node_id", "_tape")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.node_id = None
        self._tape = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={tuple(self.data.shape)}, requires_grad={self.requires_grad})"

    # arithmetic sugar; every operator funnels into the module-level ops
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape))


def zeros_like(t: Tensor) -> Tensor:
    return Tensor(np.zeros_like(t.data))


class _Node:
    __slots__ = ("parents", "backward")

    def __init__(self, parents, backward):
        self.parents = parents  # node ids, None for untracked inputs
        self.backward = backward  # grad_out -> tuple of parent grads (or None)


class GradTape:
    """Ordered record of primitive ops for one forward pass.

    Node parents always precede the node itself. `backward` runs a single
    reverse sweep, fills `grads` (node_id -> ndarray) and frees the nodes.
    """

    def __init__(self):
        self.nodes = []
        self.grads = {}
        self._leaf_ids = {}  # id(Tensor) -> node_id
        self._consumed = False

    def __enter__(self):
        if getattr(_tls, "tape", None) is not None:
            raise ContractError("nested GradTape contexts are not supported")
        _tls.tape = self
        return self

    def __exit__(self, *exc):
        _tls.tape = None
        return False

    def _leaf(self, t: Tensor) -> int:
        nid = self._leaf_ids.get(id(t))
        if nid is None:
            nid = len(self.nodes)
            self.nodes.append(_Node((), None))
            self._leaf_ids[id(t)] = nid
        return nid

    def _record(self, parents, backward) -> int:
        nid = len(self.nodes)
        self.nodes.append(_Node(tuple(parents), backward))
        return nid

    def backward(self, loss: Tensor):
        """Reverse-accumulate d(loss)/d(node) for every node reaching `loss`."""
        if self._consumed:
            raise ContractError("tape already consumed by a previous backward()")
        if loss.data.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {loss.data.shape}")
        if loss._tape is not self or loss.node_id is None:
            raise ContractError("loss tensor was not recorded on this tape")
        self._consumed = True

        grads = self.grads
        grads[loss.node_id] = np.ones_like(loss.data)
        for nid in range(loss.node_id, -1, -1):
            g = grads.get(nid)
            if g is None:
                continue
            node = self.nodes[nid]
            if node.backward is None:
                continue
            parent_grads = node.backward(g)
            for pid, pg in zip(node.parents, parent_grads):
                if pid is None or pg is None:
                    continue
                acc = grads.get(pid)
                grads[pid] = pg if acc is None else acc + pg
        self.nodes = []  # free closures and saved arrays
        return grads

    def grad(self, t: Tensor) -> Tensor:
        """Gradient for a leaf tensor; zeros if it never reached the loss."""
        nid = self._leaf_ids.get(id(t))
        if nid is None and t._tape is self:
            nid = t.node_id
        g = self.grads.get(nid) if nid is not None else None
        if g is None:
            return zeros_like(t)
        return Tensor(g)


def _active():
    return getattr(_tls, "tape", None)


def _track(tape, t: Tensor):
    """Node id of `t` on `tape`, registering requires_grad leaves lazily."""
    if t._tape is tape and t.node_id is not None:
        return t.node_id
    if t.requires_grad:
        return tape._leaf(t)
    return None


def _out(name, data, parents_ts, backward):
    """Wrap op output, recording a node when the active tape tracks an input."""
    _check_finite(name, data)
    out = Tensor(data)
    out.requires_grad = any(t.requires_grad for t in parents_ts)
    tape = _active()
    if tape is not None:
        pids = [_track(tape, t) for t in parents_ts]
        if any(pid is not None for pid in pids):
            out.node_id = tape._record(pids, backward)
            out._tape = tape
            out.requires_grad = True
    return out


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape`, inverting numpy broadcasting."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise primitives


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    data = a.data + b.data
    ash, bsh = a.data.shape, b.data.shape
    return _out("add", data, (a, b),
                lambda g: (_unbroadcast(g, ash), _unbroadcast(g, bsh)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    data = a.data - b.data
    ash, bsh = a.data.shape, b.data.shape
    return _out("sub", data, (a, b),
                lambda g: (_unbroadcast(g, ash), _unbroadcast(-g, bsh)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    data = a.data * b.data
    ad, bd = a.data, b.data
    return _out("mul", data, (a, b),
                lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    data = a.data / b.data
    ad, bd = a.data, b.data
    return _out("div", data, (a, b),
                lambda g: (_unbroadcast(g / bd, ad.shape),
                           _unbroadcast(-g * ad / (bd * bd), bd.shape)))


def neg(a):
    a = as_tensor(a)
    return _out("neg", -a.data, (a,), lambda g: (-g,))


def exp(a):
    a = as_tensor(a)
    data = np.exp(a.data)
    return _out("exp", data, (a,), lambda g: (g * data,))


def log(a):
    a = as_tensor(a)
    data = np.log(a.data)
    ad = a.data
    return _out("log", data, (a,), lambda g: (g / ad,))


def sqrt(a):
    a = as_tensor(a)
    data = np.sqrt(a.data)
    return _out("sqrt", data, (a,), lambda g: (g * (0.5 / data),))


def relu(a):
    a = as_tensor(a)
    mask = a.data > 0
    return _out("relu", a.data * mask, (a,), lambda g: (g * mask,))


def sigmoid(a):
    """Numerically stable logistic; exact 0/1 at extreme inputs."""
    a = as_tensor(a)
    x = a.data
    data = np.empty_like(x)
    pos = x >= 0
    data[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    data[~pos] = ex / (1.0 + ex)
    return _out("sigmoid", data, (a,), lambda g: (g * data * (1.0 - data),))


def absolute(a):
    a = as_tensor(a)
    sign = np.sign(a.data)
    return _out("abs", np.abs(a.data), (a,), lambda g: (g * sign,))


def maximum(a, b):
    """Elementwise max; on ties the first argument receives the gradient."""
    a, b = as_tensor(a), as_tensor(b)
    mask = a.data >= b.data
    data = np.where(mask, a.data, b.data)
    ash, bsh = a.data.shape, b.data.shape
    return _out("maximum", data, (a, b),
                lambda g: (_unbroadcast(g * mask, ash), _unbroadcast(g * ~mask, bsh)))


def minimum(a, b):
    a, b = as_tensor(a), as_tensor(b)
    mask = a.data <= b.data
    data = np.where(mask, a.data, b.data)
    ash, bsh = a.data.shape, b.data.shape
    return _out("minimum", data, (a, b),
                lambda g: (_unbroadcast(g * mask, ash), _unbroadcast(g * ~mask, bsh)))


def clamp(a, lo=None, hi=None):
    """Clip to scalar bounds; gradient passes where lo <= x <= hi."""
    a = as_tensor(a)
    if lo is None and hi is None:
        return a
    data = np.clip(a.data, lo, hi)
    mask = np.ones_like(a.data, dtype=bool)
    if lo is not None:
        mask &= a.data >= lo
    if hi is not None:
        mask &= a.data <= hi
    return _out("clamp", data, (a,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# reductions and structure


def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    data = np.sum(a.data, axis=axis, keepdims=keepdims)
    ash = a.data.shape

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, ash).copy(),)

    return _out("sum", data, (a,), bwd)


def tmean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    data = np.mean(a.data, axis=axis, keepdims=keepdims)
    ash = a.data.shape
    n = a.data.size / max(data.size, 1)

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, ash) / n,)

    return _out("mean", data, (a,), bwd)


def reshape(a, shape):
    a = as_tensor(a)
    ash = a.data.shape
    return _out("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(ash),))


def transpose(a, axes=None):
    a = as_tensor(a)
    data = np.transpose(a.data, axes)
    inv = None if axes is None else np.argsort(axes)

    def bwd(g):
        return (np.transpose(g, inv),)

    return _out("transpose", data, (a,), bwd)


def concat(tensors, axis):
    tensors = [as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return _out("concat", data, tuple(tensors), bwd)


def take(a, idx):
    """Basic indexing/slicing; backward scatter-adds into the source shape."""
    a = as_tensor(a)
    data = a.data[idx]
    ash = a.data.shape

    def bwd(g):
        out = np.zeros(ash)
        np.add.at(out, idx, g)
        return (out,)

    return _out("take", data, (a,), bwd)


def matmul(a, b):
    """Batched matrix product a[..,m,k] @ b[..,k,n]; leading dims broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.data.shape} x {b.data.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.data.shape} x {b.data.shape}")
    try:
        data = np.matmul(a.data, b.data)
    except ValueError as e:
        raise ShapeError(f"matmul batch dims incompatible: {a.data.shape} x {b.data.shape}") from e
    ad, bd = a.data, b.data

    def bwd(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2))
        gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        return (_unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape))

    return _out("matmul", data, (a, b), bwd)


# ---------------------------------------------------------------------------
# spatial primitives


def _conv_geometry(h, w, kh, kw, stride, padding):
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    if kh > h + 2 * padding or kw > w + 2 * padding or oh < 1 or ow < 1:
        raise ShapeError(f"kernel {kh}x{kw} stride {stride} pad {padding} "
                         f"does not fit input {h}x{w}")
    return oh, ow


def unfold(a, kh, kw, stride=1, padding=0):
    """im2col: [B,C,H,W] -> [B, C*kh*kw, oh*ow] patch matrix."""
    a = as_tensor(a)
    bsz, c, h, w = a.data.shape
    oh, ow = _conv_geometry(h, w, kh, kw, stride, padding)
    x = a.data
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    s0, s1, s2, s3 = x.strides
    windows = np.lib.stride_tricks.as_strided(
        x, shape=(bsz, c, oh, ow, kh, kw),
        strides=(s0, s1, s2 * stride, s3 * stride, s2, s3))
    cols = windows.transpose(0, 1, 4, 5, 2, 3).reshape(bsz, c * kh * kw, oh * ow).copy()

    def bwd(g):
        gp = np.zeros((bsz, c, h + 2 * padding, w + 2 * padding))
        gw = g.reshape(bsz, c, kh, kw, oh, ow)
        for i in range(kh):
            for j in range(kw):
                gp[:, :, i:i + oh * stride:stride, j:j + ow * stride:stride] += gw[:, :, i, j]
        if padding:
            gp = gp[:, :, padding:-padding, padding:-padding]
        return (gp,)

    return _out("unfold", cols, (a,), bwd)


def conv2d(x, w, b=None, stride=1, padding=0):
    """2-D cross-correlation of x[B,Cin,H,W] with w[Cout,Cin,kh,kw]."""
    x, w = as_tensor(x), as_tensor(w)
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"conv2d needs 4-D operands, got {x.data.shape} and {w.data.shape}")
    cout, cin, kh, kw = w.data.shape
    if x.data.shape[1] != cin:
        raise ShapeError(f"conv2d channel mismatch: input {x.data.shape} vs kernel {w.data.shape}")
    bsz, _, h, wdt = x.data.shape
    oh, ow = _conv_geometry(h, wdt, kh, kw, stride, padding)
    cols = unfold(x, kh, kw, stride, padding)
    wmat = reshape(w, (cout, cin * kh * kw))
    out = reshape(matmul(wmat, cols), (bsz, cout, oh, ow))
    if b is not None:
        out = add(out, reshape(as_tensor(b), (1, cout, 1, 1)))
    return out


def avg_pool2d(x, k=3, stride=2, padding=1):
    """Average pooling over valid cells only: padding never dilutes the mean,
    so constant maps stay constant."""
    x = as_tensor(x)
    bsz, c, h, w = x.data.shape
    oh, ow = _conv_geometry(h, w, k, k, stride, padding)
    cols = unfold(reshape(x, (bsz * c, 1, h, w)), k, k, stride, padding)
    ones = np.pad(np.ones((h, w)), padding)
    s0, s1 = ones.strides
    counts = np.lib.stride_tricks.as_strided(
        ones, shape=(oh, ow, k, k),
        strides=(s0 * stride, s1 * stride, s0, s1)).sum(axis=(2, 3))
    pooled = div(tsum(cols, axis=1), Tensor(counts.reshape(1, oh * ow)))
    return reshape(pooled, (bsz, c, oh, ow))


def upsample_nearest2(x):
    """Nearest-neighbor 2x upsample on the trailing two axes."""
    x = as_tensor(x)
    bsz, c, h, w = x.data.shape
    data = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def bwd(g):
        return (g.reshape(bsz, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return _out("upsample2", data, (x,), bwd)


def global_avg_pool(x):
    """Per-channel spatial mean: [B,C,H,W] -> [B,C]."""
    x = as_tensor(x)
    if x.data.ndim != 4:
        raise ShapeError(f"global_avg_pool needs [B,C,H,W], got {x.data.shape}")
    return tmean(x, axis=(2, 3))


# ---------------------------------------------------------------------------
# composed ops


def softmax(x, axis):
    """Softmax along `axis` with max-subtraction; rows sum to 1."""
    x = as_tensor(x)
    shift = np.max(x.data, axis=axis, keepdims=True)  # constant shift, gradient-exact
    e = exp(sub(x, Tensor(shift)))
    return div(e, tsum(e, axis=axis, keepdims=True))


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalize the last axis to zero mean / unit variance, then affine."""
    x = as_tensor(x)
    if x.data.shape[-1] < 1:
        raise ShapeError("layer_norm needs a non-empty last axis")
    mu = tmean(x, axis=-1, keepdims=True)
    xc = sub(x, mu)
    var = tmean(mul(xc, xc), axis=-1, keepdims=True)
    y = div(xc, sqrt(add(var, eps)))
    return add(mul(y, as_tensor(gamma)), as_tensor(beta))


def dropout(x, rate, rng, training):
    """Inverted dropout; identity when rate is 0 or not training."""
    x = as_tensor(x)
    if not training or rate == 0.0:
        return x
    mask = (rng.random(x.data.shape) >= rate) / (1.0 - rate)
    return mul(x, Tensor(mask))


def linear(x, w, b=None):
    """Row-vector affine map x @ w (+ b) with w stored [in, out]."""
    out = matmul(as_tensor(x), as_tensor(w))
    if b is not None:
        out = add(out, as_tensor(b))
    return out


# ---------------------------------------------------------------------------
# gradient oracle


def finite_difference_check(f, params, eps=1e-5, floor=1e-8):
    """Max relative error between tape gradients of `f` and central differences.

    `f` is a zero-argument callable returning a scalar Tensor computed from
    the tensors in `params` (a name -> Tensor mapping). It must be
    deterministic; this is verified by evaluating it twice and comparing
    bit-exactly. Parameter data is perturbed in place and restored.

    relative error = |g_ad - g_fd| / max(floor, |g_ad| + |g_fd|)

    Central differences of an O(1) objective carry ~|f|*1e-16/eps of
    subtractive noise, so gradients below that scale compare as pure noise
    ratios no matter how accurate the tape is. Deep composites whose weakest
    parameters sit near that limit should raise `floor` to the smallest
    magnitude worth certifying; elements below it are then judged on the
    absolute scale `floor` instead of their own.
    """
    with GradTape() as tape:
        out = f()
    if out.data.size != 1:
        raise ContractError("finite_difference_check needs a scalar objective")
    base = out.data.copy()
    tape.backward(out)
    ad = {k: tape.grad(p).data.copy() for k, p in params.items()}

    repeat = f().data
    if not np.array_equal(base, repeat):
        raise OracleError("objective is not deterministic; cannot run finite differences")

    worst = 0.0
    for name, p in params.items():
        flat = p.data.reshape(-1)
        g_ad = ad[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = float(f().data.reshape(()))
            flat[i] = orig - eps
            lo = float(f().data.reshape(()))
            flat[i] = orig
            g_fd = (hi - lo) / (2.0 * eps)
            rel = abs(g_ad[i] - g_fd) / max(floor, abs(g_ad[i]) + abs(g_fd))
            worst = max(worst, rel)
    return worst
