"""float32 tensors with reverse-mode automatic differentiation.

Every operation records its inputs and a backward closure on the output
tensor; ``backward(loss)`` walks the recorded graph once in reverse
topological order. Data lives in numpy float32 arrays; a leading batch
dimension is accepted wherever it is cheap to support.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, NumericError, ShapeError

DTYPE = np.float32


class Tensor:
    """N-dimensional float32 array, optionally participating in the tape."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    # keep numpy from consuming Tensor operands; reflected ops run instead
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = ()
        self._backward = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape):
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: tuple) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        if g.shape == t.data.shape and g.dtype == DTYPE:
            t.grad = g.copy()
            return
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum g over the axes numpy broadcasting expanded to reach its shape."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def tape(root: Tensor) -> list:
    """Graph nodes reachable from root, in topological order.

    Every node's inputs precede it, so a single reverse sweep visits each
    node exactly once.
    """
    order: list = []
    seen: set = set()
    stack = [(root, False)]
    while stack:
        node, emit = stack.pop()
        if emit:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate .grad on every requires_grad tensor reachable from loss."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape(loss)):
        if node._backward is not None:
            node._backward()


# ---------------------------------------------------------------------------
# elementwise and arithmetic ops
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = _node(a.data + b.data, (a, b))
    if out.requires_grad:
        def _bw():
            _accum(a, _unbroadcast(out.grad, a.data.shape))
            _accum(b, _unbroadcast(out.grad, b.data.shape))
        out._backward = _bw
    return out


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = _node(a.data - b.data, (a, b))
    if out.requires_grad:
        def _bw():
            _accum(a, _unbroadcast(out.grad, a.data.shape))
            _accum(b, _unbroadcast(-out.grad, b.data.shape))
        out._backward = _bw
    return out


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = _node(a.data * b.data, (a, b))
    if out.requires_grad:
        def _bw():
            _accum(a, _unbroadcast(out.grad * b.data, a.data.shape))
            _accum(b, _unbroadcast(out.grad * a.data, b.data.shape))
        out._backward = _bw
    return out


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = _node(a.data / b.data, (a, b))
    if out.requires_grad:
        def _bw():
            _accum(a, _unbroadcast(out.grad / b.data, a.data.shape))
            _accum(b, _unbroadcast(-out.grad * a.data / (b.data * b.data), b.data.shape))
        out._backward = _bw
    return out


def neg(a) -> Tensor:
    a = as_tensor(a)
    out = _node(-a.data, (a,))
    if out.requires_grad:
        def _bw():
            _accum(a, -out.grad)
        out._backward = _bw
    return out


def _relu_mask(data: np.ndarray) -> np.ndarray:
    # subgradient at exactly 0 is 0 by convention
    return (data > 0).astype(DTYPE)


def relu(a) -> Tensor:
    a = as_tensor(a)
    out = _node(np.maximum(a.data, DTYPE(0)), (a,))
    if out.requires_grad:
        def _bw():
            _accum(a, out.grad * _relu_mask(a.data))
        out._backward = _bw
    return out


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    s = np.where(x >= 0, 1.0 / (1.0 + np.exp(-x)), np.exp(x) / (1.0 + np.exp(x)))
    out = _node(s.astype(DTYPE), (a,))
    if out.requires_grad:
        def _bw():
            _accum(a, out.grad * out.data * (1.0 - out.data))
        out._backward = _bw
    return out


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = _node(np.exp(a.data), (a,))
    if out.requires_grad:
        def _bw():
            _accum(a, out.grad * out.data)
        out._backward = _bw
    return out


def log(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        data = np.log(a.data)
    out = _node(data, (a,))
    if out.requires_grad:
        def _bw():
            _accum(a, out.grad / a.data)
        out._backward = _bw
    return out


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp values to [lo, hi]; gradient is zero where clamping is active."""
    a = as_tensor(a)
    out = _node(np.clip(a.data, lo, hi), (a,))
    if out.requires_grad:
        inside = ((a.data > lo) & (a.data < hi)).astype(DTYPE)
        def _bw():
            _accum(a, out.grad * inside)
        out._backward = _bw
    return out


def mask_fill(a, mask: np.ndarray, value: float) -> Tensor:
    """Set entries where mask is True to a constant; their gradient is zero."""
    a = as_tensor(a)
    mask = np.asarray(mask, dtype=bool)
    out = _node(np.where(mask, DTYPE(value), a.data), (a,))
    if out.requires_grad:
        def _bw():
            _accum(a, _unbroadcast(np.where(mask, DTYPE(0), out.grad), a.data.shape))
        out._backward = _bw
    return out


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------

def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = _node(a.data.sum(axis=axis, keepdims=keepdims, dtype=DTYPE), (a,))
    if out.requires_grad:
        def _bw():
            g = out.grad
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            if a.grad is None:
                a.grad = np.zeros_like(a.data)
            a.grad += g  # broadcasts over the reduced axes
        out._backward = _bw
    return out


def tmean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    count = a.data.size if axis is None else np.prod(
        [a.data.shape[ax] for ax in np.atleast_1d(axis)])
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / float(count))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out = _node(a.data.reshape(shape), (a,))
    if out.requires_grad:
        def _bw():
            _accum(a, out.grad.reshape(a.data.shape))
        out._backward = _bw
    return out


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    out = _node(a.data.transpose(axes), (a,))
    if out.requires_grad:
        inverse = tuple(np.argsort(axes))
        def _bw():
            _accum(a, out.grad.transpose(inverse))
        out._backward = _bw
    return out


def concat(tensors, axis: int) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = _node(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors))
    if out.requires_grad:
        sizes = [t.data.shape[axis] for t in tensors]
        offsets = np.cumsum([0] + sizes)
        def _bw():
            for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
                sl = [slice(None)] * out.grad.ndim
                sl[axis] = slice(lo, hi)
                _accum(t, out.grad[tuple(sl)])
        out._backward = _bw
    return out


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup into table by integer ids; gradients scatter-add back."""
    ids = np.asarray(ids)
    out = _node(table.data[ids], (table,))
    if out.requires_grad:
        def _bw():
            g = np.zeros_like(table.data)
            np.add.at(g, ids.reshape(-1), out.grad.reshape(-1, table.data.shape[-1]))
            _accum(table, g)
        out._backward = _bw
    return out


# ---------------------------------------------------------------------------
# linear algebra and neural-net primitives
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.data.shape} x {b.data.shape}")
    out = _node(a.data @ b.data, (a, b))
    if out.requires_grad:
        def _bw():
            g = out.grad
            _accum(a, _unbroadcast(g @ b.data.swapaxes(-1, -2), a.data.shape))
            _accum(b, _unbroadcast(a.data.swapaxes(-1, -2) @ g, b.data.shape))
        out._backward = _bw
    return out


def softmax(a, axis: int) -> Tensor:
    """Max-stabilized softmax along axis; outputs are positive and sum to 1."""
    a = as_tensor(a)
    if not -a.ndim <= axis < a.ndim:
        raise IndexError(f"softmax axis {axis} invalid for shape {a.shape}")
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)
    out = _node(s.astype(DTYPE), (a,))
    if out.requires_grad:
        def _bw():
            g = out.grad
            dot = (g * out.data).sum(axis=axis, keepdims=True)
            _accum(a, out.data * (g - dot))
        out._backward = _bw
    return out


def layer_norm(a, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last dimension to zero mean / unit variance, then affine."""
    a, gamma, beta = as_tensor(a), as_tensor(gamma), as_tensor(beta)
    c = a.data.shape[-1]
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise ShapeError(
            f"layer_norm affine shapes {gamma.data.shape}/{beta.data.shape} "
            f"do not match feature dim {c}")
    if eps <= 0:
        raise ContractError("layer_norm eps must be > 0")
    mu = a.data.mean(axis=-1, keepdims=True, dtype=DTYPE)
    var = ((a.data - mu) ** 2).mean(axis=-1, keepdims=True, dtype=DTYPE)
    inv = 1.0 / np.sqrt(var + DTYPE(eps))
    xhat = (a.data - mu) * inv
    out = _node(xhat * gamma.data + beta.data, (a, gamma, beta))
    if out.requires_grad:
        def _bw():
            g = out.grad
            lead = tuple(range(g.ndim - 1))
            _accum(gamma, (g * xhat).sum(axis=lead))
            _accum(beta, g.sum(axis=lead))
            dxhat = g * gamma.data
            m1 = dxhat.mean(axis=-1, keepdims=True, dtype=DTYPE)
            m2 = (dxhat * xhat).mean(axis=-1, keepdims=True, dtype=DTYPE)
            _accum(a, inv * (dxhat - m1 - xhat * m2))
        out._backward = _bw
    return out


def conv2d(x, w, stride: int = 1, pad: int = 0) -> Tensor:
    """2D cross-correlation with zero padding.

    x: (Cin,H,W) or (N,Cin,H,W); w: (Cout,Cin,kh,kw). Output spatial side
    is floor((H + 2*pad - kh)/stride) + 1.
    """
    x, w = as_tensor(x), as_tensor(w)
    if stride < 1:
        raise ContractError(f"conv2d stride must be >= 1, got {stride}")
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d: bad ranks for shapes {x.data.shape} / {w.data.shape}")
    n, cin, h, wd_ = xd.shape
    cout, cin_w, kh, kw = w.data.shape
    if cin != cin_w:
        raise ShapeError(f"conv2d: input channels {cin} != kernel channels {cin_w}")
    if kh > h + 2 * pad or kw > wd_ + 2 * pad:
        raise ShapeError(
            f"conv2d: kernel {kh}x{kw} larger than padded input "
            f"{h + 2 * pad}x{wd_ + 2 * pad}")
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd_ + 2 * pad - kw) // stride + 1

    if kh == 1 and kw == 1 and stride == 1 and pad == 0:
        return _conv2d_1x1(x, w, squeeze, xd)

    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xd
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]                      # (N,Cin,Ho,Wo,kh,kw)
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(
        n * ho * wo, cin * kh * kw)
    wmat = w.data.reshape(cout, -1)
    res = (cols @ wmat.T).reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)
    out = _node(res[0] if squeeze else res, (x, w))

    if out.requires_grad:
        def _bw():
            g = out.grad[None] if squeeze else out.grad
            gmat = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, cout)
            _accum(w, (gmat.T @ cols).reshape(w.data.shape))
            if not x.requires_grad:
                return
            if stride == 1:
                # dx is the full correlation of g with the flipped kernel
                gp = np.pad(g, ((0, 0), (0, 0), (kh - 1 - pad, kh - 1 - pad),
                                (kw - 1 - pad, kw - 1 - pad)))
                gw = np.lib.stride_tricks.sliding_window_view(gp, (kh, kw), axis=(2, 3))
                gcols = np.ascontiguousarray(gw.transpose(0, 2, 3, 1, 4, 5)).reshape(
                    n * h * wd_, cout * kh * kw)
                wflip = np.ascontiguousarray(
                    w.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)).reshape(
                    cin, cout * kh * kw)
                dx = (gcols @ wflip.T).reshape(n, h, wd_, cin).transpose(0, 3, 1, 2)
            else:
                dcols = (gmat @ wmat).reshape(n, ho, wo, cin, kh, kw)
                dcols = np.ascontiguousarray(dcols.transpose(0, 3, 4, 5, 1, 2))
                dxp = np.zeros((n, cin, h + 2 * pad, wd_ + 2 * pad), dtype=DTYPE)
                for i in range(kh):
                    for j in range(kw):
                        dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                            dcols[:, :, i, j]
                dx = dxp[:, :, pad:pad + h, pad:pad + wd_] if pad else dxp
            _accum(x, dx[0] if squeeze else dx)
        out._backward = _bw
    return out


def _conv2d_1x1(x: Tensor, w: Tensor, squeeze: bool, xd: np.ndarray) -> Tensor:
    """Pointwise convolution as a single channel-mixing matmul."""
    n, cin, h, wd_ = xd.shape
    cout = w.data.shape[0]
    wmat = w.data.reshape(cout, cin)
    res = np.einsum("oc,nchw->nohw", wmat, xd, optimize=True)
    out = _node(res[0] if squeeze else res, (x, w))
    if out.requires_grad:
        def _bw():
            g = out.grad[None] if squeeze else out.grad
            _accum(w, np.einsum("nohw,nchw->oc", g, xd, optimize=True).reshape(w.data.shape))
            dx = np.einsum("oc,nohw->nchw", wmat, g, optimize=True)
            _accum(x, dx[0] if squeeze else dx)
        out._backward = _bw
    return out


def upsample_nearest2x(x) -> Tensor:
    """Replicate each pixel into a 2x2 block; (..,C,H,W) -> (..,C,2H,2W)."""
    x = as_tensor(x)
    if x.ndim not in (3, 4):
        raise ShapeError(f"upsample_nearest2x expects (C,H,W) or (N,C,H,W), got {x.shape}")
    out = _node(x.data.repeat(2, axis=-2).repeat(2, axis=-1), (x,))
    if out.requires_grad:
        def _bw():
            g = out.grad
            h2, w2 = g.shape[-2], g.shape[-1]
            g = g.reshape(g.shape[:-2] + (h2 // 2, 2, w2 // 2, 2))
            _accum(x, g.sum(axis=(-1, -3), dtype=DTYPE))
        out._backward = _bw
    return out


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

@dataclass
class CheckEntry:
    name: str
    max_rel_err: float
    ok: bool
    skipped: int = 0


@dataclass
class CheckReport:
    tol: float
    eps: float
    entries: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(e.ok for e in self.entries)

    @property
    def max_rel_err(self) -> float:
        return max((e.max_rel_err for e in self.entries), default=0.0)


def _rel_err(a: float, n: float) -> float:
    # relative for O(1)-and-above gradients, absolute below that scale
    return abs(a - n) / max(abs(a), abs(n), 1.0)


def grad_check(f, params, eps: float = 1e-3, tol: float = 1e-3,
               names=None, samples_per_param=None, rng=None) -> CheckReport:
    """Compare analytic gradients of the scalar f() against central differences.

    Elements failing at the base eps are re-probed at eps/2 and 2*eps: a
    match at any step size passes, and probes whose numeric estimate is
    unstable across step sizes straddle a ReLU kink and are skipped (a
    wrong analytic gradient disagrees at every step size and still fails).
    samples_per_param limits how many elements of each parameter are probed
    (deterministically chosen via rng); None probes all of them.
    """
    params = list(params)
    if names is None:
        names = [f"param{i}{list(p.shape)}" for i, p in enumerate(params)]

    def eval_f() -> float:
        loss = f()
        if loss.data.size != 1:
            raise ContractError("grad_check target must be scalar")
        if not np.isfinite(loss.data).all():
            raise NumericError("grad_check: non-finite loss value")
        return float(loss.data)

    for p in params:
        p.grad = None
    loss = f()
    if not np.isfinite(loss.data).all():
        raise NumericError("grad_check: non-finite loss value")
    backward(loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy()
                for p in params]

    report = CheckReport(tol=tol, eps=eps)
    for name, p, a in zip(names, params, analytic):
        flat = p.data.reshape(-1)
        aflat = a.reshape(-1)
        if samples_per_param is None or flat.size <= samples_per_param:
            indices = range(flat.size)
        else:
            picker = rng if rng is not None else np.random.default_rng(0)
            if isinstance(picker, np.random.Generator):
                indices = picker.choice(flat.size, samples_per_param, replace=False)
            else:
                chosen = set()
                while len(chosen) < samples_per_param:
                    chosen.add(picker.randint(0, flat.size - 1))
                indices = sorted(chosen)

        def central(i: int, step: float) -> float:
            orig = flat[i]
            plus = DTYPE(orig + step)
            minus = DTYPE(orig - step)
            flat[i] = plus
            f_plus = eval_f()
            flat[i] = minus
            f_minus = eval_f()
            flat[i] = orig
            return (f_plus - f_minus) / float(plus - minus)

        worst = 0.0
        skipped = 0
        for i in indices:
            ana = float(aflat[i])
            base = central(i, eps)
            err = _rel_err(ana, base)
            if err < tol:
                worst = max(worst, err)
                continue
            others = [central(i, eps * s) for s in (0.5, 2.0, 0.25, 0.125)]
            errs = [err] + [_rel_err(ana, n) for n in others]
            if min(errs) < tol:
                worst = max(worst, min(errs))
                continue
            estimates = [base] + others
            spread = max(_rel_err(x, y) for x in estimates for y in estimates)
            if spread > tol:
                skipped += 1
                continue
            worst = max(worst, min(errs))
        report.entries.append(CheckEntry(name=name, max_rel_err=worst,
                                         ok=worst < tol, skipped=skipped))
    return report


def zero_grads(params) -> None:
    for p in params:
        p.grad = None


def identity(n: int) -> Tensor:
    return Tensor(np.eye(n, dtype=DTYPE))
