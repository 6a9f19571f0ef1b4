"""Dense float64 tensors with a reverse-mode autodiff tape.

All arithmetic is float64 and single threaded, so forward and backward
passes are bit-reproducible for a fixed input. Operations record onto the
currently active :class:`Tape`; outside a tape they are plain forward
evaluations.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "NonFiniteError",
    "TapeError",
    "add",
    "add_bias",
    "scale",
    "mul",
    "matmul",
    "reshape",
    "conv2d",
    "mean_pool2d",
    "batch_norm",
    "relu",
    "gelu",
    "elementwise_poly",
    "max_abs",
    "maximum",
    "sqrt",
    "cross_entropy",
    "grad",
]

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class ShapeError(ValueError):
    """Operand shapes do not satisfy an operation's contract."""


class NonFiniteError(FloatingPointError):
    """A forward pass produced a NaN or infinity."""


class TapeError(RuntimeError):
    """Gradient requested for a tensor that is not connected to the tape."""


class Tensor:
    """A dense float64 array. Values are never mutated by operations."""

    __slots__ = ("data", "_tape", "_tid")

    def __init__(self, data):
        self.data = np.asarray(data, dtype=np.float64)
        self._tape = None
        self._tid = -1

    @property
    def dims(self) -> list[int]:
        return list(self.data.shape)

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(dims={self.dims})"


class _Record:
    __slots__ = ("op", "in_ids", "out_id", "backward")

    def __init__(self, op, in_ids, out_id, backward):
        self.op = op
        self.in_ids = in_ids
        self.out_id = out_id
        self.backward = backward


_ACTIVE_TAPE: "Tape | None" = None


class Tape:
    """Ordered record of primitive operations for reverse-mode replay.

    Records are appended in execution order, so every record's inputs are
    produced by strictly earlier records (or are leaves). ``grad`` walks the
    records once, in reverse.
    """

    def __init__(self):
        self.records: list[_Record] = []
        self._next_id = 0

    def __enter__(self):
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise TapeError("a tape is already active; tapes do not nest")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, *exc):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None
        return False

    def _register(self, t: Tensor) -> int:
        if t._tape is not self:
            t._tape = self
            t._tid = self._next_id
            self._next_id += 1
        return t._tid

    def _record(self, op, inputs, output, backward):
        in_ids = tuple(self._register(t) for t in inputs)
        out_id = self._register(output)
        self.records.append(_Record(op, in_ids, out_id, backward))

    def grad(self, loss: Tensor, params: list[Tensor]) -> list[Tensor]:
        """Gradient of a scalar loss with respect to each parameter.

        Every record is visited exactly once, in reverse execution order.
        Raises TapeError for parameters that never touched this tape.
        """
        if loss._tape is not self:
            raise TapeError("loss tensor was not produced under this tape")
        if loss.size != 1:
            raise ShapeError(f"loss must be scalar, got dims {loss.dims}")
        for p in params:
            if p._tape is not self:
                raise TapeError("parameter not on tape")
        grads: dict[int, np.ndarray] = {loss._tid: np.ones_like(loss.data)}
        for rec in reversed(self.records):
            g_out = grads.get(rec.out_id)
            if g_out is None:
                continue
            for in_id, g_in in zip(rec.in_ids, rec.backward(g_out)):
                if g_in is None:
                    continue
                acc = grads.get(in_id)
                grads[in_id] = g_in if acc is None else acc + g_in
        out = []
        for p in params:
            g = grads.get(p._tid)
            if g is None:
                g = np.zeros_like(p.data)
            out.append(Tensor(g))
        return out


def grad(loss: Tensor, params: list[Tensor]) -> list[Tensor]:
    """Convenience wrapper for ``loss`` produced under a tape."""
    if loss._tape is None:
        raise TapeError("loss tensor was not produced under any tape")
    return loss._tape.grad(loss, params)


def _finish(op: str, inputs: tuple, data: np.ndarray, backward) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite values in output of {op}")
    out = Tensor(data)
    if _ACTIVE_TAPE is not None:
        _ACTIVE_TAPE._record(op, inputs, out, backward)
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.dims != b.dims:
        raise ShapeError(f"add requires identical dims, got {a.dims} and {b.dims}")
    return _finish("add", (a, b), a.data + b.data, lambda g: (g, g))


def add_bias(x: Tensor, b: Tensor, axis: int = 1) -> Tensor:
    """Add a 1-D bias broadcast along ``axis`` of x."""
    x, b = _as_tensor(x), _as_tensor(b)
    if b.data.ndim != 1 or x.data.shape[axis] != b.data.shape[0]:
        raise ShapeError(f"bias of dims {b.dims} does not match axis {axis} of {x.dims}")
    shape = [1] * x.data.ndim
    shape[axis] = b.data.shape[0]
    reduce_axes = tuple(i for i in range(x.data.ndim) if i != axis)

    def backward(g):
        return g, g.sum(axis=reduce_axes)

    return _finish("add_bias", (x, b), x.data + b.data.reshape(shape), backward)


def scale(x: Tensor, a: float) -> Tensor:
    """Multiply by a plaintext scalar constant (not differentiated in a)."""
    x = _as_tensor(x)
    a = float(a)
    return _finish("scale", (x,), x.data * a, lambda g: (g * a,))


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.dims != b.dims:
        raise ShapeError(f"mul requires identical dims, got {a.dims} and {b.dims}")
    ad, bd = a.data, b.data
    return _finish("mul", (a, b), ad * bd, lambda g: (g * bd, g * ad))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul dims mismatch: {a.dims} @ {b.dims}")
    ad, bd = a.data, b.data
    return _finish("matmul", (a, b), ad @ bd, lambda g: (g @ bd.T, ad.T @ g))


def reshape(x: Tensor, dims) -> Tensor:
    x = _as_tensor(x)
    dims = tuple(int(d) for d in dims)
    old = x.data.shape
    try:
        data = x.data.reshape(dims)
    except ValueError as e:
        raise ShapeError(str(e)) from None
    return _finish("reshape", (x,), data, lambda g: (g.reshape(old),))


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D convolution (cross-correlation), NCHW input and FCHW kernel."""
    x, w = _as_tensor(x), _as_tensor(w)
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and kernel, got {x.dims}, {w.dims}")
    bsz, cin, h, wd = x.data.shape
    cout, cin_w, kh, kw = w.data.shape
    if cin != cin_w:
        raise ShapeError(f"conv2d channel mismatch: input {cin}, kernel {cin_w}")
    s, p = int(stride), int(padding)
    oh = (h + 2 * p - kh) // s + 1
    ow = (wd + 2 * p - kw) // s + 1
    if oh <= 0 or ow <= 0:
        raise ShapeError(f"conv2d output would be empty for input {x.dims}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    wd_ = w.data
    out = np.zeros((bsz, cout, oh, ow))
    for i in range(kh):
        for j in range(kw):
            xs = xp[:, :, i : i + s * oh : s, j : j + s * ow : s]
            out += np.einsum("fc,bchw->bfhw", wd_[:, :, i, j], xs, optimize=True)

    def backward(g):
        gx_p = np.zeros_like(xp)
        gw = np.zeros_like(wd_)
        for i in range(kh):
            for j in range(kw):
                xs = xp[:, :, i : i + s * oh : s, j : j + s * ow : s]
                gw[:, :, i, j] = np.einsum("bfhw,bchw->fc", g, xs, optimize=True)
                gx_p[:, :, i : i + s * oh : s, j : j + s * ow : s] += np.einsum(
                    "fc,bfhw->bchw", wd_[:, :, i, j], g, optimize=True
                )
        gx = gx_p[:, :, p : p + h, p : p + wd] if p else gx_p
        return gx, gw

    return _finish("conv2d", (x, w), out, backward)


def mean_pool2d(x: Tensor, kernel: int) -> Tensor:
    """Non-overlapping mean pooling; spatial dims must divide by kernel."""
    x = _as_tensor(x)
    if x.data.ndim != 4:
        raise ShapeError(f"mean_pool2d expects 4-D input, got {x.dims}")
    k = int(kernel)
    bsz, c, h, w = x.data.shape
    if h % k or w % k:
        raise ShapeError(f"spatial dims {h}x{w} not divisible by kernel {k}")
    oh, ow = h // k, w // k
    data = x.data.reshape(bsz, c, oh, k, ow, k).mean(axis=(3, 5))

    def backward(g):
        ge = np.broadcast_to(g[:, :, :, None, :, None], (bsz, c, oh, k, ow, k))
        return (ge.reshape(bsz, c, h, w) / (k * k),)

    return _finish("mean_pool2d", (x,), data, backward)


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool = False,
    eps: float = 1e-5,
    momentum: float = 0.1,
) -> Tensor:
    """Batch normalization over the channel axis (axis 1 for 4-D, axis 1 for 2-D).

    In training mode the biased batch statistics normalize the batch and the
    running buffers are updated in place; in eval mode the frozen buffers are
    used. Running buffers are plain arrays and carry no gradient.
    """
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    nd = x.data.ndim
    if nd not in (2, 4):
        raise ShapeError(f"batch_norm expects 2-D or 4-D input, got {x.dims}")
    c = x.data.shape[1]
    if gamma.dims != [c] or beta.dims != [c]:
        raise ShapeError("gamma/beta dims must match channel count")
    axes = (0,) if nd == 2 else (0, 2, 3)
    shape = (1, c) if nd == 2 else (1, c, 1, 1)
    if training:
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * var
    else:
        mean = running_mean
        var = running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean.reshape(shape)) * inv_std.reshape(shape)
    data = gamma.data.reshape(shape) * xhat + beta.data.reshape(shape)
    m = x.data.size // c

    def backward(g):
        g_beta = g.sum(axis=axes)
        g_gamma = (g * xhat).sum(axis=axes)
        g_xhat = g * gamma.data.reshape(shape)
        if training:
            gx = (
                g_xhat
                - g_xhat.mean(axis=axes).reshape(shape)
                - xhat * (g_xhat * xhat).mean(axis=axes).reshape(shape)
            ) * inv_std.reshape(shape)
        else:
            gx = g_xhat * inv_std.reshape(shape)
        return gx, g_gamma, g_beta

    return _finish("batch_norm", (x, gamma, beta), data, backward)


def relu(x: Tensor) -> Tensor:
    """max(x, 0); the adjoint at exactly 0 is the subgradient 0."""
    x = _as_tensor(x)
    mask = x.data > 0.0
    return _finish("relu", (x,), np.where(mask, x.data, 0.0), lambda g: (g * mask,))


def gelu(x: Tensor) -> Tensor:
    """x * Phi(x) with the exact Gaussian CDF via erf."""
    x = _as_tensor(x)
    xd = x.data
    phi_cdf = 0.5 * (1.0 + erf(xd * _INV_SQRT2))
    data = xd * phi_cdf

    def backward(g):
        pdf = np.exp(-0.5 * xd * xd) * _INV_SQRT_2PI
        return (g * (phi_cdf + xd * pdf),)

    return _finish("gelu", (x,), data, backward)


def elementwise_poly(x: Tensor, coeffs) -> Tensor:
    """Evaluate a polynomial elementwise by Horner's rule.

    ``coeffs`` are monomial coefficients in ascending order and are treated
    as constants (no gradient flows to them).
    """
    x = _as_tensor(x)
    c = np.asarray(coeffs, dtype=np.float64).reshape(-1)
    if c.size == 0:
        raise ValueError("elementwise_poly requires at least one coefficient")
    xd = x.data
    acc = np.full_like(xd, c[-1])
    for k in range(c.size - 2, -1, -1):
        acc = acc * xd + c[k]
    if c.size >= 2:
        dacc = np.full_like(xd, c[-1] * (c.size - 1))
        for k in range(c.size - 2, 0, -1):
            dacc = dacc * xd + c[k] * k
    else:
        dacc = np.zeros_like(xd)
    return _finish("elementwise_poly", (x,), acc, lambda g: (g * dacc,))


def max_abs(x: Tensor) -> Tensor:
    """Scalar max of |x|; the subgradient routes to the first maximal entry."""
    x = _as_tensor(x)
    flat = np.abs(x.data.reshape(-1))
    idx = int(np.argmax(flat))
    val = flat[idx]
    sign = float(np.sign(x.data.reshape(-1)[idx]))

    def backward(g):
        gx = np.zeros_like(x.data).reshape(-1)
        gx[idx] = sign * float(g)
        return (gx.reshape(x.data.shape),)

    return _finish("max_abs", (x,), np.asarray(val), backward)


def maximum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise max; ties route the subgradient to the first argument."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.dims != b.dims:
        raise ShapeError(f"maximum requires identical dims, got {a.dims} and {b.dims}")
    take_a = a.data >= b.data
    return _finish(
        "maximum",
        (a, b),
        np.where(take_a, a.data, b.data),
        lambda g: (g * take_a, g * ~take_a),
    )


def sqrt(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    if np.any(x.data < 0.0):
        raise ValueError("sqrt of negative value")
    root = np.sqrt(x.data)

    def backward(g):
        return (g * 0.5 / np.maximum(root, 1e-300),)

    return _finish("sqrt", (x,), root, backward)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy over the batch; labels are class indices."""
    logits = _as_tensor(logits)
    if logits.data.ndim != 2:
        raise ShapeError(f"cross_entropy expects 2-D logits, got {logits.dims}")
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    bsz, k = logits.data.shape
    if labels.shape[0] != bsz:
        raise ShapeError(f"{labels.shape[0]} labels for batch of {bsz}")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError("label index out of range")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    ez = np.exp(z)
    probs = ez / ez.sum(axis=1, keepdims=True)
    nll = -(z[np.arange(bsz), labels] - np.log(ez.sum(axis=1)))
    data = np.asarray(nll.mean())

    def backward(g):
        gx = probs.copy()
        gx[np.arange(bsz), labels] -= 1.0
        return (gx * (float(g) / bsz),)

    return _finish("cross_entropy", (logits,), data, backward)
