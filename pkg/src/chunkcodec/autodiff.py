"""Minimal reverse-mode autodiff over dense float64 arrays.

A ``Tensor`` doubles as a node in a define-by-run compute graph: it carries
the cached forward value, references to its parent nodes, and a closure that
propagates gradients to those parents. Graphs are rebuilt on every forward
pass and traversed once, in reverse topological order, by ``backward``.

Only the operations the chunk codec needs are provided; there is no
general broadcasting beyond bias addition, no GPU path, and no fusion.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

__all__ = [
    "Tensor",
    "DimensionError",
    "GraphError",
    "add",
    "sub",
    "mul",
    "linear",
    "conv1d",
    "conv1d_transpose",
    "avg_pool1d",
    "crop_time",
    "relu",
    "gelu",
    "softmax",
    "tensor_sum",
    "tensor_mean",
    "reshape",
    "mse_loss",
    "cross_entropy_with_logits",
    "straight_through",
]

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible; names the offending axes."""


class GraphError(RuntimeError):
    """Raised on compute-graph contract violations (e.g. non-scalar loss)."""


class Tensor:
    """Dense float64 array plus graph bookkeeping.

    ``data`` is the cached forward value (always a C-contiguous float64
    ndarray), ``grad`` the accumulated gradient of the same shape, filled in
    by ``backward``. Leaf tensors created with ``requires_grad=True`` are
    trainable parameters.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None, _op="leaf"):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backward = _backward
        self._op = _op

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self._op!r})"

    def detach(self) -> "Tensor":
        """Copy of the value, cut out of the graph."""
        return Tensor(self.data.copy(), _op="detach")

    def zero_grad(self):
        self.grad = None

    # Operators cover the scalar/elementwise algebra the losses need.
    def __add__(self, other):
        return add(self, _as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    __rmul__ = __mul__

    def backward(self):
        """Reverse-mode sweep from a scalar loss node.

        Visits every node exactly once (topological order), accumulating
        gradients into ``grad``. Raises ``GraphError`` if this tensor is not
        a scalar.
        """
        if self.data.size != 1:
            raise GraphError(f"backward requires a scalar loss, got shape {self.data.shape}")

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        # Iterative DFS: deep graphs (long training chains) must not hit the
        # Python recursion limit.
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))

        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _accumulate(t: Tensor, g: np.ndarray):
    if t.grad is None:
        t.grad = g.astype(np.float64, copy=True)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


def _require_same_shape(op: str, a: Tensor, b: Tensor):
    if a.data.shape != b.data.shape:
        raise DimensionError(f"{op}: shape {a.data.shape} vs {b.data.shape}")


# ---------------------------------------------------------------- arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data + b.data, _parents=(a, b), _op="add")

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(g, b.data.shape))

    out._backward = backward
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data - b.data, _parents=(a, b), _op="sub")

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(-g, b.data.shape))

    out._backward = backward
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data * b.data, _parents=(a, b), _op="mul")

    def backward(g):
        _accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.data.shape))

    out._backward = backward
    return out


def reshape(x: Tensor, shape) -> Tensor:
    out = Tensor(x.data.reshape(shape), _parents=(x,), _op="reshape")

    def backward(g):
        _accumulate(x, g.reshape(x.data.shape))

    out._backward = backward
    return out


# ------------------------------------------------------------------- layers


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map over the trailing axis: ``y = x @ weight.T + bias``.

    ``x`` is (..., Din), ``weight`` (Dout, Din), ``bias`` (Dout,).
    """
    dout, din = weight.data.shape
    if x.data.shape[-1] != din:
        raise DimensionError(
            f"linear: input trailing axis {x.data.shape[-1]} != weight Din {din}"
        )
    if bias.data.shape != (dout,):
        raise DimensionError(f"linear: bias shape {bias.data.shape} != ({dout},)")
    out = Tensor(x.data @ weight.data.T + bias.data, _parents=(x, weight, bias), _op="linear")

    def backward(g):
        g2 = g.reshape(-1, dout)
        x2 = x.data.reshape(-1, din)
        _accumulate(x, (g @ weight.data).reshape(x.data.shape))
        _accumulate(weight, g2.T @ x2)
        _accumulate(bias, g2.sum(axis=0))

    out._backward = backward
    return out


def _conv_geometry(length: int, k: int, stride: int, padding: str) -> tuple[int, int]:
    if padding == "causal":
        pad = k - 1
    elif padding == "valid":
        pad = 0
    else:
        raise ValueError(f"unknown padding {padding!r} (use 'causal' or 'valid')")
    if length + pad < k:
        raise DimensionError(
            f"conv1d: kernel {k} longer than padded input {length + pad} on the time axis"
        )
    return pad, (length + pad - k) // stride + 1


def conv1d(x: Tensor, kernels: Tensor, bias: Tensor, stride: int = 1,
           padding: str = "causal") -> Tensor:
    """Temporal convolution.

    ``x`` is (L, Cin) or batched (B, L, Cin); ``kernels`` (Cout, Cin, k).
    Causal padding pads k-1 zeros on the left only, so output t sees inputs
    <= t and the length is preserved at stride 1.
    """
    if stride < 1:
        raise ValueError("conv1d: stride must be >= 1")
    batched = x.data.ndim == 3
    if not batched and x.data.ndim != 2:
        raise DimensionError(f"conv1d: input must be (L, Cin) or (B, L, Cin), got {x.data.shape}")
    xd = x.data if batched else x.data[None]
    nbatch, length, cin = xd.shape
    cout, cin_k, k = kernels.data.shape
    if cin_k != cin:
        raise DimensionError(f"conv1d: input channel axis {cin} != kernel Cin axis {cin_k}")
    if bias.data.shape != (cout,):
        raise DimensionError(f"conv1d: bias shape {bias.data.shape} != ({cout},)")
    pad, lout = _conv_geometry(length, k, stride, padding)

    xp = np.pad(xd, ((0, 0), (pad, 0), (0, 0)))
    # sliding_window_view appends the window axis last, so
    # cols[b, t, c, j] = xp[b, stride*t + j, c] and both cols and the kernel
    # flatten their (Cin, k) tail in the same C order.
    cols = sliding_window_view(xp, k, axis=1)[:, ::stride]
    cols2 = np.ascontiguousarray(cols).reshape(nbatch, lout, cin * k)
    wt = kernels.data.reshape(cout, cin * k)
    out_data = cols2 @ wt.T + bias.data
    if not batched:
        out_data = out_data[0]
    out = Tensor(out_data, _parents=(x, kernels, bias), _op="conv1d")

    def backward(g):
        g3 = g if batched else g[None]
        g2 = g3.reshape(-1, cout)
        _accumulate(kernels, (g2.T @ cols2.reshape(-1, cin * k)).reshape(cout, cin, k))
        _accumulate(bias, g2.sum(axis=0))
        gcols = (g3 @ wt).reshape(nbatch, lout, cin, k)
        gxp = np.zeros_like(xp)
        for j in range(k):
            gxp[:, j : j + stride * lout : stride, :] += gcols[:, :, :, j]
        gx = gxp[:, pad:, :]
        _accumulate(x, gx if batched else gx[0])

    out._backward = backward
    return out


def conv1d_transpose(x: Tensor, kernels: Tensor, bias: Tensor, stride: int) -> Tensor:
    """Transposed temporal convolution (upsampling by ``stride``).

    ``x`` is (B, T, Cin) or (T, Cin); ``kernels`` (Cin, Cout, k) with k >=
    stride so every output position is covered. Output length is
    (T-1)*stride + k.
    """
    batched = x.data.ndim == 3
    if not batched and x.data.ndim != 2:
        raise DimensionError(
            f"conv1d_transpose: input must be (T, Cin) or (B, T, Cin), got {x.data.shape}"
        )
    xd = x.data if batched else x.data[None]
    nbatch, tin, cin = xd.shape
    cin_k, cout, k = kernels.data.shape
    if cin_k != cin:
        raise DimensionError(
            f"conv1d_transpose: input channel axis {cin} != kernel Cin axis {cin_k}"
        )
    if stride < 1 or k < stride:
        raise ValueError("conv1d_transpose: need 1 <= stride <= kernel size")
    lout = (tin - 1) * stride + k
    out_data = np.zeros((nbatch, lout, cout))
    for j in range(k):
        out_data[:, j : j + stride * tin : stride, :] += xd @ kernels.data[:, :, j]
    out_data += bias.data
    if not batched:
        out_data = out_data[0]
    out = Tensor(out_data, _parents=(x, kernels, bias), _op="conv1d_transpose")

    def backward(g):
        g3 = g if batched else g[None]
        gx = np.zeros_like(xd)
        gw = np.zeros_like(kernels.data)
        for j in range(k):
            gslice = g3[:, j : j + stride * tin : stride, :]
            gx += gslice @ kernels.data[:, :, j].T
            gw[:, :, j] = xd.reshape(-1, cin).T @ gslice.reshape(-1, cout)
        _accumulate(x, gx if batched else gx[0])
        _accumulate(kernels, gw)
        _accumulate(bias, g3.reshape(-1, cout).sum(axis=0))

    out._backward = backward
    return out


def avg_pool1d(x: Tensor, factor: int) -> Tensor:
    """Temporal average pooling with a partial final window.

    (B, N, C) -> (B, ceil(N/factor), C); the last window averages over
    however many frames remain.
    """
    if factor < 1:
        raise ValueError("avg_pool1d: factor must be >= 1")
    batched = x.data.ndim == 3
    xd = x.data if batched else x.data[None]
    nbatch, length, channels = xd.shape
    nout = -(-length // factor)
    out_data = np.empty((nbatch, nout, channels))
    full = length // factor
    if full:
        out_data[:, :full] = xd[:, : full * factor].reshape(nbatch, full, factor, channels).mean(axis=2)
    if nout > full:
        out_data[:, full] = xd[:, full * factor :].mean(axis=1)
    if not batched:
        out_data = out_data[0]
    out = Tensor(out_data, _parents=(x,), _op="avg_pool1d")

    def backward(g):
        g3 = g if batched else g[None]
        gx = np.empty_like(xd)
        if full:
            gx[:, : full * factor] = np.repeat(g3[:, :full] / factor, factor, axis=1)
        if nout > full:
            tail = length - full * factor
            gx[:, full * factor :] = np.repeat(g3[:, full:] / tail, tail, axis=1)
        _accumulate(x, gx if batched else gx[0])

    out._backward = backward
    return out


def crop_time(x: Tensor, length: int) -> Tensor:
    """Keep the first ``length`` frames of the time axis."""
    batched = x.data.ndim == 3
    current = x.data.shape[1] if batched else x.data.shape[0]
    if length > current:
        raise DimensionError(f"crop_time: cannot crop {current} frames to {length}")
    out_data = x.data[:, :length] if batched else x.data[:length]
    out = Tensor(out_data, _parents=(x,), _op="crop_time")

    def backward(g):
        gx = np.zeros_like(x.data)
        if batched:
            gx[:, :length] = g
        else:
            gx[:length] = g
        _accumulate(x, gx)

    out._backward = backward
    return out


# -------------------------------------------------------------- activations


def relu(x: Tensor) -> Tensor:
    out = Tensor(np.maximum(x.data, 0.0), _parents=(x,), _op="relu")

    def backward(g):
        _accumulate(x, g * (x.data > 0))

    out._backward = backward
    return out


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    out = Tensor(x.data * cdf, _parents=(x,), _op="gelu")

    def backward(g):
        pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT2PI
        _accumulate(x, g * (cdf + x.data * pdf))

    out._backward = backward
    return out


def softmax(x: Tensor) -> Tensor:
    """Softmax over the trailing axis."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(s, _parents=(x,), _op="softmax")

    def backward(g):
        _accumulate(x, s * (g - (g * s).sum(axis=-1, keepdims=True)))

    out._backward = backward
    return out


# ------------------------------------------------------------------- losses


def tensor_sum(x: Tensor) -> Tensor:
    out = Tensor(x.data.sum(), _parents=(x,), _op="sum")

    def backward(g):
        _accumulate(x, np.full_like(x.data, float(g)))

    out._backward = backward
    return out


def tensor_mean(x: Tensor) -> Tensor:
    n = x.data.size
    out = Tensor(x.data.mean(), _parents=(x,), _op="mean")

    def backward(g):
        _accumulate(x, np.full_like(x.data, float(g) / n))

    out._backward = backward
    return out


def mse_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean squared error over all entries."""
    target = _as_tensor(target)
    _require_same_shape("mse_loss", pred, target)
    diff = pred.data - target.data
    n = diff.size
    out = Tensor(np.array((diff * diff).mean()), _parents=(pred, target), _op="mse")

    def backward(g):
        scale = 2.0 * float(g) / n
        _accumulate(pred, scale * diff)
        _accumulate(target, -scale * diff)

    out._backward = backward
    return out


def cross_entropy_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean cross-entropy of integer ``targets`` under trailing-axis softmax.

    ``logits`` is (..., K); ``targets`` an integer array of the leading
    shape. Uses the log-sum-exp form for stability.
    """
    targets = np.asarray(targets)
    if targets.shape != logits.data.shape[:-1]:
        raise DimensionError(
            f"cross_entropy: target shape {targets.shape} != logit groups {logits.data.shape[:-1]}"
        )
    k = logits.data.shape[-1]
    z2 = logits.data.reshape(-1, k)
    t1 = targets.reshape(-1)
    if t1.size and (t1.min() < 0 or t1.max() >= k):
        raise IndexError(f"cross_entropy: target index out of range [0, {k})")
    m = z2.max(axis=-1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(z2 - m).sum(axis=-1))
    picked = z2[np.arange(t1.size), t1]
    n = t1.size
    out = Tensor(np.array((lse - picked).mean()), _parents=(logits,), _op="cross_entropy")

    def backward(g):
        p = np.exp(z2 - m)
        p /= p.sum(axis=-1, keepdims=True)
        p[np.arange(n), t1] -= 1.0
        _accumulate(logits, (float(g) / n) * p.reshape(logits.data.shape))

    out._backward = backward
    return out


def straight_through(latent: Tensor, quantized) -> Tensor:
    """Forward the quantized value, route gradients to the latent unchanged.

    The forward value is a bitwise copy of ``quantized`` (no a+(q-a)
    arithmetic, which would not be exact in floating point); the backward
    rule is the identity Jacobian into ``latent``.
    """
    qdata = quantized.data if isinstance(quantized, Tensor) else np.asarray(quantized, dtype=np.float64)
    if qdata.shape != latent.data.shape:
        raise DimensionError(
            f"straight_through: quantized shape {qdata.shape} != latent shape {latent.data.shape}"
        )
    out = Tensor(qdata.copy(), _parents=(latent,), _op="straight_through")

    def backward(g):
        _accumulate(latent, g)

    out._backward = backward
    return out
