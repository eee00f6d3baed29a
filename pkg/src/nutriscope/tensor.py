"""Dense tensor engine with reverse-mode differentiation.

Numpy holds the data; this module owns the graph. Every operation builds an
output tensor that remembers its inputs and a closure propagating the output
gradient back to them. ``backward()`` on a scalar runs the closures in reverse
topological order.

Contracts kept deliberately narrow:
  * float32 or float64 only, no mixed-dtype graphs;
  * broadcasting is limited to scalars, per-sample statistics and channel
    vectors (gradients are summed back over broadcast axes);
  * gradient accumulation on leaves is additive until ``zero_grad`` resets it.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError, DegenerateInputError, DimensionError, NumericError

_FLOAT_DTYPES = (np.float32, np.float64)


def _as_array(data, dtype=None):
    arr = np.asarray(data)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if arr.dtype not in _FLOAT_DTYPES:
        return arr.astype(np.float64)
    return arr


class Tensor:
    """N-dimensional real array, optionally participating in differentiation."""

    __slots__ = ("data", "grad", "requires_grad", "_backward", "_prev")

    def __init__(self, data, requires_grad=False, dtype=None):
        self.data = _as_array(data, dtype)
        if any(s < 0 for s in self.data.shape):
            raise DimensionError(f"negative extent in shape {self.data.shape}")
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._backward = None
        self._prev = ()

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data.reshape(-1)[0])

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def check_finite(self, what="tensor"):
        if not np.all(np.isfinite(self.data)):
            raise NumericError(f"{what} contains non-finite values")
        return self

    def backward(self):
        """Propagate gradients from this scalar to every reachable leaf.

        Leaf gradients accumulate additively across calls; intermediate
        gradients are rebuilt each call.
        """
        if self.data.size != 1:
            raise ContractError(
                f"backward requires a scalar, got shape {self.data.shape}"
            )
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._prev:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
        for node in topo:
            if node._prev:
                node.grad = None
        seed = np.ones_like(self.data)
        self.grad = seed if self.grad is None else self.grad + seed
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar -------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_coerce(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag})"

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def transpose(self, axes):
        return transpose(self, axes)


def constant(data, dtype=None):
    return Tensor(data, requires_grad=False, dtype=dtype)


def _coerce(value, like):
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.data.dtype))


def _make(data, parents, backward):
    out = Tensor(data)
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._prev = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad, shape):
    """Sum a gradient back down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(
        i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1
    )
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _accumulate(tensor, grad):
    if tensor.requires_grad:
        g = _unbroadcast(grad, tensor.data.shape)
        tensor.grad = g if tensor.grad is None else tensor.grad + g


# -- elementwise arithmetic ---------------------------------------------


def add(a, b):
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = _coerce(b, a)

    def backward(g):
        _accumulate(a, g)
        _accumulate(b, g)

    return _make(a.data + b.data, (a, b), backward)


def sub(a, b):
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = _coerce(b, a)

    def backward(g):
        _accumulate(a, g)
        _accumulate(b, -g)

    return _make(a.data - b.data, (a, b), backward)


def mul(a, b):
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = _coerce(b, a)

    def backward(g):
        _accumulate(a, g * b.data)
        _accumulate(b, g * a.data)

    return _make(a.data * b.data, (a, b), backward)


hadamard = mul


def div(a, b):
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = _coerce(b, a)

    def backward(g):
        _accumulate(a, g / b.data)
        _accumulate(b, -g * a.data / (b.data * b.data))

    return _make(a.data / b.data, (a, b), backward)


def neg(a):
    def backward(g):
        _accumulate(a, -g)

    return _make(-a.data, (a,), backward)


def scale_shift(x, scale, shift):
    """x -> scale * x + shift with python-number coefficients."""
    s = x.data.dtype.type(scale)
    c = x.data.dtype.type(shift)

    def backward(g):
        _accumulate(x, g * s)

    return _make(s * x.data + c, (x,), backward)


def relu(x):
    mask = x.data > 0

    def backward(g):
        _accumulate(x, g * mask)

    return _make(np.where(mask, x.data, 0), (x,), backward)


def sigmoid(x):
    d = x.data
    out = np.where(d >= 0, 1.0 / (1.0 + np.exp(-np.abs(d))), np.exp(-np.abs(d)) / (1.0 + np.exp(-np.abs(d))))

    def backward(g):
        _accumulate(x, g * out * (1.0 - out))

    return _make(out, (x,), backward)


def softplus(x):
    d = x.data
    out = np.log1p(np.exp(-np.abs(d))) + np.maximum(d, 0)
    sig = np.where(d >= 0, 1.0 / (1.0 + np.exp(-np.abs(d))), np.exp(-np.abs(d)) / (1.0 + np.exp(-np.abs(d))))

    def backward(g):
        _accumulate(x, g * sig)

    return _make(out, (x,), backward)


def exp(x):
    out = np.exp(x.data)

    def backward(g):
        _accumulate(x, g * out)

    return _make(out, (x,), backward)


def log(x):
    if np.any(x.data <= 0):
        raise DegenerateInputError("log requires strictly positive input")

    def backward(g):
        _accumulate(x, g / x.data)

    return _make(np.log(x.data), (x,), backward)


def absolute(x):
    sign = np.sign(x.data)

    def backward(g):
        _accumulate(x, g * sign)

    return _make(np.abs(x.data), (x,), backward)


def l2_normalize(x):
    """Normalize along the last axis to unit Euclidean norm."""
    norms = np.sqrt(np.sum(x.data * x.data, axis=-1, keepdims=True))
    if np.any(norms == 0):
        raise DegenerateInputError("l2_normalize received a zero vector")
    out = x.data / norms

    def backward(g):
        inner = np.sum(g * out, axis=-1, keepdims=True)
        _accumulate(x, (g - inner * out) / norms)

    return _make(out, (x,), backward)


# -- reductions ----------------------------------------------------------


def tsum(x, axis=None, keepdims=False):
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            _accumulate(x, np.broadcast_to(g, x.data.shape).copy())
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(x, np.broadcast_to(g, x.data.shape).copy())

    return _make(out, (x,), backward)


def tmean(x, axis=None, keepdims=False):
    if axis is None:
        count = x.data.size
    else:
        count = x.data.shape[axis]
    return scale_shift(tsum(x, axis=axis, keepdims=keepdims), 1.0 / count, 0.0)


def _extreme(x, axis, keepdims, argfn):
    if axis is None:
        axes = tuple(range(x.ndim))
    else:
        raw = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(a % x.ndim for a in raw)
    keep = [i for i in range(x.ndim) if i not in axes]
    perm = keep + list(axes)
    moved = x.data.transpose(perm)
    lead = moved.shape[: len(keep)]
    flat = moved.reshape(lead + (-1,))
    idx = argfn(flat, axis=-1)
    vals = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    if keepdims:
        out_shape = tuple(1 if i in axes else s for i, s in enumerate(x.data.shape))
    else:
        out_shape = tuple(s for i, s in enumerate(x.data.shape) if i not in axes)
    inv = np.argsort(perm)

    def backward(g):
        scatter = np.zeros_like(flat)
        np.put_along_axis(scatter, idx[..., None], g.reshape(lead + (1,)), axis=-1)
        _accumulate(x, scatter.reshape(moved.shape).transpose(inv))

    return _make(vals.reshape(out_shape), (x,), backward)


def tmax(x, axis=None, keepdims=False):
    """Maximum; gradient routes to the first attaining element."""
    return _extreme(x, axis, keepdims, np.argmax)


def tmin(x, axis=None, keepdims=False):
    return _extreme(x, axis, keepdims, np.argmin)


# -- linear algebra and shape --------------------------------------------


def matmul(a, b):
    """Matrix product; supports 2-D operands and a shared leading batch axis."""
    if a.data.shape[-1] != b.data.shape[-2]:
        raise DimensionError(
            f"matmul inner extents differ: {a.data.shape} @ {b.data.shape}"
        )

    def backward(g):
        _accumulate(a, np.matmul(g, np.swapaxes(b.data, -1, -2)))
        _accumulate(b, np.matmul(np.swapaxes(a.data, -1, -2), g))

    return _make(np.matmul(a.data, b.data), (a, b), backward)


def softmax_rows(x):
    """Softmax along the last axis; rows sum to one."""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        inner = np.sum(g * out, axis=-1, keepdims=True)
        _accumulate(x, out * (g - inner))

    return _make(out, (x,), backward)


def reshape(x, shape):
    original = x.data.shape

    def backward(g):
        _accumulate(x, g.reshape(original))

    return _make(x.data.reshape(shape), (x,), backward)


def transpose(x, axes):
    inv = np.argsort(axes)

    def backward(g):
        _accumulate(x, g.transpose(inv))

    return _make(x.data.transpose(axes), (x,), backward)


def concat(tensors, axis):
    tensors = list(tensors)
    offsets = np.cumsum([t.data.shape[axis] for t in tensors])[:-1]

    def backward(g):
        for t, piece in zip(tensors, np.split(g, offsets, axis=axis)):
            _accumulate(t, piece)

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def concat_channels(tensors):
    """Concatenate NCHW feature maps along the channel axis."""
    first = tensors[0].data.shape
    for t in tensors[1:]:
        s = t.data.shape
        if s[0] != first[0] or s[2:] != first[2:]:
            raise DimensionError(
                f"concat_channels: incompatible shapes {first} vs {s}"
            )
    return concat(tensors, axis=1)


# -- convolution and pooling ----------------------------------------------

_SCRATCH = {}


def _scratch(tag, shape, dtype):
    """Reusable transient buffer; callers must consume it before the next call
    with the same tag and shape."""
    key = (tag, shape, np.dtype(dtype))
    buf = _SCRATCH.get(key)
    if buf is None:
        buf = np.empty(shape, dtype=dtype)
        _SCRATCH[key] = buf
    return buf


def conv2d(x, weight, bias=None, stride=1, padding=0):
    """Cross-correlation of NCHW input with OIkk kernels.

    Output spatial size is floor((H + 2*padding - k)/stride) + 1. Differentiable
    in x, weight and bias. Evaluated as one GEMM per kernel offset so no full
    im2col buffer is ever materialized.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError(
            f"conv2d expects 4-D input and kernel, got {x.data.shape} and {weight.data.shape}"
        )
    n, c, h, w = x.data.shape
    o, i, kh, kw = weight.data.shape
    if i != c:
        raise DimensionError(
            f"conv2d: input has {c} channels but kernel expects {i}"
        )
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp or kw > wp:
        raise DimensionError(
            f"conv2d: kernel {kh}x{kw} does not fit padded input {hp}x{wp}"
        )
    if padding > kh - 1 or padding > kw - 1:
        raise DimensionError(
            f"conv2d: padding {padding} exceeds kernel-1 for kernel {kh}x{kw}"
        )
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    m = n * ho * wo

    offsets = [(ki, kj) for ki in range(kh) for kj in range(kw)]
    dtype = x.data.dtype

    def padded_input():
        if not padding:
            return x.data
        buf = _scratch("pad", (n, c, hp, wp), dtype)
        buf[:, :, :padding, :] = 0
        buf[:, :, padding + h :, :] = 0
        buf[:, :, :, :padding] = 0
        buf[:, :, :, padding + w :] = 0
        buf[:, :, padding : padding + h, padding : padding + w] = x.data
        return buf

    def gather_columns(xp):
        # (kh*kw, C, N, Ho, Wo): one strided copy per kernel offset, into a
        # reused scratch buffer (the GEMM consumes it immediately)
        buf = _scratch("cols", (kh * kw, c, n, ho, wo), dtype)
        for k, (ki, kj) in enumerate(offsets):
            buf[k] = xp[:, :, ki : ki + ho * stride : stride,
                        kj : kj + wo * stride : stride].transpose(1, 0, 2, 3)
        return buf.reshape(kh * kw * c, m)

    def weight_flat():
        # rows in (offset, channel) order to match the gathered columns
        return np.ascontiguousarray(weight.data.transpose(2, 3, 1, 0)).reshape(
            kh * kw * c, o
        )

    acc = np.matmul(weight_flat().T, gather_columns(padded_input()),
                    out=_scratch("out", (o, m), dtype))
    if bias is not None:
        if bias.data.shape != (o,):
            raise DimensionError(
                f"conv2d: bias shape {bias.data.shape} != ({o},)"
            )
        acc += bias.data[:, None]
    # .copy(), not ascontiguousarray: the result must never alias the scratch
    out = acc.reshape(o, n, ho, wo).transpose(1, 0, 2, 3).copy()

    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        g_flat = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(o, m)
        if bias is not None and bias.requires_grad:
            _accumulate(bias, g_flat.sum(axis=1))
        if weight.requires_grad:
            dw_flat = gather_columns(padded_input()) @ g_flat.T  # (kh*kw*c, o)
            _accumulate(
                weight,
                dw_flat.reshape(kh, kw, c, o).transpose(3, 2, 0, 1),
            )
        if x.requires_grad:
            # dx = correlation of the zero-stuffed, re-padded output gradient
            # with the spatially flipped kernel, via the same gather+GEMM path
            edge_h, edge_w = kh - 1 - padding, kw - 1 - padding
            rem_h = (h + 2 * padding - kh) % stride
            rem_w = (w + 2 * padding - kw) % stride
            gh = (ho - 1) * stride + 1 + 2 * edge_h + rem_h
            gw = (wo - 1) * stride + 1 + 2 * edge_w + rem_w
            gp = _scratch("gpad", (n, o, gh, gw), dtype)
            gp.fill(0)
            gp[:, :, edge_h : edge_h + (ho - 1) * stride + 1 : stride,
               edge_w : edge_w + (wo - 1) * stride + 1 : stride] = g
            cols_g = _scratch("gcols", (kh * kw, o, n, h, w), dtype)
            for k, (ki, kj) in enumerate(offsets):
                cols_g[k] = gp[:, :, ki : ki + h, kj : kj + w].transpose(1, 0, 2, 3)
            # rows in (offset, out-channel) order against the flipped kernel
            w_back = np.ascontiguousarray(
                weight.data[:, :, ::-1, ::-1].transpose(2, 3, 0, 1)
            ).reshape(kh * kw * o, c)
            dx_flat = w_back.T @ cols_g.reshape(kh * kw * o, n * h * w)
            _accumulate(
                x, np.ascontiguousarray(dx_flat.reshape(c, n, h, w).transpose(1, 0, 2, 3))
            )

    return _make(out, parents, backward)


def _pool_bins(extent, out_extent):
    starts = [(i * extent) // out_extent for i in range(out_extent)]
    ends = [-(-((i + 1) * extent) // out_extent) for i in range(out_extent)]
    return starts, ends


def adaptive_avg_pool(x, out_h, out_w):
    """Average over contiguous floor/ceil spatial bins down to (out_h, out_w)."""
    if x.ndim != 4:
        raise DimensionError(f"adaptive_avg_pool expects NCHW, got {x.data.shape}")
    n, c, h, w = x.data.shape
    if out_h < 1 or out_w < 1:
        raise DimensionError(f"pool output extents must be >= 1, got {out_h}x{out_w}")
    if out_h > h or out_w > w:
        raise DimensionError(
            f"pool output {out_h}x{out_w} exceeds input {h}x{w}"
        )
    hs, he = _pool_bins(h, out_h)
    ws, we = _pool_bins(w, out_w)
    out = np.empty((n, c, out_h, out_w), dtype=x.data.dtype)
    for i in range(out_h):
        for j in range(out_w):
            out[:, :, i, j] = x.data[:, :, hs[i] : he[i], ws[j] : we[j]].mean(axis=(2, 3))

    def backward(g):
        dx = np.zeros_like(x.data)
        for i in range(out_h):
            for j in range(out_w):
                area = (he[i] - hs[i]) * (we[j] - ws[j])
                dx[:, :, hs[i] : he[i], ws[j] : we[j]] += g[:, :, i : i + 1, j : j + 1] / area
        _accumulate(x, dx)

    return _make(out, (x,), backward)


def global_avg_pool(x):
    """NCHW -> NC spatial mean."""
    if x.ndim != 4:
        raise DimensionError(f"global_avg_pool expects NCHW, got {x.data.shape}")
    n, c, h, w = x.data.shape

    def backward(g):
        _accumulate(x, np.broadcast_to(g[:, :, None, None] / (h * w), x.data.shape).copy())

    return _make(x.data.mean(axis=(2, 3)), (x,), backward)


# -- parameter containers --------------------------------------------------


class Module:
    """Minimal parameter container with deterministic registration order."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "_children", {})

    def __setattr__(self, name, value):
        if isinstance(value, Tensor):
            (self._params if value.requires_grad else self._buffers)[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix=""):
        for name, p in self._params.items():
            yield prefix + name, p
        for name, child in self._children.items():
            yield from child.named_parameters(prefix + name + ".")

    def named_buffers(self, prefix=""):
        for name, b in self._buffers.items():
            yield prefix + name, b
        for name, child in self._children.items():
            yield from child.named_buffers(prefix + name + ".")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def load_array(self, name, array):
        parts = name.split(".")
        target = self
        for part in parts[:-1]:
            target = target._children[part]
        leaf = parts[-1]
        store = target._params if leaf in target._params else target._buffers
        current = store[leaf]
        if current.data.shape != tuple(array.shape):
            raise DimensionError(
                f"parameter {name}: checkpoint shape {tuple(array.shape)} != model shape {current.data.shape}"
            )
        current.data = array.astype(current.data.dtype, copy=True)


class ModuleList(Module):
    def __init__(self, modules=()):
        super().__init__()
        self._items = []
        for m in modules:
            self.append(m)

    def append(self, module):
        setattr(self, str(len(self._items)), module)
        self._items.append(module)

    def __iter__(self):
        return iter(self._items)

    def __getitem__(self, i):
        return self._items[i]

    def __len__(self):
        return len(self._items)


def he_normal(rng, shape, fan_in, dtype=np.float64):
    std = np.sqrt(2.0 / fan_in)
    return Tensor((rng.normal(0.0, std, size=shape)).astype(dtype), requires_grad=True)


def zeros_param(shape, dtype=np.float64):
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)
