"""Minimal reverse-mode differentiation over N x C x H x W arrays.

Only the operations the deraining networks and their losses need are
provided. Every op builds a node holding a closure that maps the output
gradient to parent gradients; :meth:`Tensor.backward` walks the graph in
reverse topological order.
"""
from __future__ import annotations

import contextlib
from collections.abc import Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import signal

_GRAD_ENABLED = True

# Kernels larger than this (per side) go through FFT convolution.
_DIRECT_KERNEL_LIMIT = 7


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """Array with an optional gradient buffer and a link to its producer."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data)
        if not np.issubdtype(self.data.dtype, np.floating):
            self.data = self.data.astype(np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if self.requires_grad else None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _wrap(other, self))

    def __radd__(self, other):
        return add(_wrap(other, self), self)

    def __sub__(self, other):
        return sub(self, _wrap(other, self))

    def __rsub__(self, other):
        return sub(_wrap(other, self), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every leaf that requires grad."""
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar output, got shape {self.shape}")
        order = _topological_order(self)
        pending: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                pending[key] = pg if key not in pending else pending[key] + pg


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def _wrap(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.full(like.shape, value, dtype=like.dtype))


def _node(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def tensor(data, requires_grad: bool = False, dtype=np.float32, name: str | None = None) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=requires_grad, name=name)


# ---------------------------------------------------------------- elementwise


def _check_broadcast(a: tuple, b: tuple) -> None:
    if a == b or len(a) == 0 or len(b) == 0:
        return
    if len(a) != 4 or len(b) != 4:
        raise ValueError(f"shape mismatch: {a} vs {b}")
    big, small = (a, b) if np.prod(a) >= np.prod(b) else (b, a)
    spatial_map = small[0] == big[0] and small[1] == 1 and small[2:] == big[2:]
    channel_vec = small[:2] == big[:2] and small[2:] == (1, 1)
    if not (spatial_map or channel_vec):
        raise ValueError(f"unsupported broadcast: {a} vs {b}")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    if len(shape) == 0:
        return np.asarray(g.sum(), dtype=g.dtype)
    axes = tuple(i for i, (s, t) in enumerate(zip(shape, g.shape)) if s == 1 and t != 1)
    return g.sum(axis=axes, keepdims=True)


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a.shape, b.shape)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(a.data + b.data, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a.shape, b.shape)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _node(a.data - b.data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product; also covers the channel-vector and spatial-map broadcasts."""
    _check_broadcast(a.shape, b.shape)

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _node(a.data * b.data, (a, b), backward)


def broadcast_mul_channel(x: Tensor, spatial_map: Tensor) -> Tensor:
    """Multiply every channel of ``x`` by an N x 1 x H x W map."""
    n, _, h, w = x.shape
    if spatial_map.shape != (n, 1, h, w):
        raise ValueError(f"map shape {spatial_map.shape} does not match {x.shape}")
    return mul(x, spatial_map)


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _node(x.data * x.dtype.type(c), (x,), lambda g: (g * g.dtype.type(c),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _node(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    # split by sign to avoid overflow in exp
    z = x.data
    e = np.exp(-np.abs(z))
    out = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)
    return _node(out, (x,), lambda g: (g * out * (1 - out),))


def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    sizes = [p.shape[1] for p in parts]
    base = parts[0].shape
    for p in parts[1:]:
        if p.shape[0] != base[0] or p.shape[2:] != base[2:]:
            raise ValueError("concat_channels: N, H, W must agree")
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return _node(np.concatenate([p.data for p in parts], axis=1), parts, backward)


# ---------------------------------------------------------------- reductions


def sum_all(x: Tensor) -> Tensor:
    return _node(np.asarray(x.data.sum(), dtype=x.dtype), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size
    return _node(
        np.asarray(x.data.mean(), dtype=x.dtype), (x,), lambda g: (np.full(x.shape, g / n, dtype=x.dtype),)
    )


def _max_with_routing(data: np.ndarray, axis) -> tuple[np.ndarray, np.ndarray]:
    """Max over ``axis`` (int or pair of trailing axes) and a one-hot mask of the first argmax."""
    if isinstance(axis, tuple):
        n, c, h, w = data.shape
        flat = data.reshape(n, c, h * w)
        idx = flat.argmax(axis=2)
        mask = np.zeros_like(flat)
        np.put_along_axis(mask, idx[..., None], 1, axis=2)
        return flat.max(axis=2).reshape(n, c, 1, 1), mask.reshape(data.shape)
    idx = data.argmax(axis=axis)
    mask = np.zeros_like(data)
    np.put_along_axis(mask, np.expand_dims(idx, axis), 1, axis=axis)
    return data.max(axis=axis, keepdims=True), mask


def channel_pool_stats(x: Tensor) -> tuple[Tensor, Tensor]:
    """Mean and max across channels, each N x 1 x H x W."""
    c = x.shape[1]
    avg = _node(x.data.mean(axis=1, keepdims=True), (x,), lambda g: (np.broadcast_to(g / c, x.shape).copy(),))
    mx, mask = _max_with_routing(x.data, 1)
    return avg, _node(mx, (x,), lambda g: (g * mask,))


def global_pool_stats(x: Tensor) -> tuple[Tensor, Tensor]:
    """Spatial mean and max per channel, each N x C x 1 x 1."""
    hw = x.shape[2] * x.shape[3]
    avg = _node(
        x.data.mean(axis=(2, 3), keepdims=True), (x,), lambda g: (np.broadcast_to(g / hw, x.shape).copy(),)
    )
    mx, mask = _max_with_routing(x.data, (2, 3))
    return avg, _node(mx, (x,), lambda g: (g * mask,))


# ---------------------------------------------------------------- losses


def l1_loss(a: Tensor, b: Tensor) -> Tensor:
    """Mean absolute difference; the subgradient uses sign(0) = 0."""
    if a.shape != b.shape:
        raise ValueError(f"l1_loss shape mismatch: {a.shape} vs {b.shape}")
    d = a.data - b.data
    n = d.size

    def backward(g):
        s = np.sign(d) * (g / n)
        return s, -s

    return _node(np.asarray(np.abs(d).mean(), dtype=a.dtype), (a, b), backward)


def mse_loss(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"mse_loss shape mismatch: {a.shape} vs {b.shape}")
    d = a.data - b.data
    n = d.size

    def backward(g):
        s = d * (2 * g / n)
        return s, -s

    return _node(np.asarray((d * d).mean(), dtype=a.dtype), (a, b), backward)


# ---------------------------------------------------------------- padding


def pad2d(x: Tensor, ph: int, pw: int, mode: str = "replicate") -> Tensor:
    if mode not in ("replicate", "zero"):
        raise ValueError(f"unknown padding mode {mode!r}")
    if ph == 0 and pw == 0:
        return x
    np_mode = "edge" if mode == "replicate" else "constant"
    out = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw)), mode=np_mode)
    h, w = x.shape[2], x.shape[3]

    def backward(g):
        if mode == "zero":
            return (g[:, :, ph:ph + h, pw:pw + w],)
        cols = g[:, :, :, pw:pw + w].copy()
        if pw:
            cols[..., 0] += g[:, :, :, :pw].sum(axis=3)
            cols[..., -1] += g[:, :, :, pw + w:].sum(axis=3)
        inner = cols[:, :, ph:ph + h].copy()
        if ph:
            inner[:, :, 0] += cols[:, :, :ph].sum(axis=2)
            inner[:, :, -1] += cols[:, :, ph + h:].sum(axis=2)
        return (inner,)

    return _node(out, (x,), backward)


# ---------------------------------------------------------------- convolution


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int) -> tuple[np.ndarray, int, int]:
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    if stride > 1:
        win = win[:, :, ::stride, ::stride]
    n, c, ho, wo = win.shape[:4]
    return np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(n, c * kh * kw, ho * wo), ho, wo


def _conv_valid(xp: Tensor, weight: Tensor, bias: Tensor | None, stride: int, trainable: bool) -> Tensor:
    o, c, kh, kw = weight.shape
    n, cx, hp, wp = xp.shape
    cols, ho, wo = _im2col(xp.data, kh, kw, stride)
    wmat = weight.data.reshape(o, c * kh * kw)
    out = np.matmul(wmat, cols)
    if bias is not None:
        out += bias.data.reshape(1, o, 1)
    out = out.reshape(n, o, ho, wo)

    def backward(g):
        gm = g.reshape(n, o, ho * wo)
        gw = gb = gx = None
        if trainable and weight.requires_grad:
            gw = np.matmul(gm, cols.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape)
        if trainable and bias is not None and bias.requires_grad:
            gb = gm.sum(axis=(0, 2)).reshape(bias.shape)
        if xp.requires_grad:
            dcols = np.matmul(wmat.T, gm).reshape(n, c, kh, kw, ho, wo)
            gx = np.zeros(xp.shape, dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gx[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, :, i, j]
        return (gx, gw, gb)

    parents = (xp, weight, bias if bias is not None else Tensor(np.zeros(0, dtype=weight.dtype)))
    return _node(out, parents, backward)


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: str = "replicate",
    trainable: bool = True,
) -> Tensor:
    """Cross-correlation with 'same' padding for odd kernels.

    Gradients always flow to ``x``; they reach ``weight``/``bias`` only when
    ``trainable`` is set.
    """
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ValueError("conv2d expects 4-D input and weight")
    o, c, kh, kw = weight.shape
    if x.shape[1] != c:
        raise ValueError(f"conv2d channel mismatch: input {x.shape[1]}, weight expects {c}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError("conv2d needs odd kernel sizes")
    if bias is not None and bias.shape != (o,):
        raise ValueError(f"bias shape {bias.shape} != ({o},)")
    xp = pad2d(x, kh // 2, kw // 2, padding)
    return _conv_valid(xp, weight, bias, stride, trainable)


def _filter_valid(data: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    kh, kw = kernel.shape
    n, c, hp, wp = data.shape
    ho, wo = hp - kh + 1, wp - kw + 1
    if max(kh, kw) > _DIRECT_KERNEL_LIMIT:
        out = signal.fftconvolve(data, kernel[::-1, ::-1][None, None], mode="valid", axes=(2, 3))
        return out.astype(data.dtype, copy=False)
    out = np.zeros((n, c, ho, wo), dtype=data.dtype)
    for i in range(kh):
        for j in range(kw):
            if kernel[i, j] != 0:
                out += kernel[i, j] * data[:, :, i:i + ho, j:j + wo]
    return out


def _filter_full(g: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Adjoint of :func:`_filter_valid`."""
    kh, kw = kernel.shape
    if max(kh, kw) > _DIRECT_KERNEL_LIMIT:
        out = signal.fftconvolve(g, kernel[None, None], mode="full", axes=(2, 3))
        return out.astype(g.dtype, copy=False)
    n, c, ho, wo = g.shape
    out = np.zeros((n, c, ho + kh - 1, wo + kw - 1), dtype=g.dtype)
    for i in range(kh):
        for j in range(kw):
            if kernel[i, j] != 0:
                out[:, :, i:i + ho, j:j + wo] += kernel[i, j] * g
    return out


def filter2d(x: Tensor, kernel: np.ndarray, padding: str = "replicate") -> Tensor:
    """Depthwise cross-correlation of every channel with one fixed 2-D kernel."""
    k = np.asarray(kernel, dtype=x.dtype)
    kh, kw = k.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError("filter2d needs an odd kernel")
    xp = pad2d(x, kh // 2, kw // 2, padding)
    out = _filter_valid(xp.data, k)
    return _node(out, (xp,), lambda g: (_filter_full(g, k),))


def sep_filter2d(x: Tensor, k_rows: np.ndarray, k_cols: np.ndarray, padding: str = "replicate") -> Tensor:
    """Separable fixed filter: ``k_rows`` runs along H, ``k_cols`` along W."""
    kv = np.asarray(k_rows, dtype=x.dtype).reshape(-1, 1)
    kh = np.asarray(k_cols, dtype=x.dtype).reshape(1, -1)
    xp = pad2d(x, kv.shape[0] // 2, kh.shape[1] // 2, padding)
    tmp = _sep_valid(xp.data, kv[:, 0], axis=2)
    out = _sep_valid(tmp, kh[0], axis=3)

    def backward(g):
        return (_sep_full(_sep_full(g, kh[0], axis=3), kv[:, 0], axis=2),)

    return _node(out, (xp,), backward)


def _sep_valid(data: np.ndarray, k: np.ndarray, axis: int) -> np.ndarray:
    m = k.shape[0]
    size = data.shape[axis] - m + 1
    out = np.zeros(data.shape[:axis] + (size,) + data.shape[axis + 1:], dtype=data.dtype)
    for i in range(m):
        out += k[i] * np.take(data, np.arange(i, i + size), axis=axis)
    return out


def _sep_full(g: np.ndarray, k: np.ndarray, axis: int) -> np.ndarray:
    m = k.shape[0]
    size = g.shape[axis]
    shape = list(g.shape)
    shape[axis] = size + m - 1
    out = np.zeros(shape, dtype=g.dtype)
    for i in range(m):
        idx = [slice(None)] * g.ndim
        idx[axis] = slice(i, i + size)
        out[tuple(idx)] += k[i] * g
    return out


def forward_diff(x: Tensor, axis: str) -> Tensor:
    """x[.., v+1] - x[.., v] along W ('h') or H ('v'); the last column/row is zero."""
    ax = {"h": 3, "v": 2}[axis]
    d = np.zeros_like(x.data)
    sl_hi = [slice(None)] * 4
    sl_lo = [slice(None)] * 4
    sl_hi[ax] = slice(1, None)
    sl_lo[ax] = slice(None, -1)
    d[tuple(sl_lo)] = x.data[tuple(sl_hi)] - x.data[tuple(sl_lo)]

    def backward(g):
        gx = np.zeros_like(g)
        gl = g[tuple(sl_lo)]
        gx[tuple(sl_hi)] += gl
        gx[tuple(sl_lo)] -= gl
        return (gx,)

    return _node(d, (x,), backward)


LUMA_WEIGHTS = (0.299, 0.587, 0.114)


def luminance(x: Tensor) -> Tensor:
    """BT.601 luma of an N x 3 x H x W batch; single-channel input passes through."""
    if x.shape[1] == 1:
        return x
    if x.shape[1] != 3:
        raise ValueError(f"luminance expects 1 or 3 channels, got {x.shape[1]}")
    w = Tensor(np.asarray(LUMA_WEIGHTS, dtype=x.dtype).reshape(1, 3, 1, 1))
    return conv2d(x, w, None, padding="zero", trainable=False)


# ---------------------------------------------------------------- init / optim


def kaiming_uniform(shape: tuple[int, ...], rng: np.random.Generator, dtype=np.float32) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def global_grad_norm(params: Iterable[Tensor]) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.sum(p.grad.astype(np.float64) ** 2))
    return float(np.sqrt(total))


def clip_grad_norm(params: Sequence[Tensor], max_norm: float) -> float:
    norm = global_grad_norm(params)
    if norm > max_norm > 0:
        factor = max_norm / (norm + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad *= p.grad.dtype.type(factor)
    return norm


class Adam:
    """Adam with bias correction; moment buffers keyed by parameter name."""

    def __init__(
        self,
        params: dict[str, Tensor],
        lr: float = 1e-4,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
    ):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def step(self) -> None:
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1**t
        c2 = 1.0 - self.beta2**t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            dt = p.data.dtype.type
            m = self.m[k]
            v = self.v[k]
            m *= dt(self.beta1)
            m += dt(1 - self.beta1) * g
            v *= dt(self.beta2)
            v += dt(1 - self.beta2) * g * g
            p.data -= dt(self.lr) * (m / dt(c1)) / (np.sqrt(v / dt(c2)) + dt(self.eps))
