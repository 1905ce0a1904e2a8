"""Tape-free reverse-mode differentiation over a fixed set of layer primitives.

Every op returns a :class:`Tensor` that remembers its parents and a closure
mapping the output gradient to parent gradients. Arrays are time-major:
sequences are ``(T, C)``.
"""
from __future__ import annotations

import threading
from contextlib import contextmanager

import numpy as np

_state = threading.local()


class GraphError(RuntimeError):
    pass


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "parents", "backward_fn", "op")

    def __init__(self, data, parents=(), backward_fn=None, op="const"):
        self.data = np.asarray(data)
        self.parents = parents
        self.backward_fn = backward_fn
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.shape})"

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

    def __neg__(self):
        return mul(self, -1.0)


class Param(Tensor):
    """Trainable leaf. ``grad`` has the shape of ``data`` and is filled by :func:`backward`."""

    __slots__ = ("name", "grad")

    def __init__(self, name: str, data):
        super().__init__(np.array(data), op="param")
        self.name = name
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return f"Param({self.name!r}, shape={self.shape})"


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _needs_grad(t: Tensor) -> bool:
    return isinstance(t, Param) or t.backward_fn is not None


@contextmanager
def no_grad():
    """Build forward values only, so intermediates are freed as soon as they are consumed."""
    prev = getattr(_state, "off", False)
    _state.off = True
    try:
        yield
    finally:
        _state.off = prev


def _node(data, parents, fn, op):
    if getattr(_state, "off", False) or not any(_needs_grad(p) for p in parents):
        return Tensor(data, op=op)
    return Tensor(data, parents, fn, op)


def backward(loss: Tensor, params=()) -> None:
    """Accumulate d(loss)/d(param) into every reachable Param.

    Grads of ``params`` are zeroed first, so unreachable ones end up zero.
    """
    for p in params:
        p.grad = np.zeros_like(p.data)
    if not isinstance(loss, Tensor) or loss.data.size != 1:
        raise GraphError("backward needs a scalar Tensor produced by a forward pass")
    if loss.backward_fn is None and not isinstance(loss, Param):
        if loss.op == "const":
            raise GraphError("backward before forward: loss is not connected to any parameter")
        return

    order, seen, stack = [], set(), [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if _needs_grad(p) and id(p) not in seen:
                stack.append((p, False))

    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if isinstance(node, Param):
            node.grad = node.grad + g
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not _needs_grad(parent):
                continue
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pg
            else:
                grads[id(parent)] = pg


# --------------------------------------------------------------------------
# Elementwise and reductions


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)
    return _node(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)
    return _node(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)
    return _node(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)), "mul")


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _node(y, (x,), lambda g: (g * (1.0 - y * y),), "tanh")


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid(x.data)
    return _node(y, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def log(x: Tensor) -> Tensor:
    return _node(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def square(x: Tensor) -> Tensor:
    return _node(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,), "square")


def sum_all(x: Tensor) -> Tensor:
    return _node(x.data.sum(), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),), "sum")


def mean(x: Tensor) -> Tensor:
    n = x.data.size
    return _node(x.data.mean(), (x,), lambda g: (np.full(x.shape, g / n, dtype=x.dtype),), "mean")


def sum_axis(x: Tensor, axis: int) -> Tensor:
    def fn(g):
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)
    return _node(x.data.sum(axis=axis), (x,), fn, "sum_axis")


def concat(xs, axis: int = 1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    bounds = np.cumsum([0] + sizes)
    try:
        out = np.concatenate([x.data for x in xs], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[x.shape for x in xs]}") from None

    def fn(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(xs)))
    return _node(out, tuple(xs), fn, "concat")


def columns(x: Tensor, start: int, stop: int) -> Tensor:
    def fn(g):
        gx = np.zeros_like(x.data)
        gx[:, start:stop] = g
        return (gx,)
    return _node(x.data[:, start:stop], (x,), fn, "columns")


def repeat_rows(x: Tensor, times: int) -> Tensor:
    """Up-sample by repetition along time: each row appears ``times`` times."""
    def fn(g):
        return (g.reshape(x.shape[0], times, *x.shape[1:]).sum(axis=1),)
    return _node(np.repeat(x.data, times, axis=0), (x,), fn, "repeat")


def gather(x: Tensor, index: np.ndarray) -> Tensor:
    """``x.data[index]`` along the first axis; gradient scatters back with accumulation."""
    def fn(g):
        return (_scatter_add(x.data, index, g),)
    return _node(x.data[index], (x,), fn, "gather")


def _scatter_add(like: np.ndarray, index: np.ndarray, g: np.ndarray) -> np.ndarray:
    if like.ndim == 1:
        out = np.bincount(index.ravel(), weights=g.ravel(), minlength=like.shape[0])
        return out.astype(like.dtype, copy=False)
    gx = np.zeros_like(like)
    np.add.at(gx, index, g)
    return gx


# --------------------------------------------------------------------------
# Layers


def dense(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"dense{_name(w)}: input width {x.shape[-1]} != weight rows {w.shape[0]}")
    y = x.data @ w.data
    if b is not None:
        y = y + b.data
        return _node(y, (x, w, b), lambda g: (g @ w.data.T, x.data.T @ g, g.sum(axis=0)), "dense")
    return _node(y, (x, w), lambda g: (g @ w.data.T, x.data.T @ g), "dense")


def _name(w):
    return f"[{w.name}]" if isinstance(w, Param) else ""


def conv_padding(kernel: int, dilation: int, causal: bool) -> tuple[int, int]:
    total = (kernel - 1) * dilation
    if causal:
        return total, 0
    left = total // 2
    return left, total - left


def conv1d(x: Tensor, w: Tensor, b: Tensor | None, dilation: int = 1, causal: bool = False) -> Tensor:
    """Same-length 1-D convolution; ``w`` is (kernel, c_in, c_out).

    Causal mode pads only on the left, so output t sees inputs t-(K-1)d .. t.
    """
    k, cin, cout = w.shape
    if x.data.ndim != 2 or x.shape[1] != cin:
        raise ShapeError(f"conv1d{_name(w)}: input {x.shape} does not match kernel {w.shape}")
    t = x.shape[0]
    left, right = conv_padding(k, dilation, causal)
    xp = np.pad(x.data, ((left, right), (0, 0)))
    y = np.zeros((t, cout), dtype=np.result_type(x.data, w.data))
    for i in range(k):
        y += xp[i * dilation:i * dilation + t] @ w.data[i]
    if b is not None:
        y += b.data

    def fn(g):
        gxp = np.zeros_like(xp)
        gw = np.empty_like(w.data)
        for i in range(k):
            seg = slice(i * dilation, i * dilation + t)
            gw[i] = xp[seg].T @ g
            gxp[seg] += g @ w.data[i].T
        gx = gxp[left:left + t]
        return (gx, gw) if b is None else (gx, gw, g.sum(axis=0))

    parents = (x, w) if b is None else (x, w, b)
    return _node(y, parents, fn, "conv1d")


def gated(x: Tensor) -> Tensor:
    """tanh(first half) * sigmoid(second half) along channels."""
    c = x.shape[1]
    if c % 2:
        raise ShapeError(f"gated: channel count {c} is odd")
    h = c // 2
    a = np.tanh(x.data[:, :h])
    s = _sigmoid(x.data[:, h:])

    def fn(g):
        return (np.concatenate([g * s * (1.0 - a * a), g * a * s * (1.0 - s)], axis=1),)
    return _node(a * s, (x,), fn, "gated")


def lstm(x: Tensor, wx: Tensor, wh: Tensor, b: Tensor, reverse: bool = False) -> Tensor:
    """Single-direction LSTM over time, gate order (input, forget, cell, output), zero initial state."""
    t_len, _ = x.shape
    units = wh.shape[0]
    if wx.shape != (x.shape[1], 4 * units) or wh.shape != (units, 4 * units):
        raise ShapeError(f"lstm{_name(wx)}: input {x.shape}, wx {wx.shape}, wh {wh.shape}")
    order = range(t_len - 1, -1, -1) if reverse else range(t_len)
    dtype = np.result_type(x.data, wx.data)
    xw = x.data @ wx.data + b.data
    hs = np.zeros((t_len, units), dtype=dtype)
    cs = np.zeros((t_len, units), dtype=dtype)
    gates = np.zeros((t_len, 4 * units), dtype=dtype)
    h = np.zeros(units, dtype=dtype)
    c = np.zeros(units, dtype=dtype)
    prev = []
    for t in order:
        prev.append((h, c))
        z = xw[t] + h @ wh.data
        i = _sigmoid(z[:units])
        f = _sigmoid(z[units:2 * units])
        gg = np.tanh(z[2 * units:3 * units])
        o = _sigmoid(z[3 * units:])
        c = f * c + i * gg
        h = o * np.tanh(c)
        gates[t] = np.concatenate([i, f, gg, o])
        hs[t], cs[t] = h, c
    steps = list(order)

    def fn(g):
        dz_all = np.zeros_like(gates)
        dh_next = np.zeros(units, dtype=dtype)
        dc_next = np.zeros(units, dtype=dtype)
        for pos in range(len(steps) - 1, -1, -1):
            t = steps[pos]
            h_prev, c_prev = prev[pos]
            i, f, gg, o = np.split(gates[t], 4)
            tc = np.tanh(cs[t])
            dh = g[t] + dh_next
            dc = dc_next + dh * o * (1.0 - tc * tc)
            dz = np.concatenate([
                dc * gg * i * (1.0 - i),
                dc * c_prev * f * (1.0 - f),
                dc * i * (1.0 - gg * gg),
                dh * tc * o * (1.0 - o),
            ])
            dz_all[t] = dz
            dh_next = wh.data @ dz
            dc_next = dc * f
        h_prev_all = np.zeros_like(hs)
        for pos in range(1, len(steps)):
            h_prev_all[steps[pos]] = hs[steps[pos - 1]]
        return (dz_all @ wx.data.T, x.data.T @ dz_all, h_prev_all.T @ dz_all, dz_all.sum(axis=0))

    return _node(hs, (x, wx, wh, b), fn, "lstm")


def softmax_cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` under row-wise softmax."""
    targets = np.asarray(targets, dtype=np.int64)
    n, k = logits.shape
    if targets.shape != (n,):
        raise ShapeError(f"softmax_cross_entropy: {n} logit rows but targets {targets.shape}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    loss = (lse - z[np.arange(n), targets]).mean()

    def fn(g):
        p = np.exp(z - lse[:, None])
        p[np.arange(n), targets] -= 1.0
        return (p * (g / n),)
    return _node(np.asarray(loss, dtype=logits.dtype), (logits,), fn, "softmax_xent")


def stft_magnitude(x: Tensor, fft_size: int, hop: int, win_length: int, eps: float = 1e-7) -> Tensor:
    """Smoothed magnitude sqrt(|STFT|^2 + eps) of a 1-D signal, centred reflect-padded frames."""
    from .features import analysis_window, frame_indices

    if x.data.ndim != 1:
        raise ShapeError(f"stft_magnitude: expected 1-D signal, got {x.shape}")
    idx = frame_indices(x.shape[0], fft_size, hop)
    win = analysis_window(win_length, fft_size).astype(x.dtype, copy=False)
    spec = np.fft.rfft(x.data[idx] * win, axis=1)
    mag = np.sqrt(spec.real ** 2 + spec.imag ** 2 + eps)

    def fn(g):
        z = g * spec / mag
        z[:, 1:(fft_size + 1) // 2] *= 0.5
        gframes = np.fft.irfft(z, n=fft_size, axis=1) * fft_size * win
        return (_scatter_add(x.data, idx, gframes),)
    return _node(mag.astype(x.dtype, copy=False), (x,), fn, "stft_mag")


def sinc_lowpass(cutoff: Tensor, taps: int) -> Tensor:
    """Hamming-windowed sinc low-pass kernels, one row per cutoff.

    ``cutoff`` holds normalised frequencies (cycles/sample, Nyquist 0.5); rows are
    normalised to unit DC gain. Output shape ``(n, taps)``.
    """
    if taps % 2 == 0:
        raise ShapeError(f"sinc_lowpass: taps must be odd, got {taps}")
    fc = cutoff.data.reshape(-1, 1)
    m = np.arange(taps) - taps // 2
    win = 0.54 - 0.46 * np.cos(2 * np.pi * np.arange(taps) / (taps - 1))
    arg = 2 * np.pi * fc * m
    safe_m = np.where(m == 0, 1, m)
    raw = np.where(m == 0, 2 * fc, np.sin(arg) / (np.pi * safe_m)) * win
    draw = np.where(m == 0, 2.0, 2.0 * np.cos(arg)) * win
    s = raw.sum(axis=1, keepdims=True)
    h = raw / s

    def fn(g):
        dr = g / s - (g * raw).sum(axis=1, keepdims=True) / (s * s)
        return ((dr * draw).sum(axis=1).reshape(cutoff.shape),)
    return _node(h, (cutoff,), fn, "sinc_lowpass")
