"""Parameter containers shared by the synthesizers."""
from __future__ import annotations

import math
from collections import OrderedDict

import numpy as np

from . import graph as G
from .graph import Param


class Module:
    """Holds named :class:`Param` objects in creation order."""

    arch_id: int = 0
    arch_name: str = ""

    def __init__(self):
        self.params: OrderedDict[str, Param] = OrderedDict()

    def add_param(self, name: str, shape, rng: np.random.Generator | None, kind: str = "glorot",
                  fan: tuple[int, int] | None = None) -> Param:
        if name in self.params:
            raise KeyError(f"duplicate parameter name {name}")
        self.params[name] = Param(name, init_array(shape, rng, kind, fan))
        return self.params[name]

    def __getitem__(self, name) -> Param:
        return self.params[name]

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def num_params(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = np.zeros_like(p.data)

    def astype(self, dtype) -> None:
        for p in self.params.values():
            p.data = p.data.astype(dtype)
            p.grad = np.zeros_like(p.data)

    def state(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, p.data.copy()) for k, p in self.params.items())

    def load_state(self, state) -> None:
        for k, p in self.params.items():
            arr = np.asarray(state[k])
            if arr.shape != p.shape:
                raise ValueError(f"tensor {k}: shape {arr.shape} does not match {p.shape}")
            p.data = arr.astype(p.dtype).copy()
            p.grad = np.zeros_like(p.data)

    def const(self, x) -> G.Tensor:
        return G.Tensor(np.asarray(x, dtype=self.dtype))


def init_array(shape, rng, kind="glorot", fan=None) -> np.ndarray:
    shape = tuple(shape)
    if kind == "zeros" or rng is None:
        return np.zeros(shape, dtype=np.float32)
    if kind == "ones":
        return np.ones(shape, dtype=np.float32)
    if fan is None:
        receptive = int(np.prod(shape[:-2])) if len(shape) > 2 else 1
        fan = (shape[-2] * receptive, shape[-1] * receptive) if len(shape) >= 2 else (shape[0], shape[0])
    if kind == "glorot":
        limit = math.sqrt(6.0 / (fan[0] + fan[1]))
    elif kind == "recurrent":
        limit = 1.0 / math.sqrt(fan[0])
    else:
        raise ValueError(f"unknown init {kind}")
    return rng.uniform(-limit, limit, size=shape).astype(np.float32)


class BiLstm:
    """Forward and backward LSTMs with concatenated outputs."""

    def __init__(self, module: Module, prefix: str, n_in: int, units: int, rng):
        self.p = []
        for d in ("fw", "bw"):
            wx = module.add_param(f"{prefix}.{d}.wx", (n_in, 4 * units), rng, "recurrent", (units, units))
            wh = module.add_param(f"{prefix}.{d}.wh", (units, 4 * units), rng, "recurrent", (units, units))
            b = module.add_param(f"{prefix}.{d}.b", (4 * units,), None)
            self.p.append((wx, wh, b))

    def __call__(self, x: G.Tensor) -> G.Tensor:
        fw = G.lstm(x, *self.p[0], reverse=False)
        bw = G.lstm(x, *self.p[1], reverse=True)
        return G.concat([fw, bw], axis=1)


class ConditionNet:
    """Bi-LSTM then a width-3 convolution over frames, F0 appended as the last channel."""

    def __init__(self, module: Module, prefix: str, n_mels: int, units: int, channels: int, rng):
        self.lstm = BiLstm(module, f"{prefix}.blstm", n_mels, units, rng)
        self.w = module.add_param(f"{prefix}.conv.w", (3, 2 * units, channels), rng)
        self.b = module.add_param(f"{prefix}.conv.b", (channels,), None)

    def __call__(self, mel: G.Tensor, frame_f0: G.Tensor) -> G.Tensor:
        h = self.lstm(mel)
        h = G.conv1d(h, self.w, self.b, dilation=1, causal=False)
        return G.concat([h, frame_f0], axis=1)
