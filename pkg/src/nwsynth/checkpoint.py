"""Binary model checkpoints.

Layout (little-endian): b"NWSC", u32 version, u8 arch id, u32-prefixed UTF-8
profile name, u32 tensor count, then per tensor a u32-prefixed name, u32 ndim,
u32 dims and float32 data. Scalar hyper-parameters ride along as 1-element
tensors named ``hparam.<key>``.
"""
from __future__ import annotations

import struct
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .features import get_profile
from .nsf import ARCH_NSF, NsfModel
from .wavenet import ARCH_WAVENET, WaveNetModel

MAGIC = b"NWSC"
VERSION = 1
ARCHES = {ARCH_NSF: NsfModel, ARCH_WAVENET: WaveNetModel}
ARCH_NAMES = {"nsf": ARCH_NSF, "wavenet": ARCH_WAVENET}
HPARAM_PREFIX = "hparam."


class CheckpointError(ValueError):
    pass


@dataclass
class ModelCheckpoint:
    arch_id: int
    profile_name: str
    tensors: "OrderedDict[str, np.ndarray]"
    version: int = VERSION

    @property
    def hparams(self) -> dict[str, float]:
        return {k[len(HPARAM_PREFIX):]: float(v.reshape(-1)[0])
                for k, v in self.tensors.items() if k.startswith(HPARAM_PREFIX)}

    @property
    def weights(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, v) for k, v in self.tensors.items() if not k.startswith(HPARAM_PREFIX))


def _pack_str(s: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack("<I", len(b)) + b


def to_checkpoint(model) -> ModelCheckpoint:
    tensors = OrderedDict((k, p.data.astype(np.float32)) for k, p in model.params.items())
    for k, v in model.hparams().items():
        tensors[HPARAM_PREFIX + k] = np.array([v], dtype=np.float32)
    return ModelCheckpoint(model.arch_id, model.config.profile.name, tensors)


def save_checkpoint(model, path) -> None:
    ckpt = model if isinstance(model, ModelCheckpoint) else to_checkpoint(model)
    out = [MAGIC, struct.pack("<IB", ckpt.version, ckpt.arch_id), _pack_str(ckpt.profile_name),
           struct.pack("<I", len(ckpt.tensors))]
    for name, arr in ckpt.tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f4")
        out.append(_pack_str(name))
        out.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(arr.tobytes())
    Path(path).write_bytes(b"".join(out))


class _Reader:
    def __init__(self, raw: bytes):
        self.raw, self.pos = raw, 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.raw):
            raise CheckpointError(f"truncated {what}")
        b = self.raw[self.pos:self.pos + n]
        self.pos += n
        return b

    def u32(self, what):
        return struct.unpack("<I", self.take(4, what))[0]

    def string(self, what):
        return self.take(self.u32(what), what).decode("utf-8")


def load_checkpoint(path) -> ModelCheckpoint:
    r = _Reader(Path(path).read_bytes())
    if r.take(4, "header") != MAGIC:
        raise CheckpointError("bad magic, not a checkpoint file")
    version = r.u32("header")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    arch_id = r.take(1, "header")[0]
    if arch_id not in ARCHES:
        raise CheckpointError(f"unknown arch id {arch_id}")
    profile = r.string("header")
    tensors = OrderedDict()
    for _ in range(r.u32("tensor table")):
        name = r.string("tensor table")
        ndim = r.u32("tensor table")
        dims = struct.unpack(f"<{ndim}I", r.take(4 * ndim, "tensor table"))
        count = int(np.prod(dims)) if ndim else 1
        data = np.frombuffer(r.take(4 * count, "tensor table"), dtype="<f4").reshape(dims)
        tensors[name] = data.astype(np.float32)
    if r.pos != len(r.raw):
        raise CheckpointError(f"{len(r.raw) - r.pos} trailing bytes after tensor table")
    return ModelCheckpoint(arch_id, profile, tensors, version)


def build_model(ckpt: ModelCheckpoint, expect_arch: int | None = None):
    """Instantiate the architecture a checkpoint describes and load its weights."""
    if expect_arch is not None and ckpt.arch_id != expect_arch:
        raise CheckpointError(
            f"arch mismatch: checkpoint holds {ARCHES[ckpt.arch_id].arch_name}, "
            f"expected {ARCHES[expect_arch].arch_name}")
    cls = ARCHES[ckpt.arch_id]
    weights = ckpt.weights
    shapes = {k: v.shape for k, v in weights.items()}
    try:
        config = cls.config_from_tensors(get_profile(ckpt.profile_name), shapes, ckpt.hparams)
        model = cls(config, seed=None)
    except (KeyError, IndexError, ValueError) as exc:
        raise CheckpointError(f"tensor table does not describe a {cls.arch_name} model: {exc}") from exc
    if set(model.params) != set(weights):
        missing = sorted(set(model.params) - set(weights))
        extra = sorted(set(weights) - set(model.params))
        raise CheckpointError(f"tensor names mismatch: missing {missing[:3]}, unexpected {extra[:3]}")
    for k, p in model.params.items():
        if weights[k].shape != p.shape:
            raise CheckpointError(f"tensor {k}: shape {weights[k].shape} != expected {p.shape}")
    model.load_state(weights)
    return model


def load_model(path, expect_arch: int | None = None):
    return build_model(load_checkpoint(path), expect_arch)
