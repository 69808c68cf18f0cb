"""Separable-convolution regression network and its checkpoint format."""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass

import numpy as np

from .layers import BatchNorm, Conv2D, GlobalAvgPool, Layer, ReLU, SeparableBlock, Sequential, named_arrays


@dataclass(frozen=True)
class BlockSpec:
    channels: int
    pool: bool = True
    residual: bool = True


@dataclass(frozen=True)
class ModelSpec:
    """Stem conv (3x3, stride 2) -> separable blocks -> ReLU -> GAP -> 1x1 conv head.

    The default is a three-block desk-scale entry flow; :meth:`xception`
    gives the full-depth layout.
    """

    in_channels: int = 1
    stem_channels: int = 8
    blocks: tuple[BlockSpec, ...] = (BlockSpec(8), BlockSpec(16), BlockSpec(32))
    out_channels: int = 52
    bn_momentum: float = 0.9
    bn_eps: float = 1e-5

    def __post_init__(self):
        if self.out_channels not in (1, 52):
            raise ValueError(f"out_channels must be 1 (MD) or 52 (thresholds), got {self.out_channels}")
        blocks = tuple(b if isinstance(b, BlockSpec) else BlockSpec(**b) for b in self.blocks)
        object.__setattr__(self, "blocks", blocks)

    @classmethod
    def xception(cls, out_channels: int = 52, in_channels: int = 1) -> "ModelSpec":
        blocks = (
            [BlockSpec(128), BlockSpec(256), BlockSpec(728)]
            + [BlockSpec(728, pool=False)] * 8
            + [BlockSpec(1024), BlockSpec(1536, False, False), BlockSpec(2048, False, False)]
        )
        return cls(in_channels, 64, tuple(blocks), out_channels)

    @classmethod
    def tiny(cls, out_channels: int = 52) -> "ModelSpec":
        """Two small blocks, for gradient checks."""
        return cls(1, 4, (BlockSpec(4), BlockSpec(6)), out_channels)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        d = dict(d)
        d["blocks"] = tuple(BlockSpec(**b) for b in d["blocks"])
        return cls(**d)


class Model:
    """Network built from a :class:`ModelSpec`.

    Predictions are ``head(x) * output_scale + output_shift``; the scale and
    shift are fixed buffers (normally the training-target statistics), so the
    network emits dB directly.
    """

    def __init__(self, spec: ModelSpec, seed: int = 0, dtype=np.float32):
        self.spec = spec
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        layers: list[tuple[str, Layer]] = [
            ("stem_conv", Conv2D(spec.in_channels, spec.stem_channels, 3, 2, "same", rng=rng, dtype=dtype)),
            ("stem_bn", BatchNorm(spec.stem_channels, spec.bn_momentum, spec.bn_eps, dtype)),
        ]
        c = spec.stem_channels
        for i, b in enumerate(spec.blocks):
            layers.append((f"block{i}", SeparableBlock(c, b.channels, b.pool, b.residual, rng, dtype,
                                                       spec.bn_momentum, spec.bn_eps)))
            c = b.channels
        layers += [
            ("relu", ReLU()),
            ("gap", GlobalAvgPool()),
            ("head", Conv2D(c, spec.out_channels, 1, 1, "same", bias=True, rng=rng, dtype=dtype, gain=1.0)),
        ]
        self.net = Sequential(layers)
        self.output_scale = np.ones(spec.out_channels, dtype=dtype)
        self.output_shift = np.zeros(spec.out_channels, dtype=dtype)

    # -- parameter access -------------------------------------------------

    def param_refs(self):
        return named_arrays(self.net, "params")

    def buffer_refs(self):
        return named_arrays(self.net, "buffers")

    @property
    def params(self) -> dict[str, np.ndarray]:
        return {n: layer.params[k] for n, layer, k in self.param_refs()}

    @property
    def grads(self) -> dict[str, np.ndarray]:
        return {n: layer.grads[k] for n, layer, k in self.param_refs()}

    def state(self) -> list[tuple[str, np.ndarray]]:
        """Every array of the model in declaration order: params, buffers, output affine."""
        out = [(n, layer.params[k]) for n, layer, k in self.param_refs()]
        out += [(n, layer.buffers[k]) for n, layer, k in self.buffer_refs()]
        out += [("output_scale", self.output_scale), ("output_shift", self.output_shift)]
        return out

    def set_state(self, arrays: dict[str, np.ndarray]) -> None:
        for n, layer, k in self.param_refs():
            layer.params[k] = np.array(arrays[n], dtype=self.dtype).reshape(layer.params[k].shape)
        for n, layer, k in self.buffer_refs():
            layer.buffers[k] = np.array(arrays[n], dtype=self.dtype).reshape(layer.buffers[k].shape)
        self.output_scale = np.array(arrays["output_scale"], dtype=self.dtype)
        self.output_shift = np.array(arrays["output_shift"], dtype=self.dtype)

    def n_params(self) -> int:
        return sum(a.size for a in self.params.values())

    def astype(self, dtype) -> "Model":
        other = Model(self.spec, 0, dtype)
        other.set_state(dict(self.state()))
        return other

    # -- computation ------------------------------------------------------

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        """(N, C, H, W) images -> (N, out_channels) predictions."""
        x = np.asarray(x, dtype=self.dtype)
        if x.ndim == 3:
            x = x[:, None]
        if x.ndim != 4 or x.shape[1] != self.spec.in_channels:
            raise ValueError(f"expected (N, {self.spec.in_channels}, H, W) input, got {x.shape}")
        h = self.net.forward(x, train)
        return h[:, :, 0, 0] * self.output_scale + self.output_shift

    def backward(self, dpred: np.ndarray) -> np.ndarray:
        """Back-propagate d(loss)/d(prediction); fills ``grads`` and returns d/d(input)."""
        dh = (np.asarray(dpred, dtype=self.dtype) * self.output_scale)[:, :, None, None]
        return self.net.backward(dh)


# ----------------------------------------------------------------- checkpoints

CKPT_MAGIC = b"OCTVFCK1"


def save_checkpoint(model: Model, path, meta: dict | None = None) -> bytes:
    """Write header JSON + length-prefixed f32 blob; returns the bytes written."""
    data = checkpoint_bytes(model, meta)
    with open(path, "wb") as f:
        f.write(data)
    return data


def checkpoint_bytes(model: Model, meta: dict | None = None) -> bytes:
    state = model.state()
    header = {
        "model_spec": model.spec.to_dict(),
        "arrays": [[n, list(a.shape)] for n, a in state],
        **(meta or {}),
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    blob = np.concatenate([a.astype("<f4").ravel() for _, a in state]).tobytes()
    return b"".join([CKPT_MAGIC, struct.pack("<I", len(head)), head, struct.pack("<Q", len(blob) // 4), blob])


def parse_checkpoint(data: bytes) -> tuple[Model, dict]:
    if data[:8] != CKPT_MAGIC:
        raise ValueError("not a checkpoint file")
    (hlen,) = struct.unpack_from("<I", data, 8)
    header = json.loads(data[12:12 + hlen])
    (count,) = struct.unpack_from("<Q", data, 12 + hlen)
    start = 20 + hlen
    if len(data) != start + 4 * count:
        raise ValueError(f"checkpoint blob length mismatch: header says {count} floats")
    flat = np.frombuffer(data, dtype="<f4", count=count, offset=start)
    model = Model(ModelSpec.from_dict(header["model_spec"]))
    arrays, pos = {}, 0
    for name, shape in header["arrays"]:
        size = int(np.prod(shape, dtype=np.int64))
        arrays[name] = flat[pos:pos + size].reshape(shape)
        pos += size
    model.set_state(arrays)
    return model, header


def load_checkpoint(path) -> tuple[Model, dict]:
    with open(path, "rb") as f:
        return parse_checkpoint(f.read())
