"""The x r upsampler: EdgeFormer encoder, shuffle extension, residual reconstruction."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path
import numpy as np

from . import tensor as T
from .geometry import PointCloud, denormalize, normalize_unit_sphere
from .layers import EdgeFormerUnit, MlpLayer, Module
from .tensor import ShapeError, Tensor

CHECKPOINT_MAGIC = b"PUEF1"


class CheckpointError(ValueError):
    pass


@dataclass
class NetworkConfig:
    r: int = 4
    k: int = 16
    heads: int = 8
    unit_width: int = 64
    channels: int = 128
    n_units: int = 4
    extension_dims: tuple[int, ...] = (256, 32)
    attention_scaling: bool = True
    residual: bool = True
    append_input: bool = False
    fuse_activation: str = "leaky_relu"
    init_seed: int = 0

    def __post_init__(self):
        self.extension_dims = tuple(int(d) for d in self.extension_dims)
        problems = []
        for name in ("r", "k", "heads", "unit_width", "channels", "n_units"):
            if int(getattr(self, name)) < 1:
                problems.append(f"{name} must be positive")
        if self.channels % self.r:
            problems.append(f"channels={self.channels} is not divisible by r={self.r}")
        if self.unit_width % self.heads:
            problems.append(f"unit_width={self.unit_width} is not divisible by heads={self.heads}")
        if not self.extension_dims or min(self.extension_dims) < 1:
            problems.append("extension_dims must be a nonempty list of positive widths")
        if problems:
            raise ValueError("invalid network config: " + "; ".join(problems))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["extension_dims"] = list(self.extension_dims)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown network config keys: {sorted(unknown)}")
        return cls(**d)


class PUEdgeFormer(Module):
    _children = ("units", "fuse", "extension", "reconstruction")

    def __init__(self, config: NetworkConfig, rng: np.random.Generator | None = None):
        self.config = cfg = config
        rng = np.random.default_rng(cfg.init_seed) if rng is None else rng
        widths = [3] + [cfg.unit_width] * cfg.n_units
        self.units = _Seq(
            EdgeFormerUnit.create(
                widths[i], widths[i + 1], cfg.k, cfg.heads, rng, cfg.residual, cfg.attention_scaling
            )
            for i in range(cfg.n_units)
        )
        fuse_in = cfg.n_units * cfg.unit_width + (3 if cfg.append_input else 0)
        self.fuse = MlpLayer.create(fuse_in, cfg.channels, cfg.fuse_activation, rng)
        dims = [cfg.channels // cfg.r, *cfg.extension_dims]
        self.extension = _Seq(MlpLayer.create(dims[i], dims[i + 1], "relu", rng) for i in range(len(dims) - 1))
        self.reconstruction = MlpLayer.create(dims[-1], 3, "none", rng)

    def state(self) -> dict[str, Tensor]:
        return dict(self.named_parameters())

    def zero_reconstruction(self) -> None:
        self.reconstruction.weight.data[...] = 0.0
        self.reconstruction.bias.data[...] = 0.0

    def __call__(self, x) -> Tensor:
        return forward(self, x)


class _Seq(Module):
    def __init__(self, items):
        self.items = list(items)
        self._children = tuple(str(i) for i in range(len(self.items)))

    def __getattr__(self, name):
        if name.isdigit():
            return self.items[int(name)]
        raise AttributeError(name)

    def __iter__(self):
        return iter(self.items)

    def __len__(self):
        return len(self.items)

    def __getitem__(self, i):
        return self.items[i]


def _as_input(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    pts = x.points if isinstance(x, PointCloud) else x
    return Tensor._wrap(np.asarray(pts, dtype=np.float64))


def encode(model: PUEdgeFormer, x) -> Tensor:
    """Four EdgeFormer units in sequence, outputs concatenated, fused to N x C."""
    x = _as_input(x)
    if x.ndim != 2 or x.shape[1] != 3:
        raise ShapeError(f"expected N x 3 input, got {x.shape}")
    if x.shape[0] <= model.config.k:
        raise ShapeError(f"need more than k={model.config.k} points, got {x.shape[0]}")
    h = x
    outs = []
    for unit in model.units:
        h = unit(h)
        outs.append(h)
    if model.config.append_input:
        outs.append(x)
    return model.fuse(T.concat(outs, axis=1))


def shuffle_expand(f: Tensor, r: int) -> Tensor:
    """N x C -> rN x C/r; child j of parent i is row i*r + j with slice j of the parent's features."""
    n, c = f.shape
    if c % r:
        raise ShapeError(f"channel count {c} is not divisible by r={r}")
    return T.reshape(f, (n * r, c // r))


def extend(model: PUEdgeFormer, f: Tensor) -> Tensor:
    h = shuffle_expand(f, model.config.r)
    for layer in model.extension:
        h = layer(h)
    return h


def duplicate(x, r: int) -> Tensor:
    """Repeat every point r times in place: row i*r + j is input row i."""
    x = _as_input(x)
    return T.gather_rows(x, np.repeat(np.arange(x.shape[0]), r))


def reconstruct(model: PUEdgeFormer, f_ext: Tensor, x) -> Tensor:
    x = _as_input(x)
    r = model.config.r
    if f_ext.shape[0] != r * x.shape[0]:
        raise ShapeError(f"extended features have {f_ext.shape[0]} rows, expected {r} x {x.shape[0]}")
    return duplicate(x, r) + model.reconstruction(f_ext)


def forward(model: PUEdgeFormer, x) -> Tensor:
    x = _as_input(x)
    return reconstruct(model, extend(model, encode(model, x)), x)


def upsample_passes(times: int, r: int) -> int:
    passes = round(math.log(times, r)) if times >= r else 0
    if times < r or r**passes != times:
        raise ValueError(f"times={times} is not a positive power of r={r}")
    return passes


def iterate_upsample(model: PUEdgeFormer, x, times: int, normalize: bool = True) -> PointCloud:
    """Apply the network repeatedly to reach ``times`` x the input count.

    The cloud is renormalised to the unit sphere before each pass and mapped
    back to the input frame at the end.
    """
    passes = upsample_passes(times, model.config.r)
    pc = x if isinstance(x, PointCloud) else PointCloud(np.asarray(x, dtype=np.float64))
    if pc.points.shape[0] <= model.config.k:
        raise ShapeError(f"need more than k={model.config.k} points, got {pc.points.shape[0]}")
    for _ in range(passes):
        if normalize:
            pc = normalize_unit_sphere(pc)
        y = forward(model, pc.points).data
        pc = PointCloud(y, pc.norm_transform)
    out = denormalize(pc) if normalize else pc
    base = x.norm_transform if isinstance(x, PointCloud) else None
    return PointCloud(out.points, base)


# checkpoint layout (integers little-endian uint64, values little-endian float64):
#   magic "PUEF1" | config length | config JSON | record count |
#   per record: name length | name (utf-8) | rank | dims... | values...


def save_checkpoint(model: PUEdgeFormer, path) -> None:
    cfg = json.dumps(model.config.to_dict(), sort_keys=True).encode()
    chunks = [CHECKPOINT_MAGIC, struct.pack("<Q", len(cfg)), cfg]
    params = list(model.named_parameters())
    chunks.append(struct.pack("<Q", len(params)))
    for name, t in params:
        raw = name.encode()
        chunks.append(struct.pack("<Q", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<Q", t.ndim))
        chunks.append(struct.pack(f"<{t.ndim}Q", *t.shape))
        chunks.append(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(chunks))


class _Reader:
    def __init__(self, buf: bytes, path):
        self.buf, self.pos, self.path = buf, 0, path

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"{self.path}: truncated checkpoint while reading {what}")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def u64(self, what: str) -> int:
        return struct.unpack("<Q", self.take(8, what))[0]


def load_checkpoint(path, config: NetworkConfig | None = None) -> PUEdgeFormer:
    """Rebuild a model from a checkpoint; ``config``, if given, must match the stored one."""
    buf = Path(path).read_bytes()
    rd = _Reader(buf, path)
    magic = rd.take(len(CHECKPOINT_MAGIC), "magic")
    if magic != CHECKPOINT_MAGIC:
        if magic[:4] == CHECKPOINT_MAGIC[:4]:
            raise CheckpointError(f"{path}: unsupported checkpoint version {magic[4:]!r}")
        raise CheckpointError(f"{path}: not a checkpoint (bad magic {magic!r})")
    try:
        stored = NetworkConfig.from_dict(json.loads(rd.take(rd.u64("config length"), "config")))
    except (ValueError, TypeError) as exc:
        raise CheckpointError(f"{path}: bad config block: {exc}") from None
    if config is not None and config.to_dict() != stored.to_dict():
        raise CheckpointError(f"{path}: checkpoint config does not match the requested config")
    model = PUEdgeFormer(stored)
    expected = model.state()
    count = rd.u64("record count")
    if count != len(expected):
        raise CheckpointError(f"{path}: {count} tensors stored, model has {len(expected)}")
    for _ in range(count):
        name = rd.take(rd.u64("name length"), "name").decode()
        if name not in expected:
            raise CheckpointError(f"{path}: unexpected tensor {name!r}")
        rank = rd.u64(f"{name} rank")
        dims = struct.unpack(f"<{rank}Q", rd.take(8 * rank, f"{name} dims"))
        target = expected[name]
        if tuple(dims) != target.shape:
            raise CheckpointError(f"{path}: tensor {name!r} has shape {dims}, config expects {target.shape}")
        n = int(np.prod(dims, dtype=np.int64))
        target.data[...] = np.frombuffer(rd.take(8 * n, f"{name} values"), dtype="<f8").reshape(dims)
    if rd.pos != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - rd.pos} trailing bytes after last tensor")
    return model

