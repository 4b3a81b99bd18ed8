"""U-shaped hourglass CNN: stride-2 conv encoder, nearest-upsample decoder,
optional skip concatenation, 1x1 output head. Includes the bit-exact weight
file codec (format documented in the README)."""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass

import numpy as np

from .engine import (ContractViolation, Tensor, concat_channels, conv2d, crop2d,
                     leaky_relu, reflect_pad2d, upsample_nearest)

WEIGHT_MAGIC = b"MSKFILL1"
WEIGHT_VERSION = 1


class WeightFormatError(Exception):
    """Base class for weight-file problems."""


class WeightMagicError(WeightFormatError):
    pass


class WeightTruncatedError(WeightFormatError):
    pass


class WeightShapeError(WeightFormatError):
    pass


class ConfigMismatchError(WeightFormatError):
    pass


@dataclass
class HourglassConfig:
    in_channels: int = 3
    depth: int = 3
    base_channels: int = 32
    max_channels: int = 128
    skip_connections: bool = True
    leaky_slope: float = 0.1

    def __post_init__(self):
        if self.depth < 1:
            raise ContractViolation(f"depth {self.depth} < 1")

    def stage_channels(self) -> list[int]:
        """Channel count entering stage i (index 0 is the input image)."""
        chans = [self.in_channels]
        for i in range(self.depth):
            chans.append(min(self.base_channels * (1 << i), self.max_channels))
        return chans

    def param_count(self) -> int:
        """Analytic parameter total; mirrors the constructed layer list."""
        c = self.stage_channels()
        total = 0
        for i in range(1, self.depth + 1):
            total += c[i - 1] * c[i] * 9 + c[i]      # stride-2 conv
            total += c[i] * c[i] * 9 + c[i]          # refine conv
        for i in range(self.depth, 0, -1):
            cin = c[i] + (c[i - 1] if self.skip_connections and i > 1 else 0)
            cout = c[i - 1] if i > 1 else c[1]
            total += cin * cout * 9 + cout
            total += cout * cout * 9 + cout
        total += c[1] * self.in_channels + self.in_channels   # 1x1 head
        return total


@dataclass
class ModelWeights:
    """Decoded weight file: config echo plus ordered named float32 blobs."""
    config: HourglassConfig
    params: list[tuple[str, np.ndarray]]
    version: int = WEIGHT_VERSION


def _kaiming(rng: np.random.Generator, shape, slope: float, dtype) -> np.ndarray:
    fan_in = shape[1] * shape[2] * shape[3]
    gain = np.sqrt(2.0 / (1.0 + slope * slope))
    std = gain / np.sqrt(fan_in)
    return (rng.standard_normal(shape) * std).astype(dtype)


class Hourglass:
    """The denoising network; parameters live in an ordered name -> Tensor map."""

    def __init__(self, config: HourglassConfig, rng: np.random.Generator | None = None,
                 dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype)
        self.params: dict[str, Tensor] = {}
        rng = rng if rng is not None else np.random.default_rng(0)
        c = config.stage_channels()
        slope = config.leaky_slope
        for i in range(1, config.depth + 1):
            self._add_conv(rng, f"enc{i}.down", c[i - 1], c[i], slope)
            self._add_conv(rng, f"enc{i}.conv", c[i], c[i], slope)
        for i in range(config.depth, 0, -1):
            cin = c[i] + (c[i - 1] if config.skip_connections and i > 1 else 0)
            cout = c[i - 1] if i > 1 else c[1]
            self._add_conv(rng, f"dec{i}.conv1", cin, cout, slope)
            self._add_conv(rng, f"dec{i}.conv2", cout, cout, slope)
        self._add_conv(rng, "head", c[1], config.in_channels, slope, k=1)

    def _add_conv(self, rng, name: str, cin: int, cout: int, slope: float, k: int = 3):
        self.params[f"{name}.w"] = Tensor(_kaiming(rng, (cout, cin, k, k), slope, self.dtype),
                                          requires_grad=True)
        self.params[f"{name}.b"] = Tensor(np.zeros(cout, dtype=self.dtype), requires_grad=True)

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def param_count(self) -> int:
        return sum(t.size for t in self.params.values())

    def _conv(self, x: Tensor, name: str, stride: int = 1, pad: int = 1) -> Tensor:
        return conv2d(x, self.params[f"{name}.w"], self.params[f"{name}.b"],
                      stride=stride, pad=pad)

    def forward(self, x: Tensor) -> Tensor:
        cfg = self.config
        n, c, h, w = x.shape
        if c != cfg.in_channels:
            raise ContractViolation(f"forward: {c} channels, model expects {cfg.in_channels}")
        mult = 1 << cfg.depth
        if h < mult or w < mult:
            raise ContractViolation(f"forward: spatial extent {h}x{w} below 2^depth = {mult}")
        ph, pw = (-h) % mult, (-w) % mult
        if ph or pw:
            x = reflect_pad2d(x, (0, ph, 0, pw))

        slope = cfg.leaky_slope
        feats = []
        for i in range(1, cfg.depth + 1):
            x = leaky_relu(self._conv(x, f"enc{i}.down", stride=2), slope)
            x = leaky_relu(self._conv(x, f"enc{i}.conv"), slope)
            feats.append(x)
        for i in range(cfg.depth, 0, -1):
            x = upsample_nearest(x, 2)
            if cfg.skip_connections and i > 1:
                x = concat_channels([x, feats[i - 2]])
            x = leaky_relu(self._conv(x, f"dec{i}.conv1"), slope)
            x = leaky_relu(self._conv(x, f"dec{i}.conv2"), slope)
        x = self._conv(x, "head", pad=0)

        if ph or pw:
            x = crop2d(x, (0, ph, 0, pw))
        return x

    __call__ = forward

    def state(self) -> ModelWeights:
        return ModelWeights(self.config, [(n, t.data) for n, t in self.params.items()])

    def load_state(self, weights: ModelWeights):
        if asdict(weights.config) != asdict(self.config):
            raise ConfigMismatchError(
                f"weight config {asdict(weights.config)} != model config {asdict(self.config)}")
        for name, arr in weights.params:
            if name not in self.params:
                raise WeightShapeError(f"unknown parameter {name!r} in weight file")
            p = self.params[name]
            if p.data.shape != arr.shape:
                raise WeightShapeError(
                    f"parameter {name!r}: file shape {arr.shape} != model shape {p.data.shape}")
            p.data = arr.astype(self.dtype).copy()

    @classmethod
    def from_weights(cls, weights: ModelWeights) -> "Hourglass":
        model = cls(weights.config)
        model.load_state(weights)
        return model


# ---------------------------------------------------------------------------
# Weight file codec
# ---------------------------------------------------------------------------
# Layout (little-endian):
#   magic[8] | version u32 | config_len u32 | config json utf-8
#   | count u32 | count * (name_len u16, name utf-8, ndim u8, ndim * dim u32)
#   | concatenated raw float32 blobs in entry order

def encode_header(config: HourglassConfig, names_shapes: list[tuple[str, tuple[int, ...]]]) -> bytes:
    cfg_json = json.dumps(asdict(config), sort_keys=True).encode()
    parts = [WEIGHT_MAGIC, struct.pack("<I", WEIGHT_VERSION),
             struct.pack("<I", len(cfg_json)), cfg_json,
             struct.pack("<I", len(names_shapes))]
    for name, shape in names_shapes:
        nb = name.encode()
        parts.append(struct.pack("<H", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<B", len(shape)))
        parts.append(struct.pack(f"<{len(shape)}I", *shape))
    return b"".join(parts)


def save_weights(model: Hourglass, path) -> str:
    """Write the model parameters; returns the file's sha256 hex digest."""
    if model.dtype != np.float32:
        raise ContractViolation("weight files store float32; build the model with float32 to save")
    names_shapes = [(n, t.data.shape) for n, t in model.params.items()]
    header = encode_header(model.config, names_shapes)
    digest = hashlib.sha256()
    with open(path, "wb") as fh:
        fh.write(header)
        digest.update(header)
        for _, t in model.params.items():
            blob = np.ascontiguousarray(t.data, dtype="<f4").tobytes()
            fh.write(blob)
            digest.update(blob)
    return digest.hexdigest()


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise WeightTruncatedError(
                f"weight file ends at byte {len(self.blob)}, needed {self.pos + n}")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out


def load_weights(path) -> ModelWeights:
    with open(path, "rb") as fh:
        rd = _Reader(fh.read())
    if rd.take(len(WEIGHT_MAGIC)) != WEIGHT_MAGIC:
        raise WeightMagicError(f"{path}: not a weight file (bad magic)")
    (version,) = struct.unpack("<I", rd.take(4))
    if version != WEIGHT_VERSION:
        raise WeightFormatError(f"{path}: unsupported version {version}")
    (cfg_len,) = struct.unpack("<I", rd.take(4))
    config = HourglassConfig(**json.loads(rd.take(cfg_len).decode()))
    (count,) = struct.unpack("<I", rd.take(4))
    entries = []
    for _ in range(count):
        (name_len,) = struct.unpack("<H", rd.take(2))
        name = rd.take(name_len).decode()
        (ndim,) = struct.unpack("<B", rd.take(1))
        shape = struct.unpack(f"<{ndim}I", rd.take(4 * ndim))
        entries.append((name, shape))
    params = []
    for name, shape in entries:
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(rd.take(4 * n), dtype="<f4").reshape(shape)
        params.append((name, arr.copy()))
    if rd.pos != len(rd.blob):
        raise WeightFormatError(f"{path}: {len(rd.blob) - rd.pos} trailing bytes")
    return ModelWeights(config, params, version=version)


def weights_digest(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()
