"""Multi-column point-convolution network for per-point sketch labelling.

Each column is three same-length convolutions (64, 128, 1024 channels, each
followed by batch norm and ReLU). The deepest map is max-pooled into a global
vector, tiled back over the points and concatenated with the first map,
giving N x 1088 per column. Column outputs are concatenated and passed
through a 1-wide convolutional head (1024, 512, 256, 128, C).

Checkpoint layout (all integers little-endian uint32, floats float32)::

    b"MCPN" | version | num_classes | n_points | K | wf_num | wf_den
    | K x (kernel_length, c1, c2, c3) | H | H x head_channel
    | T | T x (ndim | dims... | data) | crc32 of everything before it
"""

from __future__ import annotations

import io
import struct
import zlib
from dataclasses import dataclass, field
from functools import cached_property
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import BatchNormState, Tensor
from .sketchio import PointSet

MAGIC = b"MCPN"
VERSION = 1
COLUMN_CHANNELS = (64, 128, 1024)
HEAD_CHANNELS = (1024, 512, 256, 128)
DEFAULT_KERNELS = (1, 3, 5)


class InvalidConfig(ValueError):
    pass


class CheckpointError(Exception):
    pass


class IoError(CheckpointError, OSError):
    pass


class BadMagic(CheckpointError):
    pass


class VersionMismatch(CheckpointError):
    pass


class ChecksumMismatch(CheckpointError):
    pass


def _scale(channels: int, width_factor: Fraction) -> int:
    return max(1, int(round(channels * width_factor)))


@dataclass(frozen=True)
class ColumnConfig:
    kernel_length: int
    channels: tuple[int, int, int] = COLUMN_CHANNELS


@dataclass(frozen=True)
class MCPNetConfig:
    columns: tuple[ColumnConfig, ...]
    num_classes: int
    n_points: int = 512
    head_channels: tuple[int, ...] = HEAD_CHANNELS
    width_factor: Fraction = Fraction(1)

    def __post_init__(self):
        object.__setattr__(self, "columns", tuple(self.columns))
        object.__setattr__(self, "head_channels", tuple(self.head_channels))
        object.__setattr__(self, "width_factor", Fraction(self.width_factor).limit_denominator(1 << 16))
        if not self.columns:
            raise InvalidConfig("need at least one column")
        if self.num_classes < 2:
            raise InvalidConfig("num_classes must be >= 2")
        if self.n_points < 1:
            raise InvalidConfig("n_points must be >= 1")
        if self.width_factor <= 0:
            raise InvalidConfig("width_factor must be positive")
        for col in self.columns:
            if col.kernel_length < 1 or col.kernel_length % 2 == 0:
                raise InvalidConfig(f"kernel length {col.kernel_length} must be odd and positive")
            if len(col.channels) != 3:
                raise InvalidConfig("each column has exactly three convolutions")

    @classmethod
    def build(cls, num_classes: int, columns: int = 3, kernel_lengths=DEFAULT_KERNELS,
              n_points: int = 512, width_factor=1) -> MCPNetConfig:
        """Config for MCPNet-``columns``: the first ``columns`` kernel lengths are used."""
        kernel_lengths = tuple(kernel_lengths)
        if not 1 <= columns <= len(kernel_lengths):
            raise InvalidConfig(f"--columns {columns} needs that many kernel lengths, have {kernel_lengths}")
        return cls(tuple(ColumnConfig(k) for k in kernel_lengths[:columns]), num_classes,
                   n_points, HEAD_CHANNELS, Fraction(width_factor))

    @property
    def K(self) -> int:
        return len(self.columns)

    @cached_property
    def _widths(self) -> tuple[tuple[tuple[int, int, int], ...], tuple[int, ...]]:
        cols = tuple(tuple(_scale(c, self.width_factor) for c in col.channels) for col in self.columns)
        head = tuple(_scale(c, self.width_factor) for c in self.head_channels) + (self.num_classes,)
        return cols, head

    def column_widths(self, i: int) -> tuple[int, int, int]:
        return self._widths[0][i]

    def column_out(self, i: int) -> int:
        c1, _, c3 = self.column_widths(i)
        return c1 + c3

    def head_widths(self) -> tuple[int, ...]:
        return self._widths[1]


@dataclass
class ConvBlock:
    """One convolution, optionally followed by batch norm and ReLU."""

    kernel: Tensor
    bias: Tensor
    gamma: Tensor | None = None
    beta: Tensor | None = None
    bn: BatchNormState | None = None

    def __call__(self, x: Tensor, mode: str) -> Tensor:
        y = ad.conv1d(x, self.kernel, self.bias)
        if self.bn is None:
            return y
        return ad.relu(ad.batch_norm(y, self.gamma, self.beta, self.bn, mode))

    def parameters(self) -> list[Tensor]:
        if self.bn is None:
            return [self.kernel, self.bias]
        return [self.kernel, self.bias, self.gamma, self.beta]

    def buffers(self) -> list[np.ndarray]:
        return [] if self.bn is None else [self.bn.mean, self.bn.var]


def _block(rng: np.random.Generator, k: int, c_in: int, c_out: int, with_bn: bool, dtype) -> ConvBlock:
    bound = np.sqrt(1.0 / (k * c_in))
    kernel = Tensor(rng.uniform(-bound, bound, size=(k, c_in, c_out)).astype(dtype), requires_grad=True)
    bias = Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True)
    if not with_bn:
        return ConvBlock(kernel, bias)
    return ConvBlock(kernel, bias,
                     Tensor(np.ones(c_out, dtype=dtype), requires_grad=True),
                     Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True),
                     BatchNormState.fresh(c_out, dtype))


@dataclass
class ScoreMatrix:
    """Per-point class probabilities, ``(N, C)`` or ``(B, N, C)``."""

    values: np.ndarray

    def labels(self) -> np.ndarray:
        return self.values.argmax(axis=-1)  # first index wins ties


@dataclass
class MCPNet:
    config: MCPNetConfig
    columns: list[list[ConvBlock]] = field(repr=False)
    head: list[ConvBlock] = field(repr=False)

    @classmethod
    def init(cls, config: MCPNetConfig, seed: int = 0, dtype=np.float32) -> MCPNet:
        rng = np.random.default_rng(seed)
        columns = []
        for i, col in enumerate(config.columns):
            blocks, c_in = [], 2
            for c_out in config.column_widths(i):
                blocks.append(_block(rng, col.kernel_length, c_in, c_out, True, dtype))
                c_in = c_out
            columns.append(blocks)
        head, c_in = [], sum(config.column_out(i) for i in range(config.K))
        widths = config.head_widths()
        for j, c_out in enumerate(widths):
            head.append(_block(rng, 1, c_in, c_out, j < len(widths) - 1, dtype))
            c_in = c_out
        return cls(config, columns, head)

    def blocks(self) -> list[ConvBlock]:
        return [b for col in self.columns for b in col] + list(self.head)

    def parameters(self) -> list[Tensor]:
        return [p for b in self.blocks() for p in b.parameters()]

    def buffers(self) -> list[np.ndarray]:
        return [buf for b in self.blocks() for buf in b.buffers()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def astype(self, dtype) -> MCPNet:
        """Deep copy with every parameter and running statistic cast to ``dtype``."""
        def cast(b: ConvBlock) -> ConvBlock:
            t = lambda x: Tensor(x.data.astype(dtype), requires_grad=True)  # noqa: E731
            if b.bn is None:
                return ConvBlock(t(b.kernel), t(b.bias))
            bn = BatchNormState(b.bn.mean.astype(dtype), b.bn.var.astype(dtype), b.bn.momentum, b.bn.eps)
            return ConvBlock(t(b.kernel), t(b.bias), t(b.gamma), t(b.beta), bn)
        return MCPNet(self.config, [[cast(b) for b in col] for col in self.columns], [cast(b) for b in self.head])

    @property
    def dtype(self):
        return self.head[0].kernel.dtype

    def _check_points(self, points: Tensor) -> int:
        if points.data.ndim not in (2, 3) or points.shape[-1] != 2:
            raise ad.ShapeMismatch(f"points must be (N, 2) or (B, N, 2), got {points.shape}")
        return points.shape[-2]

    def column_features(self, i: int, points: Tensor, mode: str = "eval") -> dict[str, Tensor]:
        """All intermediate maps of column ``i``: f_c1, f_c2, f_c3, f_g and f_P."""
        n = self._check_points(points)
        lead = points.shape[:-1]
        c1, c2, c3 = self.config.column_widths(i)
        b1, b2, b3 = self.columns[i]
        f_c1 = b1(points, mode)
        f_c2 = b2(f_c1, mode)
        f_c3 = b3(f_c2, mode)
        f_g = ad.max_pool_seq(f_c3)
        f_p = ad.concat_cols([f_c1, ad.tile_rows(f_g, n)])
        for t, want in ((f_c1, lead + (c1,)), (f_c2, lead + (c2,)), (f_c3, lead + (c3,)),
                        (f_g, lead[:-1] + (c3,)), (f_p, lead + (c1 + c3,))):
            if t.shape != want:
                raise ad.ShapeMismatch(f"column {i}: got {t.shape}, expected {want}")
        return {"f_c1": f_c1, "f_c2": f_c2, "f_c3": f_c3, "f_g": f_g, "f_P": f_p}

    def forward_column(self, i: int, points: Tensor, mode: str = "eval") -> Tensor:
        return self.column_features(i, points, mode)["f_P"]

    def logits(self, points: Tensor, mode: str = "eval") -> Tensor:
        """Unnormalised per-point class scores (the softmax input)."""
        lead = points.shape[:-1]
        maps = [self.forward_column(i, points, mode) for i in range(self.config.K)]
        h = ad.concat_cols(maps)
        want = sum(self.config.column_out(i) for i in range(self.config.K))
        if h.shape != lead + (want,):
            raise ad.ShapeMismatch(f"aggregated map {h.shape}, expected {lead + (want,)}")
        for block, width in zip(self.head, self.config.head_widths()):
            h = block(h, mode)
            if h.shape != lead + (width,):
                raise ad.ShapeMismatch(f"head layer: got {h.shape}, expected {lead + (width,)}")
        return h

    def forward(self, points, mode: str = "eval") -> ScoreMatrix:
        if not isinstance(points, Tensor):
            points = Tensor(np.asarray(points, dtype=self.dtype))
        return ScoreMatrix(ad.softmax(self.logits(points, mode).data))

    def predict(self, pts: PointSet | np.ndarray) -> np.ndarray:
        points = pts.points if isinstance(pts, PointSet) else pts
        return self.forward(np.asarray(points, dtype=self.dtype), "eval").labels()

    # serialisation

    def _config_ints(self) -> list[int]:
        cfg = self.config
        ints = [cfg.num_classes, cfg.n_points, cfg.K, cfg.width_factor.numerator, cfg.width_factor.denominator]
        for col in cfg.columns:
            ints += [col.kernel_length, *col.channels]
        ints += [len(cfg.head_channels), *cfg.head_channels]
        return ints

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        ints = self._config_ints()
        buf.write(MAGIC)
        buf.write(struct.pack(f"<{1 + len(ints)}I", VERSION, *ints))
        arrays = [p.data for p in self.parameters()] + self.buffers()
        buf.write(struct.pack("<I", len(arrays)))
        for a in arrays:
            buf.write(struct.pack(f"<{1 + a.ndim}I", a.ndim, *a.shape))
            buf.write(np.ascontiguousarray(a, dtype="<f4").tobytes())
        body = buf.getvalue()
        return body + struct.pack("<I", zlib.crc32(body))

    def save(self, path) -> None:
        try:
            Path(path).write_bytes(self.to_bytes())
        except OSError as exc:
            raise IoError(str(exc)) from exc

    @classmethod
    def from_bytes(cls, raw: bytes) -> MCPNet:
        if raw[:4] != MAGIC:
            raise BadMagic(f"expected {MAGIC!r}, got {raw[:4]!r}")
        if len(raw) < 12:
            raise ChecksumMismatch("file too short")
        (version,) = struct.unpack_from("<I", raw, 4)
        if version != VERSION:
            raise VersionMismatch(f"checkpoint version {version}, expected {VERSION}")
        body, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
        if zlib.crc32(body) != crc:
            raise ChecksumMismatch("CRC32 does not match; file is truncated or corrupt")
        reader = _Reader(body, 8)
        num_classes, n_points, k, wf_num, wf_den = reader.ints(5)
        columns = []
        for _ in range(k):
            kl, c1, c2, c3 = reader.ints(4)
            columns.append(ColumnConfig(kl, (c1, c2, c3)))
        (n_head,) = reader.ints(1)
        head = tuple(reader.ints(n_head))
        config = MCPNetConfig(tuple(columns), num_classes, n_points, head, Fraction(wf_num, wf_den))
        model = cls.init(config, seed=0)
        (count,) = reader.ints(1)
        targets = [p.data for p in model.parameters()] + model.buffers()
        if count != len(targets):
            raise ChecksumMismatch(f"checkpoint holds {count} arrays, config implies {len(targets)}")
        for target in targets:
            (ndim,) = reader.ints(1)
            shape = tuple(reader.ints(ndim))
            if shape != target.shape:
                raise ChecksumMismatch(f"array shape {shape} does not match expected {target.shape}")
            target[...] = reader.floats(int(np.prod(shape, dtype=np.int64))).reshape(shape)
        return model

    @classmethod
    def load(cls, path) -> MCPNet:
        try:
            raw = Path(path).read_bytes()
        except OSError as exc:
            raise IoError(str(exc)) from exc
        return cls.from_bytes(raw)


class _Reader:
    def __init__(self, raw: bytes, offset: int):
        self.raw, self.pos = raw, offset

    def ints(self, n: int) -> list[int]:
        if self.pos + 4 * n > len(self.raw):
            raise ChecksumMismatch("unexpected end of checkpoint")
        out = struct.unpack_from(f"<{n}I", self.raw, self.pos)
        self.pos += 4 * n
        return list(out)

    def floats(self, n: int) -> np.ndarray:
        if self.pos + 4 * n > len(self.raw):
            raise ChecksumMismatch("unexpected end of checkpoint")
        out = np.frombuffer(self.raw, dtype="<f4", count=n, offset=self.pos)
        self.pos += 4 * n
        return out


def predict(model: MCPNet, pts: PointSet) -> np.ndarray:
    return model.predict(pts)
