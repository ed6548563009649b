"""DR-Unet104: a pre-activation bottleneck encoder, residual decoder U-Net.

Level table (channels before any width reduction)::

    level   blocks  bottleneck (reduce, 3x3, expand)   decoder   extent @240
      1        2        16,  16,   64                    32        240
      2        3        32,  32,  128                    64        120
      3        3        64,  64,  256                   128         60
      4        5       128, 128,  512                   256         30
      5       14       256, 256, 1024                   512         15
    bridge     4       512, 512, 2048                    -           8

Counted convolutions: 27 encoder blocks and 4 bridge blocks at three convs
each (93), five decoder blocks at two convs each (10) and the 1x1 head, for
104. Projection shortcuts and the transposed-conv upsamplers are not counted.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import ShapeError, Tape, Tensor, check_tensor4, default_dtype
from .ops import (
    INFER,
    BatchNormParams,
    ConvParams,
    add,
    batch_norm,
    concat_channels,
    conv2d,
    conv2d_transpose,
    dropout,
    relu,
)

MIN_EXTENT = 32


@dataclass(frozen=True)
class LevelSpec:
    level: int | str
    encoder_block_count: int
    bottleneck_channels: tuple[int, int, int]
    decoder_channels: int | None
    downsamples: bool

    def __post_init__(self):
        reduce, spatial, expand = self.bottleneck_channels
        if expand != 4 * reduce or spatial != reduce:
            raise ValueError(f"bottleneck channels {self.bottleneck_channels} must be (F, F, 4F)")

    def scaled(self, divisor: int) -> "LevelSpec":
        reduce = self.bottleneck_channels[0] // divisor
        if reduce < 1:
            raise ValueError(f"width divisor {divisor} leaves no channels at level {self.level}")
        dec = None if self.decoder_channels is None else self.decoder_channels // divisor
        return LevelSpec(self.level, self.encoder_block_count, (reduce, reduce, 4 * reduce), dec, self.downsamples)


LEVELS = (
    LevelSpec(1, 2, (16, 16, 64), 32, False),
    LevelSpec(2, 3, (32, 32, 128), 64, True),
    LevelSpec(3, 3, (64, 64, 256), 128, True),
    LevelSpec(4, 5, (128, 128, 512), 256, True),
    LevelSpec(5, 14, (256, 256, 1024), 512, True),
)
BRIDGE = LevelSpec("bridge", 4, (512, 512, 2048), None, True)


class ConstructionError(ValueError):
    pass


class CheckpointFormatError(ValueError):
    pass


def he_init(fan_in: int, shape, rng: np.random.Generator, dtype=None) -> np.ndarray:
    """Zero-mean Gaussian weights with variance 2 / fan_in."""
    if fan_in <= 0:
        raise ValueError(f"fan_in must be positive, got {fan_in}")
    dt = dtype or default_dtype()
    return rng.standard_normal(shape, dtype=dt) * dt(math.sqrt(2.0 / fan_in))


def _seed_sequence(seed) -> np.random.SeedSequence:
    if isinstance(seed, np.random.SeedSequence):
        return seed
    return np.random.SeedSequence(seed)


class Conv:
    """A named convolution layer plus its bookkeeping role.

    ``role`` is one of encoder, bridge, decoder, head, projection, upsample.
    Weights are drawn from a per-layer seed on first access, so building the
    graph is cheap and the values do not depend on access order.
    """

    COUNTED_ROLES = ("encoder", "bridge", "decoder", "head")

    def __init__(self, name, in_ch, out_ch, kernel, seed, stride=1, role="encoder", transposed=False):
        self.name = name
        self.role = role
        self.in_ch, self.out_ch, self.kernel = in_ch, out_ch, kernel
        self.stride = stride
        self.transposed = transposed
        self.weight_shape = (in_ch, out_ch, kernel, kernel) if transposed else (out_ch, in_ch, kernel, kernel)
        self._seed = _seed_sequence(seed).spawn(1)[0]
        self._dtype = default_dtype()
        self._params: ConvParams | None = None

    @property
    def params(self) -> ConvParams:
        if self._params is None:
            rng = np.random.default_rng(self._seed)
            fan_in = self.in_ch * self.kernel * self.kernel
            self._params = ConvParams(
                Tensor(he_init(fan_in, self.weight_shape, rng, self._dtype), name=f"{self.name}.weight"),
                Tensor(np.zeros(self.out_ch), name=f"{self.name}.bias", dtype=self._dtype),
                stride=self.stride,
                transposed=self.transposed,
            )
        return self._params

    @property
    def counted(self) -> bool:
        return self.role in self.COUNTED_ROLES

    @property
    def size(self) -> int:
        return int(np.prod(self.weight_shape)) + self.out_ch

    def __call__(self, x, tape=None, target_hw=None):
        if self.transposed:
            return conv2d_transpose(x, self.params, target_hw, tape)
        return conv2d(x, self.params, tape)


class BatchNorm:
    def __init__(self, name, channels):
        self.name = name
        self.params = BatchNormParams.create(channels, name)

    def __call__(self, x, mode, tape=None):
        return batch_norm(x, self.params, mode, tape)


class _Block:
    def convs(self) -> list[Conv]:
        return [v for v in vars(self).values() if isinstance(v, Conv)]

    def norms(self) -> list[BatchNorm]:
        return [v for v in vars(self).values() if isinstance(v, BatchNorm)]


class BottleneckBlock(_Block):
    """BN-ReLU-1x1 (reduce, strided) / BN-ReLU-3x3 / BN-ReLU-1x1 (expand) + shortcut.

    The first BN-ReLU output also feeds the projection shortcut when one is
    needed (channel change or stride 2); otherwise the shortcut is the raw
    input.
    """

    def __init__(self, name, in_ch, reduce_ch, stride, seed=None, role="encoder"):
        if stride not in (1, 2):
            raise ConstructionError(f"{name}: stride must be 1 or 2, got {stride}")
        rng = _seed_sequence(seed)
        out_ch = 4 * reduce_ch
        self.name = name
        self.in_ch, self.out_ch, self.stride = in_ch, out_ch, stride
        self.bn1 = BatchNorm(f"{name}.bn1", in_ch)
        self.conv1 = Conv(f"{name}.conv1", in_ch, reduce_ch, 1, rng, stride=stride, role=role)
        self.bn2 = BatchNorm(f"{name}.bn2", reduce_ch)
        self.conv2 = Conv(f"{name}.conv2", reduce_ch, reduce_ch, 3, rng, role=role)
        self.bn3 = BatchNorm(f"{name}.bn3", reduce_ch)
        self.conv3 = Conv(f"{name}.conv3", reduce_ch, out_ch, 1, rng, role=role)
        self.projection = None
        if in_ch != out_ch or stride != 1:
            self.projection = Conv(f"{name}.proj", in_ch, out_ch, 1, rng, stride=stride, role="projection")

    def __call__(self, x, mode, tape=None):
        pre = relu(self.bn1(x, mode, tape), tape)
        h = self.conv1(pre, tape)
        h = self.conv2(relu(self.bn2(h, mode, tape), tape), tape)
        h = self.conv3(relu(self.bn3(h, mode, tape), tape), tape)
        shortcut = x if self.projection is None else self.projection(pre, tape)
        return add(h, shortcut, tape)

    def convs(self) -> list[Conv]:
        return [c for c in (self.conv1, self.conv2, self.conv3, self.projection) if c is not None]


class DecoderBlock(_Block):
    """(BN-ReLU-3x3) x 2 with a 1x1 projection shortcut on channel change."""

    def __init__(self, name, in_ch, out_ch, seed=None):
        rng = _seed_sequence(seed)
        self.name = name
        self.in_ch, self.out_ch = in_ch, out_ch
        self.bn1 = BatchNorm(f"{name}.bn1", in_ch)
        self.conv1 = Conv(f"{name}.conv1", in_ch, out_ch, 3, rng, role="decoder")
        self.bn2 = BatchNorm(f"{name}.bn2", out_ch)
        self.conv2 = Conv(f"{name}.conv2", out_ch, out_ch, 3, rng, role="decoder")
        self.projection = None
        if in_ch != out_ch:
            self.projection = Conv(f"{name}.proj", in_ch, out_ch, 1, rng, role="projection")

    def __call__(self, x, mode, tape=None):
        pre = relu(self.bn1(x, mode, tape), tape)
        h = self.conv1(pre, tape)
        h = self.conv2(relu(self.bn2(h, mode, tape), tape), tape)
        shortcut = x if self.projection is None else self.projection(pre, tape)
        return add(h, shortcut, tape)

    def convs(self) -> list[Conv]:
        return [c for c in (self.conv1, self.conv2, self.projection) if c is not None]


def make_bottleneck_block(in_ch, reduce_ch, stride, seed=None, name="block", role="encoder") -> BottleneckBlock:
    return BottleneckBlock(name, in_ch, reduce_ch, stride, seed, role)


def make_decoder_block(in_ch, out_ch, seed=None, name="dec") -> DecoderBlock:
    return DecoderBlock(name, in_ch, out_ch, seed)


class DRUNet104:
    """The assembled network: blocks, parameter registry and skip wiring.

    ``skips`` lists (encoder stage, decoder stage) pairs; ``dropout_sites``
    names every stage followed by dropout.
    """

    def __init__(
        self,
        in_channels: int = 4,
        n_class: int = 4,
        dropout_rate: float = 0.2,
        seed: int | None = 0,
        width_divisor: int = 1,
    ):
        if n_class < 2:
            raise ConstructionError(f"n_class must be at least 2, got {n_class}")
        if not 0 <= dropout_rate < 1:
            raise ConstructionError(f"dropout rate must lie in [0, 1), got {dropout_rate}")
        self.in_channels = in_channels
        self.n_class = n_class
        self.dropout_rate = float(dropout_rate)
        self.width_divisor = width_divisor
        self.seed = seed
        init_seq, drop_seq = np.random.SeedSequence(seed).spawn(2)
        self.rng = np.random.default_rng(drop_seq)

        self.levels = tuple(spec.scaled(width_divisor) for spec in LEVELS)
        self.bridge_spec = BRIDGE.scaled(width_divisor)

        self.encoder: list[list[BottleneckBlock]] = []
        ch = in_channels
        for spec in self.levels:
            self.encoder.append(self._stack(f"enc{spec.level}", spec, ch, init_seq, "encoder"))
            ch = spec.bottleneck_channels[2]
        self.bridge = self._stack("bridge", self.bridge_spec, ch, init_seq, "bridge")
        ch = self.bridge_spec.bottleneck_channels[2]

        # decoder is stored top-down (index 0 = level 1) but built bottom-up
        self.upsamplers: list[Conv | None] = [None] * len(self.levels)
        self.decoder: list[DecoderBlock | None] = [None] * len(self.levels)
        for i in reversed(range(len(self.levels))):
            spec = self.levels[i]
            dec_ch = spec.decoder_channels
            self.upsamplers[i] = Conv(f"up{spec.level}", ch, dec_ch, 2, init_seq, stride=2, role="upsample", transposed=True)
            self.decoder[i] = DecoderBlock(f"dec{spec.level}", dec_ch + spec.bottleneck_channels[2], dec_ch, init_seq)
            ch = dec_ch
        self.head = Conv("head", ch, n_class, 1, init_seq, role="head")

        self.skips = [(f"enc{s.level}", f"dec{s.level}") for s in self.levels]
        self.dropout_sites = [f"enc{s.level}" for s in self.levels] + [f"dec{s.level}" for s in reversed(self.levels)]

    @staticmethod
    def _stack(prefix, spec: LevelSpec, in_ch, seed, role) -> list[BottleneckBlock]:
        reduce = spec.bottleneck_channels[0]
        blocks = []
        for k in range(spec.encoder_block_count):
            stride = 2 if (k == 0 and spec.downsamples) else 1
            blocks.append(BottleneckBlock(f"{prefix}.{k}", in_ch, reduce, stride, seed, role))
            in_ch = spec.bottleneck_channels[2]
        return blocks

    # -- registry -------------------------------------------------------------

    def blocks(self) -> list[_Block]:
        return [b for level in self.encoder for b in level] + self.bridge + self.decoder

    def convs(self) -> list[Conv]:
        out = []
        for level in self.encoder:
            for b in level:
                out.extend(b.convs())
        for b in self.bridge:
            out.extend(b.convs())
        for i in reversed(range(len(self.levels))):
            out.append(self.upsamplers[i])
            out.extend(self.decoder[i].convs())
        out.append(self.head)
        return out

    def norms(self) -> list[BatchNorm]:
        return [n for b in self.blocks() for n in b.norms()]

    def parameters(self) -> list[Tensor]:
        params = []
        for conv in self.convs():
            params.extend(conv.params.tensors())
        for norm in self.norms():
            params.extend(norm.params.tensors())
        return params

    def named_parameters(self) -> dict[str, Tensor]:
        return {p.name: p for p in self.parameters()}

    def state_dict(self) -> dict[str, np.ndarray]:
        """Trainable parameters plus BN running statistics, in registry order."""
        state = {p.name: p.data for p in self.parameters()}
        for norm in self.norms():
            state[f"{norm.name}.running_mean"] = norm.params.running_mean
            state[f"{norm.name}.running_var"] = norm.params.running_var
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = self.state_dict()
        missing = own.keys() - state.keys()
        if missing:
            raise CheckpointFormatError(f"missing records: {sorted(missing)[:5]}")
        for name, arr in own.items():
            src = np.asarray(state[name])
            if src.shape != arr.shape:
                raise CheckpointFormatError(f"record {name}: shape {src.shape} != expected {arr.shape}")
            arr[...] = src

    # -- forward --------------------------------------------------------------

    def forward(self, x: Tensor, mode: str = INFER, tape: Tape | None = None, trace: list | None = None) -> Tensor:
        """Return per-pixel class logits at the input's spatial extent.

        If ``trace`` is a list, (stage, shape) pairs are appended to it.
        """
        check_tensor4(x)
        if x.shape[1] != self.in_channels:
            raise ShapeError(f"expected {self.in_channels} input channels, got shape {x.shape}")
        if min(x.shape[2:]) < MIN_EXTENT:
            raise ShapeError(f"input extent {x.shape[2:]} below the {MIN_EXTENT}x{MIN_EXTENT} minimum")
        rate = self.dropout_rate
        note = trace.append if trace is not None else (lambda item: None)

        h = x
        skips = []
        for spec, stack in zip(self.levels, self.encoder):
            for block in stack:
                h = block(h, mode, tape)
            h = dropout(h, rate, mode, self.rng, tape)
            note((f"enc{spec.level}", h.shape))
            skips.append(h)
        for block in self.bridge:
            h = block(h, mode, tape)
        note(("bridge", h.shape))

        for i in reversed(range(len(self.levels))):
            skip = skips[i]
            h = self.upsamplers[i](h, tape, target_hw=skip.shape[2:])
            note((f"up{self.levels[i].level}", h.shape))
            h = concat_channels(h, skip, tape)
            h = self.decoder[i](h, mode, tape)
            h = dropout(h, rate, mode, self.rng, tape)
            note((f"dec{self.levels[i].level}", h.shape))
        logits = self.head(h, tape)
        note(("head", logits.shape))
        return logits

    __call__ = forward


def build_drunet104(
    in_channels: int = 4,
    n_class: int = 4,
    dropout_rate: float = 0.2,
    seed: int | None = 0,
    width_divisor: int = 1,
) -> DRUNet104:
    return DRUNet104(in_channels, n_class, dropout_rate, seed, width_divisor)


def forward(model: DRUNet104, x: Tensor, mode: str = INFER, tape: Tape | None = None) -> Tensor:
    return model.forward(x, mode, tape)


def conv_ledger(model: DRUNet104) -> dict[str, int]:
    ledger = {}
    for conv in model.convs():
        ledger[conv.role] = ledger.get(conv.role, 0) + 1
    return ledger


def count_conv_layers(model: DRUNet104) -> int:
    return sum(1 for conv in model.convs() if conv.counted)


def parameter_count(model: DRUNet104) -> int:
    """Number of trainable scalars (BN running statistics excluded).

    Computed from layer shapes, so it does not materialise any weights.
    """
    conv = sum(c.size for c in model.convs())
    norm = sum(2 * n.params.channels for n in model.norms())
    return conv + norm


# -- checkpoint container -------------------------------------------------------
#
# magic "DRU104\0" | u32 version | u32 n_class | f64 dropout_rate
# | u32 in_channels | u32 width_divisor | u32 record count
# then per record: u16 name length, utf-8 name, u8 ndim, u32 dims...,
# little-endian float32 payload.

MAGIC = b"DRU104\0"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<IIdIII")


def _write_record(fh, name: str, arr: np.ndarray) -> None:
    raw = name.encode("utf-8")
    arr = np.asarray(arr)
    fh.write(struct.pack("<H", len(raw)))
    fh.write(raw)
    fh.write(struct.pack("<B", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read_exact(fh, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise CheckpointFormatError("truncated checkpoint")
    return buf


def _read_record(fh) -> tuple[str, np.ndarray]:
    (length,) = struct.unpack("<H", _read_exact(fh, 2))
    name = _read_exact(fh, length).decode("utf-8")
    (ndim,) = struct.unpack("<B", _read_exact(fh, 1))
    shape = struct.unpack(f"<{ndim}I", _read_exact(fh, 4 * ndim))
    count = int(np.prod(shape, dtype=np.int64))
    data = np.frombuffer(_read_exact(fh, 4 * count), dtype="<f4").reshape(shape)
    return name, data.astype(np.float32)


def save_checkpoint(path, model: DRUNet104, extra: dict[str, np.ndarray] | None = None) -> None:
    """Write the model (and optional extra records, e.g. optimizer state)."""
    records = dict(model.state_dict())
    if extra:
        records.update(extra)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(_HEADER.pack(FORMAT_VERSION, model.n_class, model.dropout_rate, model.in_channels, model.width_divisor, len(records)))
        for name, arr in records.items():
            _write_record(fh, name, arr)


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise CheckpointFormatError(f"{path}: bad magic bytes, not a DR-Unet104 checkpoint")
        version, n_class, rate, in_ch, divisor, count = _HEADER.unpack(_read_exact(fh, _HEADER.size))
        if version != FORMAT_VERSION:
            raise CheckpointFormatError(f"{path}: unsupported format version {version}")
        records = dict(_read_record(fh) for _ in range(count))
        if fh.read(1):
            raise CheckpointFormatError(f"{path}: trailing bytes after {count} records")
    header = {"n_class": n_class, "dropout_rate": rate, "in_channels": in_ch, "width_divisor": divisor}
    return header, records


def load_checkpoint(path, seed: int | None = 0) -> tuple[DRUNet104, dict[str, np.ndarray]]:
    """Rebuild a model from ``path``; returns it with any non-model records."""
    header, records = read_checkpoint(path)
    model = DRUNet104(header["in_channels"], header["n_class"], header["dropout_rate"], seed, header["width_divisor"])
    own = model.state_dict().keys()
    model.load_state_dict(records)
    return model, {k: v for k, v in records.items() if k not in own}
