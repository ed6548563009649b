"""Volume ingestion, intensity standardisation, slice packing and PNG I/O.

Raw volume format (one file per modality or label volume)::

    DRVOL 1
    name <modality>
    dims <depth> <height> <width>
    dtype float32
    end
    <depth*height*width little-endian float32 values, C order>

Slice files live in ``<root>/<subject>/`` as ``<subject>_slice_<iii>.png``
(8-bit RGBA, channels flair, t1, t1ce, t2) and ``<subject>_seg_<iii>.png``
(8-bit greyscale, raw labels 0/1/2/4).
"""

from __future__ import annotations

import re
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

MODALITIES = ("flair", "t1", "t1ce", "t2")
LABEL_VALUES = (0, 1, 2, 4)
UPPER_RAIL = 254
CENTRE = 127

_PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"
_SLICE_RE = re.compile(r"^(?P<subject>.+)_(?P<kind>slice|seg)_(?P<index>\d{3,})\.png$")


class DataError(ValueError):
    """Base class for problems with input data."""


class DegenerateVolumeError(DataError):
    pass


class MissingModalityError(DataError):
    pass


class VolumeFormatError(DataError):
    pass


class MalformedPngError(DataError):
    pass


class ChannelCountError(DataError):
    pass


class BitDepthError(DataError):
    pass


class LabelDomainError(DataError):
    pass


class SliceGapError(DataError):
    pass


@dataclass
class VolumeStack:
    modalities: dict[str, np.ndarray]
    labels: np.ndarray | None = None
    subject_id: str = "subject"

    def __post_init__(self):
        missing = [m for m in MODALITIES if m not in self.modalities]
        if missing:
            raise MissingModalityError(f"{self.subject_id}: missing modality {missing[0]!r}")
        shapes = {m: np.shape(self.modalities[m]) for m in MODALITIES}
        if len(set(shapes.values())) != 1:
            raise DataError(f"{self.subject_id}: modality dims differ: {shapes}")
        if any(len(s) != 3 for s in shapes.values()):
            raise DataError(f"{self.subject_id}: modalities must be 3-D, got {shapes}")
        if self.labels is not None and np.shape(self.labels) != self.shape:
            raise DataError(f"{self.subject_id}: label dims {np.shape(self.labels)} != {self.shape}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(np.shape(self.modalities[MODALITIES[0]]))


@dataclass(frozen=True)
class NormalizationStats:
    mean: float
    sd: float


@dataclass
class SliceSample:
    image: np.ndarray  # (4, h, w) uint8
    label: np.ndarray | None
    subject_id: str
    slice_index: int


# -- standardisation -----------------------------------------------------------


def compute_norm_stats(volume: np.ndarray) -> NormalizationStats:
    """Mean and population SD over voxels strictly greater than zero."""
    fg = np.asarray(volume)[np.asarray(volume) > 0].astype(np.float64)
    if fg.size == 0:
        raise DegenerateVolumeError("volume has no foreground voxels (> 0)")
    mean = fg.mean()
    sd = float(np.sqrt(np.mean((fg - mean) ** 2)))
    if sd == 0:
        raise DegenerateVolumeError(f"foreground is constant ({fg[0]!r}); SD = 0")
    return NormalizationStats(float(mean), sd)


def round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def normalize_volume(volume: np.ndarray, stats: NormalizationStats) -> np.ndarray:
    """Map intensities to 8-bit: mean -> 127, one unit per 3*SD/128.

    Values beyond mean +/- 3 SD land on the rails 254 and 0; voxels that are
    exactly 0 (background) stay 0.
    """
    if stats.sd <= 0:
        raise DegenerateVolumeError("SD must be positive")
    v = np.asarray(volume, dtype=np.float64)
    scaled = round_half_away((v - stats.mean) * (128.0 / (3.0 * stats.sd)) + CENTRE)
    out = np.clip(scaled, 0, UPPER_RAIL)
    out[v > stats.mean + 3 * stats.sd] = UPPER_RAIL
    out[v < stats.mean - 3 * stats.sd] = 0
    out[v == 0] = 0
    return out.astype(np.uint8)


def normalize_stack(stack: VolumeStack) -> tuple[np.ndarray, dict[str, NormalizationStats]]:
    """Return the (4, D, H, W) uint8 volume and per-modality statistics."""
    stats = {m: compute_norm_stats(stack.modalities[m]) for m in MODALITIES}
    vol = np.stack([normalize_volume(stack.modalities[m], stats[m]) for m in MODALITIES])
    return vol, stats


# -- slicing --------------------------------------------------------------------


def volume_to_slices(stack: VolumeStack) -> list[SliceSample]:
    """Axial slices (along depth), four normalised modalities per slice."""
    vol, _ = normalize_stack(stack)
    return slices_from_normalized(vol, stack.labels, stack.subject_id)


def slices_from_normalized(vol: np.ndarray, labels: np.ndarray | None, subject_id: str) -> list[SliceSample]:
    lab = None if labels is None else np.asarray(labels).astype(np.uint8)
    return [
        SliceSample(
            np.ascontiguousarray(vol[:, k]),
            None if lab is None else np.ascontiguousarray(lab[k]),
            subject_id,
            k,
        )
        for k in range(vol.shape[1])
    ]


def slices_to_stack(samples: list[SliceSample]) -> tuple[np.ndarray, np.ndarray | None]:
    """Inverse of :func:`slices_from_normalized`: (4, D, H, W) images and labels."""
    ordered = sorted(samples, key=lambda s: s.slice_index)
    _check_contiguous([s.slice_index for s in ordered])
    images = np.stack([s.image for s in ordered], axis=1)
    if any(s.label is None for s in ordered):
        return images, None
    return images, np.stack([s.label for s in ordered])


def _check_contiguous(indices) -> None:
    present = set(indices)
    if len(present) != len(indices):
        raise SliceGapError("duplicate slice indices")
    for k in range(len(indices)):
        if k not in present:
            raise SliceGapError(f"gap at {k}")


def reconstruct_volume(masks) -> np.ndarray:
    """Stack 2-D masks along depth.

    ``masks`` is a mapping or sequence of (slice_index, mask) pairs; indices
    must cover 0..S-1 exactly.
    """
    items = sorted(masks.items() if isinstance(masks, dict) else masks, key=lambda kv: kv[0])
    _check_contiguous([k for k, _ in items])
    vol = np.stack([np.asarray(m) for _, m in items])
    validate_labels(vol)
    return vol.astype(np.uint8)


def validate_labels(labels: np.ndarray, where: str = "") -> None:
    bad = ~np.isin(labels, LABEL_VALUES)
    if bad.any():
        coords = [tuple(int(c) for c in idx) for idx in np.argwhere(bad)[:10]]
        values = sorted({int(v) for v in np.asarray(labels)[bad]})
        raise LabelDomainError(
            f"{where}label values {values} outside {LABEL_VALUES}; {int(bad.sum())} pixels, first at {coords}"
        )


# -- PNG slice files ---------------------------------------------------------------


def slice_filename(subject_id: str, index: int, kind: str = "slice") -> str:
    return f"{subject_id}_{kind}_{index:03d}.png"


def write_slice(sample: SliceSample, root) -> tuple[Path, Path | None]:
    """Write the image (and mask, if any) under ``<root>/<subject>/``."""
    image = np.asarray(sample.image)
    if image.shape[0] != 4 or image.ndim != 3:
        raise ChannelCountError(f"slice image must be (4, h, w), got {image.shape}")
    if image.dtype != np.uint8 or image.max(initial=0) > UPPER_RAIL:
        raise DataError("slice image must be uint8 in [0, 254]")
    folder = Path(root) / sample.subject_id
    folder.mkdir(parents=True, exist_ok=True)
    img_path = folder / slice_filename(sample.subject_id, sample.slice_index)
    Image.fromarray(np.ascontiguousarray(image.transpose(1, 2, 0)), mode="RGBA").save(img_path, optimize=False)
    seg_path = None
    if sample.label is not None:
        validate_labels(sample.label)
        seg_path = folder / slice_filename(sample.subject_id, sample.slice_index, "seg")
        Image.fromarray(np.asarray(sample.label, dtype=np.uint8), mode="L").save(seg_path, optimize=False)
    return img_path, seg_path


def _png_header(path) -> tuple[int, int]:
    """(bit depth, colour type) from the IHDR chunk."""
    with open(path, "rb") as fh:
        head = fh.read(33)
    if len(head) < 33 or head[:8] != _PNG_SIGNATURE or head[12:16] != b"IHDR":
        raise MalformedPngError(f"{path}: not a PNG file")
    (crc,) = struct.unpack(">I", head[29:33])
    if zlib.crc32(head[12:29]) != crc:
        raise MalformedPngError(f"{path}: corrupt IHDR chunk")
    return head[24], head[25]


_CHANNELS = {0: 1, 2: 3, 3: 1, 4: 2, 6: 4}


def _read_png(path, channels: int) -> np.ndarray:
    depth, colour = _png_header(path)
    if depth != 8:
        raise BitDepthError(f"{path}: bit depth {depth}, expected 8")
    found = _CHANNELS.get(colour)
    if colour == 3:
        raise ChannelCountError(f"{path}: palette PNG, expected {channels} direct channels")
    if found != channels:
        raise ChannelCountError(f"{path}: {found} channels, expected {channels}")
    try:
        with Image.open(path) as im:
            arr = np.asarray(im)
    except (OSError, SyntaxError, ValueError) as exc:
        raise MalformedPngError(f"{path}: {exc}") from exc
    return arr


def read_slice(path, seg_path=None) -> SliceSample:
    path = Path(path)
    m = _SLICE_RE.match(path.name)
    if m is None or m["kind"] != "slice":
        raise DataError(f"{path.name}: expected <subject>_slice_<index>.png")
    image = _read_png(path, 4).transpose(2, 0, 1).copy()
    label = None
    if seg_path is None:
        candidate = path.with_name(slice_filename(m["subject"], int(m["index"]), "seg"))
        seg_path = candidate if candidate.exists() else None
    if seg_path is not None:
        label = _read_png(seg_path, 1).copy()
        validate_labels(label, f"{Path(seg_path).name}: ")
    return SliceSample(image, label, m["subject"], int(m["index"]))


def read_mask(path) -> np.ndarray:
    label = _read_png(path, 1).copy()
    validate_labels(label, f"{Path(path).name}: ")
    return label


def read_subject_slices(folder) -> list[SliceSample]:
    """All slices in one subject directory, ordered and gap-checked."""
    folder = Path(folder)
    samples = [read_slice(p) for p in sorted(folder.glob("*_slice_*.png"))]
    if not samples:
        raise DataError(f"{folder}: no slice files")
    _check_contiguous([s.slice_index for s in samples])
    return sorted(samples, key=lambda s: s.slice_index)


def write_subject_slices(samples: list[SliceSample], root) -> list[Path]:
    return [write_slice(s, root)[0] for s in samples]


# -- raw volume container ---------------------------------------------------------------


def write_raw_volume(path, volume: np.ndarray, name: str) -> None:
    volume = np.asarray(volume)
    if volume.ndim != 3:
        raise VolumeFormatError(f"raw volumes are 3-D, got shape {volume.shape}")
    header = f"DRVOL 1\nname {name}\ndims {' '.join(str(d) for d in volume.shape)}\ndtype float32\nend\n"
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(np.ascontiguousarray(volume, dtype="<f4").tobytes())


def read_raw_volume(path) -> tuple[np.ndarray, str]:
    with open(path, "rb") as fh:
        fields = {}
        first = fh.readline().decode("ascii", "replace").strip()
        if first != "DRVOL 1":
            raise VolumeFormatError(f"{path}: not a DRVOL 1 file")
        while True:
            line = fh.readline()
            if not line:
                raise VolumeFormatError(f"{path}: header has no 'end' line")
            text = line.decode("ascii", "replace").strip()
            if text == "end":
                break
            key, _, value = text.partition(" ")
            fields[key] = value
        payload = fh.read()
    try:
        dims = tuple(int(v) for v in fields["dims"].split())
        name = fields["name"]
    except (KeyError, ValueError) as exc:
        raise VolumeFormatError(f"{path}: bad header {fields}") from exc
    if fields.get("dtype") != "float32":
        raise VolumeFormatError(f"{path}: unsupported dtype {fields.get('dtype')!r}")
    if len(dims) != 3 or len(payload) != 4 * int(np.prod(dims)):
        raise VolumeFormatError(f"{path}: payload of {len(payload)} bytes does not match dims {dims}")
    return np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32), name


def raw_path(root, subject_id: str, name: str) -> Path:
    return Path(root) / subject_id / f"{subject_id}_{name}.raw"


def write_subject(stack: VolumeStack, root) -> None:
    for m in MODALITIES:
        write_raw_volume(raw_path(root, stack.subject_id, m), stack.modalities[m], m)
    if stack.labels is not None:
        write_raw_volume(raw_path(root, stack.subject_id, "seg"), stack.labels, "seg")


def read_subject(root, subject_id: str) -> VolumeStack:
    vols = {}
    for m in MODALITIES:
        path = raw_path(root, subject_id, m)
        if not path.exists():
            raise MissingModalityError(f"{subject_id}: missing modality {m!r} ({path})")
        vols[m], _ = read_raw_volume(path)
    labels = None
    seg = raw_path(root, subject_id, "seg")
    if seg.exists():
        labels, _ = read_raw_volume(seg)
        labels = labels.astype(np.int64)
        validate_labels(labels, f"{seg.name}: ")
        labels = labels.astype(np.uint8)
    return VolumeStack(vols, labels, subject_id)
