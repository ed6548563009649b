"""Cross-entropy loss, Adam, flip augmentation and the train/predict loops."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .autodiff import Gradients, Tape, Tensor, backward
from .model import DRUNet104, save_checkpoint
from .ops import INFER, TRAIN, argmax_channels

log = logging.getLogger(__name__)

EXTERNAL_LABELS = (0, 1, 2, 4)
PROB_FLOOR = 1e-12

_to_contiguous = np.full(256, -1, dtype=np.int64)
for _i, _lab in enumerate(EXTERNAL_LABELS):
    _to_contiguous[_lab] = _i


class LabelError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


def labels_to_contiguous(labels: np.ndarray) -> np.ndarray:
    """Map external labels {0, 1, 2, 4} to class indices 0..3."""
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() > 255):
        raise LabelError(f"label values outside 0..255: {np.unique(labels)}")
    out = _to_contiguous[labels.astype(np.int64)]
    if (out < 0).any():
        bad = tuple(int(v) for v in np.argwhere(out < 0)[0])
        raise LabelError(f"label {int(labels[bad])} at {bad} is not one of {EXTERNAL_LABELS}")
    return out


def labels_to_external(classes: np.ndarray) -> np.ndarray:
    return np.asarray(EXTERNAL_LABELS, dtype=np.uint8)[classes]


def to_network_input(images: np.ndarray) -> np.ndarray:
    """8-bit slice stacks are scaled to [0, 1]; float input passes through."""
    images = np.asarray(images)
    if images.dtype == np.uint8:
        return images.astype(np.float32) / np.float32(255.0)
    return images.astype(np.float32, copy=False)


# -- loss ----------------------------------------------------------------------


def sparse_ce_loss(logits: Tensor, labels: np.ndarray, tape: Tape | None = None) -> Tensor:
    """Mean over every pixel of -log softmax(logits)[true class].

    The probability is floored at 1e-12; floored pixels pass no gradient.
    """
    z = logits.data
    n, c, h, w = z.shape
    labels = np.asarray(labels)
    if labels.shape != (n, h, w):
        raise LabelError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    bad = (labels < 0) | (labels >= c)
    if bad.any():
        idx = tuple(int(v) for v in np.argwhere(bad)[0])
        raise LabelError(f"label {int(labels[idx])} at pixel {idx} outside [0, {c})")

    shifted = z - z.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    index = labels[:, None].astype(np.int64)
    picked = np.take_along_axis(log_probs, index, axis=1)[:, 0]
    floor = math.log(PROB_FLOOR)
    floored = picked < floor
    count = n * h * w
    loss = Tensor(-np.maximum(picked, floor).sum(dtype=np.float64) / count, dtype=z.dtype)

    if tape is not None:

        def grad_fn(g):
            d = np.exp(log_probs)
            np.put_along_axis(d, index, np.take_along_axis(d, index, 1) - 1, 1)
            d *= (~floored)[:, None]
            return (d * (g / count),)

        tape.record("sparse_ce_loss", (logits,), loss, grad_fn)
    return loss


# -- optimiser -----------------------------------------------------------------


@dataclass
class AdamState:
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def records(self) -> dict[str, np.ndarray]:
        """Moment arrays and step count, for storage alongside a checkpoint."""
        out = {"adam/t": np.array(self.t, dtype=np.float32)}
        for k in self.m:
            out[f"adam/m/{k}"] = self.m[k]
            out[f"adam/v/{k}"] = self.v[k]
        return out

    @classmethod
    def from_records(cls, records: dict[str, np.ndarray], **hyper) -> "AdamState":
        state = cls(**hyper)
        if "adam/t" in records:
            state.t = int(records["adam/t"])
        for key, arr in records.items():
            if key.startswith("adam/m/"):
                state.m[key[len("adam/m/") :]] = np.array(arr)
            elif key.startswith("adam/v/"):
                state.v[key[len("adam/v/") :]] = np.array(arr)
        return state


def _key(p: Tensor) -> str:
    return p.name if p.name is not None else f"#{p.id}"


def adam_step(params: Sequence[Tensor], grads: Gradients | Sequence[np.ndarray], state: AdamState) -> None:
    """One bias-corrected Adam update, applied to ``params`` in place."""
    if isinstance(grads, Gradients):
        grads = [grads[p] for p in params]
    if len(grads) != len(params):
        raise ValueError(f"{len(params)} parameters but {len(grads)} gradients")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    corr1 = 1 - b1**state.t
    corr2 = 1 - b2**state.t
    for p, g in zip(params, grads):
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter {_key(p)} shape {p.shape}")
        key = _key(p)
        m = state.m.get(key)
        if m is None:
            m = state.m[key] = np.zeros_like(p.data)
            state.v[key] = np.zeros_like(p.data)
        v = state.v[key]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        m_hat = m / corr1
        v_hat = v / corr2
        p.data -= (state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)).astype(p.data.dtype)


# -- augmentation ----------------------------------------------------------------


def augment_flip(images: np.ndarray, labels: np.ndarray | None, rng: np.random.Generator, p: float = 0.5):
    """Flip each sample left-right and/or anterior-posterior with probability ``p``.

    Returns (images, labels, flips) where ``flips[i] = (flip_ap, flip_lr)``.
    The label map of a sample always receives the same flips as its image.
    """
    if labels is not None and labels.shape[-2:] != images.shape[-2:]:
        raise ValueError(f"image extent {images.shape[-2:]} != label extent {labels.shape[-2:]}")
    flips = rng.random((images.shape[0], 2)) < p
    return (*apply_flips(images, labels, flips), flips)


def apply_flips(images: np.ndarray, labels: np.ndarray | None, flips: np.ndarray):
    images = images.copy()
    labels = None if labels is None else labels.copy()
    for i, (ap, lr) in enumerate(flips):
        if ap:
            images[i] = images[i, :, ::-1, :]
            if labels is not None:
                labels[i] = labels[i, ::-1, :]
        if lr:
            images[i] = images[i, :, :, ::-1]
            if labels is not None:
                labels[i] = labels[i, :, ::-1]
    return images, labels


# -- training loop ----------------------------------------------------------------


@dataclass
class TrainConfig:
    batch_size: int = 10
    epochs: int = 50
    learning_rate: float = 1e-4
    dropout_rate: float = 0.2
    augment_flips: bool = True
    seed: int = 0
    checkpoint_every_epoch: bool = False

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")


@dataclass
class SliceDataset:
    """Network-ready slices: float images (S, C, H, W) and class maps (S, H, W)."""

    images: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.images = to_network_input(self.images)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) == 0:
            raise TrainingError("dataset is empty")
        if self.images.shape[0] != self.labels.shape[0] or self.images.shape[2:] != self.labels.shape[1:]:
            raise TrainingError(f"images {self.images.shape} and labels {self.labels.shape} disagree")

    def __len__(self) -> int:
        return len(self.images)

    @classmethod
    def from_samples(cls, samples) -> "SliceDataset":
        """Build from SliceSample objects carrying external labels."""
        samples = [s for s in samples if s.label is not None]
        if not samples:
            raise TrainingError("no labelled slices")
        shapes = {s.image.shape for s in samples}
        if len(shapes) != 1:
            raise TrainingError(f"slices do not share dims: {sorted(shapes)}")
        images = np.stack([s.image for s in samples])
        labels = labels_to_contiguous(np.stack([s.label for s in samples]))
        return cls(images, labels)


@dataclass
class TrainResult:
    model: DRUNet104
    history: list[float]
    optimizer: AdamState


def train_step(model: DRUNet104, images: np.ndarray, labels: np.ndarray, state: AdamState) -> float:
    tape = Tape()
    logits = model.forward(Tensor(images), TRAIN, tape)
    loss = sparse_ce_loss(logits, labels, tape)
    value = loss.item()
    if not math.isfinite(value):
        return value
    grads = backward(tape, loss)
    adam_step(model.parameters(), grads, state)
    return value


def train(
    model: DRUNet104,
    dataset: SliceDataset,
    config: TrainConfig,
    checkpoint_path=None,
    loss_csv=None,
    optimizer: AdamState | None = None,
    on_epoch: Callable[[int, float], None] | None = None,
) -> TrainResult:
    """Shuffle, batch, augment and optimise for ``config.epochs`` epochs.

    Each epoch's mean batch loss is appended to the returned history.
    """
    if len(dataset) == 0:
        raise TrainingError("dataset is empty")
    model.dropout_rate = config.dropout_rate
    shuffle_seq, augment_seq = np.random.SeedSequence(config.seed).spawn(2)
    shuffle_rng = np.random.default_rng(shuffle_seq)
    augment_rng = np.random.default_rng(augment_seq)
    state = optimizer or AdamState(learning_rate=config.learning_rate)
    history: list[float] = []

    batch_index = 0
    for epoch in range(config.epochs):
        order = shuffle_rng.permutation(len(dataset))
        losses = []
        for start in range(0, len(order), config.batch_size):
            idx = order[start : start + config.batch_size]
            images, labels = dataset.images[idx], dataset.labels[idx]
            if config.augment_flips:
                images, labels, _ = augment_flip(images, labels, augment_rng)
            value = train_step(model, images, labels, state)
            if not math.isfinite(value):
                raise TrainingError(f"non-finite loss {value} at batch {batch_index} (epoch {epoch + 1})")
            losses.append(value)
            batch_index += 1
        mean_loss = float(np.mean(losses))
        history.append(mean_loss)
        log.info("epoch %d/%d loss %.6f", epoch + 1, config.epochs, mean_loss)
        if on_epoch is not None:
            on_epoch(epoch + 1, mean_loss)
        if checkpoint_path is not None and config.checkpoint_every_epoch:
            save_checkpoint(checkpoint_path, model, state.records())

    if loss_csv is not None:
        write_loss_csv(loss_csv, history)
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, model, state.records())
    return TrainResult(model, history, state)


def write_loss_csv(path, history: Sequence[float]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "mean_loss"])
        for epoch, value in enumerate(history, start=1):
            writer.writerow([epoch, repr(float(value))])


# -- inference --------------------------------------------------------------------


def predict_classes(model: DRUNet104, images: np.ndarray, batch_size: int = 10) -> np.ndarray:
    """Infer-mode argmax class map (S, H, W) for a stack of slices."""
    images = to_network_input(images)
    out = []
    for start in range(0, len(images), batch_size):
        logits = model.forward(Tensor(images[start : start + batch_size]), INFER)
        out.append(argmax_channels(logits))
    return np.concatenate(out).astype(np.int64)


def predict_volume(model: DRUNet104, slices, batch_size: int = 10) -> np.ndarray:
    """Predict an ordered slice stack and return the (S, H, W) external label volume."""
    if isinstance(slices, np.ndarray):
        images = slices
    else:
        shapes = {s.image.shape for s in slices}
        if len(shapes) != 1:
            raise ValueError(f"slice dims inconsistent: {sorted(shapes)}")
        images = np.stack([s.image for s in slices])
    return labels_to_external(predict_classes(model, images, batch_size))
