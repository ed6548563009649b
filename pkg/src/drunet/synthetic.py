"""Synthetic multi-modal "tumor" data for smoke tests and demos.

Each lesion is three nested discs (or balls): oedema (2) outside, tumor
core (1) inside it and enhancing tumor (4) at the centre. Every modality
gets a different intensity signature per tissue plus Gaussian noise, so the
classes are separable but only by combining channels.
"""

from __future__ import annotations

import numpy as np

MODALITIES = ("flair", "t1", "t1ce", "t2")

# mean intensity per tissue (background brain, oedema, core, enhancing) per modality
_SIGNATURE = {
    "flair": (100.0, 220.0, 150.0, 170.0),
    "t1": (120.0, 90.0, 70.0, 110.0),
    "t1ce": (110.0, 100.0, 80.0, 240.0),
    "t2": (90.0, 200.0, 230.0, 160.0),
}
_TISSUE = {0: 0, 2: 1, 1: 2, 4: 3}


def _lesion_labels(grid, centre, radii) -> np.ndarray:
    dist = np.sqrt(sum((g - c) ** 2 for g, c in zip(grid, centre)))
    labels = np.zeros(dist.shape, dtype=np.uint8)
    outer, mid, inner = radii
    labels[dist <= outer] = 2
    labels[dist <= mid] = 1
    labels[dist <= inner] = 4
    return labels


def _intensities(labels, brain, rng, noise) -> dict[str, np.ndarray]:
    out = {}
    for name in MODALITIES:
        sig = np.asarray(_SIGNATURE[name])
        vol = np.zeros(labels.shape, dtype=np.float32)
        for lab, tissue in _TISSUE.items():
            vol[labels == lab] = sig[tissue]
        vol += rng.normal(0.0, noise, labels.shape).astype(np.float32)
        vol = np.clip(vol, 1.0, None)
        vol[~brain] = 0.0
        out[name] = vol
    return out


def synthetic_slices(count: int = 10, size: int = 64, seed: int = 0, noise: float = 10.0):
    """Return (images uint8 (count, 4, size, size), labels (count, size, size) in {0,1,2,4})."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    images = np.zeros((count, 4, size, size), dtype=np.uint8)
    labels = np.zeros((count, size, size), dtype=np.uint8)
    brain = (yy - size / 2) ** 2 + (xx - size / 2) ** 2 <= (0.47 * size) ** 2
    for k in range(count):
        outer = rng.uniform(0.12, 0.22) * size
        centre = rng.uniform(size / 2 - 0.15 * size, size / 2 + 0.15 * size, 2)
        lab = _lesion_labels((yy, xx), centre, (outer, 0.65 * outer, 0.35 * outer))
        lab[~brain] = 0
        vols = _intensities(lab, brain, rng, noise)
        images[k] = np.stack([np.clip(np.rint(vols[m]), 0, 254) for m in MODALITIES]).astype(np.uint8)
        labels[k] = lab
    return images, labels


def synthetic_subject(shape=(155, 240, 240), seed: int = 0, noise: float = 10.0, subject_id: str | None = None):
    """A :class:`~drunet.data.VolumeStack` with one spherical lesion."""
    from .data import VolumeStack

    rng = np.random.default_rng(seed)
    d, h, w = shape
    zz, yy, xx = np.mgrid[0:d, 0:h, 0:w].astype(np.float32)
    half = np.array(shape, dtype=np.float32) / 2
    brain = ((zz - half[0]) / (0.45 * d)) ** 2 + ((yy - half[1]) / (0.45 * h)) ** 2 + ((xx - half[2]) / (0.45 * w)) ** 2 <= 1
    outer = rng.uniform(0.12, 0.2) * min(shape)
    centre = half + rng.uniform(-0.1, 0.1, 3) * np.array(shape)
    lab = _lesion_labels((zz, yy, xx), centre, (outer, 0.65 * outer, 0.35 * outer))
    lab[~brain] = 0
    vols = _intensities(lab, brain, rng, noise)
    return VolumeStack(vols, lab, subject_id or f"synth{seed:03d}")
