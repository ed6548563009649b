"""From raw volumes to 8-bit PNG slices and back again."""

import tempfile
from pathlib import Path

import numpy as np

from drunet.data import (
    compute_norm_stats,
    normalize_stack,
    read_subject,
    read_subject_slices,
    reconstruct_volume,
    slices_to_stack,
    volume_to_slices,
    write_slice,
    write_subject,
)
from drunet.synthetic import synthetic_subject

stack = synthetic_subject((40, 120, 120), seed=1, subject_id="demo01")
print("modalities:", {m: v.shape for m, v in stack.modalities.items()})
print("labels present:", np.unique(stack.labels))

for name, vol in stack.modalities.items():
    s = compute_norm_stats(vol)
    print(f"  {name:5s} mean {s.mean:7.2f}  sd {s.sd:6.2f}  (over voxels > 0)")

vol, stats = normalize_stack(stack)
print("standardised range:", vol.min(), vol.max(), "| brain median:", np.median(vol[vol > 0]))

root = Path(tempfile.mkdtemp())
write_subject(stack, root / "raw")
again = read_subject(root / "raw", "demo01")
print("raw round trip exact:", all(np.array_equal(again.modalities[m], stack.modalities[m]) for m in stack.modalities))

for sample in volume_to_slices(stack):
    write_slice(sample, root / "slices")
files = sorted((root / "slices" / "demo01").iterdir())
print(len(files), "PNG files, e.g.", files[0].name, files[1].name)

samples = read_subject_slices(root / "slices" / "demo01")
back, labels = slices_to_stack(samples)
print("PNG round trip exact:", np.array_equal(back, vol) and np.array_equal(labels, stack.labels))
print("reconstructed mask volume:", reconstruct_volume([(s.slice_index, s.label) for s in samples]).shape)
