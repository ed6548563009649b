"""The four commands end to end on two small synthetic subjects.

Equivalent shell session::

    drunet preprocess --data-root raw --out slices
    drunet train --data-root slices --out model.ckpt --epochs 3 --batch 4 --width-divisor 8
    drunet predict --data-root slices --checkpoint model.ckpt --out pred
    drunet evaluate --data-root pred --truth raw --out report.csv
"""

import tempfile
from pathlib import Path

from drunet.cli import main
from drunet.data import write_subject
from drunet.synthetic import synthetic_subject

work = Path(tempfile.mkdtemp())
for k in range(2):
    write_subject(synthetic_subject((16, 64, 64), seed=k, subject_id=f"sub{k}"), work / "raw")

steps = [
    ["preprocess", "--data-root", work / "raw", "--out", work / "slices", "-v"],
    ["train", "--data-root", work / "slices", "--out", work / "model.ckpt", "--epochs", "3", "--batch", "4",
     "--width-divisor", "8", "--deterministic"],
    ["predict", "--data-root", work / "slices", "--checkpoint", work / "model.ckpt", "--out", work / "pred"],
    ["evaluate", "--data-root", work / "pred", "--truth", work / "raw", "--out", work / "report.csv"],
]
for argv in steps:
    code = main([str(a) for a in argv])
    print(f"drunet {argv[0]} -> exit {code}")

# three epochs of a width/8 clone: the scores only show the plumbing works
print((work / "report.csv").read_text())
print("outputs under", work)
