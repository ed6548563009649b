"""Score a deliberately imperfect prediction against its ground truth."""

import tempfile
from pathlib import Path

import numpy as np
from scipy import ndimage

from drunet.metrics import MetricConventions, cohort_summary, evaluate_case, format_table, hausdorff95, write_report_csv
from drunet.synthetic import synthetic_subject

reports = []
for k in range(3):
    truth = synthetic_subject((32, 64, 64), seed=k).labels
    pred = truth.copy()
    # shift the enhancing core by k voxels and erode the oedema a little
    pred[pred == 4] = 1
    pred[np.roll(truth == 4, k, axis=2)] = 4
    oedema = ndimage.binary_erosion(truth > 0, iterations=1)
    pred[(truth > 0) & ~oedema] = 0
    report = evaluate_case(pred, truth, f"case{k}")
    reports.append(report)
    print(report.subject_id, {r: round(v["dsc"], 3) for r, v in report.values.items()})

print()
print(format_table(cohort_summary(reports)))

# one-empty HD95 defaults to the volume diagonal; a fixed sentinel can be swapped in
empty = np.zeros((8, 8, 8), bool)
blob = empty.copy()
blob[2:4, 2:4, 2:4] = True
print("\none-empty HD95, default:", round(hausdorff95(blob, empty), 2))
print("one-empty HD95, sentinel 373.13:", hausdorff95(blob, empty, conventions=MetricConventions(one_empty_hd=373.13)))

out = Path(tempfile.mkdtemp()) / "report.csv"
write_report_csv(out, reports, skipped=["case_without_prediction"])
print()
print(out.read_text())
