"""
Do the metrics agree?
=====================

Full evaluation of all three explainers under all four distortion families,
then the agreement table: for each family, cluster and explainer, the Pearson
correlation between the per-level means of two metrics. Empty cells mean one
of the series was flat or had a level with no samples.
"""

import sys
import tempfile
from pathlib import Path

from xstab.pipeline import RunConfig, make_desk_corpus, run_evaluation, write_report

work = Path(sys.argv[1] if len(sys.argv) > 1 else tempfile.mkdtemp())
paths = make_desk_corpus(work / "desk", n_images=10, seed=1234)

cfg = RunConfig.from_dict(
    dict(**paths, train_toy=5, distortions=["noise", "blur", "brightness", "perspective"], seed=42)
)
report = run_evaluation(cfg)
write_report(report, work / "report")

print("fusion weights:", [round(w, 3) for w in report.data["provenance"]["fusion_weights"]])
print((work / "report" / "consensus.csv").read_text())
print("report files in", work / "report")
