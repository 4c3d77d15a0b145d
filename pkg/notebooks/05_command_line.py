"""
The full pipeline from the command line
=======================================

The ``mdss`` command covers data generation, training, calibration,
inference and evaluation. This script drives it in-process with a tiny
configuration; the same arguments work from a shell.
"""

import json
import tempfile
from pathlib import Path

from mdss.cli import main

work = Path(tempfile.mkdtemp())

# %%
# A small synthetic category.
main(["gen-synth", "--out", str(work / "data"), "--size", "64", "--n-train", "10", "--n-val", "4",
      "--n-test-normal", "6", "--n-test-anom", "6"])

# %%
# Config files hold RunConfig keys; flags override them.
cfg = {"dataset_root": str(work / "data"), "categories": ["synthetic"], "image_size": 64,
       "st_channels": [16, 32, 32, 32], "st_steps": 200, "sdf_steps": 200, "k_points": 200,
       "sdf_hidden": [64, 64], "queries_per_patch": 64}
(work / "cfg.json").write_text(json.dumps(cfg))
main(["train", "--config", str(work / "cfg.json"), "--seed", "1", "--out", str(work / "bundle")])
print(sorted(p.name for p in (work / "bundle").iterdir()))

# %%
# Scores and fused maps, then the report table.
main(["infer", "--bundle", str(work / "bundle"), "--out", str(work / "maps")])
main(["eval", "--bundle", str(work / "bundle"), "--out", str(work / "report.json")])
