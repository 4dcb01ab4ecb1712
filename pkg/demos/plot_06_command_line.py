"""
The ``lsct`` command line
=========================

Synthesize a dataset, train for one epoch, evaluate and compare two
segment files, all through ``lsct.cli.main``.
"""

# %%
import json
import tempfile
from pathlib import Path

from lsct.cli import main

root = Path(tempfile.mkdtemp())
main(["synth", "--out", str(root / "data"), "--pairs", "40", "--seed", "0"])

config = {"data": {"manifest": str(root / "data" / "manifest.json")},
          "model": {"encoder_channels": [4, 8], "codebook_size": 16, "msek_heads": 2},
          "train": {"epochs": 1, "batch_size": 8},
          "eval": {"plots": 2}}
(root / "config.json").write_text(json.dumps(config))

# %%
main(["train", "--config", str(root / "config.json"), "--out", str(root / "run")])
main(["eval", "--checkpoint", str(root / "run" / "last.ckpt"),
      "--manifest", str(root / "data" / "manifest.json"),
      "--mask-ratios", "0.1,0.5,0.9", "--report", str(root / "report")])

# %%
seg = root / "data" / "segments" / "pair00000_abp.f32"
main(["metric", str(seg), str(seg)])
print("outputs under", root)
