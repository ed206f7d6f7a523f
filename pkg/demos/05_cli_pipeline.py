"""The same pipeline from the command line, stage by stage.

Each call is equivalent to running ``flearn <args>`` in a shell. Every output
gets a ``.manifest.json`` with argv, seeds and SHA-256 checksums.
"""
import json
import sys
import tempfile
from pathlib import Path

from flearn.cli import main

work = Path(sys.argv[1] if len(sys.argv) > 1 else tempfile.mkdtemp(prefix="flearn-"))


def flearn(*args):
    argv = [str(a) for a in args]
    print("$ flearn", " ".join(argv))
    code = main(argv)
    if code:
        raise SystemExit(code)


flearn("gen-data", "--pairs", 50, "--background", 50, "--control", 10, "--seed", 7, "--out", work / "corpus")
flearn("pretrain", "--data", work / "corpus", "--seed", 1, "--out", work / "base.flrn")
flearn("train-original", "--data", work / "corpus", "--model", work / "base.flrn", "--out", work / "orig.flrn")

# forgetting then learning, as two stages
flearn("forget", "--data", work / "corpus", "--model", work / "orig.flrn", "--lambda", 0.3,
       "--out", work / "forgotten.flrn", "--delta-out", work / "old_delta.flrn")
flearn("learn", "--data", work / "corpus", "--model", work / "forgotten.flrn", "--out", work / "staged.flrn")
# and as one
flearn("edit", "--data", work / "corpus", "--model", work / "orig.flrn", "--strategy", "f_ft",
       "--lambda", 0.3, "--out", work / "edited.flrn")
print("staged == edit:", (work / "staged.flrn").read_bytes() == (work / "edited.flrn").read_bytes())

flearn("eval", "--data", work / "corpus", "--pre", work / "orig.flrn", "--post", work / "edited.flrn", "--out", work / "report.csv")
print((work / "report.csv").read_text())
flearn("analyze-params", "--model", work / "forgotten.flrn", "--ref", work / "orig.flrn", "--out", work / "distances.csv")

manifest = json.loads((work / "edited.flrn.manifest.json").read_text())
print("manifest seeds:", manifest["seeds"], "outputs:", list(manifest["outputs"].values()))
