"""The whole pipeline through the command line, in a temporary directory."""

import subprocess
import sys
import tempfile
from pathlib import Path


def iseg(*args):
    cmd = [sys.executable, "-m", "isegmenter", *map(str, args)]
    print("$ iseg", " ".join(map(str, args)))
    out = subprocess.run(cmd, check=True, capture_output=True, text=True).stdout
    print(out.rstrip(), end="\n\n")


with tempfile.TemporaryDirectory() as tmp:
    d = Path(tmp)
    iseg("synth", "--out", d / "data", "--n", "6", "--classes", "2", "--seed", "4", "--model-out", d / "fp32.iseg")
    iseg("calibrate", "--model", d / "fp32.iseg", "--data", d / "data", "--samples", "1", "--out", d / "int.iseg")
    iseg("infer", "--model", d / "int.iseg", "--image", d / "data" / "img_0005.iseg", "--out", d / "map.pgm",
         "--trace-fp-ops")
    iseg("compare", "--a", d / "fp32.iseg", "--b", d / "int.iseg", "--data", d / "data")
    iseg("ablate-gelu", "--model", d / "fp32.iseg", "--data", d / "data", "--lambdas", "1,6")
    iseg("stats", "--model", d / "fp32.iseg", d / "int.iseg")
