"""
The command line end to end
===========================

The same pipeline through the ``gatedlongrec`` command: write a corpus,
train, evaluate and ask for recommendations. Calls go through ``main`` so
the script runs from a checkout without a shell.
"""

import tempfile
from pathlib import Path

from gatedlongrec.cli import main
from gatedlongrec.data import load_dataset

work = Path(tempfile.mkdtemp(prefix="gatedlongrec-demo-"))
data, run = work / "synthetic", work / "run"

main(["synth", "--out", str(data), "--users", "30", "--cates", "3", "--items-per-cate", "6",
      "--seq-len", "40", "--M", "4"])

small = ["--set", "M=4", "--set", "T=4", "--set", "k=2", "--set", "Z=8", "--set", "d_e=16", "--set", "d_c=8",
         "--set", "d_s=16", "--set", "d_l=16", "--set", "dropout=0"]
main(["train", "--dataset", str(data), "--out", str(run), *small, "--lr", "0.02", "--epochs", "15",
      "--threads", "1"])
print((run / "train.log").read_text().splitlines()[-1])

main(["evaluate", "--dataset", str(data), "--checkpoint", str(run / "checkpoint.bin"), "--ks", "1,10"])
main(["evaluate", "--dataset", str(data), "--checkpoint", str(run / "checkpoint.bin"), "--variant", "short",
      "--ks", "1,10"])
main(["evaluate", "--dataset", str(data), "--baseline", "fot", "--ks", "1,10"])

# history as item:category pairs; gate weights go to stderr
seq = load_dataset(data).sequences[0][:12]
main(["recommend", "--checkpoint", str(run / "checkpoint.bin"), "-n", "3",
      "--history", " ".join(f"{a.item}:{a.category}" for a in seq)])
print("outputs in", work)
