"""Drive the command-line interface: dataset, gradcheck, a small ablation.

The same subcommands work standalone:  langseg gen-data / train / eval /
gradcheck / ablate. Reports are JSON lines, one row per experiment.
"""

import json
import tempfile

from langseg.cli import main

data_dir = tempfile.mkdtemp(prefix="langseg-cli-demo-")

print("== gen-data ==")
main(["gen-data", "--out", data_dir, "--n-train", "40", "--n-test", "8",
      "--seed", "3"])

print()
print("== gradcheck (every layer type plus the end-to-end composite) ==")
code = main(["gradcheck", "--seed", "3"])
print("exit code:", code)

print()
print("== a miniature decoder-count ablation (1 epoch per row) ==")
code = main(["ablate", "decoders", "--data", data_dir, "--seed", "3",
             "--epochs", "1"])
print("exit code:", code)
print()
print("real studies use the full budget, e.g.:")
print("  langseg ablate granularity --data DATA --epochs 60 --lr-max 1e-3")
