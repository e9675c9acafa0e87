# %% [markdown]
# # Config files, artifacts and sweeps
#
# The command line wraps the same pieces. A run is described by a flat
# `key=value` file; every command leaves a manifest listing what it wrote and
# refuses to overwrite an earlier run unless `--force` is given. The cells below
# call the entry point in-process; `uapsga train --config ...` in a shell is the
# same thing.

# %%
import csv
import tempfile
from pathlib import Path

from uapsga import data
from uapsga.cli import main

work = Path(tempfile.mkdtemp())
blobs = data.synth_blobs(6, 50, image_shape=(1, 8, 8), seed=0)
data.save_idx(blobs, work / "images-idx3-ubyte.gz", work / "labels-idx1-ubyte.gz")

(work / "run.cfg").write_text("""\
# small synthetic run
data.images = images-idx3-ubyte.gz
data.labels = labels-idx1-ubyte.gz
split.eval = 100
split.attack = 100
model.cnn-small.widths = 4, 8
model.mlp-2.widths = 32
train.archs = cnn-small, mlp-2
train.learning_rate = 0.1
models.dir = out/models
attack.variant = spgd, sga
attack.epsilon = 40/255
attack.alpha = 4/255
attack.epochs = 4
attack.large_batch = 50
attack.small_batch = 5
eval.models = cnn-small, mlp-2
seeds = 0, 1
sweep.axis = inner-batch
sweep.values = 0, 2, 5, 10
""")

# %%
cfg = str(work / "run.cfg")
main(["train", "--config", cfg, "--out", str(work / "out" / "models")])
main(["attack", "--config", cfg, "--out", str(work / "out" / "attack")])
print(sorted(p.name for p in (work / "out" / "attack").iterdir()))

# %%
print((work / "out" / "attack" / "eval_sga_s0.csv").read_text())
print(main(["attack", "--config", cfg, "--out", str(work / "out" / "attack")]))  # 2: refuses to overwrite

# %%
main(["sweep", "--config", cfg, "--out", str(work / "out" / "sweep"), "--seed", "0"])
with open(work / "out" / "sweep" / "sweep.csv") as fh:
    for row in csv.DictReader(fh):
        print(row["value"], row["variant"], row["inner_iters"], row["fr_white_box"], row["fr_transfer"])

# %%
# a misspelt key is reported with its line
(work / "bad.cfg").write_text("seeds = 0\nattack.epsiIon = 0.04\n")
print(main(["train", "--config", str(work / "bad.cfg")]))
