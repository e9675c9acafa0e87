# %% [markdown]
# # The tape and the three classifiers
#
# Everything runs on a small reverse-mode tape over numpy arrays. Here we check
# a perturbation gradient against central differences, then train the three
# architectures on a slice of the bundled digit images.

# %%
import time
from pathlib import Path

import numpy as np

from uapsga import LossSpec, Tape, Tensor, backward, build, data, loss_and_grad, models
from uapsga import tensor as T
from uapsga.losses import batch_loss

ROOT = Path(__file__).resolve().parents[1] if "__file__" in globals() else Path.cwd().parent
digits = data.load_idx(ROOT / "data" / "digits5k-images-idx3-ubyte.gz", ROOT / "data" / "digits5k-labels-idx1-ubyte.gz")
print(len(digits), digits.image_shape, np.bincount(digits.labels))

# %% [markdown]
# ## A gradient by hand
# Recording is explicit: `watch` returns a traced copy, every primitive applied to
# it appends a node, and `backward` walks the nodes in reverse.

# %%
tape = Tape()
w = tape.watch(Tensor([[1.0, -2.0], [0.5, 0.25]]))
x = Tensor([[1.0, 2.0]])
out = T.tensor_sum(T.relu(T.matmul(x, w)))
grads = backward(tape, Tensor(np.float32(1.0)))
print(out.data, grads[w.id].data)

# %% [markdown]
# ## Perturbation gradient vs. finite differences (float64)

# %%
net = build("cnn-small", input_shape=(1, 8, 8), num_classes=10, seed=0, widths=(4, 8))
net.weights = [Tensor(p.data, dtype=np.float64) for p in net.weights]
rng = np.random.default_rng(0)
images = rng.uniform(size=(4, 1, 8, 8)).astype(np.float32)
labels = rng.integers(0, 10, size=4)
delta = rng.uniform(-0.05, 0.05, size=(1, 8, 8))
spec = LossSpec(net)

_, g = loss_and_grad(spec, images, labels, Tensor(delta, dtype=np.float64))
numeric = np.zeros_like(delta)
h = 1e-5
for i in np.ndindex(delta.shape):
    up, down = delta.copy(), delta.copy()
    up[i] += h
    down[i] -= h
    numeric[i] = (batch_loss(spec, images, labels, up) - batch_loss(spec, images, labels, down)) / (2 * h)
print("max abs difference:", np.abs(g - numeric).max())

# %% [markdown]
# ## Training
# Plain mini-batch SGD. A 1500-image slice keeps this cell to a few seconds per model.

# %%
pool, held_out = data.make_splits(digits, 1500, 1000, seed=0)
train_set, eval_set = digits.subset(pool), digits.subset(held_out)
nets = {}
for seed, arch in enumerate(["cnn-small", "mlp-2", "cnn-wide"], start=1):
    start = time.perf_counter()
    nets[arch] = build(arch, seed=seed)
    report = models.train(nets[arch], train_set, epochs=2, seed=seed, eval_set=eval_set)
    print(f"{arch:9s} {nets[arch].num_parameters:7d} params  held-out acc {report.final_eval_accuracy:.3f}"
          f"  ({time.perf_counter() - start:.1f} s)")

# %%
# weight files round-trip bit for bit
models.save(nets["mlp-2"], "/tmp/mlp-2.uapw")
again = models.load("/tmp/mlp-2.uapw")
print(all(np.array_equal(a.data, b.data) for a, b in zip(again.weights, nets["mlp-2"].weights)))
