# %% [markdown]
# # Momentum, look-ahead and ensembles
#
# Momentum keeps an L1-normalised running direction; the Nesterov form
# evaluates gradients at the point the momentum is about to carry us to. Both
# slot into SPGD and SGA. An ensemble loss averages member losses, each member
# attacked against its own clean predictions.

# %%
import numpy as np

from uapsga import AttackConfig, LossSpec, build, data, diagnostics, models, momentum_wrap, run_attack

# constant gradient: velocity approaches g / |g|_1 / (1 - mu)
g = np.array([0.5, -0.25, 2.0], dtype=np.float32)
v = np.zeros(3, np.float32)
for _ in range(50):
    _, v = momentum_wrap(g, v, 0.9)
print(v, g / np.abs(g).sum() / 0.1)

# %%
blobs = data.synth_blobs(10, 60, image_shape=(1, 12, 12), seed=0)
a = build("cnn-small", (1, 12, 12), 10, seed=0, widths=(8, 16))
b = build("mlp-2", (1, 12, 12), 10, seed=1, widths=(64,))
for net in (a, b):
    models.train(net, blobs, epochs=3, learning_rate=0.1, seed=0)

# %%
setups = {
    "spgd": dict(variant="spgd"),
    "M-SPGD": dict(variant="spgd", momentum="momentum"),
    "N-SPGD": dict(variant="spgd", momentum="nesterov"),
    "sga": dict(variant="sga"),
    "M-SGA": dict(variant="sga", momentum="momentum"),
    "N-SGA": dict(variant="sga", momentum="nesterov"),
    "N-SGA, inner": dict(variant="sga", momentum="nesterov", momentum_placement="inner"),
}
for name, setup in setups.items():
    cfg = AttackConfig(epsilon=0.15, alpha=0.015, epochs=4, large_batch=100, seed=0, **setup)
    res = run_attack(cfg, blobs, LossSpec(a))
    frs = [diagnostics.fooling_ratio(n, blobs, res.delta).fooling_ratio for n in (a, b)]
    print(f"{name:13s} white-box {frs[0]:.3f}  transfer {frs[1]:.3f}")

# %%
# two-model ensemble against a single surrogate, judged on both
for spec_name, spec in [("cnn only", LossSpec(a)), ("cnn + mlp", LossSpec((a, b)))]:
    res = run_attack(AttackConfig(variant="sga", epsilon=0.15, alpha=0.015, epochs=4, large_batch=100), blobs, spec)
    frs = [diagnostics.fooling_ratio(n, blobs, res.delta).fooling_ratio for n in (a, b)]
    print(f"{spec_name:10s} cnn {frs[0]:.3f}  mlp {frs[1]:.3f}")
