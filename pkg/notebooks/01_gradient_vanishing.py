# %% [markdown]
# # Why sign-then-sum loses information
#
# Two consecutive small-batch gradients that disagree in sign on some coordinates.
# Sign-quantising each one before accumulating cancels those coordinates out;
# summing first and quantising once keeps all four.

# %%
import numpy as np

from uapsga import clip_box, sign, vanishing_demo

g_m = np.array([-0.01, 0.10, 0.05, 0.70])
g_next = np.array([1.00, 0.02, 0.30, -0.01])

# %%
# quantise each step, then accumulate (alpha = 1, box wide enough not to bind)
delta = np.zeros(4)
for g in (g_m, g_next):
    delta = clip_box(delta + sign(g), 2.0)
print("sequential:", delta)

# %%
# accumulate, then quantise once
g_aggs = g_m + g_next
print("aggregate: ", g_aggs, "->", sign(g_aggs))

# %% [markdown]
# The first and last coordinates carry the largest gradient magnitudes (1.00 and
# 0.70), yet the sequential scheme ends at zero there. The library ships the same
# comparison as a report (also `uapsga demo-vanishing` on the command line):

# %%
report = vanishing_demo()
print(report.format())
for row in report.rows():
    print(row)
