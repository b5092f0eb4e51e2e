"""
Head masks and Gaussian frequency splits
========================================

A head mask is carried at every resolution the denoiser touches. The
residual merge then splits each skip feature into a low band and a high
band with a Gaussian whose width follows the mask size.
"""

import numpy as np

from hoifuse.filters import KernelSchedule, build_kernel, eval_schedule, high_pass, kernel_size_from_mask, low_pass
from hoifuse.masks import HeadMask, MaskPyramid, mask_area

# A 64x64 mask with a square "head" in the upper left.
m = np.zeros((64, 64))
m[8:24, 12:28] = 1.0
head = HeadMask(m)
pyr = MaskPyramid(head)

# Area-weighted resizing keeps the covered fraction at every level.
for res in [(64, 64), (8, 8), (4, 4), (2, 2)]:
    level = pyr.level(res)
    print(res, "coverage %.4f" % level.values.mean(), "binary cells", int(pyr.binary_level(res).values.sum()))

# %%
# Kernel size follows alpha * sqrt(area), forced odd. The schedule shrinks
# alpha from 2.5 to 0.5 across the run.
area = mask_area(pyr.level((8, 8)))
sched = KernelSchedule(2.5, 0.5, 50)
for step in (0, 10, 25, 40, 49):
    alpha = eval_schedule(sched, step)
    print("step %2d  alpha %.3f  kernel %d" % (step, alpha, kernel_size_from_mask(area, alpha)))

# %%
# The two bands partition the signal: what the low pass removes, the high
# pass keeps.
rng = np.random.default_rng(0)
feat = rng.standard_normal((4, 8, 8))
k = build_kernel(5)
lo, hi = low_pass(feat, k), high_pass(feat, k)
print("band energies: low %.3f  high %.3f" % ((lo**2).sum(), (hi**2).sum()))
print("max |lo + hi - x| =", np.abs(lo + hi - feat).max())

# Constant fields are untouched by the blur.
print("constant preserved:", np.array_equal(low_pass(np.full((8, 8), 0.3), k), np.full((8, 8), 0.3)))
