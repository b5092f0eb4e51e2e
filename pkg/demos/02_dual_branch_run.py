"""
A dual-branch run on the toy denoiser
=====================================

Two small deterministic backends stand in for the general model (SD) and
the face-personalized model (PFD). Stage 1 lays out the scene with SD and
segments a head; stage 2 runs both branches in lockstep and fuses them.
"""

import numpy as np

from hoifuse.backend import SchedulerParams, sample_initial_latent
from hoifuse.pipeline import BackendPair, MergeConfig, ThresholdSegmentor, generate, rollout

backends = BackendPair.from_specs("toy:seed=1", "toy:seed=2")
prompt = "a man riding a horse"

config = MergeConfig(total_steps=50, seed=3, injection_step=5)
result = generate("alice", prompt, config, backends, ThresholdSegmentor())

print("head mask coverage:", result.head_mask.values.mean())
print("image:", result.image.shape, "checksum", result.checksum[:16])

# %%
# The manifest records what happened at each step.
for rec in result.manifest["steps"][::10]:
    print({k: rec[k] for k in ("step", "t", "alpha", "kernel_size", "identity_active", "cac_applied")})

# %%
# Fusion pulls the result between the two single-branch rollouts.
params = SchedulerParams.toy(50)
z_T = sample_initial_latent((4, 8, 8), config.seed, 50)
c = backends.conditioner
sd_only = rollout(backends.sd, c.encode(prompt), z_T, params).values
pfd_only = rollout(backends.pfd, c.encode_personalized(prompt, "alice", True), z_T, params).values
fused = result.final_latent.values
inside = result.head_mask.values.reshape(8, 8, 8, 8).mean(axis=(1, 3)) > 0.5
for name, ref in [("SD", sd_only), ("PFD", pfd_only)]:
    d = np.abs(fused - ref).mean(axis=0)
    print("distance to %-3s  inside head %.4f  outside %.4f" % (name, d[inside].mean(), d[~inside].mean()))
