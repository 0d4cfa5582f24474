"""
Mask-based scaling versus MDP
=============================

Keep the ideal MMSE filter fixed and optimize only the scaling mask. A
mean-normalized mask starts from the constant mask, which is exactly MDP,
and climbs towards ideal scaling.
"""

import numpy as np

from maskbf import OptimizationConfig, StftConfig, mix_scenario, synth_scene
from maskbf.beamformers import beamform
from maskbf.optimize import fixed_filter_sdr, ideal_mmse_sdr, optimize_scaling_mask
from maskbf.scaling import scale_mdp

target, noise = synth_scene(seed=1, duration=1.0)
scenario = mix_scenario(target, noise, 1.0, 0, StftConfig(256, 64))

ideal, bank = ideal_mmse_sdr(scenario)
x = scenario.observation.per_freq()
y = beamform(bank.w, x)
mdp = fixed_filter_sdr(scenario, bank.w, scale_mdp(y, x[..., 0]))
print(f"ideal scaling  {ideal:7.2f} dB")
print(f"MDP scaling    {mdp:7.2f} dB")

for constraint in ("L1-MN", "L2-MN", "non-negative", "ratio"):
    rec = optimize_scaling_mask(scenario, bank, constraint, OptimizationConfig(iterations=300))
    print(f"{constraint:13s}  {rec.sdr_db:7.2f} dB  (started at {rec.initial_sdr_db:.2f})")

# the ratio mask saturates at its bounds where the target dominates or vanishes
mask = rec.masks["p"]["values"]
print("ratio mask range", np.round([mask.min(), mask.max()], 3))
