"""
Ablations over components and filter modes
==========================================

The sweep helpers enumerate configurations in a fixed order, so the table
is reproducible row for row.
"""

from hoifuse.filters import FilterMode, KernelSchedule
from hoifuse.pipeline import TOGGLE_GRID, BackendPair, MergeConfig, SweepAxes, ThresholdSegmentor, ablation_sweep

backends = BackendPair.from_specs()
base = MergeConfig(total_steps=20)
prompt = "a woman holding a cat"

for axes in [SweepAxes(toggles=TOGGLE_GRID),
             SweepAxes(filter_modes=list(FilterMode)),
             SweepAxes(alphas=[KernelSchedule.constant(a, 20) for a in (0.5, 1.5, 2.5)]
                       + [KernelSchedule(2.5, 0.5, 20)])]:
    rows = ablation_sweep(base, axes, "bob", prompt, backends, ThresholdSegmentor(), jobs=2)
    for r in rows:
        s = r.summary
        print("%-10s %-10s %-8s %-28s %s" % (s["label"], s["toggles"], s["filter_mode"], s["alpha_schedule"],
                                           s["output_checksum"][:12]))
    print()
