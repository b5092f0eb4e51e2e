"""
Scoring generated images with stand-in adapters
===============================================

Real detectors and embedders run out of process. Scripted mocks make the
arithmetic of each metric easy to follow.
"""

import numpy as np

from hoifuse.evaluation import (
    EvalImage,
    ScorerAdapters,
    ScriptedEmbedder,
    ScriptedScorer,
    WholeImageFaceDetector,
    build_hoi_prompts,
    evaluate,
    hoi_triplets,
)

print("\n".join(build_hoi_prompts("woman")[:5]), "\n...")

names = ["img0", "img1", "img2"]
images = [EvalImage(np.zeros((64, 64, 3)), n) for n in names]
reference = EvalImage(np.zeros((64, 64, 3)), "ref")

adapters = ScorerAdapters(
    face_detector=WholeImageFaceDetector(),
    face_embedder=ScriptedEmbedder({"ref": [1, 0], "img0": [1, 0], "img1": [1, 1], "img2": [0, 1]}),
    text_image_scorer=ScriptedScorer({"img0": 0.31, "img1": 0.22, "img2": 0.27}),
    hoi_detector=ScriptedScorer({"img0": 0.9, "img1": 0.0, "img2": 0.45}),
)
trips = hoi_triplets("woman")[:3]
report = evaluate(images, adapters, ["identity", "prompt", "interaction"], [t.render() for t in trips], trips,
                  reference)

for row in report.rows:
    print(row["image"], "%.3f %.3f %.3f" % (row["identity"], row["prompt_consistency"], row["interaction"]))
print()
print(report.render_table("toy", "SD1.5"))
print("undetected interactions:", report.counts["undetected_interactions"])
