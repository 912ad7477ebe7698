"""Score retrieval by hand, look at one ranked list, then verify the gradients."""

import numpy as np

from avcmr.data import generate_synthetic, split
from avcmr.evaluation import average_precision, case_study, evaluate_retrieval
from avcmr.model import ModelPair
from avcmr.trainer import TrainConfig, gradient_check, run_curriculum

# AP of a ranked relevance list: hits at ranks 1, 3 and 6
print("AP([1,0,1,0,0,1]) =", round(average_precision([1, 0, 1, 0, 0, 1]), 4))

data = split(generate_synthetic(), 0.8, 0)
models, _ = run_curriculum(data, TrainConfig(total_epochs=60, stage_switch_epoch=30))

test = ~data.train_mask
a, v = models.embed(data.audio[test], data.visual[test])
report = evaluate_retrieval(a, v, data.labels[test])
print(f"test MAP a2v {report.map_audio_to_visual:.3f}  v2a {report.map_visual_to_audio:.3f}")

print()
text, _ = case_study(a[0], data.labels[test][0], v, data.labels[test], k=5, title="audio #0")
print(text)

# analytic vs numerical gradients on a small fresh network
fresh = ModelPair.build(data.audio.shape[1], data.visual.shape[1], 16, data.num_classes, seed=1)
idx = np.concatenate([np.flatnonzero(data.labels == c)[:2] for c in range(4)])
errors = gradient_check(fresh, data.audio[idx], data.visual[idx], data.labels[idx], TrainConfig(), h=1e-5)
print("\nmax relative gradient error per stage:")
for stage, err in errors.items():
    print(f"  {stage}: {err:.2e}")
