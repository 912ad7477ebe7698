"""Walk through triplet mining and embedding-space augmentation on a toy batch.

    python demos/mining_and_augmentation.py
"""

import numpy as np

from avcmr.augmentation import augment_batch, interpolate, mine_hard_augmented
from avcmr.triplets import TripletCategory, mine_triplets, triplet_loss

rng = np.random.default_rng(0)

# two classes, four pairs each, in a 2-d embedding space
labels = np.repeat([0, 1], 4)
audio = rng.normal(size=(8, 2)) + labels[:, None] * 1.5
visual = audio + rng.normal(scale=0.4, size=(8, 2))

margin = 0.2
everything = mine_triplets(audio, visual, labels, margin, None)
print("all cross-modal triplets:", len(everything))
for cat in TripletCategory:
    print(f"  {cat.name.lower():9s} {everything.census[cat]}")

semi = mine_triplets(audio, visual, labels, margin, TripletCategory.SEMIHARD)
res = triplet_loss(semi, audio, visual, margin)
print(f"semi-hard loss {res.loss:.4f} over {res.n_active} active triplets")

# a pair of same-class points and the points sampled along their segment
s = interpolate(audio[0], audio[1], 4, normalize=False)
print("\ninterpolating", audio[0].round(3), "and", audio[1].round(3))
for p in s.points:
    print("   ", p.round(3))

# augmentation only ever adds hard triplets on top of the real ones
base = mine_triplets(audio, visual, labels, margin, TripletCategory.HARD)
for gamma in (0, 1, 2, 4):
    batch = augment_batch(audio, visual, labels, gamma, rng=np.random.default_rng(1), normalize=False)
    hard = mine_hard_augmented(batch, margin)
    print(f"gamma={gamma}: pool {len(batch.audio_pool):3d} audio, hard triplets {len(hard):4d}"
          f" (real-only {len(base)})")
