"""Human-in-the-loop: simulate corrections on the worst predictions, finetune.

Run after (or instead of) the one-shot demo; trains its own small model first.

Run:  python3 demos/05_hitl_corrections.py
"""

import numpy as np

from ctn.contour import hausdorff
from ctn.dataio import generate_synthetic, select_exemplar, simulate_corrections
from ctn.model import infer_contour
from ctn.training import TrainConfig, finetune_hitl, train_one_shot

train_set = generate_synthetic(count=12, size=64, noise=0.04, seed=77)
train_set.exemplar_id = select_exemplar(train_set)
config = TrainConfig(epochs=50, seed=1)

print("one-shot training...")
base = train_one_shot(train_set, config)


def mean_hd(ckpt):
    return float(np.mean([
        hausdorff(infer_contour(ckpt, s.image), train_set.ground_truth(s.id))
        for s in train_set.samples
    ]))


base_hd = mean_hd(base)
print(f"one-shot mean training HD: {base_hd:.2f} px")

# Rank by error, take the worst quarter, hand over their true contours as
# closed corrections (the annotator redrawing the whole boundary), and also
# show what partial arc corrections look like.
predictions = {s.id: infer_contour(base, s.image) for s in train_set.samples}
truths = {s.id: train_set.ground_truth(s.id) for s in train_set.samples}

partial = simulate_corrections(predictions, truths, 0.25, mode="partial", tau=3.0)
for sid, segs in partial.items():
    arcs = ", ".join(str(len(s.points)) for s in segs)
    print(f"  {sid}: {len(segs)} partial arc(s) with point counts [{arcs}]")

full = simulate_corrections(predictions, truths, 0.25, mode="full")
train_set.set_corrections(full)

print("finetuning with the corrections...")
tuned = finetune_hitl(base, train_set, config)
tuned_hd = mean_hd(tuned)
print(f"mean training HD: {base_hd:.2f} -> {tuned_hd:.2f} px")
