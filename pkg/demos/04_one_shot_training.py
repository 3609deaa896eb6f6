"""One-shot training on a small synthetic corpus, then evaluation.

Only the exemplar's contour is ever visible to the trainer; every other image
contributes through the label-free losses. Takes a couple of minutes.

Run:  python3 demos/04_one_shot_training.py
"""

import pathlib

from PIL import Image

from ctn.cli import render_overlay
from ctn.dataio import generate_synthetic, select_exemplar
from ctn.model import infer_contour
from ctn.training import TrainConfig, evaluate, train_one_shot

out_dir = pathlib.Path("demo_out")
out_dir.mkdir(exist_ok=True)

train_set = generate_synthetic(count=12, size=64, noise=0.04, seed=42)
test_set = generate_synthetic(count=8, size=64, noise=0.04, seed=43)
train_set.exemplar_id = select_exemplar(train_set)
print(f"exemplar: {train_set.exemplar_id}")

config = TrainConfig(epochs=60, seed=0)


def progress(epoch, stats):
    if epoch % 15 == 0 or epoch == config.epochs - 1:
        print(f"  epoch {epoch:3d}  total {stats['total']:9.3f}  "
              f"perc {stats['perceptual']:8.3f}  edge {stats['edge']:7.4f}")


checkpoint = train_one_shot(train_set, config, progress=progress)
report = evaluate(checkpoint, test_set)
summary = report.summary()
print(f"test mean IoU {summary['iou']['mean']:.4f}, mean HD {summary['hd']['mean']:.2f} px")

for sample in test_set.samples[:4]:
    prediction = infer_contour(checkpoint, sample.image)
    overlay = render_overlay(sample.image, prediction)
    Image.fromarray(overlay, mode="RGB").save(out_dir / f"{sample.id}_overlay.png")
print(f"overlays written to {out_dir}/")

checkpoint.save(out_dir / "one_shot.ckpt")
print(f"checkpoint: {out_dir / 'one_shot.ckpt'}")
