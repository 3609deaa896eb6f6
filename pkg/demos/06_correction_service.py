"""Drive the correction service end to end without a browser.

Exercises the same HTTP surface the annotator UI uses: list images, fetch a
prediction, post a hand-drawn stroke, trigger a finetune job, poll it, and
refetch the refreshed prediction.

Run:  python3 demos/06_correction_service.py
"""

import tempfile
import time
from pathlib import Path

import numpy as np
from fastapi.testclient import TestClient

from ctn.dataio import generate_synthetic, save_dataset, select_exemplar
from ctn.service import create_app
from ctn.training import TrainConfig, train_one_shot

tmp = Path(tempfile.mkdtemp(prefix="ctn_demo_"))
dataset = generate_synthetic(count=6, size=48, noise=0.03, seed=8, n_vertices=32)
dataset.exemplar_id = select_exemplar(dataset)
save_dataset(dataset, tmp / "data")

print("training a small model...")
ckpt = train_one_shot(dataset, TrainConfig(epochs=25, batch_size=2, n_vertices=32, seed=0))
ckpt.save(tmp / "model.ckpt")

app = create_app(tmp / "model.ckpt", tmp / "data", out_path=tmp / "tuned.ckpt")
with TestClient(app) as client:
    images = client.get("/api/images").json()["images"]
    print(f"serving {len(images)} images; first: {images[0]}")

    target = images[1]["id"]
    pred = np.asarray(client.get(f"/api/prediction/{target}").json()["points"])
    gt = dataset.ground_truth(target).points

    # draw the worst arc as a correction stroke
    from scipy.spatial import cKDTree

    worst = int(np.argmax(cKDTree(pred).query(gt)[0]))
    arc = [(worst + k) % len(gt) for k in range(-3, 4)]
    stroke = gt[arc].tolist()
    r = client.post(f"/api/corrections/{target}", json={"segments": [{"points": stroke}]})
    print(f"posted a {len(stroke)}-point stroke -> {r.status_code}; "
          f"stored segments: {len(r.json()['segments'])}")

    job = client.post("/api/finetune", json={"epochs": 10}).json()["job"]
    print(f"finetune job {job} started")
    while True:
        status = client.get(f"/api/job/{job}").json()
        print(f"  {status['status']} epoch={status['epoch']} loss={status['mean_loss']}")
        if status["status"] in ("done", "failed"):
            break
        time.sleep(1.0)

    refreshed = np.asarray(client.get(f"/api/prediction/{target}").json()["points"])
    moved = np.linalg.norm(refreshed - pred, axis=1).mean()
    print(f"prediction refreshed; mean vertex movement {moved:.2f} px")
print(f"working dir: {tmp}")
