import io
import json
import time

import numpy as np
import pytest
from fastapi.testclient import TestClient

from ctn.dataio import generate_synthetic, save_dataset, select_exemplar
from ctn.service import create_app
from ctn.training import TrainConfig, train_one_shot

CFG = dict(epochs=2, batch_size=2, n_vertices=16, seed=5)


@pytest.fixture(scope="module")
def service(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("svc")
    root = tmp / "data"
    ds = generate_synthetic(count=4, size=32, noise=0.02, seed=21, n_vertices=16)
    ds.exemplar_id = select_exemplar(ds)
    save_dataset(ds, root)
    ckpt = train_one_shot(ds, TrainConfig(**CFG))
    ckpt_path = tmp / "model.ckpt"
    ckpt.save(ckpt_path)
    app = create_app(ckpt_path, root, out_path=tmp / "tuned.ckpt")
    with TestClient(app) as client:
        yield client, root


def wait_done(client, job_id, timeout=120.0):
    t0 = time.time()
    while time.time() - t0 < timeout:
        r = client.get(f"/api/job/{job_id}")
        assert r.status_code == 200
        body = r.json()
        if body["status"] in ("done", "failed"):
            return body
        time.sleep(0.2)
    raise TimeoutError("finetune job did not finish")


class TestReadEndpoints:
    def test_images_listing(self, service):
        client, root = service
        r = client.get("/api/images")
        assert r.status_code == 200
        imgs = r.json()["images"]
        assert len(imgs) == 4
        assert all(set(e) == {"id", "width", "height"} for e in imgs)
        assert imgs[0]["width"] == 32

    def test_image_png(self, service):
        from PIL import Image

        client, root = service
        r = client.get("/api/image/img_000")
        assert r.status_code == 200
        assert r.headers["content-type"] == "image/png"
        img = Image.open(io.BytesIO(r.content))
        assert img.size == (32, 32)

    def test_unknown_image_404(self, service):
        client, root = service
        for path in ("/api/image/nope", "/api/prediction/nope", "/api/corrections/nope"):
            assert client.get(path).status_code == 404

    def test_prediction_cached_and_valid(self, service):
        client, root = service
        a = client.get("/api/prediction/img_001")
        b = client.get("/api/prediction/img_001")
        assert a.status_code == 200
        body = a.json()
        assert body["closed"] is True and len(body["points"]) == 16
        assert a.json() == b.json()

    def test_metrics_schema(self, service):
        client, root = service
        r = client.get("/api/metrics")
        assert r.status_code == 200
        body = r.json()
        assert "per_image" in body and "summary" in body


class TestCorrections:
    def test_roundtrip_byte_identical(self, service):
        client, root = service
        pts = [[1.25, 2.5], [3.0, 4.125], [5.0, 6.0]]
        r = client.post("/api/corrections/img_000", json={"segments": [{"points": pts}]})
        assert r.status_code == 200
        stored = client.get("/api/corrections/img_000").json()
        assert stored["image"] == "img_000"
        assert stored["segments"][-1]["points"] == pts
        assert stored["segments"][-1]["author"] == "human"
        assert "created_at" in stored["segments"][-1]
        # persisted on disk immediately
        disk = json.loads((root / "corrections" / "img_000.corrections.json").read_text())
        assert disk["segments"][-1]["points"] == pts

    def test_append_only(self, service):
        client, root = service
        n0 = len(client.get("/api/corrections/img_000").json()["segments"])
        client.post("/api/corrections/img_000",
                    json={"segments": [{"points": [[0.0, 0.0], [1.0, 1.0]]}]})
        n1 = len(client.get("/api/corrections/img_000").json()["segments"])
        assert n1 == n0 + 1

    def test_malformed_rejected_field_level(self, service):
        client, root = service
        r = client.post("/api/corrections/img_000", json={"segments": [{"points": [[1, 2]]}]})
        assert r.status_code == 400
        assert "segments[0].points" in json.dumps(r.json())
        r = client.post("/api/corrections/img_000",
                        json={"segments": [{"points": [[1, 2], [None, 4]]}]})
        assert r.status_code == 400
        r = client.post("/api/corrections/img_000",
                        json={"segments": [{"points": [[1, 2], ["x", 4]]}]})
        assert r.status_code == 400
        r = client.post("/api/corrections/img_000",
                        json={"segments": [{"points": [[1, 2, 3], [4, 5, 6]]}]})
        assert r.status_code == 400
        r = client.post("/api/corrections/img_000", json={})
        assert r.status_code == 400


class TestFinetuneJob:
    def test_finetune_without_corrections_400(self, tmp_path):
        root = tmp_path / "data"
        ds = generate_synthetic(count=3, size=32, noise=0.02, seed=22, n_vertices=16)
        ds.exemplar_id = select_exemplar(ds)
        save_dataset(ds, root)
        ckpt = train_one_shot(ds, TrainConfig(**CFG))
        cp = tmp_path / "m.ckpt"
        ckpt.save(cp)
        with TestClient(create_app(cp, root)) as client:
            r = client.post("/api/finetune", json={})
            assert r.status_code == 400
            assert "no corrections" in json.dumps(r.json())

    def test_job_runs_and_refreshes_predictions(self, service):
        client, root = service
        before = client.get("/api/prediction/img_000").json()
        r = client.post("/api/finetune", json={"epochs": 1})
        assert r.status_code == 200
        job_id = r.json()["job"]
        # a second POST while running conflicts (if still running)
        r2 = client.post("/api/finetune", json={"epochs": 1})
        assert r2.status_code in (409, 200)
        if r2.status_code == 200:
            wait_done(client, r2.json()["job"])
        body = wait_done(client, job_id)
        assert body["status"] == "done", body
        assert (root.parent / "tuned.ckpt").exists()
        after = client.get("/api/prediction/img_000").json()
        assert before != after  # cache invalidated, weights moved

    def test_unknown_job_404(self, service):
        client, root = service
        assert client.get("/api/job/doesnotexist").status_code == 404
