"""HTTP service feeding the browser annotator.

Serves images and cached predictions, accepts partial contour corrections
(persisted immediately, append-only with timestamps), and runs at most one
fine-tuning job at a time on a worker thread. When a job finishes, the active
checkpoint is swapped and the prediction cache invalidated.
"""

from __future__ import annotations

import datetime
import io
import json
import threading
import uuid
from dataclasses import replace
from pathlib import Path

import numpy as np
from fastapi import FastAPI, HTTPException, Request
from fastapi.responses import JSONResponse, Response
from fastapi.staticfiles import StaticFiles

from .dataio import PartialCorrection, load_corrections_file, load_dataset, save_corrections_file
from .errors import CtnError, DataError
from .model import Checkpoint, infer_contour
from .training import TrainConfig, evaluate, finetune_hitl


class _JobState:
    def __init__(self):
        self.id: str | None = None
        self.status = "idle"
        self.epoch = -1
        self.mean_loss: float | None = None
        self.error: str | None = None


class ServiceState:
    def __init__(self, checkpoint_path, data_root, out_path=None):
        self.checkpoint_path = Path(checkpoint_path)
        self.out_path = Path(out_path) if out_path else self.checkpoint_path
        self.data_root = Path(data_root)
        self.checkpoint = Checkpoint.load(checkpoint_path)
        self.dataset = load_dataset(self.data_root)
        self.predictions: dict[str, list] = {}
        self.metrics: dict | None = None
        self.job = _JobState()
        self.model_lock = threading.Lock()  # swaps of the active checkpoint
        self.job_lock = threading.Lock()
        self.write_locks: dict[str, threading.Lock] = {}
        self.write_locks_guard = threading.Lock()

    def write_lock(self, image_id: str) -> threading.Lock:
        with self.write_locks_guard:
            return self.write_locks.setdefault(image_id, threading.Lock())

    def corrections_path(self, image_id: str) -> Path:
        d = self.data_root / "corrections"
        d.mkdir(exist_ok=True)
        return d / f"{image_id}.corrections.json"


def _validate_segments(payload) -> list[dict]:
    if not isinstance(payload, dict) or "segments" not in payload:
        raise HTTPException(400, detail={"segments": "missing"})
    segments = payload["segments"]
    if not isinstance(segments, list) or not segments:
        raise HTTPException(400, detail={"segments": "must be a non-empty list"})
    for i, seg in enumerate(segments):
        pts = seg.get("points") if isinstance(seg, dict) else None
        if not isinstance(pts, list) or len(pts) < 2:
            raise HTTPException(400, detail={f"segments[{i}].points": "needs at least 2 points"})
        try:
            arr = np.asarray(pts, dtype=float)
        except (TypeError, ValueError):
            arr = None
        if arr is None or arr.shape != (len(pts), 2) or not np.all(np.isfinite(arr)):
            raise HTTPException(400, detail={f"segments[{i}].points": "points must be finite [x,y] pairs"})
    return segments


def create_app(checkpoint_path, data_root, frontend=None, out_path=None) -> FastAPI:
    app = FastAPI(title="contour correction service")
    state = ServiceState(checkpoint_path, data_root, out_path)
    app.state.ctn = state

    @app.exception_handler(CtnError)
    async def _ctn_error(request: Request, exc: CtnError):
        return JSONResponse(status_code=400, content={"error": str(exc)})

    def get_sample(image_id: str):
        try:
            return state.dataset.get(image_id)
        except DataError:
            raise HTTPException(404, detail=f"unknown image {image_id!r}")

    @app.get("/api/images")
    def images():
        out = []
        for s in state.dataset.samples:
            w, h = s.size
            out.append({"id": s.id, "width": w, "height": h})
        return {"images": out}

    @app.get("/api/image/{image_id}")
    def image(image_id: str):
        from PIL import Image

        s = get_sample(image_id)
        arr = np.round(np.clip(s.image, 0, 1) * 255).astype(np.uint8)
        buf = io.BytesIO()
        Image.fromarray(arr, mode="L").save(buf, format="PNG")
        return Response(content=buf.getvalue(), media_type="image/png")

    @app.get("/api/prediction/{image_id}")
    def prediction(image_id: str):
        s = get_sample(image_id)
        with state.model_lock:
            if image_id not in state.predictions:
                pred = infer_contour(state.checkpoint, s.image)
                state.predictions[image_id] = pred.points.tolist()
            pts = state.predictions[image_id]
        return {"closed": True, "points": pts}

    @app.get("/api/corrections/{image_id}")
    def corrections(image_id: str):
        get_sample(image_id)
        path = state.corrections_path(image_id)
        if not path.exists():
            return {"image": image_id, "segments": []}
        return json.loads(path.read_text(encoding="utf-8"))

    @app.post("/api/corrections/{image_id}")
    def post_corrections(image_id: str, payload: dict):
        get_sample(image_id)
        segments = _validate_segments(payload)
        stamp = datetime.datetime.now(datetime.timezone.utc).isoformat()
        with state.write_lock(image_id):
            path = state.corrections_path(image_id)
            existing = load_corrections_file(path, image_id) if path.exists() else []
            for seg in segments:
                existing.append(
                    PartialCorrection(
                        image_id=image_id,
                        points=np.asarray(seg["points"], dtype=float),
                        author=seg.get("author", "human"),
                        closed=bool(seg.get("closed", False)),
                        created_at=seg.get("created_at", stamp),
                    )
                )
            save_corrections_file(path, image_id, existing)
        return json.loads(path.read_text(encoding="utf-8"))

    def _run_finetune(job_id: str, config: TrainConfig):
        try:
            dataset = load_dataset(state.data_root)

            def progress(epoch, stats):
                state.job.epoch = epoch
                state.job.mean_loss = stats["total"]

            tuned = finetune_hitl(state.checkpoint, dataset, config, progress=progress)
            tuned.save(state.out_path)
            with state.model_lock:
                state.checkpoint = tuned
                state.predictions.clear()
            state.metrics = evaluate(tuned, dataset).to_dict()
            state.job.status = "done"
        except Exception as exc:  # surfaced through /api/job
            state.job.status = "failed"
            state.job.error = str(exc)

    @app.post("/api/finetune")
    def finetune(payload: dict | None = None):
        with state.job_lock:
            if state.job.status == "running":
                raise HTTPException(409, detail=f"finetune job {state.job.id} already running")
            stored = sorted((state.data_root / "corrections").glob("*.corrections.json")) \
                if (state.data_root / "corrections").is_dir() else []
            if not stored:
                raise HTTPException(400, detail="no corrections")
            config = TrainConfig.from_dict(state.checkpoint.train_config)
            overrides = payload or {}
            if "epochs" in overrides:
                config = replace(config, epochs=int(overrides["epochs"]))
            job_id = uuid.uuid4().hex[:12]
            state.job = _JobState()
            state.job.id = job_id
            state.job.status = "running"
            threading.Thread(target=_run_finetune, args=(job_id, config), daemon=True).start()
            return {"job": job_id}

    @app.get("/api/job/{job_id}")
    def job(job_id: str):
        if state.job.id != job_id:
            raise HTTPException(404, detail=f"unknown job {job_id!r}")
        return {
            "job": job_id,
            "status": state.job.status,
            "epoch": state.job.epoch,
            "mean_loss": state.job.mean_loss,
            "error": state.job.error,
        }

    @app.get("/api/metrics")
    def metrics():
        if state.metrics is None:
            state.metrics = evaluate(state.checkpoint, state.dataset).to_dict()
        return state.metrics

    if frontend:
        app.mount("/", StaticFiles(directory=frontend, html=True), name="frontend")
    return app
