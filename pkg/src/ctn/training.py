"""One-shot training, human-in-the-loop fine-tuning, Adam, and evaluation.

Training needs exactly one labeled exemplar; every other image contributes
through the label-free losses only. Determinism: given (dataset, config,
seed) the final checkpoint is byte-identical across runs — shuffling comes
from one seeded generator, batches accumulate gradients in sample-id order,
and no wall-clock state enters the pipeline.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .contour import hausdorff, iou, rasterize, resample_uniform
from .dataio import Dataset
from .errors import DataError, NumericError
from .losses import (
    LossWeights,
    PerceptualExtractor,
    contour_bending_loss,
    contour_perceptual_loss,
    edge_loss_from_gradmag,
    partial_matching_loss,
    sobel_gradient_magnitude,
    total_loss,
    tps_build,
)
from .model import (
    Checkpoint,
    ModelConfig,
    ctn_forward,
    infer_contour,
    init_params,
    prepare_initial_contour,
)

__all__ = [
    "TrainConfig",
    "AdamState",
    "MetricsReport",
    "adam_step",
    "train_one_shot",
    "finetune_hitl",
    "evaluate",
    "ablate",
]

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass(frozen=True)
class TrainConfig:
    """Desk-scale defaults; the full-scale reference configuration is
    N=1000, batch 12, 500 epochs at the same rates."""

    weights: LossWeights = field(default_factory=LossWeights)
    learning_rate: float = 1e-4
    weight_decay: float = 1e-4
    batch_size: int = 4
    epochs: int = 200
    n_vertices: int = 64
    seed: int = 0
    per_block_loss: bool = True
    checkpoint_every: int = 0
    dtype: str = "float32"
    exclude_exemplar: bool = True
    freeze_encoder_on_finetune: bool = False
    extractor_seed: int = PerceptualExtractor.DEFAULT_SEED
    extractor_weights: str | None = None
    correction_tau: float = 3.0
    perceptual_normalized: bool = False

    def __post_init__(self):
        if self.learning_rate <= 0 or self.batch_size <= 0 or self.epochs <= 0 or self.n_vertices < 4:
            raise ValueError("rates and sizes must be positive (n_vertices >= 4)")
        if self.weight_decay < 0:
            raise ValueError("weight decay must be nonnegative")

    def model_config(self) -> ModelConfig:
        return ModelConfig(n_vertices=self.n_vertices)

    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64

    def to_dict(self) -> dict:
        return {
            "weights": {
                "perceptual": self.weights.perceptual,
                "bending": self.weights.bending,
                "edge": self.weights.edge,
                "matching": self.weights.matching,
            },
            "learning_rate": self.learning_rate,
            "weight_decay": self.weight_decay,
            "adam": {"beta1": ADAM_BETA1, "beta2": ADAM_BETA2, "eps": ADAM_EPS},
            "batch_size": self.batch_size,
            "epochs": self.epochs,
            "n_vertices": self.n_vertices,
            "seed": self.seed,
            "per_block_loss": self.per_block_loss,
            "checkpoint_every": self.checkpoint_every,
            "dtype": self.dtype,
            "exclude_exemplar": self.exclude_exemplar,
            "freeze_encoder_on_finetune": self.freeze_encoder_on_finetune,
            "extractor_seed": self.extractor_seed,
            "extractor_weights": self.extractor_weights,
            "correction_tau": self.correction_tau,
            "perceptual_normalized": self.perceptual_normalized,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        w = d.get("weights", {})
        kwargs = {k: d[k] for k in (
            "learning_rate", "weight_decay", "batch_size", "epochs", "n_vertices", "seed",
            "per_block_loss", "checkpoint_every", "dtype", "exclude_exemplar",
            "freeze_encoder_on_finetune", "extractor_seed", "extractor_weights", "correction_tau",
            "perceptual_normalized",
        ) if k in d}
        if w:
            kwargs["weights"] = LossWeights(
                perceptual=w.get("perceptual", 1.0),
                bending=w.get("bending", 0.25),
                edge=w.get("edge", 0.1),
                matching=w.get("matching", 1.0),
            )
        return cls(**kwargs)


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def for_params(cls, params: dict[str, np.ndarray]) -> "AdamState":
        return cls(
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
        )


def _is_weight(name: str) -> bool:
    # decoupled weight decay applies to conv/matmul weights, not biases/norm params
    return name.endswith(".w") or name.endswith(".ws") or name.endswith(".wn")


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: AdamState, config: TrainConfig) -> None:
    """In-place Adam update with bias correction and decoupled weight decay."""
    state.step += 1
    t = state.step
    bc1 = 1.0 - ADAM_BETA1 ** t
    bc2 = 1.0 - ADAM_BETA2 ** t
    lr = config.learning_rate
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape mismatch for {name}: {g.shape} vs {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name}")
        m = state.m[name]
        v = state.v[name]
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * g * g
        p -= (lr / bc1) * m / (np.sqrt(v / bc2) + ADAM_EPS)
        if config.weight_decay > 0 and _is_weight(name):
            p -= lr * config.weight_decay * p


@dataclass
class MetricsReport:
    per_image: dict[str, dict[str, float]]
    unevaluated: list[str]
    fingerprint: str

    def _values(self, key: str) -> np.ndarray:
        return np.array([m[key] for m in self.per_image.values()])

    @property
    def mean_iou(self) -> float:
        return float(self._values("iou").mean()) if self.per_image else float("nan")

    @property
    def mean_hd(self) -> float:
        return float(self._values("hd").mean()) if self.per_image else float("nan")

    def summary(self) -> dict:
        out = {"count": len(self.per_image), "unevaluated": len(self.unevaluated),
               "fingerprint": self.fingerprint}
        for key in ("iou", "hd"):
            if self.per_image:
                vals = self._values(key)
                worst = vals.min() if key == "iou" else vals.max()
                out[key] = {"mean": float(vals.mean()), "median": float(np.median(vals)),
                            "worst": float(worst)}
        return out

    def to_dict(self) -> dict:
        return {"per_image": self.per_image, "summary": self.summary(),
                "unevaluated": self.unevaluated, "fingerprint": self.fingerprint}


# ---------------------------------------------------------------------------
# Shared training machinery


class _SampleCache:
    """Per-image constants reused every epoch: perceptual feature levels,
    Sobel gradient-magnitude field, and the initial contour placement."""

    def __init__(self, sample, extractor, exemplar_points, exemplar_size):
        self.id = sample.id
        self.image = sample.image
        h, w = sample.image.shape
        self.size = (w, h)
        self.levels = extractor.extract(sample.image)
        self.gradmag = sobel_gradient_magnitude(sample.image)
        self.initial = prepare_initial_contour(exemplar_points, exemplar_size, w, h)
        self.corrections = list(sample.corrections)


def _loss_for_sample(params_t, cache: _SampleCache, exemplar_feats, tps, config: TrainConfig,
                     model_cfg: ModelConfig, use_matching: bool):
    outputs = ctn_forward(params_t, cache.image, cache.initial, model_cfg)
    selected = outputs if config.per_block_loss else outputs[-1:]
    total = None
    parts = {"perceptual": 0.0, "bending": 0.0, "edge": 0.0, "matching": 0.0}
    for out in selected:
        perc = contour_perceptual_loss(cache.levels, exemplar_feats, out,
                                       use_levels=model_cfg.perceptual_levels,
                                       normalized=config.perceptual_normalized)
        bend = contour_bending_loss(tps, out)
        edge = edge_loss_from_gradmag(cache.gradmag, out)
        pcm = None
        if use_matching and cache.corrections:
            pcm = partial_matching_loss(cache.corrections, out)
        term = total_loss(config.weights, perc, bend, edge, pcm)
        total = term if total is None else dc.add(total, term)
        if out is outputs[-1]:  # log the prediction's (unweighted) components
            parts["perceptual"] = float(perc.value)
            parts["bending"] = float(bend.value)
            parts["edge"] = float(edge.value)
            if pcm is not None:
                parts["matching"] = float(pcm.value)
    return total, parts


def _run_training(dataset: Dataset, config: TrainConfig, params: dict[str, np.ndarray],
                  extractor: PerceptualExtractor, use_matching: bool,
                  log_path=None, trainable=None, progress=None,
                  checkpoint_dir=None) -> Checkpoint:
    model_cfg = config.model_config()
    exemplar = dataset.get(dataset.exemplar_id)
    exemplar_contour = resample_uniform(dataset.exemplar_label().points,
                                        model_cfg.n_vertices, closed=True)
    tps = tps_build(exemplar_contour)
    exemplar_levels = extractor.extract(exemplar.image)
    exemplar_feats = extractor.vertex_features(exemplar_levels, exemplar_contour.points,
                                               use_levels=model_cfg.perceptual_levels)
    pool_ids = [s.id for s in dataset.samples
                if not (config.exclude_exemplar and s.id == dataset.exemplar_id)]
    if not pool_ids:
        raise DataError("no unlabeled images to train on")
    caches = {
        s.id: _SampleCache(s, extractor, exemplar_contour.points, exemplar.size)
        for s in dataset.samples if s.id in set(pool_ids)
    }
    trainable = set(params) if trainable is None else set(trainable)
    opt_params = {k: params[k] for k in params if k in trainable}
    state = AdamState.for_params(opt_params)
    rng = np.random.default_rng(config.seed)

    def snapshot(epochs_done: int) -> Checkpoint:
        return Checkpoint(
            model_config=model_cfg,
            train_config={**config.to_dict(), "epochs_done": epochs_done},
            params={k: v.copy() for k, v in params.items()},
            extractor_level1=extractor.level1,
            extractor_level2=extractor.level2,
            exemplar_contour=exemplar_contour.points.copy(),
            exemplar_features=exemplar_feats,
            exemplar_size=exemplar.size,
        )

    log_fh = open(log_path, "w", encoding="utf-8") if log_path else None
    try:
        for epoch in range(config.epochs):
            order = [pool_ids[i] for i in rng.permutation(len(pool_ids))]
            sums = {"perceptual": 0.0, "bending": 0.0, "edge": 0.0, "matching": 0.0, "total": 0.0}
            for start in range(0, len(order), config.batch_size):
                batch = sorted(order[start : start + config.batch_size])
                params_t = {k: (dc.parameter(v, name=k) if k in trainable else dc.constant(v, name=k))
                            for k, v in params.items()}
                for sid in batch:
                    loss, parts = _loss_for_sample(params_t, caches[sid], exemplar_feats, tps,
                                                   config, model_cfg, use_matching)
                    if not np.isfinite(loss.value):
                        raise NumericError(f"non-finite loss on sample {sid!r}: {parts}")
                    dc.backward(loss)
                    for key in parts:
                        sums[key] += parts[key]
                    sums["total"] += float(loss.value)
                scale = 1.0 / len(batch)
                grads = {}
                for k in opt_params:
                    t = params_t[k]
                    grads[k] = (t.grad * scale) if t.grad is not None else np.zeros_like(params[k])
                adam_step(opt_params, grads, state, config)
            if log_fh:
                record = {"epoch": epoch, "samples": len(order)}
                record.update({k: sums[k] / len(order) for k in
                               ("perceptual", "bending", "edge", "matching", "total")})
                log_fh.write(json.dumps(record, sort_keys=True) + "\n")
            if progress:
                progress(epoch, {k: sums[k] / len(order) for k in sums})
            if (checkpoint_dir is not None and config.checkpoint_every > 0
                    and (epoch + 1) % config.checkpoint_every == 0
                    and epoch + 1 < config.epochs):
                snapshot(epoch + 1).save(Path(checkpoint_dir) / f"epoch_{epoch + 1:05d}.ckpt")
    finally:
        if log_fh:
            log_fh.close()
    return snapshot(config.epochs)


def _load_extractor(config: TrainConfig) -> PerceptualExtractor:
    if config.extractor_weights:
        return PerceptualExtractor.load(config.extractor_weights)
    return PerceptualExtractor.default(config.extractor_seed)


def _check_one_shot(dataset: Dataset) -> None:
    if dataset.exemplar_id is None:
        raise DataError("dataset must designate exactly one labeled exemplar")
    dataset.exemplar_label()  # raises if the label is missing


def train_one_shot(dataset: Dataset, config: TrainConfig, log_path=None, progress=None,
                   checkpoint_dir=None) -> Checkpoint:
    """Train from the single exemplar plus unlabeled images (no matching term)."""
    _check_one_shot(dataset)
    if len(dataset) < 2:
        raise DataError("no unlabeled images")
    params = init_params(config.model_config(), config.seed, dtype=config.np_dtype())
    extractor = _load_extractor(config)
    return _run_training(dataset, config, params, extractor, use_matching=False,
                         log_path=log_path, progress=progress, checkpoint_dir=checkpoint_dir)


def finetune_hitl(checkpoint: Checkpoint, dataset: Dataset, config: TrainConfig,
                  log_path=None, progress=None, checkpoint_dir=None) -> Checkpoint:
    """Continue training with the matching loss on corrected samples added.

    Full labels arrive as closed corrections covering the whole contour.
    Optimizer state starts fresh; the schedule and rates mirror one-shot
    training. Unlabeled samples keep contributing the three one-shot terms.
    """
    _check_one_shot(dataset)
    has_feedback = any(s.corrections for s in dataset.samples)
    if not has_feedback:
        raise DataError("no corrections or extra labels to finetune on")
    dtype = config.np_dtype()
    params = {k: np.array(v, dtype=dtype) for k, v in checkpoint.params.items()}
    extractor = checkpoint.extractor()
    trainable = None
    if config.freeze_encoder_on_finetune:
        trainable = [k for k in params if not k.startswith("enc.")]
    return _run_training(dataset, config, params, extractor, use_matching=True,
                         log_path=log_path, trainable=trainable, progress=progress,
                         checkpoint_dir=checkpoint_dir)


# ---------------------------------------------------------------------------
# Evaluation


def _fingerprint(checkpoint: Checkpoint) -> str:
    digest = hashlib.sha256()
    digest.update(json.dumps(checkpoint.train_config, sort_keys=True).encode())
    for name in checkpoint.params:
        digest.update(name.encode())
        digest.update(np.ascontiguousarray(checkpoint.params[name]).tobytes())
    return digest.hexdigest()[:16]


def evaluate(checkpoint: Checkpoint, dataset: Dataset) -> MetricsReport:
    """IoU (rasterized masks) and Hausdorff distance against ground truth.

    Samples without ground truth are reported as unevaluated, not errors.
    """
    per_image: dict[str, dict[str, float]] = {}
    unevaluated: list[str] = []
    for s in dataset.samples:
        if not dataset.has_label(s.id):
            unevaluated.append(s.id)
            continue
        gt = dataset.ground_truth(s.id)
        pred = infer_contour(checkpoint, s.image)
        h, w = s.image.shape
        per_image[s.id] = {
            "iou": iou(rasterize(pred, w, h), rasterize(gt, w, h)),
            "hd": hausdorff(pred, gt),
        }
    return MetricsReport(per_image=per_image, unevaluated=unevaluated,
                         fingerprint=_fingerprint(checkpoint))


def ablate(dataset: Dataset, config: TrainConfig, drop: str,
           eval_dataset: Dataset | None = None, log_path=None, progress=None):
    """Retrain with one loss removed and report metrics for comparison."""
    zeroed = {
        "none": {},
        "perceptual": {"perceptual": 0.0},
        "bending": {"bending": 0.0},
        "edge": {"edge": 0.0},
    }
    if drop not in zeroed:
        raise ValueError(f"drop must be one of {sorted(zeroed)}, got {drop!r}")
    cfg = replace(config, weights=replace(config.weights, **zeroed[drop]))
    ckpt = train_one_shot(dataset, cfg, log_path=log_path, progress=progress)
    report = evaluate(ckpt, eval_dataset if eval_dataset is not None else dataset)
    return ckpt, report
