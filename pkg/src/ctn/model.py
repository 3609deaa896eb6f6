"""Contour evolution network: CNN image encoder plus five cascaded GCN blocks.

The encoder produces a stride-4 feature map of the target image, computed
once per forward pass. Each GCN block samples vertex features from that map
at the current contour, runs graph convolutions over the contour ring (each
vertex sees two neighbors per side), and predicts per-vertex offsets in
normalized coordinates; offsets are scaled by the image dimensions and added
to the contour. With zero-initialized output heads the cascade is the
identity map on the initial (centered exemplar) contour.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .contour import Contour, center_initialize
from .errors import DataError
from .losses import PerceptualExtractor

__all__ = [
    "ModelConfig",
    "Checkpoint",
    "init_params",
    "param_count",
    "ring_neighbors",
    "encode",
    "extract_vertex_features",
    "gcn_block_forward",
    "ctn_forward",
    "prepare_initial_contour",
    "infer_contour",
]

CKPT_MAGIC = b"CTNCKPT1"
ENCODER_STRIDE = 4  # three stride-2 stages, one 2x upsample


@dataclass(frozen=True)
class ModelConfig:
    n_vertices: int = 64
    encoder_channels: tuple[int, ...] = (16, 32, 64, 64)
    gcn_blocks: int = 5
    gcn_layers: int = 6
    gcn_hidden: int = 128
    perceptual_levels: tuple[int, ...] = (1, 2)

    def to_dict(self) -> dict:
        return {
            "n_vertices": self.n_vertices,
            "encoder_channels": list(self.encoder_channels),
            "gcn_blocks": self.gcn_blocks,
            "gcn_layers": self.gcn_layers,
            "gcn_hidden": self.gcn_hidden,
            "perceptual_levels": list(self.perceptual_levels),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(
            n_vertices=int(d["n_vertices"]),
            encoder_channels=tuple(d["encoder_channels"]),
            gcn_blocks=int(d["gcn_blocks"]),
            gcn_layers=int(d["gcn_layers"]),
            gcn_hidden=int(d["gcn_hidden"]),
            perceptual_levels=tuple(d.get("perceptual_levels", (1, 2))),
        )


def _param_spec(config: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Ordered (name, shape) list; the order is the checkpoint blob order."""
    spec: list[tuple[str, tuple[int, ...]]] = []
    ch = config.encoder_channels
    prev = 1
    for i, c in enumerate(ch):
        spec.append((f"enc.s{i}.c1.w", (c, prev, 3, 3)))
        spec.append((f"enc.s{i}.n1.g", (c,)))
        spec.append((f"enc.s{i}.n1.b", (c,)))
        spec.append((f"enc.s{i}.c2.w", (c, c, 3, 3)))
        spec.append((f"enc.s{i}.n2.g", (c,)))
        spec.append((f"enc.s{i}.n2.b", (c,)))
        prev = c
    out_c = ch[-1]
    spec.append(("enc.fuse.w", (out_c, out_c, 3, 3)))
    spec.append(("enc.fuse.n.g", (out_c,)))
    spec.append(("enc.fuse.n.b", (out_c,)))
    feat = out_c + 2  # sampled channels plus normalized (x, y)
    for k in range(config.gcn_blocks):
        fin = feat
        for j in range(config.gcn_layers):
            spec.append((f"block{k}.l{j}.ws", (fin, config.gcn_hidden)))
            spec.append((f"block{k}.l{j}.wn", (fin, config.gcn_hidden)))
            spec.append((f"block{k}.l{j}.b", (config.gcn_hidden,)))
            fin = config.gcn_hidden
        spec.append((f"block{k}.head.w", (config.gcn_hidden, 2)))
        spec.append((f"block{k}.head.b", (2,)))
    return spec


def param_count(config: ModelConfig) -> int:
    return sum(int(np.prod(shape)) for _, shape in _param_spec(config))


def init_params(config: ModelConfig, seed: int, dtype=np.float32) -> dict[str, np.ndarray]:
    """He-normal weights, unit gains, zero biases; output heads start at zero
    so the untrained cascade reproduces the initial contour exactly."""
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}
    for name, shape in _param_spec(config):
        if name.endswith(".g"):
            arr = np.ones(shape)
        elif name.endswith(".b") or "head" in name:
            arr = np.zeros(shape)
        elif name.endswith(".w") or name.endswith(".ws") or name.endswith(".wn"):
            fan_in = int(np.prod(shape[1:])) if len(shape) == 4 else shape[0]
            arr = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
        else:
            raise AssertionError(name)
        params[name] = arr.astype(dtype)
    return params


def ring_neighbors(n: int) -> list[np.ndarray]:
    """Index arrays for the 4-neighbor contour ring (offsets -2,-1,+1,+2)."""
    base = np.arange(n)
    return [(base + d) % n for d in (-2, -1, 1, 2)]


def _pad_to_stride(image: np.ndarray, stride: int = 8) -> np.ndarray:
    h, w = image.shape
    ph = (-h) % stride
    pw = (-w) % stride
    if ph == 0 and pw == 0:
        return image
    return np.pad(image, ((0, ph), (0, pw)), mode="edge")


def encode(params: dict[str, dc.Tensor], image: np.ndarray, config: ModelConfig) -> dc.Tensor:
    """Stride-4 feature map of a (H,W) image; dims padded (bottom/right) to a
    multiple of 8 when needed."""
    x = dc.constant(_pad_to_stride(np.asarray(image))[None].astype(params["enc.s0.c1.w"].dtype))
    skips = []
    for i in range(len(config.encoder_channels)):
        stride = 1 if i == 0 else 2
        x = dc.conv2d(x, params[f"enc.s{i}.c1.w"], stride=stride, padding=1)
        x = dc.relu(dc.channel_norm(x, params[f"enc.s{i}.n1.g"], params[f"enc.s{i}.n1.b"]))
        x = dc.conv2d(x, params[f"enc.s{i}.c2.w"], stride=1, padding=1)
        x = dc.relu(dc.channel_norm(x, params[f"enc.s{i}.n2.g"], params[f"enc.s{i}.n2.b"]))
        skips.append(x)
    merged = dc.add(skips[-2], dc.upsample2x_nearest(skips[-1]))
    fused = dc.conv2d(merged, params["enc.fuse.w"], stride=1, padding=1)
    return dc.relu(dc.channel_norm(fused, params["enc.fuse.n.g"], params["enc.fuse.n.b"]))


def extract_vertex_features(fmap: dc.Tensor, contour_t: dc.Tensor, width: int, height: int) -> dc.Tensor:
    """Sample the feature map at vertex positions and append normalized coords."""
    coords = dc.smul(contour_t, 1.0 / ENCODER_STRIDE)
    feats = dc.bilinear_sample(fmap, coords)
    dtype = fmap.value.dtype
    norm_xy = dc.matmul(contour_t, dc.constant(np.diag([1.0 / width, 1.0 / height]).astype(dtype)))
    return dc.concat([feats, norm_xy], axis=1)


def gcn_block_forward(params: dict[str, dc.Tensor], block: int, vertex_feats: dc.Tensor,
                      width: int, height: int, config: ModelConfig) -> dc.Tensor:
    """One evolution block: graph convolutions over the ring, then the offset
    head; returns per-vertex offsets in pixels."""
    h = vertex_feats
    for j in range(config.gcn_layers):
        nb = dc.ring_mean(h)
        # h@Ws + nb@Wn fused into one GEMM over concatenated features
        stacked = dc.concat([h, nb], axis=1)
        wcat = dc.concat([params[f"block{block}.l{j}.ws"], params[f"block{block}.l{j}.wn"]], axis=0)
        pre = dc.add(dc.matmul(stacked, wcat), params[f"block{block}.l{j}.b"])
        h = dc.relu(pre)
    off = dc.add(dc.matmul(h, params[f"block{block}.head.w"]), params[f"block{block}.head.b"])
    dtype = off.value.dtype
    return dc.matmul(off, dc.constant(np.diag([float(width), float(height)]).astype(dtype)))


def prepare_initial_contour(exemplar_points: np.ndarray, exemplar_size: tuple[int, int],
                            width: int, height: int) -> np.ndarray:
    """Center the exemplar contour on the target image; when dimensions differ
    the contour is first scaled isotropically by the image diagonal ratio."""
    pts = np.asarray(exemplar_points, dtype=np.float64)
    ew, eh = exemplar_size
    if (ew, eh) != (width, height):
        pts = pts * (np.hypot(width, height) / np.hypot(ew, eh))
    return center_initialize(Contour(pts), width, height).points


def ctn_forward(params: dict[str, dc.Tensor], image: np.ndarray, initial: np.ndarray,
                config: ModelConfig) -> list[dc.Tensor]:
    """Run the cascade; returns the per-block contours (the last is the prediction).

    ``initial`` must already be placed in the target image frame (see
    ``prepare_initial_contour``). The encoder map is computed once and shared
    by all blocks.
    """
    if initial.shape[0] != config.n_vertices:
        raise ValueError(
            f"contour has {initial.shape[0]} vertices, model expects {config.n_vertices}"
        )
    height, width = image.shape
    fmap = encode(params, image, config)
    dtype = fmap.value.dtype
    contour_t = dc.constant(initial.astype(dtype))
    outputs = []
    for k in range(config.gcn_blocks):
        vf = extract_vertex_features(fmap, contour_t, width, height)
        off = gcn_block_forward(params, k, vf, width, height, config)
        contour_t = dc.add(contour_t, off)
        outputs.append(contour_t)
    return outputs


# ---------------------------------------------------------------------------
# Checkpoints


@dataclass
class Checkpoint:
    """Everything inference needs: trained weights, frozen extractor weights,
    the exemplar contour and its per-vertex perceptual features, plus the
    exemplar image size and the full training configuration."""

    model_config: ModelConfig
    train_config: dict
    params: dict[str, np.ndarray]
    extractor_level1: np.ndarray
    extractor_level2: np.ndarray
    exemplar_contour: np.ndarray
    exemplar_features: np.ndarray
    exemplar_size: tuple[int, int]
    extras: dict = field(default_factory=dict)

    def extractor(self) -> PerceptualExtractor:
        return PerceptualExtractor(self.extractor_level1, self.extractor_level2)

    def save(self, path) -> None:
        """CTNCKPT1 container: magic, u32 LE header length, header JSON, then
        raw little-endian blobs in header order. Header: {"config": {...},
        "blobs": [{"name", "dtype", "shape"}...]}."""
        blobs: list[tuple[str, np.ndarray]] = list(self.params.items())
        blobs += [
            ("extractor.level1", self.extractor_level1),
            ("extractor.level2", self.extractor_level2),
            ("exemplar.contour", self.exemplar_contour),
            ("exemplar.features", self.exemplar_features),
        ]
        entries = []
        payload = bytearray()
        for name, arr in blobs:
            arr = np.ascontiguousarray(arr)
            dt = arr.dtype.newbyteorder("<")
            entries.append({"name": name, "dtype": dt.str, "shape": list(arr.shape)})
            payload.extend(arr.astype(dt).tobytes())
        header = {
            "config": {
                "model": self.model_config.to_dict(),
                "train": self.train_config,
                "exemplar_size": list(self.exemplar_size),
                "extras": self.extras,
            },
            "blobs": entries,
        }
        hjson = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
        with open(path, "wb") as fh:
            fh.write(CKPT_MAGIC)
            fh.write(struct.pack("<I", len(hjson)))
            fh.write(hjson)
            fh.write(bytes(payload))

    @classmethod
    def load(cls, path) -> "Checkpoint":
        with open(path, "rb") as fh:
            if fh.read(8) != CKPT_MAGIC:
                raise DataError(f"not a CTNCKPT1 checkpoint: {path}")
            (hlen,) = struct.unpack("<I", fh.read(4))
            header = json.loads(fh.read(hlen).decode("utf-8"))
            arrays: dict[str, np.ndarray] = {}
            for entry in header["blobs"]:
                shape = tuple(entry["shape"])
                dt = np.dtype(entry["dtype"])
                count = int(np.prod(shape)) if shape else 1
                arrays[entry["name"]] = np.frombuffer(
                    fh.read(count * dt.itemsize), dtype=dt
                ).reshape(shape)
        cfg = header["config"]
        model_config = ModelConfig.from_dict(cfg["model"])
        reserved = {"extractor.level1", "extractor.level2", "exemplar.contour", "exemplar.features"}
        params = {k: v for k, v in arrays.items() if k not in reserved}
        expected = _param_spec(model_config)
        if len(params) != len(expected):
            raise DataError(
                f"checkpoint rejected: {len(params)} parameter blobs, config expects {len(expected)}"
            )
        for name, shape in expected:
            if name not in params or tuple(params[name].shape) != shape:
                raise DataError(f"checkpoint rejected: parameter {name!r} missing or misshaped")
        return cls(
            model_config=model_config,
            train_config=cfg["train"],
            params=params,
            extractor_level1=arrays["extractor.level1"],
            extractor_level2=arrays["extractor.level2"],
            exemplar_contour=arrays["exemplar.contour"],
            exemplar_features=arrays["exemplar.features"],
            exemplar_size=tuple(cfg["exemplar_size"]),
            extras=cfg.get("extras", {}),
        )


def infer_contour(checkpoint: Checkpoint, image: np.ndarray) -> Contour:
    """Predict the contour of one image from a checkpoint (deterministic)."""
    params = {k: dc.constant(v) for k, v in checkpoint.params.items()}
    h, w = image.shape
    initial = prepare_initial_contour(checkpoint.exemplar_contour, checkpoint.exemplar_size, w, h)
    outputs = ctn_forward(params, image, initial, checkpoint.model_config)
    return Contour(np.asarray(outputs[-1].value, dtype=np.float64), closed=True)
