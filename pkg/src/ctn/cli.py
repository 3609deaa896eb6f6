"""Command-line entry points.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
``--json`` switches machine-readable output on where it applies. The
environment variable CTN_DATA_ROOT supplies a default for ``--data``.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from .contour import Contour, rasterize, save_contour, write_mask_pgm
from .dataio import (
    generate_synthetic,
    load_dataset,
    read_image,
    save_corrections_file,
    save_dataset,
    select_exemplar,
    simulate_corrections,
)
from .errors import DataError, GeometryError, NumericError
from .model import Checkpoint, infer_contour
from .training import TrainConfig, ablate, evaluate, finetune_hitl, train_one_shot

USAGE_EXIT = 1
DATA_EXIT = 2
NUMERIC_EXIT = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(USAGE_EXIT)


def render_overlay(image: np.ndarray, contour: Contour) -> np.ndarray:
    """Grayscale image with the contour polyline burned in (returns HxWx3 uint8)."""
    h, w = image.shape
    rgb = np.repeat((np.clip(image, 0, 1) * 255).astype(np.uint8)[:, :, None], 3, axis=2)
    pts = contour.points
    pairs = zip(pts, np.roll(pts, -1, axis=0)) if contour.closed else zip(pts[:-1], pts[1:])
    for a, b in pairs:
        steps = max(int(np.ceil(np.abs(b - a).max() * 2)), 1)
        t = np.linspace(0.0, 1.0, steps + 1)[:, None]
        line = np.round(a + t * (b - a)).astype(int)
        keep = (line[:, 0] >= 0) & (line[:, 0] < w) & (line[:, 1] >= 0) & (line[:, 1] < h)
        line = line[keep]
        rgb[line[:, 1], line[:, 0]] = (255, 64, 32)
    return rgb


def _data_root(args) -> Path:
    root = args.data or os.environ.get("CTN_DATA_ROOT")
    if not root:
        raise DataError("no dataset given: pass --data or set CTN_DATA_ROOT")
    return Path(root)


def _load_config(args) -> TrainConfig:
    if getattr(args, "config", None):
        with open(args.config, "r", encoding="utf-8") as fh:
            cfg = TrainConfig.from_dict(json.load(fh))
    else:
        cfg = TrainConfig()
    if getattr(args, "seed", None) is not None:
        from dataclasses import replace

        cfg = replace(cfg, seed=args.seed)
    return cfg


def _cmd_synth(args) -> int:
    ds = generate_synthetic(count=args.count, size=args.size, noise=args.noise,
                            seed=args.seed if args.seed is not None else 0,
                            n_vertices=args.n)
    save_dataset(ds, args.out)
    if args.json:
        print(json.dumps({"images": len(ds), "out": str(args.out)}))
    else:
        print(f"wrote {len(ds)} images to {args.out}")
    return 0


def _cmd_select_exemplar(args) -> int:
    root = _data_root(args)
    ds = load_dataset(root)
    chosen = select_exemplar(ds)
    ds.meta["exemplar"] = chosen
    with open(root / "meta.json", "w", encoding="utf-8") as fh:
        json.dump(ds.meta, fh, sort_keys=True)
    print(json.dumps({"exemplar": chosen}) if args.json else f"exemplar: {chosen}")
    return 0


def _cmd_train(args) -> int:
    ds = load_dataset(_data_root(args))
    cfg = _load_config(args)
    snapshots = None
    if cfg.checkpoint_every > 0:
        snapshots = Path(str(args.out) + ".snapshots")
        snapshots.mkdir(parents=True, exist_ok=True)
    ckpt = train_one_shot(ds, cfg, log_path=args.log, checkpoint_dir=snapshots)
    ckpt.save(args.out)
    print(json.dumps({"checkpoint": str(args.out)}) if args.json else f"checkpoint: {args.out}")
    return 0


def _cmd_finetune(args) -> int:
    ds = load_dataset(_data_root(args))
    cfg = _load_config(args)
    ckpt = Checkpoint.load(args.checkpoint)
    snapshots = None
    if cfg.checkpoint_every > 0:
        snapshots = Path(str(args.out) + ".snapshots")
        snapshots.mkdir(parents=True, exist_ok=True)
    tuned = finetune_hitl(ckpt, ds, cfg, log_path=args.log, checkpoint_dir=snapshots)
    tuned.save(args.out)
    print(json.dumps({"checkpoint": str(args.out)}) if args.json else f"checkpoint: {args.out}")
    return 0


def _cmd_infer(args) -> int:
    ckpt = Checkpoint.load(args.checkpoint)
    image = read_image(args.image)
    pred = infer_contour(ckpt, image)
    if args.out:
        save_contour(args.out, pred)
    if args.mask:
        h, w = image.shape
        write_mask_pgm(args.mask, rasterize(pred, w, h))
    if args.overlay:
        from PIL import Image

        Image.fromarray(render_overlay(image, pred), mode="RGB").save(args.overlay)
    if args.json or not args.out:
        print(json.dumps({"closed": True, "points": pred.points.tolist()}))
    return 0


def _cmd_eval(args) -> int:
    ds = load_dataset(_data_root(args))
    ckpt = Checkpoint.load(args.checkpoint)
    report = evaluate(ckpt, ds)
    if args.csv:
        with open(args.csv, "w", encoding="utf-8") as fh:
            fh.write("id,iou,hd\n")
            for sid, m in sorted(report.per_image.items()):
                fh.write(f"{sid},{m['iou']},{m['hd']}\n")
    print(json.dumps(report.to_dict()) if args.json else json.dumps(report.summary(), indent=2))
    return 0


def _cmd_ablate(args) -> int:
    ds = load_dataset(_data_root(args))
    eval_ds = load_dataset(args.eval_data) if args.eval_data else None
    cfg = _load_config(args)
    ckpt, report = ablate(ds, cfg, args.drop, eval_dataset=eval_ds, log_path=args.log)
    if args.out:
        ckpt.save(args.out)
    print(json.dumps({"drop": args.drop, **report.summary()})
          if args.json else json.dumps(report.summary(), indent=2))
    return 0


def _cmd_simulate_corrections(args) -> int:
    root = _data_root(args)
    ds = load_dataset(root)
    ckpt = Checkpoint.load(args.checkpoint)
    predictions, truths = {}, {}
    for s in ds.samples:
        if not ds.has_label(s.id) or s.id == ds.exemplar_id:
            continue
        predictions[s.id] = infer_contour(ckpt, s.image)
        truths[s.id] = ds.ground_truth(s.id)
    out = simulate_corrections(predictions, truths, args.fraction, mode=args.mode, tau=args.tau)
    target = Path(args.out) if args.out else root / "corrections"
    target.mkdir(parents=True, exist_ok=True)
    for sid, segs in sorted(out.items()):
        save_corrections_file(target / f"{sid}.corrections.json", sid, segs)
    summary = {"images": len(out), "segments": int(sum(len(v) for v in out.values()))}
    print(json.dumps(summary) if args.json else f"wrote corrections for {len(out)} images")
    return 0


def _cmd_serve(args) -> int:
    import uvicorn

    from .service import create_app

    app = create_app(args.checkpoint, _data_root(args), frontend=args.frontend)
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return 0


def build_parser() -> _Parser:
    p = _Parser(prog="ctn", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, data=True, config=False, seed=True):
        if data:
            sp.add_argument("--data", help="dataset root (default: $CTN_DATA_ROOT)")
        if config:
            sp.add_argument("--config", help="training config JSON (mirrors TrainConfig)")
            sp.add_argument("--log", help="write an ndjson training curve here")
        if seed:
            sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--json", action="store_true", help="machine-readable output")

    sp = sub.add_parser("synth", help="generate a synthetic dataset")
    sp.add_argument("--count", type=int, required=True)
    sp.add_argument("--size", type=int, default=64)
    sp.add_argument("--noise", type=float, default=0.05)
    sp.add_argument("--n", type=int, default=64, help="ground-truth contour vertices")
    sp.add_argument("--out", required=True)
    common(sp, data=False)
    sp.set_defaults(fn=_cmd_synth)

    sp = sub.add_parser("select-exemplar", help="pick and record the exemplar image")
    common(sp, seed=False)
    sp.set_defaults(fn=_cmd_select_exemplar)

    sp = sub.add_parser("train", help="one-shot training")
    sp.add_argument("--out", required=True, help="checkpoint path")
    common(sp, config=True)
    sp.set_defaults(fn=_cmd_train)

    sp = sub.add_parser("finetune", help="human-in-the-loop fine-tuning")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--out", required=True)
    common(sp, config=True)
    sp.set_defaults(fn=_cmd_finetune)

    sp = sub.add_parser("infer", help="predict a contour for one image")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--image", required=True)
    sp.add_argument("--out", help="write .contour.json here")
    sp.add_argument("--mask", help="write a PGM mask here")
    sp.add_argument("--overlay", help="write an overlay PNG here")
    common(sp, data=False, seed=False)
    sp.set_defaults(fn=_cmd_infer)

    sp = sub.add_parser("eval", help="IoU/HD report against ground truth")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--csv", help="also write per-image CSV here")
    common(sp, seed=False)
    sp.set_defaults(fn=_cmd_eval)

    sp = sub.add_parser("ablate", help="retrain with one loss dropped")
    sp.add_argument("--drop", required=True, choices=["none", "perceptual", "bending", "edge"])
    sp.add_argument("--eval-data", help="separate evaluation dataset root")
    sp.add_argument("--out", help="save the retrained checkpoint here")
    common(sp, config=True)
    sp.set_defaults(fn=_cmd_ablate)

    sp = sub.add_parser("simulate-corrections", help="simulate annotator feedback")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--fraction", type=float, required=True)
    sp.add_argument("--mode", choices=["full", "partial"], default="partial")
    sp.add_argument("--tau", type=float, default=3.0)
    sp.add_argument("--out", help="corrections dir (default: <data>/corrections)")
    common(sp, seed=False)
    sp.set_defaults(fn=_cmd_simulate_corrections)

    sp = sub.add_parser("serve", help="run the correction/annotation HTTP service")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--port", type=int, default=8901)
    sp.add_argument("--host", default="127.0.0.1")
    sp.add_argument("--frontend", help="static assets directory served at /")
    common(sp, seed=False)
    sp.set_defaults(fn=_cmd_serve)
    return p


def cli_dispatch(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.fn(args)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else USAGE_EXIT
    except (DataError, GeometryError, FileNotFoundError, PermissionError) as exc:
        print(f"error: data: {exc}", file=sys.stderr)
        return DATA_EXIT
    except (NumericError, FloatingPointError) as exc:
        print(f"error: numeric: {exc}", file=sys.stderr)
        return NUMERIC_EXIT


def main() -> None:
    raise SystemExit(cli_dispatch())


if __name__ == "__main__":
    main()
