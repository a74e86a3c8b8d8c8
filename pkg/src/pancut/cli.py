"""Command-line entry point: ``pancut discover|ground|segment|eval|overlay|rerun``.

Results go to stdout or to files under ``--out``; logs and errors go to
stderr. Errors are a single JSON object on stderr. Exit status 2 means an
input could not be found or decoded, 3 means the inputs broke a contract.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
from PIL import Image

from . import __version__
from .errors import DataError, FormatError, PancutError, ShapeError
from .eval import ConfusionMatrix, accumulate, load_dataset_config, miou
from .grounding import pixel_logit_map, pool_logit_map, render_segmentation
from .mask_refine import CrfConfig, bilinear_resize, resize_mask, resolve_overlaps
from .panoptic_cut import CutConfig, ObjectMask, panoptic_cut
from .pipeline import PipelineConfig, SegmentationResult, processing_size, refine_masks, segment_image
from .spectral import SolverConfig
from .tensor_io import (
    DISCOVERY_PATCH_SIZE,
    GROUNDING_PATCH_SIZE,
    load_feature_map,
    load_image,
    load_label_map,
    load_text_embeddings,
    save_label_map,
    save_overlay,
)

log = logging.getLogger("pancut")

EXIT_INPUT = 2
EXIT_CONTRACT = 3


class CliError(Exception):
    def __init__(self, code: int, kind: str, message: str):
        super().__init__(message)
        self.code = code
        self.kind = kind


class _loading:
    """Turns failures while reading an input into exit-2 errors."""

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc is None or isinstance(exc, CliError):
            return False
        if isinstance(exc, (FileNotFoundError, IsADirectoryError)):
            raise CliError(EXIT_INPUT, "FileNotFoundError", str(exc)) from exc
        if isinstance(exc, (FormatError, DataError, ShapeError, json.JSONDecodeError, KeyError)):
            raise CliError(EXIT_INPUT, type(exc).__name__, str(exc)) from exc
        return False


def _seed() -> int:
    raw = os.environ.get("PANCUT_SEED")
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError:
        raise CliError(EXIT_CONTRACT, "ValueError", f"PANCUT_SEED must be an integer, got {raw!r}") from None


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fp:
        for block in iter(lambda: fp.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _jsonable(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _jsonable(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def _write_json(doc, path) -> None:
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


_PATH_ARGS = ("features", "image", "masks", "texts", "discovery", "grounding", "pred", "gt", "out", "manifest")


def _absolute(value):
    if isinstance(value, list):
        return [_absolute(v) for v in value]
    return None if value is None else str(Path(value).resolve())


def _write_manifest(path, args, config, inputs, timing, seed) -> None:
    stored = {k: v for k, v in vars(args).items() if k != "func"}
    for key in _PATH_ARGS:
        if key in stored:
            stored[key] = _absolute(stored[key])
    if "dataset" in stored and Path(stored["dataset"]).is_file():
        stored["dataset"] = _absolute(stored["dataset"])
    doc = {
        "tool": "pancut",
        "version": __version__,
        "command": args.command,
        "args": stored,
        "config": _jsonable(config),
        "seed": seed,
        "inputs": [{"path": str(Path(p).resolve()), "sha256": _sha256(p)} for p in inputs if p],
        "timing": timing,
    }
    _write_json(doc, path)


def _map_jobs(fn, items, jobs):
    """Ordered map over a process pool; sequential when one worker suffices."""
    jobs = jobs or os.cpu_count() or 1
    if jobs <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ProcessPoolExecutor(max_workers=min(jobs, len(items))) as pool:
        return list(pool.map(fn, items))


def _cut_config(args, seed) -> CutConfig:
    return CutConfig(
        max_iters=args.max_iters,
        min_nodes=args.min_nodes,
        epsilon_w=args.epsilon_w,
        affinity_mode=args.affinity_mode,
        solver=SolverConfig(seed=seed),
    )


def _short_side(value: int):
    return None if value <= 0 else value


def _grid(value):
    return tuple(value) if value else None


def _write_mask(mask: np.ndarray, path) -> None:
    Image.fromarray(mask.astype(np.uint8) * 255).save(path, format="PNG")


def _read_mask(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L")) > 127


# --------------------------------------------------------------------------- discover


def _discover_one(job):
    feat_path, image_path, args, cfg = job
    t0 = time.perf_counter()
    with _loading():
        features = load_feature_map(feat_path, args.patch_size, grid=_grid(args.grid))
        image = load_image(image_path) if image_path else None
    if image is not None:
        h0, w0 = image.shape[:2]
        hp, wp = processing_size(h0, w0, cfg.short_side)
    else:
        h0, w0 = features.height * args.patch_size, features.width * args.patch_size
        hp, wp = h0, w0
    cut = panoptic_cut(features, cfg.cut)
    masks = refine_masks(cut, hp, wp, image, cfg)
    if (hp, wp) != (h0, w0):
        masks = resolve_overlaps([m.with_pixels(resize_mask(m.pixel_mask, h0, w0)) for m in masks])
    out_dir = Path(args.out) / Path(feat_path).stem
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for m in masks:
        name = f"mask_{m.discovery_order:03d}.png"
        _write_mask(m.pixel_mask, out_dir / name)
        entries.append({"id": m.id, "file": name, "discovery_order": m.discovery_order, "area": int(m.pixel_mask.sum())})
    _write_json(
        {
            "image": Path(feat_path).stem,
            "height": h0,
            "width": w0,
            "objects": entries,
            "iterations": cut.iterations,
            "halt_reason": cut.halt_reason,
        },
        out_dir / "objects.json",
    )
    return Path(feat_path).stem, len(masks), time.perf_counter() - t0


def cmd_discover(args, seed):
    images = args.image or []
    if images and len(images) != len(args.features):
        raise CliError(EXIT_CONTRACT, "ValueError", "--image must list one image per --features file")
    crf = CrfConfig() if args.crf == "on" else None
    if crf is not None and not images:
        raise CliError(EXIT_CONTRACT, "ValueError", "--crf on needs --image")
    cfg = PipelineConfig(cut=_cut_config(args, seed), crf=crf, short_side=_short_side(args.short_side))
    jobs = [(f, images[i] if images else None, args, cfg) for i, f in enumerate(args.features)]
    done = _map_jobs(_discover_one, jobs, args.jobs)
    for stem, count, _ in done:
        print(json.dumps({"image": stem, "objects": count}))
    return cfg, list(args.features) + images, {stem: round(sec, 6) for stem, _, sec in done}, Path(args.out) / "manifest.json"


# --------------------------------------------------------------------------- ground


def _dataset_texts(dataset_arg, texts_path):
    with _loading():
        dataset = load_dataset_config(dataset_arg)
        labels, bg = dataset.text_labels()
        texts = load_text_embeddings(texts_path, labels, bg)
    ids = dataset.text_to_class_ids() + [dataset.background_class] * len(bg)
    bg_label = dataset.background_class if dataset.has_background else None
    return dataset, texts, ids, bg_label


def _load_masks(mask_dir):
    mask_dir = Path(mask_dir)
    with _loading():
        doc = json.loads((mask_dir / "objects.json").read_text())
        objs = []
        for e in doc["objects"]:
            pix = _read_mask(mask_dir / e["file"])
            if pix.shape != (doc["height"], doc["width"]):
                raise ShapeError(f"{e['file']}: mask {pix.shape} differs from {doc['height']}x{doc['width']}")
            if pix.any():
                objs.append(ObjectMask(e["id"], pix, e["discovery_order"], pix))
    return doc, objs


def cmd_ground(args, seed):
    doc, objs = _load_masks(args.masks)
    dataset, texts, ids, bg_label = _dataset_texts(args.dataset, args.texts)
    t0 = time.perf_counter()
    with _loading():
        features = load_feature_map(args.features, args.patch_size, grid=_grid(args.grid))
    h, w = doc["height"], doc["width"]
    logits = bilinear_resize(pixel_logit_map(features, texts), h, w)
    object_logits = pool_logit_map(objs, logits, texts, args.merge)
    fallback = None
    if bg_label is None:
        fallback = np.asarray(ids)[np.argmax(logits, axis=-1)]
    label_map, fraction = render_segmentation(
        objs, object_logits, h, w, 0 if bg_label is None else bg_label, label_ids=ids, fallback=fallback, ignore_value=dataset.ignore_value
    )
    result = SegmentationResult(label_map, objs, object_logits, fraction, None, doc["image"])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_label_map(label_map, out / f"{doc['image']}.png")
    sidecar = result.sidecar(list(texts.labels), ids)
    sidecar.update(iterations=doc.get("iterations"), halt_reason=doc.get("halt_reason"))
    _write_json(sidecar, out / f"{doc['image']}.json")
    print(json.dumps({"image": doc["image"], "objects": len(objs), "fallback_pixel_fraction": fraction}))
    cfg = {"merge": args.merge, "patch_size": args.patch_size, "dataset": dataset.to_json()}
    inputs = [args.features, args.texts, Path(args.masks) / "objects.json"] + [
        Path(args.masks) / e["file"] for e in doc["objects"]
    ]
    return cfg, inputs, {doc["image"]: round(time.perf_counter() - t0, 6)}, out / "manifest.json"


# --------------------------------------------------------------------------- segment


def cmd_segment(args, seed):
    dataset, texts, ids, bg_label = _dataset_texts(args.dataset, args.texts)
    t0 = time.perf_counter()
    with _loading():
        image = load_image(args.image)
        discovery = load_feature_map(args.discovery, args.discovery_patch, grid=_grid(args.discovery_grid))
        grounding = [load_feature_map(p, args.grounding_patch, grid=_grid(args.grounding_grid)) for p in args.grounding]
    cfg = PipelineConfig(
        cut=_cut_config(args, seed),
        crf=CrfConfig() if args.crf == "on" else None,
        short_side=_short_side(args.short_side),
        merge=args.merge,
    )
    stem = Path(args.image).stem
    result = segment_image(
        discovery,
        grounding[0] if len(grounding) == 1 else grounding,
        image,
        texts,
        cfg,
        label_ids=ids,
        background_label=bg_label,
        ignore_value=dataset.ignore_value,
        image_id=stem,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_label_map(result.label_map, out / f"{stem}.png")
    _write_json(result.sidecar(list(texts.labels), ids), out / f"{stem}.json")
    print(json.dumps({"image": stem, "objects": len(result.objects), "fallback_pixel_fraction": result.fallback_fraction}))
    inputs = [args.image, args.discovery, *args.grounding, args.texts]
    return {"pipeline": cfg, "dataset": dataset.to_json()}, inputs, {stem: round(time.perf_counter() - t0, 6)}, out / "manifest.json"


# --------------------------------------------------------------------------- eval


def _eval_one(job):
    pred_path, gt_path, num_classes, ignore_value = job
    with _loading():
        pred = load_label_map(pred_path)
        gt = load_label_map(gt_path, ignore_value)
    try:
        return accumulate(ConfusionMatrix.empty(num_classes), pred, gt)
    except ShapeError as exc:
        raise ShapeError(f"{Path(pred_path).name}: {exc}") from None


def cmd_eval(args, seed):
    with _loading():
        dataset = load_dataset_config(args.dataset)
    pred_dir, gt_dir = Path(args.pred), Path(args.gt)
    if not pred_dir.is_dir() or not gt_dir.is_dir():
        raise CliError(EXIT_INPUT, "FileNotFoundError", f"{pred_dir if not pred_dir.is_dir() else gt_dir} is not a directory")
    preds = sorted(pred_dir.glob("*.png"))
    jobs = []
    for p in preds:
        g = gt_dir / p.name
        if not g.exists():
            raise CliError(EXIT_INPUT, "FileNotFoundError", f"no ground truth for {p.name} in {gt_dir}")
        jobs.append((p, g, dataset.num_classes, dataset.ignore_value))
    t0 = time.perf_counter()
    conf = ConfusionMatrix.empty(dataset.num_classes)
    for part in _map_jobs(_eval_one, jobs, args.jobs):
        conf = conf + part
    result = miou(conf)
    print(json.dumps(result.to_json(conf, list(dataset.class_names)), sort_keys=True))
    inputs = [p for j in jobs for p in j[:2]]
    manifest = Path(args.manifest) if args.manifest else pred_dir / "manifest.eval.json"
    return {"dataset": dataset.to_json()}, inputs, {"total": round(time.perf_counter() - t0, 6)}, manifest


# --------------------------------------------------------------------------- overlay


def cmd_overlay(args, seed):
    t0 = time.perf_counter()
    with _loading():
        image = load_image(args.image)
        pred = load_label_map(args.pred)
    if pred.labels.shape != image.shape[:2]:
        raise ShapeError(f"label map {pred.labels.shape} and image {image.shape[:2]} differ in size")
    save_overlay(image, pred, args.out, seed=args.palette_seed)
    print(json.dumps({"overlay": str(args.out)}))
    manifest = Path(args.manifest) if args.manifest else Path(str(args.out) + ".manifest.json")
    return {"palette_seed": args.palette_seed}, [args.image, args.pred], {"total": round(time.perf_counter() - t0, 6)}, manifest


# --------------------------------------------------------------------------- rerun


def cmd_rerun(args, seed):
    with _loading():
        doc = json.loads(Path(args.manifest_path).read_text())
        stored = doc["args"]
    for entry in doc.get("inputs", []):
        with _loading():
            digest = _sha256(entry["path"])
        if digest != entry["sha256"]:
            raise CliError(EXIT_CONTRACT, "InputChangedError", f"{entry['path']} changed since the recorded run")
    replay = argparse.Namespace(**stored)
    if args.out and "out" in stored:
        replay.out = args.out
    replay.func = COMMANDS[replay.command]
    return _run(replay, doc.get("seed", 0))


# --------------------------------------------------------------------------- parser


COMMANDS = {
    "discover": cmd_discover,
    "ground": cmd_ground,
    "segment": cmd_segment,
    "eval": cmd_eval,
    "overlay": cmd_overlay,
    "rerun": cmd_rerun,
}


def _add_cut_flags(p):
    p.add_argument("--max-iters", type=int, default=16)
    p.add_argument("--min-nodes", type=int, default=5)
    p.add_argument("--epsilon-w", type=float, default=CutConfig.epsilon_w)
    p.add_argument("--affinity-mode", choices=("clamp", "shift"), default="clamp")
    p.add_argument("--short-side", type=int, default=336, help="resize shorter side before refinement; 0 keeps the size")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pancut", description="Training-free panoptic-cut segmentation from exported features.")
    parser.add_argument("--version", action="version", version=f"pancut {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("discover", help="cut objects out of discovery features")
    p.add_argument("--features", nargs="+", required=True)
    p.add_argument("--image", nargs="+", help="RGB image per features file (mask size and CRF)")
    p.add_argument("--patch-size", type=int, default=DISCOVERY_PATCH_SIZE)
    p.add_argument("--grid", type=int, nargs=2, metavar=("H", "W"), help="patch grid of rank-2 tensors")
    p.add_argument("--crf", choices=("on", "off"), default="off")
    _add_cut_flags(p)
    p.add_argument("--out", required=True)
    p.add_argument("--jobs", type=int, default=None)

    p = sub.add_parser("ground", help="label discovered masks with text embeddings")
    p.add_argument("--masks", required=True, help="one image directory written by discover")
    p.add_argument("--features", required=True)
    p.add_argument("--patch-size", type=int, default=GROUNDING_PATCH_SIZE)
    p.add_argument("--grid", type=int, nargs=2, metavar=("H", "W"))
    p.add_argument("--texts", required=True)
    p.add_argument("--dataset", required=True, help="config JSON or bundled name")
    p.add_argument("--merge", choices=("max", "mean"), default="max")
    p.add_argument("--out", required=True)

    p = sub.add_parser("segment", help="discover + ground + render one image")
    p.add_argument("--image", required=True)
    p.add_argument("--discovery", required=True)
    p.add_argument("--discovery-patch", type=int, default=DISCOVERY_PATCH_SIZE)
    p.add_argument("--discovery-grid", type=int, nargs=2, metavar=("H", "W"))
    p.add_argument("--grounding", nargs="+", required=True, help="one full-frame tensor or one per window")
    p.add_argument("--grounding-patch", type=int, default=GROUNDING_PATCH_SIZE)
    p.add_argument("--grounding-grid", type=int, nargs=2, metavar=("H", "W"))
    p.add_argument("--texts", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--crf", choices=("on", "off"), default="on")
    p.add_argument("--merge", choices=("max", "mean"), default="max")
    _add_cut_flags(p)
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", help="mIoU of predicted label maps")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--jobs", type=int, default=None)
    p.add_argument("--manifest", help="manifest path (default PRED/manifest.eval.json)")

    p = sub.add_parser("overlay", help="blend a label map over its image")
    p.add_argument("--image", required=True)
    p.add_argument("--pred", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--palette-seed", type=int, default=0)
    p.add_argument("--manifest", help="manifest path (default OUT.manifest.json)")

    p = sub.add_parser("rerun", help="replay a run from its manifest")
    p.add_argument("manifest_path")
    p.add_argument("--out", help="write outputs here instead of the recorded location")

    for name, fn in COMMANDS.items():
        sub.choices[name].set_defaults(func=fn)
    return parser


def _run(args, seed):
    if args.command == "rerun":
        return args.func(args, seed)
    config, inputs, timing, manifest = args.func(args, seed)
    _write_manifest(manifest, args, config, inputs, timing, seed)
    return 0


def _fail(code: int, kind: str, message: str) -> int:
    sys.stderr.write(json.dumps({"error": kind, "message": message, "exit_code": code}) + "\n")
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr)
    try:
        return _run(args, _seed())
    except CliError as exc:
        return _fail(exc.code, exc.kind, str(exc))
    except FileNotFoundError as exc:
        return _fail(EXIT_INPUT, "FileNotFoundError", str(exc))
    except (PancutError, ValueError) as exc:
        return _fail(EXIT_CONTRACT, type(exc).__name__, str(exc))


if __name__ == "__main__":
    sys.exit(main())
