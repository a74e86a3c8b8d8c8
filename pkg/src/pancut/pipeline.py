"""End-to-end segmentation of one image from exported tensors.

Discovery runs once on the full-frame discovery features. Grounding logits
are produced per sliding window, averaged where windows overlap, resized to
the input image and pooled inside every object mask.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import PancutError, ShapeError
from .grounding import BACKGROUND, pixel_logit_map, pool_logit_map, render_segmentation
from .mask_refine import (
    CrfConfig,
    bilinear_resize,
    crf_refine,
    fill_holes,
    masks_to_probs,
    resize_mask,
    resolve_overlaps,
    upsample_mask,
)
from .panoptic_cut import CutConfig, CutResult, panoptic_cut
from .tensor_io import FeatureMap, LabelMap, TextEmbeddingSet

SHORT_SIDE = 336
WINDOW = 224
STRIDE = 112


@dataclass(frozen=True)
class WindowPlan:
    image_h: int
    image_w: int
    window: int
    stride: int
    crop_h: int
    crop_w: int
    crops: tuple
    coverage_count: np.ndarray


def _axis_origins(size: int, window: int, stride: int) -> list[int]:
    if size <= window:
        return [0]
    origins = list(range(0, size - window + 1, stride))
    if origins[-1] + window < size:
        origins.append(size - window)
    return origins


def plan_windows(h: int, w: int, window: int = WINDOW, stride: int = STRIDE) -> WindowPlan:
    """Sliding-window origins with the last window per axis flush to the border.

    An axis shorter than the window gets a single window spanning it.
    """
    if h < 1 or w < 1:
        raise ShapeError(f"cannot plan windows over a {h}x{w} image")
    crop_h, crop_w = min(window, h), min(window, w)
    tops = _axis_origins(h, window, stride)
    lefts = _axis_origins(w, window, stride)
    crops = tuple((t, l) for t in tops for l in lefts)
    cover = np.zeros((h, w), dtype=np.int64)
    for t, l in crops:
        cover[t : t + crop_h, l : l + crop_w] += 1
    cover.setflags(write=False)
    return WindowPlan(h, w, window, stride, crop_h, crop_w, crops, cover)


def aggregate_logits(crop_maps, plan: WindowPlan) -> np.ndarray:
    """Average per-window logit maps into one full-frame map."""
    if len(crop_maps) != len(plan.crops):
        raise ShapeError(f"{len(crop_maps)} crop maps for {len(plan.crops)} windows")
    depth = None
    total = None
    for (t, l), m in zip(plan.crops, crop_maps):
        m = np.asarray(m, dtype=np.float64)
        if m.ndim == 2:
            m = m[..., None]
        if m.shape[:2] != (plan.crop_h, plan.crop_w) or (depth is not None and m.shape[2] != depth):
            raise ShapeError(f"crop map of shape {m.shape} does not fit a {plan.crop_h}x{plan.crop_w} window")
        if total is None:
            depth = m.shape[2]
            total = np.zeros((plan.image_h, plan.image_w, depth))
        total[t : t + plan.crop_h, l : l + plan.crop_w] += m
    return total / plan.coverage_count[..., None]


def processing_size(h: int, w: int, short_side: int | None = SHORT_SIDE) -> tuple[int, int]:
    """Size after scaling so the shorter side equals ``short_side``."""
    if short_side is None:
        return h, w
    scale = short_side / min(h, w)
    return max(1, int(round(h * scale))), max(1, int(round(w * scale)))


def crop_logits_from_full(features: FeatureMap, texts: TextEmbeddingSet, plan: WindowPlan) -> list:
    """Slice window logit maps out of one full-frame grounding feature map."""
    full = bilinear_resize(pixel_logit_map(features, texts), plan.image_h, plan.image_w)
    return [full[t : t + plan.crop_h, l : l + plan.crop_w] for t, l in plan.crops]


def crop_logits_from_windows(per_crop, texts: TextEmbeddingSet, plan: WindowPlan) -> list:
    """One grounding feature map per window, in ``plan.crops`` order."""
    if len(per_crop) != len(plan.crops):
        raise ShapeError(f"{len(per_crop)} window feature maps for {len(plan.crops)} windows")
    return [bilinear_resize(pixel_logit_map(f, texts), plan.crop_h, plan.crop_w) for f in per_crop]


@dataclass(frozen=True)
class PipelineConfig:
    cut: CutConfig = field(default_factory=CutConfig)
    crf: CrfConfig | None = field(default_factory=CrfConfig)
    fill_holes: bool = True
    short_side: int | None = SHORT_SIDE
    window: int = WINDOW
    stride: int = STRIDE
    merge: str = "max"


@dataclass
class SegmentationResult:
    label_map: LabelMap
    objects: list
    object_logits: list
    fallback_fraction: float
    cut: CutResult | None
    image_id: str = ""

    def sidecar(self, text_labels=None, label_ids=None) -> dict:
        objs = []
        for obj, lg in zip(self.objects, self.object_logits):
            entry = {
                "id": obj.id,
                "discovery_order": obj.discovery_order,
                "area": int(obj.pixel_mask.sum()),
                "text_label": None,
                "class_id": None,
                "logit": None,
            }
            if lg.assigned_label != BACKGROUND:
                entry["text_label"] = text_labels[lg.assigned_label] if text_labels else lg.assigned_label
                entry["class_id"] = lg.assigned_label if label_ids is None else label_ids[lg.assigned_label]
                entry["logit"] = float(lg.logits[lg.assigned_label])
            else:
                entry["text_label"] = "background"
                if lg.merged is not None:
                    entry["logit"] = float(lg.merged[-1])
            objs.append(entry)
        return {
            "image": self.image_id,
            "objects": objs,
            "fallback_pixel_fraction": self.fallback_fraction,
            "iterations": None if self.cut is None else self.cut.iterations,
            "halt_reason": None if self.cut is None else self.cut.halt_reason,
        }


def refine_masks(cut: CutResult, out_h: int, out_w: int, image=None, cfg: PipelineConfig = PipelineConfig()) -> list:
    """Patch-level masks -> disjoint pixel masks at ``out_h`` x ``out_w``."""
    objects = cut.objects
    if not objects:
        return []
    patch = [o.patch_mask for o in objects]
    if cfg.fill_holes:
        union = np.zeros_like(patch[0])
        for m in patch:
            union |= m
        # holes are filled only with unclaimed patches so nested objects survive
        patch = [m | (fill_holes(m) & ~(union & ~m)) for m in patch]
    pixel = [upsample_mask(m, 1, out_h, out_w) for m in patch]
    if cfg.crf is not None and image is not None:
        img = np.asarray(image)
        if img.shape[:2] != (out_h, out_w):
            img = np.clip(np.rint(bilinear_resize(img, out_h, out_w)), 0, 255).astype(np.uint8)
        grid = np.zeros((out_h, out_w), dtype=np.int64)
        for k in sorted(range(len(pixel)), key=lambda i: -objects[i].discovery_order):
            grid[pixel[k]] = k + 1
        probs = masks_to_probs(grid, len(pixel) + 1, cfg.crf.smoothing)
        refined = crf_refine(probs, img, cfg.crf)
        pixel = [refined == k + 1 for k in range(len(pixel))]
    out = [o.with_pixels(m) for o, m in zip(objects, pixel)]
    return resolve_overlaps(out)


def segment_image(
    discovery: FeatureMap,
    grounding,
    image: np.ndarray,
    texts: TextEmbeddingSet,
    cfg: PipelineConfig = PipelineConfig(),
    label_ids=None,
    background_label: int | None = 0,
    ignore_value: int = 255,
    image_id: str = "",
) -> SegmentationResult:
    """Discover, refine, ground and render one image.

    ``grounding`` is either one full-frame FeatureMap or a list with one
    FeatureMap per sliding window. With ``background_label=None`` (datasets
    without a background class) pixels outside every object take the class
    of the per-pixel logit argmax instead.
    """
    try:
        image = np.asarray(image)
        if image.ndim != 3 or image.shape[2] != 3:
            raise ShapeError(f"image must be (H, W, 3), got {image.shape}")
        h0, w0 = image.shape[:2]
        hp, wp = processing_size(h0, w0, cfg.short_side)

        cut = panoptic_cut(discovery, cfg.cut)
        masks = refine_masks(cut, hp, wp, image, cfg)

        plan = plan_windows(hp, wp, cfg.window, cfg.stride)
        if isinstance(grounding, FeatureMap):
            crops = crop_logits_from_full(grounding, texts, plan)
        else:
            crops = crop_logits_from_windows(list(grounding), texts, plan)
        logits = bilinear_resize(aggregate_logits(crops, plan), h0, w0)

        if (hp, wp) != (h0, w0):
            masks = resolve_overlaps([m.with_pixels(resize_mask(m.pixel_mask, h0, w0)) for m in masks])
        object_logits = pool_logit_map(masks, logits, texts, cfg.merge)

        fallback = None
        if background_label is None:
            fg = texts.foreground_indices()
            best = np.asarray(fg)[np.argmax(logits[..., fg], axis=-1)]
            fallback = best if label_ids is None else np.asarray(label_ids)[best]
        label_map, fraction = render_segmentation(
            masks, object_logits, h0, w0, background_label if background_label is not None else 0,
            label_ids=label_ids, fallback=fallback, ignore_value=ignore_value,
        )
    except PancutError as exc:
        if image_id:
            exc.args = (f"[{image_id}] {exc.args[0] if exc.args else ''}",) + exc.args[1:]
        raise
    return SegmentationResult(label_map, masks, object_logits, fraction, cut, image_id)
