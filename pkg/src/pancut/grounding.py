"""Late text grounding of discovered objects.

Every object gets one class: the text embedding with the highest cosine
similarity to the object's mean grounding feature. Background query labels
(wall, sky, ...) are collapsed into a single background score first.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import EmptyMaskError, ShapeError
from .tensor_io import FeatureMap, LabelMap, TextEmbeddingSet

log = logging.getLogger(__name__)

BACKGROUND = -1


@dataclass(frozen=True)
class ObjectLogits:
    """Class scores of one object.

    ``logits`` holds one cosine per text label. ``merged`` holds the
    foreground-label scores followed, when background queries exist, by the
    merged background score. ``assigned_label`` indexes ``texts.labels`` or
    is ``BACKGROUND``.
    """

    object_id: int
    logits: np.ndarray
    assigned_label: int = BACKGROUND
    merged: np.ndarray | None = None
    degenerate: bool = False


def project_mask(mask: np.ndarray, grid_h: int, grid_w: int) -> np.ndarray:
    """Pixel mask -> patch grid by majority vote (coverage >= 0.5 counts).

    Falls back to the single best-covered patch when no patch reaches half
    coverage. Raises EmptyMaskError when the mask covers nothing.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.shape == (grid_h, grid_w):
        if not mask.any():
            raise EmptyMaskError("mask is empty")
        return mask.copy()
    h, w = mask.shape
    if h < grid_h or w < grid_w:
        raise ShapeError(f"mask {mask.shape} is coarser than the {grid_h}x{grid_w} grid")
    rows = np.arange(h) * grid_h // h
    cols = np.arange(w) * grid_w // w
    cell = rows[:, None] * grid_w + cols[None, :]
    hits = np.bincount(cell.ravel(), weights=mask.ravel().astype(np.float64), minlength=grid_h * grid_w)
    sizes = np.bincount(cell.ravel(), minlength=grid_h * grid_w)
    coverage = (hits / sizes).reshape(grid_h, grid_w)
    covered = coverage >= 0.5
    if not covered.any():
        if coverage.max() == 0:
            raise EmptyMaskError("mask is empty after projection to the feature grid")
        covered = np.zeros_like(covered)
        covered.flat[int(np.argmax(coverage))] = True
    return covered


def object_prototype(features: FeatureMap, mask: np.ndarray) -> np.ndarray:
    """Mean grounding feature over the masked patches (not normalized)."""
    grid = project_mask(mask, features.height, features.width)
    return features.data[grid].astype(np.float64).mean(axis=0)


def cosine_logits(vector: np.ndarray, texts: TextEmbeddingSet) -> np.ndarray:
    """Cosine of ``vector`` with every text embedding; all zeros for a zero vector."""
    vector = np.asarray(vector, dtype=np.float64)
    if vector.shape[-1] != texts.vectors.shape[1]:
        raise ShapeError(f"feature dim {vector.shape[-1]} != text dim {texts.vectors.shape[1]}")
    norm = np.linalg.norm(vector)
    if norm == 0:
        return np.zeros(len(texts))
    return np.clip(texts.normalized() @ (vector / norm), -1.0, 1.0)


def merge_background(logits: ObjectLogits, texts: TextEmbeddingSet, mode: str = "max") -> ObjectLogits:
    """Collapse background-query scores into one and assign the winning label.

    Ties go to the foreground label with the lowest index.
    """
    raw = np.asarray(logits.logits, dtype=np.float64)
    if raw.shape != (len(texts),):
        raise ShapeError(f"expected {len(texts)} logits, got {raw.shape}")
    fg = texts.foreground_indices()
    scores = raw[fg]
    if texts.background_indices:
        bg = raw[list(texts.background_indices)]
        if mode == "max":
            bg_score = bg.max()
        elif mode == "mean":
            bg_score = bg.mean()
        else:
            raise ValueError(f"unknown merge mode {mode!r}")
        merged = np.append(scores, bg_score)
    else:
        merged = scores
    best = int(np.argmax(merged))
    assigned = BACKGROUND if best == len(fg) else fg[best]
    return ObjectLogits(logits.object_id, raw, assigned, merged, logits.degenerate)


def _object_pixels(obj) -> np.ndarray:
    mask = getattr(obj, "pixel_mask", None)
    return obj.patch_mask if mask is None else mask


def ground_objects(masks, features: FeatureMap, texts: TextEmbeddingSet, merge: str = "max") -> list[ObjectLogits]:
    """Prototype grounding: cosine(mean feature over mask, text) per object."""
    out = []
    for obj in masks:
        try:
            proto = object_prototype(features, _object_pixels(obj))
        except EmptyMaskError:
            log.warning("object %d has no patch on the grounding grid; labelled background", obj.id)
            out.append(ObjectLogits(obj.id, np.zeros(len(texts)), BACKGROUND, None, True))
            continue
        degenerate = not np.any(proto)
        scored = ObjectLogits(obj.id, cosine_logits(proto, texts), degenerate=degenerate)
        out.append(merge_background(scored, texts, merge))
    return out


def pixel_logit_map(features: FeatureMap, texts: TextEmbeddingSet) -> np.ndarray:
    """Per-patch cosine similarity to every text label, shape (H, W, Y)."""
    f = features.data.astype(np.float64)
    if f.shape[-1] != texts.vectors.shape[1]:
        raise ShapeError(f"feature dim {f.shape[-1]} != text dim {texts.vectors.shape[1]}")
    norms = np.linalg.norm(f, axis=-1, keepdims=True)
    f = np.divide(f, norms, out=np.zeros_like(f), where=norms > 0)
    return f @ texts.normalized().T


def pool_logit_map(masks, logit_map: np.ndarray, texts: TextEmbeddingSet, merge: str = "max") -> list[ObjectLogits]:
    """Mean of a pixel-level logit map over each object mask, then background merge.

    With unit-norm features this equals the prototype dot product, so the
    argmax matches prototype-cosine grounding.
    """
    out = []
    for obj in masks:
        mask = _object_pixels(obj)
        if mask.shape != logit_map.shape[:2]:
            raise ShapeError(f"mask {mask.shape} and logit map {logit_map.shape[:2]} differ in size")
        if not mask.any():
            out.append(ObjectLogits(obj.id, np.zeros(len(texts)), BACKGROUND, None, True))
            continue
        scored = ObjectLogits(obj.id, np.clip(logit_map[mask].mean(axis=0), -1.0, 1.0))
        out.append(merge_background(scored, texts, merge))
    return out


def render_segmentation(
    masks,
    object_logits,
    height: int,
    width: int,
    background_label: int,
    label_ids=None,
    fallback: np.ndarray | None = None,
    ignore_value: int = 255,
):
    """Paint every object with its assigned class.

    ``label_ids`` maps text-label index -> output class id (identity when
    None). Pixels not claimed by a labelled object get ``background_label``,
    or the class from ``fallback`` (an (H, W) id map) when one is given.
    Returns ``(LabelMap, fallback_fraction)``.
    """
    out = np.full((height, width), -1, dtype=np.int64)
    for obj, lg in zip(masks, object_logits):
        if lg.assigned_label == BACKGROUND:
            continue
        mask = _object_pixels(obj)
        if mask.shape != (height, width):
            raise ShapeError(f"mask {mask.shape} does not match output {height}x{width}")
        cls = lg.assigned_label if label_ids is None else label_ids[lg.assigned_label]
        out[mask & (out < 0)] = cls
    free = out < 0
    fraction = 0.0
    if fallback is not None:
        fallback = np.asarray(fallback)
        if fallback.shape != (height, width):
            raise ShapeError(f"fallback map {fallback.shape} does not match {height}x{width}")
        out[free] = fallback[free]
        fraction = float(free.mean())
    else:
        out[free] = background_label
    return LabelMap(out, ignore_value=ignore_value), fraction
