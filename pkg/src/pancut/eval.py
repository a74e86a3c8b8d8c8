"""Dataset configuration and mIoU evaluation."""

from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import EmptyEvalError, LabelError, ShapeError
from .tensor_io import LabelMap

BUNDLED = ("voc21", "context60", "coco_object", "voc20", "context59", "ade20k", "coco_stuff")


@dataclass(frozen=True)
class DatasetConfig:
    """Class list of one benchmark.

    With-background datasets name their background class (``background_class``,
    index 0 by default) and carry text queries that stand in for it.
    """

    name: str
    class_names: tuple
    background_queries: tuple = ()
    ignore_value: int = 255
    background_class: int = 0

    def __post_init__(self):
        object.__setattr__(self, "class_names", tuple(self.class_names))
        object.__setattr__(self, "background_queries", tuple(self.background_queries))
        if len(set(self.class_names)) != len(self.class_names):
            raise ValueError(f"{self.name}: duplicate class names")
        if self.has_background and not 0 <= self.background_class < len(self.class_names):
            raise ValueError(f"{self.name}: background class index out of range")

    @property
    def has_background(self) -> bool:
        return bool(self.background_queries)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def text_labels(self):
        """Labels of the text-embedding rows and the background-query row indices.

        Rows are the non-background classes in order, then the background
        queries.
        """
        if not self.has_background:
            return list(self.class_names), []
        fg = [c for i, c in enumerate(self.class_names) if i != self.background_class]
        return fg + list(self.background_queries), list(range(len(fg), len(fg) + len(self.background_queries)))

    def text_to_class_ids(self) -> list[int]:
        """Class id of every non-background text row."""
        if not self.has_background:
            return list(range(self.num_classes))
        return [i for i in range(self.num_classes) if i != self.background_class]

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "classes": list(self.class_names),
            "background_queries": list(self.background_queries),
            "ignore_value": self.ignore_value,
            "background_class": self.background_class,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "DatasetConfig":
        return cls(
            name=doc["name"],
            class_names=doc["classes"],
            background_queries=doc.get("background_queries", []),
            ignore_value=int(doc.get("ignore_value", 255)),
            background_class=int(doc.get("background_class", 0)),
        )


def load_dataset_config(path_or_name) -> DatasetConfig:
    """Read a JSON config file, or a bundled one by name (e.g. ``"voc21"``)."""
    if str(path_or_name) in BUNDLED:
        text = resources.files("pancut.datasets").joinpath(f"{path_or_name}.json").read_text()
    else:
        text = Path(path_or_name).read_text()
    return DatasetConfig.from_json(json.loads(text))


@dataclass
class ConfusionMatrix:
    """Rows are ground truth, columns predictions."""

    counts: np.ndarray
    ignored: int = 0

    @classmethod
    def empty(cls, num_classes: int) -> "ConfusionMatrix":
        return cls(np.zeros((num_classes, num_classes), dtype=np.int64), 0)

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.counts.shape != self.counts.shape:
            raise ShapeError("cannot add confusion matrices of different sizes")
        return ConfusionMatrix(self.counts + other.counts, self.ignored + other.ignored)


def accumulate(conf: ConfusionMatrix, pred: LabelMap, gt: LabelMap) -> ConfusionMatrix:
    """Return ``conf`` plus the pixel tally of one (prediction, ground truth) pair."""
    p = pred.labels
    g = gt.labels
    if p.shape != g.shape:
        raise ShapeError(f"prediction {p.shape} and ground truth {g.shape} differ in size")
    y = conf.num_classes
    keep = g != gt.ignore_value
    gv = g[keep]
    pv = p[keep]
    if gv.size and gv.max() >= y:
        raise LabelError(f"ground-truth label {int(gv.max())} outside {y} classes")
    if pv.size and pv.max() >= y:
        raise LabelError(f"predicted label {int(pv.max())} outside {y} classes")
    tally = np.bincount(gv * y + pv, minlength=y * y).reshape(y, y)
    return ConfusionMatrix(conf.counts + tally, conf.ignored + int((~keep).sum()))


@dataclass(frozen=True)
class MIoU:
    per_class_iou: np.ndarray
    mean: float
    excluded_classes: tuple

    def to_json(self, conf: ConfusionMatrix, class_names=None) -> dict:
        names = class_names or [str(i) for i in range(len(self.per_class_iou))]
        return {
            "miou": self.mean,
            "per_class_iou": {n: (None if np.isnan(v) else float(v)) for n, v in zip(names, self.per_class_iou)},
            "excluded_classes": [names[i] for i in self.excluded_classes],
            "pixel_counts": {"evaluated": int(conf.counts.sum()), "ignored": int(conf.ignored)},
        }


def miou(conf: ConfusionMatrix) -> MIoU:
    """IoU_y = TP / (TP + FP + FN); classes with an empty union are left out of the mean."""
    c = conf.counts.astype(np.float64)
    if c.size == 0:
        raise EmptyEvalError("confusion matrix has no classes")
    tp = np.diag(c)
    union = c.sum(axis=0) + c.sum(axis=1) - tp
    valid = union > 0
    if not valid.any():
        raise EmptyEvalError("no class has any predicted or ground-truth pixel")
    iou = np.full(c.shape[0], np.nan)
    iou[valid] = tp[valid] / union[valid]
    excluded = tuple(int(i) for i in np.flatnonzero(~valid))
    return MIoU(iou, float(iou[valid].mean()), excluded)
