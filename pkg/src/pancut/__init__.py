"""Training-free open-vocabulary segmentation: normalized-cut object discovery
on self-supervised patch features, then per-object text grounding."""

__version__ = "0.1.0"

from .errors import PancutError
from .eval import DatasetConfig, load_dataset_config, miou
from .panoptic_cut import CutConfig, panoptic_cut
from .pipeline import PipelineConfig, segment_image
from .tensor_io import FeatureMap, LabelMap, TextEmbeddingSet, load_feature_map

__all__ = [
    "CutConfig",
    "DatasetConfig",
    "FeatureMap",
    "LabelMap",
    "PancutError",
    "PipelineConfig",
    "TextEmbeddingSet",
    "load_dataset_config",
    "load_feature_map",
    "miou",
    "panoptic_cut",
    "segment_image",
]
