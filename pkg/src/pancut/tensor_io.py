"""File boundary of the engine: feature tensors, text embeddings, images, label maps.

Backbones are never run here. Feature maps and text embeddings arrive as
NPY files written by an external export script (see README), images as
8-bit PNG or binary PPM, and label maps leave as single-channel 16-bit PNG.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from numpy.lib import format as npformat
from PIL import Image, PngImagePlugin

from .errors import DataError, FormatError, RangeError, ShapeError

DISCOVERY_PATCH_SIZE = 8
GROUNDING_PATCH_SIZE = 16

_PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"
_FLOAT_DTYPES = (np.dtype("<f4"), np.dtype("<f8"))


def _readonly(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class FeatureMap:
    """Dense grid of per-patch embeddings, shape (height, width, channels)."""

    data: np.ndarray
    patch_size: int = DISCOVERY_PATCH_SIZE
    source_tag: str = ""

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise ShapeError(f"feature map must be rank 3 (H, W, C), got shape {data.shape}")
        if min(data.shape) < 1:
            raise ShapeError(f"feature map has an empty axis: shape {data.shape}")
        if self.patch_size < 1:
            raise ValueError("patch_size must be >= 1")
        data = data.astype(np.float32, copy=False)
        if not np.all(np.isfinite(data)):
            raise DataError("feature map contains non-finite values")
        object.__setattr__(self, "data", _readonly(data))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    def flat(self) -> np.ndarray:
        """Row-major (H*W, C) view."""
        return self.data.reshape(-1, self.channels)


@dataclass(frozen=True)
class TextEmbeddingSet:
    labels: tuple
    vectors: np.ndarray
    background_indices: tuple = ()

    def __post_init__(self):
        labels = tuple(str(s) for s in self.labels)
        vectors = np.asarray(self.vectors, dtype=np.float64)
        if vectors.ndim != 2 or vectors.shape[0] != len(labels):
            raise ShapeError(
                f"expected {len(labels)} text vectors of shared dimension, got shape {vectors.shape}"
            )
        if len(labels) == 0:
            raise ShapeError("text embedding set is empty")
        if not np.all(np.isfinite(vectors)):
            raise DataError("text embeddings contain non-finite values")
        if np.any(np.linalg.norm(vectors, axis=1) == 0):
            raise DataError("text embeddings contain a zero vector")
        bg = tuple(int(i) for i in self.background_indices)
        if len(set(bg)) != len(bg) or any(i < 0 or i >= len(labels) for i in bg):
            raise RangeError(f"invalid background indices {bg} for {len(labels)} labels")
        if len(bg) == len(labels):
            raise RangeError("every text label is a background query")
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "vectors", _readonly(vectors))
        object.__setattr__(self, "background_indices", bg)

    def __len__(self):
        return len(self.labels)

    def normalized(self) -> np.ndarray:
        return self.vectors / np.linalg.norm(self.vectors, axis=1, keepdims=True)

    def foreground_indices(self) -> list[int]:
        bg = set(self.background_indices)
        return [i for i in range(len(self.labels)) if i not in bg]


@dataclass(frozen=True)
class LabelMap:
    labels: np.ndarray
    ignore_value: int = 255

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 2:
            raise ShapeError(f"label map must be 2-D, got shape {labels.shape}")
        if labels.size and not np.issubdtype(labels.dtype, np.integer):
            raise DataError(f"label map must hold integers, got {labels.dtype}")
        if labels.size and labels.min() < 0:
            raise RangeError("label map holds negative labels")
        object.__setattr__(self, "labels", _readonly(labels.astype(np.int64, copy=False)))

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]


# --------------------------------------------------------------------------- NPY


def _read_npy(path: Path) -> np.ndarray:
    path = Path(path)
    with open(path, "rb") as fp:
        try:
            version = npformat.read_magic(fp)
        except ValueError as exc:
            raise FormatError(f"{path}: not an NPY file ({exc})") from None
        if version == (1, 0):
            reader = npformat.read_array_header_1_0
        elif version == (2, 0):
            reader = npformat.read_array_header_2_0
        else:
            raise FormatError(f"{path}: unsupported NPY version {version}")
        try:
            shape, fortran_order, dtype = reader(fp)
        except ValueError as exc:
            raise FormatError(f"{path}: malformed NPY header ({exc})") from None
        if dtype not in _FLOAT_DTYPES:
            raise FormatError(f"{path}: dtype {dtype.str} is not a little-endian 32/64-bit float")
        count = int(np.prod(shape, dtype=np.int64))
        payload = fp.read()
    if len(payload) != count * dtype.itemsize:
        raise FormatError(
            f"{path}: payload has {len(payload)} bytes, header promises {count * dtype.itemsize}"
        )
    arr = np.frombuffer(payload, dtype=dtype, count=count)
    return arr.reshape(shape, order="F" if fortran_order else "C")


def _write_npy(arr: np.ndarray, path: Path) -> None:
    with open(path, "wb") as fp:
        npformat.write_array(fp, np.ascontiguousarray(arr), version=(1, 0), allow_pickle=False)


def load_feature_map(
    path,
    patch_size: int = DISCOVERY_PATCH_SIZE,
    source_tag: str = "",
    grid: tuple[int, int] | None = None,
) -> FeatureMap:
    """Read an exported feature tensor.

    Rank-3 files are taken as (H, W, C). Rank-2 files are (H*W, C) and need
    ``grid=(H, W)``. Float64 payloads are narrowed to float32.
    """
    raw = _read_npy(path)
    if raw.ndim == 2:
        if grid is None:
            raise ShapeError(f"{path}: rank-2 tensor needs an explicit (H, W) grid")
        h, w = grid
        if h * w != raw.shape[0]:
            raise ShapeError(f"{path}: grid {h}x{w} does not match {raw.shape[0]} rows")
        raw = raw.reshape(h, w, raw.shape[1])
    elif raw.ndim != 3:
        raise ShapeError(f"{path}: expected rank 2 or 3, got shape {raw.shape}")
    if raw.size == 0:
        raise ShapeError(f"{path}: empty tensor with shape {raw.shape}")
    if not np.all(np.isfinite(raw)):
        raise DataError(f"{path}: tensor contains non-finite values")
    return FeatureMap(raw.astype(np.float32), patch_size=patch_size, source_tag=source_tag)


def save_feature_map(features: FeatureMap, path) -> None:
    _write_npy(features.data.astype("<f4"), Path(path))


def load_text_embeddings(path, labels: Sequence[str], background_indices: Sequence[int] = ()) -> TextEmbeddingSet:
    """Read a (Y, C) NPY matrix; row y is the embedding of ``labels[y]``."""
    raw = _read_npy(path)
    if raw.ndim != 2:
        raise ShapeError(f"{path}: text embeddings must be rank 2, got shape {raw.shape}")
    if raw.shape[0] != len(labels):
        raise ShapeError(f"{path}: {raw.shape[0]} rows for {len(labels)} labels")
    return TextEmbeddingSet(tuple(labels), raw, tuple(background_indices))


def save_text_embeddings(texts: TextEmbeddingSet, path) -> None:
    _write_npy(texts.vectors.astype("<f4"), Path(path))


# --------------------------------------------------------------------------- label maps


def save_label_map(label_map: LabelMap, path) -> None:
    labels = label_map.labels
    if labels.size and labels.max() >= 2**16:
        raise RangeError(f"label {int(labels.max())} does not fit in 16 bits")
    if not 0 <= label_map.ignore_value < 2**16:
        raise RangeError(f"ignore value {label_map.ignore_value} does not fit in 16 bits")
    info = PngImagePlugin.PngInfo()
    info.add_text("ignore_value", str(int(label_map.ignore_value)))
    Image.fromarray(labels.astype(np.uint16)).save(path, format="PNG", pnginfo=info)


def load_label_map(path, ignore_value: int | None = None) -> LabelMap:
    """Inverse of :func:`save_label_map`.

    The ignore sentinel comes from the PNG text chunk when present, otherwise
    from ``ignore_value`` (default 255), which also lets plain 8-bit ground
    truth PNGs be read.
    """
    try:
        with Image.open(path) as im:
            im.load()
            mode = im.mode
            stored = im.info.get("ignore_value")
            arr = np.array(im)
    except FileNotFoundError:
        raise
    except Exception as exc:  # Pillow raises a zoo of types on bad input
        raise FormatError(f"{path}: cannot decode label PNG ({exc})") from None
    if mode not in ("I;16", "I", "L", "P"):
        raise FormatError(f"{path}: label map must be single-channel, got mode {mode}")
    if stored is not None:
        ignore = int(stored)
    else:
        ignore = 255 if ignore_value is None else int(ignore_value)
    return LabelMap(arr.astype(np.int64), ignore_value=ignore)


# --------------------------------------------------------------------------- images


def _png_bit_depth(header: bytes) -> int:
    # IHDR is always the first chunk: length, type, width, height, depth
    if len(header) < 25 or header[12:16] != b"IHDR":
        raise FormatError("PNG without leading IHDR chunk")
    return header[24]


def _ppm_maxval(path: Path) -> int:
    with open(path, "rb") as fp:
        blob = fp.read(512)
    tokens = []
    for line in blob.split(b"\n"):
        line = line.split(b"#", 1)[0]
        tokens.extend(line.split())
        if len(tokens) >= 4:
            break
    if len(tokens) < 4:
        raise FormatError(f"{path}: truncated PPM header")
    return int(tokens[3])


def load_image(path) -> np.ndarray:
    """Decode an 8-bit PNG or binary PPM (P6) into an (H, W, 3) uint8 array."""
    path = Path(path)
    with open(path, "rb") as fp:
        head = fp.read(32)
    if head.startswith(_PNG_SIGNATURE):
        depth = _png_bit_depth(head)
        if depth > 8:
            raise FormatError(f"{path}: {depth}-bit PNG images are not supported")
    elif head.startswith(b"P6"):
        maxval = _ppm_maxval(path)
        if maxval > 255:
            raise FormatError(f"{path}: 16-bit PPM images are not supported")
    else:
        raise FormatError(f"{path}: only PNG and binary PPM (P6) images are supported")
    try:
        with Image.open(path) as im:
            rgb = im.convert("RGB")
            return np.array(rgb, dtype=np.uint8)
    except Exception as exc:
        raise FormatError(f"{path}: cannot decode image ({exc})") from None


def save_image(image: np.ndarray, path) -> None:
    Image.fromarray(np.asarray(image, dtype=np.uint8)).save(path, format="PNG")


def palette_color(class_index: int, seed: int = 0) -> np.ndarray:
    digest = hashlib.sha256(struct.pack("<qq", int(seed), int(class_index))).digest()
    return np.frombuffer(digest[:3], dtype=np.uint8).copy()


def overlay(image: np.ndarray, label_map: LabelMap, seed: int = 0) -> np.ndarray:
    """Blend the class palette over ``image`` at 50% alpha (ignore pixels untouched)."""
    image = np.asarray(image, dtype=np.uint8)
    labels = label_map.labels
    if image.shape[:2] != labels.shape:
        raise ShapeError(f"image {image.shape[:2]} and labels {labels.shape} differ in size")
    out = image.copy()
    for cls in np.unique(labels):
        if cls == label_map.ignore_value:
            continue
        sel = labels == cls
        color = palette_color(int(cls), seed).astype(np.uint16)
        # round half up
        out[sel] = ((image[sel].astype(np.uint16) + color + 1) // 2).astype(np.uint8)
    return out


def save_overlay(image: np.ndarray, result, path, seed: int = 0) -> None:
    """Write the overlay PNG. ``result`` is a LabelMap or anything with ``.label_map``."""
    label_map = result if isinstance(result, LabelMap) else result.label_map
    save_image(overlay(image, label_map, seed), path)
