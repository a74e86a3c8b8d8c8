"""Mask clean-up: hole filling, dense-CRF refinement, resizing, overlap resolution."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse
from scipy import ndimage

from .errors import ShapeError


@dataclass(frozen=True)
class CrfConfig:
    iterations: int = 10
    spatial_sigma: float = 3.0
    bilateral_sigma_xy: float = 40.0
    bilateral_sigma_rgb: float = 13.0
    compat_spatial: float = 3.0
    compat_bilateral: float = 10.0
    # probability mass moved off the hard label when building unaries from masks
    smoothing: float = 0.1

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("CRF iterations must be >= 1")
        for name in ("spatial_sigma", "bilateral_sigma_xy", "bilateral_sigma_rgb"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0")
        if not 0 < self.smoothing < 1:
            raise ValueError("smoothing must be in (0, 1)")


# --------------------------------------------------------------------------- holes


def fill_holes(mask: np.ndarray) -> np.ndarray:
    """Flip every 4-connected background component that misses the border."""
    mask = np.asarray(mask, dtype=bool)
    if mask.size == 0:
        raise ValueError("cannot fill an empty grid")
    # the default cross structure grows background 4-connected from the border
    return ndimage.binary_fill_holes(mask)


# --------------------------------------------------------------------------- resizing


def _interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Half-pixel-centred linear interpolation weights, shape (n_out, n_in)."""
    m = np.zeros((n_out, n_in))
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    rows = np.arange(n_out)
    np.add.at(m, (rows, lo), 1.0 - frac)
    np.add.at(m, (rows, hi), frac)
    return m


def bilinear_resize(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of an (H, W) or (H, W, C) array, half-pixel convention."""
    arr = np.asarray(arr, dtype=np.float64)
    h, w = arr.shape[:2]
    if (h, w) == (out_h, out_w):
        return arr.copy()
    rm = _interp_matrix(h, out_h)
    cm = _interp_matrix(w, out_w)
    if arr.ndim == 2:
        return rm @ arr @ cm.T
    return np.einsum("ah,hwc,bw->abc", rm, arr, cm, optimize=True)


def upsample_mask(mask: np.ndarray, patch_size: int, target_h: int | None = None, target_w: int | None = None):
    """Bilinear upsampling of a {0,1} patch mask, foreground where value > 0.5."""
    mask = np.asarray(mask, dtype=bool)
    gh, gw = mask.shape
    target_h = gh * patch_size if target_h is None else target_h
    target_w = gw * patch_size if target_w is None else target_w
    if target_h < gh or target_w < gw:
        raise ShapeError(f"target {target_h}x{target_w} is smaller than the grid {gh}x{gw}")
    return bilinear_resize(mask.astype(np.float64), target_h, target_w) > 0.5


def resize_mask(mask: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize a boolean mask either way using the same > 0.5 bilinear rule."""
    return bilinear_resize(np.asarray(mask, dtype=np.float64), out_h, out_w) > 0.5


# --------------------------------------------------------------------------- overlaps


def resolve_overlaps(masks: list) -> list:
    """Give contested pixels to the earliest discovered object; drop emptied masks.

    ``masks`` are ObjectMask-like objects with ``pixel_mask`` and
    ``discovery_order``. Input order is preserved in the output.
    """
    if not masks:
        return []
    claimed = np.zeros_like(masks[0].pixel_mask, dtype=bool)
    kept = {}
    for obj in sorted(masks, key=lambda m: m.discovery_order):
        own = obj.pixel_mask & ~claimed
        claimed |= own
        if own.any():
            kept[id(obj)] = obj.with_pixels(own)
    return [kept[id(m)] for m in masks if id(m) in kept]


# --------------------------------------------------------------------------- CRF


def masks_to_probs(label_grid: np.ndarray, n_labels: int, smoothing: float = 0.1) -> np.ndarray:
    """Soft label distribution from a hard label grid.

    The hard label keeps ``1 - smoothing``; the rest is spread evenly over
    the other labels, so two labels give the 0.9/0.1 split.
    """
    label_grid = np.asarray(label_grid)
    if n_labels < 2:
        raise ValueError("need at least two labels")
    onehot = np.eye(n_labels)[label_grid]
    return onehot * (1.0 - smoothing) + (1.0 - onehot) * (smoothing / (n_labels - 1))


def _gauss_taps(sigma: float, radius: int) -> np.ndarray:
    d = np.arange(-radius, radius + 1, dtype=np.float64)
    return np.exp(-(d**2) / (2.0 * sigma**2))


class _SpatialFilter:
    """Exact separable Gaussian sum over pixel positions, self term removed."""

    def __init__(self, h: int, w: int, sigma: float):
        radius = max(1, int(math.ceil(4 * sigma)))
        self.taps = _gauss_taps(sigma, radius)
        self.norm = 1.0 / np.sqrt(self._raw(np.ones((h, w, 1)))[..., 0])

    def _raw(self, q):
        out = ndimage.correlate1d(q, self.taps, axis=0, mode="constant")
        return ndimage.correlate1d(out, self.taps, axis=1, mode="constant")

    def __call__(self, q):
        s = self.norm[..., None]
        return s * (self._raw(s * q) - s * q)


class _BilateralGrid:
    """Bilateral Gaussian sum approximated on a coarse 5-D lattice.

    Pixels are splatted multilinearly into a (y, x, r, g, b) grid whose cells
    are one kernel sigma wide, blurred with separable Gaussians along each
    grid axis and sliced back with the same weights.
    """

    # tent splat and tent slice each add 1/6 cell^2 of variance
    BLUR_SIGMA = math.sqrt(2.0 / 3.0)
    BLUR_RADIUS = 2

    def __init__(self, image: np.ndarray, sigma_xy: float, sigma_rgb: float):
        h, w = image.shape[:2]
        yy, xx = np.mgrid[0:h, 0:w]
        feats = np.concatenate(
            [
                np.stack([yy, xx], axis=-1).reshape(-1, 2) / sigma_xy,
                image.reshape(-1, 3).astype(np.float64) / sigma_rgb,
            ],
            axis=1,
        )
        pad = self.BLUR_RADIUS + 1
        coords = feats - feats.min(axis=0) + pad
        base = np.floor(coords).astype(np.int64)
        frac = coords - base
        self.shape = tuple(int(s) for s in base.max(axis=0) + pad + 2)
        strides = np.cumprod((1,) + self.shape[:0:-1])[::-1]
        n = feats.shape[0]
        rows, vals = [], []
        for corner in itertools.product((0, 1), repeat=5):
            c = np.array(corner)
            weight = np.prod(np.where(c == 1, frac, 1.0 - frac), axis=1)
            rows.append((base + c) @ strides)
            vals.append(weight)
        cols = np.tile(np.arange(n), 32)
        n_cells = int(np.prod(self.shape))
        self.splat = scipy.sparse.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), cols)), shape=(n_cells, n)
        )
        self.slice = self.splat.T.tocsr()
        self.taps = _gauss_taps(self.BLUR_SIGMA, self.BLUR_RADIUS)
        # self weight of every pixel under the approximate kernel, per axis product
        g0, g1 = self.taps[self.BLUR_RADIUS], self.taps[self.BLUR_RADIUS + 1]
        per_axis = (frac**2 + (1 - frac) ** 2) * g0 + 2 * frac * (1 - frac) * g1
        self.self_weight = np.prod(per_axis, axis=1)
        self.hw = (h, w)
        self.norm = 1.0 / np.sqrt(self._raw(np.ones((n, 1)))[:, 0])

    def _raw(self, q: np.ndarray, chunk: int = 4) -> np.ndarray:
        out = np.empty_like(q)
        for start in range(0, q.shape[1], chunk):
            block = self.splat @ q[:, start : start + chunk]
            grid = block.reshape(self.shape + (block.shape[1],))
            for axis in range(5):
                grid = ndimage.correlate1d(grid, self.taps, axis=axis, mode="constant")
            out[:, start : start + chunk] = self.slice @ grid.reshape(-1, block.shape[1])
        return out

    def __call__(self, q):
        h, w = self.hw
        flat = q.reshape(h * w, -1)
        s = self.norm[:, None]
        msg = s * (self._raw(s * flat) - self.self_weight[:, None] * s * flat)
        return msg.reshape(q.shape)


def _softmax_neg(energy: np.ndarray) -> np.ndarray:
    e = -energy
    e = e - e.max(axis=-1, keepdims=True)
    p = np.exp(e)
    return p / p.sum(axis=-1, keepdims=True)


def crf_refine(label_probs: np.ndarray, image: np.ndarray, cfg: CrfConfig = CrfConfig(), return_probs: bool = False):
    """Mean-field inference of a fully connected Potts CRF.

    Unaries are ``-log label_probs``; pairwise terms use a spatial Gaussian
    and a bilateral (position + colour) Gaussian, each symmetrically
    normalized. Returns the refined (H, W) label map, plus the final
    distributions when ``return_probs`` is set.
    """
    probs = np.asarray(label_probs, dtype=np.float64)
    image = np.asarray(image)
    if probs.ndim != 3 or image.ndim != 3 or image.shape[2] != 3:
        raise ShapeError(f"expected (H, W, L) probabilities and (H, W, 3) image, got {probs.shape} and {image.shape}")
    if probs.shape[:2] != image.shape[:2]:
        raise ShapeError(f"probabilities {probs.shape[:2]} and image {image.shape[:2]} differ in size")
    if np.any(probs < 0) or not np.allclose(probs.sum(axis=-1), 1.0, atol=1e-6):
        raise ValueError("label probabilities must be non-negative and sum to 1 per pixel")
    h, w, _ = probs.shape
    unary = -np.log(np.clip(probs, 1e-12, None))
    spatial = _SpatialFilter(h, w, cfg.spatial_sigma)
    bilateral = _BilateralGrid(image, cfg.bilateral_sigma_xy, cfg.bilateral_sigma_rgb)
    q = _softmax_neg(unary)
    for _ in range(cfg.iterations):
        pairwise = cfg.compat_spatial * spatial(q) + cfg.compat_bilateral * bilateral(q)
        # Potts: agreeing with a neighbour lowers the energy of that label
        q = _softmax_neg(unary - pairwise)
    labels = np.argmax(q, axis=-1)
    return (labels, q) if return_probs else labels
