"""Image containers, Bayer mosaicking / Malvar demosaicking, area resampling and luma.

Linear images are plain numpy arrays: ``(H, W)`` for a single channel and
``(H, W, C)`` (interleaved) for colour.  They are kept in float64 in memory;
files on disk store them as 32-bit PFM.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Optional

import numpy as np
from scipy import ndimage, sparse

from .errors import ChannelError, DimensionError

if TYPE_CHECKING:
    from .sim import ExposureSettings

CFA_PATTERNS = ("RGGB", "BGGR", "GRBG", "GBRG")
CAMERA_IDS = ("cam1", "cam2")

# CfaSite codes
R, G_R, G_B, B = 0, 1, 2, 3

BT601 = np.array([0.299, 0.587, 0.114])


def container_max(adc_bits: int) -> int:
    """Largest 16-bit container value for an ``adc_bits`` ADC (codes are left-shifted)."""
    return ((1 << adc_bits) - 1) << (16 - adc_bits)


@dataclass(eq=False)
class RawFrame:
    """A single-camera Bayer mosaic in a 16-bit container."""

    data: np.ndarray
    cfa_pattern: str = "RGGB"
    adc_bits: int = 12
    black_level: int = 0
    settings: Optional["ExposureSettings"] = None
    camera_id: str = "cam1"

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 2:
            raise DimensionError(f"raw data must be 2-D, got shape {data.shape}")
        if data.shape[0] % 2 or data.shape[1] % 2:
            raise DimensionError(f"raw dimensions must be even, got {data.shape[1]}x{data.shape[0]}")
        if self.cfa_pattern not in CFA_PATTERNS:
            raise ValueError(f"unknown CFA pattern {self.cfa_pattern!r}")
        if not 1 <= self.adc_bits <= 16:
            raise ValueError(f"adc_bits must be in [1, 16], got {self.adc_bits}")
        if self.camera_id not in CAMERA_IDS:
            raise ValueError(f"unknown camera id {self.camera_id!r}")
        if data.dtype != np.uint16:
            if np.any(data < 0) or np.any(data > 65535):
                raise ValueError("raw samples must fit in 16 bits")
            data = data.astype(np.uint16)
        if data.size and int(data.max()) > container_max(self.adc_bits):
            raise ValueError(f"sample exceeds {self.adc_bits}-bit range")
        self.data = data

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    def __eq__(self, other):
        if not isinstance(other, RawFrame):
            return NotImplemented
        return (
            self.cfa_pattern == other.cfa_pattern
            and self.adc_bits == other.adc_bits
            and self.black_level == other.black_level
            and self.camera_id == other.camera_id
            and self.settings == other.settings
            and np.array_equal(self.data, other.data)
        )


def cfa_sites(height: int, width: int, pattern: str = "RGGB") -> np.ndarray:
    """Return the CfaSite code (R, G_R, G_B, B) of every mosaic position.

    G_R is a green site on a red row, G_B a green site on a blue row.
    """
    if pattern not in CFA_PATTERNS:
        raise ValueError(f"unknown CFA pattern {pattern!r}")
    quad = np.empty((2, 2), dtype=np.int8)
    for dy in range(2):
        for dx in range(2):
            letter = pattern[2 * dy + dx]
            if letter == "R":
                quad[dy, dx] = R
            elif letter == "B":
                quad[dy, dx] = B
            else:
                # the other site on this row decides which green this is
                quad[dy, dx] = G_R if pattern[2 * dy + (1 - dx)] == "R" else G_B
    return np.tile(quad, (height // 2 + 1, width // 2 + 1))[:height, :width]


def _site_channel(sites: np.ndarray) -> np.ndarray:
    return np.choose(sites, [0, 1, 1, 2])


def mosaic(img: np.ndarray, pattern: str = "RGGB", adc_bits: int = 12, **frame_kwargs) -> RawFrame:
    """Sample a 3-channel image through a Bayer CFA and quantize to ``adc_bits`` codes.

    Quantization is round-half-up of ``value * (2**adc_bits - 1)``; codes are
    stored left-shifted into the 16-bit container.
    """
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ChannelError(f"mosaic needs a 3-channel image, got shape {img.shape}")
    h, w = img.shape[:2]
    if h % 2 or w % 2:
        raise DimensionError(f"mosaic needs even dimensions, got {w}x{h}")
    chan = _site_channel(cfa_sites(h, w, pattern))
    sampled = np.take_along_axis(img, chan[..., None], axis=2)[..., 0]
    levels = (1 << adc_bits) - 1
    codes = np.floor(np.clip(sampled, 0.0, 1.0) * levels + 0.5).astype(np.uint32)
    data = (codes << (16 - adc_bits)).astype(np.uint16)
    return RawFrame(data, cfa_pattern=pattern, adc_bits=adc_bits, **frame_kwargs)


# Malvar, He & Cutler (2004) 5x5 kernels, scaled by 16 so every tap is an integer.
_G_AT_RB = np.array([
    [0, 0, -2, 0, 0],
    [0, 0, 4, 0, 0],
    [-2, 4, 8, 4, -2],
    [0, 0, 4, 0, 0],
    [0, 0, -2, 0, 0],
], dtype=np.float64)
# colour at a green site whose row holds that colour
_C_AT_G_SAMEROW = np.array([
    [0, 0, 1, 0, 0],
    [0, -2, 0, -2, 0],
    [-2, 8, 10, 8, -2],
    [0, -2, 0, -2, 0],
    [0, 0, 1, 0, 0],
], dtype=np.float64)
_C_AT_G_SAMECOL = _C_AT_G_SAMEROW.T.copy()
# red at blue (and blue at red)
_C_AT_OPPOSITE = np.array([
    [0, 0, -3, 0, 0],
    [0, 4, 0, 4, 0],
    [-3, 0, 12, 0, -3],
    [0, 4, 0, 4, 0],
    [0, 0, -3, 0, 0],
], dtype=np.float64)
MALVAR_KERNELS = {
    "g_at_rb": _G_AT_RB,
    "c_at_g_samerow": _C_AT_G_SAMEROW,
    "c_at_g_samecol": _C_AT_G_SAMECOL,
    "c_at_opposite": _C_AT_OPPOSITE,
}


def raw_to_counts(raw: RawFrame) -> tuple[np.ndarray, float]:
    """Black-subtracted sample values and the full-scale value they normalize by."""
    counts = raw.data.astype(np.float64) - raw.black_level
    scale = float(container_max(raw.adc_bits) - raw.black_level)
    if scale <= 0:
        raise ValueError("black level at or above the white level")
    return counts, scale


def demosaic_malvar(raw: RawFrame) -> np.ndarray:
    """Demosaic with Malvar's gradient-corrected bilinear 5x5 kernels.

    Filtering runs on the black-subtracted integer counts (every kernel tap is
    a multiple of 1/16, so the sums are exact) and the result is then divided
    by the white level.  Borders use mirror reflection, which preserves the
    CFA phase.
    """
    counts, scale = raw_to_counts(raw)
    sites = cfa_sites(raw.height, raw.width, raw.cfa_pattern)

    def filt(k):
        return ndimage.correlate(counts, k, mode="mirror") / 16.0

    g_rb = filt(_G_AT_RB)
    samerow = filt(_C_AT_G_SAMEROW)
    samecol = filt(_C_AT_G_SAMECOL)
    opposite = filt(_C_AT_OPPOSITE)

    r_site, b_site = sites == R, sites == B
    gr_site, gb_site = sites == G_R, sites == G_B

    red = np.where(r_site, counts, 0.0)
    red = np.where(gr_site, samerow, red)
    red = np.where(gb_site, samecol, red)
    red = np.where(b_site, opposite, red)

    green = np.where(r_site | b_site, g_rb, counts)

    blue = np.where(b_site, counts, 0.0)
    blue = np.where(gb_site, samerow, blue)
    blue = np.where(gr_site, samecol, blue)
    blue = np.where(r_site, opposite, blue)

    return np.stack([red, green, blue], axis=-1) / scale


def _area_matrix(n_in: int, n_out: int) -> sparse.csr_matrix:
    """Row-stochastic sparse matrix averaging the (fractional) footprint of each output sample."""
    step = n_in / n_out
    rows, cols, vals = [], [], []
    for i in range(n_out):
        lo, hi = i * step, (i + 1) * step
        first, last = int(np.floor(lo)), min(int(np.ceil(hi)), n_in)
        pix = np.arange(first, last)
        overlap = np.minimum(hi, pix + 1) - np.maximum(lo, pix)
        keep = overlap > 0
        rows.extend([i] * int(keep.sum()))
        cols.extend(pix[keep])
        vals.extend(overlap[keep] / overlap[keep].sum())
    return sparse.csr_matrix((vals, (rows, cols)), shape=(n_out, n_in))


def downsample_area(img: np.ndarray, out_w: int, out_h: int) -> np.ndarray:
    """Box-filter resample to ``out_w`` x ``out_h`` (each output is its footprint mean)."""
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape[:2]
    if out_w <= 0 or out_h <= 0:
        raise DimensionError("output dimensions must be positive")
    if out_w > w or out_h > h:
        raise DimensionError(f"cannot downsample {w}x{h} to larger {out_w}x{out_h}")
    if (out_w, out_h) == (w, h):
        return img.copy()
    my = _area_matrix(h, out_h)
    mx = _area_matrix(w, out_w)
    tail = img.shape[2:]
    out = (my @ img.reshape(h, -1)).reshape((out_h, w) + tail)
    out = np.moveaxis(out, 1, 0).reshape(w, -1)
    out = np.moveaxis((mx @ out).reshape((out_w, out_h) + tail), 0, 1)
    # convex weights: pin round-off inside the input range
    return np.clip(out, img.min(), img.max())


def luma(img: np.ndarray) -> np.ndarray:
    """BT.601 luma of a 3-channel image."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ChannelError(f"luma needs a 3-channel image, got shape {img.shape}")
    return img @ BT601


def as_gray(img: np.ndarray) -> np.ndarray:
    """Luma for colour input, the array itself for single-channel input."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3 and img.shape[2] == 1:
        return img[..., 0]
    if img.ndim == 3:
        return luma(img)
    return img
