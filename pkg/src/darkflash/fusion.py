"""Gradient-domain fusion of the registered noisy RGB with the dark-flash image,
followed by affine-bilateral-grid tone transfer and luma replacement.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import fft, ndimage

from .core import as_gray, luma
from .errors import ChannelError, DimensionError, DomainError, FormatError
from .fileio import read_json, read_pfm, write_json, write_pfm

GRID_DIMS = (16, 16, 8)  # (gw, gh, gd)


@dataclass(frozen=True)
class ScaleMapParams:
    eps: float = 1e-4
    smooth_sigma: float = 4.0
    alpha_data: float = 0.05

    def __post_init__(self):
        if self.eps <= 0 or self.alpha_data <= 0:
            raise ValueError("eps and alpha_data must be positive")


def forward_gradients(img: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Forward differences; the last column of gx and last row of gy are zero."""
    img = np.asarray(img, dtype=np.float64)
    gx = np.zeros_like(img)
    gy = np.zeros_like(img)
    gx[:, :-1] = img[:, 1:] - img[:, :-1]
    gy[:-1, :] = img[1:, :] - img[:-1, :]
    return gx, gy


def gradient_adjoint(gx: np.ndarray, gy: np.ndarray) -> np.ndarray:
    """Apply the transpose of :func:`forward_gradients` to a gradient field."""
    gx = np.asarray(gx, dtype=np.float64).copy()
    gy = np.asarray(gy, dtype=np.float64).copy()
    gx[:, -1] = 0.0
    gy[-1, :] = 0.0
    out = np.zeros_like(gx)
    out[:, 1:] += gx[:, :-1]
    out -= gx
    out[1:, :] += gy[:-1, :]
    out -= gy
    return out


def screened_poisson_solve(data: np.ndarray, gx: np.ndarray, gy: np.ndarray, alpha: float) -> np.ndarray:
    """Exact minimizer of ``alpha ||I - data||^2 + ||grad I - (gx, gy)||^2``.

    The Neumann Laplacian is diagonal in the DCT-II basis, so the normal
    equations ``(alpha + D^T D) I = alpha data + D^T g`` solve with one forward
    and one inverse transform.  The last column of ``gx`` and last row of
    ``gy`` lie outside the domain and are ignored.
    """
    if alpha <= 0:
        raise DomainError("alpha must be positive (otherwise the mean is unpinned)")
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 2 or np.shape(gx) != data.shape or np.shape(gy) != data.shape:
        raise DimensionError("data, gx and gy must be matching 2-D arrays")
    h, w = data.shape
    rhs = alpha * data + gradient_adjoint(gx, gy)
    lam_y = 2.0 - 2.0 * np.cos(np.pi * np.arange(h) / h)
    lam_x = 2.0 - 2.0 * np.cos(np.pi * np.arange(w) / w)
    coeffs = fft.dctn(rhs, type=2, norm="ortho")
    coeffs /= alpha + lam_y[:, None] + lam_x[None, :]
    return fft.idctn(coeffs, type=2, norm="ortho")


def scale_map(noisy: np.ndarray, flash: np.ndarray, p: ScaleMapParams = ScaleMapParams()) -> np.ndarray:
    """Locally fitted ratio ``s`` with ``grad noisy ~= s * grad flash``.

    ``s = G * (grad n . grad f) / (G * |grad f|^2 + eps)``: the Gaussian-weighted
    least-squares gradient ratio over a ``smooth_sigma`` neighbourhood.
    """
    nx, ny = forward_gradients(noisy)
    fx, fy = forward_gradients(flash)
    num = ndimage.gaussian_filter(nx * fx + ny * fy, p.smooth_sigma, mode="mirror")
    den = ndimage.gaussian_filter(fx * fx + fy * fy, p.smooth_sigma, mode="mirror")
    return num / (den + p.eps)


def scale_map_fuse(noisy_rgb: np.ndarray, flash: np.ndarray, p: ScaleMapParams = ScaleMapParams()) -> np.ndarray:
    """Rebuild each channel from the flash gradients scaled by its scale map, anchored to the noisy data."""
    noisy_rgb = np.asarray(noisy_rgb, dtype=np.float64)
    flash = as_gray(flash)
    if noisy_rgb.ndim != 3:
        raise ChannelError("noisy_rgb must be a multi-channel image")
    if noisy_rgb.shape[:2] != flash.shape:
        raise DimensionError(f"noisy image {noisy_rgb.shape[:2]} and flash {flash.shape} differ")
    fx, fy = forward_gradients(flash)
    out = np.empty_like(noisy_rgb)
    for c in range(noisy_rgb.shape[2]):
        s = scale_map(noisy_rgb[..., c], flash, p)
        out[..., c] = screened_poisson_solve(noisy_rgb[..., c], s * fx, s * fy, p.alpha_data)
    return out


# ---------------------------------------------------------------- affine bilateral grid


@dataclass
class AffineBilateralGrid:
    cells: np.ndarray  # (gh, gw, gd, 3, 4)
    spatial_scale: float  # pixels per cell
    range_scale: float = 1.0  # guide units per depth cell

    def __post_init__(self):
        self.cells = np.asarray(self.cells, dtype=np.float64)
        if self.cells.ndim != 5 or self.cells.shape[3:] != (3, 4):
            raise ValueError(f"cells must be (gh, gw, gd, 3, 4), got {self.cells.shape}")
        if self.cells.shape[2] < 2:
            raise ValueError("grid needs at least two depth cells")
        if not np.all(np.isfinite(self.cells)):
            raise ValueError("grid cells must be finite")
        if self.spatial_scale <= 0:
            raise ValueError("spatial_scale must be positive")

    @property
    def dims(self) -> tuple:
        gh, gw, gd = self.cells.shape[:3]
        return gw, gh, gd


def constant_grid(affine: np.ndarray, width: int, height: int, dims: tuple = GRID_DIMS) -> AffineBilateralGrid:
    gw, gh, gd = dims
    cells = np.broadcast_to(np.asarray(affine, dtype=np.float64), (gh, gw, gd, 3, 4)).copy()
    return AffineBilateralGrid(cells, spatial_scale=max(width / gw, height / gh), range_scale=1.0 / (gd - 1))


def identity_grid(width: int, height: int, dims: tuple = GRID_DIMS) -> AffineBilateralGrid:
    return constant_grid(np.eye(3, 4), width, height, dims)


def _lerp(a, b, t):
    # exact when a == b, which keeps constant grids bit-exact
    return a + (b - a) * t


def slice_apply(
    grid: AffineBilateralGrid, input_rgb: np.ndarray, slice_map: np.ndarray, chunk_rows: int = 64
) -> np.ndarray:
    """Trilinearly sample a 3x4 affine per pixel at ``(x/s, y/s, slice*(gd-1))`` and apply it.

    Interpolation is nested linear blends (x, then y, then depth) of the form
    ``a + (b - a) t``, which returns ``a`` exactly when both ends agree, so
    constant grids reproduce their affine bit-for-bit.  No output clamping.
    """
    rgb = np.asarray(input_rgb, dtype=np.float64)
    sm = np.asarray(slice_map, dtype=np.float64)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ChannelError("slice_apply needs a 3-channel image")
    if sm.shape != rgb.shape[:2]:
        raise DimensionError(f"slice map {sm.shape} does not match image {rgb.shape[:2]}")
    gh, gw, gd = grid.cells.shape[:3]
    h, w = sm.shape
    cells = grid.cells
    out = np.empty_like(rgb)

    gxf = np.clip(np.arange(w) / grid.spatial_scale, 0.0, gw - 1.0)
    x0 = np.floor(gxf).astype(np.intp)
    x1 = np.minimum(x0 + 1, gw - 1)
    tx = gxf - x0

    for r0 in range(0, h, chunk_rows):
        r1 = min(r0 + chunk_rows, h)
        gyf = np.clip(np.arange(r0, r1) / grid.spatial_scale, 0.0, gh - 1.0)
        y0 = np.floor(gyf).astype(np.intp)[:, None]
        y1 = np.minimum(y0 + 1, gh - 1)
        ty = (gyf[:, None] - y0)[..., None, None]
        gzf = np.clip(sm[r0:r1], 0.0, 1.0) * (gd - 1)
        z0 = np.floor(gzf).astype(np.intp)
        z1 = np.minimum(z0 + 1, gd - 1)
        tz = (gzf - z0)[..., None, None]
        txx = np.broadcast_to(tx, (r1 - r0, w))[..., None, None]

        def at_depth(z):
            lo = _lerp(cells[y0, x0[None, :], z], cells[y0, x1[None, :], z], txx)
            hi = _lerp(cells[y1, x0[None, :], z], cells[y1, x1[None, :], z], txx)
            return _lerp(lo, hi, ty)

        A = _lerp(at_depth(z0), at_depth(z1), tz)
        px = rgb[r0:r1]
        out[r0:r1] = np.einsum("hwij,hwj->hwi", A[..., :3], px) + A[..., 3]
    return out


def replace_luma(base: np.ndarray, luma_src: np.ndarray) -> np.ndarray:
    """Swap the BT.601 luma of ``base`` for ``luma_src``, keeping its chroma.

    In BT.601 YCbCr, replacing Y and converting back is the same as adding
    ``luma_src - Y`` to every channel, since Cb and Cr are fixed multiples of
    ``B - Y`` and ``R - Y``.
    """
    base = np.asarray(base, dtype=np.float64)
    luma_src = np.asarray(luma_src, dtype=np.float64)
    y = luma(base)
    if y.shape != luma_src.shape:
        raise DimensionError(f"luma source {luma_src.shape} does not match image {y.shape}")
    return base + (luma_src - y)[..., None]


def fuse_pipeline(
    warped_rgb: np.ndarray,
    flash_frame: np.ndarray,
    grid: Optional[AffineBilateralGrid] = None,
    slice_map: Optional[np.ndarray] = None,
    params: ScaleMapParams = ScaleMapParams(),
) -> np.ndarray:
    """Scale-map fusion, grid tone transfer, then the scale-map luma put back.

    ``grid`` defaults to the identity; ``slice_map`` defaults to the luma of the
    scale-map result.
    """
    fused = scale_map_fuse(warped_rgb, flash_frame, params)
    h, w = fused.shape[:2]
    if grid is None:
        grid = identity_grid(w, h)
    fused_luma = luma(fused)
    if slice_map is None:
        slice_map = np.clip(fused_luma, 0.0, 1.0)
    toned = slice_apply(grid, fused, slice_map)
    return replace_luma(toned, fused_luma)


# ---------------------------------------------------------------- grid files


def save_grid(path, grid: AffineBilateralGrid, slice_map: Optional[np.ndarray] = None) -> None:
    """JSON header plus a PFM of ``gw*gh*gd`` rows x 12 floats (row ``(iy*gw + ix)*gd + iz``)."""
    path = Path(path)
    gw, gh, gd = grid.dims
    header = {
        "dims": [gw, gh, gd],
        "spatial_scale": grid.spatial_scale,
        "range_scale": grid.range_scale,
        "cells": f"{path.stem}_cells.pfm",
    }
    write_pfm(path.parent / header["cells"], grid.cells.reshape(gh * gw * gd, 12))
    if slice_map is not None:
        header["slice_map"] = f"{path.stem}_slice.pfm"
        write_pfm(path.parent / header["slice_map"], slice_map)
    write_json(path, header)


def load_grid(path) -> tuple[AffineBilateralGrid, Optional[np.ndarray]]:
    path = Path(path)
    header = read_json(path)
    try:
        gw, gh, gd = (int(v) for v in header["dims"])
        flat = read_pfm(path.parent / header["cells"])
        if flat.shape != (gw * gh * gd, 12):
            raise FormatError(f"{path}: cell payload is {flat.shape}, expected {(gw * gh * gd, 12)}")
        grid = AffineBilateralGrid(
            flat.reshape(gh, gw, gd, 3, 4),
            spatial_scale=float(header["spatial_scale"]),
            range_scale=float(header.get("range_scale", 1.0 / (gd - 1))),
        )
        slice_map = read_pfm(path.parent / header["slice_map"]) if header.get("slice_map") else None
    except (KeyError, TypeError, ValueError, OSError) as exc:
        raise FormatError(f"{path}: unreadable grid ({exc})") from exc
    return grid, slice_map
