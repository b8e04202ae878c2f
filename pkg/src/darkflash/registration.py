"""Stereo registration: green-channel tile matching, an edge-aware flow solve
guided by a third image, and gather warping.

Flow uses the gather convention: ``out(x) = alt(x + flow(x))``.  Flow arrays
are ``(H, W, 2)`` with components ``(u, v)`` = (horizontal, vertical).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy import sparse

from .core import as_gray, demosaic_malvar, downsample_area
from .errors import DegenerateError, DimensionError, ManifestError

log = logging.getLogger(__name__)

LOW_CONFIDENCE = 0.1


@dataclass
class TileMatches:
    offsets: np.ndarray  # (gh, gw, 2) gather offsets (u, v) in pixels
    cost: np.ndarray  # (gh, gw) mean absolute difference at the best offset
    confidence: np.ndarray  # (gh, gw) in [0, 1]
    tile_size: int
    search: tuple  # (horizontal radius, vertical radius)
    image_shape: tuple  # (H, W)
    border: np.ndarray  # (gh, gw) True where the search window left the image


@dataclass(frozen=True)
class SolverParams:
    grid_sigma_xy: float = 8.0
    grid_sigma_l: float = 0.1
    lambda_smooth: float = 1.0
    cg_tol: float = 1e-6
    cg_max_iters: int = 500

    def __post_init__(self):
        if self.grid_sigma_xy <= 0 or self.grid_sigma_l <= 0:
            raise ValueError("solver sigmas must be positive")
        if self.lambda_smooth < 0:
            raise ValueError("lambda_smooth must be non-negative")


def _confidence(best: np.ndarray, second: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Map the best / runner-up cost ratio to [0, 1]; 1 for a unique exact match, 0 for a tie."""
    ratio = np.clip((best + eps) / (second + eps), 0.0, 1.0)
    return (np.exp(-ratio) - math.exp(-1.0)) / (1.0 - math.exp(-1.0))


def tile_match(
    base_green: np.ndarray,
    alt_green: np.ndarray,
    tile_size: int = 16,
    search: tuple = (64, 4),
) -> TileMatches:
    """Brute-force SAD tile matching of ``alt`` against ``base``.

    For every tile of ``base`` the integer offset in the search window with the
    lowest mean absolute difference wins; the horizontal component is then
    refined by a parabola through the costs at ``u - 1, u, u + 1``.  Runner-up
    costs for the confidence exclude the 3x3 neighbourhood of the winner.
    """
    base = np.asarray(base_green, dtype=np.float64)
    alt = np.asarray(alt_green, dtype=np.float64)
    if base.shape != alt.shape or base.ndim != 2:
        raise DimensionError(f"tile_match needs equal 2-D images, got {base.shape} and {alt.shape}")
    if tile_size < 4:
        raise ValueError("tile_size must be at least 4")
    h, w = base.shape
    rx, ry = int(search[0]), int(search[1])
    gh, gw = -(-h // tile_size), -(-w // tile_size)
    ph, pw = gh * tile_size, gw * tile_size

    # pad base so tiles divide evenly; padded pixels carry zero weight
    weight = np.zeros((ph, pw))
    weight[:h, :w] = 1.0
    base_p = np.pad(base, ((0, ph - h), (0, pw - w)), mode="edge")
    alt_p = np.pad(alt, ((ry, ry + ph - h), (rx, rx + pw - w)), mode="edge")
    npix = weight.reshape(gh, tile_size, gw, tile_size).sum(axis=(1, 3))

    nu, nv = 2 * rx + 1, 2 * ry + 1
    costs = np.empty((nv, nu, gh, gw))
    for iv in range(nv):
        for iu in range(nu):
            shifted = alt_p[iv : iv + ph, iu : iu + pw]
            sad = np.abs(base_p - shifted) * weight
            costs[iv, iu] = sad.reshape(gh, tile_size, gw, tile_size).sum(axis=(1, 3)) / npix

    flat = costs.reshape(nv * nu, gh, gw)
    # scan candidates nearest-first so ties (flat regions) resolve to the smallest displacement
    dv_all, du_all = np.divmod(np.arange(nv * nu), nu)
    order = np.argsort(np.abs(du_all - rx) + np.abs(dv_all - ry), kind="stable")
    best_idx = order[flat[order].argmin(axis=0)]
    bv, bu = np.divmod(best_idx, nu)
    gi, gj = np.meshgrid(np.arange(gh), np.arange(gw), indexing="ij")
    best = costs[bv, bu, gi, gj]

    vv, uu = np.meshgrid(np.arange(nv), np.arange(nu), indexing="ij")
    near = (np.abs(vv[..., None, None] - bv) <= 1) & (np.abs(uu[..., None, None] - bu) <= 1)
    second = np.where(near, np.inf, costs).reshape(nv * nu, gh, gw).min(axis=0)
    second = np.where(np.isfinite(second), second, best)

    # parabola through the horizontal cost slice
    left = costs[bv, np.maximum(bu - 1, 0), gi, gj]
    right = costs[bv, np.minimum(bu + 1, nu - 1), gi, gj]
    denom = left - 2.0 * best + right
    # a zero-cost winner is an exact match already; the fit would only add texture-dependent bias
    interior = (bu > 0) & (bu < nu - 1) & (denom > 0) & (best > 0)
    delta = np.where(interior, 0.5 * (left - right) / np.where(denom > 0, denom, 1.0), 0.0)
    delta = np.clip(delta, -0.5, 0.5)

    offsets = np.stack([bu - rx + delta, (bv - ry).astype(np.float64)], axis=-1)

    # tiles whose search window reached into edge-replicated padding
    x0 = np.arange(gw) * tile_size
    y0 = np.arange(gh) * tile_size
    bx = (x0 - rx < 0) | (x0 + tile_size + rx > w)
    by = (y0 - ry < 0) | (y0 + tile_size + ry > h)
    border = by[:, None] | bx[None, :]

    return TileMatches(offsets, best, _confidence(best, second), tile_size, (rx, ry), (h, w), border)


def splat_matches(matches: TileMatches) -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel targets ``(H, W, 2)`` and confidences ``(H, W)`` from the tile grid."""
    h, w = matches.image_shape
    ts = matches.tile_size
    iy = np.arange(h) // ts
    ix = np.arange(w) // ts
    targets = matches.offsets[iy][:, ix]
    conf = matches.confidence[iy][:, ix]
    return targets, conf


def bilateral_affinity(guide: np.ndarray, params: SolverParams) -> tuple[np.ndarray, np.ndarray]:
    """Edge weights between horizontal and vertical 4-neighbours of the guide's luma."""
    lum = as_gray(guide)
    spatial = math.exp(-1.0 / (2.0 * params.grid_sigma_xy**2))
    s2 = 2.0 * params.grid_sigma_l**2
    wx = spatial * np.exp(-((lum[:, 1:] - lum[:, :-1]) ** 2) / s2)
    wy = spatial * np.exp(-((lum[1:, :] - lum[:-1, :]) ** 2) / s2)
    return wx, wy


def smoothness_laplacian(wx: np.ndarray, wy: np.ndarray) -> sparse.csr_matrix:
    """Graph Laplacian ``sum_{i~j} W_ij (f_i - f_j)^2`` over the 4-connected grid."""
    h, w = wy.shape[0] + 1, wx.shape[1] + 1
    idx = np.arange(h * w).reshape(h, w)
    rows = np.concatenate([idx[:, :-1].ravel(), idx[:-1, :].ravel()])
    cols = np.concatenate([idx[:, 1:].ravel(), idx[1:, :].ravel()])
    vals = np.concatenate([wx.ravel(), wy.ravel()])
    adj = sparse.coo_matrix((vals, (rows, cols)), shape=(h * w, h * w))
    adj = (adj + adj.T).tocsr()
    deg = np.asarray(adj.sum(axis=1)).ravel()
    return (sparse.diags(deg) - adj).tocsr()


@dataclass
class CGResult:
    x: np.ndarray
    iterations: int
    converged: bool
    residual: float


def pcg(
    A,
    b: np.ndarray,
    tol: float = 1e-6,
    max_iters: int = 500,
    x0: Optional[np.ndarray] = None,
    callback: Optional[Callable[[np.ndarray], None]] = None,
) -> CGResult:
    """Jacobi-preconditioned conjugate gradient for symmetric positive definite ``A``.

    Stops when ``||b - A x|| <= tol * ||b||``.
    """
    diag = A.diagonal()
    if np.any(diag <= 0):
        raise DegenerateError("system matrix has a non-positive diagonal")
    inv_d = 1.0 / diag
    x = np.zeros_like(b) if x0 is None else x0.astype(np.float64).copy()
    r = b - A @ x
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return CGResult(np.zeros_like(b), 0, True, 0.0)
    z = inv_d * r
    p = z.copy()
    rz = r @ z
    it = 0
    res = np.linalg.norm(r) / bnorm
    while res > tol and it < max_iters:
        Ap = A @ p
        alpha = rz / (p @ Ap)
        x += alpha * p
        r -= alpha * Ap
        it += 1
        if callback is not None:
            callback(x)
        res = np.linalg.norm(r) / bnorm
        if res <= tol:
            break
        z = inv_d * r
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
    return CGResult(x, it, res <= tol, res)


def flow_system(conf: np.ndarray, guide: np.ndarray, params: SolverParams):
    """Normal-equation matrix ``diag(c) + lambda L`` shared by both flow components."""
    wx, wy = bilateral_affinity(guide, params)
    L = smoothness_laplacian(wx, wy)
    return (sparse.diags(conf.ravel()) + params.lambda_smooth * L).tocsr()


def solve_bilateral(
    targets: np.ndarray,
    conf: np.ndarray,
    guide: np.ndarray,
    params: SolverParams = SolverParams(),
    callback: Optional[Callable[[np.ndarray], None]] = None,
) -> np.ndarray:
    """Minimize ``sum c (f - t)^2 + lambda sum W_ij (f_i - f_j)^2`` for each target channel."""
    conf = np.asarray(conf, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    single = targets.ndim == 2
    if single:
        targets = targets[..., None]
    h, w = conf.shape
    if as_gray(guide).shape != (h, w) or targets.shape[:2] != (h, w):
        raise DimensionError("guide, targets and confidence must share dimensions")
    if not np.any(conf > 0):
        raise DegenerateError("all confidences are zero: no data term anywhere")
    A = flow_system(conf, guide, params)
    out = np.empty_like(targets)
    for k in range(targets.shape[2]):
        b = (conf * targets[..., k]).ravel()
        # warm start at the targets keeps near-constant fields cheap
        res = pcg(A, b, params.cg_tol, params.cg_max_iters, x0=targets[..., k].ravel(), callback=callback)
        if not res.converged:
            log.debug("flow CG stopped at residual %.3g after %d iterations", res.residual, res.iterations)
        out[..., k] = res.x.reshape(h, w)
    return out[..., 0] if single else out


def solve_flow(matches: TileMatches, guide: np.ndarray, params: SolverParams = SolverParams()) -> np.ndarray:
    """Edge-aware flow ``(H, W, 2)`` from tile matches, respecting the guide image's edges."""
    h, w = matches.image_shape
    if as_gray(guide).shape != (h, w):
        raise DimensionError(f"guide is {as_gray(guide).shape}, flow is {(h, w)}")
    targets, conf = splat_matches(matches)
    return solve_bilateral(targets, conf, guide, params)


def warp_gather(alt: np.ndarray, flow: np.ndarray) -> np.ndarray:
    """Bilinear gather ``alt(x + u, y + v)``; samples outside clamp to the border."""
    alt = np.asarray(alt, dtype=np.float64)
    flow = np.asarray(flow, dtype=np.float64)
    h, w = alt.shape[:2]
    if flow.shape != (h, w, 2):
        raise DimensionError(f"flow shape {flow.shape} does not match image {(h, w)}")
    xs = np.clip(np.arange(w)[None, :] + flow[..., 0], 0.0, w - 1.0)
    ys = np.clip(np.arange(h)[:, None] + flow[..., 1], 0.0, h - 1.0)
    x0 = np.floor(xs).astype(np.intp)
    y0 = np.floor(ys).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx, fy = xs - x0, ys - y0
    if alt.ndim == 3:
        fx, fy = fx[..., None], fy[..., None]
    top = alt[y0, x0] * (1 - fx) + alt[y0, x1] * fx
    bottom = alt[y1, x0] * (1 - fx) + alt[y1, x1] * fx
    return top * (1 - fy) + bottom * fy


# ---------------------------------------------------------------- burst pairing


def prepare(raw, size: Optional[tuple] = None) -> np.ndarray:
    """Demosaic a raw frame and area-downsample it to ``size = (w, h)``."""
    img = demosaic_malvar(raw)
    if size is not None and (img.shape[1], img.shape[0]) != tuple(size):
        img = downsample_area(img, size[0], size[1])
    return img


@dataclass
class Registration:
    flow: np.ndarray
    matches: TileMatches
    guide: np.ndarray
    scale: float  # working-resolution pixels per raw pixel


def register_frames(
    base_off,
    alt_off,
    guide_on,
    size: Optional[tuple] = (512, 512),
    tile_size: int = 16,
    search: tuple = (64, 4),
    params: SolverParams = SolverParams(),
) -> Registration:
    """Register cam1 (alt) onto cam2 (base) from a flash-off pair and a flash-on guide."""
    base = prepare(base_off, size)
    alt = prepare(alt_off, size)
    guide = prepare(guide_on, size)
    matches = tile_match(base[..., 1], alt[..., 1], tile_size, search)
    mean_conf = float(matches.confidence.mean())
    if mean_conf < LOW_CONFIDENCE:
        log.warning("low tile-matching confidence (mean %.3f); flow is mostly smoothness-driven", mean_conf)
    if not np.any(matches.confidence > 0):
        # textureless input: fall back to a uniform weak data term so a smooth field still comes out
        matches.confidence = np.full_like(matches.confidence, 1e-3)
    flow = solve_flow(matches, guide, params)
    return Registration(flow, matches, guide, base.shape[1] / base_off.width)


def find_pair(manifest, t_index: int):
    """Locate the ``t_index``-th flash-off pair and the cam2 flash-on frame of the next slot."""
    specs = manifest.specs()
    by_slot: dict = {}
    for s in specs:
        by_slot.setdefault(s.t_index, {})[s.camera_id] = s
    off_slots = sorted(
        t for t, cams in by_slot.items()
        if set(cams) == {"cam1", "cam2"} and all(c.tag.endswith("_off") for c in cams.values())
    )
    if not 0 <= t_index < len(off_slots):
        raise ManifestError(f"no flash-off pair #{t_index} (manifest has {len(off_slots)})")
    slot = off_slots[t_index]
    nxt = by_slot.get(slot + 1, {})
    if "cam2" not in nxt or not nxt["cam2"].flash_on:
        raise ManifestError(f"slot {slot + 1} has no cam2 flash-on frame to guide the flow")
    return by_slot[slot]["cam2"], by_slot[slot]["cam1"], nxt["cam2"], nxt.get("cam1")


def register_pair(manifest, t_index: int = 0, size: Optional[tuple] = (512, 512), **kwargs) -> Registration:
    """Flow for flash-off pair ``t_index`` of the manifest, guided by cam2's next (flash-on) frame."""
    base_spec, alt_spec, guide_spec, _ = find_pair(manifest, t_index)
    return register_frames(
        manifest.load_frame(base_spec),
        manifest.load_frame(alt_spec),
        manifest.load_frame(guide_spec),
        size=size,
        **kwargs,
    )
