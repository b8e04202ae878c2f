"""Band-sampled spectral simulator of the two-camera dark-flash rig.

Scenes are defined at cam2's viewpoint.  cam1 sees the scene point that cam2
records at ``x`` at position ``x - d`` (``d`` = disparity), so the gather flow
that aligns cam1 onto cam2 is ``-d``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import ndimage

from .core import RawFrame, mosaic
from .errors import DomainError, FormatError, RangeError
from .fileio import read_json, read_pfm, write_json, write_pfm

BANDS = ("NUV", "Blue", "Green", "Red", "NIR")
FLASH_KINDS = ("OFF", "NIR", "NUV", "NIR+NUV", "WHITE")
PRESETS = ("ideal", "prototype")

GAIN_DB_RANGE = (0.0, 47.0)
EXPOSURE_RANGE = (6e-6, 30.0)
FRAME_INTERVAL_FLOOR = 0.040
# slack for dB <-> linear round trips at the envelope edges
_ENVELOPE_TOL = 1e-9


def linear_gain(gain_db: float) -> float:
    return 10.0 ** (gain_db / 20.0)


def gain_to_db(gain: float) -> float:
    if gain <= 0:
        raise DomainError(f"gain must be positive, got {gain}")
    return 20.0 * math.log10(gain)


@dataclass(frozen=True)
class NoiseParams:
    read_sigma: float = 0.0
    shot_scale: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.read_sigma < 0 or self.shot_scale < 0:
            raise ValueError("noise parameters must be non-negative")

    @property
    def enabled(self) -> bool:
        return self.read_sigma > 0 or self.shot_scale > 0

    def to_dict(self) -> dict:
        return {"read_sigma": self.read_sigma, "shot_scale": self.shot_scale, "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseParams":
        return cls(float(d.get("read_sigma", 0.0)), float(d.get("shot_scale", 0.0)), int(d.get("seed", 0)))


@dataclass(frozen=True)
class ExposureSettings:
    exposure_s: float
    gain_db: float
    flash: str = "OFF"
    flash_fraction: float = 1.0
    noise: NoiseParams = field(default_factory=NoiseParams)

    def __post_init__(self):
        if self.flash not in FLASH_KINDS:
            raise ValueError(f"unknown flash kind {self.flash!r}")
        if not 0.0 < self.flash_fraction <= 1.0:
            raise ValueError(f"flash_fraction must be in (0, 1], got {self.flash_fraction}")
        if self.flash == "OFF" and self.flash_fraction != 1.0:
            raise ValueError("flash_fraction must be 1 when the flash is off")

    @property
    def gain(self) -> float:
        return linear_gain(self.gain_db)

    def to_dict(self) -> dict:
        return {
            "exposure_s": self.exposure_s,
            "gain_db": self.gain_db,
            "flash": self.flash,
            "flash_fraction": self.flash_fraction,
            "noise": self.noise.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExposureSettings":
        return cls(
            exposure_s=float(d["exposure_s"]),
            gain_db=float(d["gain_db"]),
            flash=d.get("flash", "OFF"),
            flash_fraction=float(d.get("flash_fraction", 1.0)),
            noise=NoiseParams.from_dict(d.get("noise", {})),
        )


@dataclass(frozen=True)
class FlashModel:
    kind: str
    emission: tuple

    def __post_init__(self):
        if self.kind not in FLASH_KINDS:
            raise ValueError(f"unknown flash kind {self.kind!r}")
        if any(e < 0 for e in self.emission):
            raise ValueError("flash emission must be non-negative")


@dataclass(frozen=True, eq=False)
class CameraModel:
    camera_id: str
    response: np.ndarray  # (3, B)
    baseline_focal: float = 0.0
    gain_db_range: tuple = GAIN_DB_RANGE
    exposure_range: tuple = EXPOSURE_RANGE
    adc_bits: int = 12
    frame_interval_floor: float = FRAME_INTERVAL_FLOOR
    cfa_pattern: str = "RGGB"

    def __post_init__(self):
        resp = np.asarray(self.response, dtype=np.float64)
        if resp.ndim != 2 or resp.shape[0] != 3:
            raise ValueError(f"response must be 3 x B, got {resp.shape}")
        if np.any(resp < 0):
            raise ValueError("response entries must be non-negative")
        object.__setattr__(self, "response", resp)

    @property
    def max_gain(self) -> float:
        return linear_gain(self.gain_db_range[1])

    @property
    def min_gain(self) -> float:
        return linear_gain(self.gain_db_range[0])

    def check_settings(self, settings: ExposureSettings) -> None:
        lo, hi = self.exposure_range
        if not lo * (1 - _ENVELOPE_TOL) <= settings.exposure_s <= hi * (1 + _ENVELOPE_TOL):
            raise RangeError(f"{self.camera_id}: exposure {settings.exposure_s} s outside [{lo}, {hi}] s")
        glo, ghi = self.gain_db_range
        if not glo - _ENVELOPE_TOL <= settings.gain_db <= ghi + _ENVELOPE_TOL:
            raise RangeError(f"{self.camera_id}: gain {settings.gain_db} dB outside [{glo}, {ghi}] dB")


@dataclass(frozen=True)
class Rig:
    """Both cameras plus the flash emission table of one hardware preset."""

    preset: str
    cameras: dict
    flashes: dict

    @property
    def cam1(self) -> CameraModel:
        return self.cameras["cam1"]

    @property
    def cam2(self) -> CameraModel:
        return self.cameras["cam2"]


def _band_vector(**values) -> np.ndarray:
    vec = np.zeros(len(BANDS))
    for name, v in values.items():
        vec[BANDS.index(name)] = v
    return vec


def make_rig(preset: str = "ideal", baseline_focal: float = 24.0) -> Rig:
    """Build the ``ideal`` (box responses) or ``prototype`` (leaky) rig.

    ``baseline_focal`` is cam1's focal length times baseline in pixel-metres.
    """
    if preset not in PRESETS:
        raise ValueError(f"unknown preset {preset!r}; expected one of {PRESETS}")
    cam1_resp = np.stack([_band_vector(Red=1.0), _band_vector(Green=1.0), _band_vector(Blue=1.0)])
    if preset == "ideal":
        cam2_resp = np.stack([_band_vector(NIR=1.0), _band_vector(Green=1.0), _band_vector(NUV=1.0)])
        nir = _band_vector(NIR=0.6)
    else:
        cam2_resp = np.stack([_band_vector(NIR=1.0), _band_vector(Green=1.0, NIR=0.2), _band_vector(NUV=0.5)])
        nir = _band_vector(NIR=0.6, Red=0.04)
    nuv = _band_vector(NUV=0.3)
    flashes = {
        "OFF": FlashModel("OFF", tuple(np.zeros(len(BANDS)))),
        "NIR": FlashModel("NIR", tuple(nir)),
        "NUV": FlashModel("NUV", tuple(nuv)),
        "NIR+NUV": FlashModel("NIR+NUV", tuple(nir + nuv)),
        "WHITE": FlashModel("WHITE", tuple(_band_vector(Blue=0.3, Green=0.3, Red=0.3))),
    }
    cameras = {
        "cam1": CameraModel("cam1", cam1_resp, baseline_focal=baseline_focal),
        "cam2": CameraModel("cam2", cam2_resp, baseline_focal=0.0),
    }
    return Rig(preset, cameras, flashes)


@dataclass(eq=False)
class SpectralScene:
    reflectance: np.ndarray  # (H, W, B) in [0, 1]
    depth: np.ndarray  # (H, W) metres
    ambient: np.ndarray  # (B,)
    bands: tuple = BANDS
    clean_rgb: Optional[np.ndarray] = None
    noise: NoiseParams = field(default_factory=NoiseParams)

    def __post_init__(self):
        self.reflectance = np.asarray(self.reflectance, dtype=np.float64)
        self.depth = np.asarray(self.depth, dtype=np.float64)
        self.ambient = np.asarray(self.ambient, dtype=np.float64)
        self.bands = tuple(self.bands)
        h, w = self.depth.shape
        if self.reflectance.shape != (h, w, len(self.bands)):
            raise ValueError(f"reflectance shape {self.reflectance.shape} does not match {h}x{w}x{len(self.bands)}")
        if self.ambient.shape != (len(self.bands),):
            raise ValueError("ambient must have one entry per band")
        if np.any(self.reflectance < 0) or np.any(self.reflectance > 1):
            raise ValueError("reflectance must lie in [0, 1]")
        if np.any(self.depth <= 0):
            raise DomainError("depth must be positive everywhere")
        if self.clean_rgb is not None:
            self.clean_rgb = np.asarray(self.clean_rgb, dtype=np.float64)

    @property
    def width(self) -> int:
        return self.depth.shape[1]

    @property
    def height(self) -> int:
        return self.depth.shape[0]


def disparity_from_depth(depth, cam: CameraModel):
    """Horizontal disparity ``baseline_focal / depth`` in pixels."""
    depth = np.asarray(depth, dtype=np.float64)
    if np.any(depth <= 0):
        raise DomainError("depth must be positive")
    d = cam.baseline_focal / depth
    return float(d) if d.ndim == 0 else d


# ---------------------------------------------------------------- noise

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


def _splitmix64(x: np.ndarray) -> np.ndarray:
    z = x + _GOLDEN
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def counter_normal(seed: int, height: int, width: int, channels: int) -> np.ndarray:
    """Standard normals keyed on ``(seed, x, y, channel)``; no hidden generator state.

    Each sample depends only on its own coordinates, so any tiling or ordering
    of the computation reproduces the same values.
    """
    y, x, c = np.meshgrid(
        np.arange(height, dtype=np.uint64),
        np.arange(width, dtype=np.uint64),
        np.arange(channels, dtype=np.uint64),
        indexing="ij",
    )
    counter = (x << np.uint64(34)) | (y << np.uint64(8)) | (c << np.uint64(1))
    key = _splitmix64(np.array([seed & 0xFFFFFFFFFFFFFFFF], dtype=np.uint64))[0]
    with np.errstate(over="ignore"):
        h1 = _splitmix64(counter ^ key)
        h2 = _splitmix64((counter | np.uint64(1)) ^ key)
    u1 = ((h1 >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53
    u2 = (h2 >> np.uint64(11)).astype(np.float64) * 2.0**-53
    return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)


# ---------------------------------------------------------------- rendering


def _gather_rows(img: np.ndarray, shift: np.ndarray) -> np.ndarray:
    """Sample ``img`` at ``(x + shift, y)`` with linear interpolation, clamped at borders."""
    h, w = img.shape[:2]
    xs = np.clip(np.arange(w)[None, :] + shift, 0.0, w - 1.0)
    x0 = np.floor(xs).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    fx = (xs - x0)[..., None]
    rows = np.arange(h)[:, None]
    return img[rows, x0] * (1.0 - fx) + img[rows, x1] * fx


def sensor_signal(scene: SpectralScene, cam: CameraModel, settings: ExposureSettings, flash: FlashModel) -> np.ndarray:
    """Per-channel sensor exposure before gain and noise: ``T * response @ (rho * radiance)``."""
    radiance = scene.ambient + settings.flash_fraction * np.asarray(flash.emission, dtype=np.float64)
    channels = (scene.reflectance * radiance) @ cam.response.T
    if cam.baseline_focal != 0.0:
        # the scene point at cam2 pixel x lands at x - d in cam1
        channels = _gather_rows(channels, disparity_from_depth(scene.depth, cam))
    return settings.exposure_s * channels


def render_linear(scene: SpectralScene, cam: CameraModel, settings: ExposureSettings, flash: FlashModel) -> np.ndarray:
    """Gained, noisy, clipped 3-channel signal in [0, 1] prior to mosaicking."""
    cam.check_settings(settings)
    if flash.kind != settings.flash:
        raise ValueError(f"flash model {flash.kind!r} does not match settings flash {settings.flash!r}")
    if len(flash.emission) != len(scene.bands) or cam.response.shape[1] != len(scene.bands):
        raise ValueError("band count mismatch between scene, camera and flash")
    u = sensor_signal(scene, cam, settings, flash)
    noise = settings.noise
    if noise.enabled:
        sigma = np.sqrt(noise.read_sigma**2 + noise.shot_scale * u)
        u = u + sigma * counter_normal(noise.seed, u.shape[0], u.shape[1], 3)
    return np.clip(settings.gain * u, 0.0, 1.0)


def render_frame(
    scene: SpectralScene,
    cam: CameraModel,
    settings: ExposureSettings,
    flash: Optional[FlashModel] = None,
) -> RawFrame:
    """Render one raw frame.  ``flash`` defaults to the ideal preset's model for ``settings.flash``."""
    if flash is None:
        flash = make_rig("ideal").flashes[settings.flash]
    img = render_linear(scene, cam, settings, flash)
    return mosaic(img, cam.cfa_pattern, cam.adc_bits, settings=settings, camera_id=cam.camera_id)


# ---------------------------------------------------------------- bundled scene

DEFAULT_AMBIENT = _band_vector(NUV=0.002, Blue=0.03, Green=0.035, Red=0.03, NIR=0.02)
DEFAULT_NOISE = NoiseParams(read_sigma=5e-5, shot_scale=8e-6)


def _smooth_field(rng, h, w, sigma):
    f = ndimage.gaussian_filter(rng.standard_normal((h, w)), sigma, mode="wrap")
    return f / (f.std() + 1e-12)


def clean_rgb_from_reflectance(reflectance: np.ndarray, ambient: np.ndarray, rig: Optional[Rig] = None) -> np.ndarray:
    """Noise-free cam1 view at cam2's viewpoint, scaled so its 99th percentile is 0.75."""
    rig = rig or make_rig("ideal")
    rgb = (reflectance * ambient) @ rig.cam1.response.T
    return rgb * (0.75 / np.percentile(rgb, 99))


def make_demo_scene(
    width: int = 512,
    height: int = 512,
    seed: int = 0,
    depth: float = 2.0,
    layered: bool = False,
    noise: NoiseParams = DEFAULT_NOISE,
) -> SpectralScene:
    """Procedural desk scene: textured backdrop plus a handful of coloured shapes.

    Every band shares the same texture and shape boundaries (with independent
    per-shape spectra), so the dark-flash bands carry the edges of the visible
    ones.  ``layered`` puts the shapes nearer than the backdrop.
    """
    rng = np.random.default_rng(seed)
    nb = len(BANDS)
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    texture = 0.8 + 0.1 * _smooth_field(rng, height, width, 2.0) + 0.04 * _smooth_field(rng, height, width, 0.8)
    texture = np.clip(texture, 0.5, 1.0)

    refl = np.broadcast_to(rng.uniform(0.3, 0.7, nb), (height, width, nb)).copy()
    dmap = np.full((height, width), float(depth))
    scale = min(width, height)
    for i in range(7):
        spectrum = rng.uniform(0.1, 0.95, nb)
        cx, cy = rng.uniform(0.15, 0.85) * width, rng.uniform(0.15, 0.85) * height
        r = rng.uniform(0.06, 0.16) * scale
        if i % 2:
            inside = ((xx - cx) ** 2 + (yy - cy) ** 2) < r**2
        else:
            inside = (np.abs(xx - cx) < r) & (np.abs(yy - cy) < 0.7 * r)
        # slight anti-aliasing of shape boundaries
        mask = ndimage.gaussian_filter(inside.astype(np.float64), 0.7)
        refl = refl * (1 - mask[..., None]) + spectrum * mask[..., None]
        if layered:
            dmap = np.where(mask > 0.5, depth * rng.uniform(0.6, 0.9), dmap)
    refl = np.clip(refl * texture[..., None], 0.0, 1.0)
    return SpectralScene(
        reflectance=refl,
        depth=dmap,
        ambient=DEFAULT_AMBIENT.copy(),
        clean_rgb=clean_rgb_from_reflectance(refl, DEFAULT_AMBIENT),
        noise=noise,
    )


def save_scene(scene: SpectralScene, path, preset: str = "ideal", baseline_focal: float = 24.0) -> None:
    """JSON header plus one PFM per reflectance band, depth and (optionally) clean_rgb."""
    path = Path(path)
    stem = path.stem
    header = {
        "width": scene.width,
        "height": scene.height,
        "bands": list(scene.bands),
        "ambient": [float(a) for a in scene.ambient],
        "preset": preset,
        "baseline_focal": baseline_focal,
        "noise": scene.noise.to_dict(),
        "reflectance": [],
        "depth": f"{stem}_depth.pfm",
        "clean_rgb": None,
    }
    for i, band in enumerate(scene.bands):
        name = f"{stem}_refl_{band}.pfm"
        write_pfm(path.parent / name, scene.reflectance[..., i])
        header["reflectance"].append(name)
    write_pfm(path.parent / header["depth"], scene.depth)
    if scene.clean_rgb is not None:
        header["clean_rgb"] = f"{stem}_clean_rgb.pfm"
        write_pfm(path.parent / header["clean_rgb"], scene.clean_rgb)
    write_json(path, header)


def load_scene(path) -> tuple[SpectralScene, dict]:
    """Load a scene written by :func:`save_scene`; also returns the raw JSON header."""
    path = Path(path)
    header = read_json(path)
    base = path.parent
    try:
        bands = tuple(header["bands"])
        refl = np.stack([read_pfm(base / name) for name in header["reflectance"]], axis=-1)
        depth = read_pfm(base / header["depth"])
        clean = read_pfm(base / header["clean_rgb"]) if header.get("clean_rgb") else None
        scene = SpectralScene(
            reflectance=np.clip(refl, 0.0, 1.0),
            depth=depth,
            ambient=np.asarray(header["ambient"], dtype=np.float64),
            bands=bands,
            clean_rgb=clean,
            noise=NoiseParams.from_dict(header.get("noise", {})),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: bad scene file ({exc})") from exc
    if (scene.width, scene.height) != (header.get("width"), header.get("height")):
        raise FormatError(f"{path}: declared size does not match payload")
    return scene, header


def with_noise(settings: ExposureSettings, noise: NoiseParams) -> ExposureSettings:
    return replace(settings, noise=noise)
