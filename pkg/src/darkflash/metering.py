"""Five-step automatic exposure for the stereo dark-flash rig.

Gains inside the update rules are linear multipliers; dB only appears where
settings are handed to a capture callback.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .core import RawFrame, container_max
from .errors import DimensionError, DomainError, IncompleteMeteringError, NumericError
from .sim import CameraModel, ExposureSettings, gain_to_db, linear_gain

Capture = Callable[[ExposureSettings], RawFrame]

CONDITIONS = (
    "cam1_noflash", "cam2_noflash",
    "cam1_white", "cam2_white",
    "cam1_ir", "cam2_ir",
    "cam1_uvir", "cam2_uvir",
)
FLASH_CONDITION = {"OFF": "noflash", "WHITE": "white", "NIR": "ir", "NIR+NUV": "uvir"}
FRACTIONS = (3, 5, 7)


@dataclass(frozen=True)
class MeteringConfig:
    target: float = 50000.0
    offset: float = 1000.0
    percentile: float = 0.99
    stop_delta_s: float = 0.001
    gain_rel_tol: float = 1e-3
    max_iters: int = 16
    initial_T_s: float = 0.001

    def __post_init__(self):
        if not 0.0 < self.percentile < 1.0:
            raise ValueError("percentile must be in (0, 1)")
        if self.target > 65535:
            raise ValueError("target exceeds the 16-bit container")
        if self.max_iters < 1:
            raise ValueError("max_iters must be at least 1")


@dataclass(frozen=True)
class MeterOutcome:
    """Result of one iterative search: the value plus how it ended."""

    value: float
    iterations: int
    truncated: bool = False
    clamped: bool = False
    history: tuple = ()


def percentile_value(raw: RawFrame, p: float) -> float:
    """Nearest-rank percentile over every mosaic sample (all CFA sites pooled)."""
    if not 0.0 < p < 1.0:
        raise ValueError("p must be in (0, 1)")
    flat = np.asarray(raw.data).ravel()
    n = flat.size
    if n == 0:
        raise DimensionError("empty frame")
    # round away float noise such as 0.29 * 100 = 28.999999999999996
    rank = max(1, math.ceil(round(p * n, 9)))
    return float(np.partition(flat, rank - 1)[rank - 1])


def _is_saturated(raw: RawFrame, v: float) -> bool:
    return v >= container_max(raw.adc_bits)


def _iterate(measure, start, lo, hi, cfg, converged) -> MeterOutcome:
    """Shared multiplicative update ``x <- x * target / (v + offset)``.

    A saturated reading carries no magnitude information, so it never counts
    as converged.
    """
    x = start
    history = [x]
    clamped = False
    for k in range(1, cfg.max_iters + 1):
        v, saturated = measure(x)
        denom = v + cfg.offset
        new = x * cfg.target / denom if denom > 0 else math.inf
        if not math.isfinite(new):
            raise NumericError(f"metering produced a non-finite value ({new})")
        clamped = not lo <= new <= hi
        new = min(max(new, lo), hi)
        history.append(new)
        if converged(x, new) and not saturated:
            return MeterOutcome(new, k, False, clamped, tuple(history))
        x = new
    return MeterOutcome(x, cfg.max_iters, True, clamped, tuple(history))


def meter_exposure(capture: Capture, cfg: MeteringConfig, cam: CameraModel) -> MeterOutcome:
    """Step 1: exposure time for ``cam`` at maximum gain with the flash off."""
    gain_db = cam.gain_db_range[1]
    lo, hi = cam.exposure_range

    def measure(t):
        raw = capture(ExposureSettings(exposure_s=t, gain_db=gain_db))
        v = percentile_value(raw, cfg.percentile)
        return v, _is_saturated(raw, v)

    start = min(max(cfg.initial_T_s, lo), hi)
    return _iterate(measure, start, lo, hi, cfg, lambda old, new: abs(new - old) < cfg.stop_delta_s)


def meter_gain(capture: Capture, cfg: MeteringConfig, cam: CameraModel, T: float, flash: str = "OFF") -> MeterOutcome:
    """Steps 2-3: linear gain at fixed exposure ``T``, starting from the maximum gain."""
    lo, hi = cam.min_gain, cam.max_gain

    def measure(g):
        raw = capture(ExposureSettings(exposure_s=T, gain_db=gain_to_db(g), flash=flash))
        v = percentile_value(raw, cfg.percentile)
        return v, _is_saturated(raw, v)

    return _iterate(measure, hi, lo, hi, cfg, lambda old, new: abs(new - old) < cfg.gain_rel_tol * old)


def fractional_flash_gain(g_e: float, g_ef: float, n: int) -> float:
    """Gain that keeps the target level when the flash fires for only ``T/n``.

    From ``T g_e L_e = T g_ef (L_e + L_f) = target`` the ``T/n`` flash needs
    ``n g_e / (n + g_e / g_ef - 1)``.
    """
    if g_e <= 0 or g_ef <= 0:
        raise DomainError(f"gains must be positive, got g_e={g_e}, g_ef={g_ef}")
    if n < 1:
        raise DomainError(f"n must be >= 1, got {n}")
    return n * g_e / (n + g_e / g_ef - 1.0)


def burst2_fractional_gain(g_full_flash: float, n: int, max_gain: float = linear_gain(47.0)) -> tuple[float, bool]:
    """Gain for a ``T/n`` exposure with full flash: ``n`` times the full-flash gain, clamped."""
    if n < 1 or g_full_flash <= 0:
        raise DomainError("need n >= 1 and a positive gain")
    g = n * g_full_flash
    if g > max_gain:
        return max_gain, True
    return g, False


def long_exposure_settings(g_db: float, T: float, max_exposure_s: float = 30.0) -> tuple[float, float]:
    """Exposure ``min(10^(g/20) T, 30 s)`` and the linear gain making up the remainder."""
    if T <= 0:
        raise DomainError("T must be positive")
    product = linear_gain(g_db) * T
    tau = min(product, max_exposure_s)
    return tau, product / tau


@dataclass
class MeteringResult:
    T_s: float
    gains: dict  # condition -> linear gain
    fractional_gains: dict  # condition -> {"burst1"|"burst2" -> {n -> linear gain}}
    long_exposure: dict  # camera id -> {"tau_s", "gain"}
    flags: list = field(default_factory=list)

    def validate(self) -> None:
        missing = [c for c in CONDITIONS if c not in self.gains]
        for cam in ("cam1", "cam2"):
            for cond in ("ir", "uvir"):
                key = f"{cam}_{cond}"
                for burst in ("burst1", "burst2"):
                    have = self.fractional_gains.get(key, {}).get(burst, {})
                    missing += [f"{key}/{burst}/{n}" for n in FRACTIONS if n not in have]
            if cam not in self.long_exposure:
                missing.append(f"long_exposure/{cam}")
        if missing:
            raise IncompleteMeteringError(f"metering result lacks {', '.join(missing)}")
        if not all(g > 0 for g in self.gains.values()):
            raise IncompleteMeteringError("non-positive gain in metering result")

    def to_dict(self) -> dict:
        return {
            "T_s": self.T_s,
            "gains": dict(self.gains),
            "fractional_gains": {
                cond: {burst: {str(n): g for n, g in per.items()} for burst, per in bursts.items()}
                for cond, bursts in self.fractional_gains.items()
            },
            "long_exposure": {cam: dict(v) for cam, v in self.long_exposure.items()},
            "flags": list(self.flags),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MeteringResult":
        try:
            return cls(
                T_s=float(d["T_s"]),
                gains={k: float(v) for k, v in d["gains"].items()},
                fractional_gains={
                    cond: {burst: {int(n): float(g) for n, g in per.items()} for burst, per in bursts.items()}
                    for cond, bursts in d["fractional_gains"].items()
                },
                long_exposure={
                    cam: {"tau_s": float(v["tau_s"]), "gain": float(v["gain"])}
                    for cam, v in d["long_exposure"].items()
                },
                flags=list(d.get("flags", [])),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise IncompleteMeteringError(f"bad metering record: {exc}") from exc


def run_full_metering(
    capture: Callable[[str, ExposureSettings], RawFrame],
    cfg: MeteringConfig,
    cams: dict,
) -> MeteringResult:
    """Run the whole AE sequence.  ``capture(camera_id, settings)`` takes one frame."""
    flags = []

    def note(label, outcome):
        if outcome.truncated:
            flags.append(f"{label}:truncated")
        if outcome.clamped:
            flags.append(f"{label}:clamped")
        return outcome.value

    cam1, cam2 = cams["cam1"], cams["cam2"]
    T = note("T", meter_exposure(lambda s: capture("cam1", s), cfg, cam1))

    gains = {"cam1_noflash": cam1.max_gain}
    gains["cam2_noflash"] = note("cam2_noflash", meter_gain(lambda s: capture("cam2", s), cfg, cam2, T))
    for flash in ("WHITE", "NIR", "NIR+NUV"):
        for cid, cam in (("cam1", cam1), ("cam2", cam2)):
            label = f"{cid}_{FLASH_CONDITION[flash]}"
            outcome = meter_gain(lambda s, cid=cid: capture(cid, s), cfg, cam, T, flash)
            gains[label] = note(label, outcome)

    fractional = {}
    for cid, cam in (("cam1", cam1), ("cam2", cam2)):
        g_e = gains[f"{cid}_noflash"]
        for cond in ("ir", "uvir"):
            key = f"{cid}_{cond}"
            # noise can put the flash gain a hair above the ambient one; the flash never removes light
            g_ef = min(gains[key], g_e)
            burst1 = {n: fractional_flash_gain(g_e, g_ef, n) for n in FRACTIONS}
            burst2 = {}
            for n in FRACTIONS:
                burst2[n], was_clamped = burst2_fractional_gain(gains[key], n, cam.max_gain)
                if was_clamped:
                    flags.append(f"{key}/burst2/{n}:clamped")
            fractional[key] = {"burst1": burst1, "burst2": burst2}

    long_exposure = {}
    for cid, cam in (("cam1", cam1), ("cam2", cam2)):
        tau, g = long_exposure_settings(gain_to_db(gains[f"{cid}_noflash"]), T, cam.exposure_range[1])
        long_exposure[cid] = {"tau_s": tau, "gain": g}

    result = MeteringResult(T, gains, fractional, long_exposure, flags)
    result.validate()
    return result
