"""Capture-session planning and execution.

The plan follows the burst-collection loop: for each exposure variant
(T, T/3, T/5, T/7) and each dark flash (NIR, NIR+NUV) take a white-flash
still, burst 1, burst 2 and a second white-flash still; finish with the long
exposure pair.  Each burst interleaves four flash-off and four flash-on pairs,
and both cameras always expose together.
"""

from __future__ import annotations

import hashlib
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

from .core import RawFrame
from .errors import DarkflashError, FrameRenderError, IncompleteMeteringError, ManifestError
from .fileio import read_json, read_raw, write_json, write_raw
from .metering import FLASH_CONDITION, MeteringResult
from .sim import ExposureSettings, NoiseParams, Rig, SpectralScene, gain_to_db, render_frame

VARIANTS = (1, 3, 5, 7)
DARK_FLASHES = ("NIR", "NIR+NUV")
TAGS = ("white_still_pre", "burst1_off", "burst1_on", "burst2_off", "burst2_on", "white_still_post", "long_exposure")
PAIRS_PER_BURST = 4
FORMAT_VERSION = 1


@dataclass(frozen=True)
class FrameSpec:
    index: int
    camera_id: str
    tag: str
    t_index: int  # time slot; both cameras of a pair share it
    variant: int
    flash_kind: str
    settings: ExposureSettings
    start_s: float

    @property
    def filename(self) -> str:
        return f"f{self.index:04d}_{self.camera_id}_{self.tag}.pgm"

    @property
    def flash_on(self) -> bool:
        return self.settings.flash != "OFF"

    def to_dict(self) -> dict:
        return {
            "index": self.index,
            "camera_id": self.camera_id,
            "tag": self.tag,
            "t_index": self.t_index,
            "variant": self.variant,
            "flash_kind": self.flash_kind,
            "settings": self.settings.to_dict(),
            "start_s": self.start_s,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FrameSpec":
        return cls(
            index=int(d["index"]),
            camera_id=d["camera_id"],
            tag=d["tag"],
            t_index=int(d["t_index"]),
            variant=int(d["variant"]),
            flash_kind=d["flash_kind"],
            settings=ExposureSettings.from_dict(d["settings"]),
            start_s=float(d["start_s"]),
        )


@dataclass(frozen=True)
class BurstPlan:
    frames: tuple
    metering: MeteringResult = field(compare=False)

    def __len__(self):
        return len(self.frames)

    def slots(self) -> list[tuple]:
        """Frames grouped by time slot, in capture order."""
        out, current = [], []
        for f in self.frames:
            if current and f.t_index != current[0].t_index:
                out.append(tuple(current))
                current = []
            current.append(f)
        if current:
            out.append(tuple(current))
        return out


def _settings(T, gain, flash="OFF", fraction=1.0) -> ExposureSettings:
    return ExposureSettings(exposure_s=T, gain_db=gain_to_db(gain), flash=flash, flash_fraction=fraction)


def _pair_settings(m: MeteringResult, tag: str, n: int, flash: str) -> dict:
    """Per-camera settings for one slot of the plan."""
    T, g = m.T_s, m.gains
    if tag.startswith("white_still"):
        return {c: _settings(T, g[f"{c}_white"], "WHITE") for c in ("cam1", "cam2")}
    if tag.endswith("_off"):
        return {c: _settings(T, g[f"{c}_noflash"]) for c in ("cam1", "cam2")}
    cond = f"cam2_{FLASH_CONDITION[flash]}"
    burst = tag.split("_")[0]
    g2 = g[cond] if n == 1 else m.fractional_gains[cond][burst][n]
    # cam1 runs a uniform burst: its settings never change, the flash just fires for T/n of it
    cam1 = _settings(T, g["cam1_noflash"], flash, 1.0 / n)
    if burst == "burst1":
        cam2 = _settings(T, g2, flash, 1.0 / n)
    else:
        cam2 = _settings(T / n, g2, flash, 1.0)
    return {"cam1": cam1, "cam2": cam2}


def plan_session(m: MeteringResult, frame_interval_floor: float = 0.040) -> BurstPlan:
    """Expand a metering result into the full, time-stamped capture plan (290 frames)."""
    m.validate()
    slots = []  # (tag, variant, flash_kind, {cam: settings})
    for n in VARIANTS:
        for flash in DARK_FLASHES:
            slots.append(("white_still_pre", n, flash, _pair_settings(m, "white_still_pre", n, flash)))
            for burst in ("burst1", "burst2"):
                for _ in range(PAIRS_PER_BURST):
                    for state in ("off", "on"):
                        tag = f"{burst}_{state}"
                        slots.append((tag, n, flash, _pair_settings(m, tag, n, flash)))
            slots.append(("white_still_post", n, flash, _pair_settings(m, "white_still_post", n, flash)))
    long_exp = {
        c: _settings(m.long_exposure[c]["tau_s"], m.long_exposure[c]["gain"]) for c in ("cam1", "cam2")
    }
    slots.append(("long_exposure", 1, "OFF", long_exp))

    frames, start, index = [], 0.0, 0
    for t_index, (tag, n, flash, per_cam) in enumerate(slots):
        for cam in ("cam1", "cam2"):
            frames.append(FrameSpec(index, cam, tag, t_index, n, flash, per_cam[cam], start))
            index += 1
        start += max(max(s.exposure_s for s in per_cam.values()), frame_interval_floor)
    return BurstPlan(tuple(frames), m)


@dataclass(eq=False)
class SessionManifest:
    scene: str
    metering: MeteringResult
    frames: list  # [(FrameSpec, relative path)]
    seed: int = 0
    format_version: int = FORMAT_VERSION
    root: Optional[Path] = None

    def __eq__(self, other):
        if not isinstance(other, SessionManifest):
            return NotImplemented
        return (
            self.scene == other.scene
            and self.metering == other.metering
            and self.frames == other.frames
            and self.seed == other.seed
            and self.format_version == other.format_version
        )

    def to_dict(self) -> dict:
        return {
            "format_version": self.format_version,
            "scene": self.scene,
            "seed": self.seed,
            "metering": self.metering.to_dict(),
            "frames": [{"spec": spec.to_dict(), "path": path} for spec, path in self.frames],
        }

    @classmethod
    def from_dict(cls, d: dict, root=None) -> "SessionManifest":
        try:
            if int(d["format_version"]) != FORMAT_VERSION:
                raise ManifestError(f"unsupported manifest format_version {d['format_version']}")
            return cls(
                scene=d["scene"],
                metering=MeteringResult.from_dict(d["metering"]),
                frames=[(FrameSpec.from_dict(e["spec"]), e["path"]) for e in d["frames"]],
                seed=int(d.get("seed", 0)),
                root=None if root is None else Path(root),
            )
        except (KeyError, TypeError, ValueError, IncompleteMeteringError) as exc:
            raise ManifestError(f"bad manifest: {exc}") from exc

    def path_of(self, spec: FrameSpec) -> Path:
        for s, p in self.frames:
            if s.index == spec.index:
                return (self.root or Path(".")) / p
        raise ManifestError(f"frame {spec.index} not in manifest")

    def load_frame(self, spec: FrameSpec) -> RawFrame:
        return read_raw(self.path_of(spec))

    def specs(self) -> list[FrameSpec]:
        return [s for s, _ in self.frames]


def save_manifest(manifest: SessionManifest, out_dir) -> Path:
    path = Path(out_dir) / "manifest.json"
    write_json(path, manifest.to_dict())
    return path


def load_manifest(path, verify: bool = True) -> SessionManifest:
    """Load ``manifest.json`` (or a directory holding one); optionally check every frame parses."""
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    if not path.exists():
        raise ManifestError(f"no manifest at {path}")
    manifest = SessionManifest.from_dict(read_json(path), root=path.parent)
    if verify:
        for spec, rel in manifest.frames:
            if not (manifest.root / rel).exists():
                raise ManifestError(f"manifest references missing file {rel}")
            try:
                read_raw(manifest.root / rel)
            except (DarkflashError, OSError) as exc:
                raise ManifestError(f"{rel}: {exc}") from exc
    return manifest


def frame_seed(session_seed: int, spec: FrameSpec) -> int:
    digest = hashlib.sha256(f"{session_seed}:{spec.index}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def execute_session(
    plan: BurstPlan,
    scene: SpectralScene,
    rig: Rig,
    out_dir,
    seed: int = 0,
    noise: Optional[NoiseParams] = None,
    select: Optional[Callable[[FrameSpec], bool]] = None,
    scene_ref: str = "",
    workers: int = 1,
) -> SessionManifest:
    """Render the plan (or the frames ``select`` keeps) to PGM+JSON files and a manifest.

    Noise parameters come from ``noise`` or the scene; each frame draws its
    noise from a seed derived from ``(seed, frame index)``.  On any failure the
    files written by this call are removed.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    base_noise = scene.noise if noise is None else noise
    specs = [s for s in plan.frames if select is None or select(s)]
    written: list[Path] = []

    def render_one(spec: FrameSpec) -> tuple:
        cam = rig.cameras[spec.camera_id]
        frame_noise = NoiseParams(base_noise.read_sigma, base_noise.shot_scale, frame_seed(seed, spec))
        settings = ExposureSettings(
            spec.settings.exposure_s, spec.settings.gain_db, spec.settings.flash, spec.settings.flash_fraction, frame_noise
        )
        try:
            raw = render_frame(scene, cam, settings, rig.flashes[settings.flash])
        except DarkflashError as exc:
            raise FrameRenderError(f"frame {spec.index} ({spec.camera_id}, {spec.tag}): {exc}", spec) from exc
        except ValueError as exc:
            raise FrameRenderError(f"frame {spec.index} ({spec.camera_id}, {spec.tag}): {exc}", spec) from exc
        path = out_dir / spec.filename
        written.append(path)
        write_raw(path, raw)
        return spec, spec.filename

    try:
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                entries = list(pool.map(render_one, specs))
        else:
            entries = [render_one(s) for s in specs]
        manifest = SessionManifest(scene_ref, plan.metering, entries, seed=seed, root=out_dir)
        written.append(out_dir / "manifest.json")
        save_manifest(manifest, out_dir)
    except BaseException:
        for p in written:
            for q in (p, p.with_suffix(".json")):
                if q.exists():
                    os.unlink(q)
        raise
    return manifest
