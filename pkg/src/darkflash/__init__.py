"""Simulated stereo dark-flash capture rig with registration and flash/no-flash fusion."""

from .core import RawFrame, as_gray, demosaic_malvar, downsample_area, luma, mosaic
from .fileio import read_pfm, read_raw, write_pfm, write_raw
from .fusion import AffineBilateralGrid, fuse_pipeline, scale_map_fuse, screened_poisson_solve, slice_apply
from .metering import MeteringConfig, MeteringResult, fractional_flash_gain, meter_exposure, meter_gain
from .metrics import MetricReport, evaluate, psnr, ssim
from .registration import register_pair, solve_flow, tile_match, warp_gather
from .sim import ExposureSettings, NoiseParams, make_demo_scene, make_rig, render_frame
from .burst import plan_session, execute_session, load_manifest

__version__ = "0.1.0"

__all__ = [
    "AffineBilateralGrid", "ExposureSettings", "MeteringConfig", "MeteringResult", "MetricReport",
    "NoiseParams", "RawFrame", "as_gray", "demosaic_malvar", "downsample_area", "evaluate",
    "execute_session", "fractional_flash_gain", "fuse_pipeline", "load_manifest", "luma",
    "make_demo_scene", "make_rig", "meter_exposure", "meter_gain", "mosaic", "plan_session",
    "psnr", "read_pfm", "read_raw", "register_pair", "render_frame", "scale_map_fuse",
    "screened_poisson_solve", "slice_apply", "solve_flow", "ssim", "tile_match", "warp_gather",
    "write_pfm", "write_raw",
]
