"""Scenes, exposure alignment, patch extraction and synthetic bracketed data."""
from __future__ import annotations

import os
from dataclasses import dataclass, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from . import formats
from .formats import DimensionMismatchError, ExposureOrderError, MissingSceneFileError

LDR_FILES = ("ldr_short.ppm", "ldr_medium.ppm", "ldr_long.ppm")
EXPOSURE_FILE = "exposures.txt"
GT_FILE = "gt.pfm"
SYNTH_EXPOSURES = (0.25, 1.0, 4.0)
SYNTH_GAMMA = 2.2


@dataclass
class SceneSample:
    """Three bracketed LDR frames (short, medium, long) and an optional GT.

    Images are H×W×3 arrays in [0, 1]. The medium frame is the reference.
    """

    ldr: Tuple[np.ndarray, np.ndarray, np.ndarray]
    exposures: Tuple[float, float, float]
    gt: Optional[np.ndarray] = None

    def __post_init__(self):
        self.ldr = tuple(np.asarray(f, dtype=np.float64) for f in self.ldr)
        self.exposures = tuple(float(t) for t in self.exposures)
        if len(self.ldr) != 3 or len(self.exposures) != 3:
            raise ValueError("a scene has exactly three frames")
        if not all(t > 0 for t in self.exposures):
            raise ExposureOrderError(f"exposure times must be positive, got {self.exposures}")
        t1, t2, t3 = self.exposures
        if not t1 < t2 < t3:
            raise ExposureOrderError(f"exposure times must be strictly increasing, got {self.exposures}")
        shape = self.ldr[0].shape
        if len(shape) != 3 or shape[2] != 3:
            raise DimensionMismatchError(f"frames must be H×W×3, got {shape}")
        others = list(self.ldr[1:]) + ([] if self.gt is None else [self.gt])
        for img in others:
            if img.shape != shape:
                raise DimensionMismatchError(f"image shapes differ: {shape} vs {img.shape}")
        for img in self.ldr:
            if img.min() < 0 or img.max() > 1:
                raise ValueError("LDR values must lie in [0, 1]")
        if self.gt is not None:
            self.gt = np.asarray(self.gt, dtype=np.float64)

    @property
    def shape(self) -> Tuple[int, int]:
        return self.ldr[0].shape[:2]

    def crop(self, y: int, x: int, h: int, w: int) -> "SceneSample":
        cut = lambda img: img[y : y + h, x : x + w]  # noqa: E731
        gt = None if self.gt is None else cut(self.gt)
        return replace(self, ldr=tuple(cut(f) for f in self.ldr), gt=gt)


@dataclass(frozen=True)
class PreprocessConfig:
    gamma_default: float = 2.2
    disturb_probability: float = 0.3
    disturb_center: float = 2.24
    disturb_halfwidth: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.disturb_probability <= 1.0:
            raise ValueError("disturb_probability must lie in [0, 1]")
        if self.disturb_halfwidth < 0:
            raise ValueError("disturb_halfwidth must be >= 0")
        if self.gamma_default <= 0 or self.disturb_center - self.disturb_halfwidth <= 0:
            raise ValueError("gamma values must be positive")


def gamma_correct(ldr, t: float, gamma: float) -> np.ndarray:
    """Map an LDR frame to the linear domain: ldr ** gamma / t."""
    if not t > 0:
        raise ValueError(f"exposure time must be positive, got {t}")
    if not gamma > 0:
        raise ValueError(f"gamma must be positive, got {gamma}")
    return np.power(np.asarray(ldr, dtype=np.float64), gamma) / t


def sample_gamma(rng: np.random.Generator, cfg: PreprocessConfig) -> float:
    # both draws are always consumed so the stream position never depends on the outcome
    coin = rng.random()
    value = rng.uniform(cfg.disturb_center - cfg.disturb_halfwidth, cfg.disturb_center + cfg.disturb_halfwidth)
    return float(value) if coin < cfg.disturb_probability else cfg.gamma_default


def sample_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    """Per-sample generator, independent of processing order."""
    return np.random.default_rng([seed, epoch, index])


def patch_offsets(n: int, size: int, stride: int) -> List[int]:
    """Start offsets along one axis; the last patch is snapped to the border."""
    if size > n:
        raise ValueError(f"patch size {size} exceeds image extent {n}")
    if size < 1 or stride < 1:
        raise ValueError("patch size and stride must be >= 1")
    starts = list(range(0, n - size + 1, stride))
    if starts[-1] != n - size:
        starts.append(n - size)
    return starts


def crop_patches(scene: SceneSample, size: int, stride: int) -> List[SceneSample]:
    h, w = scene.shape
    return [
        scene.crop(y, x, size, size)
        for y in patch_offsets(h, size, stride)
        for x in patch_offsets(w, size, stride)
    ]


def to_network_input(scene: SceneSample, gamma: float) -> np.ndarray:
    """Stack LDR and gamma-corrected frames into a (1, 18, H, W) array."""
    ldr = [f.transpose(2, 0, 1) for f in scene.ldr]
    lin = [gamma_correct(f, t, gamma) for f, t in zip(ldr, scene.exposures)]
    return np.concatenate(ldr + lin, axis=0)[None]


def to_network_target(scene: SceneSample) -> np.ndarray:
    if scene.gt is None:
        raise ValueError("scene has no ground truth")
    return scene.gt.transpose(2, 0, 1)[None]


def from_network_output(out: np.ndarray) -> np.ndarray:
    """(1, 3, H, W) prediction to an H×W×3 image."""
    return np.asarray(out)[0].transpose(1, 2, 0)


# ----------------------------------------------------------------- synthetic


def _smooth_field(rng, h, w, sigma):
    field = ndimage.gaussian_filter(rng.standard_normal((h, w)), sigma, mode="wrap")
    field -= field.min()
    peak = field.max()
    return field / peak if peak > 0 else field


def _translate(img, dy, dx):
    out = np.zeros_like(img)
    h, w = img.shape[:2]
    ys, yd = (slice(0, h - dy), slice(dy, h)) if dy >= 0 else (slice(-dy, h), slice(0, h + dy))
    xs, xd = (slice(0, w - dx), slice(dx, w)) if dx >= 0 else (slice(-dx, w), slice(0, w + dx))
    out[yd, xd] = img[ys, xs]
    return out


def quantize16(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0, 1) * formats.PNM_MAXVAL) / formats.PNM_MAXVAL


def make_synthetic_scene(
    rng: np.random.Generator,
    height: int,
    width: int,
    motion: Optional[Tuple[int, int]] = None,
    noise_sigma: float = 0.0,
) -> SceneSample:
    """Random smooth HDR scene and its three bracketed LDR captures.

    Radiance spans about seven stops, 2**-7 to 1, with a per-channel tint.
    ``motion=(dy, dx)`` moves the short frame by (dy, dx) and the long frame
    by (-dy, -dx) relative to the reference.
    """
    sigma = max(height, width) / 8.0
    log_r = -7.0 + 7.0 * _smooth_field(rng, height, width, sigma)
    tint = 0.7 + 0.3 * np.stack([_smooth_field(rng, height, width, sigma / 2) for _ in range(3)], axis=-1)
    gt = np.clip(np.exp2(log_r)[..., None] * tint, 0.0, 1.0)
    gt = gt.astype(np.float32).astype(np.float64)  # representable in PFM

    frames = []
    for i, t in enumerate(SYNTH_EXPOSURES):
        v = np.power(gt * t, 1.0 / SYNTH_GAMMA)
        if i == 0 and noise_sigma > 0:
            v = v + rng.normal(0.0, noise_sigma, size=v.shape)
        v = np.clip(v, 0.0, 1.0)
        if motion is not None and i != 1:
            dy, dx = motion if i == 0 else (-motion[0], -motion[1])
            v = _translate(v, dy, dx)
        frames.append(quantize16(v))
    return SceneSample(tuple(frames), SYNTH_EXPOSURES, gt)


# ------------------------------------------------------------------- on disk


def load_scene(directory) -> SceneSample:
    for name in LDR_FILES + (EXPOSURE_FILE,):
        if not os.path.isfile(os.path.join(directory, name)):
            raise MissingSceneFileError(os.path.join(directory, name))
    ldr = tuple(formats.read_ppm(os.path.join(directory, n)) for n in LDR_FILES)
    exposures = formats.read_exposures(os.path.join(directory, EXPOSURE_FILE))
    gt_path = os.path.join(directory, GT_FILE)
    gt = formats.read_pfm(gt_path) if os.path.isfile(gt_path) else None
    return SceneSample(ldr, exposures, gt)


def save_scene(directory, scene: SceneSample):
    formats.ensure_dir(directory)
    for name, frame in zip(LDR_FILES, scene.ldr):
        formats.write_ppm(os.path.join(directory, name), frame)
    formats.write_exposures(os.path.join(directory, EXPOSURE_FILE), scene.exposures)
    if scene.gt is not None:
        formats.write_pfm(os.path.join(directory, GT_FILE), scene.gt)


def load_dataset(root) -> List[SceneSample]:
    """Every scene directory directly under ``root``, in sorted order."""
    if not os.path.isdir(root):
        raise MissingSceneFileError(str(root))
    names = sorted(n for n in os.listdir(root) if os.path.isdir(os.path.join(root, n)))
    return [load_scene(os.path.join(root, n)) for n in names]


def scene_names(count: int) -> Sequence[str]:
    return [f"scene_{i:04d}" for i in range(count)]
