"""Argument checks shared by the estimator and the command line."""
from __future__ import annotations

from typing import List, Sequence

import numpy as np

from .data import SceneSample
from .model import INPUT_CHANNELS, ModelConfig


def check_scenes(X, require_gt: bool = False) -> List[SceneSample]:
    """Coerce ``X`` to a non-empty list of scenes."""
    if isinstance(X, SceneSample):
        X = [X]
    scenes = list(X)
    if not scenes:
        raise ValueError("expected at least one scene")
    for i, s in enumerate(scenes):
        if not isinstance(s, SceneSample):
            raise TypeError(f"item {i} is {type(s).__name__}, expected SceneSample")
        if require_gt and s.gt is None:
            raise ValueError(f"scene {i} has no ground truth")
    return scenes


def check_network_input(x, cfg: ModelConfig) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim != 4 or x.shape[1] != INPUT_CHANNELS:
        raise ValueError(f"expected (b, {INPUT_CHANNELS}, H, W) input, got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("input contains non-finite values")
    cfg.check_input_size(*x.shape[2:])
    return x


def check_tile(tile: Sequence[int], overlap: int, multiple: int):
    th, tw = tile
    if th < 1 or tw < 1:
        raise ValueError("tile sides must be positive")
    if overlap < 0:
        raise ValueError("overlap must be >= 0")
    if th < 2 * overlap or tw < 2 * overlap:
        raise ValueError(f"tile {th}x{tw} is smaller than twice the overlap {overlap}")
    if th % multiple or tw % multiple:
        raise ValueError(f"tile sides must be multiples of {multiple}")


def check_positive_int(name: str, value) -> int:
    if isinstance(value, bool) or int(value) != value or value < 1:
        raise ValueError(f"{name} must be a positive integer, got {value!r}")
    return int(value)
