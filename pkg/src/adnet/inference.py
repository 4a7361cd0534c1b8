"""Self-ensemble and tiled inference around any (b, c, H, W) -> (b, k, H, W) predictor."""
from __future__ import annotations

from typing import Callable, List, Tuple

import numpy as np

Predictor = Callable[[np.ndarray], np.ndarray]


class CountingPredictor:
    """Wraps a predictor and counts forward passes."""

    def __init__(self, predict: Predictor):
        self.predict = predict
        self.calls = 0

    def __call__(self, x: np.ndarray) -> np.ndarray:
        self.calls += 1
        return self.predict(x)


def _transpose(x):
    return np.swapaxes(x, -1, -2)


def _vflip(x):
    return x[..., ::-1, :]


def _hflip(x):
    return x[..., ::-1]


# (name, forward, inverse); every transform here is its own inverse
TTA_TRANSFORMS: List[Tuple[str, Callable, Callable]] = [
    ("identity", lambda x: x, lambda x: x),
    ("transpose", _transpose, _transpose),
    ("vflip", _vflip, _vflip),
    ("hflip", _hflip, _hflip),
]


def tta_infer(predict: Predictor, x: np.ndarray) -> np.ndarray:
    """Mean of de-transformed predictions over the 4x self-ensemble.

    The transpose member needs a square input; on non-square inputs it is
    skipped and three predictions are averaged.
    """
    x = np.asarray(x)
    square = x.shape[-1] == x.shape[-2]
    total = None
    n = 0
    for name, fwd, inv in TTA_TRANSFORMS:
        if name == "transpose" and not square:
            continue
        y = inv(np.asarray(predict(np.ascontiguousarray(fwd(x)))))
        total = y.astype(np.float64) if total is None else total + y
        n += 1
    return (total / n).astype(np.result_type(x.dtype, np.float32))


def tile_starts(n: int, tile: int, overlap: int, align: int = 1) -> List[int]:
    """Tile origins along one axis.

    Consecutive tiles share at least ``2 * overlap`` pixels; the last tile
    is snapped to the border. All origins are multiples of ``align``.
    """
    if tile >= n:
        return [0]
    if tile % align or n % align:
        raise ValueError(f"tile {tile} and extent {n} must be multiples of {align}")
    step = (tile - 2 * overlap) // align * align
    if step < align:
        raise ValueError(f"tile {tile} leaves no interior with overlap {overlap} (alignment {align})")
    starts = list(range(0, n - tile + 1, step))
    if starts[-1] != n - tile:
        starts.append(n - tile)
    return starts


def _keep_ranges(starts: List[int], tile: int, n: int) -> List[Tuple[int, int]]:
    """Per tile, the [lo, hi) image range it contributes; seams sit mid-overlap."""
    bounds = [0]
    for a, b in zip(starts, starts[1:]):
        bounds.append((b + min(a + tile, n)) // 2)
    bounds.append(n)
    return list(zip(bounds[:-1], bounds[1:]))


def tiled_infer(
    predict: Predictor,
    x: np.ndarray,
    tile_h: int,
    tile_w: int,
    overlap: int,
    align: int = 1,
) -> np.ndarray:
    """Run ``predict`` tile by tile and stitch the interiors.

    ``overlap`` is the context margin each tile carries on an interior side;
    that margin is discarded when stitching. If it is at least the
    predictor's receptive-field radius the result equals untiled inference.
    """
    if overlap < 0:
        raise ValueError("overlap must be >= 0")
    if tile_h < 2 * overlap or tile_w < 2 * overlap:
        raise ValueError(f"tile {tile_h}x{tile_w} is smaller than twice the overlap {overlap}")
    x = np.asarray(x)
    h, w = x.shape[-2:]
    th, tw = min(tile_h, h), min(tile_w, w)
    ys = tile_starts(h, th, overlap, align)
    xs = tile_starts(w, tw, overlap, align)
    out = None
    for y0, (ylo, yhi) in zip(ys, _keep_ranges(ys, th, h)):
        for x0, (xlo, xhi) in zip(xs, _keep_ranges(xs, tw, w)):
            pred = np.asarray(predict(np.ascontiguousarray(x[..., y0 : y0 + th, x0 : x0 + tw])))
            if out is None:
                out = np.zeros(pred.shape[:-2] + (h, w), dtype=pred.dtype)
            out[..., ylo:yhi, xlo:xhi] = pred[..., ylo - y0 : yhi - y0, xlo - x0 : xhi - x0]
    return out
