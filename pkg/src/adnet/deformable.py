"""Bilinear sampling and modulated deformable convolution.

Offsets are laid out per kernel tap as interleaved ``(dy, dx)`` channel
pairs, taps in row-major kernel order. Samples falling outside the input
read as zero.

Sampling a set of points is a sparse linear map from the flattened image to
the samples (four bilinear weights per row). The same sparsity pattern with
the weights replaced by their derivatives w.r.t. the row or column
coordinate gives the coordinate gradients.
"""
from __future__ import annotations

import math
from typing import Optional

import numpy as np
from scipy import sparse

from .tensor import Tensor, conv_output_size, make_op


def sample_pixel(plane: np.ndarray, y: float, x: float) -> float:
    """Interpolate a 2-D array at real coordinates with a zero border."""
    h, w = plane.shape
    y0, x0 = math.floor(y), math.floor(x)
    ly, lx = y - y0, x - x0
    total = 0.0
    for yy, xx, wgt in (
        (y0, x0, (1 - ly) * (1 - lx)),
        (y0, x0 + 1, (1 - ly) * lx),
        (y0 + 1, x0, ly * (1 - lx)),
        (y0 + 1, x0 + 1, ly * lx),
    ):
        if 0 <= yy < h and 0 <= xx < w:
            total += wgt * plane[yy, xx]
    return float(total)


class _Sampler:
    """Sparse bilinear interpolation matrices for points ``(py, px)``."""

    def __init__(self, py: np.ndarray, px: np.ndarray, h: int, w: int):
        n = py.size
        y0 = np.floor(py)
        x0 = np.floor(px)
        ly = (py - y0).ravel()
        lx = (px - x0).ravel()
        y0 = y0.astype(np.int64).ravel()
        x0 = x0.astype(np.int64).ravel()
        idx = np.empty((n, 4), dtype=np.int64)
        valid = np.empty((n, 4), dtype=bool)
        for c, (dy, dx) in enumerate(((0, 0), (0, 1), (1, 0), (1, 1))):
            yy, xx = y0 + dy, x0 + dx
            valid[:, c] = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
            idx[:, c] = np.clip(yy, 0, h - 1) * w + np.clip(xx, 0, w - 1)
        self.shape = (n, h * w)
        self.indices = idx.ravel()
        self.indptr = np.arange(0, 4 * n + 1, 4)
        self.valid = valid
        self.ly, self.lx = ly, lx

    def _matrix(self, weights: np.ndarray) -> sparse.csr_matrix:
        data = (weights * self.valid).ravel()
        return sparse.csr_matrix((data, self.indices, self.indptr), shape=self.shape)

    def values(self, dtype) -> sparse.csr_matrix:
        ly, lx = self.ly[:, None], self.lx[:, None]
        wy = np.hstack([1 - ly, 1 - ly, ly, ly])
        wx = np.hstack([1 - lx, lx, 1 - lx, lx])
        return self._matrix((wy * wx).astype(dtype))

    def d_dy(self, dtype) -> sparse.csr_matrix:
        lx = self.lx[:, None]
        return self._matrix(np.hstack([-(1 - lx), -lx, 1 - lx, lx]).astype(dtype))

    def d_dx(self, dtype) -> sparse.csr_matrix:
        ly = self.ly[:, None]
        return self._matrix(np.hstack([-(1 - ly), 1 - ly, -ly, ly]).astype(dtype))


def bilinear_sample(feature: Tensor, coords: Tensor) -> Tensor:
    """Sample ``feature`` (b, c, h, w) at ``coords`` (b, 2, ho, wo).

    ``coords[:, 0]`` holds row positions and ``coords[:, 1]`` column
    positions, both in pixels. Differentiable w.r.t. both arguments.
    """
    b, c, h, w = feature.shape
    if coords.ndim != 4 or coords.shape[0] != b or coords.shape[1] != 2:
        raise ValueError(f"coords must have shape ({b}, 2, ho, wo), got {coords.shape}")
    ho, wo = coords.shape[2:]
    dtype = feature.dtype
    xt = [feature.data[n].reshape(c, h * w).T for n in range(b)]  # (hw, c) views
    samplers = [_Sampler(coords.data[n, 0], coords.data[n, 1], h, w) for n in range(b)]
    out = np.stack([(s.values(dtype) @ x).T for s, x in zip(samplers, xt)]).reshape(b, c, ho, wo)

    def back(g):
        g = g.reshape(b, c, ho * wo)
        gf = gc = None
        if feature.requires_grad:
            gf = np.stack([(s.values(dtype).T @ g[n].T).T for n, s in enumerate(samplers)]).reshape(feature.shape)
        if coords.requires_grad:
            gc = np.empty(coords.shape, dtype=coords.dtype)
            for n, s in enumerate(samplers):
                gc[n, 0] = ((s.d_dy(dtype) @ xt[n]) * g[n].T).sum(axis=1).reshape(ho, wo)
                gc[n, 1] = ((s.d_dx(dtype) @ xt[n]) * g[n].T).sum(axis=1).reshape(ho, wo)
        return gf, gc

    return make_op("bilinear_sample", out, (feature, coords), back)


def deform_conv2d(
    x: Tensor,
    offset: Tensor,
    mask: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    padding: int = 0,
    dilation: int = 1,
) -> Tensor:
    """Modulated deformable convolution.

    Tap ``k`` at output location ``p`` reads the input at
    ``p * stride - padding + k * dilation + offset[k, p]`` through bilinear
    interpolation and scales it by ``mask[k, p]`` before the weighted sum.

    Args:
        x: input of shape (b, c, h, w).
        offset: (b, 2 * kh * kw, ho, wo), interleaved (dy, dx) per tap.
        mask: (b, kh * kw, ho, wo) modulation scalars.
        weight: (cout, c, kh, kw).
    """
    b, c, h, w = x.shape
    cout, cin, kh, kw = weight.shape
    if cin != c:
        raise ValueError(f"deform_conv2d: weight expects {cin} input channels, got {c}")
    ho = conv_output_size(h, kh, stride, padding, dilation)
    wo = conv_output_size(w, kw, stride, padding, dilation)
    if ho <= 0 or wo <= 0:
        raise ValueError(f"deform_conv2d: non-positive output size {ho}x{wo}")
    ntap = kh * kw
    if offset.shape != (b, 2 * ntap, ho, wo):
        raise ValueError(f"offset shape {offset.shape} != {(b, 2 * ntap, ho, wo)}")
    if mask.shape != (b, ntap, ho, wo):
        raise ValueError(f"mask shape {mask.shape} != {(b, ntap, ho, wo)}")

    dtype = x.dtype
    npix = ho * wo
    ki, kj = np.divmod(np.arange(ntap), kw)
    oy = np.arange(ho) * stride - padding
    ox = np.arange(wo) * stride - padding
    # sample points ordered (pixel, tap) so samples reshape straight to (npix, K * c)
    base_y = (oy[:, None, None] + ki[None, None, :] * dilation).astype(dtype)  # (ho, 1, K)
    base_x = (ox[None, :, None] + kj[None, None, :] * dilation).astype(dtype)  # (1, wo, K)
    off = offset.data.reshape(b, ntap, 2, ho, wo).transpose(0, 3, 4, 1, 2)  # (b, ho, wo, K, 2)
    mk = mask.data.reshape(b, ntap, npix).transpose(0, 2, 1)[..., None]  # (b, npix, K, 1)
    xt = [x.data[n].reshape(c, h * w).T for n in range(b)]
    samplers, samples = [], []
    for n in range(b):
        s = _Sampler(base_y + off[n, ..., 0], base_x + off[n, ..., 1], h, w)
        samplers.append(s)
        samples.append((s.values(dtype) @ xt[n]).reshape(npix, ntap, c))
    # weight as (K * c, cout) to match the sample layout
    wr = weight.data.reshape(cout, cin, ntap).transpose(2, 1, 0).reshape(ntap * cin, cout)
    cols = [(samples[n] * mk[n]).reshape(npix, ntap * c) for n in range(b)]
    out = np.stack([cl @ wr for cl in cols])  # (b, npix, cout)
    if bias is not None:
        out += bias.data
    out = out.transpose(0, 2, 1).reshape(b, cout, ho, wo)

    def back(g):
        gt = g.reshape(b, cout, npix).transpose(0, 2, 1)  # (b, npix, cout)
        gx = goff = gmask = gw = gb = None
        if weight.requires_grad:
            gwr = sum(cols[n].T @ gt[n] for n in range(b))
            gw = gwr.reshape(ntap, cin, cout).transpose(2, 1, 0).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = gt.sum(axis=(0, 1))
        if x.requires_grad:
            gx = np.empty(x.shape, dtype=dtype)
        if offset.requires_grad:
            goff = np.empty((b, ho, wo, ntap, 2), dtype=dtype)
        if mask.requires_grad:
            gmask = np.empty((b, npix, ntap), dtype=dtype)
        for n in range(b):
            gcols = (gt[n] @ wr.T).reshape(npix, ntap, c)
            if gmask is not None:
                gmask[n] = (gcols * samples[n]).sum(axis=2)
            gs = (gcols * mk[n]).reshape(npix * ntap, c)
            s = samplers[n]
            if gx is not None:
                gx[n] = (s.values(dtype).T @ gs).T.reshape(c, h, w)
            if goff is not None:
                goff[n, ..., 0] = ((s.d_dy(dtype) @ xt[n]) * gs).sum(axis=1).reshape(ho, wo, ntap)
                goff[n, ..., 1] = ((s.d_dx(dtype) @ xt[n]) * gs).sum(axis=1).reshape(ho, wo, ntap)
        if goff is not None:
            goff = goff.transpose(0, 3, 4, 1, 2).reshape(offset.shape)
        if gmask is not None:
            gmask = gmask.transpose(0, 2, 1).reshape(mask.shape)
        return gx, goff, gmask, gw, gb

    parents = (x, offset, mask, weight) if bias is None else (x, offset, mask, weight, bias)
    return make_op("deform_conv2d", out, parents, back)
