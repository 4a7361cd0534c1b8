"""Central-difference gradient checking for every differentiable op.

Random test data is drawn on coarse binary grids and the step is a power of
two, so for ops that are multilinear in their inputs (conv, deformable conv
away from pixel boundaries, concat, upsampling) the finite differences are
free of rounding error and any mismatch is a real backward bug.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .deformable import bilinear_sample, deform_conv2d
from .metrics import LossConfig, loss_l1_tonemapped, mu_law

DEFAULT_EPS = 2.0**-17  # ~7.6e-6
DOUBLE_TOL = 1e-6


def _projection(rng: np.random.Generator, shape) -> np.ndarray:
    # strictly positive weights avoid cancellation in the projected sum
    return 0.5 + rng.integers(0, 9, size=shape) / 8.0


def analytic_grads(fn: Callable, inputs: Sequence[np.ndarray], proj: np.ndarray) -> List[np.ndarray]:
    tensors = [T.Tensor(a, requires_grad=True) for a in inputs]
    out = fn(*tensors)
    loss = T.sum(T.mul(out, T.Tensor(proj.astype(out.dtype))))
    T.backward(loss, wrt=tensors)
    return [t.grad for t in tensors]


def grad_check(
    fn: Callable,
    inputs: Sequence[np.ndarray],
    eps: float = DEFAULT_EPS,
    wrt: Optional[Sequence[int]] = None,
    seed: int = 0,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``fn`` maps input Tensors to an output Tensor; the scalar under test is
    the output projected onto fixed random positive weights. The relative
    error per element is |a - n| / max(|a|, |n|, 1e-8).
    """
    inputs = [np.array(a, dtype=np.float64) for a in inputs]
    with T.no_grad():
        base = fn(*[T.Tensor(a) for a in inputs]).data
    if not np.all(np.isfinite(base)):
        raise FloatingPointError("op produced non-finite output")
    proj = _projection(np.random.default_rng(seed), base.shape)
    analytic = analytic_grads(fn, inputs, proj)

    worst = 0.0
    for i in wrt if wrt is not None else range(len(inputs)):
        arr = inputs[i]
        flat = arr.reshape(-1)
        ana = analytic[i].reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            with T.no_grad():
                flat[j] = orig + eps
                fp = fn(*[T.Tensor(a) for a in inputs]).data.copy()
                flat[j] = orig - eps
                fm = fn(*[T.Tensor(a) for a in inputs]).data.copy()
            flat[j] = orig
            num = float(np.sum((fp - fm) * proj)) / (2 * eps)
            err = abs(ana[j] - num) / max(abs(ana[j]), abs(num), 1e-8)
            worst = max(worst, err)
    return worst


# ----------------------------------------------------------------- test cases


def grid(rng, shape, lo, hi, step):
    """Uniform draw from {lo, lo + step, ..., hi}."""
    n = int(round((hi - lo) / step))
    return lo + step * rng.integers(0, n + 1, size=shape).astype(np.float64)


def _nonzero(rng, shape, step=1 / 16):
    mag = grid(rng, shape, 0.25, 1.5, step)
    return np.where(rng.random(shape) < 0.5, -mag, mag)


def _fractional(rng, shape, span=2):
    """Integer part in [-span, span] plus a fraction kept off the integers."""
    return rng.integers(-span, span + 1, size=shape) + grid(rng, shape, 1 / 16, 15 / 16, 1 / 16)


@dataclass
class Case:
    op: str
    description: str
    fn: Callable
    inputs: List[np.ndarray]


def _case_conv2d(rng):
    b, cin, cout = rng.integers(1, 3), rng.integers(1, 4), rng.integers(1, 4)
    k = int(rng.choice([1, 3]))
    stride, dil = int(rng.integers(1, 3)), int(rng.integers(1, 3))
    pad = int(rng.integers(0, 3))
    h, w = (int(v) for v in rng.integers(4, 8, size=2) + dil * (k - 1))
    x = grid(rng, (b, cin, h, w), -1, 1, 1 / 16)
    wt = grid(rng, (cout, cin, k, k), -1, 1, 1 / 16)
    bias = grid(rng, (cout,), -1, 1, 1 / 16)
    fn = lambda x, w, b: T.conv2d(x, w, b, stride=stride, padding=pad, dilation=dil)  # noqa: E731
    desc = f"x={x.shape} w={wt.shape} s={stride} p={pad} d={dil}"
    return fn, [x, wt, bias], desc


def _unary_shape(rng):
    return tuple(int(v) for v in (rng.integers(1, 3), rng.integers(1, 4), rng.integers(2, 6), rng.integers(2, 6)))


def _case_relu(rng):
    s = _unary_shape(rng)
    return T.relu, [_nonzero(rng, s)], f"x={s}"


def _case_leaky_relu(rng):
    s = _unary_shape(rng)
    alpha = float(grid(rng, (), 0.0625, 0.5, 0.0625))
    return (lambda x: T.leaky_relu(x, alpha)), [_nonzero(rng, s)], f"x={s} alpha={alpha}"


def _case_sigmoid(rng):
    s = _unary_shape(rng)
    return T.sigmoid, [grid(rng, s, -4, 4, 1 / 16)], f"x={s}"


def _case_concat(rng):
    b, h, w = (int(v) for v in rng.integers(1, 4, size=3))
    chans = [int(c) for c in rng.integers(1, 4, size=rng.integers(1, 4))]
    parts = [grid(rng, (b, c, h, w), -1, 1, 1 / 16) for c in chans]
    return (lambda *p: T.concat_channels(p)), parts, f"channels={chans} hw={h}x{w}"


def _case_slice(rng):
    s = _unary_shape(rng)
    start = int(rng.integers(0, s[1]))
    stop = int(rng.integers(start + 1, s[1] + 1))
    return (lambda x: T.channel_slice(x, start, stop)), [grid(rng, s, -1, 1, 1 / 16)], f"x={s} [{start}:{stop}]"


def _case_add(rng):
    s = _unary_shape(rng)
    return T.add, [grid(rng, s, -1, 1, 1 / 16), grid(rng, s, -1, 1, 1 / 16)], f"x={s}"


def _case_mul(rng):
    s = _unary_shape(rng)
    return T.mul, [grid(rng, s, -1, 1, 1 / 16), grid(rng, s, -1, 1, 1 / 16)], f"x={s}"


def _case_upsample(align_corners):
    def make(rng):
        s = _unary_shape(rng)
        k = int(rng.integers(1, 4))
        fn = lambda x: T.upsample_bilinear(x, k, align_corners=align_corners)  # noqa: E731
        return fn, [grid(rng, s, -1, 1, 1 / 16)], f"x={s} scale={k}"

    return make


def _case_bilinear_sample(rng):
    b, c = int(rng.integers(1, 3)), int(rng.integers(1, 4))
    h, w = (int(v) for v in rng.integers(3, 7, size=2))
    ho, wo = (int(v) for v in rng.integers(2, 5, size=2))
    feat = grid(rng, (b, c, h, w), -1, 1, 1 / 16)
    frac = lambda: grid(rng, (b, ho, wo), 1 / 16, 15 / 16, 1 / 16)  # noqa: E731
    coords = np.stack([grid(rng, (b, ho, wo), -1, h, 1) + frac(), grid(rng, (b, ho, wo), -1, w, 1) + frac()], axis=1)
    return bilinear_sample, [feat, coords], f"feat={feat.shape} coords={coords.shape}"


def _case_deform_conv2d(rng):
    b, cin, cout = int(rng.integers(1, 3)), int(rng.integers(1, 3)), int(rng.integers(1, 3))
    k = int(rng.choice([1, 3]))
    stride, dil, pad = int(rng.integers(1, 3)), int(rng.integers(1, 3)), int(rng.integers(0, 2))
    h, w = (int(v) for v in rng.integers(3, 6, size=2) + dil * (k - 1))
    ho = T.conv_output_size(h, k, stride, pad, dil)
    wo = T.conv_output_size(w, k, stride, pad, dil)
    x = grid(rng, (b, cin, h, w), -1, 1, 1 / 16)
    off = _fractional(rng, (b, 2 * k * k, ho, wo), 2)
    mask = grid(rng, (b, k * k, ho, wo), 0, 1, 1 / 16)
    wt = grid(rng, (cout, cin, k, k), -1, 1, 1 / 16)
    bias = grid(rng, (cout,), -1, 1, 1 / 16)

    def fn(x, o, m, w, bb):
        return deform_conv2d(x, o, m, w, bb, stride=stride, padding=pad, dilation=dil)

    desc = f"x={x.shape} w={wt.shape} s={stride} p={pad} d={dil}"
    return fn, [x, off, mask, wt, bias], desc


def _case_mu_law(rng):
    s = _unary_shape(rng)
    return mu_law, [grid(rng, s, 0.02, 1.0, 1 / 1024)], f"x={s}"


def _case_loss(rng):
    s = _unary_shape(rng)
    gt = grid(rng, s, 0.02, 1.0, 1 / 1024)
    gap = grid(rng, s, 1 / 64, 0.25, 1 / 1024) * np.where(rng.random(s) < 0.5, -1, 1)
    pred = np.clip(gt + gap, 0.02, 1.0)
    pred = np.where(np.abs(pred - gt) < 1 / 64, gt + np.abs(gap), pred)
    cfg = LossConfig()
    return (lambda p, g: loss_l1_tonemapped(p, g, cfg)), [pred, gt], f"x={s}"


CASES: Dict[str, Callable] = {
    "conv2d": _case_conv2d,
    "relu": _case_relu,
    "leaky_relu": _case_leaky_relu,
    "sigmoid": _case_sigmoid,
    "concat": _case_concat,
    "channel_slice": _case_slice,
    "add": _case_add,
    "mul": _case_mul,
    "upsample": _case_upsample(True),
    "upsample_halfpixel": _case_upsample(False),
    "bilinear_sample": _case_bilinear_sample,
    "deform_conv2d": _case_deform_conv2d,
    "mu_law": _case_mu_law,
    "loss": _case_loss,
}


@dataclass
class CaseResult:
    op: str
    index: int
    description: str
    error: float
    passed: bool

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status}\t{self.op}\tcase {self.index:02d}\t{self.description}\trel_err={self.error:.3e}"


def run_suite(
    ops: Optional[Sequence[str]] = None,
    cases: int = 20,
    seed: int = 0,
    tol: float = DOUBLE_TOL,
) -> List[CaseResult]:
    """Run ``cases`` random double-precision checks for each named op."""
    names = list(CASES) if ops is None else list(ops)
    unknown = [n for n in names if n not in CASES]
    if unknown:
        raise KeyError(f"unknown op(s): {', '.join(unknown)}")
    results = []
    for name in names:
        rng = np.random.default_rng([seed, list(CASES).index(name)])
        for i in range(cases):
            fn, inputs, desc = CASES[name](rng)
            err = grad_check(fn, inputs, seed=seed + i)
            results.append(CaseResult(name, i, desc, err, err < tol))
    return results


SINGLE_TOL = 1e-4


def single_precision_error(fn: Callable, inputs: Sequence[np.ndarray], seed: int = 0) -> float:
    """Max relative error of float32 gradients against float64 gradients.

    Finite differences are meaningless at float32 resolution, so the double
    backward (itself checked against central differences) is the reference.
    """
    hi = [np.array(a, dtype=np.float64) for a in inputs]
    lo = [a.astype(np.float32) for a in hi]
    with T.no_grad():
        shape = fn(*[T.Tensor(a) for a in hi]).shape
    proj = _projection(np.random.default_rng(seed), shape)
    ref = analytic_grads(fn, hi, proj)
    got = analytic_grads(fn, lo, proj)
    worst = 0.0
    for a, b in zip(got, ref):
        if a.dtype != np.float32:
            raise TypeError(f"single-precision backward produced {a.dtype}")
        scale = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)
        worst = max(worst, float(np.max(np.abs(a - b) / scale)))
    return worst


def sample_case(name: str, seed: int = 0) -> Tuple[Callable, List[np.ndarray], str]:
    return CASES[name](np.random.default_rng(seed))
