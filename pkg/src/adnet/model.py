"""The ADNet graph and its three ablation variants.

All four variants take the same inputs (three LDR frames and their
gamma-corrected counterparts, middle frame as reference) and return a
3-channel HDR estimate in (0, 1).

* ``baseline``: per-frame LDR/gamma concat, attention on non-reference
  frames, DRDB fusion.
* ``deform_single``: same front end, single-scale deformable alignment in
  place of attention.
* ``pcd_only``: pyramid, cascading and deformable alignment in place of
  attention.
* ``full``: LDR frames through the attention branch, gamma-corrected frames
  through the PCD branch, both concatenated before fusion.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .deformable import deform_conv2d
from .tensor import Tensor

VARIANTS = ("baseline", "deform_single", "pcd_only", "full")
TAPS = 9  # 3x3 deformable kernels
LRELU_SLOPE = 0.1
# input stack layout used by predict/tiling/TTA: 3 LDR frames then 3 gamma-corrected
INPUT_CHANNELS = 18


@dataclass(frozen=True)
class ModelConfig:
    variant: str = "full"
    base_channels: int = 64
    drdb_count: int = 3
    drdb_growth: int = 32
    drdb_layers: int = 3
    pyramid_levels: int = 3
    dilation: int = 2
    frame_count: int = 3
    reference_index: int = 1

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.frame_count != 3 or self.reference_index != 1:
            raise ValueError("only three frames with the middle one as reference are supported")
        for name in ("base_channels", "drdb_count", "drdb_growth", "drdb_layers", "pyramid_levels", "dilation"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    @property
    def has_attention(self) -> bool:
        return self.variant in ("baseline", "full")

    @property
    def alignment(self) -> Optional[str]:
        return {"deform_single": "single", "pcd_only": "pcd", "full": "pcd"}.get(self.variant)

    @property
    def align_levels(self) -> int:
        return self.pyramid_levels if self.alignment == "pcd" else 1

    @property
    def cascade(self) -> bool:
        return self.alignment == "pcd"

    @property
    def size_multiple(self) -> int:
        return 2 ** (self.align_levels - 1) if self.alignment else 1

    def check_input_size(self, h: int, w: int):
        m = self.size_multiple
        if h % m or w % m:
            raise ValueError(f"input size {h}x{w} must be divisible by {m} for variant {self.variant}")

    def to_dict(self) -> dict:
        return asdict(self)


class ModelWeights(dict):
    """Ordered map from dotted parameter name to Tensor."""

    def num_parameters(self) -> int:
        return int(sum(t.data.size for t in self.values()))

    def arrays(self) -> Dict[str, np.ndarray]:
        return {k: t.data for k, t in self.items()}

    def zero_grad(self):
        for t in self.values():
            t.grad = None

    @classmethod
    def from_arrays(cls, arrays: Dict[str, np.ndarray], requires_grad: bool = True) -> "ModelWeights":
        return cls((k, Tensor(np.array(v), requires_grad=requires_grad)) for k, v in arrays.items())

    def astype(self, dtype) -> "ModelWeights":
        return ModelWeights((k, Tensor(t.data.astype(dtype), requires_grad=t.requires_grad)) for k, t in self.items())


# ------------------------------------------------------------ parameter layout


def parameter_shapes(cfg: ModelConfig) -> Dict[str, Tuple[int, ...]]:
    c = cfg.base_channels
    shapes: Dict[str, Tuple[int, ...]] = {}

    def conv(name, cout, cin, k=3):
        shapes[f"{name}.weight"] = (cout, cin, k, k)
        shapes[f"{name}.bias"] = (cout,)

    if cfg.variant == "full":
        conv("ldr_feat", c, 3)
        conv("hdr_feat", c, 3)
    else:
        conv("feat", c, 6)
    if cfg.has_attention:
        for i in (1, 3):
            conv(f"att{i}.conv1", 2 * c, 2 * c)
            conv(f"att{i}.conv2", c, 2 * c)
    if cfg.alignment:
        levels = cfg.align_levels
        for lv in range(2, levels + 1):
            conv(f"pyramid.l{lv}.down", c, c)
            conv(f"pyramid.l{lv}.conv", c, c)
        for lv in range(levels, 0, -1):
            p = f"align.l{lv}"
            conv(f"{p}.offset_conv1", c, 2 * c)
            if lv == levels:
                conv(f"{p}.offset_conv2", c, c)
            else:
                conv(f"{p}.offset_conv2", c, 2 * c)
                conv(f"{p}.offset_conv3", c, c)
            conv(f"{p}.dcn.offset_mask", 3 * TAPS, c)
            conv(f"{p}.dcn", c, c)
            if lv < levels:
                conv(f"{p}.feat_conv", c, 2 * c)
        if cfg.cascade:
            conv("align.cascade.offset_conv1", c, 2 * c)
            conv("align.cascade.offset_conv2", c, c)
            conv("align.cascade.dcn.offset_mask", 3 * TAPS, c)
            conv("align.cascade.dcn", c, c)
    n_feats = 6 if cfg.variant == "full" else 3
    conv("fusion.conv_in", c, n_feats * c)
    for k in range(cfg.drdb_count):
        ch = c
        for j in range(cfg.drdb_layers):
            conv(f"fusion.drdb{k}.dense{j}", cfg.drdb_growth, ch)
            ch += cfg.drdb_growth
        conv(f"fusion.drdb{k}.fuse", c, ch, 1)
    conv("fusion.gff_1x1", c, cfg.drdb_count * c, 1)
    conv("fusion.gff_3x3", c, c)
    conv("fusion.conv_out", 3, c)
    return shapes


def count_parameters(cfg: ModelConfig) -> int:
    return int(sum(math.prod(s) for s in parameter_shapes(cfg).values()))


def init_weights(
    cfg: ModelConfig,
    seed: int = 0,
    dtype=np.float32,
    zero: Iterable[str] = (),
) -> ModelWeights:
    """Uniform(+-1/sqrt(fan_in)) init; offset/mask predictors start at zero.

    Names containing any substring in ``zero`` are zero-initialised too.
    """
    rng = np.random.default_rng(seed)
    zero = tuple(zero) + (".offset_mask.",)
    weights = ModelWeights()
    shapes = parameter_shapes(cfg)
    for name, shape in shapes.items():
        wshape = shape if name.endswith(".weight") else shapes[name[: -len("bias")] + "weight"]
        bound = 1.0 / math.sqrt(math.prod(wshape[1:]))
        arr = rng.uniform(-bound, bound, size=shape)
        if any(z in name for z in zero):
            arr = np.zeros(shape)
        weights[name] = Tensor(arr.astype(dtype), requires_grad=True)
    return weights


# ---------------------------------------------------------------- components


def _conv(w: ModelWeights, name: str, x: Tensor, stride: int = 1, dilation: int = 1) -> Tensor:
    weight = w[f"{name}.weight"]
    pad = dilation * (weight.shape[2] - 1) // 2
    return T.conv2d(x, weight, w[f"{name}.bias"], stride=stride, padding=pad, dilation=dilation)


def _lrelu(x: Tensor) -> Tensor:
    return T.leaky_relu(x, LRELU_SLOPE)


def attention_module(feat_i: Tensor, feat_ref: Tensor, w: ModelWeights, prefix: str) -> Tensor:
    """Per-pixel, per-channel gate in (0, 1) for a non-reference frame."""
    if feat_i.shape != feat_ref.shape:
        raise ValueError(f"attention: shape mismatch {feat_i.shape} vs {feat_ref.shape}")
    x = T.concat_channels([feat_i, feat_ref])
    x = T.relu(_conv(w, f"{prefix}.conv1", x))
    return T.sigmoid(_conv(w, f"{prefix}.conv2", x))


def apply_attention(feat: Tensor, amap: Tensor) -> Tensor:
    return T.mul(feat, amap)


def feature_pyramid(feat: Tensor, w: ModelWeights, levels: int) -> List[Tensor]:
    pyr = [feat]
    for lv in range(2, levels + 1):
        x = _lrelu(_conv(w, f"pyramid.l{lv}.down", pyr[-1], stride=2))
        pyr.append(_lrelu(_conv(w, f"pyramid.l{lv}.conv", x)))
    return pyr


def dcn_pack(w: ModelWeights, prefix: str, x: Tensor, offset_feat: Tensor) -> Tensor:
    """Deformable 3x3 conv whose offsets and masks are predicted from ``offset_feat``."""
    om = _conv(w, f"{prefix}.offset_mask", offset_feat)
    offset = T.channel_slice(om, 0, 2 * TAPS)
    mask = T.sigmoid(T.channel_slice(om, 2 * TAPS, 3 * TAPS))
    return deform_conv2d(x, offset, mask, w[f"{prefix}.weight"], w[f"{prefix}.bias"], padding=1)


def _upsample2(x: Tensor) -> Tensor:
    # half-pixel sampling keeps the network equivariant to even shifts
    return T.upsample_bilinear(x, 2, align_corners=False)


def pcd_align(
    nbr: Sequence[Tensor],
    ref: Sequence[Tensor],
    w: ModelWeights,
    levels: int,
    cascade: bool = True,
) -> Tensor:
    """Coarse-to-fine deformable alignment of ``nbr`` onto ``ref``.

    Both arguments are feature pyramids, finest level first.
    """
    if len(nbr) < levels or len(ref) < levels:
        raise ValueError(f"pcd_align needs {levels} pyramid levels")
    up_off = up_feat = None
    feat = None
    for lv in range(levels, 0, -1):
        p = f"align.l{lv}"
        off = _lrelu(_conv(w, f"{p}.offset_conv1", T.concat_channels([nbr[lv - 1], ref[lv - 1]])))
        if lv == levels:
            off = _lrelu(_conv(w, f"{p}.offset_conv2", off))
        else:
            off = _lrelu(_conv(w, f"{p}.offset_conv2", T.concat_channels([off, up_off])))
            off = _lrelu(_conv(w, f"{p}.offset_conv3", off))
        feat = dcn_pack(w, f"{p}.dcn", nbr[lv - 1], off)
        if lv < levels:
            feat = _conv(w, f"{p}.feat_conv", T.concat_channels([feat, up_feat]))
        if lv > 1 or not cascade:
            feat = _lrelu(feat)
        if lv > 1:
            up_off = T.scale(_upsample2(off), 2.0)
            up_feat = _upsample2(feat)
    if cascade:
        off = _lrelu(_conv(w, "align.cascade.offset_conv1", T.concat_channels([feat, ref[0]])))
        off = _lrelu(_conv(w, "align.cascade.offset_conv2", off))
        feat = _lrelu(dcn_pack(w, "align.cascade.dcn", feat, off))
    return feat


def deform_align_single(feat_i: Tensor, feat_ref: Tensor, w: ModelWeights) -> Tensor:
    if feat_i.shape != feat_ref.shape:
        raise ValueError(f"alignment: shape mismatch {feat_i.shape} vs {feat_ref.shape}")
    return pcd_align([feat_i], [feat_ref], w, levels=1, cascade=False)


def drdb_forward(x: Tensor, w: ModelWeights, prefix: str, layers: int, dilation: int) -> Tensor:
    """Dilated residual dense block with a local skip."""
    cur = x
    for j in range(layers):
        y = T.relu(_conv(w, f"{prefix}.dense{j}", cur, dilation=dilation))
        cur = T.concat_channels([cur, y])
    return T.add(_conv(w, f"{prefix}.fuse", cur), x)


def fusion(feats: Sequence[Tensor], ref_feat: Tensor, w: ModelWeights, cfg: ModelConfig) -> Tensor:
    x = _conv(w, "fusion.conv_in", T.concat_channels(feats))
    outs = []
    for k in range(cfg.drdb_count):
        x = drdb_forward(x, w, f"fusion.drdb{k}", cfg.drdb_layers, cfg.dilation)
        outs.append(x)
    x = _conv(w, "fusion.gff_1x1", T.concat_channels(outs))
    x = T.add(_conv(w, "fusion.gff_3x3", x), ref_feat)
    return T.sigmoid(_conv(w, "fusion.conv_out", x))


def adnet_forward(
    ldr: Sequence[Tensor],
    hdr: Sequence[Tensor],
    cfg: ModelConfig,
    w: ModelWeights,
    return_attention: bool = False,
):
    """Reconstruct the HDR image from three LDR and three gamma-corrected frames.

    Returns the (b, 3, H, W) estimate, plus the two attention maps when
    ``return_attention`` is set (empty list for variants without attention).
    """
    if len(ldr) != 3 or len(hdr) != 3:
        raise ValueError("expected three LDR and three gamma-corrected frames")
    shape = ldr[0].shape
    for t in list(ldr) + list(hdr):
        if t.ndim != 4 or t.shape != shape or shape[1] != 3:
            raise ValueError(f"all inputs must share shape (b, 3, H, W); got {t.shape} vs {shape}")
    cfg.check_input_size(shape[2], shape[3])

    maps: List[Tensor] = []
    if cfg.variant == "full":
        lf = [_lrelu(_conv(w, "ldr_feat", x)) for x in ldr]
        hf = [_lrelu(_conv(w, "hdr_feat", x)) for x in hdr]
    else:
        lf = hf = [_lrelu(_conv(w, "feat", T.concat_channels([a, b]))) for a, b in zip(ldr, hdr)]

    feats: List[Tensor] = []
    if cfg.has_attention:
        maps = [attention_module(lf[0], lf[1], w, "att1"), attention_module(lf[2], lf[1], w, "att3")]
        feats += [apply_attention(lf[0], maps[0]), lf[1], apply_attention(lf[2], maps[1])]
    if cfg.alignment:
        levels = cfg.align_levels
        pyr = [feature_pyramid(f, w, levels) for f in hf]
        aligned = [pcd_align(pyr[i], pyr[1], w, levels, cfg.cascade) for i in (0, 2)]
        feats += [aligned[0], hf[1], aligned[1]]

    out = fusion(feats, hf[1], w, cfg)
    return (out, maps) if return_attention else out


def export_attention_heatmap(maps: Sequence[Tensor]) -> List[np.ndarray]:
    """Channel-mean of each attention map: one (b, H, W) array per non-reference frame."""
    if not maps:
        raise ValueError("this variant has no attention branch")
    return [np.clip(m.data.mean(axis=1), 0.0, 1.0) for m in maps]


# ------------------------------------------------------------ receptive field


def receptive_field_radius(cfg: ModelConfig, offset_margin: float = 0.0) -> int:
    """Chebyshev radius (full-resolution pixels) an output pixel can see.

    Deformable taps are counted at their regular grid position widened by
    ``offset_margin`` pixels of their own pyramid level; learned offsets
    beyond that margin are not covered.
    """

    def conv(r, s=1.0, dil=1):
        return r + s * dil  # 3x3 kernel at scale s

    def dcn(r_x, r_off, s):
        return max(conv(r_off, s), r_x + s * (1 + offset_margin))

    feat = conv(0)
    branch = [feat]
    if cfg.has_attention:
        branch.append(conv(conv(feat)))
    if cfg.alignment:
        levels = cfg.align_levels
        pyr = [(feat, 1.0)]
        r, s = feat, 1.0
        for _ in range(2, levels + 1):
            r = r + s  # stride-2 conv reaches one fine step beyond its centre
            s *= 2
            r = conv(r, s)
            pyr.append((r, s))
        up_off = up_feat = 0.0
        for lv in range(levels, 0, -1):
            r_n, s = pyr[lv - 1]
            off = conv(r_n, s)
            if lv == levels:
                off = conv(off, s)
            else:
                off = conv(conv(max(off, up_off), s), s)
            out = dcn(r_n, off, s)
            if lv < levels:
                out = conv(max(out, up_feat), s)
            if lv > 1:
                # half-pixel x2 upsampling reads coarse neighbours up to one coarse step away
                up_off, up_feat = off + s, out + s
        if cfg.cascade:
            off = conv(conv(max(out, feat)))
            out = dcn(out, off, 1.0)
        branch.append(out)
    r = conv(max(branch))
    r += cfg.drdb_count * cfg.drdb_layers * cfg.dilation
    r = conv(r)  # gff_3x3
    r = conv(r)  # conv_out
    return int(math.ceil(r))


# -------------------------------------------------------------------- wrapper


def split_inputs(x: np.ndarray) -> Tuple[List[Tensor], List[Tensor]]:
    if x.ndim != 4 or x.shape[1] != INPUT_CHANNELS:
        raise ValueError(f"expected stacked input (b, {INPUT_CHANNELS}, H, W), got {x.shape}")
    frames = [Tensor(x[:, 3 * i : 3 * i + 3]) for i in range(6)]
    return frames[:3], frames[3:]


def stack_inputs(ldr: Sequence[np.ndarray], hdr: Sequence[np.ndarray]) -> np.ndarray:
    return np.concatenate(list(ldr) + list(hdr), axis=1)


class ADNet:
    """Config plus weights, callable on stacked (b, 18, H, W) inputs."""

    def __init__(self, config: ModelConfig = ModelConfig(), weights: Optional[ModelWeights] = None, seed: int = 0):
        self.config = config
        self.weights = weights if weights is not None else init_weights(config, seed)
        expected = parameter_shapes(config)
        got = {k: t.shape for k, t in self.weights.items()}
        if got != expected:
            raise ValueError("weights do not match the parameter layout of this config")

    @property
    def dtype(self):
        return next(iter(self.weights.values())).dtype

    def num_parameters(self) -> int:
        return self.weights.num_parameters()

    def forward(self, ldr, hdr, return_attention=False):
        return adnet_forward(ldr, hdr, self.config, self.weights, return_attention)

    def predict(self, x: np.ndarray) -> np.ndarray:
        ldr, hdr = split_inputs(np.asarray(x, dtype=self.dtype))
        with T.no_grad():
            return self.forward(ldr, hdr).data

    __call__ = predict

    def attention_maps(self, x: np.ndarray) -> List[np.ndarray]:
        if not self.config.has_attention:
            raise ValueError(f"variant {self.config.variant} has no attention branch")
        ldr, hdr = split_inputs(np.asarray(x, dtype=self.dtype))
        with T.no_grad():
            _, maps = self.forward(ldr, hdr, return_attention=True)
        return export_attention_heatmap(maps)
