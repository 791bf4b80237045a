"""End-to-end reconstruction: backbone/head builders, inference, regression.

The backbone is an inverted-residual (expand -> depthwise -> gate -> project)
stack shared between the stereo views; the head is a 3-D hourglass over the
BEV feature volume ending in a single-channel score volume; elevation is the
per-cell soft-argmax of the scores over the elevation bins.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, PipelineError, ShapeError
from .geometry import StereoRig, VoxelGrid, build_feature_volume, elevation_bins
from .graph import LayerSpec, NetworkGraph, execute, init_weights, validate_graph
from .tensor import PRECISION_FULL, PRECISION_HALF, CostMeter, Tensor
from .tensor import attention_gate  # noqa: F401  (public pipeline operation)

PRECISION_MIXED = "mixed"


@dataclass
class StageConfig:
    blocks: int
    channels: int
    stride: int
    expand_ratio: int
    use_se: bool


@dataclass
class BackboneConfig:
    stem_channels: int = 16
    stem_stride: int = 2
    stages: list = field(default_factory=lambda: [
        StageConfig(2, 24, 2, 4, True),
        StageConfig(2, 40, 1, 4, True),
        StageConfig(3, 64, 1, 4, True),
    ])
    feat_stride: int = 4

    def validate(self):
        if self.stem_channels < 1 or self.stem_stride < 1:
            raise ConfigError("stem channels/stride must be positive")
        prod = self.stem_stride
        for st in self.stages:
            if st.blocks < 1 or st.channels < 1 or st.stride < 1 or st.expand_ratio < 1:
                raise ConfigError(f"invalid stage config {st}")
            prod *= st.stride
        if prod != self.feat_stride:
            raise ConfigError(
                f"feat_stride={self.feat_stride} but stem*stage strides give {prod}"
            )

    @property
    def out_channels(self):
        return self.stages[-1].channels


@dataclass
class HeadConfig:
    base_channels: int = 16
    hourglass_levels: int = 2
    use_dynamic_attention: bool = True
    precision: str = PRECISION_MIXED

    def validate(self):
        if self.hourglass_levels < 1:
            raise ConfigError("hourglass_levels must be >= 1")
        if self.base_channels < 1:
            raise ConfigError("base_channels must be >= 1")
        if self.precision not in (PRECISION_FULL, PRECISION_MIXED):
            raise ConfigError(f"unknown precision {self.precision!r}")


@dataclass
class ElevationMap:
    values: np.ndarray  # [ny, nx] centimetres
    valid: np.ndarray   # bool [ny, nx]


def _conv_bn_act(layers, lid, kind, src, cin, cout, k, stride, pad, groups=1, act="relu"):
    attrs = {"cin": cin, "cout": cout, "k": k, "stride": stride, "pad": pad, "bias": 0}
    if kind == "conv2d":
        attrs["groups"] = groups
    layers.append(LayerSpec(lid, kind, attrs, [src]))
    layers.append(LayerSpec(f"{lid}_bn", "affine", {"channels": cout}, [lid]))
    if act is None:
        return f"{lid}_bn"
    layers.append(LayerSpec(f"{lid}_act", "activation", {"fn": act}, [f"{lid}_bn"]))
    return f"{lid}_act"


def build_backbone(cfg: BackboneConfig, seed: int = 0) -> NetworkGraph:
    """Stem conv followed by inverted-residual stages; weights seeded."""
    cfg.validate()
    layers = [LayerSpec("img", "input", {"channels": 3}, [])]
    # strided convolutions use kernel 4 so spatial dims halve exactly
    stem_k = 4 if cfg.stem_stride == 2 else 3
    tip = _conv_bn_act(layers, "stem", "conv2d", "img", 3, cfg.stem_channels,
                       stem_k, cfg.stem_stride, 1)
    ch = cfg.stem_channels
    for si, st in enumerate(cfg.stages, start=1):
        for bi in range(1, st.blocks + 1):
            stride = st.stride if bi == 1 else 1
            prefix = f"s{si}b{bi}"
            block_in = tip
            in_ch = ch
            mid = in_ch * st.expand_ratio
            if st.expand_ratio > 1:
                tip = _conv_bn_act(layers, f"{prefix}_expand", "conv2d", tip,
                                   in_ch, mid, 1, 1, 0)
            tip = _conv_bn_act(layers, f"{prefix}_dw", "conv2d", tip,
                               mid, mid, 4 if stride == 2 else 3, stride, 1,
                               groups=mid)
            if st.use_se:
                layers.append(LayerSpec(f"{prefix}_se", "attention_gate",
                                        {"channels": mid, "hidden": max(1, mid // 4)},
                                        [tip]))
                tip = f"{prefix}_se"
            tip = _conv_bn_act(layers, f"{prefix}_proj", "conv2d", tip,
                               mid, st.channels, 1, 1, 0, act=None)
            if stride == 1 and in_ch == st.channels:
                layers.append(LayerSpec(f"{prefix}_add", "add", {}, [block_in, tip]))
                tip = f"{prefix}_add"
            ch = st.channels
    layers.append(LayerSpec("out", "output", {}, [tip]))
    g = NetworkGraph(layers, metadata={
        "kind": "backbone",
        "feat_stride": str(cfg.feat_stride),
        "out_channels": str(cfg.out_channels),
    })
    init_weights(g, seed=seed)
    problems = validate_graph(g)
    if problems:
        raise ConfigError("backbone failed validation: " + "; ".join(problems))
    return g


def build_head(cfg: HeadConfig, ne: int, in_channels: int, seed: int = 1) -> NetworkGraph:
    """3-D hourglass over the feature volume producing a 1-channel score volume."""
    cfg.validate()
    if ne % (2 ** cfg.hourglass_levels) != 0:
        raise ConfigError(
            f"ne={ne} not divisible by 2^{cfg.hourglass_levels}; "
            "padding is rejected, pick a conforming bin count"
        )
    layers = [LayerSpec("vol", "input", {"channels": in_channels}, [])]
    base = cfg.base_channels
    tip = _conv_bn_act(layers, "pre", "conv3d", "vol", in_channels, base, 1, 1, 0)
    skips = [tip]
    ch = base
    for lvl in range(1, cfg.hourglass_levels + 1):
        nxt = base * (2 ** lvl)
        tip = _conv_bn_act(layers, f"enc{lvl}_down", "conv3d", tip, ch, nxt, 4, 2, 1)
        tip = _conv_bn_act(layers, f"enc{lvl}_ref", "conv3d", tip, nxt, nxt, 3, 1, 1)
        skips.append(tip)
        ch = nxt
    if cfg.use_dynamic_attention:
        layers.append(LayerSpec("bottleneck_gate", "attention_gate",
                                {"channels": ch, "hidden": max(1, ch // 4)}, [tip]))
        tip = "bottleneck_gate"
    for lvl in range(cfg.hourglass_levels, 0, -1):
        nxt = base * (2 ** (lvl - 1))
        lid = f"dec{lvl}_up"
        layers.append(LayerSpec(lid, "deconv3d", {"cin": ch, "cout": nxt, "bias": 0}, [tip]))
        layers.append(LayerSpec(f"dec{lvl}_skip", "add", {}, [lid, skips[lvl - 1]]))
        layers.append(LayerSpec(f"dec{lvl}_bn", "affine", {"channels": nxt}, [f"dec{lvl}_skip"]))
        layers.append(LayerSpec(f"dec{lvl}_act", "activation", {"fn": "relu"}, [f"dec{lvl}_bn"]))
        tip = f"dec{lvl}_act"
        ch = nxt
    layers.append(LayerSpec("score", "conv3d",
                            {"cin": ch, "cout": 1, "k": 3, "stride": 1, "pad": 1, "bias": 1},
                            [tip]))
    layers.append(LayerSpec("out", "output", {}, ["score"]))
    g = NetworkGraph(layers, metadata={
        "kind": "head",
        "in_channels": str(in_channels),
        "base_channels": str(base),
        "levels": str(cfg.hourglass_levels),
        "attention": str(int(cfg.use_dynamic_attention)),
        "precision": cfg.precision,
    })
    init_weights(g, seed=seed)
    problems = validate_graph(g)
    if problems:
        raise ConfigError("head failed validation: " + "; ".join(problems))
    return g


def extract_features(img: Tensor, backbone: NetworkGraph,
                     meter: CostMeter | None = None) -> Tensor:
    """Run one view through the backbone: [1,3,H,W] -> [C,h,w]."""
    stride = int(backbone.metadata.get("feat_stride", "1"))
    if img.data.ndim != 4 or img.shape[0] != 1:
        raise ShapeError(f"expected [1,3,H,W] image, got {img.shape}")
    H, W = img.shape[2], img.shape[3]
    if H % stride or W % stride:
        raise ShapeError(f"image {H}x{W} not divisible by feat_stride={stride}")
    outs, m = execute(backbone, {"img": img})
    if meter is not None:
        for kind, fl in m.per_op_breakdown.items():
            meter.add(kind, fl)
    (out,) = outs.values()
    return Tensor(out.data[0])


def fused_softargmax(scores: Tensor, bins: np.ndarray,
                     valid: np.ndarray | None = None) -> ElevationMap:
    """Per-cell expectation of bin centers under softmax(scores), in one pass.

    Streams over the bin axis keeping a running (max, weighted numerator,
    normalizer) triple, so the normalized probability volume is never
    materialized.  Mathematically identical to softmax-then-expectation.
    """
    if scores.data.ndim != 3:
        raise ShapeError(f"scores must be [ne,ny,nx], got {scores.shape}")
    bins = np.asarray(bins, dtype=np.float64)
    ne = scores.shape[0]
    if bins.shape != (ne,):
        raise ShapeError(f"bins length {bins.shape} != ne={ne}")
    if np.any(np.diff(bins) < 0):
        raise ShapeError("bins must be sorted ascending")
    s = scores.data
    m = s[0].copy()
    num = np.zeros_like(m)
    den = np.zeros_like(m)
    for k in range(ne):
        m_new = np.maximum(m, s[k])
        rescale = np.exp(m - m_new)
        w = np.exp(s[k] - m_new)
        num = num * rescale + w * bins[k]
        den = den * rescale + w
        m = m_new
    values_cm = 100.0 * (num / den)
    if valid is None:
        valid = np.ones(values_cm.shape, dtype=bool)
    return ElevationMap(values_cm, valid.copy())


@dataclass
class PipelineModel:
    backbone: NetworkGraph
    head: NetworkGraph

    @property
    def feat_stride(self) -> int:
        return int(self.backbone.metadata["feat_stride"])


def predict_elevation(left: Tensor, right: Tensor, model: PipelineModel,
                      rig: StereoRig, grid: VoxelGrid,
                      precision: str = PRECISION_FULL):
    """Full forward pass: features -> BEV volume -> head -> soft-argmax.

    Returns ``(ElevationMap, CostMeter, stage_ms)``.  With ``mixed``
    precision the head runs half-emulated; regression stays full precision.
    A BEV cell is valid only when its entire elevation column is visible in
    both views.
    """
    if precision not in (PRECISION_FULL, PRECISION_MIXED):
        raise PipelineError("setup", f"unknown precision {precision!r}")
    meter = CostMeter()
    stage_ms = {}

    t0 = time.perf_counter()
    try:
        feat_l = extract_features(left, model.backbone, meter)
        feat_r = extract_features(right, model.backbone, meter)
    except Exception as exc:
        raise PipelineError("backbone", exc) from exc
    stage_ms["backbone"] = (time.perf_counter() - t0) * 1000.0

    t0 = time.perf_counter()
    try:
        fv = build_feature_volume(feat_l, feat_r, grid, rig, model.feat_stride)
    except Exception as exc:
        raise PipelineError("volume", exc) from exc
    stage_ms["volume"] = (time.perf_counter() - t0) * 1000.0

    t0 = time.perf_counter()
    try:
        feed = Tensor(fv.values.data[None])
        head_precision = PRECISION_HALF if precision == PRECISION_MIXED else PRECISION_FULL
        outs, head_meter = execute(model.head, {"vol": feed}, precision=head_precision)
        for kind, fl in head_meter.per_op_breakdown.items():
            meter.add(kind, fl)
        (score_vol,) = outs.values()
    except Exception as exc:
        raise PipelineError("head", exc) from exc
    stage_ms["head"] = (time.perf_counter() - t0) * 1000.0

    t0 = time.perf_counter()
    try:
        bins = elevation_bins(grid)
        valid = fv.visibility.all(axis=0)
        emap = fused_softargmax(Tensor(score_vol.data[0, 0]), bins, valid)
    except Exception as exc:
        raise PipelineError("regression", exc) from exc
    stage_ms["regression"] = (time.perf_counter() - t0) * 1000.0
    return emap, meter, stage_ms
