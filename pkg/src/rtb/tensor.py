"""Dense tensor type, FLOP metering, and the numerical kernels everything else builds on.

All kernels compute in float64 regardless of the precision tag; reduced
precision is modelled by explicitly rounding values through binary16
(:func:`quantize_half`), never by narrow arithmetic.

Channel reductions are performed as a sequential left-fold
(``np.add.reduce`` over a leading axis, or an explicit loop).  BLAS matrix
products only ever reduce over kernel-tap axes and are batched over channel
axes.  Constraint: removing a channel whose contribution is exactly zero
must leave every surviving output value bit-identical, so no reduction may
re-associate when a channel axis shrinks.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError

PRECISION_FULL = "full"
PRECISION_HALF = "half-emulated"

# Elements allowed in one [cin, cout, P] intermediate before chunking over P.
_CHUNK_BUDGET = 1 << 23


class Tensor:
    """N-dimensional float64 array with a precision tag.

    Data is always row-major and finite unless produced by half emulation,
    which may overflow to infinity.
    """

    __slots__ = ("data", "precision")

    def __init__(self, data, precision: str = PRECISION_FULL):
        arr = np.ascontiguousarray(data, dtype=np.float64)
        self.data = arr
        self.precision = precision

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy(), self.precision)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, precision={self.precision!r})"


class CostMeter:
    """Monotone FLOP counter with a per-operation-kind breakdown."""

    def __init__(self):
        self.flops = 0
        self.per_op_breakdown = {}

    def add(self, kind: str, flops: int):
        if flops < 0:
            raise ValueError("flop increments must be non-negative")
        self.flops += flops
        self.per_op_breakdown[kind] = self.per_op_breakdown.get(kind, 0) + flops

    def reset(self):
        self.flops = 0
        self.per_op_breakdown = {}


def _fold_channels(stacked: np.ndarray) -> np.ndarray:
    # Sequential left-fold over axis 0.  np.add.reduce over a leading axis
    # accumulates slice by slice, which keeps surviving sums bit-identical
    # when exactly-zero channel contributions are removed.
    return np.add.reduce(stacked, axis=0)


def _conv_core(cols: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Reduce [cin, P, K] patches against [cout, cin, K] filters -> [cout, P].

    The BLAS product only contracts the tap axis K; channel axes stay on
    batch/output dimensions so channel slicing cannot change rounding.
    """
    cin, P, K = cols.shape
    cout = w.shape[0]
    out = np.empty((cout, P), dtype=np.float64)
    if K == 1:
        wv = np.ascontiguousarray(w[:, :, 0].T)[:, :, None]  # [cin, cout, 1]
        chunk = max(1, _CHUNK_BUDGET // max(1, cin * cout))
        for p0 in range(0, P, chunk):
            p1 = min(p0 + chunk, P)
            prod = cols[:, None, p0:p1, 0] * wv  # [cin, cout, pc]
            out[:, p0:p1] = _fold_channels(prod)
        return out
    wv = np.ascontiguousarray(w.transpose(1, 0, 2))[:, :, :, None]  # [cin, cout, K, 1]
    chunk = max(1, _CHUNK_BUDGET // max(1, cin * cout))
    for p0 in range(0, P, chunk):
        p1 = min(p0 + chunk, P)
        prod = np.matmul(cols[:, None, p0:p1, :], wv)  # [cin, cout, pc, 1]
        out[:, p0:p1] = _fold_channels(prod[..., 0])
    return out


def _pad_spatial(x: np.ndarray, pad: int, ndim_spatial: int) -> np.ndarray:
    if pad == 0:
        return x
    widths = [(0, 0)] * (x.ndim - ndim_spatial) + [(pad, pad)] * ndim_spatial
    return np.pad(x, widths)


def _out_dim(size: int, k: int, stride: int, pad: int) -> int:
    num = size + 2 * pad - k
    if num < 0 or num % stride != 0:
        raise ShapeError(
            f"non-integral output size for dim {size} with kernel {k}, "
            f"stride {stride}, pad {pad}"
        )
    return num // stride + 1


def conv2d(x: Tensor, w: Tensor, bias: Tensor | None = None, stride: int = 1,
           pad: int = 0, groups: int = 1, meter: CostMeter | None = None) -> Tensor:
    """Cross-correlate [N,Cin,H,W] with [Cout,Cin/groups,kh,kw] filters."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input/weight, got {x.shape}/{w.shape}")
    N, Cin, H, W = x.shape
    Cout, Cg, kh, kw = w.shape
    if stride < 1 or pad < 0:
        raise ShapeError("stride must be >= 1 and pad >= 0")
    if Cin % groups != 0 or Cout % groups != 0:
        raise ShapeError(f"channels {Cin}->{Cout} not divisible by groups={groups}")
    if Cg != Cin // groups:
        raise ShapeError(f"weight expects {Cg} in-channels per group, input has {Cin // groups}")
    if bias is not None and bias.shape != (Cout,):
        raise ShapeError(f"bias shape {bias.shape} != ({Cout},)")
    Ho = _out_dim(H, kh, stride, pad)
    Wo = _out_dim(W, kw, stride, pad)

    xp = _pad_spatial(x.data, pad, 2)
    s = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp,
        shape=(N, Cin, kh, kw, Ho, Wo),
        strides=(s[0], s[1], s[2], s[3], s[2] * stride, s[3] * stride),
        writeable=False,
    )
    out = np.empty((N, Cout, Ho * Wo), dtype=np.float64)
    K = kh * kw
    cg_out = Cout // groups
    wr = w.data.reshape(Cout, Cg, K)
    for n in range(N):
        for g in range(groups):
            ci0, ci1 = g * Cg, (g + 1) * Cg
            co0, co1 = g * cg_out, (g + 1) * cg_out
            cols = np.ascontiguousarray(
                view[n, ci0:ci1].transpose(0, 3, 4, 1, 2).reshape(Cg, Ho * Wo, K)
            )
            out[n, co0:co1] = _conv_core(cols, wr[co0:co1])
    if bias is not None:
        out += bias.data[None, :, None]
    if meter is not None:
        meter.add("conv2d", 2 * N * Cout * Cg * kh * kw * Ho * Wo)
    return Tensor(out.reshape(N, Cout, Ho, Wo))


def conv3d(x: Tensor, w: Tensor, bias: Tensor | None = None, stride: int = 1,
           pad: int = 0, meter: CostMeter | None = None) -> Tensor:
    """Cross-correlate [N,Cin,D,H,W] with [Cout,Cin,kd,kh,kw] filters."""
    if x.data.ndim != 5 or w.data.ndim != 5:
        raise ShapeError(f"conv3d expects 5-D input/weight, got {x.shape}/{w.shape}")
    N, Cin, D, H, W = x.shape
    Cout, Cw, kd, kh, kw = w.shape
    if Cw != Cin:
        raise ShapeError(f"weight expects {Cw} in-channels, input has {Cin}")
    if bias is not None and bias.shape != (Cout,):
        raise ShapeError(f"bias shape {bias.shape} != ({Cout},)")
    Do = _out_dim(D, kd, stride, pad)
    Ho = _out_dim(H, kh, stride, pad)
    Wo = _out_dim(W, kw, stride, pad)

    xp = _pad_spatial(x.data, pad, 3)
    s = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp,
        shape=(N, Cin, kd, kh, kw, Do, Ho, Wo),
        strides=(s[0], s[1], s[2], s[3], s[4],
                 s[2] * stride, s[3] * stride, s[4] * stride),
        writeable=False,
    )
    P = Do * Ho * Wo
    K = kd * kh * kw
    out = np.empty((N, Cout, P), dtype=np.float64)
    wr = w.data.reshape(Cout, Cin, K)
    for n in range(N):
        cols = np.ascontiguousarray(
            view[n].transpose(0, 4, 5, 6, 1, 2, 3).reshape(Cin, P, K)
        )
        out[n] = _conv_core(cols, wr)
    if bias is not None:
        out += bias.data[None, :, None]
    if meter is not None:
        meter.add("conv3d", 2 * N * Cout * Cin * kd * kh * kw * P)
    return Tensor(out.reshape(N, Cout, Do, Ho, Wo))


# Per output parity q along one dim, the stride-2/kernel-4/pad-1 transposed
# convolution reduces to two taps: output o = 2m+q sums W[t] * x[m+d] over
# (t, d) pairs below, with x zero-padded by one cell on each side.
_DECONV_TAPS = {0: ((1, 0), (3, -1)), 1: ((0, 1), (2, 0))}


def deconv3d_2x(x: Tensor, w: Tensor, bias: Tensor | None = None,
                meter: CostMeter | None = None) -> Tensor:
    """Transposed 3-D convolution, kernel 4 / stride 2 / pad 1, doubling D,H,W.

    Weight layout is [Cin, Cout, 4, 4, 4]; the operation is the exact adjoint
    of ``conv3d(stride=2, pad=1)`` with the same weight.
    """
    if x.data.ndim != 5 or w.data.ndim != 5:
        raise ShapeError(f"deconv3d_2x expects 5-D input/weight, got {x.shape}/{w.shape}")
    N, Cin, D, H, W = x.shape
    Cw, Cout, kd, kh, kw = w.shape
    if Cw != Cin or (kd, kh, kw) != (4, 4, 4):
        raise ShapeError(
            f"deconv3d_2x weight must be [{Cin},Cout,4,4,4], got {w.shape}"
        )
    if bias is not None and bias.shape != (Cout,):
        raise ShapeError(f"bias shape {bias.shape} != ({Cout},)")

    xp = _pad_spatial(x.data, 1, 3)
    out = np.empty((N, Cout, 2 * D, 2 * H, 2 * W), dtype=np.float64)
    for n in range(N):
        for qd in (0, 1):
            for qh in (0, 1):
                for qw in (0, 1):
                    taps = []
                    slices = []
                    for (td, dd) in _DECONV_TAPS[qd]:
                        for (th, dh) in _DECONV_TAPS[qh]:
                            for (tw, dw) in _DECONV_TAPS[qw]:
                                taps.append((td, th, tw))
                                slices.append((dd, dh, dw))
                    # cols: [cin, P, 8] with P = D*H*W output cells of this parity
                    parts = []
                    for (dd, dh, dw) in slices:
                        sub = xp[n, :, 1 + dd:1 + dd + D, 1 + dh:1 + dh + H, 1 + dw:1 + dw + W]
                        parts.append(sub.reshape(Cin, D * H * W))
                    cols = np.ascontiguousarray(np.stack(parts, axis=2))
                    wk = np.stack([w.data[:, :, td, th, tw] for (td, th, tw) in taps], axis=2)
                    res = _conv_core(cols, np.ascontiguousarray(wk.transpose(1, 0, 2)))
                    out[n, :, qd::2, qh::2, qw::2] = res.reshape(Cout, D, H, W)
    if bias is not None:
        out += bias.data[None, :, None, None, None]
    if meter is not None:
        # Convention: cost of the equivalent forward convolution on the
        # doubled output grid.
        meter.add("deconv3d", 2 * N * Cout * Cin * 64 * (2 * D) * (2 * H) * (2 * W))
    return Tensor(out)


def affine_channel(x: Tensor, scale: Tensor, shift: Tensor,
                   meter: CostMeter | None = None) -> Tensor:
    """Per-channel scale and shift: out[n,c,...] = scale[c]*x[n,c,...] + shift[c]."""
    C = x.shape[1]
    if scale.shape != (C,) or shift.shape != (C,):
        raise ShapeError(
            f"affine params must have length {C}, got {scale.shape}/{shift.shape}"
        )
    bshape = (1, C) + (1,) * (x.data.ndim - 2)
    out = scale.data.reshape(bshape) * x.data + shift.data.reshape(bshape)
    if meter is not None:
        meter.add("affine", 2 * x.size)
    return Tensor(out)


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return Tensor(np.maximum(x.data, 0.0))
    if kind == "sigmoid":
        return Tensor(1.0 / (1.0 + np.exp(-x.data)))
    raise ShapeError(f"unknown activation kind {kind!r}")


def softmax_axis(x: Tensor, axis: int) -> Tensor:
    """Numerically stabilized softmax along one axis."""
    if not -x.data.ndim <= axis < x.data.ndim:
        raise ShapeError(f"axis {axis} out of range for rank {x.data.ndim}")
    m = np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(x.data - m)
    return Tensor(e / np.sum(e, axis=axis, keepdims=True))


def bilinear_sample(feature: Tensor, u: float, v: float):
    """Sample a [C,H,W] map at real pixel (u, v).

    Returns ``(vector, in_view)``.  Coordinates outside [0, W-1] x [0, H-1]
    yield a zero vector with ``in_view`` False.
    """
    C, H, W = feature.shape
    vec, flags = bilinear_sample_many(
        feature, np.asarray([u], dtype=np.float64), np.asarray([v], dtype=np.float64)
    )
    return vec[0], bool(flags[0])


def bilinear_sample_many(feature: Tensor, us: np.ndarray, vs: np.ndarray):
    """Vectorized bilinear sampling; same arithmetic as :func:`bilinear_sample`.

    Returns ``(values [M,C], in_view [M])`` with out-of-view rows exactly zero.
    """
    C, H, W = feature.shape
    us = np.asarray(us, dtype=np.float64)
    vs = np.asarray(vs, dtype=np.float64)
    in_view = (us >= 0.0) & (us <= W - 1) & (vs >= 0.0) & (vs <= H - 1)
    uc = np.where(in_view, us, 0.0)
    vc = np.where(in_view, vs, 0.0)
    x0 = np.floor(uc).astype(np.int64)
    y0 = np.floor(vc).astype(np.int64)
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    du = uc - x0
    dv = vc - y0
    f = feature.data
    f00 = f[:, y0, x0]
    f10 = f[:, y0, x1]
    f01 = f[:, y1, x0]
    f11 = f[:, y1, x1]
    w00 = (1.0 - du) * (1.0 - dv)
    w10 = du * (1.0 - dv)
    w01 = (1.0 - du) * dv
    w11 = du * dv
    vals = f00 * w00 + f10 * w10 + f01 * w01 + f11 * w11
    vals = vals * in_view[None, :]
    return vals.T.copy(), in_view


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over all trailing spatial dims: [N,C,...] -> [N,C]."""
    if x.data.ndim < 2:
        raise ShapeError(f"global_avg_pool expects rank >= 2, got {x.shape}")
    if x.data.ndim == 2:
        return Tensor(x.data.copy())
    flat = x.data.reshape(x.shape[0], x.shape[1], -1)
    return Tensor(flat.mean(axis=2))


def quantize_half(x: Tensor) -> Tensor:
    """Round every value to the nearest IEEE binary16, held in float64.

    Values beyond the binary16 range overflow to infinity.
    """
    with np.errstate(over="ignore"):
        rounded = x.data.astype(np.float16).astype(np.float64)
    return Tensor(rounded, precision=PRECISION_HALF)


def dense_exact(x: np.ndarray, w: np.ndarray, bias: np.ndarray | None = None) -> np.ndarray:
    """Fully connected [N,K] @ [O,K]^T with a sequential fold over K.

    Used by attention gates, whose input dimension is a prunable channel axis.
    """
    N, K = x.shape
    O = w.shape[0]
    if w.shape[1] != K:
        raise ShapeError(f"dense weight {w.shape} incompatible with input {x.shape}")
    prod = x.T[:, :, None] * w.T[:, None, :]  # [K, N, O]
    out = _fold_channels(prod)
    if bias is not None:
        out = out + bias[None, :]
    return out


def attention_gate(volume: Tensor, fc1_w: Tensor, fc1_b: Tensor,
                   fc2_w: Tensor, fc2_b: Tensor,
                   meter: CostMeter | None = None) -> Tensor:
    """Input-conditioned per-channel gating from pooled statistics.

    ``s = sigmoid(fc2(relu(fc1(global_avg_pool(volume)))))`` scales each
    channel of the input; gates are recomputed from every input.
    """
    C = volume.shape[1]
    hidden = fc1_w.shape[0]
    if fc1_w.shape != (hidden, C) or fc2_w.shape != (C, hidden):
        raise ShapeError(
            f"gate MLP weights {fc1_w.shape}/{fc2_w.shape} do not map {C} -> {hidden} -> {C}"
        )
    if fc1_b.shape != (hidden,) or fc2_b.shape != (C,):
        raise ShapeError("gate MLP bias lengths do not match layer widths")
    pooled = global_avg_pool(volume)
    h = np.maximum(dense_exact(pooled.data, fc1_w.data, fc1_b.data), 0.0)
    s = 1.0 / (1.0 + np.exp(-dense_exact(h, fc2_w.data, fc2_b.data)))
    if meter is not None:
        meter.add("attention_gate", 4 * volume.shape[0] * C * hidden)
    bshape = s.shape + (1,) * (volume.data.ndim - 2)
    return Tensor(volume.data * s.reshape(bshape))
