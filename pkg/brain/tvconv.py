"""
Translation-variant convolution (TVConv) and the Compensation Block (CB).

TVConv applies a depthwise K x K convolution whose kernel differs at every
spatial position. The kernels come from a weight generator run on a
learnable affine map A, so they depend on position but never on the input.
"""

from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from brain.blocks import ElanParams, MpcmParams, build_elan, build_mpcm, conv, elan_forward, mpcm_forward, norm
from brain.params import ConvParams, NormParams, ParamGroup, init_conv, init_norm
from errors import ShapeError
from tensor import Mode, NormKind, Tensor
from tensor import ops


@dataclass
class ClrParams(ParamGroup):
    """Conv + LayerNorm + ReLU stage of the weight generator."""
    conv: ConvParams
    ln: NormParams


@dataclass
class TvConvParams(ParamGroup):
    affine: Tensor
    stages: List[ClrParams]
    final: ConvParams
    channels: int = 0
    kernel: int = 3

    @property
    def spatial(self) -> Tuple[int, int]:
        return self.affine.dims[1], self.affine.dims[2]


def build_tvconv(rng: np.random.Generator, channels: int, spatial: Tuple[int, int], affine_channels: int = 8,
                 hidden: int = 32, kernel: int = 3, eps: float = 1e-5) -> TvConvParams:
    """A ~ 0.1 * N(0, 1); four 3x3 CLR stages of width `hidden`, then a 3x3 conv to C*K*K."""
    affine = Tensor(0.1 * rng.standard_normal((affine_channels,) + tuple(spatial)))
    stages = []
    cin = affine_channels
    for _ in range(4):
        stages.append(ClrParams(conv=init_conv(rng, cin, hidden, (3, 3)),
                                ln=init_norm(hidden, NormKind.LAYER, eps=eps)))
        cin = hidden
    final = init_conv(rng, hidden, channels * kernel * kernel, (3, 3))
    return TvConvParams(affine=affine, stages=stages, final=final, channels=channels, kernel=kernel)


def interpolation_matrix(size_in: int, size_out: int) -> np.ndarray:
    """Linear interpolation weights (size_out, size_in), half-pixel centers, edge clamped."""
    m = np.zeros((size_out, size_in))
    scale = size_in / size_out
    for o in range(size_out):
        src = min(max((o + 0.5) * scale - 0.5, 0.0), size_in - 1)
        lo = int(np.floor(src))
        hi = min(lo + 1, size_in - 1)
        frac = src - lo
        m[o, lo] += 1.0 - frac
        m[o, hi] += frac
    return m


def resize_affine(affine: Tensor, size: Tuple[int, int]) -> Tensor:
    """Bilinearly resize A (C_A, H_f, W_f) to (C_A, *size); differentiable in A."""
    _, hf, wf = affine.dims
    if (hf, wf) == tuple(size):
        return affine
    rows = Tensor.wrap(interpolation_matrix(hf, size[0]).astype(affine.dtype))
    cols = Tensor.wrap(interpolation_matrix(wf, size[1]).T.astype(affine.dtype))
    return ops.matmul(ops.matmul(rows, affine), cols)


def generate_weights(p: TvConvParams, size: Optional[Tuple[int, int]] = None) -> Tensor:
    """
    Run the generator on A.

    Args:
        p: TVConv parameters
        size: Target (H, W); A is resized when it differs from the built extent

    Returns:
        (C*K*K, H, W) kernels; position (h, w) owns the slice [:, h, w]
    """
    affine = resize_affine(p.affine, size) if size is not None else p.affine
    c_a, h, w = affine.dims
    if c_a != p.stages[0].conv.in_channels:
        raise ShapeError(f"affine map has {c_a} channels, generator expects {p.stages[0].conv.in_channels}")
    x = ops.reshape(affine, (1, c_a, h, w))
    for stage in p.stages:
        x = ops.relu(norm(conv(x, stage.conv), stage.ln, Mode.INFER))
    kernels = conv(x, p.final)
    return ops.reshape(kernels, (p.channels * p.kernel * p.kernel, h, w))


def tvconv_forward(o_t1: Tensor, p: TvConvParams, resize: bool = False) -> Tensor:
    """
    out(n, c, h, w) = sum_{i,j} o_t1(n, c, h+i-K//2, w+j-K//2) * ker(c, i, j @ h, w), zero padded.

    Args:
        o_t1: (N, C, H, W) feature map
        p: TVConv parameters
        resize: Allow H, W to differ from A's extent (A is resized); otherwise a mismatch is an error

    Raises:
        ShapeError: On channel mismatch, or spatial mismatch with resize disabled
    """
    ops.require_channels(o_t1, p.channels, "TVConv")
    n, c, h, w = o_t1.dims
    if (h, w) != p.spatial and not resize:
        raise ShapeError(f"TVConv input extent {(h, w)} differs from affine map extent {p.spatial}")
    k2 = p.kernel * p.kernel
    kernels = ops.reshape(generate_weights(p, (h, w)), (1, c, k2, h, w))
    patches = ops.unfold(o_t1, p.kernel, p.kernel // 2)
    return ops.sum(ops.mul(patches, kernels), axis=2)


# ==================== COMPENSATION BLOCK ====================

@dataclass
class CbParams(ParamGroup):
    """
    Three MPCM + ELAN stages, then TVConv.
    When tv is None (ablation) a standard depthwise 3x3 conv stands in for it.
    """
    mpcms: List[MpcmParams]
    elans: List[ElanParams]
    tv: Optional[TvConvParams] = None
    depthwise: Optional[ConvParams] = None

    @property
    def out_channels(self) -> int:
        return self.elans[-1].out_channels


def build_cb(rng: np.random.Generator, cin: int, cout: int, spatial: Tuple[int, int], use_tvconv: bool = True,
             eps: float = 1e-5, momentum: float = 0.03, **tv_options) -> CbParams:
    """Channel chain: MPCM keeps width, the first ELAN widens cin -> cout, later ELANs keep cout."""
    kw = dict(eps=eps, momentum=momentum)
    mpcms, elans = [], []
    width = cin
    for _ in range(3):
        mpcms.append(build_mpcm(rng, width, **kw))
        elans.append(build_elan(rng, width, cout, **kw))
        width = cout
    return CbParams(
        mpcms=mpcms,
        elans=elans,
        tv=build_tvconv(rng, cout, spatial, eps=eps, **tv_options) if use_tvconv else None,
        depthwise=None if use_tvconv else init_conv(rng, cout, cout, (3, 3), groups=cout),
    )


def cb_forward(o_mirb: Tensor, p: CbParams, mode: Mode = Mode.TRAIN) -> Tensor:
    if o_mirb.data.ndim != 4 or o_mirb.dims[2] % 8 or o_mirb.dims[3] % 8:
        raise ShapeError(f"CB needs H and W divisible by 8, got {o_mirb.dims}")
    y = o_mirb
    for mpcm, elan in zip(p.mpcms, p.elans):
        y = elan_forward(mpcm_forward(y, mpcm, mode), elan, mode)
    if p.tv is not None:
        return tvconv_forward(y, p.tv, resize=True)
    return conv(y, p.depthwise)
