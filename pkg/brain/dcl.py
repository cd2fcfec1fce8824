"""
Dynamic Convolutional Layer (DCL) and Dynamic Convolutional Block (DCB).

DCL reweights its input with a map computed from the input itself:
    W_dyn = fuse(SCE(x) + CCE(x)),  DCL(x) = W_dyn * x
where SCE is a 3x3 conv, CCE a global average pool followed by a width-3
conv across channels, and fuse a 1x1 conv. The (N, C, 1, 1) CCE term is
broadcast over H x W before the sum.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np

from brain.blocks import CbsParams, build_cbs, cbs_forward, conv, norm
from brain.params import ConvParams, NormParams, ParamGroup, init_conv, init_norm
from errors import ShapeError
from tensor import Mode, Tensor
from tensor import ops


@dataclass
class DclParams(ParamGroup):
    sce_conv: ConvParams
    cce_conv: ConvParams
    fuse_conv: ConvParams
    gate: bool = False

    @property
    def channels(self) -> int:
        return self.sce_conv.out_channels


def build_dcl(rng: np.random.Generator, channels: int, gate: bool = False) -> DclParams:
    return DclParams(
        sce_conv=init_conv(rng, channels, channels, (3, 3)),
        # (1, 1, 3, 1) kernel slides along the channel axis laid out as height
        cce_conv=init_conv(rng, 1, 1, (3, 1), pad=(1, 0), bias=False),
        fuse_conv=init_conv(rng, channels, channels, (1, 1)),
        gate=gate,
    )


def sce(o_t: Tensor, p: DclParams) -> Tensor:
    """Spatial context: 3x3 conv, pad 1, dims preserved."""
    ops.require_channels(o_t, p.channels, "SCE")
    return conv(o_t, p.sce_conv)


def cce(o_t: Tensor, p: DclParams) -> Tensor:
    """Channel context: pooled (N, C, 1, 1) vector convolved across channels with a width-3 kernel."""
    if o_t.data.ndim != 4 or o_t.dims[1] < 1:
        raise ShapeError(f"CCE needs at least one channel, got dims {o_t.dims}")
    ops.require_channels(o_t, p.channels, "CCE")
    n, c = o_t.dims[:2]
    pooled = ops.global_avg_pool(o_t)
    column = ops.reshape(pooled, (n, 1, c, 1))
    return ops.reshape(conv(column, p.cce_conv), (n, c, 1, 1))


def dynamic_weights(o_t: Tensor, p: DclParams) -> Tensor:
    """W_dyn = fuse(SCE(x) + broadcast CCE(x)), optionally sigmoid-gated."""
    w = conv(ops.add(sce(o_t, p), cce(o_t, p)), p.fuse_conv)
    return ops.sigmoid(w) if p.gate else w


def dcl_forward(o_t: Tensor, p: DclParams) -> Tensor:
    return ops.mul(dynamic_weights(o_t, p), o_t)


# ==================== DCB ====================

@dataclass
class DcbParams(ParamGroup):
    """
    CBS -> CBS -> DCL -> BN+SiLU (the DBS wrapper).
    When dcl is None (ablation) a static 3x3 conv stands in for it.
    """
    cbs1: CbsParams
    cbs2: CbsParams
    dbs_bn: NormParams
    dcl: Optional[DclParams] = None
    static_conv: Optional[ConvParams] = None

    @property
    def out_channels(self) -> int:
        return self.cbs2.out_channels


def build_dcb(rng: np.random.Generator, width: int, use_dcl: bool = True, gate: bool = False,
              eps: float = 1e-5, momentum: float = 0.03) -> DcbParams:
    """Strides (1, 2, 1): only cbs2 downsamples."""
    kw = dict(eps=eps, momentum=momentum)
    return DcbParams(
        cbs1=build_cbs(rng, 3, max(width // 2, 1), 3, stride=1, **kw),
        cbs2=build_cbs(rng, max(width // 2, 1), width, 3, stride=2, **kw),
        dbs_bn=init_norm(width, eps=eps, momentum=momentum),
        dcl=build_dcl(rng, width, gate) if use_dcl else None,
        static_conv=None if use_dcl else init_conv(rng, width, width, (3, 3)),
    )


def dcb_forward(i: Tensor, p: DcbParams, mode: Mode = Mode.TRAIN) -> Tensor:
    ops.require_channels(i, 3, "DCB")
    o_t = cbs_forward(cbs_forward(i, p.cbs1, mode), p.cbs2, mode)
    o_dcl = dcl_forward(o_t, p.dcl) if p.dcl is not None else conv(o_t, p.static_conv)
    return ops.silu(norm(o_dcl, p.dbs_bn, mode))
