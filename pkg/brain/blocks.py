"""
Composite convolution blocks: CBS (Conv+BN+SiLU), ELAN and MPCM.
"""

from dataclasses import dataclass
from typing import List

import numpy as np

from brain.params import ConvParams, NormParams, ParamGroup, init_conv, init_norm
from errors import ShapeError
from tensor import Mode, Tensor
from tensor import ops


def conv(x: Tensor, p: ConvParams) -> Tensor:
    return ops.conv2d(x, p.weight, p.bias, stride=p.stride, pad=p.pad, groups=p.groups)


def norm(x: Tensor, p: NormParams, mode: Mode) -> Tensor:
    return ops.normalize(
        x, p.kind, p.scale, p.shift,
        eps=p.eps, mode=mode,
        running_mean=p.running_mean, running_var=p.running_var,
        momentum=p.momentum,
    )


# ==================== CBS ====================

@dataclass
class CbsParams(ParamGroup):
    conv: ConvParams
    bn: NormParams

    @property
    def in_channels(self) -> int:
        return self.conv.in_channels

    @property
    def out_channels(self) -> int:
        return self.conv.out_channels


def build_cbs(rng: np.random.Generator, cin: int, cout: int, kernel: int = 1, stride: int = 1,
              eps: float = 1e-5, momentum: float = 0.03) -> CbsParams:
    """Odd kernel with pad kernel // 2, so only the stride changes the spatial extent."""
    if kernel % 2 == 0:
        raise ShapeError(f"CBS kernel must be odd, got {kernel}")
    return CbsParams(
        conv=init_conv(rng, cin, cout, (kernel, kernel), stride=stride),
        bn=init_norm(cout, eps=eps, momentum=momentum),
    )


def cbs_forward(x: Tensor, p: CbsParams, mode: Mode = Mode.TRAIN) -> Tensor:
    """silu(batch_norm(conv2d(x)))"""
    ops.require_channels(x, p.in_channels, "CBS")
    return ops.silu(norm(conv(x, p.conv), p.bn, mode))


# ==================== ELAN ====================

@dataclass
class ElanParams(ParamGroup):
    """
    Two 1x1 entry branches, a chain of 3x3 CBS pairs hanging off the second
    branch, and a 1x1 fusion over [branch1, branch2, pair outputs...].
    """
    entry1: CbsParams
    entry2: CbsParams
    chain: List[CbsParams]
    fuse: CbsParams

    @property
    def in_channels(self) -> int:
        return self.entry1.in_channels

    @property
    def out_channels(self) -> int:
        return self.fuse.out_channels


def build_elan(rng: np.random.Generator, cin: int, cout: int, pairs: int = 2,
               eps: float = 1e-5, momentum: float = 0.03) -> ElanParams:
    hidden = max(cin // 2, 1)
    kw = dict(eps=eps, momentum=momentum)
    entry1 = build_cbs(rng, cin, hidden, 1, **kw)
    entry2 = build_cbs(rng, cin, hidden, 1, **kw)
    chain = [build_cbs(rng, hidden, hidden, 3, **kw) for _ in range(2 * pairs)]
    fuse = build_cbs(rng, hidden * (2 + pairs), cout, 1, **kw)
    return ElanParams(entry1=entry1, entry2=entry2, chain=chain, fuse=fuse)


def elan_forward(x: Tensor, p: ElanParams, mode: Mode = Mode.TRAIN) -> Tensor:
    ops.require_channels(x, p.in_channels, "ELAN")
    b1 = cbs_forward(x, p.entry1, mode)
    y = cbs_forward(x, p.entry2, mode)
    branches = [b1, y]
    for i, stage in enumerate(p.chain):
        y = cbs_forward(y, stage, mode)
        if i % 2 == 1:
            branches.append(y)
    return cbs_forward(ops.concat(branches, axis=1), p.fuse, mode)


# ==================== MPCM ====================

@dataclass
class MpcmParams(ParamGroup):
    """Pool branch: max_pool(2, 2) -> 1x1 CBS. Conv branch: 1x1 CBS -> 3x3 stride-2 CBS."""
    pool_cbs: CbsParams
    conv_cbs1: CbsParams
    conv_cbs2: CbsParams

    @property
    def in_channels(self) -> int:
        return self.pool_cbs.in_channels

    @property
    def out_channels(self) -> int:
        return self.pool_cbs.out_channels + self.conv_cbs2.out_channels


def build_mpcm(rng: np.random.Generator, cin: int, branch: int = 0,
               eps: float = 1e-5, momentum: float = 0.03) -> MpcmParams:
    """Branch width defaults to cin // 2 so the output keeps cin channels."""
    branch = branch or max(cin // 2, 1)
    kw = dict(eps=eps, momentum=momentum)
    return MpcmParams(
        pool_cbs=build_cbs(rng, cin, branch, 1, **kw),
        conv_cbs1=build_cbs(rng, cin, branch, 1, **kw),
        conv_cbs2=build_cbs(rng, branch, branch, 3, stride=2, **kw),
    )


def mpcm_forward(x: Tensor, p: MpcmParams, mode: Mode = Mode.TRAIN) -> Tensor:
    """Halve H and W; output channels = pooled branch + conv branch."""
    ops.require_channels(x, p.in_channels, "MPCM")
    if x.dims[2] % 2 or x.dims[3] % 2:
        raise ShapeError(f"MPCM needs even H and W, got {x.dims}")
    pooled = cbs_forward(ops.max_pool2d(x, 2, 2), p.pool_cbs, mode)
    strided = cbs_forward(cbs_forward(x, p.conv_cbs1, mode), p.conv_cbs2, mode)
    return ops.concat([pooled, strided], axis=1)
