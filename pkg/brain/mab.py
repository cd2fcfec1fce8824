"""
Mixed Attention Block (channel attention beside window self-attention) and
the MIRB stage: MAB(ELAN(CBS(x))).
"""

from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from brain.blocks import CbsParams, ElanParams, build_cbs, build_elan, cbs_forward, conv, elan_forward, norm
from brain.params import ConvParams, LinearParams, NormParams, ParamGroup, init_conv, init_linear, init_norm
from errors import ConfigError, ShapeError
from tensor import Mode, NormKind, Tensor
from tensor import ops


# ==================== CHANNEL ATTENTION ====================

@dataclass
class CabParams(ParamGroup):
    """Squeeze (C -> C/r) and excite (C/r -> C) 1x1 convs of the channel gate."""
    squeeze: ConvParams
    excite: ConvParams

    @property
    def channels(self) -> int:
        return self.squeeze.in_channels


def build_cab(rng: np.random.Generator, channels: int, reduction: int) -> CabParams:
    if channels % reduction:
        raise ShapeError(f"channel attention needs channels ({channels}) divisible by reduction ({reduction})")
    hidden = channels // reduction
    return CabParams(
        squeeze=init_conv(rng, channels, hidden, (1, 1)),
        excite=init_conv(rng, hidden, channels, (1, 1)),
    )


def channel_gate(x: Tensor, p: CabParams) -> Tensor:
    """g = sigmoid(excite(relu(squeeze(avg_pool(x))))), dims (N, C, 1, 1)."""
    ops.require_channels(x, p.channels, "channel attention")
    return ops.sigmoid(conv(ops.relu(conv(ops.global_avg_pool(x), p.squeeze)), p.excite))


def channel_attention(x: Tensor, p: CabParams) -> Tensor:
    return ops.mul(channel_gate(x, p), x)


# ==================== WINDOW SELF-ATTENTION ====================

@dataclass
class WmsaParams(ParamGroup):
    query: LinearParams
    key: LinearParams
    value: LinearParams
    output: LinearParams
    rel_bias: Optional[Tensor] = None
    heads: int = 4
    window: int = 8

    @property
    def channels(self) -> int:
        return self.query.weight.dims[0]


def build_wmsa(rng: np.random.Generator, channels: int, heads: int, window: int,
               rel_pos_bias: bool = False) -> WmsaParams:
    if channels % heads:
        raise ConfigError(f"embed dim {channels} not divisible by {heads} heads")
    bias = None
    if rel_pos_bias:
        bias = Tensor(rng.normal(0.0, 0.02, size=(heads, (2 * window - 1) ** 2)))
    return WmsaParams(
        query=init_linear(rng, channels, channels),
        key=init_linear(rng, channels, channels),
        value=init_linear(rng, channels, channels),
        output=init_linear(rng, channels, channels),
        rel_bias=bias,
        heads=heads,
        window=window,
    )


def relative_position_index(window: int) -> np.ndarray:
    """(T, T) index into the (2w-1)^2 bias table for every token pair of a window."""
    coords = np.stack(np.meshgrid(np.arange(window), np.arange(window), indexing="ij")).reshape(2, -1)
    rel = coords[:, :, None] - coords[:, None, :] + (window - 1)
    return rel[0] * (2 * window - 1) + rel[1]


def window_padding(size: int, window: int) -> Tuple[int, int]:
    """Symmetric zero padding that makes size a multiple of window."""
    total = (-size) % window
    return total // 2, total - total // 2


def window_partition(x: Tensor, window: int) -> Tuple[Tensor, Tuple[int, ...]]:
    """
    Split an (N, C, H, W) map into non-overlapping windows of tokens.

    Returns:
        (N * nH * nW, w*w, C) tokens and the layout needed by window_merge
    """
    n, c, h, w = x.dims
    pad_h, pad_w = window_padding(h, window), window_padding(w, window)
    if any(pad_h + pad_w):
        x = ops.pad(x, ((0, 0), (0, 0), pad_h, pad_w))
    hb, wb = x.dims[2] // window, x.dims[3] // window
    t = ops.reshape(x, (n, c, hb, window, wb, window))
    t = ops.transpose(t, (0, 2, 4, 3, 5, 1))
    tokens = ops.reshape(t, (n * hb * wb, window * window, c))
    return tokens, (n, c, h, w, hb, wb, pad_h[0], pad_w[0])


def window_merge(tokens: Tensor, window: int, layout: Tuple[int, ...]) -> Tensor:
    """Inverse of window_partition, cropping the padding away."""
    n, c, h, w, hb, wb, top, left = layout
    t = ops.reshape(tokens, (n, hb, wb, window, window, c))
    t = ops.transpose(t, (0, 5, 1, 3, 2, 4))
    x = ops.reshape(t, (n, c, hb * window, wb * window))
    if x.dims[2:] != (h, w):
        x = ops.index(x, (slice(None), slice(None), slice(top, top + h), slice(left, left + w)))
    return x


def _linear(x: Tensor, p: LinearParams) -> Tensor:
    return ops.add(ops.matmul(x, p.weight), p.bias)


def _split_heads(t: Tensor, heads: int) -> Tensor:
    b, tokens, c = t.dims
    return ops.transpose(ops.reshape(t, (b, tokens, heads, c // heads)), (0, 2, 1, 3))


def _attend(tokens: Tensor, p: WmsaParams) -> Tuple[Tensor, Tensor]:
    """Per-window, per-head softmax(QK^T / sqrt(d)) V; returns (output tokens, attention)."""
    b, t, c = tokens.dims
    if c % p.heads:
        raise ConfigError(f"embed dim {c} not divisible by {p.heads} heads")
    d = c // p.heads
    q = _split_heads(_linear(tokens, p.query), p.heads)
    k = _split_heads(_linear(tokens, p.key), p.heads)
    v = _split_heads(_linear(tokens, p.value), p.heads)
    scores = ops.mul(ops.matmul(q, ops.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(d))
    if p.rel_bias is not None:
        idx = relative_position_index(p.window)
        scores = ops.add(scores, ops.index(p.rel_bias, (slice(None), idx)))
    attn = ops.softmax(scores, axis=-1)
    out = ops.transpose(ops.matmul(attn, v), (0, 2, 1, 3))
    return _linear(ops.reshape(out, (b, t, c)), p.output), attn


def window_msa(x: Tensor, p: WmsaParams) -> Tensor:
    """Window-based multi-head self-attention over per-pixel C-vectors; dims preserved."""
    ops.require_channels(x, p.channels, "window MSA")
    tokens, layout = window_partition(x, p.window)
    out, _ = _attend(tokens, p)
    return window_merge(out, p.window, layout)


def attention_maps(x: Tensor, p: WmsaParams) -> np.ndarray:
    """Attention matrices (windows, heads, T, T) for inspection."""
    tokens, _ = window_partition(x, p.window)
    return _attend(tokens, p)[1].data


# ==================== MAB ====================

@dataclass
class MlpParams(ParamGroup):
    fc1: ConvParams
    fc2: ConvParams


@dataclass
class MabParams(ParamGroup):
    ln1: NormParams
    cab: CabParams
    wmsa: WmsaParams
    ln2: NormParams
    mlp: MlpParams
    alpha: float = 0.01


def build_mab(rng: np.random.Generator, channels: int, heads: int = 4, window: int = 8, alpha: float = 0.01,
              mlp_ratio: int = 2, reduction: int = 16, rel_pos_bias: bool = False, eps: float = 1e-5) -> MabParams:
    return MabParams(
        ln1=init_norm(channels, NormKind.LAYER, eps=eps),
        cab=build_cab(rng, channels, reduction),
        wmsa=build_wmsa(rng, channels, heads, window, rel_pos_bias),
        ln2=init_norm(channels, NormKind.LAYER, eps=eps),
        mlp=MlpParams(
            fc1=init_conv(rng, channels, channels * mlp_ratio, (1, 1)),
            fc2=init_conv(rng, channels * mlp_ratio, channels, (1, 1)),
        ),
        alpha=alpha,
    )


def mlp_forward(x: Tensor, p: MlpParams) -> Tensor:
    return conv(ops.silu(conv(x, p.fc1)), p.fc2)


def mab_forward(x: Tensor, p: MabParams) -> Tensor:
    """
    y = x + alpha * CA(LN1(x)) + WMSA(LN1(x))
    out = y + MLP(LN2(y))
    """
    z = norm(x, p.ln1, Mode.INFER)
    y = ops.add(ops.add(x, ops.mul(channel_attention(z, p.cab), p.alpha)), window_msa(z, p.wmsa))
    return ops.add(y, mlp_forward(norm(y, p.ln2, Mode.INFER), p.mlp))


# ==================== MIRB ====================

@dataclass
class MirbParams(ParamGroup):
    """Stride-2 CBS -> ELAN -> stacked MABs (empty list = identity, for ablation)."""
    cbs: CbsParams
    elan: ElanParams
    mabs: List[MabParams] = field(default_factory=list)

    @property
    def out_channels(self) -> int:
        return self.elan.out_channels


def mirb_forward(o_dcb: Tensor, p: MirbParams, mode: Mode = Mode.TRAIN) -> Tensor:
    y = elan_forward(cbs_forward(o_dcb, p.cbs, mode), p.elan, mode)
    for block in p.mabs:
        y = mab_forward(y, block)
    return y


def build_mirb(rng: np.random.Generator, cin: int, cout: int, depth: int = 1, eps: float = 1e-5,
               momentum: float = 0.03, **mab_options) -> MirbParams:
    return MirbParams(
        cbs=build_cbs(rng, cin, cout, 3, stride=2, eps=eps, momentum=momentum),
        elan=build_elan(rng, cout, cout, eps=eps, momentum=momentum),
        mabs=[build_mab(rng, cout, eps=eps, **mab_options) for _ in range(depth)],
    )
