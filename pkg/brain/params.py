"""
Named parameter groups and their initializers.
Every block stores its tensors in a dataclass derived from ParamGroup.
"""

import dataclasses
from dataclasses import dataclass
from typing import ClassVar, Iterator, Optional, Tuple

import numpy as np

from tensor import NormKind, Tensor


class ParamGroup:
    """
    Mixin for dataclasses holding Tensors, nested groups or lists of groups.

    Fields named in `buffers` are saved in checkpoints but never trained.
    """
    buffers: ClassVar[Tuple[str, ...]] = ()

    def named_parameters(self, prefix: str = "", include_buffers: bool = False) -> Iterator[Tuple[str, Tensor]]:
        """
        Walk the group in field order.

        Args:
            prefix: Dotted name of this group
            include_buffers: Also yield running statistics

        Yields:
            (dotted name, tensor) pairs
        """
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            name = f"{prefix}.{f.name}" if prefix else f.name
            if isinstance(value, Tensor):
                if include_buffers or f.name not in self.buffers:
                    yield name, value
            elif isinstance(value, ParamGroup):
                yield from value.named_parameters(name, include_buffers)
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, ParamGroup):
                        yield from item.named_parameters(f"{name}.{i}", include_buffers)

    def parameters(self) -> list:
        return [t for _, t in self.named_parameters()]

    def astype(self, dtype) -> "ParamGroup":
        """Cast every tensor (buffers included) in place; returns self."""
        for _, t in self.named_parameters(include_buffers=True):
            t.data = t.data.astype(dtype)
        return self


def count_parameters(group: ParamGroup) -> int:
    """Number of trainable scalars in a group."""
    return int(sum(t.data.size for t in group.parameters()))


# ==================== PRIMITIVE GROUPS ====================

@dataclass
class ConvParams(ParamGroup):
    weight: Tensor
    bias: Optional[Tensor] = None
    stride: Tuple[int, int] = (1, 1)
    pad: Tuple[int, int] = (0, 0)
    groups: int = 1

    @property
    def out_channels(self) -> int:
        return self.weight.dims[0]

    @property
    def in_channels(self) -> int:
        return self.weight.dims[1] * self.groups


@dataclass
class NormParams(ParamGroup):
    scale: Tensor
    shift: Tensor
    running_mean: Optional[Tensor] = None
    running_var: Optional[Tensor] = None
    kind: NormKind = NormKind.BATCH
    eps: float = 1e-5
    momentum: float = 0.03

    buffers: ClassVar[Tuple[str, ...]] = ("running_mean", "running_var")


@dataclass
class LinearParams(ParamGroup):
    """Row-vector projection: y = x @ weight + bias."""
    weight: Tensor
    bias: Tensor


# ==================== INITIALIZERS ====================

def init_conv(
    rng: np.random.Generator,
    cin: int,
    cout: int,
    kernel: Tuple[int, int],
    stride: int = 1,
    pad: Optional[Tuple[int, int]] = None,
    groups: int = 1,
    bias: bool = True,
) -> ConvParams:
    """Fan-in scaled uniform weights U(-1/sqrt(fan_in), 1/sqrt(fan_in)); same-padding by default."""
    kh, kw = kernel
    fan_in = (cin // groups) * kh * kw
    bound = 1.0 / np.sqrt(fan_in)
    weight = Tensor(rng.uniform(-bound, bound, size=(cout, cin // groups, kh, kw)))
    b = Tensor(rng.uniform(-bound, bound, size=(cout,))) if bias else None
    return ConvParams(
        weight=weight,
        bias=b,
        stride=(stride, stride),
        pad=pad if pad is not None else (kh // 2, kw // 2),
        groups=groups,
    )


def init_norm(channels: int, kind: NormKind = NormKind.BATCH, eps: float = 1e-5, momentum: float = 0.03) -> NormParams:
    """Unit scale, zero shift; batch kind also gets running mean 0 / variance 1."""
    running = kind is NormKind.BATCH
    return NormParams(
        scale=Tensor(np.ones(channels)),
        shift=Tensor(np.zeros(channels)),
        running_mean=Tensor(np.zeros(channels)) if running else None,
        running_var=Tensor(np.ones(channels)) if running else None,
        kind=kind,
        eps=eps,
        momentum=momentum,
    )


def init_linear(rng: np.random.Generator, din: int, dout: int) -> LinearParams:
    bound = 1.0 / np.sqrt(din)
    return LinearParams(
        weight=Tensor(rng.uniform(-bound, bound, size=(din, dout))),
        bias=Tensor(np.zeros(dout)),
    )
