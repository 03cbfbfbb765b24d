"""Key-feature distillation over the latent state map.

A latent map ``(C, H, W)`` is fused by a 1x1 conv, spatially mixed by a
depthwise 5x5 conv, expanded to ``n`` channels by another 1x1 conv, channel
shuffled, and split into ``G`` contiguous groups. Per-group channel max and
average maps (2G channels total) are merged by a 3x3 conv back to ``C``
channels and added to the input, so the output shape always equals the
input shape.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .autodiff import ShapeError, Tensor
from .autodiff import ops


@dataclass(frozen=True)
class DistillConfig:
    in_channels: int = 8
    expanded_channels: int = 32
    groups: int = 4
    height: int = 4
    width: int = 4

    def __post_init__(self) -> None:
        if self.in_channels < 1 or self.expanded_channels < 1:
            raise ValueError("channel extents must be positive")
        if self.groups < 1 or self.expanded_channels % self.groups != 0:
            raise ValueError(
                f"groups={self.groups} must divide expanded_channels="
                f"{self.expanded_channels}")

    @property
    def group_width(self) -> int:
        return self.expanded_channels // self.groups

    @property
    def latent_shape(self) -> tuple[int, int, int]:
        return (self.in_channels, self.height, self.width)

    @property
    def latent_dim(self) -> int:
        return self.in_channels * self.height * self.width


def init_distill_params(cfg: DistillConfig, rng: np.random.Generator,
                        init_scale: float = 0.1) -> dict[str, Tensor]:
    c, n, g = cfg.in_channels, cfg.expanded_channels, cfg.groups

    def param(shape):
        return Tensor(rng.normal(0.0, init_scale, shape), requires_grad=True)

    return {
        "fuse.weight": param((c, c)),
        "fuse.bias": param((c,)),
        "spatial.weight": param((c, 5, 5)),
        "spatial.bias": param((c,)),
        "expand.weight": param((n, c)),
        "expand.bias": param((n,)),
        "merge.weight": param((c, 2 * g, 3, 3)),
        "merge.bias": param((c,)),
    }


def _check_stage(name: str, tensor: Tensor, shape: tuple[int, ...]) -> None:
    if tensor.shape != shape:
        raise ShapeError(
            f"{name}: parameter shape {tensor.shape} does not match expected "
            f"{shape}")


def distill_forward(z: Tensor, cfg: DistillConfig,
                    params: Mapping[str, Tensor]) -> Tensor:
    """Refine a latent map (or a batch of them) into same-shape key features."""
    c, n, g = cfg.in_channels, cfg.expanded_channels, cfg.groups
    if z.values.ndim not in (3, 4) or z.shape[-3:] != cfg.latent_shape:
        raise ShapeError(
            f"input: latent shape {z.shape} does not match configured "
            f"{cfg.latent_shape}")
    _check_stage("fuse", params["fuse.weight"], (c, c))
    _check_stage("spatial", params["spatial.weight"], (c, 5, 5))
    _check_stage("expand", params["expand.weight"], (n, c))
    _check_stage("merge", params["merge.weight"], (c, 2 * g, 3, 3))

    fused = ops.conv2d_1x1(z, params["fuse.weight"], params["fuse.bias"])
    mixed = ops.depthwise_conv2d_5x5(fused, params["spatial.weight"],
                                     params["spatial.bias"])
    expanded = ops.conv2d_1x1(mixed, params["expand.weight"],
                              params["expand.bias"])
    shuffled = ops.channel_shuffle(expanded, g)
    peaks = ops.channel_group_max(shuffled, g)
    means = ops.channel_group_avg(shuffled, g)
    pooled = ops.concat_channels(peaks, means)
    merged = ops.conv2d_3x3(pooled, params["merge.weight"], params["merge.bias"])
    return ops.add(merged, z)
