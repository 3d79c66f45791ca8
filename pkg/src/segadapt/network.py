"""Miniature encoder-decoder segmentation network with two heads.

Three encoder stages at full, half and quarter resolution feed a top-down
decoder with lateral 1x1 projections (feature-pyramid style). The upsampled
pyramid levels are concatenated and fused by a 1x1 convolution into a shared
feature map, from which a segmentation head produces per-class logits and a
dense head produces a low-dimensional embedding per pixel. Both heads share
the whole trunk, which is what lets a loss on one head move the other.

Convolution blocks use the tanh-approximated GELU. The segmentation head and
the dense head's final projection are linear, as are the lateral shortcuts.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, add, concat_channels, conv2d, gelu, upsample_bilinear_2x
from .errors import ContractViolation, ShapeError

__all__ = ["ModelConfig", "ModelParams", "ForwardOut", "init", "forward", "ema_update"]


@dataclass(frozen=True)
class ModelConfig:
    class_count: int
    dense_dim: int = 3
    base_channels: int = 16
    fused_channels: int = 32
    hidden_channels: int = 16

    def __post_init__(self):
        if self.class_count < 2:
            raise ValueError(f"class_count must be >= 2, got {self.class_count}")
        for name in ("dense_dim", "base_channels", "fused_channels", "hidden_channels"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")


def _layer_specs(config: ModelConfig) -> list[tuple[str, int, int, int]]:
    """(name, in_channels, out_channels, kernel) in checkpoint order."""
    b = config.base_channels
    p = b  # pyramid width shared by laterals and decoder convs
    return [
        ("enc0", 3, b, 3),
        ("down1", b, 2 * b, 3),
        ("down2", 2 * b, 4 * b, 3),
        ("lat0", b, p, 1),
        ("lat1", 2 * b, p, 1),
        ("lat2", 4 * b, p, 1),
        ("dec1", p, p, 3),
        ("dec0", p, p, 3),
        ("fuse", 3 * p, config.fused_channels, 1),
        ("seg", config.fused_channels, config.class_count, 1),
        ("dense1", config.fused_channels, config.hidden_channels, 1),
        ("dense2", config.hidden_channels, config.dense_dim, 1),
    ]


class ModelParams:
    """Ordered name -> Tensor map; iteration order is the checkpoint layout."""

    def __init__(self, tensors: dict[str, Tensor]):
        self._tensors = dict(tensors)

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def names(self) -> list[str]:
        return list(self._tensors)

    def tensors(self) -> list[Tensor]:
        return list(self._tensors.values())

    def items(self):
        return self._tensors.items()

    def copy(self) -> "ModelParams":
        return ModelParams(
            {n: Tensor(t.data.copy(), requires_grad=t.requires_grad) for n, t in self.items()}
        )


def init(config: ModelConfig, seed) -> ModelParams:
    """Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) weights, zero biases."""
    rng = np.random.default_rng(seed)
    tensors: dict[str, Tensor] = {}
    for name, cin, cout, k in _layer_specs(config):
        bound = 1.0 / np.sqrt(cin * k * k)
        w = rng.uniform(-bound, bound, size=(cout, cin, k, k))
        tensors[f"{name}.weight"] = Tensor(w, requires_grad=True)
        tensors[f"{name}.bias"] = Tensor(np.zeros(cout), requires_grad=True)
    return ModelParams(tensors)


@dataclass
class ForwardOut:
    logits: Tensor | None  # (class_count, H, W)
    dense: Tensor | None  # (dense_dim, H, W)
    fused: Tensor  # (fused_channels, H, W)


def forward(
    params: ModelParams,
    image: Tensor,
    *,
    need_logits: bool = True,
    need_dense: bool = True,
) -> ForwardOut:
    if image.data.ndim != 3 or image.data.shape[0] != 3:
        raise ShapeError(f"image must be (3, H, W), got {image.data.shape}")
    h, w = image.data.shape[1:]
    if h % 4 != 0 or w % 4 != 0:
        raise ShapeError(f"spatial extents must be divisible by 4, got {h}x{w}")

    def block(name: str, x: Tensor, stride: int = 1) -> Tensor:
        return gelu(conv2d(x, params[f"{name}.weight"], params[f"{name}.bias"], stride, 1))

    def pointwise(name: str, x: Tensor) -> Tensor:
        return conv2d(x, params[f"{name}.weight"], params[f"{name}.bias"])

    e0 = block("enc0", image)
    e1 = block("down1", e0, stride=2)
    e2 = block("down2", e1, stride=2)

    p2 = pointwise("lat2", e2)
    p1 = block("dec1", add(upsample_bilinear_2x(p2), pointwise("lat1", e1)))
    p0 = block("dec0", add(upsample_bilinear_2x(p1), pointwise("lat0", e0)))

    pyramid = concat_channels(
        concat_channels(p0, upsample_bilinear_2x(p1)),
        upsample_bilinear_2x(upsample_bilinear_2x(p2)),
    )
    fused = gelu(pointwise("fuse", pyramid))
    # Both heads hang off `fused`; skipping one never changes the other's
    # values or gradients, it only saves the dead branch's compute.
    logits = pointwise("seg", fused) if need_logits else None
    dense = pointwise("dense2", gelu(pointwise("dense1", fused))) if need_dense else None
    return ForwardOut(logits=logits, dense=dense, fused=fused)


def ema_update(ema: ModelParams, current: ModelParams, decay: float) -> None:
    """ema <- decay * ema + (1 - decay) * current, in place."""
    if not 0.0 <= decay < 1.0:
        raise ValueError(f"decay must be in [0, 1), got {decay}")
    if ema.names() != current.names():
        raise ContractViolation("ema and current parameter layouts differ")
    for (name, e), (_, c) in zip(ema.items(), current.items(), strict=True):
        if e.data.shape != c.data.shape:
            raise ContractViolation(f"{name}: shape {e.data.shape} vs {c.data.shape}")
        e.data *= decay
        e.data += (1.0 - decay) * c.data
