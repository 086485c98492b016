"""Tiny trainable CNN producing initial node embeddings and the intermediate head.

Four 3x3 conv layers (3 -> 16 -> 32 -> 64 -> C, the last dilated by 2) with
2x2 average pooling after the first two, so the embedding is 1/4 of the input
resolution in each dimension.  A class-aware 1x1 convolution plus global
average pooling yields the intermediate logits; its pre-pool map is the
intermediate CAM source.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .tensor import Tensor, conv2d, global_average_pool, max_pool2, relu

HIDDEN_WIDTHS = (16, 32, 64)


@dataclass
class BackboneParams:
    """Conv stack weights/biases plus the intermediate class-aware 1x1 conv."""

    conv_w: list[Tensor]
    conv_b: list[Tensor]
    cls_w: Tensor  # (L, C, 1, 1), no bias

    @property
    def channels(self) -> int:
        return self.conv_w[-1].shape[0]

    @property
    def num_classes(self) -> int:
        return self.cls_w.shape[0]

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        for i, (w, b) in enumerate(zip(self.conv_w, self.conv_b), start=1):
            out.append((f"backbone.conv{i}.w", w))
            out.append((f"backbone.conv{i}.b", b))
        out.append(("backbone.cls.w", self.cls_w))
        return out


def _he_conv(rng: np.random.Generator, cout: int, cin: int, k: int) -> Tensor:
    std = np.sqrt(2.0 / (cin * k * k))
    return Tensor(rng.normal(0.0, std, size=(cout, cin, k, k)), requires_grad=True)


def init_backbone(rng: np.random.Generator, num_classes: int,
                  channels: int = 64, in_channels: int = 3) -> BackboneParams:
    """He-initialized conv weights, zero biases."""
    widths = [in_channels, *HIDDEN_WIDTHS, channels]
    conv_w = [_he_conv(rng, widths[i + 1], widths[i], 3) for i in range(4)]
    conv_b = [Tensor(np.zeros(widths[i + 1]), requires_grad=True) for i in range(4)]
    cls_w = _he_conv(rng, num_classes, channels, 1)
    return BackboneParams(conv_w=conv_w, conv_b=conv_b, cls_w=cls_w)


def extract_features(image: Tensor, params: BackboneParams) -> Tensor:
    """(3, H0, W0) image -> (C, H0/4, W0/4) node embedding.

    Pixel values are centered (input - 0.5) before the first conv so the
    zero-mean weight init sees roughly zero-mean activations.
    """
    _, h0, w0 = image.shape
    if h0 % 4 or w0 % 4:
        raise ShapeError(f"input spatial dims must be divisible by 4, got {(h0, w0)}")
    x = image - 0.5
    x = relu(conv2d(x, params.conv_w[0], params.conv_b[0], padding=1))
    x = max_pool2(x)
    x = relu(conv2d(x, params.conv_w[1], params.conv_b[1], padding=1))
    x = max_pool2(x)
    x = relu(conv2d(x, params.conv_w[2], params.conv_b[2], padding=1))
    x = relu(conv2d(x, params.conv_w[3], params.conv_b[3], padding=2, dilation=2))
    return x


def intermediate_readout(h0: Tensor, params: BackboneParams) -> tuple[Tensor, Tensor]:
    """Class logits from raw features: GAP of the 1x1 class-aware conv.

    Returns (logits, class_map); the pre-pool class map feeds CAM extraction.
    """
    class_map = conv2d(h0, params.cls_w)
    logits = global_average_pool(class_map)
    return logits, class_map
