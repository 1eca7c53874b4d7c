#!/usr/bin/env python3
"""
RCTrans Desk - Image Backbone

A four-stage stride-2 convolution stub (total stride 16) standing in for a
pretrained image network. Each camera image [H, W, 3] becomes
(H/16) * (W/16) tokens of width D, flattened row-major.
"""

import logging
from typing import List, Sequence

import numpy as np

from . import tensor as T
from .nn import Conv2d, Module
from .tensor import Tensor

logger = logging.getLogger(__name__)

TOTAL_STRIDE = 16


class ImageBackbone(Module):
    def __init__(self, widths: Sequence[int], out_channels: int, rng: np.random.Generator, in_channels: int = 3):
        chans = [in_channels] + list(widths) + [out_channels]
        if len(chans) != 5:
            raise ValueError("ImageBackbone needs three hidden widths (four stride-2 stages)")
        self.stages = [Conv2d(a, b, 3, rng, stride=2) for a, b in zip(chans[:-1], chans[1:])]
        self.out_channels = out_channels

    def forward(self, image: Tensor) -> Tensor:
        """[H, W, 3] -> [H/16, W/16, D]."""
        x = image
        for i, stage in enumerate(self.stages):
            x = stage(x)
            if i < len(self.stages) - 1:
                x = T.relu(x)
        return x

    def tokens(self, images: np.ndarray) -> List[Tensor]:
        """Per-camera token tensors [(H/16)*(W/16), D] for images [N, H, W, 3]."""
        out = []
        for image in np.asarray(images, dtype=np.float64):
            feat = self(Tensor(image))
            h, w, d = feat.shape
            out.append(feat.reshape(h * w, d))
        return out
