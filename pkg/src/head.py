#!/usr/bin/env python3
"""
RCTrans Desk - Detection Head

Two FFN branches per query: class logits and ten box parameters
(dx, dy, dz, log w, log l, log h, sin yaw, cos yaw, vx, vy). The box center
is the denormalized reference point plus (dx, dy, dz).
"""

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from . import tensor as T
from .geometry import denormalize_refs
from .models import WorldRange
from .nn import MLP, Module
from .tensor import Tensor

BOX_PARAMS = 10
PRIOR_PROBABILITY = 0.01


@dataclass
class BoxPrediction:
    class_logits: Tensor
    box_params: Tensor
    refs: Tensor
    world_range: WorldRange

    @property
    def num_queries(self) -> int:
        return self.class_logits.shape[0]

    def centers(self) -> Tensor:
        """World box centers [n, 3]; differentiable in both refs and offsets."""
        return denormalize_refs(self.refs, self.world_range) + self.box_params[:, 0:3]

    def regression_vector(self) -> Tensor:
        """Box parameters with the offsets replaced by absolute centers, [n, 10]."""
        return T.concat([self.centers(), self.box_params[:, 3:]], axis=1)

    def scores(self) -> np.ndarray:
        return expit(self.class_logits.data)

    def decode(self) -> np.ndarray:
        """Boxes [n, 9] as (x, y, z, w, l, h, yaw, vx, vy)."""
        params = self.box_params.data
        centers = self.centers().data
        dims = np.exp(params[:, 3:6])
        yaw = np.arctan2(params[:, 6], params[:, 7])
        return np.concatenate([centers, dims, yaw[:, None], params[:, 8:10]], axis=1)


class DetectionHead(Module):
    def __init__(self, dims: int, num_classes: int, rng: np.random.Generator):
        self.num_classes = num_classes
        self.cls_branch = MLP([dims, dims, num_classes], rng)
        self.reg_branch = MLP([dims, dims, BOX_PARAMS], rng)
        # background-heavy prior keeps the initial focal loss small
        self.cls_branch.head.bias.data[:] = -math.log((1.0 - PRIOR_PROBABILITY) / PRIOR_PROBABILITY)

    def forward(self, features: Tensor, refs: Tensor, world_range: WorldRange) -> BoxPrediction:
        return BoxPrediction(self.cls_branch(features), self.reg_branch(features), refs, world_range)


def predict(features: Tensor, refs: Tensor, head: DetectionHead, world_range: WorldRange) -> BoxPrediction:
    return head(features, refs, world_range)


def encode_boxes(boxes: np.ndarray) -> np.ndarray:
    """GT boxes [m, 9] -> regression targets [m, 10] with absolute centers."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 9)
    return np.concatenate(
        [
            boxes[:, 0:3],
            np.log(boxes[:, 3:6]),
            np.sin(boxes[:, 6:7]),
            np.cos(boxes[:, 6:7]),
            boxes[:, 7:9],
        ],
        axis=1,
    )
