#!/usr/bin/env python3
"""
RCTrans Desk - Set-Prediction Loss

Per decoder layer: queries are matched one-to-one to ground-truth objects by
the Hungarian algorithm on a focal-style classification cost plus an L1 box
cost; matched queries get a sigmoid focal loss toward their object's class and
an L1 loss on the box, unmatched queries get the background focal loss. The
total sums ``cls_weight * focal + reg_weight * L1`` over layers.
"""

import logging
from dataclasses import dataclass, field
from typing import List, Sequence, Tuple

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import tensor as T
from .configuration import LossConfig
from .head import BOX_PARAMS, BoxPrediction, encode_boxes
from .models import GroundTruthSet
from .tensor import ContractError, Tensor

logger = logging.getLogger(__name__)


def focal_loss(
    logits: Tensor,
    targets: np.ndarray,
    alpha: float = 0.25,
    gamma: float = 2.0,
    normalizer: float = 1.0,
) -> Tensor:
    """
    Sigmoid focal loss summed over every entry and divided by ``normalizer``.

    Positive entries: alpha * (1 - p)^gamma * -log(p)
    Negative entries: (1 - alpha) * p^gamma * -log(1 - p)
    """
    logits = T.as_tensor(logits)
    targets = np.asarray(targets, dtype=np.float64)
    if targets.shape != logits.shape:
        raise T.DimensionError(f"targets {targets.shape} do not match logits {logits.shape}")

    p = T.sigmoid(logits)
    neg_log_p = -T.log_sigmoid(logits)
    neg_log_not_p = -T.log_sigmoid(-logits)
    pos = neg_log_p
    neg = neg_log_not_p
    if gamma != 0:
        pos = pos * T.power(1.0 - p, gamma)
        neg = neg * T.power(p, gamma)
    per_entry = pos * (alpha * targets) + neg * ((1.0 - alpha) * (1.0 - targets))
    return per_entry.sum() * (1.0 / max(float(normalizer), 1.0))


def l1_box_loss(pred: Tensor, target: np.ndarray, weights: Sequence[float] = None) -> Tensor:
    """Weighted mean absolute error over the 10 box parameters, averaged over rows."""
    pred = T.as_tensor(pred)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise T.DimensionError(f"prediction {pred.shape} does not match target {target.shape}")
    w = np.ones(BOX_PARAMS) if weights is None else np.asarray(weights, dtype=np.float64)
    rows = max(pred.shape[0], 1)
    return (T.tensor_abs(pred - target) * w).sum() * (1.0 / (BOX_PARAMS * rows))


def hungarian_match(cost: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Minimum-cost assignment of every object (column) to a distinct query (row).

    Among equally cheap assignments the set of matched queries is the
    lexicographically smallest one, so ties go to the lowest query index.
    Returns (query_indices, object_indices), ordered by query index.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ContractError(f"cost must be a matrix, got shape {cost.shape}")
    n, m = cost.shape
    if n < m:
        raise ContractError(f"need at least as many queries as objects, got {n} < {m}")
    if not np.all(np.isfinite(cost)):
        raise ContractError("cost matrix has non-finite entries")
    if m == 0:
        empty = np.zeros(0, dtype=np.int64)
        return empty, empty
    rows, cols = linear_sum_assignment(cost)
    if n > m:
        rows, cols = _prefer_low_queries(cost, rows, cols)
    return rows.astype(np.int64), cols.astype(np.int64)


def _prefer_low_queries(cost: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Walk queries in index order and keep each one matched whenever the optimum allows it."""
    n, m = cost.shape
    best = assignment_cost(cost, rows, cols)
    tol = 1e-12 * max(1.0, abs(best))
    # n - m dummy objects absorb the unmatched queries; forced queries may not take one
    padded = np.concatenate([cost, np.zeros((n, n - m))], axis=1)
    forced: List[int] = []
    for query in range(n):
        if len(forced) == m:
            break
        if query in rows:
            forced.append(query)
            continue
        trial = padded.copy()
        trial[forced + [query], m:] = np.inf
        t_rows, t_cols = linear_sum_assignment(trial)
        keep = t_cols < m
        t_rows, t_cols = t_rows[keep], t_cols[keep]
        if assignment_cost(cost, t_rows, t_cols) <= best + tol:
            rows, cols = t_rows, t_cols
            forced.append(query)
    return rows, cols


def assignment_cost(cost: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> float:
    """Total cost of an assignment, summed in object order."""
    order = np.argsort(cols, kind="stable")
    return float(sum(cost[rows[i], cols[i]] for i in order))


def match_cost(pred: BoxPrediction, gt: GroundTruthSet, cfg: LossConfig) -> np.ndarray:
    """Matching cost [n, m] = cls_weight * focal cost + reg_weight * weighted L1."""
    n, m = pred.num_queries, len(gt)
    if m == 0:
        return np.zeros((n, 0))
    logits = pred.class_logits.data[:, gt.labels]
    p = 1.0 / (1.0 + np.exp(-logits))
    neg_log_p = np.logaddexp(0.0, -logits)
    neg_log_not_p = np.logaddexp(0.0, logits)
    gamma, alpha = cfg.focal_gamma, cfg.focal_alpha
    pos = alpha * np.power(1.0 - p, gamma) * neg_log_p
    neg = (1.0 - alpha) * np.power(p, gamma) * neg_log_not_p
    cls_cost = pos - neg

    pred_vec = pred.regression_vector().data
    target = encode_boxes(gt.boxes)
    w = np.asarray(cfg.l1_weights, dtype=np.float64)
    reg_cost = (np.abs(pred_vec[:, None, :] - target[None, :, :]) * w).sum(axis=-1) / BOX_PARAMS
    return cfg.cls_weight * cls_cost + cfg.reg_weight * reg_cost


@dataclass
class LayerLoss:
    layer: int
    cls: float
    reg: float
    weighted_cls: float
    weighted_reg: float
    matches: List[Tuple[int, int]] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "layer": self.layer,
            "cls": self.cls,
            "reg": self.reg,
            "weighted_cls": self.weighted_cls,
            "weighted_reg": self.weighted_reg,
        }


@dataclass
class LossBreakdown:
    """The differentiable total plus its per-layer decomposition."""

    total: Tensor
    layers: List[LayerLoss]

    @property
    def value(self) -> float:
        return self.total.item()

    @property
    def cls_component(self) -> float:
        return float(sum(layer.weighted_cls for layer in self.layers))

    @property
    def reg_component(self) -> float:
        return float(sum(layer.weighted_reg for layer in self.layers))


def layer_loss(pred: BoxPrediction, gt: GroundTruthSet, cfg: LossConfig) -> Tuple[Tensor, Tensor, List[Tuple[int, int]]]:
    """(focal, L1, matches) for one layer's prediction."""
    with T.no_grad():
        cost = match_cost(pred, gt, cfg)
    rows, cols = hungarian_match(cost)

    targets = np.zeros(pred.class_logits.shape)
    targets[rows, gt.labels[cols]] = 1.0
    cls = focal_loss(pred.class_logits, targets, cfg.focal_alpha, cfg.focal_gamma, normalizer=len(gt))

    if len(rows) == 0:
        reg = T.zeros(())
    else:
        pred_vec = pred.regression_vector()[rows]
        reg = l1_box_loss(pred_vec, encode_boxes(gt.boxes)[cols], cfg.l1_weights)
    return cls, reg, list(zip(rows.tolist(), cols.tolist()))


def total_loss(per_layer_preds: List[BoxPrediction], gt: GroundTruthSet, cfg: LossConfig) -> LossBreakdown:
    if not per_layer_preds:
        raise ContractError("total_loss needs at least one layer of predictions")
    total = None
    layers = []
    for i, pred in enumerate(per_layer_preds):
        cls, reg, matches = layer_loss(pred, gt, cfg)
        weighted_cls = cls * cfg.cls_weight
        weighted_reg = reg * cfg.reg_weight
        term = weighted_cls + weighted_reg
        total = term if total is None else total + term
        layers.append(LayerLoss(
            layer=i + 1,
            cls=cls.item(),
            reg=reg.item(),
            weighted_cls=weighted_cls.item(),
            weighted_reg=weighted_reg.item(),
            matches=matches,
        ))
    return LossBreakdown(total, layers)
