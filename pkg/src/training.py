#!/usr/bin/env python3
"""
RCTrans Desk - Training Loop

Deep-supervised training of RCTransNet: every step draws a batch from a
seeded permutation cycle over the scenes, averages the per-scene loss over
the batch, runs one backward pass, clips the global gradient norm and takes
an AdamW step at the scheduled learning rate. A non-finite loss or gradient
stops training after writing a diagnostic dump of the offending batch.
"""

import logging
import time
from contextlib import nullcontext
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np

from . import tensor as T
from .configuration import RunConfig
from .decoder import query_spread
from .loss import LossBreakdown, total_loss
from .models import Scene
from .network import RCTransNet
from .optim import AdamW, clip_grad_norm, one_cycle_lr
from .reporting import JsonlWriter, write_json
from .scene_sim import random_camera_drop
from .tensor import Tensor

logger = logging.getLogger(__name__)


class NumericalAbortError(Exception):
    """Raised when the loss or the gradients stop being finite."""

    def __init__(self, message: str, dump_path: Optional[Path] = None):
        super().__init__(message)
        self.dump_path = dump_path


@dataclass
class StepRecord:
    step: int
    lr: float
    loss: float
    cls: float
    reg: float
    grad_norm: float
    layers: List[Dict[str, float]] = field(default_factory=list)
    batch: List[int] = field(default_factory=list)

    def to_dict(self) -> Dict:
        return {
            "step": self.step,
            "lr": self.lr,
            "loss": self.loss,
            "cls": self.cls,
            "reg": self.reg,
            "grad_norm": self.grad_norm,
            "layers": self.layers,
            "batch": self.batch,
        }


@dataclass
class TrainResult:
    losses: List[float]
    steps: int
    seconds: float
    metrics_path: Optional[Path] = None

    @property
    def initial_loss(self) -> float:
        return self.losses[0] if self.losses else float("nan")

    @property
    def final_loss(self) -> float:
        return self.losses[-1] if self.losses else float("nan")


def batch_schedule(num_scenes: int, batch_size: int, steps: int, seed: int) -> List[np.ndarray]:
    """
    Scene indices for every step. Scenes are drawn in order from a fresh
    seeded permutation per epoch; a batch larger than the scene count wraps
    into the next epoch. Indices within a batch are sorted.
    """
    if num_scenes <= 0:
        raise ValueError("training needs at least one scene")
    rng = np.random.default_rng([seed, 3])
    order: List[int] = []
    batches = []
    for _ in range(steps):
        while len(order) < batch_size:
            order.extend(rng.permutation(num_scenes).tolist())
        batches.append(np.sort(np.asarray(order[:batch_size], dtype=np.int64)))
        order = order[batch_size:]
    return batches


def mean_layer_losses(breakdowns: Sequence[LossBreakdown]) -> List[Dict[str, float]]:
    layers = []
    for i in range(len(breakdowns[0].layers)):
        entries = [b.layers[i] for b in breakdowns]
        layers.append({
            "layer": entries[0].layer,
            "cls": float(np.mean([e.cls for e in entries])),
            "reg": float(np.mean([e.reg for e in entries])),
            "weighted_cls": float(np.mean([e.weighted_cls for e in entries])),
            "weighted_reg": float(np.mean([e.weighted_reg for e in entries])),
        })
    return layers


class Trainer:
    """
    Owns the model, the optimizer and the run logs of one training run.

    Args:
        config: Run configuration (optimizer, loss, augmentation and seeds)
        model: Model to train (built from ``config`` when omitted)
        metrics_path: JSONL file receiving one record per step
        dump_dir: Directory for the diagnostic dump on numerical abort
    """

    def __init__(
        self,
        config: RunConfig,
        model: Optional[RCTransNet] = None,
        metrics_path: Optional[Union[str, Path]] = None,
        dump_dir: Optional[Union[str, Path]] = None,
    ):
        self.config = config
        self.model = model if model is not None else RCTransNet(config)
        opt = config.optimizer
        self.optimizer = AdamW(
            self.model.parameters(), lr=opt.lr, betas=opt.betas, eps=opt.eps, weight_decay=opt.weight_decay
        )
        self.metrics_path = Path(metrics_path) if metrics_path is not None else None
        self.dump_dir = Path(dump_dir) if dump_dir is not None else (
            self.metrics_path.parent if self.metrics_path is not None else Path(".")
        )
        self.augment_rng = np.random.default_rng([config.seed, 4])
        self.total_steps = config.optimizer.steps
        self.logger = logging.getLogger(__name__)

    def learning_rate(self, step: int, total_steps: Optional[int] = None) -> float:
        """Learning rate at ``step`` of a run lasting ``total_steps`` (default: the current run)."""
        opt = self.config.optimizer
        if opt.schedule == "constant":
            return opt.lr
        total = self.total_steps if total_steps is None else total_steps
        return one_cycle_lr(step, total, opt.lr, opt.pct_start)

    def augment(self, scene: Scene) -> Scene:
        if not self.config.drop_augmentation:
            return scene
        sc = self.config.scene
        return random_camera_drop(scene, self.augment_rng, sc.drop_cameras_in_training, sc.drop_probability)

    def batch_loss(self, scenes: Sequence[Scene]):
        """Mean deep-supervised loss over ``scenes`` with the per-scene breakdowns and decoder states."""
        breakdowns = []
        total: Optional[Tensor] = None
        states = None
        for scene in scenes:
            output = self.model.forward(scene, mode="train")
            breakdown = total_loss(output.predictions, scene.objects, self.config.loss)
            breakdowns.append(breakdown)
            total = breakdown.total if total is None else total + breakdown.total
            if states is None:
                states = output.states
        return total / float(len(scenes)), breakdowns, states

    def _abort(self, step: int, batch: np.ndarray, scenes: Sequence[Scene], reason: str,
               breakdowns: Sequence[LossBreakdown]) -> None:
        dump_path = self.dump_dir / f"numerical_abort_step{step}.json"
        payload = {
            "step": step,
            "reason": reason,
            "lr": self.learning_rate(step),
            "batch": batch.tolist(),
            "scenes": [
                {
                    "seed": s.seed,
                    "frame_index": s.frame_index,
                    "objects": s.objects.to_dict(),
                    "radar_points": s.radar.count,
                    "metadata": s.metadata,
                }
                for s in scenes
            ],
            "layers": [[layer.to_dict() for layer in b.layers] for b in breakdowns],
            "config_hash": self.config.config_hash(),
        }
        try:
            write_json(dump_path, payload)
        except OSError as e:
            self.logger.error(f"Could not write diagnostic dump {dump_path}: {e}")
            dump_path = None
        self.logger.error(f"Numerical abort at step {step}: {reason}")
        raise NumericalAbortError(f"{reason} at step {step}", dump_path)

    def train(self, scenes: Sequence[Scene], steps: Optional[int] = None) -> TrainResult:
        """Run ``steps`` optimizer steps (default ``optimizer.steps``) over ``scenes``."""
        opt = self.config.optimizer
        steps = opt.steps if steps is None else steps
        self.total_steps = steps
        schedule = batch_schedule(len(scenes), opt.batch_size, steps, self.config.seed)
        params = self.model.parameters()
        losses: List[float] = []
        start = time.perf_counter()

        self.logger.info(
            f"Training {self.model.num_parameters()} parameters for {steps} steps "
            f"(batch {opt.batch_size}, {len(scenes)} scenes)"
        )
        log = JsonlWriter(self.metrics_path) if self.metrics_path is not None else nullcontext()
        with log as writer:
            for step, batch in enumerate(schedule):
                lr = self.learning_rate(step)
                batch_scenes = [self.augment(scenes[i]) for i in batch]
                self.optimizer.zero_grad()
                loss, breakdowns, states = self.batch_loss(batch_scenes)
                value = loss.item()
                if not np.isfinite(value):
                    self._abort(step, batch, batch_scenes, f"non-finite loss {value}", breakdowns)
                T.backward(loss)
                grad_norm = clip_grad_norm(params, opt.grad_clip)
                if not np.isfinite(grad_norm):
                    self._abort(step, batch, batch_scenes, f"non-finite gradient norm {grad_norm}", breakdowns)
                self.optimizer.step(lr)

                losses.append(value)
                record = StepRecord(
                    step=step,
                    lr=lr,
                    loss=value,
                    cls=float(np.mean([b.cls_component for b in breakdowns])),
                    reg=float(np.mean([b.reg_component for b in breakdowns])),
                    grad_norm=grad_norm,
                    layers=mean_layer_losses(breakdowns),
                    batch=batch.tolist(),
                )
                if writer is not None:
                    writer.write(record.to_dict())
                if step % self.config.log_every == 0 or step == steps - 1:
                    spread = query_spread(states, self.config.world)
                    self.logger.info(
                        f"step {step}/{steps} loss {value:.4f} lr {lr:.2e} grad {grad_norm:.3f} "
                        f"query spread (last layer) {spread[-1]['mean_distance']:.2f} m"
                    )

        seconds = time.perf_counter() - start
        self.logger.info(f"Training finished in {seconds:.1f}s, final loss {losses[-1] if losses else float('nan'):.4f}")
        return TrainResult(losses, steps, seconds, self.metrics_path)


def forward_loss(model: RCTransNet, scenes: Sequence[Scene], config: RunConfig) -> float:
    """Mean training loss of ``scenes`` without building a graph."""
    with T.no_grad():
        values = [
            total_loss(model.forward(s, mode="train").predictions, s.objects, config.loss).value
            for s in scenes
        ]
    return float(np.mean(values))
