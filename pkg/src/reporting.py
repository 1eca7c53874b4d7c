#!/usr/bin/env python3
"""
RCTrans Desk - Run Artifacts

JSONL run logs, atomically written JSON summaries and optional PNG plots of
loss and precision-recall curves. Plotting needs matplotlib; without it the
plot functions log a warning and return None.
"""

import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import numpy as np

from .configuration import write_text_atomic

try:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
except ImportError:
    plt = None

logger = logging.getLogger(__name__)


def _default(value: Any) -> Any:
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    raise TypeError(f"Object of type {type(value).__name__} is not JSON serializable")


def dumps(record: Dict[str, Any]) -> str:
    return json.dumps(record, sort_keys=True, default=_default)


class JsonlWriter:
    """Appends one JSON object per line; use as a context manager."""

    def __init__(self, path: Union[str, Path], append: bool = False):
        self.path = Path(path)
        self.append = append
        self.count = 0
        self._file = None
        self.logger = logging.getLogger(__name__)

    def __enter__(self) -> "JsonlWriter":
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._file = open(self.path, "a" if self.append else "w", encoding="utf-8")
        return self

    def write(self, record: Dict[str, Any]) -> None:
        if self._file is None:
            raise RuntimeError("JsonlWriter used outside its context")
        self._file.write(dumps(record) + "\n")
        self._file.flush()
        self.count += 1

    def __exit__(self, exc_type, exc, tb) -> None:
        if self._file is not None:
            self._file.close()
            self._file = None
        self.logger.debug(f"Closed {self.path} after {self.count} records")


def write_json(path: Union[str, Path], payload: Dict[str, Any]) -> Path:
    path = Path(path)
    write_text_atomic(path, json.dumps(payload, indent=2, sort_keys=True, default=_default) + "\n")
    logger.info(f"Wrote {path}")
    return path


def read_jsonl(path: Union[str, Path]) -> List[Dict[str, Any]]:
    with open(path, "r", encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]


def plot_loss_curve(losses: Sequence[float], path: Union[str, Path]) -> Optional[Path]:
    """Render the per-step training loss to a PNG."""
    if plt is None:
        logger.warning("matplotlib not available, skipping loss plot")
        return None
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(np.arange(len(losses)), losses, linewidth=1.0)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log" if len(losses) and min(losses) > 0 else "linear")
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    logger.info(f"Loss curve saved to {path}")
    return path


def plot_pr_curves(curves: Dict[str, Dict[str, np.ndarray]], path: Union[str, Path]) -> Optional[Path]:
    """``curves`` maps a label to {"recall": ..., "precision": ...}."""
    if plt is None:
        logger.warning("matplotlib not available, skipping precision-recall plot")
        return None
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(5, 5))
    for name, curve in sorted(curves.items()):
        ax.plot(curve["recall"], curve["precision"], label=name)
    ax.set_xlim(0.0, 1.0)
    ax.set_ylim(0.0, 1.05)
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    if curves:
        ax.legend(fontsize="small")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    logger.info(f"Precision-recall curves saved to {path}")
    return path
