"""Training-loop plumbing shared by all models: learning-rate schedules,
deterministic batch iteration, loss logging, and non-finite-loss aborts."""

from __future__ import annotations

import csv
import logging
import math
from pathlib import Path

import numpy as np
import torch

from .errors import NumericError

logger = logging.getLogger(__name__)


def cosine_lr(epoch: int, lr0: float, period: int, min_lr: float = 0.0) -> float:
    """Cosine annealing restarting every `period` epochs (floor min_lr)."""
    phase = (epoch % period) / period
    return min_lr + (lr0 - min_lr) * 0.5 * (1.0 + math.cos(math.pi * phase))


def step_lr(epoch: int, lr0: float, interval: int, factor: float = 0.1) -> float:
    """Step decay: multiply by `factor` every `interval` epochs."""
    return lr0 * factor ** (epoch // interval)


def set_lr(optimizer: torch.optim.Optimizer, lr: float) -> None:
    for group in optimizer.param_groups:
        group["lr"] = lr


def batch_indices(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Shuffled batch index lists; the generator fixes the order."""
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def check_finite(loss: torch.Tensor, epoch: int, batch_ids) -> None:
    if not torch.isfinite(loss):
        ids = list(np.asarray(batch_ids).tolist())
        raise NumericError(
            f"non-finite loss {loss.item()!r} at epoch {epoch}; batch example ids: {ids}"
        )


def write_loss_log(path: str | Path, rows: list[dict]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if not rows:
        return
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)
