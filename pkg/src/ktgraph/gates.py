"""The four per-sample gate functions that scale edge losses during training."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import torch
from torch import Tensor

from .graph import GateKind


@dataclass(frozen=True)
class GateContext:
    """Everything a gate may need at loss time.

    ``step`` counts optimizer iterations (mini-batch steps, not epochs) and
    ``total_steps`` is the step count at the end of training, so the linear
    gate ramps smoothly from 0 to 1. ``source_correct`` flags, per sample,
    whether the source node's prediction matches the label; it is ``None`` on
    label edges, where the correct gate degenerates to the through gate
    because a label trivially matches itself.
    """

    step: int
    total_steps: int
    source_correct: Optional[Tensor] = None

    def __post_init__(self):
        if self.total_steps < 1:
            raise ValueError(f"total_steps must be >= 1, got {self.total_steps}")
        if not 0 <= self.step <= self.total_steps:
            raise ValueError(
                f"step must lie in [0, {self.total_steps}], got {self.step}"
            )


def apply_gate(kind: GateKind, losses: Tensor, ctx: GateContext) -> Tensor:
    """Scale a per-sample loss vector according to the gate kind.

    Through passes losses unchanged, Cutoff zeroes them, Linear multiplies by
    step/total_steps, and Correct keeps only samples the source node answered
    correctly. The output always has the shape of ``losses``.
    """
    if kind is GateKind.THROUGH:
        return losses
    if kind is GateKind.CUTOFF:
        return torch.zeros_like(losses)
    if kind is GateKind.LINEAR:
        return losses * (ctx.step / ctx.total_steps)
    if kind is GateKind.CORRECT:
        if ctx.source_correct is None:
            # Label source: its own ground truth, always "correct".
            return losses
        if ctx.source_correct.shape != losses.shape:
            raise ValueError(
                f"source_correct has shape {tuple(ctx.source_correct.shape)}, "
                f"losses have shape {tuple(losses.shape)}"
            )
        return torch.where(
            ctx.source_correct.to(torch.bool), losses, torch.zeros_like(losses)
        )
    raise ValueError(f"unknown gate kind {kind!r}")
