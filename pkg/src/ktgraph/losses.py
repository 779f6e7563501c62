"""Per-sample attract/repel losses over probability distributions and attention crops.

All functions return one loss value per sample (no batch mean). The mean over
the batch is applied exactly once, at edge aggregation, after gating. Source
quantities are detached inside each loss, so gradients flow only into the
target network regardless of how callers wire the tensors.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch
from torch import Tensor

from .graph import LossDesign

#: Probabilities are clamped to [PROB_EPS, 1] before any log.
PROB_EPS = 1e-12
#: Guard for L2 normalization of crops and distributions.
NORM_EPS = 1e-12


def _check_same_shape(a: Tensor, b: Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ValueError(
            f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}"
        )


def l2_normalize(v: Tensor, dim: int = -1) -> Tensor:
    """v / ||v||_2 with an epsilon guard for zero-norm rows."""
    return v / v.norm(dim=dim, keepdim=True).clamp_min(NORM_EPS)


def prob_kl(p_s: Tensor, p_t: Tensor) -> Tensor:
    """Per-sample KL divergence pulling the target distribution toward the source.

    Natural log; sum over classes of p_s * (log p_s - log p_t). Only the logs
    see clamped probabilities, so zero source entries contribute exactly 0.
    """
    _check_same_shape(p_s, p_t, "prob_kl")
    p_s = p_s.detach()
    log_s = p_s.clamp(PROB_EPS, 1.0).log()
    log_t = p_t.clamp(PROB_EPS, 1.0).log()
    return (p_s * (log_s - log_t)).sum(dim=-1)


def prob_cosine(p_s: Tensor, p_t: Tensor) -> Tensor:
    """Per-sample cosine similarity of the two distributions.

    Minimizing this pushes distributions apart; for probability vectors the
    value lies in [0, 1].
    """
    _check_same_shape(p_s, p_t, "prob_cosine")
    p_s = p_s.detach()
    return (l2_normalize(p_s) * l2_normalize(p_t)).sum(dim=-1)


@dataclass
class AttentionMap:
    """Batch of non-negative 2-D attention maps with crop metadata.

    ``grid`` is ``[N, H, W]``; ``crop_sizes`` lists the odd side lengths used
    when this map enters an attention loss.
    """

    grid: Tensor
    crop_sizes: tuple[int, ...]

    def peaks(self) -> Tensor:
        """Per-sample (row, col) of the maximum entry.

        Ties break to the first occurrence in row-major order, which keeps
        crops deterministic across runs and platforms.
        """
        n, h, w = self.grid.shape
        flat = self.grid.detach().reshape(n, h * w)
        top = flat.max(dim=1, keepdim=True).values
        positions = torch.arange(h * w, device=flat.device).expand(n, h * w)
        idx = torch.where(flat == top, positions, h * w).min(dim=1).values
        return torch.stack([idx // w, idx % w], dim=1)


@dataclass
class CropPair:
    """Source and target windows cut at the same position, flattened."""

    q_s: Tensor  # [N, k*k], detached
    q_t: Tensor  # [N, k*k]
    size: int


def crop_attention(
    q_s: AttentionMap | Tensor,
    q_t: AttentionMap | Tensor,
    sizes: Sequence[int],
) -> list[CropPair]:
    """Cut k x k windows centered on the source map's per-sample peak.

    For each size, the window is clamped to stay inside the map near borders
    (shifted inward, never padded), and the identically positioned window is
    cut from the target map. Returns one :class:`CropPair` per size.
    """
    grid_s = q_s.grid if isinstance(q_s, AttentionMap) else q_s
    grid_t = q_t.grid if isinstance(q_t, AttentionMap) else q_t
    _check_same_shape(grid_s, grid_t, "crop_attention")
    if grid_s.dim() != 3:
        raise ValueError(f"expected [N, H, W] maps, got shape {tuple(grid_s.shape)}")
    n, h, w = grid_s.shape
    for k in sizes:
        if k % 2 == 0:
            raise ValueError(f"crop size {k} is even; only odd sizes have a center")
        if k > min(h, w):
            raise ValueError(f"crop size {k} exceeds map side {min(h, w)}")

    peaks = AttentionMap(grid_s, tuple(sizes)).peaks()
    grid_s = grid_s.detach()
    pairs: list[CropPair] = []
    batch = torch.arange(n).view(n, 1, 1)
    for k in sizes:
        half = k // 2
        r0 = (peaks[:, 0] - half).clamp(0, h - k)
        c0 = (peaks[:, 1] - half).clamp(0, w - k)
        rows = r0.view(n, 1) + torch.arange(k, device=grid_s.device)
        cols = c0.view(n, 1) + torch.arange(k, device=grid_s.device)
        win_s = grid_s[batch, rows.view(n, k, 1), cols.view(n, 1, k)]
        win_t = grid_t[batch, rows.view(n, k, 1), cols.view(n, 1, k)]
        pairs.append(CropPair(win_s.reshape(n, k * k), win_t.reshape(n, k * k), k))
    return pairs


def attn_mse(pairs: Sequence[CropPair]) -> Tensor:
    """Per-sample squared L2 distance of normalized crops, averaged over sizes."""
    if not pairs:
        raise ValueError("attn_mse needs at least one crop pair")
    per_size = [
        (l2_normalize(p.q_s.detach()) - l2_normalize(p.q_t)).pow(2).sum(dim=-1)
        for p in pairs
    ]
    return torch.stack(per_size).mean(dim=0)


def attn_cosine(pairs: Sequence[CropPair]) -> Tensor:
    """Per-sample cosine similarity of normalized crops, averaged over sizes."""
    if not pairs:
        raise ValueError("attn_cosine needs at least one crop pair")
    per_size = [
        (l2_normalize(p.q_s.detach()) * l2_normalize(p.q_t)).sum(dim=-1)
        for p in pairs
    ]
    return torch.stack(per_size).mean(dim=0)


def design_loss(design: LossDesign, out_s, out_t) -> Tensor:
    """Per-sample transfer loss for one edge, before gating.

    ``out_s`` and ``out_t`` are node outputs exposing ``probs`` and
    ``attention``. Components absent from the design contribute nothing.
    """
    if design is LossDesign.LABEL_HARD:
        raise ValueError(
            "LabelHard is computed by the training loop (cross-entropy with the label),"
            " not as a transfer loss"
        )
    parts: list[Tensor] = []
    if design in (LossDesign.PROB_CLOSER, LossDesign.BOTH_CLOSER):
        parts.append(prob_kl(out_s.probs, out_t.probs))
    if design in (LossDesign.PROB_APART, LossDesign.BOTH_APART):
        parts.append(prob_cosine(out_s.probs, out_t.probs))
    if design in (
        LossDesign.ATTN_CLOSER,
        LossDesign.ATTN_APART,
        LossDesign.BOTH_CLOSER,
        LossDesign.BOTH_APART,
    ):
        sizes = out_s.attention.crop_sizes
        if sizes != out_t.attention.crop_sizes:
            raise ValueError(
                f"crop sizes differ between nodes: {sizes} vs {out_t.attention.crop_sizes}"
            )
        pairs = crop_attention(out_s.attention, out_t.attention, sizes)
        if design in (LossDesign.ATTN_CLOSER, LossDesign.BOTH_CLOSER):
            parts.append(attn_mse(pairs))
        else:
            parts.append(attn_cosine(pairs))
    total = parts[0]
    for p in parts[1:]:
        total = total + p
    return total
