"""Desk-scale convolutional backbones exposing logits plus an attention map.

Two extraction styles are provided. The ``at`` style derives the attention
map from a feature map directly (channel mean of squared activations, an
energy map). The ``abn`` style learns the map in a side branch and multiplies
it into the trunk features, with no residual passthrough, so the map actively
shapes the prediction; the branch also emits auxiliary class scores trained
with cross-entropy.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .losses import PROB_EPS, AttentionMap

ARCH_AT = "at-small-resnet"
ARCH_ABN = "abn-small-resnet"
ARCHITECTURES = (ARCH_AT, ARCH_ABN)

#: Per-stage strides of the backbone; the map side after stage k is
#: image_size // prod(strides[:k]).
STAGE_STRIDES = (1, 2, 2, 1)

DEFAULT_CROP_SIZES = {
    ARCH_AT: (3, 5),
    ARCH_ABN: (3, 7, 11),
}

DEFAULT_ATTENTION_STAGE = {ARCH_AT: 4, ARCH_ABN: 3}


def map_side(image_size: int, stage: int) -> int:
    side = image_size
    for s in STAGE_STRIDES[:stage]:
        side //= s
    return side


def _nearest_odd(value: float, upper: int) -> int:
    lower_odd = 2 * int((value - 1) // 2) + 1
    candidates = [max(1, lower_odd), max(1, lower_odd + 2)]
    best = min(candidates, key=lambda c: (abs(c - value), c))
    top = upper if upper % 2 == 1 else upper - 1
    return max(1, min(best, top))


def fit_crop_sizes(sizes: tuple[int, ...], side: int) -> tuple[int, ...]:
    """Scale crop sizes down proportionally when the map is smaller than the
    largest requested crop, keeping them odd and deduplicated."""
    if max(sizes) <= side:
        return tuple(sizes)
    scale = side / max(sizes)
    fitted: list[int] = []
    for s in sizes:
        v = _nearest_odd(s * scale, side)
        if v not in fitted:
            fitted.append(v)
    return tuple(fitted)


@dataclass(frozen=True)
class BackboneConfig:
    arch: str = ARCH_AT
    num_classes: int = 10
    width: int = 16
    image_size: int = 32
    attention_stage: Optional[int] = None
    crop_sizes: Optional[tuple[int, ...]] = None

    def __post_init__(self):
        if self.arch not in ARCHITECTURES:
            raise ValueError(
                f"unknown arch {self.arch!r}; available: {', '.join(ARCHITECTURES)}"
            )
        if self.attention_stage is None:
            object.__setattr__(
                self, "attention_stage", DEFAULT_ATTENTION_STAGE[self.arch]
            )
        if not 1 <= self.attention_stage <= 4:
            raise ValueError(f"attention_stage must be 1..4, got {self.attention_stage}")
        side = map_side(self.image_size, self.attention_stage)
        if self.crop_sizes is None:
            object.__setattr__(
                self, "crop_sizes", fit_crop_sizes(DEFAULT_CROP_SIZES[self.arch], side)
            )
        else:
            object.__setattr__(self, "crop_sizes", tuple(self.crop_sizes))
            for k in self.crop_sizes:
                if k % 2 == 0 or k > side:
                    raise ValueError(
                        f"crop size {k} invalid for a {side}x{side} attention map"
                    )


@dataclass
class NodeOutput:
    """One network's forward result for a batch."""

    logits: Tensor
    probs: Tensor
    attention: AttentionMap
    aux_logits: Optional[Tensor] = None

    def detach(self) -> "NodeOutput":
        return NodeOutput(
            self.logits.detach(),
            self.probs.detach(),
            AttentionMap(self.attention.grid.detach(), self.attention.crop_sizes),
            None if self.aux_logits is None else self.aux_logits.detach(),
        )


def at_attention(features: Tensor) -> Tensor:
    """Channel mean of squared activations: a non-negative energy map [N, H, W]."""
    return features.pow(2).mean(dim=1)


def apply_attention(features: Tensor, attention: Tensor) -> Tensor:
    """Reweight trunk features by the attention map. No residual term: a zero
    map zeroes the features entirely."""
    return features * attention


class BasicBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, stride=1, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_ch)
        if stride != 1 or in_ch != out_ch:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_ch, out_ch, 1, stride=stride, bias=False),
                nn.BatchNorm2d(out_ch),
            )
        else:
            self.shortcut = nn.Identity()

    def forward(self, x: Tensor) -> Tensor:
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + self.shortcut(x))


class _SmallResNet(nn.Module):
    """Shared trunk: stem plus four residual stages and a linear head."""

    def __init__(self, config: BackboneConfig):
        super().__init__()
        self.config = config
        w = config.width
        widths = (w, 2 * w, 4 * w, 8 * w)
        self.stem = nn.Sequential(
            nn.Conv2d(3, w, 3, stride=1, padding=1, bias=False),
            nn.BatchNorm2d(w),
            nn.ReLU(inplace=True),
        )
        chans = [w] + list(widths)
        self.stages = nn.ModuleList(
            BasicBlock(chans[i], chans[i + 1], STAGE_STRIDES[i]) for i in range(4)
        )
        self.head = nn.Linear(widths[-1], config.num_classes)
        self.stage_channels = widths

    def _check_input(self, x: Tensor) -> None:
        if x.dim() != 4 or x.shape[1] != 3:
            raise ValueError(
                f"expected images of shape [N, 3, H, W], got {tuple(x.shape)}"
            )

    def _logits(self, f: Tensor) -> Tensor:
        pooled = F.adaptive_avg_pool2d(f, 1).flatten(1)
        return self.head(pooled)


class SmallResNetAT(_SmallResNet):
    """Backbone whose attention map is the energy of a stage's feature map."""

    def forward(self, x: Tensor) -> NodeOutput:
        self._check_input(x)
        f = self.stem(x)
        attn = None
        for i, stage in enumerate(self.stages):
            f = stage(f)
            if i + 1 == self.config.attention_stage:
                attn = at_attention(f)
        logits = self._logits(f)
        return NodeOutput(
            logits,
            F.softmax(logits, dim=-1),
            AttentionMap(attn, self.config.crop_sizes),
        )


class SmallResNetABN(_SmallResNet):
    """Backbone with a learned attention branch multiplied into the trunk."""

    def __init__(self, config: BackboneConfig):
        super().__init__(config)
        ch = self.stage_channels[config.attention_stage - 1]
        self.branch = nn.Sequential(
            nn.Conv2d(ch, ch, 3, padding=1, bias=False),
            nn.BatchNorm2d(ch),
            nn.ReLU(inplace=True),
        )
        self.branch_class_head = nn.Conv2d(ch, config.num_classes, 1)
        self.branch_attn_head = nn.Conv2d(ch, 1, 1)

    def forward(self, x: Tensor) -> NodeOutput:
        self._check_input(x)
        f = self.stem(x)
        attn = None
        aux_logits = None
        for i, stage in enumerate(self.stages):
            f = stage(f)
            if i + 1 == self.config.attention_stage:
                b = self.branch(f)
                aux_logits = self.branch_class_head(b).mean(dim=(2, 3))
                attn_map = torch.sigmoid(self.branch_attn_head(b))
                f = apply_attention(f, attn_map)
                attn = attn_map.squeeze(1)
        logits = self._logits(f)
        return NodeOutput(
            logits,
            F.softmax(logits, dim=-1),
            AttentionMap(attn, self.config.crop_sizes),
            aux_logits=aux_logits,
        )


def build_model(config: BackboneConfig, seed: int = 0) -> _SmallResNet:
    """Construct a backbone with parameters drawn deterministically from ``seed``."""
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        if config.arch == ARCH_AT:
            return SmallResNetAT(config)
        return SmallResNetABN(config)


def num_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def attention_entropy(probs: Tensor) -> Tensor:
    """Per-sample Shannon entropy of a probability batch, in nats."""
    return -(probs * probs.clamp(PROB_EPS, 1.0).log()).sum(dim=-1)


def save_checkpoint(model: _SmallResNet, path: str | Path) -> None:
    torch.save(
        {"config": asdict(model.config), "state_dict": model.state_dict()}, path
    )


def load_checkpoint(path: str | Path) -> _SmallResNet:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    raw = dict(payload["config"])
    if raw.get("crop_sizes") is not None:
        raw["crop_sizes"] = tuple(raw["crop_sizes"])
    model = build_model(BackboneConfig(**raw))
    model.load_state_dict(payload["state_dict"])
    return model
