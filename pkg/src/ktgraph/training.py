"""Joint training of all nodes in a graph: per-node losses assembled from the
edges, a fixed ensemble sink over node logits, checkpoint evaluation, and the
step-decay optimization schedule.

Every mini-batch is forwarded once through all nodes; each node's loss sees
the other nodes' outputs as constants, so one backward pass updates every
node from its own loss only.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, replace
from typing import Callable, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor

from .data import BatchStream, ImageDataset
from .gates import GateContext, apply_gate
from .graph import (
    EdgeSpec,
    GateKind,
    GraphSpec,
    InvalidGraphError,
    validate_graph,
)
from .losses import design_loss
from .models import (
    BackboneConfig,
    NodeOutput,
    attention_entropy,
    build_model,
    num_parameters,
)

#: Weight of the auxiliary branch cross-entropy folded into the hard loss.
AUX_LOSS_WEIGHT = 1.0


@dataclass(frozen=True)
class TrainConfig:
    """Optimization schedule. Defaults follow common large-scale practice
    (SGD, lr 0.1, momentum 0.9, weight decay 1e-4, batch 16, x0.1 decay at
    50% and 75% of training); desk-scale runs shrink epochs and widen batches.
    """

    epochs: int = 300
    batch_size: int = 16
    lr_initial: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    lr_decay_factor: float = 0.1
    lr_decay_milestones: tuple[float, ...] = (0.5, 0.75)
    eval_checkpoints: Optional[tuple[int, ...]] = None
    checkpoint_scheme: str = "pow2"  # or "even": 2, 4, 6, ...
    seed: int = 0
    ensemble_mode: str = "logits"  # or "probs"
    model_width: int = 16

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        ms = self.lr_decay_milestones
        if any(not 0.0 < m < 1.0 for m in ms) or list(ms) != sorted(set(ms)):
            raise ValueError(
                f"milestones must be strictly increasing fractions in (0, 1), got {ms}"
            )
        if self.checkpoint_scheme not in ("pow2", "even"):
            raise ValueError(f"unknown checkpoint scheme {self.checkpoint_scheme!r}")
        if self.ensemble_mode not in ("logits", "probs"):
            raise ValueError(f"ensemble_mode must be 'logits' or 'probs'")


@dataclass
class EvalResult:
    per_node_accuracy: list[float]
    ensemble_accuracy: float
    per_node_entropy_mean: list[float]
    epoch: int = 0


def checkpoint_epochs(total_epochs: int, scheme: str = "pow2") -> list[int]:
    """Evaluation epochs: doubling (1, 2, 4, 8, ...) capped at the final
    epoch, which is always included. The "even" scheme (2, 4, 6, ...) is the
    alternative arithmetic reading, selectable via config."""
    if scheme == "pow2":
        points = []
        e = 1
        while e < total_epochs:
            points.append(e)
            e *= 2
    elif scheme == "even":
        points = list(range(2, total_epochs, 2))
    else:
        raise ValueError(f"unknown checkpoint scheme {scheme!r}")
    points.append(total_epochs)
    return points


def learning_rate_at(epoch_index: int, cfg: TrainConfig) -> float:
    """lr for a 0-based epoch index: initial x factor^(milestones passed)."""
    passed = sum(
        1 for m in cfg.lr_decay_milestones if epoch_index >= int(m * cfg.epochs)
    )
    return cfg.lr_initial * cfg.lr_decay_factor**passed


def ensemble_logits(node_logits: Sequence[Tensor]) -> Tensor:
    """Uniform average of node logits; the ensemble prediction is its argmax.

    Entries are sorted along the node axis before summing, so the reduction
    order, and therefore the result, is bitwise independent of node-list
    order.
    """
    if len(node_logits) == 0:
        raise ValueError("ensemble needs at least one node's logits")
    first = node_logits[0]
    for l in node_logits[1:]:
        if l.shape != first.shape:
            raise ValueError(
                f"logit shape mismatch: {tuple(first.shape)} vs {tuple(l.shape)}"
            )
    stacked = torch.stack(tuple(node_logits))
    return torch.sort(stacked, dim=0).values.sum(dim=0) / len(node_logits)


def predict_classes(logits: Tensor) -> Tensor:
    """Argmax with ties broken toward the lowest class index."""
    n, c = logits.shape
    top = logits.max(dim=1, keepdim=True).values
    positions = torch.arange(c, device=logits.device).expand(n, c)
    return torch.where(logits == top, positions, c).min(dim=1).values


def edge_loss(
    edge: EdgeSpec, out_s: NodeOutput, out_t: NodeOutput, ctx: GateContext
) -> Tensor:
    """Scalar loss of one node-to-node edge: batch mean of the gated
    per-sample design loss. The same gate covers the probability and the
    attention component."""
    if edge.is_label_edge:
        raise ValueError("label edges are aggregated by node_loss, not edge_loss")
    per_sample = design_loss(edge.loss_design, out_s, out_t)
    return apply_gate(edge.gate, per_sample, ctx).mean()


def _hard_loss(out: NodeOutput, labels: Tensor) -> Tensor:
    per = F.cross_entropy(out.logits, labels, reduction="none")
    if out.aux_logits is not None:
        per = per + AUX_LOSS_WEIGHT * F.cross_entropy(
            out.aux_logits, labels, reduction="none"
        )
    return per


def node_loss(
    target: int,
    g: GraphSpec,
    outputs: Sequence[NodeOutput],
    labels: Tensor,
    ctx: GateContext,
) -> Tensor:
    """Total loss of one node: gated hard loss plus all incoming edge losses.

    ``ctx`` carries the step counters; per-edge source correctness is derived
    here from each source's (detached) predictions.
    """
    if target >= len(outputs):
        raise ValueError(f"missing output for node {target}")
    out_t = outputs[target]
    label_gate = g.label_gate(target)
    hard_ctx = replace(ctx, source_correct=None)
    total = apply_gate(label_gate, _hard_loss(out_t, labels), hard_ctx).mean()
    for e in g.incoming(target):
        if e.source >= len(outputs):
            raise ValueError(f"missing output for node {e.source}")
        out_s = outputs[e.source]
        if e.gate is GateKind.CORRECT:
            correct = predict_classes(out_s.logits.detach()).eq(labels)
            e_ctx = replace(ctx, source_correct=correct)
        else:
            e_ctx = replace(ctx, source_correct=None)
        total = total + edge_loss(e, out_s, out_t, e_ctx)
    return total


def node_seed(base_seed: int, graph_seed: int, node_index: int) -> int:
    """Stable per-node initialization seed."""
    ss = np.random.SeedSequence([base_seed, graph_seed, node_index])
    return int(ss.generate_state(1)[0])


def build_node_models(
    g: GraphSpec, num_classes: int, cfg: TrainConfig, image_size: int = 32
) -> list:
    """One backbone per node, each seeded from (cfg.seed, graph.seed, index)."""
    config = BackboneConfig(
        arch=g.node_arch,
        num_classes=num_classes,
        width=cfg.model_width,
        image_size=image_size,
    )
    return [
        build_model(config, seed=node_seed(cfg.seed, g.seed, i))
        for i in range(g.num_nodes)
    ]


@torch.no_grad()
def evaluate(
    models: Sequence,
    dataset: ImageDataset,
    batch_size: int = 128,
    ensemble_mode: str = "logits",
    epoch: int = 0,
) -> EvalResult:
    """Top-1 accuracy per node and for the ensemble, plus mean prediction
    entropy per node (a diversity diagnostic)."""
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    was_training = [m.training for m in models]
    for m in models:
        m.eval()
    stream = BatchStream(dataset, batch_size, shuffle=False, augment=False)
    node_correct = np.zeros(len(models))
    node_entropy = np.zeros(len(models))
    ens_correct = 0
    total = 0
    for images, labels in stream.epoch(0):
        outs = [m(images) for m in models]
        for i, out in enumerate(outs):
            node_correct[i] += (predict_classes(out.logits) == labels).sum().item()
            node_entropy[i] += attention_entropy(out.probs).sum().item()
        if ensemble_mode == "probs":
            pooled = torch.stack([o.probs for o in outs]).mean(dim=0)
        else:
            pooled = ensemble_logits([o.logits for o in outs])
        ens_correct += (predict_classes(pooled) == labels).sum().item()
        total += len(labels)
    for m, t in zip(models, was_training):
        m.train(t)
    return EvalResult(
        per_node_accuracy=[float(v) for v in node_correct / total],
        ensemble_accuracy=float(ens_correct / total),
        per_node_entropy_mean=[float(v) for v in node_entropy / total],
        epoch=epoch,
    )


def train_graph(
    g: GraphSpec,
    data: tuple[ImageDataset, ImageDataset],
    cfg: TrainConfig,
    prune_hook: Optional[Callable[[int, float, tuple[float, ...]], bool]] = None,
    models: Optional[list] = None,
    trial_id: int = 0,
):
    """Train all nodes of a graph jointly and evaluate at checkpoint epochs.

    ``data`` is (train stream source, validation set). ``prune_hook``, when
    given, is called with (epoch, ensemble_accuracy, node_accuracies) at every
    checkpoint and stops training early by returning True; the returned record
    is then marked pruned. Deterministic given config and graph seeds. A
    non-finite loss marks the record failed instead of raising.
    """
    from .search import CheckpointRecord, TrialRecord  # circular at module level

    violations = validate_graph(g)
    if violations:
        raise InvalidGraphError(violations)
    train_ds, val_ds = data
    started = time.monotonic()
    if models is None:
        models = build_node_models(g, train_ds.num_classes, cfg, train_ds.image_size)
    if len(models) != g.num_nodes:
        raise ValueError(f"graph has {g.num_nodes} nodes but got {len(models)} models")
    for m in models:
        m.train()
    optimizers = [
        torch.optim.SGD(
            m.parameters(),
            lr=cfg.lr_initial,
            momentum=cfg.momentum,
            weight_decay=cfg.weight_decay,
        )
        for m in models
    ]
    stream = BatchStream(
        train_ds, cfg.batch_size, seed=cfg.seed, shuffle=True, augment=True
    )
    total_steps = stream.steps_per_epoch * cfg.epochs
    check_at = set(
        cfg.eval_checkpoints
        if cfg.eval_checkpoints is not None
        else checkpoint_epochs(cfg.epochs, cfg.checkpoint_scheme)
    )

    checkpoints: list[CheckpointRecord] = []
    status = "completed"
    note = ""
    step = 0
    for epoch in range(cfg.epochs):
        lr = learning_rate_at(epoch, cfg)
        for opt in optimizers:
            for group in opt.param_groups:
                group["lr"] = lr
        for images, labels in stream.epoch(epoch):
            outputs = [m(images) for m in models]
            ctx = GateContext(step=step, total_steps=total_steps)
            total = None
            for t in range(g.num_nodes):
                lt = node_loss(t, g, outputs, labels, ctx)
                total = lt if total is None else total + lt
            if not torch.isfinite(total):
                status = "failed"
                note = f"non-finite loss {total.item()!r} at step {step} (epoch {epoch + 1})"
                break
            for opt in optimizers:
                opt.zero_grad(set_to_none=True)
            total.backward()
            for opt in optimizers:
                opt.step()
            step += 1
        if status == "failed":
            break
        if (epoch + 1) in check_at:
            result = evaluate(
                models,
                val_ds,
                batch_size=max(cfg.batch_size, 64),
                ensemble_mode=cfg.ensemble_mode,
                epoch=epoch + 1,
            )
            checkpoints.append(
                CheckpointRecord(
                    epoch=epoch + 1,
                    ensemble_accuracy=result.ensemble_accuracy,
                    node_accuracies=tuple(result.per_node_accuracy),
                )
            )
            if prune_hook is not None and prune_hook(
                epoch + 1, result.ensemble_accuracy, tuple(result.per_node_accuracy)
            ):
                status = "pruned"
                break

    return TrialRecord(
        trial_id=trial_id,
        graph=g,
        checkpoints=checkpoints,
        status=status,
        wall_time=time.monotonic() - started,
        seed=cfg.seed,
        num_parameters=sum(num_parameters(m) for m in models),
        note=note,
    )
