"""Random search over graph hyperparameters with mean-at-same-epoch pruning.

Each trial samples a graph, trains it, and reports ensemble accuracy at every
checkpoint epoch. A report is pruned when it falls strictly below the running
mean of all accuracies previously reported at that epoch (after a small guard
count). All events stream into an append-only line-delimited log, which is
the source of truth: pruner state and finished trials are rebuilt from it on
resume.
"""

from __future__ import annotations

import json
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .data import ImageDataset
from .graph import (
    DEFAULT_ARCH,
    GraphSpec,
    SpaceDescriptor,
    deserialize,
    graph_digest,
    sample_graph,
    serialize,
    to_dot,
)
from .training import TrainConfig, train_graph


class NoCompletedTrialsError(RuntimeError):
    """Raised when a search finishes without a single completed trial."""


class Decision(Enum):
    CONTINUE = "continue"
    STOP = "stop"


@dataclass
class PrunerState:
    """Running mean and count of reported ensemble accuracies per epoch."""

    min_reports_before_pruning: int = 5
    sums: dict[int, float] = field(default_factory=dict)
    counts: dict[int, int] = field(default_factory=dict)

    def mean(self, epoch: int) -> Optional[float]:
        c = self.counts.get(epoch, 0)
        return self.sums[epoch] / c if c else None


def prune_decision(state: PrunerState, epoch: int, acc: float) -> Decision:
    """STOP iff enough prior reports exist at this epoch and ``acc`` is
    strictly below their mean. The report is folded into the state afterward
    either way, so replaying a log reproduces every decision."""
    count = state.counts.get(epoch, 0)
    decision = Decision.CONTINUE
    if count >= state.min_reports_before_pruning and acc < state.sums[epoch] / count:
        decision = Decision.STOP
    state.sums[epoch] = state.sums.get(epoch, 0.0) + acc
    state.counts[epoch] = count + 1
    return decision


@dataclass
class CheckpointRecord:
    epoch: int
    ensemble_accuracy: float
    node_accuracies: tuple[float, ...]


@dataclass
class TrialRecord:
    """One search trial: the sampled graph and its checkpoint history."""

    trial_id: int
    graph: GraphSpec
    checkpoints: list[CheckpointRecord]
    status: str  # completed | pruned | failed
    wall_time: float = 0.0
    seed: int = 0
    num_parameters: int = 0
    note: str = ""

    @property
    def final_accuracy(self) -> Optional[float]:
        return self.checkpoints[-1].ensemble_accuracy if self.checkpoints else None


_STATUS_TO_EVENT = {"completed": "done", "pruned": "pruned", "failed": "failed"}
_EVENT_TO_STATUS = {v: k for k, v in _STATUS_TO_EVENT.items()}


class TrialLog:
    """Append-only JSONL trial log; readers tolerate a partial trailing line."""

    def __init__(self, path: Optional[str | Path]):
        self.path = Path(path) if path is not None else None
        self.events: list[dict] = []
        if self.path is not None and self.path.exists():
            self.events = self.read(self.path)

    def _append(self, event: dict) -> None:
        self.events.append(event)
        if self.path is not None:
            with open(self.path, "a", encoding="utf-8") as f:
                f.write(json.dumps(event) + "\n")
                f.flush()

    def append_checkpoint(
        self, trial_id: int, epoch: int, ens_acc: float,
        node_accs: Sequence[float], digest: str,
    ) -> None:
        self._append(
            {
                "trial_id": trial_id,
                "event": "checkpoint",
                "epoch": epoch,
                "ens_acc": ens_acc,
                "node_accs": list(node_accs),
                "graph_digest": digest,
            }
        )

    def append_terminal(self, record: TrialRecord) -> None:
        last = record.checkpoints[-1] if record.checkpoints else None
        self._append(
            {
                "trial_id": record.trial_id,
                "event": _STATUS_TO_EVENT[record.status],
                "epoch": last.epoch if last else 0,
                "ens_acc": last.ensemble_accuracy if last else None,
                "node_accs": list(last.node_accuracies) if last else [],
                "graph_digest": graph_digest(record.graph),
                "graph": json.loads(serialize(record.graph)),
                "wall_time": record.wall_time,
                "seed": record.seed,
                "num_parameters": record.num_parameters,
                "note": record.note,
            }
        )

    @staticmethod
    def read(path: str | Path) -> list[dict]:
        events = []
        with open(path, encoding="utf-8") as f:
            lines = f.readlines()
        for i, line in enumerate(lines):
            line = line.strip()
            if not line:
                continue
            try:
                events.append(json.loads(line))
            except json.JSONDecodeError:
                if i == len(lines) - 1:
                    break  # partial trailing line from an interrupted writer
                raise
        return events


def records_from_events(events: Sequence[dict]) -> list[TrialRecord]:
    """Reassemble finished trials (those with a terminal event) from a log."""
    checkpoints: dict[int, list[CheckpointRecord]] = {}
    records: dict[int, TrialRecord] = {}
    for ev in events:
        tid = ev["trial_id"]
        if ev["event"] == "checkpoint":
            checkpoints.setdefault(tid, []).append(
                CheckpointRecord(ev["epoch"], ev["ens_acc"], tuple(ev["node_accs"]))
            )
        elif ev["event"] in _EVENT_TO_STATUS:
            records[tid] = TrialRecord(
                trial_id=tid,
                graph=deserialize(json.dumps(ev["graph"])),
                checkpoints=checkpoints.get(tid, []),
                status=_EVENT_TO_STATUS[ev["event"]],
                wall_time=ev.get("wall_time", 0.0),
                seed=ev.get("seed", 0),
                num_parameters=ev.get("num_parameters", 0),
                note=ev.get("note", ""),
            )
    return [records[tid] for tid in sorted(records)]


def rebuild_pruner(events: Sequence[dict], guard: int) -> PrunerState:
    """Replay checkpoint events of finished trials, in log order."""
    finished = {
        ev["trial_id"] for ev in events if ev["event"] in _EVENT_TO_STATUS
    }
    state = PrunerState(min_reports_before_pruning=guard)
    for ev in events:
        if ev["event"] == "checkpoint" and ev["trial_id"] in finished:
            prune_decision(state, ev["epoch"], ev["ens_acc"])
    return state


@dataclass
class SearchResult:
    best_trial_id: int
    best_graph: GraphSpec
    best_accuracy: float
    records: list[TrialRecord]


def select_best(records: Sequence[TrialRecord]) -> TrialRecord:
    """Completed trial with the highest final ensemble accuracy; ties go to
    the earliest trial id."""
    completed = [r for r in records if r.status == "completed" and r.checkpoints]
    if not completed:
        raise NoCompletedTrialsError("no trial ran to completion")
    return max(completed, key=lambda r: (r.final_accuracy, -r.trial_id))


def run_search(
    space: SpaceDescriptor,
    budget: int,
    cfg: TrainConfig,
    data: tuple[ImageDataset, ImageDataset],
    parallelism: int = 1,
    *,
    arch: str = DEFAULT_ARCH,
    guard: int = 5,
    log_path: Optional[str | Path] = None,
    seed: int = 0,
    pruning: bool = True,
) -> SearchResult:
    """Sample ``budget`` graphs, train each with the pruner hook, and return
    the best completed trial.

    Restarting with the same log path skips trials that already have a
    terminal event and rebuilds pruner state from their checkpoint reports;
    a trial interrupted mid-training is retrained from scratch, which yields
    the same reports because trials are deterministic in (seed, trial_id).
    """
    if budget < 1:
        raise ValueError("budget must be >= 1")
    log = TrialLog(log_path)
    state = rebuild_pruner(log.events, guard)
    done = {r.trial_id: r for r in records_from_events(log.events)}
    lock = threading.Lock()

    def run_trial(trial_id: int) -> TrialRecord:
        rng = np.random.default_rng(np.random.SeedSequence([seed, trial_id]))
        g = sample_graph(space, rng, node_arch=arch)
        digest = graph_digest(g)

        def hook(epoch: int, acc: float, node_accs: tuple[float, ...]) -> bool:
            with lock:
                log.append_checkpoint(trial_id, epoch, acc, node_accs, digest)
                if not pruning:
                    return False
                return prune_decision(state, epoch, acc) is Decision.STOP

        record = train_graph(g, data, cfg, prune_hook=hook, trial_id=trial_id)
        with lock:
            log.append_terminal(record)
        return record

    records: dict[int, TrialRecord] = dict(done)
    pending = [t for t in range(budget) if t not in done]
    if parallelism <= 1:
        for t in pending:
            records[t] = run_trial(t)
    else:
        with ThreadPoolExecutor(max_workers=parallelism) as pool:
            for t, rec in zip(pending, pool.map(run_trial, pending)):
                records[t] = rec

    ordered = [records[t] for t in sorted(records)]
    best = select_best(ordered)
    return SearchResult(best.trial_id, best.graph, best.final_accuracy, ordered)


def report(records: Sequence[TrialRecord]) -> str:
    """Deterministic text summary of a trial log: per-trial table, prune
    statistics, node-count aggregates, and the best graph (document + DOT)."""
    if not records:
        raise ValueError("cannot report on an empty trial log")
    lines = []
    by_status = {"completed": 0, "pruned": 0, "failed": 0}
    for r in records:
        by_status[r.status] = by_status.get(r.status, 0) + 1
    lines.append("search summary")
    lines.append("==============")
    lines.append(
        f"trials: {len(records)} "
        f"(completed {by_status['completed']}, pruned {by_status['pruned']}, "
        f"failed {by_status['failed']})"
    )
    lines.append("")
    lines.append("trial  status     last_epoch  ens_acc  mean_node_acc  digest")
    for r in records:
        last = r.checkpoints[-1] if r.checkpoints else None
        acc = f"{last.ensemble_accuracy:.4f}" if last else "-"
        nodes = (
            f"{sum(last.node_accuracies) / len(last.node_accuracies):.4f}"
            if last and last.node_accuracies
            else "-"
        )
        epoch = last.epoch if last else 0
        lines.append(
            f"{r.trial_id:>5}  {r.status:<9}  {epoch:>10}  {acc:>7}  {nodes:>13}  "
            f"{graph_digest(r.graph)}"
        )
    lines.append("")
    lines.append("reports per checkpoint epoch")
    per_epoch: dict[int, list[float]] = {}
    for r in records:
        for c in r.checkpoints:
            per_epoch.setdefault(c.epoch, []).append(c.ensemble_accuracy)
    for epoch in sorted(per_epoch):
        vals = per_epoch[epoch]
        lines.append(
            f"  epoch {epoch:>4}: {len(vals):>3} reports, mean ens_acc "
            f"{sum(vals) / len(vals):.4f}"
        )
    lines.append("")
    lines.append("ensemble accuracy by node count (completed trials)")
    by_m: dict[int, list[float]] = {}
    for r in records:
        if r.status == "completed" and r.final_accuracy is not None:
            by_m.setdefault(r.graph.num_nodes, []).append(r.final_accuracy)
    for m in sorted(by_m):
        vals = by_m[m]
        lines.append(
            f"  M={m}: n={len(vals)}, mean {sum(vals) / len(vals):.4f}, "
            f"best {max(vals):.4f}"
        )
    try:
        best = select_best(records)
        lines.append("")
        lines.append(
            f"best trial: {best.trial_id} "
            f"(final ensemble accuracy {best.final_accuracy:.4f})"
        )
        lines.append("")
        lines.append("best graph document:")
        lines.append(serialize(best.graph).rstrip())
        lines.append("")
        lines.append("best graph DOT:")
        lines.append(to_dot(best.graph).rstrip())
    except NoCompletedTrialsError:
        lines.append("")
        lines.append("best trial: none (no completed trials)")
    return "\n".join(lines) + "\n"
