"""Data model for gated knowledge-transfer graphs between jointly trained networks.

A graph couples ``M`` trainable nodes (networks) through directed edges. Each
node-to-node edge carries a loss design (which outputs to attract or repel)
and a gate (how much of the per-sample loss flows through). Every node also
has one label edge delivering the supervised cross-entropy signal, controlled
by a gate of its own. The ensemble node is a fixed, non-trainable sink that
averages all node logits; it never appears as an edge endpoint.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Mapping, Sequence, Union

import numpy as np

SCHEMA_VERSION = 1

#: Edge-source sentinel for supervised (hard-label) edges.
LABEL = "label"

DEFAULT_ARCH = "at-small-resnet"


class LossDesign(str, Enum):
    """Per-edge choice of which outputs to attract or repel."""

    PROB_CLOSER = "ProbCloser"    # pull probability distributions together (KL)
    PROB_APART = "ProbApart"      # push probability distributions apart (cosine)
    ATTN_CLOSER = "AttnCloser"    # pull attention crops together (MSE)
    ATTN_APART = "AttnApart"      # push attention crops apart (cosine)
    BOTH_CLOSER = "BothCloser"    # ProbCloser + AttnCloser
    BOTH_APART = "BothApart"      # ProbApart + AttnApart
    LABEL_HARD = "LabelHard"      # cross-entropy with the label; label edges only


#: The designs a node-to-node edge may carry (everything except LabelHard).
NODE_EDGE_DESIGNS: tuple[LossDesign, ...] = (
    LossDesign.PROB_CLOSER,
    LossDesign.PROB_APART,
    LossDesign.ATTN_CLOSER,
    LossDesign.ATTN_APART,
    LossDesign.BOTH_CLOSER,
    LossDesign.BOTH_APART,
)


class GateKind(str, Enum):
    """Per-sample multiplier applied to an edge's loss."""

    THROUGH = "Through"   # pass unchanged
    CUTOFF = "Cutoff"     # zero out (the edge is effectively absent)
    LINEAR = "Linear"     # ramp from 0 to 1 over the course of training
    CORRECT = "Correct"   # pass only samples the source node classifies correctly


GATE_KINDS: tuple[GateKind, ...] = tuple(GateKind)

#: Human-oriented edge labels used in DOT exports.
DESIGN_DISPLAY = {
    LossDesign.PROB_CLOSER: "Prob(KL-div)",
    LossDesign.PROB_APART: "Prob(cosine)",
    LossDesign.ATTN_CLOSER: "Attn(MSE)",
    LossDesign.ATTN_APART: "Attn(cosine)",
    LossDesign.BOTH_CLOSER: "Prob(KL-div)+Attn(MSE)",
    LossDesign.BOTH_APART: "Prob(cosine)+Attn(cosine)",
}


class GraphSizeError(ValueError):
    """Raised for degenerate graph sizes (fewer than two nodes in a space)."""


class SamplingError(RuntimeError):
    """Raised when rejection sampling cannot produce a valid graph."""


class GraphParseError(ValueError):
    """Raised when a graph document is not well-formed text."""


class GraphSchemaError(ValueError):
    """Raised when a parsed graph document violates the schema."""


class InvalidGraphError(ValueError):
    """Raised when an operation requires a valid graph but got violations."""

    def __init__(self, violations: Sequence[str]):
        super().__init__("invalid graph: " + "; ".join(violations))
        self.violations = list(violations)


NodeId = Union[int, str]  # int node index, or the LABEL sentinel as source


@dataclass(frozen=True)
class EdgeSpec:
    """One directed edge: (source, target, loss design, gate).

    ``source`` is a node index or :data:`LABEL`. Constructors are permissive;
    semantic invariants are checked by :func:`validate_graph` so that invalid
    graphs can be represented, inspected, and reported.
    """

    source: NodeId
    target: int
    loss_design: LossDesign
    gate: GateKind

    @property
    def is_label_edge(self) -> bool:
        return self.source == LABEL


@dataclass(frozen=True)
class GraphSpec:
    """A complete knowledge-transfer graph over ``num_nodes`` networks.

    ``edges`` holds all ``M(M-1)`` ordered node pairs (a Cutoff gate expresses
    edge absence) plus ``M`` label edges. All nodes share one architecture,
    fixed before any search. The ensemble node is implicit: it averages the
    logits of all ``M`` nodes and is not part of ``edges``.
    """

    num_nodes: int
    node_arch: str
    edges: tuple[EdgeSpec, ...]
    seed: int = 0

    @property
    def ensemble(self) -> str:
        """Marker for the fixed ensemble sink (uniform logit averaging)."""
        return "mean-logits"

    def node_edges(self) -> tuple[EdgeSpec, ...]:
        return tuple(e for e in self.edges if not e.is_label_edge)

    def label_edges(self) -> tuple[EdgeSpec, ...]:
        return tuple(e for e in self.edges if e.is_label_edge)

    def label_gate(self, target: int) -> GateKind:
        for e in self.edges:
            if e.is_label_edge and e.target == target:
                return e.gate
        raise KeyError(f"no label edge for node {target}")

    def incoming(self, target: int) -> tuple[EdgeSpec, ...]:
        """Node-to-node edges feeding ``target``."""
        return tuple(
            e for e in self.edges if not e.is_label_edge and e.target == target
        )

    @staticmethod
    def build(
        num_nodes: int,
        node_arch: str,
        node_edges: Union[Mapping[tuple[int, int], tuple[LossDesign, GateKind]], Iterable[EdgeSpec]],
        label_gates: Sequence[GateKind],
        seed: int = 0,
    ) -> "GraphSpec":
        """Assemble a graph with edges in canonical order.

        Canonical order is node edges sorted by (source, target) followed by
        label edges sorted by target; serialization and sampling both produce
        it, which makes round trips the identity on equal graphs.
        """
        if isinstance(node_edges, Mapping):
            specs = [
                EdgeSpec(s, t, design, gate)
                for (s, t), (design, gate) in node_edges.items()
            ]
        else:
            specs = list(node_edges)
        specs.sort(key=lambda e: (e.source, e.target))
        labels = [
            EdgeSpec(LABEL, t, LossDesign.LABEL_HARD, g)
            for t, g in enumerate(label_gates)
        ]
        return GraphSpec(num_nodes, node_arch, tuple(specs) + tuple(labels), seed)


def uniform_graph(
    num_nodes: int,
    design: LossDesign,
    gate: GateKind = GateKind.THROUGH,
    node_arch: str = DEFAULT_ARCH,
    label_gate: GateKind = GateKind.THROUGH,
    seed: int = 0,
) -> GraphSpec:
    """Graph with the same design/gate on every ordered node pair."""
    edges = {
        (s, t): (design, gate)
        for s in range(num_nodes)
        for t in range(num_nodes)
        if s != t
    }
    return GraphSpec.build(num_nodes, node_arch, edges, [label_gate] * num_nodes, seed)


@dataclass(frozen=True)
class SpaceDescriptor:
    """Hyperparameter space of one graph size: per-slot option lists."""

    num_nodes: int
    node_slots: tuple[tuple[int, int], ...]
    node_options: tuple[tuple[LossDesign, GateKind], ...]
    label_options: tuple[GateKind, ...]

    @property
    def total_combinations(self) -> int:
        return len(self.node_options) ** len(self.node_slots) * len(
            self.label_options
        ) ** self.num_nodes


def hyperparameter_space(num_nodes: int) -> SpaceDescriptor:
    """Describe the search space for a graph of ``num_nodes`` networks.

    Every ordered node pair is one slot with 6 designs x 4 gates = 24 options;
    every label edge is one slot with 4 gate options.
    """
    if num_nodes < 2:
        raise GraphSizeError(
            f"a transfer graph needs at least 2 nodes, got {num_nodes}"
        )
    slots = tuple(
        (s, t)
        for s in range(num_nodes)
        for t in range(num_nodes)
        if s != t
    )
    options = tuple(
        (design, gate) for design in NODE_EDGE_DESIGNS for gate in GATE_KINDS
    )
    return SpaceDescriptor(num_nodes, slots, options, GATE_KINDS)


def sample_graph(
    space: SpaceDescriptor,
    rng: np.random.Generator,
    node_arch: str = DEFAULT_ARCH,
    max_retries: int = 100,
) -> GraphSpec:
    """Draw one graph uniformly per slot, rejecting invalid combinations.

    A draw is rejected when some node would receive no training signal (its
    label gate and all incoming gates are Cutoff). The draw sequence is fixed,
    so a generator seeded identically always yields the same graph.
    """
    for _ in range(max_retries):
        edges = {}
        for slot in space.node_slots:
            edges[slot] = space.node_options[int(rng.integers(len(space.node_options)))]
        label_gates = [
            space.label_options[int(rng.integers(len(space.label_options)))]
            for _ in range(space.num_nodes)
        ]
        seed = int(rng.integers(0, 2**31 - 1))
        g = GraphSpec.build(space.num_nodes, node_arch, edges, label_gates, seed)
        if not validate_graph(g):
            return g
    raise SamplingError(
        f"no valid graph after {max_retries} draws; the space may be degenerate"
    )


def validate_graph(g: GraphSpec) -> list[str]:
    """Check every structural invariant; return all violations (empty = ok)."""
    violations: list[str] = []
    m = g.num_nodes
    if m < 1:
        violations.append(f"num_nodes must be positive, got {m}")
        return violations
    if not g.node_arch:
        violations.append("node_arch must be a non-empty architecture identifier")

    node_edges = g.node_edges()
    label_edges = g.label_edges()

    for e in node_edges:
        if not (isinstance(e.source, int) and 0 <= e.source < m):
            violations.append(f"edge source {e.source!r} out of range [0, {m})")
        if not (0 <= e.target < m):
            violations.append(f"edge target {e.target!r} out of range [0, {m})")
        if e.source == e.target:
            violations.append(f"self-edge on node {e.target}")
        if e.loss_design is LossDesign.LABEL_HARD:
            violations.append(
                f"edge {e.source}->{e.target} carries LabelHard, which is only valid on label edges"
            )

    pairs = [(e.source, e.target) for e in node_edges]
    expected = {(s, t) for s in range(m) for t in range(m) if s != t}
    seen = set()
    for p in pairs:
        if p in seen:
            violations.append(f"duplicate edge for pair {p}")
        seen.add(p)
    missing = expected - seen
    if missing:
        violations.append(f"missing node edges for pairs {sorted(missing)}")

    label_targets = []
    for e in label_edges:
        if not (0 <= e.target < m):
            violations.append(f"label edge target {e.target!r} out of range [0, {m})")
        if e.loss_design is not LossDesign.LABEL_HARD:
            violations.append(
                f"label edge to node {e.target} must carry LabelHard, got {e.loss_design.value}"
            )
        label_targets.append(e.target)
    if sorted(label_targets) != list(range(m)):
        violations.append(
            f"need exactly one label edge per node, got targets {sorted(label_targets)}"
        )

    # A node trained by nothing (all gates Cutoff, label included) can never
    # learn; such graphs are rejected rather than silently repaired.
    by_target: dict[int, list[EdgeSpec]] = {t: [] for t in range(m)}
    for e in node_edges:
        if isinstance(e.source, int) and 0 <= e.target < m and e.source != e.target:
            by_target[e.target].append(e)
    for e in label_edges:
        if 0 <= e.target < m:
            by_target[e.target].append(e)
    for t in range(m):
        incoming = by_target[t]
        if incoming and all(e.gate is GateKind.CUTOFF for e in incoming):
            violations.append(
                f"untrained node {t}: label gate and all incoming gates are Cutoff"
            )

    return violations


# ---------------------------------------------------------------------------
# Serialization (schema v1)
# ---------------------------------------------------------------------------

def serialize(g: GraphSpec) -> str:
    """Render a graph as a versioned, human-readable JSON document."""
    doc = {
        "version": SCHEMA_VERSION,
        "num_nodes": g.num_nodes,
        "arch": g.node_arch,
        "seed": g.seed,
        "label_gates": [
            g.label_gate(t).value for t in range(g.num_nodes)
        ],
        "edges": [
            {
                "src": e.source,
                "dst": e.target,
                "loss": e.loss_design.value,
                "gate": e.gate.value,
            }
            for e in sorted(g.node_edges(), key=lambda e: (e.source, e.target))
        ],
    }
    return json.dumps(doc, indent=2) + "\n"


def _parse_enum(cls, value, where: str):
    try:
        return cls(value)
    except ValueError:
        names = ", ".join(v.value for v in cls)
        raise GraphSchemaError(
            f"{where}: unknown {cls.__name__} {value!r} (expected one of: {names})"
        ) from None


def deserialize(text: str) -> GraphSpec:
    """Parse a schema-v1 graph document back into a :class:`GraphSpec`."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise GraphParseError(
            f"not a well-formed graph document: {e.msg} at line {e.lineno} column {e.colno}"
        ) from None
    if not isinstance(doc, dict):
        raise GraphSchemaError("graph document must be a JSON object")
    version = doc.get("version")
    if version != SCHEMA_VERSION:
        raise GraphSchemaError(
            f"version: unsupported schema version {version!r} (this reader handles {SCHEMA_VERSION})"
        )
    missing = [k for k in ("num_nodes", "arch", "seed", "label_gates", "edges") if k not in doc]
    if missing:
        raise GraphSchemaError(f"missing required fields: {', '.join(missing)}")
    m = doc["num_nodes"]
    if not isinstance(m, int) or isinstance(m, bool) or m < 1:
        raise GraphSchemaError(f"num_nodes: expected a positive integer, got {m!r}")
    if not isinstance(doc["arch"], str):
        raise GraphSchemaError("arch: expected a string")
    if not isinstance(doc["seed"], int) or isinstance(doc["seed"], bool):
        raise GraphSchemaError("seed: expected an integer")
    gates_raw = doc["label_gates"]
    if not isinstance(gates_raw, list) or len(gates_raw) != m:
        raise GraphSchemaError(
            f"label_gates: expected a list of {m} gate names, got {gates_raw!r}"
        )
    label_gates = [
        _parse_enum(GateKind, v, f"label_gates[{i}]") for i, v in enumerate(gates_raw)
    ]
    if not isinstance(doc["edges"], list):
        raise GraphSchemaError("edges: expected a list")
    edges = []
    for i, rec in enumerate(doc["edges"]):
        where = f"edges[{i}]"
        if not isinstance(rec, dict):
            raise GraphSchemaError(f"{where}: expected an object")
        for key in ("src", "dst", "loss", "gate"):
            if key not in rec:
                raise GraphSchemaError(f"{where}.{key}: missing")
        if not isinstance(rec["src"], int) or not isinstance(rec["dst"], int):
            raise GraphSchemaError(f"{where}: src and dst must be node indices")
        edges.append(
            EdgeSpec(
                rec["src"],
                rec["dst"],
                _parse_enum(LossDesign, rec["loss"], f"{where}.loss"),
                _parse_enum(GateKind, rec["gate"], f"{where}.gate"),
            )
        )
    return GraphSpec.build(m, doc["arch"], edges, label_gates, doc["seed"])


def graph_digest(g: GraphSpec) -> str:
    """Short stable content hash of a graph document."""
    return hashlib.sha256(serialize(g).encode()).hexdigest()[:12]


# ---------------------------------------------------------------------------
# DOT export
# ---------------------------------------------------------------------------

def to_dot(g: GraphSpec) -> str:
    """Render a graph in DOT. Cutoff edges are omitted, mirroring how
    optimized graphs are usually drawn: absence of an edge means Cutoff."""
    lines = [
        "digraph transfer_graph {",
        "  rankdir=LR;",
        '  label_src [label="Label" shape=box];',
    ]
    for t in range(g.num_nodes):
        lines.append(f'  node{t} [label="Node {t}" shape=circle];')
    lines.append(
        '  ensemble [label="Ensemble" shape=doublecircle style=filled fillcolor="#f4cccc"];'
    )
    for e in g.label_edges():
        if e.gate is GateKind.CUTOFF:
            continue
        lines.append(f'  label_src -> node{e.target} [label="{e.gate.value}"];')
    for e in g.node_edges():
        if e.gate is GateKind.CUTOFF:
            continue
        text = f"{DESIGN_DISPLAY[e.loss_design]}/{e.gate.value}"
        lines.append(f'  node{e.source} -> node{e.target} [label="{text}"];')
    for t in range(g.num_nodes):
        lines.append(f"  node{t} -> ensemble [style=dashed];")
    lines.append("}")
    return "\n".join(lines) + "\n"
