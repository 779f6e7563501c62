"""Ready-made graphs for the standard baselines and the design-grid runs.

Every preset uses Through label gates and one uniform design/gate across all
ordered node pairs, which covers independent training (all transfer edges
cut), mutual learning, and the pure attract/repel grids.
"""

from __future__ import annotations

from .graph import DEFAULT_ARCH, GateKind, GraphSpec, LossDesign, uniform_graph

_FAMILIES = {
    # name -> (design, gate)
    "independent": (LossDesign.PROB_CLOSER, GateKind.CUTOFF),
    "dml": (LossDesign.PROB_CLOSER, GateKind.THROUGH),
    "prob-closer": (LossDesign.PROB_CLOSER, GateKind.THROUGH),
    "prob-apart": (LossDesign.PROB_APART, GateKind.THROUGH),
    "attn-closer": (LossDesign.ATTN_CLOSER, GateKind.THROUGH),
    "attn-apart": (LossDesign.ATTN_APART, GateKind.THROUGH),
    "closeness": (LossDesign.BOTH_CLOSER, GateKind.THROUGH),
    "separation": (LossDesign.BOTH_APART, GateKind.THROUGH),
}

_NODE_COUNTS = (2, 3, 4, 5)


def list_presets() -> list[str]:
    return [f"{family}-{m}" for family in _FAMILIES for m in _NODE_COUNTS]


def make_preset(
    name: str, node_arch: str = DEFAULT_ARCH, seed: int = 0
) -> GraphSpec:
    """Build a preset graph from a name like ``dml-2`` or ``separation-5``."""
    family, sep, suffix = name.rpartition("-")
    if not sep or family not in _FAMILIES or not suffix.isdigit():
        raise KeyError(
            f"unknown preset {name!r}; available: {', '.join(list_presets())}"
        )
    m = int(suffix)
    if m < 2:
        raise KeyError(f"preset node count must be >= 2, got {name!r}")
    design, gate = _FAMILIES[family]
    return uniform_graph(m, design, gate, node_arch=node_arch, seed=seed)
