"""Command-line surface: run searches, train/evaluate single graphs, export
DOT, plot results, and list presets.

Every run writes a resolved-config snapshot into its output directory, and
every training or search run emits a trial log (JSONL) that the plot and
report tooling consume.
"""

from __future__ import annotations

import argparse
import copy
import json
import sys
from pathlib import Path

import yaml

from . import __version__
from .data import DatasetSpec, balanced_half_split, load_dataset
from .graph import (
    GraphParseError,
    GraphSchemaError,
    InvalidGraphError,
    deserialize,
    hyperparameter_space,
    serialize,
    to_dot,
    validate_graph,
)
from .models import save_checkpoint
from .presets import list_presets, make_preset
from .search import (
    NoCompletedTrialsError,
    TrialLog,
    records_from_events,
    report,
    run_search,
)
from .training import TrainConfig, build_node_models, train_graph

DEFAULT_CONFIG = {
    "data": {
        "name": "synthetic",
        "num_classes": 6,
        "per_class": 100,
        "test_per_class": 50,
        "image_size": 32,
        "seed": 0,
        "noise": 0.1,
        "color_jitter": 0.0,
        "distractors": 0,
        "label_noise": 0.0,
        "source": None,
    },
    "train": {
        "epochs": 8,
        "batch_size": 32,
        "lr_initial": 0.1,
        "momentum": 0.9,
        "weight_decay": 1.0e-4,
        "lr_decay_factor": 0.1,
        "lr_decay_milestones": [0.5, 0.75],
        "checkpoint_scheme": "pow2",
        "ensemble_mode": "logits",
        "model_width": 16,
        "seed": 0,
    },
    "search": {
        "budget": 8,
        "guard": 5,
        "parallelism": 1,
        "num_nodes": 2,
        "arch": "at-small-resnet",
        "pruning": True,
        "seed": 0,
    },
}

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_NO_COMPLETED = 2
EXIT_TRAINING_FAILED = 3


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_USAGE):
        super().__init__(message)
        self.code = code


def _deep_update(base: dict, override: dict) -> dict:
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(base.get(key), dict):
            _deep_update(base[key], value)
        else:
            base[key] = value
    return base


def _apply_set(config: dict, assignment: str) -> None:
    if "=" not in assignment:
        raise CliError(f"--set expects key=value, got {assignment!r}")
    key, raw = assignment.split("=", 1)
    node = config
    parts = key.split(".")
    for part in parts[:-1]:
        if part not in node or not isinstance(node[part], dict):
            raise CliError(f"--set: unknown config section {key!r}")
        node = node[part]
    if parts[-1] not in node:
        raise CliError(f"--set: unknown config key {key!r}")
    node[parts[-1]] = yaml.safe_load(raw)


def resolve_config(args) -> dict:
    config = copy.deepcopy(DEFAULT_CONFIG)
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.is_file():
            raise CliError(f"config file not found: {path}")
        loaded = yaml.safe_load(path.read_text())
        if loaded is None:
            loaded = {}
        if not isinstance(loaded, dict):
            raise CliError(f"config file must hold a mapping: {path}")
        unknown = set(loaded) - set(config)
        if unknown:
            raise CliError(f"unknown config sections: {', '.join(sorted(unknown))}")
        _deep_update(config, loaded)
    for assignment in getattr(args, "set", None) or []:
        _apply_set(config, assignment)
    if getattr(args, "seed", None) is not None:
        config["data"]["seed"] = args.seed
        config["train"]["seed"] = args.seed
        config["search"]["seed"] = args.seed
    if getattr(args, "parallel", None) is not None:
        config["search"]["parallelism"] = args.parallel
    return config


def _prepare_out_dir(out: str, resume: bool) -> Path:
    path = Path(out)
    if path.exists() and any(path.iterdir()) and not resume:
        raise CliError(
            f"output directory {path} is not empty; pass --resume to continue into it"
        )
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_config_snapshot(out: Path, config: dict) -> None:
    (out / "config.yaml").write_text(yaml.safe_dump(config, sort_keys=True))


def _dataset_spec(config: dict) -> DatasetSpec:
    return DatasetSpec(**config["data"])


def _train_config(config: dict, **overrides) -> TrainConfig:
    raw = dict(config["train"])
    raw["lr_decay_milestones"] = tuple(raw["lr_decay_milestones"])
    raw.update(overrides)
    return TrainConfig(**raw)


def _load_graph(args, config: dict):
    if getattr(args, "graph", None):
        path = Path(args.graph)
        if not path.is_file():
            raise CliError(f"graph document not found: {path}")
        g = deserialize(path.read_text())
    elif getattr(args, "preset", None):
        g = make_preset(
            args.preset,
            node_arch=config["search"]["arch"],
            seed=config["train"]["seed"],
        )
    else:
        raise CliError("pass --graph FILE or --preset NAME")
    violations = validate_graph(g)
    if violations:
        raise CliError(
            "invalid graph:\n  " + "\n  ".join(violations)
        )
    return g


def _emit_trial_log(path: Path, record) -> None:
    from .graph import graph_digest

    log = TrialLog(path)
    digest = graph_digest(record.graph)
    for c in record.checkpoints:
        log.append_checkpoint(
            record.trial_id, c.epoch, c.ensemble_accuracy, c.node_accuracies, digest
        )
    log.append_terminal(record)


def cmd_search(args) -> int:
    config = resolve_config(args)
    out = _prepare_out_dir(args.out, args.resume)
    _write_config_snapshot(out, config)
    spec = _dataset_spec(config)
    train_set = load_dataset(spec, "train")
    explore_train, explore_val = balanced_half_split(train_set, seed=spec.seed)
    cfg = _train_config(config)
    s = config["search"]
    try:
        result = run_search(
            hyperparameter_space(s["num_nodes"]),
            s["budget"],
            cfg,
            (explore_train, explore_val),
            parallelism=s["parallelism"],
            arch=s["arch"],
            guard=s["guard"],
            log_path=out / "trials.jsonl",
            seed=s["seed"],
            pruning=s["pruning"],
        )
    except NoCompletedTrialsError as e:
        print(f"search produced no completed trials: {e}", file=sys.stderr)
        return EXIT_NO_COMPLETED
    (out / "best_graph.json").write_text(serialize(result.best_graph))
    (out / "best_graph.dot").write_text(to_dot(result.best_graph))
    (out / "summary.txt").write_text(report(result.records))
    print(
        f"search done: {len(result.records)} trials, best trial "
        f"{result.best_trial_id} (ensemble accuracy {result.best_accuracy:.4f})"
    )
    print(f"artifacts in {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    config = resolve_config(args)
    out = _prepare_out_dir(args.out, args.resume)
    _write_config_snapshot(out, config)
    g = _load_graph(args, config)
    spec = _dataset_spec(config)
    train_set = load_dataset(spec, "train")
    test_set = load_dataset(spec, "test")
    cfg = _train_config(config)
    models = build_node_models(g, train_set.num_classes, cfg, train_set.image_size)
    record = train_graph(g, (train_set, test_set), cfg, models=models)
    (out / "graph.json").write_text(serialize(g))
    (out / "graph.dot").write_text(to_dot(g))
    for i, m in enumerate(models):
        save_checkpoint(m, out / f"node{i}.pt")
    evals = [
        {
            "epoch": c.epoch,
            "ensemble_accuracy": c.ensemble_accuracy,
            "node_accuracies": list(c.node_accuracies),
        }
        for c in record.checkpoints
    ]
    (out / "eval.json").write_text(json.dumps(evals, indent=2) + "\n")
    _emit_trial_log(out / "trials.jsonl", record)
    if record.status == "failed":
        print(f"training failed: {record.note}", file=sys.stderr)
        return EXIT_TRAINING_FAILED
    final = record.checkpoints[-1]
    print(
        f"trained {g.num_nodes} nodes for {cfg.epochs} epochs: "
        f"ensemble accuracy {final.ensemble_accuracy:.4f}, "
        f"mean node accuracy {sum(final.node_accuracies) / len(final.node_accuracies):.4f}"
    )
    print(f"artifacts in {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .models import load_checkpoint
    from .training import evaluate

    run_dir = Path(args.run)
    if not args.config and (run_dir / "config.yaml").is_file():
        args.config = str(run_dir / "config.yaml")  # reuse the run's snapshot
    config = resolve_config(args)
    graph_file = run_dir / "graph.json"
    if not graph_file.is_file():
        raise CliError(f"no graph.json under {run_dir}")
    g = deserialize(graph_file.read_text())
    models = []
    for i in range(g.num_nodes):
        ckpt = run_dir / f"node{i}.pt"
        if not ckpt.is_file():
            raise CliError(f"missing checkpoint {ckpt}")
        models.append(load_checkpoint(ckpt))
    spec = _dataset_spec(config)
    dataset = load_dataset(spec, args.split)
    result = evaluate(models, dataset, ensemble_mode=config["train"]["ensemble_mode"])
    payload = {
        "split": args.split,
        "ensemble_accuracy": result.ensemble_accuracy,
        "node_accuracies": result.per_node_accuracy,
        "node_entropy_means": result.per_node_entropy_mean,
    }
    print(json.dumps(payload, indent=2))
    if args.out:
        Path(args.out).write_text(json.dumps(payload, indent=2) + "\n")
    return EXIT_OK


def cmd_export_dot(args) -> int:
    path = Path(args.graph)
    if not path.is_file():
        raise CliError(f"graph document not found: {path}")
    dot = to_dot(deserialize(path.read_text()))
    if args.out:
        Path(args.out).write_text(dot)
    else:
        print(dot, end="")
    return EXIT_OK


def _design_label(g) -> str:
    from .graph import DESIGN_DISPLAY, GateKind

    active = [e for e in g.node_edges() if e.gate is not GateKind.CUTOFF]
    if not active:
        return "Independent"
    designs = {e.loss_design for e in active}
    if len(designs) == 1:
        return DESIGN_DISPLAY[designs.pop()]
    return "Mixed"


def cmd_plot(args) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    records = []
    for log_file in args.log:
        path = Path(log_file)
        if not path.is_file():
            raise CliError(f"trial log not found: {path}")
        records.extend(records_from_events(TrialLog.read(path)))
    if not records:
        raise CliError("no trial records found in the given logs")
    completed = [r for r in records if r.status == "completed" and r.checkpoints]
    if not completed:
        raise CliError("no completed trials to plot")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    groups: dict[str, dict[int, list[float]]] = {}
    for r in completed:
        label = _design_label(r.graph)
        groups.setdefault(label, {}).setdefault(r.graph.num_nodes, []).append(
            r.final_accuracy
        )
    fig, ax = plt.subplots(figsize=(6, 4))
    for label in sorted(groups):
        by_m = groups[label]
        ms = sorted(by_m)
        ys = [sum(by_m[m]) / len(by_m[m]) for m in ms]
        ax.plot(ms, ys, marker="o", label=label)
    ax.set_xlabel("number of nodes")
    ax.set_ylabel("ensemble accuracy")
    ax.legend(fontsize=8)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    accuracy_vs_nodes = out / "accuracy_vs_nodes.png"
    fig.savefig(accuracy_vs_nodes, metadata={"Software": "ktgraph"})
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(6, 4))
    xs = [r.num_parameters for r in completed]
    ys = [r.final_accuracy for r in completed]
    ax.scatter(xs, ys, s=18)
    ax.set_xlabel("total parameters")
    ax.set_ylabel("ensemble accuracy")
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    accuracy_vs_params = out / "accuracy_vs_parameters.png"
    fig.savefig(accuracy_vs_params, metadata={"Software": "ktgraph"})
    plt.close(fig)

    print(f"wrote {accuracy_vs_nodes}")
    print(f"wrote {accuracy_vs_params}")
    return EXIT_OK


def cmd_presets(args) -> int:
    if args.action == "list":
        for name in list_presets():
            print(name)
        return EXIT_OK
    raise CliError(f"unknown presets action {args.action!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ktgraph",
        description="Train and search knowledge-transfer graphs of small image classifiers.",
    )
    parser.add_argument("--version", action="version", version=f"ktgraph {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, out_required=True):
        p.add_argument("--config", help="YAML config file")
        p.add_argument("--out", required=out_required, help="output directory")
        p.add_argument("--seed", type=int, help="override every configured seed")
        p.add_argument("--resume", action="store_true", help="continue into a non-empty output directory")
        p.add_argument("--parallel", type=int, help="worker count for search trials")
        p.add_argument(
            "--set",
            action="append",
            metavar="KEY=VALUE",
            help="override a config entry, e.g. --set train.epochs=4",
        )

    p = sub.add_parser("search", help="random graph search with pruning")
    add_common(p)
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("train", help="train one fixed graph, no pruning")
    add_common(p)
    p.add_argument("--graph", help="graph document (JSON)")
    p.add_argument("--preset", help="preset name, e.g. dml-2")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a finished training run")
    p.add_argument("--run", required=True, help="directory produced by `ktgraph train`")
    p.add_argument("--split", default="test", choices=["train", "test"])
    p.add_argument("--config", help="YAML config file (dataset section)")
    p.add_argument("--seed", type=int)
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--out", help="also write the result JSON here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export-dot", help="render a graph document as DOT")
    p.add_argument("--graph", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_export_dot)

    p = sub.add_parser("plot", help="plot curves from trial logs")
    p.add_argument("--log", action="append", required=True, help="trial log (repeatable)")
    p.add_argument("--out", required=True, help="directory for figures")
    p.set_defaults(func=cmd_plot)

    p = sub.add_parser("presets", help="preset graph catalogue")
    p.add_argument("action", choices=["list"])
    p.set_defaults(func=cmd_presets)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code
    except (GraphParseError, GraphSchemaError, InvalidGraphError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
