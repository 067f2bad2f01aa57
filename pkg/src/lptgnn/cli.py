"""Command-line entry point: train, eval, inspect-topology and reproduce.

Exit codes: 0 success, 1 configuration error, 2 data error, 3 numerical
abort. Every failure prints a one-line diagnostic on standard error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import platform
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import __version__
from . import encoders as enc
from . import train as tr
from .autodiff import ContractError, TrainingError
from .graphio import (
    DataError,
    align_domains,
    default_data_root,
    parse_tudataset,
    reencode_node_labels,
    split_by_edge_density,
    split_manifest,
    split_subpopulation_shift,
    write_manifest,
)
from .topology import (
    FILTRATIONS,
    TopologyConfig,
    diagram_json,
    filtration_window,
    graph_diagrams,
    image_json,
    persistence_image,
)

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 1, 2, 3
SPLITS = ("pair", "quartiles", "subpopulation")
SEEDS = (0, 1, 2, 3, 4)
SHORT_NAMES = {"PROTEINS": "P", "DD": "D", "COX2": "C", "COX2_MD": "CM", "BZR": "B", "BZR_MD": "BM"}
ARROW = "→"


class ConfigError(ValueError):
    pass


# ------------------------------------------------------------------ config


@dataclass
class DataConfig:
    root: str = ""
    source: str = "MUTAG"
    target: str = ""
    split: str = "subpopulation"
    source_block: str = "M0"
    target_block: str = "M1"
    target_fraction: float = 1 / 3
    task: str = ""

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ConfigError(f"data.split must be one of {SPLITS}, got {self.split!r}")
        if self.split == "pair" and not self.target:
            raise ConfigError("data.target is required for a pair split")
        blocks = ("M0", "M1", "M2", "M3")
        if self.split == "quartiles" and (
            self.source_block not in blocks or self.target_block not in blocks
        ):
            raise ConfigError(f"quartile blocks must be among {blocks}")
        if not self.root:
            self.root = default_data_root()

    def task_name(self):
        if self.task:
            return self.task
        if self.split == "pair":
            return f"{SHORT_NAMES.get(self.source, self.source)}{ARROW}{SHORT_NAMES.get(self.target, self.target)}"
        if self.split == "quartiles":
            return f"{self.source_block}{ARROW}{self.target_block}"
        return f"{self.source} 1:2{ARROW}2:1"


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    train: tr.TrainConfig = field(default_factory=tr.TrainConfig)
    gcn: enc.GCNBranchConfig = field(default_factory=enc.GCNBranchConfig)
    topo: enc.TopoBranchConfig = field(default_factory=enc.TopoBranchConfig)
    rep_dim: int = 32
    seed: int = 0
    out: str = "runs/default"

    def with_seed(self, seed):
        self.seed = int(seed)
        self.train.seed = int(seed)
        return self

    def to_dict(self):
        return {
            "seed": self.seed,
            "out": self.out,
            "data": asdict(self.data),
            "train": {k: v for k, v in self.train.to_dict().items() if k != "seed"},
            "model": {
                "rep_dim": self.rep_dim,
                "gcn": asdict(self.gcn),
                "topo": {k: v for k, v in asdict(self.topo).items() if k != "topology"},
            },
            "topology": asdict(self.topo.topology),
        }


def _build(cls, table, where):
    if not isinstance(table, dict):
        raise ConfigError(f"[{where}] must be a table")
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(table) - names)
    if unknown:
        raise ConfigError(f"unknown key(s) in [{where}]: {', '.join(unknown)}")
    try:
        return cls(**table)
    except (TypeError, ContractError) as exc:
        raise ConfigError(f"[{where}]: {exc}") from None


def run_config_from_dict(doc):
    doc = dict(doc)
    known = {"seed", "out", "data", "train", "model", "topology"}
    unknown = sorted(set(doc) - known)
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
    model = dict(doc.get("model", {}))
    gcn = dict(model.pop("gcn", {}))
    topo = dict(model.pop("topo", {}))
    rep_dim = model.pop("rep_dim", 32)
    if model:
        raise ConfigError(f"unknown key(s) in [model]: {', '.join(sorted(model))}")
    train_table = dict(doc.get("train", {}))
    if train_table.get("patience") in (0, False):
        train_table["patience"] = None  # TOML has no null: 0 or false disables early stopping
    if "seed" in train_table:
        raise ConfigError("set the seed at top level, not in [train]")
    seed = doc.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        raise ConfigError(f"seed must be a non-negative integer, got {seed!r}")
    topology = _build(TopologyConfig, doc.get("topology", {}), "topology")
    cfg = RunConfig(
        data=_build(DataConfig, doc.get("data", {}), "data"),
        train=_build(tr.TrainConfig, {**train_table, "seed": seed}, "train"),
        gcn=_build(enc.GCNBranchConfig, gcn, "model.gcn"),
        topo=_build(enc.TopoBranchConfig, {**topo, "topology": topology}, "model.topo"),
        rep_dim=rep_dim,
        seed=seed,
        out=str(doc.get("out", "runs/default")),
    )
    return cfg


def load_run_config(path):
    try:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return run_config_from_dict(doc)


# ------------------------------------------------------------------ data


def _dataset_dir(root, name):
    return Path(root) / name


def load_domains(data, seed):
    """(source, target) datasets for a data configuration; target labels kept for evaluation."""
    source_full = parse_tudataset(_dataset_dir(data.root, data.source), data.source)
    if data.split == "pair":
        target_full = parse_tudataset(_dataset_dir(data.root, data.target), data.target)
        return align_domains(source_full, target_full.as_role("target"))
    if data.split == "quartiles":
        blocks = {b.name: b for b in split_by_edge_density(source_full)}
        return blocks[data.source_block], blocks[data.target_block].as_role("target")
    return split_subpopulation_shift(source_full, seed, data.target_fraction)


def _file_digests(root, names):
    out = {}
    for name in names:
        for path in sorted(_dataset_dir(root, name).glob(f"{name}_*.txt")):
            out[f"{name}/{path.name}"] = hashlib.sha256(path.read_bytes()).hexdigest()
    return out


# ------------------------------------------------------------------ runs


def build_manifest(cfg, model_cfg, source, target):
    data = cfg.data
    names = [data.source] + ([data.target] if data.split == "pair" else [])
    return {
        "package_version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "task": data.task_name(),
        "config": cfg.to_dict(),
        "model": model_cfg.to_dict(),
        "split": split_manifest(data.source if data.split != "pair" else f"{data.source}/{data.target}",
                                data.split, cfg.seed, source, target),
        "dataset_sha256": _file_digests(data.root, names),
        "node_label_values": source.meta.get("node_label_values", []),
        "design": {
            "adjacency_normalisation": "symmetric D^-1/2 (A+I) D^-1/2",
            "gcn_layer_width": cfg.gcn.width,
            "representation_dim": cfg.rep_dim,
            "branch_combination": "elementwise mean",
            "node_readout": cfg.gcn.readout,
            "cnn": {"kernel": cfg.topo.kernel, "channels": cfg.topo.channels, "pool": cfg.topo.pool},
            "pi_window": "birth [min f, max f] x persistence [0, max f - min f]",
            "pi_bandwidth": "bandwidth_scale * window side / resolution",
            "essential_death": "max filtration value",
            "empty_neighbor_set": "skipped",
            "confidence": "max softmax probability",
            "argmax_ties": "lowest class index",
            "pseudo_labels": "recomputed every step, detached",
            "reg_normaliser": "full target batch size",
            "aux_batchnorm": cfg.train.aux_norm,
            "max_epochs": cfg.train.max_epochs,
            "patience": cfg.train.patience,
            "model_selection": "best target-accuracy epoch when patience triggers, else final epoch",
        },
    }


def run_training(cfg, out_dir):
    """Train and evaluate one configuration, writing every run artifact into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    source, target = load_domains(cfg.data, cfg.seed)
    model_cfg = tr.model_config(cfg.train, source.feature_width, source.class_count,
                                gcn=cfg.gcn, topo=cfg.topo, rep_dim=cfg.rep_dim)
    manifest = build_manifest(cfg, model_cfg, source, target)
    write_manifest(out / "manifest.json", manifest)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2) + "\n")
    with open(out / "metrics.jsonl", "w") as log:
        result = tr.train(source, target.unlabeled(), cfg.train, model_cfg,
                          log=lambda row: log.write(tr.metrics_line(row) + "\n"),
                          target_labels=target.labels)
    tr.save_checkpoint(out / "checkpoint.json", result.store, model_cfg, cfg.train, manifest)
    summary = {
        "task": manifest["task"],
        "accuracy": result.final_accuracy,
        "seed": cfg.seed,
        "epochs": len(result.metrics),
        "best_epoch": result.best_epoch,
        "stopped_early": result.stopped_early,
    }
    (out / "result.json").write_text(json.dumps(summary, indent=2, ensure_ascii=False) + "\n")
    return summary


def cmd_train(args):
    cfg = load_run_config(args.config)
    if args.seed is not None:
        cfg.with_seed(args.seed)
    out = args.out or cfg.out
    summary = run_training(cfg, out)
    print(json.dumps(summary, ensure_ascii=False))
    return 0


def cmd_eval(args):
    store, model_cfg, train_cfg, manifest = tr.load_checkpoint(args.checkpoint)
    if args.dataset:
        path = Path(args.dataset)
        dataset = parse_tudataset(path, args.name or path.name)
        values = dataset.meta.get("node_label_values") or []
        train_vocab = manifest.get("node_label_values") or []
        if values and train_vocab and set(values) <= set(train_vocab):
            dataset = reencode_node_labels(dataset, train_vocab)
        role = "dataset"
    else:
        cfg = run_config_from_dict(manifest["config"])
        source, target = load_domains(cfg.data, cfg.seed)
        dataset = source if args.role == "source" else target
        role = args.role
    if dataset.feature_width != model_cfg.feature_width:
        raise DataError(
            f"feature width mismatch: checkpoint expects {model_cfg.feature_width}, "
            f"dataset has {dataset.feature_width}"
        )
    if dataset.class_count > model_cfg.class_count:
        raise DataError(
            f"class count mismatch: checkpoint has {model_cfg.class_count}, dataset {dataset.class_count}"
        )
    acc = tr.evaluate(store, model_cfg, dataset, batch_size=train_cfg.eval_batch_size)
    print(json.dumps({"accuracy": acc, "graphs": len(dataset), "role": role, "dataset": dataset.name}))
    return 0


def cmd_inspect_topology(args):
    path = Path(args.dataset)
    dataset = parse_tudataset(path, args.name or path.name)
    if not 0 <= args.index < len(dataset):
        raise DataError(f"graph index {args.index} outside 0..{len(dataset) - 1}")
    kinds = FILTRATIONS if args.filtration == "all" else (args.filtration,)
    try:
        config = TopologyConfig(kinds, args.q, args.resolution, args.weight, args.bandwidth_scale)
    except ContractError as exc:
        raise ConfigError(str(exc)) from None
    graph = dataset.graphs[args.index]
    blocks = []
    for filt, dgms in graph_diagrams(graph, config):
        window = filtration_window(filt.values)
        bw = tuple(config.bandwidth_scale * (hi - lo) / config.resolution for lo, hi in window)
        blocks.append({
            "filtration": filt.kind,
            "values": filt.values.tolist(),
            "diagrams": [diagram_json(d) for d in dgms],
            "images": [image_json(persistence_image(d, config.resolution, bw, config.weight_kind, window))
                       for d in dgms],
        })
    doc = {
        "dataset": dataset.name,
        "index": args.index,
        "node_count": graph.node_count,
        "edges": graph.edges.tolist(),
        "topology": asdict(config),
        "filtrations": blocks,
    }
    text = json.dumps(doc)
    if args.out:
        Path(args.out).write_text(text + "\n")
    else:
        print(text)
    return 0


# ------------------------------------------------------------------ suites


VARIANTS = {
    "LP-GIN": {"encoder": "gin"},
    "LP-TGNN/Topo": {"disable_topo": True},
    "LP-TGNN/Conv": {"disable_conv": True},
    "LP-TGNN/Sup": {"disable_sup": True},
    "LP-TGNN/LP": {"disable_lp": True},
    "LP-TGNN": {},
}
QUARTILE_TASKS = [
    ("M0", "M1"), ("M1", "M0"), ("M0", "M2"), ("M2", "M0"), ("M0", "M3"), ("M3", "M0"),
    ("M1", "M2"), ("M2", "M1"), ("M1", "M3"), ("M3", "M1"), ("M2", "M3"), ("M3", "M2"),
]
PAIR_TASKS = [
    ("PROTEINS", "DD"), ("DD", "PROTEINS"), ("COX2", "COX2_MD"),
    ("COX2_MD", "COX2"), ("BZR", "BZR_MD"), ("BZR_MD", "BZR"),
]
MAJORITY = "Majority"


def suite_plan(name):
    """(list of data-config dicts, list of method names) for a reproduce suite."""
    if name == "synthetic":
        tasks = [{"source": "MUTAG", "split": "subpopulation"}]
        methods = list(VARIANTS)
    elif name == "mutagenicity":
        tasks = [{"source": "Mutagenicity", "split": "quartiles", "source_block": s, "target_block": t}
                 for s, t in QUARTILE_TASKS]
        methods = ["LP-GIN", "LP-TGNN"]
    elif name == "ablations":
        tasks = [{"source": "Mutagenicity", "split": "quartiles", "source_block": s, "target_block": t}
                 for s, t in QUARTILE_TASKS]
        methods = ["LP-TGNN/Topo", "LP-TGNN/Conv", "LP-TGNN/Sup", "LP-TGNN/LP", "LP-TGNN"]
    elif name == "benchmarks":
        tasks = [{"source": s, "target": t, "split": "pair"} for s, t in PAIR_TASKS]
        methods = [MAJORITY, "LP-GIN", "LP-TGNN"]
    else:
        raise ConfigError(f"unknown suite {name!r}; choose from benchmarks, mutagenicity, synthetic, ablations")
    return tasks, methods


def majority_accuracy(cfg):
    """Best constant-classifier accuracy on the target domain."""
    _, target = load_domains(cfg.data, cfg.seed)
    counts = target.class_counts()
    return max(counts) / sum(counts)


def _slug(text):
    return "".join(c if c.isalnum() or c in "-_" else "_" for c in text.replace(ARROW, "-to-"))


def fmt_pct(x):
    return "" if x is None or (isinstance(x, float) and math.isnan(x)) else f"{100 * x:.1f}"


def run_suite(name, out_dir, seeds=SEEDS, data_root=None, train_overrides=None, log=print):
    """Run a reproduce suite; returns (table rows, failures)."""
    tasks, methods = suite_plan(name)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    results = {}  # (method, task) -> list of accuracies
    failures = []
    task_names = []
    for task in tasks:
        data = DataConfig(root=data_root or "", **task)
        task_names.append(data.task_name())
        for method in methods:
            accs = []
            for seed in seeds:
                try:
                    train_cfg = tr.TrainConfig(**{**(train_overrides or {}),
                                                  **VARIANTS.get(method, {}), "seed": seed})
                    cfg = RunConfig(data=DataConfig(**asdict(data)), train=train_cfg).with_seed(seed)
                    if method == MAJORITY:
                        accs.append(majority_accuracy(cfg))
                        continue
                    run_dir = out / _slug(data.task_name()) / _slug(method) / f"seed{seed}"
                    accs.append(run_training(cfg, run_dir)["accuracy"])
                except (DataError, TrainingError, ContractError, ConfigError, OSError) as exc:
                    failures.append({"task": data.task_name(), "method": method, "seed": seed,
                                     "error": f"{type(exc).__name__}: {exc}"})
                    log(f"FAILED {data.task_name()} {method} seed {seed}: {exc}", file=sys.stderr)
                    break
            results[(method, data.task_name())] = accs if len(accs) == len(seeds) else None
    header = ["method"] + [c for t in task_names for c in (t, f"{t} std")] + ["Avg."]
    rows = []
    for method in methods:
        row = {"method": method}
        means = []
        for t in task_names:
            accs = results.get((method, t))
            if accs:
                means.append(float(np.mean(accs)))
                row[t] = fmt_pct(means[-1])
                row[f"{t} std"] = fmt_pct(float(np.std(accs)))
            else:
                row[t] = row[f"{t} std"] = ""
        row["Avg."] = fmt_pct(float(np.mean(means))) if len(means) == len(task_names) else ""
        rows.append(row)
    with open(out / "table.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=header, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    raw = {f"{m}|{t}": v for (m, t), v in results.items()}
    (out / "runs.json").write_text(json.dumps({"suite": name, "seeds": list(seeds), "accuracies": raw,
                                               "failures": failures}, indent=2) + "\n")
    return rows, failures


def cmd_reproduce(args):
    seeds = SEEDS if args.seeds is None else tuple(int(s) for s in args.seeds.split(","))
    overrides = {}
    if args.max_epochs is not None:
        overrides["max_epochs"] = args.max_epochs
    suite_plan(args.suite)  # validate before doing any work
    out = args.out or f"runs/{args.suite}"
    _, failures = run_suite(args.suite, out, seeds, args.data_root, overrides,
                            log=lambda *a, **k: print(*a, **k))
    print(Path(out, "table.csv").read_text(), end="")
    return 1 if failures else 0


# ------------------------------------------------------------------ main


def build_parser():
    parser = argparse.ArgumentParser(prog="lptgnn", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train on a source domain and evaluate on the target")
    p.add_argument("--config", required=True, help="TOML run configuration")
    p.add_argument("--seed", type=int, default=None, help="override the configured seed")
    p.add_argument("--out", default=None, help="output directory (default: config 'out')")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", default=None,
                   help="TUDataset directory; default: rebuild the run's own split")
    p.add_argument("--name", default=None, help="dataset file prefix (default: directory name)")
    p.add_argument("--role", choices=("target", "source"), default="target")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("inspect-topology", help="dump filtrations, diagrams and images of one graph")
    p.add_argument("--dataset", required=True, help="TUDataset directory")
    p.add_argument("--name", default=None)
    p.add_argument("--index", type=int, required=True, help="0-based graph index")
    p.add_argument("--filtration", default="all", help="all or one of " + ", ".join(FILTRATIONS))
    p.add_argument("--q", type=int, default=1, help="1: H0 only, 2: H0 and H1")
    p.add_argument("--resolution", type=int, default=50)
    p.add_argument("--weight", default="linear")
    p.add_argument("--bandwidth-scale", type=float, default=1.0)
    p.add_argument("--out", default=None, help="write JSON here instead of standard output")
    p.set_defaults(func=cmd_inspect_topology)

    p = sub.add_parser("reproduce", help="run a table suite over seeds 0-4")
    p.add_argument("--suite", required=True, help="benchmarks, mutagenicity, synthetic or ablations")
    p.add_argument("--out", default=None)
    p.add_argument("--seeds", default=None, help="comma-separated seed list (default 0,1,2,3,4)")
    p.add_argument("--data-root", default=None)
    p.add_argument("--max-epochs", type=int, default=None)
    p.set_defaults(func=cmd_reproduce)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ContractError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TrainingError as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    raise SystemExit(main())
