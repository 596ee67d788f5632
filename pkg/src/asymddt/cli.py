"""Command-line front end: teacher -> dataset -> tree -> report, one file-mediated stage each.

Settings come from an INI file with sections ``[env]``, ``[teacher]``,
``[dataset]``, ``[distill]`` and ``[compare]``; ``--seed`` and the
per-command flags override it. Every command writes the fully resolved
settings to ``<out>/<command>.resolved.ini`` so the run can be repeated
with ``--config`` pointing at that snapshot.

Exit codes: 0 success, 1 usage or configuration error, 2 data or
validation error, 3 numerical fault.
"""

from __future__ import annotations

import argparse
import configparser
import hashlib
import io
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .distill import (
    DistillConfig,
    DistillError,
    NumericalFault,
    distill_asymmetric,
    distill_full,
    load_dataset,
    save_dataset,
    write_trace_csv,
)
from .evaluation import (
    PAPER_BUDGETS,
    ComparisonConfigError,
    compare_budgets,
    evaluate_teacher,
    evaluate_tree,
    full_depth_for,
)
from .teacher import (
    TEST_DAYS,
    TRAIN_DAYS,
    TeacherFormatError,
    TeacherTrainConfig,
    generate_dataset,
    load_external_teacher,
    save_teacher,
    teacher_train,
    write_curve,
)
from .thermal import ACTION_NAMES, FEATURE_NAMES, EnvConfig, EnvFault
from .tree import TreeError, export_dot, harden, load_tree, save_tree, serialize_tree

log = logging.getLogger("asymddt")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class ConfigError(ValueError):
    pass


class UsageError(Exception):
    pass


@dataclass(frozen=True)
class DatasetSettings:
    tau: float = 1.0
    train_days: int = TRAIN_DAYS
    test_days: int = TEST_DAYS


@dataclass(frozen=True)
class CompareSettings:
    budgets: tuple = PAPER_BUDGETS
    n_seeds: int = 5


@dataclass
class RunConfig:
    env: EnvConfig = field(default_factory=EnvConfig)
    teacher: TeacherTrainConfig = field(default_factory=TeacherTrainConfig)
    dataset: DatasetSettings = field(default_factory=DatasetSettings)
    distill: DistillConfig = field(default_factory=DistillConfig)
    compare: CompareSettings = field(default_factory=CompareSettings)

    SECTIONS = ("env", "teacher", "dataset", "distill", "compare")

    def to_ini(self) -> str:
        parser = configparser.ConfigParser()
        for name in self.SECTIONS:
            parser[name] = {k: _format_value(v) for k, v in asdict(getattr(self, name)).items()}
        buf = io.StringIO()
        parser.write(buf)
        return buf.getvalue()


def _format_value(v) -> str:
    if isinstance(v, (tuple, list)):
        return ", ".join(_format_value(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _coerce(raw: str, default, key: str):
    try:
        if isinstance(default, bool):
            low = raw.strip().lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            items = [s.strip() for s in raw.split(",") if s.strip()]
            kind = type(default[0]) if default else float
            return tuple(kind(s) for s in items)
        return raw.strip()
    except ValueError as exc:
        raise ConfigError(f"bad value for {key!r}: {raw!r}") from exc


def _section(obj, section: dict, name: str):
    defaults = {f.name: getattr(obj, f.name) for f in fields(obj)}
    kw = {}
    for key, raw in section.items():
        if key not in defaults:
            raise ConfigError(f"unknown key {key!r} in [{name}]")
        kw[key] = _coerce(raw, defaults[key], f"{name}.{key}")
    try:
        return replace(obj, **kw)
    except (ValueError, DistillError) as exc:
        raise ConfigError(f"[{name}]: {exc}") from exc


def load_run_config(path=None) -> RunConfig:
    cfg = RunConfig()
    if path is None:
        return cfg
    parser = configparser.ConfigParser()
    try:
        ok = parser.read(path)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    if not ok:
        raise ConfigError(f"config file not found: {path}")
    for name in parser.sections():
        if name not in RunConfig.SECTIONS:
            raise ConfigError(f"unknown config section [{name}]")
        setattr(cfg, name, _section(getattr(cfg, name), dict(parser[name]), name))
    return cfg


def env_hash(env: EnvConfig) -> str:
    return hashlib.sha256(json.dumps(asdict(env), sort_keys=True).encode()).hexdigest()[:16]


# commands ---------------------------------------------------------------------

def _apply_overrides(cfg: RunConfig, args) -> RunConfig:
    if getattr(args, "seed", None) is not None:
        cfg.teacher = replace(cfg.teacher, seed=args.seed)
        cfg.distill = replace(cfg.distill, seed=args.seed)
    if getattr(args, "episodes", None) is not None:
        cfg.teacher = replace(cfg.teacher, episodes=args.episodes)
    if getattr(args, "tau", None) is not None:
        if not args.tau > 0:
            raise ConfigError("--tau must be positive")
        cfg.dataset = replace(cfg.dataset, tau=args.tau)
    if getattr(args, "budgets", None):
        cfg.compare = replace(cfg.compare, budgets=tuple(args.budgets))
    if getattr(args, "n_seeds", None) is not None:
        cfg.compare = replace(cfg.compare, n_seeds=args.n_seeds)
    return cfg


def _snapshot(out: Path, command: str, cfg: RunConfig):
    out.mkdir(parents=True, exist_ok=True)
    (out / f"{command}.resolved.ini").write_text(cfg.to_ini())


def _require(path) -> Path:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"required artifact missing: {p}")
    return p


def cmd_train_teacher(cfg: RunConfig, out: Path, args) -> int:
    model, curve = teacher_train(cfg.env, cfg.teacher)
    save_teacher(model, out / "teacher.jsonl")
    write_curve(out / "teacher_curve.csv", curve)
    log.info("teacher: %d table entries -> %s", len(model.q_values), out / "teacher.jsonl")
    return EXIT_OK


def cmd_gen_dataset(cfg: RunConfig, out: Path, args) -> int:
    teacher = load_external_teacher(_require(args.teacher or out / "teacher.jsonl"))
    ds = cfg.dataset
    train = generate_dataset(teacher, cfg.env, ds.train_days, ds.tau, start_day=0)
    test = generate_dataset(teacher, cfg.env, ds.test_days, ds.tau, start_day=ds.train_days,
                            scaling=train.scaling)
    for d in (train, test):
        d.meta.update(env_hash=env_hash(cfg.env), teacher_seed=cfg.teacher.seed)
    save_dataset(train, out / "train.jsonl")
    save_dataset(test, out / "test.jsonl")
    log.info("datasets: %d train / %d test samples", len(train), len(test))
    return EXIT_OK


def cmd_distill(cfg: RunConfig, out: Path, args) -> int:
    train = load_dataset(_require(args.train or out / "train.jsonl"))
    nodes = args.nodes or cfg.distill.max_decision_nodes
    if nodes < 1:
        raise ConfigError("--nodes must be >= 1")
    dcfg = replace(cfg.distill, max_decision_nodes=nodes)
    cfg.distill = dcfg
    if args.mode == "full":
        tree, trace = distill_full(train, full_depth_for(nodes), dcfg)
    else:
        tree, trace = distill_asymmetric(train, dcfg)
    stem = f"tree_{args.mode}_{nodes}"
    save_tree(tree, out / f"{stem}.json")
    save_tree(harden(tree), out / f"{stem}_hardened.json")
    write_trace_csv(trace, out / f"{stem}_trace.csv")
    if trace.stop_reason:
        log.warning("stopped early: %s", trace.stop_reason)
    log.info("%s tree: %d decision nodes, depth %d, final loss %.6g", args.mode,
             tree.n_internal, tree.max_depth, trace.final_loss)
    return EXIT_OK


def cmd_evaluate(cfg: RunConfig, out: Path, args) -> int:
    test = load_dataset(_require(args.test or out / "test.jsonl"))
    start = int(test.meta.get("start_day", cfg.dataset.train_days))
    days = int(test.meta.get("days", cfg.dataset.test_days))
    reports = []
    if args.tree:
        tree = load_tree(_require(args.tree))
        reports.append(evaluate_tree(tree, test, cfg.env, days, start, name=Path(args.tree).stem))
    if args.teacher:
        teacher = load_external_teacher(_require(args.teacher))
        reports.append(evaluate_teacher(teacher, cfg.env, days, start))
    if not reports:
        raise UsageError("evaluate needs --tree and/or --teacher")
    doc = {"schema_version": 1, "env_seed": cfg.env.seed, "reports": [r.to_dict() for r in reports]}
    (out / "evaluation.json").write_text(json.dumps(doc, indent=1))
    with open(out / "evaluation_daily.csv", "w") as fh:
        fh.write("policy,mode,seed,day,reward\n")
        for r in reports:
            for day, v in enumerate(r.daily_rewards):
                fh.write(f"{r.policy},{r.mode},{cfg.env.seed},{day},{v!r}\n")
    for r in reports:
        log.info("%s (%s): mean daily reward %.3f", r.policy, r.mode, r.summary["mean"])
    return EXIT_OK


def _run_compare(cfg: RunConfig, out: Path, train_path, test_path, teacher_path):
    train = load_dataset(_require(train_path))
    test = load_dataset(_require(test_path))
    teacher = load_external_teacher(_require(teacher_path))
    trees_dir = out / "trees"
    trees_dir.mkdir(parents=True, exist_ok=True)

    def sink(budget, method, seed, tree, trace):
        save_tree(tree, trees_dir / f"{method}_{budget}_seed{seed}.json")
        write_trace_csv(trace, trees_dir / f"{method}_{budget}_seed{seed}_trace.csv")

    base = cfg.distill.seed
    seeds = range(base, base + cfg.compare.n_seeds)
    start = int(test.meta.get("start_day", cfg.dataset.train_days))
    days = int(test.meta.get("days", cfg.dataset.test_days))
    matrix = compare_budgets(train, test, cfg.env, teacher, cfg.compare.budgets, seeds,
                             cfg.distill, days, start, tree_sink=sink)
    matrix.write(out / "comparison.json", out / "daily_rewards.csv")
    (out / "timings.json").write_text(json.dumps(matrix.timings, indent=1))
    return matrix


def cmd_compare(cfg: RunConfig, out: Path, args) -> int:
    for b in cfg.compare.budgets:
        full_depth_for(b)
    matrix = _run_compare(cfg, out, args.train or out / "train.jsonl",
                          args.test or out / "test.jsonl", args.teacher or out / "teacher.jsonl")
    _log_matrix(matrix)
    return EXIT_OK


def _log_matrix(matrix):
    log.info("teacher mean daily reward %.3f; always-off %.3f",
             matrix.teacher.summary["mean"], matrix.always_off.summary["mean"])
    for b in matrix.budgets:
        parts = []
        for method in ("full", "asymmetric"):
            for mode in ("soft", "hardened"):
                parts.append(f"{method}/{mode} {np.mean(matrix.pooled(b, method, mode)):.3f}")
        log.info("budget %d: %s", b, ", ".join(parts))


def cmd_export(cfg: RunConfig, out: Path, args) -> int:
    tree = load_tree(_require(args.tree))
    stem = Path(args.tree).stem
    if args.format == "json":
        target = Path(args.output) if args.output else out / f"{stem}.export.json"
        target.write_text(json.dumps(serialize_tree(tree), indent=1))
    else:
        target = Path(args.output) if args.output else out / f"{stem}.dot"
        target.write_text(export_dot(tree, list(FEATURE_NAMES), list(ACTION_NAMES)))
    log.info("wrote %s", target)
    return EXIT_OK


def cmd_reproduce(cfg: RunConfig, out: Path, args) -> int:
    """Teacher training, dataset generation and the budget comparison with current settings."""
    for b in cfg.compare.budgets:
        full_depth_for(b)
    ns = argparse.Namespace(teacher=None, train=None, test=None)
    cmd_train_teacher(cfg, out, ns)
    cmd_gen_dataset(cfg, out, ns)
    matrix = _run_compare(cfg, out, out / "train.jsonl", out / "test.jsonl", out / "teacher.jsonl")
    _log_matrix(matrix)
    return EXIT_OK


COMMANDS = {
    "train-teacher": cmd_train_teacher,
    "gen-dataset": cmd_gen_dataset,
    "distill": cmd_distill,
    "evaluate": cmd_evaluate,
    "compare": cmd_compare,
    "export": cmd_export,
    "reproduce": cmd_reproduce,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="INI settings file")
    common.add_argument("--seed", type=int, metavar="N", help="teacher and distillation seed")
    common.add_argument("--out", metavar="DIR", default="runs", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="asymddt", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train-teacher", parents=[common], help="train the tabular Q-learning teacher")
    p.add_argument("--episodes", type=int)

    p = sub.add_parser("gen-dataset", parents=[common], help="roll out the teacher into datasets")
    p.add_argument("--teacher", metavar="PATH")
    p.add_argument("--tau", type=float, help="softmax temperature for targets")

    p = sub.add_parser("distill", parents=[common], help="distill one tree")
    p.add_argument("--train", metavar="PATH")
    p.add_argument("--mode", choices=("asymmetric", "full"), default="asymmetric")
    p.add_argument("--nodes", type=int, help="decision-node budget")

    p = sub.add_parser("evaluate", parents=[common], help="roll out a tree and/or teacher")
    p.add_argument("--tree", metavar="PATH")
    p.add_argument("--teacher", metavar="PATH")
    p.add_argument("--test", metavar="PATH")

    for name, text in (("compare", "full vs asymmetric trees per budget"),
                       ("reproduce", "teacher, datasets and comparison in one go")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("--budgets", type=int, nargs="+")
        p.add_argument("--n-seeds", type=int, dest="n_seeds")
        if name == "compare":
            p.add_argument("--train", metavar="PATH")
            p.add_argument("--test", metavar="PATH")
            p.add_argument("--teacher", metavar="PATH")
        else:
            p.add_argument("--episodes", type=int)
            p.add_argument("--tau", type=float)

    p = sub.add_parser("export", parents=[common], help="write a tree as JSON or Graphviz DOT")
    p.add_argument("--tree", metavar="PATH", required=True)
    p.add_argument("--format", choices=("json", "dot"), default="dot")
    p.add_argument("--output", metavar="PATH")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _apply_overrides(load_run_config(args.config), args)
        out = Path(args.out)
        _snapshot(out, args.command, cfg)
        code = COMMANDS[args.command](cfg, out, args)
        _snapshot(out, args.command, cfg)
        return code
    except (ConfigError, ComparisonConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalFault, EnvFault, FloatingPointError) as exc:
        print(f"numerical fault: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FileNotFoundError, TeacherFormatError, TreeError, DistillError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
