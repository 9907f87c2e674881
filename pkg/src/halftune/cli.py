"""``halftune`` command line: train, clrun, metrics, merge, analyze, bench.

Exit codes: 0 success, 2 configuration error, 3 numerical failure,
4 I/O error. ``HALFTUNE_OUT`` overrides the output directory and
``HALFTUNE_THREADS`` the BLAS thread count; flags win over both.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import __version__
from .analysis import runtime_report, variation_report, write_runtime_csv
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .continual import (DEFAULT_EPOCHS, EvalMatrix, MatrixError, RunConfig, bwt_score, op_score, pretrain,
                         run_sequence)
from .merge import StructureError, reset_strategies
from .model import ConfigError, Model, ModelConfig, build_model
from .selection import SelectionHistory, full_plan, make_plan, mask_stats
from .tasks import KINDS, TaskError, make_task, eval_exact_match
from .tensor import NonFiniteError
from .trainer import OptimizerConfig, TrainingError, train_round

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4
MASKS = {"fft": "fft", "hft-category": "category", "hft-layer": "layer", "hft-model": "model", "ratio": "ratio"}


@dataclass
class TaskSuiteConfig:
    kinds: list[str] = field(default_factory=lambda: list(KINDS))
    seed: int = 0
    train_size: int = 1920
    eval_size: int = 500
    min_len: int = 2
    max_len: int = 4

    def build(self, max_seq_len: int, seed: int | None = None, train_size: int | None = None,
              eval_size: int | None = None):
        seed = self.seed if seed is None else seed
        train_size = train_size or self.train_size
        eval_size = eval_size or self.eval_size
        return [make_task(k, seed, train_size, eval_size, min_len=self.min_len,
                          max_len=self.max_len, max_seq_len=max_seq_len) for k in self.kinds]


@dataclass
class PretrainSection:
    """Joint multi-task training that produces the base model; ``epochs=0`` starts from init.

    The pretraining data comes from its own task seed, so it is shared by
    runs that differ only in ``--seed``.
    """

    epochs: int = 10
    train_size: int = 1920
    seed: int = 1000


@dataclass
class RunSection:
    strategy: str = "seqft"
    masking: str = "fft"
    ratio: float | None = None
    freeze_io: bool = False
    replay_fraction: float = 0.10
    selection_seed: int = 0
    data_seed: int = 0
    init_seed: int = 0
    epochs: list[int] = field(default_factory=lambda: list(DEFAULT_EPOCHS))


@dataclass
class ExperimentConfig:
    model: ModelConfig = field(default_factory=lambda: ModelConfig(64, 64, 4, 4, 256, 16))
    tasks: TaskSuiteConfig = field(default_factory=TaskSuiteConfig)
    run: RunSection = field(default_factory=RunSection)
    pretrain: PretrainSection = field(default_factory=PretrainSection)
    optimizer: OptimizerConfig = field(default_factory=lambda: OptimizerConfig(learning_rate=1e-3, batch_size=16))
    out: str = "runs/default"

    def to_dict(self) -> dict:
        opt = dataclasses.asdict(self.optimizer)
        opt["betas"] = list(opt["betas"])
        return {"model": self.model.to_dict(), "tasks": dataclasses.asdict(self.tasks),
                "run": dataclasses.asdict(self.run), "pretrain": dataclasses.asdict(self.pretrain),
                "optimizer": opt, "out": self.out}

    def config_hash(self) -> str:
        body = self.to_dict()
        body.pop("out")
        text = json.dumps(body, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    def run_config(self) -> RunConfig:
        r = self.run
        return RunConfig(strategy=r.strategy, masking=r.masking, freeze_io=r.freeze_io, ratio=r.ratio,
                         replay_fraction=r.replay_fraction, selection_seed=r.selection_seed,
                         data_seed=r.data_seed, epochs=tuple(r.epochs), opt=self.optimizer)


def _section(cls, raw, label: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"{label} must be an object")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"{label}: unknown keys {sorted(unknown)}; allowed {sorted(known)}")
    try:
        return cls(**raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{label}: {exc}") from None


def parse_config(raw: dict) -> ExperimentConfig:
    """Validate a config mapping; missing sections and keys take defaults."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    unknown = set(raw) - {"model", "tasks", "run", "pretrain", "optimizer", "out"}
    if unknown:
        raise ConfigError(f"unknown top-level keys {sorted(unknown)}")
    cfg = ExperimentConfig()
    if "model" in raw:
        cfg.model = _section(ModelConfig, {**cfg.model.to_dict(), **raw["model"]}, "model")
    if "tasks" in raw:
        cfg.tasks = _section(TaskSuiteConfig, raw["tasks"], "tasks")
    if "run" in raw:
        cfg.run = _section(RunSection, raw["run"], "run")
    if "pretrain" in raw:
        cfg.pretrain = _section(PretrainSection, raw["pretrain"], "pretrain")
    if "optimizer" in raw:
        opt = dict(raw["optimizer"])
        if "betas" in opt:
            opt["betas"] = tuple(opt["betas"])
        base = dataclasses.asdict(cfg.optimizer)
        cfg.optimizer = _section(OptimizerConfig, {**base, **opt}, "optimizer")
    if "out" in raw:
        cfg.out = str(raw["out"])
    validate(cfg)
    return cfg


def validate(cfg: ExperimentConfig) -> None:
    t, r = cfg.tasks, cfg.run
    if not t.kinds:
        raise ConfigError("tasks.kinds must name at least one task")
    bad = [k for k in t.kinds if k not in KINDS]
    if bad:
        raise ConfigError(f"tasks.kinds: unknown {bad}; choose from {list(KINDS)}")
    if cfg.model.vocab_size < 64:
        raise ConfigError("model.vocab_size must be at least 64 for the synthetic suite")
    if 2 * t.max_len + 2 > cfg.model.max_seq_len:
        raise ConfigError(f"model.max_seq_len={cfg.model.max_seq_len} is too short for tasks.max_len={t.max_len} "
                          f"(needs {2 * t.max_len + 2})")
    pre = cfg.pretrain
    if not isinstance(pre.epochs, int) or pre.epochs < 0 or not isinstance(pre.train_size, int) \
            or pre.train_size <= 0:
        raise ConfigError("pretrain.epochs must be >= 0 and pretrain.train_size > 0")
    if not r.epochs or any((not isinstance(e, int)) or e < 0 for e in r.epochs):
        raise ConfigError("run.epochs must be a non-empty list of non-negative integers")
    if r.masking not in MASKS.values():
        raise ConfigError(f"run.masking must be one of {sorted(MASKS.values())}")
    if r.masking == "ratio" and (r.ratio is None or not 0 <= r.ratio <= 1):
        raise ConfigError("run.masking=ratio requires run.ratio in [0, 1]")
    if r.masking in ("category", "layer") and cfg.model.n_layers % 2:
        raise ConfigError(f"{r.masking} masking needs an even model.n_layers")
    try:
        cfg.run_config()
    except ValueError as exc:
        raise ConfigError(f"run: {exc}") from None


def load_config(args) -> ExperimentConfig:
    raw = {}
    if getattr(args, "config", None):
        try:
            with open(args.config) as fh:
                raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{args.config}: invalid JSON ({exc})") from None
    cfg = parse_config(raw)
    if os.environ.get("HALFTUNE_OUT"):
        cfg.out = os.environ["HALFTUNE_OUT"]
    if getattr(args, "out", None):
        cfg.out = args.out
    if getattr(args, "mask", None):
        cfg.run.masking = MASKS[args.mask]
    if getattr(args, "ratio", None) is not None:
        cfg.run.ratio = args.ratio
        if not getattr(args, "mask", None):
            cfg.run.masking = "ratio"
    if getattr(args, "freeze_io", False):
        cfg.run.freeze_io = True
    if getattr(args, "seed", None) is not None:
        s = args.seed
        cfg.run.selection_seed = cfg.run.data_seed = cfg.run.init_seed = cfg.tasks.seed = s
    validate(cfg)
    return cfg


def _metadata(cfg: ExperimentConfig, round_index: int) -> dict:
    r = cfg.run
    return {"config_hash": cfg.config_hash(), "tool_version": __version__, "strategy": r.strategy,
            "masking": r.masking, "round": round_index,
            "seeds": {"init": r.init_seed, "selection": r.selection_seed, "data": r.data_seed,
                      "tasks": cfg.tasks.seed}}


def _prepare_out(cfg: ExperimentConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "config.json", "w") as fh:
        json.dump({**cfg.to_dict(), "config_hash": cfg.config_hash()}, fh, indent=2, sort_keys=True)
    return out


def _plan(cfg: ExperimentConfig, registry, round_index: int):
    r = cfg.run
    if r.masking == "fft":
        return full_plan(registry, round_index, r.selection_seed, r.freeze_io)
    return make_plan(r.masking, registry, round_index, r.selection_seed, r.freeze_io, r.ratio)


def base_model(cfg: ExperimentConfig, base_path=None) -> tuple[Model, dict]:
    """Load ``base_path`` or build from ``init_seed`` and run the configured pretraining."""
    if base_path:
        ck = load_checkpoint(base_path)
        if ck.config != cfg.model:
            raise ConfigError(f"base checkpoint model {ck.config} differs from the configured model {cfg.model}")
        return ck.model, {"base": str(base_path), **ck.metadata.get("pretrain", {})}
    model = build_model(cfg.model, cfg.run.init_seed)
    pre = cfg.pretrain
    info = {"epochs": pre.epochs, "train_size": pre.train_size, "seed": pre.seed}
    if pre.epochs:
        tasks = cfg.tasks.build(cfg.model.max_seq_len, seed=pre.seed, train_size=pre.train_size, eval_size=1)
        opt = dataclasses.replace(cfg.optimizer, epochs=pre.epochs)
        _, log = pretrain(model, tasks, opt, seed=pre.seed)
        info["steps"] = log.steps
        print(f"pretrain: {log.steps} steps, loss {log.losses[-1]:.4f}", file=sys.stderr)
    return model, info


def _save_base(model, cfg, info, out: Path) -> None:
    save_checkpoint(model, None, {**_metadata(cfg, 0), "pretrain": info}, out / "base.ckpt")


def cmd_train(args) -> int:
    cfg = load_config(args)
    out = _prepare_out(cfg)
    task = cfg.tasks.build(cfg.model.max_seq_len)[0]
    model, info = base_model(cfg, args.base)
    _save_base(model, cfg, info, out)
    plan = _plan(cfg, model.registry, 1)
    opt = dataclasses.replace(cfg.optimizer, epochs=cfg.run.epochs[0])
    _, log = train_round(model, plan, task.train, opt, seed=cfg.run.data_seed * 1000 + 1)
    matrix = EvalMatrix([task.name])
    matrix.set(1, 1, eval_exact_match(model, task))
    history = SelectionHistory([plan])
    save_checkpoint(model, history, _metadata(cfg, 1), out / "round_1.ckpt")
    log.to_jsonl(out / "train_log.jsonl")
    matrix.to_csv(out / "eval_matrix.csv")
    matrix.write_metrics(out / "metrics.json")
    with open(out / "plan.json", "w") as fh:
        json.dump(plan.to_json(), fh, indent=2)
    stats = mask_stats(plan, model.registry).summary()
    print(json.dumps({"task": task.name, "steps": log.steps, "final_loss": log.losses[-1] if log.steps else None,
                      "score": matrix.get(1, 1), **stats, "out": str(out)}, indent=2))
    return EXIT_OK


def cmd_clrun(args) -> int:
    cfg = load_config(args)
    if len(cfg.tasks.kinds) < 2:
        raise ConfigError("clrun needs at least two tasks")
    out = _prepare_out(cfg)
    tasks = cfg.tasks.build(cfg.model.max_seq_len)
    model, info = base_model(cfg, args.base)
    _save_base(model, cfg, info, out)
    base_scores = {t.name: eval_exact_match(model, t) for t in tasks}
    history = SelectionHistory()

    def on_round(t, model, plan, log):
        history.append(plan)
        save_checkpoint(model, history, _metadata(cfg, t), out / f"round_{t}.ckpt")
        log.to_jsonl(out / f"train_log_round_{t}.jsonl")
        last = log.losses[-1] if log.steps else float("nan")
        print(f"round {t}: {log.steps} steps, loss {last:.4f}", file=sys.stderr)

    result = run_sequence(model, tasks, cfg.run_config(), on_round=on_round)
    result.matrix.to_csv(out / "eval_matrix.csv")
    result.matrix.write_metrics(out / "metrics.json")
    print(json.dumps({**result.matrix.metrics(), "base_scores": base_scores, "out": str(out)}, indent=2))
    return EXIT_OK


def cmd_metrics(args) -> int:
    try:
        matrix = EvalMatrix.from_csv(args.csv)
    except OSError as exc:
        raise CheckpointError(str(exc)) from exc
    t = args.t if args.t is not None else matrix.rounds_complete
    if t < 1:
        raise MatrixError("no complete rounds in the matrix")
    out = {"t": t, "op": op_score(matrix, t), "bwt": bwt_score(matrix, t) if t >= 2 else None}
    print(json.dumps(out))
    return EXIT_OK


def cmd_merge(args) -> int:
    ft = load_checkpoint(args.theta_ft)
    base = load_checkpoint(args.theta_0)
    merged = reset_strategies(ft.registry, base.registry, args.strategy, args.seed, reset_io=args.reset_io)
    plan = make_plan(args.strategy, ft.registry, 1, args.seed, freeze_io=args.reset_io)
    stats = mask_stats(plan, ft.registry)
    meta = {**ft.metadata, "merge": {"strategy": args.strategy, "seed": args.seed, "reset_io": args.reset_io,
                                     "theta_ft": str(args.theta_ft), "theta_0": str(args.theta_0)}}
    target = Model(ft.config, merged) if ft.config is not None else merged
    save_checkpoint(target, ft.history, meta, args.out)
    report = {"strategy": args.strategy, "reset_fraction_layers": f"{float(1 - stats.layers_fraction):.4f}",
              "reset_fraction_total": f"{float(1 - stats.total_fraction):.4f}",
              "exact_half": stats.exact_half, "out": str(args.out)}
    print(json.dumps(report, indent=2))
    return EXIT_OK


def cmd_analyze(args) -> int:
    final = load_checkpoint(args.final)
    base = load_checkpoint(args.base)
    history = final.history
    if args.history:
        with open(args.history) as fh:
            history = SelectionHistory.from_json(json.load(fh), final.registry.names())
    fft = load_checkpoint(args.fft).registry if args.fft else None
    report = variation_report(final.registry, base.registry, history, fft, args.norm)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report.write_blocks_csv(out / "variation_blocks.csv")
    fft_mean = None if fft is None else sum(report.fft_blocks.values()) / len(report.fft_blocks)
    report.write_times_csv(out / "variation_selected_times.csv", fft_mean)
    summary = {"by_selected_times": report.by_times, "bucket_sizes": report.bucket_sizes, "out": str(out)}
    if len(report.by_times) >= 2:
        summary["spearman"] = report.spearman()
    print(json.dumps(summary, indent=2))
    return EXIT_OK


def cmd_bench(args) -> int:
    cfg = load_config(args)
    out = _prepare_out(cfg)
    task = cfg.tasks.build(cfg.model.max_seq_len)[0]
    opt = dataclasses.replace(cfg.optimizer, epochs=max(1, -(-args.steps * cfg.optimizer.batch_size
                                                              // len(task.train))))
    runs = []
    for ratio in args.ratios:
        model = build_model(cfg.model, cfg.run.init_seed)
        plan = make_plan("ratio", model.registry, 1, cfg.run.selection_seed, cfg.run.freeze_io, ratio)
        _, log = train_round(model, plan, task.train, opt, seed=cfg.run.data_seed, max_steps=args.steps)
        runs.append((ratio, log))
    rows = runtime_report(runs)
    write_runtime_csv(rows, out / "runtime.csv")
    for r in rows:
        print(f"{r.ratio:5.2f}  trainable {r.trainable_percent:6.2f}%  wall {r.wall_percent:6.1f}% of FFT")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="halftune", description="Half fine-tuning experiments on a toy transformer")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("--threads", type=int, default=None, help="BLAS threads (default: HALFTUNE_THREADS or 1)")
    sub = p.add_subparsers(dest="command", required=True)

    def run_flags(sp):
        sp.add_argument("--config", help="JSON experiment config")
        sp.add_argument("--mask", choices=sorted(MASKS), help="parameter selection for each round")
        sp.add_argument("--ratio", type=float, help="trainable fraction for --mask ratio")
        sp.add_argument("--freeze-io", action="store_true", help="also freeze embedding and output head")
        sp.add_argument("--seed", type=int, help="set every seed (init, selection, data, tasks)")
        sp.add_argument("--out", help="output directory")

    def base_flag(sp):
        sp.add_argument("--base", help="start from this checkpoint instead of init + pretraining")

    sp = sub.add_parser("train", help="one training round on the first task")
    run_flags(sp)
    base_flag(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("clrun", help="sequential run over the task list")
    run_flags(sp)
    base_flag(sp)
    sp.set_defaults(func=cmd_clrun)

    sp = sub.add_parser("metrics", help="OP and BWT from an eval-matrix CSV")
    sp.add_argument("csv")
    sp.add_argument("--t", type=int, help="round (default: last complete round)")
    sp.set_defaults(func=cmd_metrics)

    sp = sub.add_parser("merge", help="Half-Reset a fine-tuned checkpoint toward its base")
    sp.add_argument("theta_ft")
    sp.add_argument("theta_0")
    sp.add_argument("--strategy", choices=("model", "layer", "category"), default="category")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--reset-io", action="store_true", help="also reset embedding and output head")
    sp.add_argument("--out", required=True, help="merged checkpoint path")
    sp.set_defaults(func=cmd_merge)

    sp = sub.add_parser("analyze", help="parameter drift of a final checkpoint against its base")
    sp.add_argument("final")
    sp.add_argument("base")
    sp.add_argument("--fft", help="paired full fine-tuning checkpoint for baseline values")
    sp.add_argument("--history", help="selection history JSON (default: the one stored in FINAL)")
    sp.add_argument("--norm", choices=("mean_abs", "l2"), default="mean_abs")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_analyze)

    sp = sub.add_parser("bench", help="wall time across a trainable-ratio ladder")
    run_flags(sp)
    sp.add_argument("--steps", type=int, default=50)
    sp.add_argument("--ratios", type=float, nargs="+", default=[i / 10 for i in range(1, 11)])
    sp.set_defaults(func=cmd_bench)
    return p


def _threads(args) -> int:
    if args.threads is not None:
        return args.threads
    env = os.environ.get("HALFTUNE_THREADS")
    if env:
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"HALFTUNE_THREADS must be an integer, got {env!r}") from None
    return 1


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        threads = _threads(args)
        if threads < 1:
            raise ConfigError("thread count must be at least 1")
        with threadpool_limits(limits=threads):
            return args.func(args)
    except (ConfigError, TaskError, MatrixError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingError, NonFiniteError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (CheckpointError, StructureError, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
