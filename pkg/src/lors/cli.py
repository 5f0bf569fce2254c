"""Command-line front end: ``lors {budget,gradcheck,train,compare,dump-config}``.

Exit codes: 0 success, 1 check or parity failure, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import budget, gradchecks
from . import config as cfgmod
from .autodiff import injected_fault
from .decoder import ConfigError, MixerDecoder
from .encoder import Encoder
from .training import RunRecord, compare_runs, config_hash, make_task, train

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
DEFAULT_OUT = "runs"
log = logging.getLogger("lors")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _int_list(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="lors", description="LORS parameter budgets, gradient checks and toy training runs.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    b = sub.add_parser("budget", help="closed-form parameter budgets over a list of ranks")
    b.add_argument("--paper-defaults", action="store_true", help="print both reference tables")
    b.add_argument("--kind", choices=budget.KINDS)
    b.add_argument("--d", type=int)
    b.add_argument("--h", type=int)
    b.add_argument("--d-q", type=int, dest="d_q")
    b.add_argument("--K", type=_int_list, help="group count, or a per-layer schedule like 1,1,2,2,3,3")
    b.add_argument("--N", type=int)
    b.add_argument("--r", type=_int_list, help="comma-separated ranks")
    b.add_argument("--format", choices=("text", "csv", "json"), default="text")
    b.add_argument("--out", help="write the report to this file instead of stdout")

    g = sub.add_parser("gradcheck", help="finite-difference gradient check")
    g.add_argument("--target", choices=gradchecks.TARGETS, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--max-entries", type=int, default=24, help="entries sampled per parameter (0 = all)")
    g.add_argument("--inject-fault", action="store_true", help=argparse.SUPPRESS)

    for name, help_text in (("train", "train the configured model"), ("compare", "train dense and LORS twins and compare")):
        t = sub.add_parser(name, help=help_text)
        t.add_argument("--config", help="INI experiment config")
        t.add_argument("--out", help=f"output directory (default: $LORS_OUT_DIR or ./{DEFAULT_OUT})")
        t.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE", help="override a config value")
        t.add_argument("--seeds", type=_int_list, help="override [experiment] seeds")
        t.add_argument("--jobs", type=int, default=1, help="independent runs in parallel")
        if name == "compare":
            t.add_argument("--ablation", action="store_true", help="also run shared_only and private_only students")
            t.add_argument("--min-pass", type=int, help="seeds that must reach parity (default: all)")

    d = sub.add_parser("dump-config", help="print a config document")
    src = d.add_mutually_exclusive_group(required=True)
    src.add_argument("--defaults", action="store_true")
    src.add_argument("--config")
    return parser


# -- budget -----------------------------------------------------------------
def cmd_budget(args) -> int:
    if args.paper_defaults:
        static, adaptive = budget.reference_tables()
        if args.format == "text":
            text = budget.format_text(static, "LORS^T (static)") + "\n\n" + budget.format_text(adaptive, "LORS^A (adaptive)") + "\n"
        elif args.format == "csv":
            text = budget.format_csv(static + adaptive)
        else:
            text = budget.format_json(static + adaptive) + "\n"
    else:
        missing = [f"--{n.replace('_', '-')}" for n in ("kind", "d", "h", "K", "N", "r") if getattr(args, n) is None]
        if args.kind == "adaptive" and args.d_q is None:
            missing.append("--d-q")
        if missing:
            raise UsageError(f"lors budget: error: missing required arguments: {' '.join(missing)}")
        K = args.K[0] if len(args.K) == 1 else tuple(args.K)
        try:
            q = budget.BudgetQuery(args.kind, args.d, args.h, args.r[0] if args.r else 0, K, args.N, args.d_q)
            rows = budget.table_report(args.r, q)
        except ValueError as exc:
            raise UsageError(f"lors budget: error: {exc}") from None
        if args.format == "text":
            text = budget.format_text(rows, mega=False) + "\n"
        elif args.format == "csv":
            text = budget.format_csv(rows)
        else:
            text = budget.format_json(rows) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK


# -- gradcheck --------------------------------------------------------------
def cmd_gradcheck(args) -> int:
    max_entries = args.max_entries or None
    if args.inject_fault:
        with injected_fault():
            report = gradchecks.run(args.target, args.seed, max_entries)
    else:
        report = gradchecks.run(args.target, args.seed, max_entries)
    print(f"target={args.target} seed={args.seed}")
    print(report.format())
    if not report.passed:
        worst = report.worst
        print(f"worst offender: {worst.name} rel={worst.max_rel_error:.3e}", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


# -- train / compare --------------------------------------------------------
def _load_config(args) -> cfgmod.ExperimentConfig:
    cfg = cfgmod.load(args.config) if args.config else cfgmod.ExperimentConfig()
    overrides = list(args.set)
    if args.seeds:
        overrides.append("experiment.seeds=" + ",".join(map(str, args.seeds)))
    return cfgmod.apply_overrides(cfg, overrides) if overrides else cfg


def _out_dir(args) -> Path:
    return Path(args.out or os.environ.get("LORS_OUT_DIR") or DEFAULT_OUT)


def build_model(cfg: cfgmod.ExperimentConfig, seed: int, weight_mode: str | None = None, lors_mode: str | None = None):
    changes = {}
    if weight_mode is not None:
        changes["weight_mode"] = weight_mode
    if lors_mode is not None:
        changes["lors_mode"] = lors_mode
    if cfg.experiment.task == "regression_stack":
        return MixerDecoder(cfg.stack.replace(**changes), seed=seed)
    enc = cfg.encoder_config()
    if weight_mode == "dense":
        changes["plan"] = None
    return Encoder(enc.replace(**changes), seed=seed)


def build_task(cfg: cfgmod.ExperimentConfig, seed: int):
    e = cfg.experiment
    shape = cfg.stack if e.task == "regression_stack" else cfg.encoder_config()
    return make_task(e.task, seed, shape, eval_size=e.eval_size, teacher_gain=e.teacher_gain)


_last_task: dict[tuple[str, int], object] = {}


def _task_for(cfg_text: str, cfg: cfgmod.ExperimentConfig, seed: int):
    # Twins of one seed run back to back; reusing the task reuses its cached teacher outputs.
    key = (cfg_text, seed)
    if key not in _last_task:
        _last_task.clear()
        _last_task[key] = build_task(cfg, seed)
    return _last_task[key]


def run_one(cfg_text: str, seed: int, weight_mode: str | None, lors_mode: str | None, label: str, out_dir: str) -> dict:
    """One training run; takes the config as text so it can cross process boundaries."""
    cfg = cfgmod.parse(cfg_text)
    task = _task_for(cfg_text, cfg, seed)
    model = build_model(cfg, seed, weight_mode, lors_mode)
    train_cfg = cfg.train
    train_cfg.seed = seed
    record = train(model, task, train_cfg, label)
    record.write(out_dir, model)
    return record.to_dict()


def _run_all(jobs: list[tuple], n_workers: int) -> list[RunRecord]:
    if n_workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=n_workers) as pool:
            results = list(pool.map(run_one, *zip(*jobs)))
    else:
        results = [run_one(*j) for j in jobs]
    return [RunRecord.from_dict(r) for r in results]


def _label(cfg, base: str) -> str:
    return f"{cfg.experiment.label}-{base}" if cfg.experiment.label else base


def cmd_train(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args)
    text = cfgmod.dump(cfg)
    mode = cfg.stack.weight_mode if cfg.experiment.task == "regression_stack" else cfg.encoder.weight_mode
    jobs = [(text, s, None, None, _label(cfg, mode), str(out)) for s in cfg.experiment.seeds]
    records = _run_all(jobs, args.jobs)
    status = EXIT_OK
    for r in records:
        last = ", ".join(f"{k}={v:.6g}" for k, v in r.evals[-1].items() if k != "step") if r.evals else "no evals"
        print(f"{r.stem()}: steps={len(r.steps)} {last} wall={r.wall_time:.1f}s")
        if r.aborted:
            print(f"  aborted: {r.aborted}", file=sys.stderr)
            status = EXIT_FAIL
    print(f"artifacts in {out}")
    return status


def cmd_compare(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args)
    text = cfgmod.dump(cfg)
    variants = [("dense", "dense", None), ("lors", "lors", "full")]
    if args.ablation:
        variants += [("shared_only", "lors", "shared_only"), ("private_only", "lors", "private_only")]
    keys = [(s, name) for s in cfg.experiment.seeds for name, _, _ in variants]
    modes = {name: (wm, lm) for name, wm, lm in variants}
    jobs = [(text, s, *modes[name], _label(cfg, name), str(out)) for s, name in keys]
    by_seed: dict[int, dict[str, RunRecord]] = {}
    for (s, name), rec in zip(keys, _run_all(jobs, args.jobs)):
        by_seed.setdefault(s, {})[name] = rec
    rows, passes, aborted = [], 0, False
    for s, recs in by_seed.items():
        for name, _, _ in variants[1:]:
            rec = recs[name]
            if rec.aborted or recs["dense"].aborted:
                aborted = True
                print(f"seed {s} {name}: aborted ({rec.aborted or recs['dense'].aborted})")
                rows.append({"seed": s, "variant": name, "aborted": True})
                continue
            rep = compare_runs(recs["dense"], rec)
            rows.append({"seed": s, "variant": name, **rep.to_dict()})
            print(f"seed {s} {name}: {rep.format()}")
            if name == "lors" and rep.parity:
                passes += 1
    n = len(by_seed)
    need = n if args.min_pass is None else args.min_pass
    summary = {
        "task": cfg.experiment.task,
        "config_hash": config_hash(text),
        "seeds": list(by_seed),
        "lors_parity_passes": passes,
        "required": need,
        "passed": passes >= need and not aborted,
        "rows": rows,
    }
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"compare-{cfg.experiment.task}-{summary['config_hash'][:10]}.json"
    path.write_text(json.dumps(summary, indent=2, allow_nan=False), encoding="utf-8")
    print(f"lors parity {passes}/{n} (need {need}); report {path}")
    return EXIT_OK if summary["passed"] else EXIT_FAIL


def cmd_dump_config(args) -> int:
    cfg = cfgmod.ExperimentConfig() if args.defaults else cfgmod.load(args.config)
    sys.stdout.write(cfgmod.dump(cfg))
    return EXIT_OK


COMMANDS = {
    "budget": cmd_budget,
    "gradcheck": cmd_gradcheck,
    "train": cmd_train,
    "compare": cmd_compare,
    "dump-config": cmd_dump_config,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except (cfgmod.ConfigFileError, ConfigError, OSError) as exc:
        print(f"lors: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)


if __name__ == "__main__":
    sys.exit(main())
