"""Command-line entry point.

Exit codes: 0 success, 1 usage (including an unreadable or invalid config), 2 runtime error, 3 divergence.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from ..errors import ConfigurationError, DhgError, DivergenceError
from ..synthdata import Corpus, eval_corpora, pretrain_corpus, target_train_corpus, write_csv
from .checkpoint import Checkpoint
from .config import SEED_MAX, RunConfig, data_config, load_config
from .evaluate import evaluate_generated, generate_groups, read_generated, write_generated
from .stages import CFM_CKPT, FNO_CKPT, REFINED_CKPT, run_stage1, run_stage2, run_stage3
from .suite import comparison_table, run_experiment_suite

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_DIVERGED = 0, 1, 2, 3
COMMANDS = ("pretrain", "train", "refine", "generate", "evaluate", "synth", "suite")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _seed(text: str) -> int:
    try:
        value = int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if not 0 <= value <= SEED_MAX:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dhgflow", description="FNO-guided flow matching with a deconfounded constraint hierarchy")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    helps = {
        "pretrain": "Stage 1: margin-ranking pretraining of the FNO",
        "train": "Stage 2: fit the velocity field with frozen FNO guidance",
        "refine": "Stage 3: constraint refinement with the hierarchical gate",
        "generate": "write generated waveforms per evaluation group as CSV",
        "evaluate": "score generated CSVs: RMSE, PFD, temperature discrimination",
        "synth": "write the synthetic corpora as CSV",
        "suite": "run the desk-scale experiment suite and print the comparison table",
    }
    for name in COMMANDS:
        p = sub.add_parser(name, help=helps[name])
        p.add_argument("--config", required=True, help="TOML config file (every key optional)")
        p.add_argument("--seed", type=_seed, default=None, help="run seed (overrides [run] seed)")
        p.add_argument("--out", default=None, help="output directory (overrides [run] output_dir)")
        p.add_argument("--paper-scale", action="store_true", help="full-size models and epoch counts (slow, untested)")
        if name in ("train", "refine", "generate", "evaluate"):
            p.add_argument("--checkpoint", default=None, help="input checkpoint (default: the previous stage's file in --out)")
        if name == "evaluate":
            p.add_argument("--generated", default=None, help="directory with generated_*.csv (default: --out)")
    return parser


def _resolve(args) -> tuple[RunConfig, int, Path]:
    try:
        cfg = load_config(args.config)
    except (FileNotFoundError, ConfigurationError) as exc:
        raise UsageError(str(exc)) from None
    if args.paper_scale:
        cfg = cfg.with_paper_scale()
    seed = cfg.run.seed if args.seed is None else args.seed
    out = Path(args.out if args.out is not None else cfg.run.output_dir)
    return cfg, seed, out


def _load(path: Path, what: str) -> Checkpoint:
    if not path.is_file():
        raise ConfigurationError(f"missing {what} checkpoint: {path}")
    return Checkpoint.load(path)


def _latest_model(args, out: Path) -> Checkpoint:
    if args.checkpoint:
        return _load(Path(args.checkpoint), "model")
    for name in (REFINED_CKPT, CFM_CKPT):
        if (out / name).is_file():
            return Checkpoint.load(out / name)
    raise ConfigurationError(f"no trained checkpoint in {out} ({REFINED_CKPT} or {CFM_CKPT}); run train/refine first")


def cmd_pretrain(args, cfg, seed, out) -> int:
    ckpt = run_stage1(cfg, seed, out)
    print(f"wrote {out / FNO_CKPT} (final pretrain loss {ckpt.extra['pretrain_loss'][-1]:.6f})")
    return EXIT_OK


def cmd_train(args, cfg, seed, out) -> int:
    fno_ckpt = None
    if cfg.run.variant in ("freeze", "finetune"):
        path = Path(args.checkpoint) if args.checkpoint else out / FNO_CKPT
        if not path.is_file():
            if not cfg.run.stage1:
                raise ConfigurationError(f"stage1 is disabled and the FNO checkpoint is missing: {path}")
            fno_ckpt = run_stage1(cfg, seed, out)
        else:
            fno_ckpt = Checkpoint.load(path)
    ckpt = run_stage2(cfg, fno_ckpt, seed, out)
    print(f"wrote {out / CFM_CKPT} (final cfm loss {ckpt.extra['cfm_loss'][-1]:.6f})")
    return EXIT_OK


def cmd_refine(args, cfg, seed, out) -> int:
    path = Path(args.checkpoint) if args.checkpoint else out / CFM_CKPT
    ckpt, diag = run_stage3(cfg, _load(path, "Stage-2"), seed, out)
    final = diag[-1]
    print(f"wrote {out / REFINED_CKPT}; beta_k = {final['schedule_beta']}, beta_kj = {final['beta_kj']}")
    return EXIT_OK


def cmd_generate(args, cfg, seed, out) -> int:
    ckpt = _latest_model(args, out)
    generated = generate_groups(cfg, ckpt.field, ckpt.fno, seed)
    for p in write_generated(generated, out):
        print(f"wrote {p}")
    return EXIT_OK


def cmd_evaluate(args, cfg, seed, out) -> int:
    gen_dir = Path(args.generated) if args.generated else out
    generated = read_generated(gen_dir)
    if not generated:
        raise ConfigurationError(f"no generated_*.csv files in {gen_dir}")
    try:
        ckpt = _latest_model(args, out)
        field, fno = ckpt.field, ckpt.fno
    except ConfigurationError:
        field = fno = None
    report = evaluate_generated(cfg, generated, field, fno, seed)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.json").write_text(report.to_json() + "\n", encoding="utf-8")
    table = report.to_table()
    (out / "metrics.txt").write_text(table + "\n", encoding="utf-8")
    print(table)
    return EXIT_OK


def cmd_synth(args, cfg, seed, out) -> int:
    dcfg = data_config(cfg)
    out.mkdir(parents=True, exist_ok=True)
    corpora: dict[str, Corpus] = {"train": target_train_corpus(dcfg, seed), "pretrain": pretrain_corpus(dcfg, seed)}
    corpora.update({f"eval_{k}": v for k, v in eval_corpora(dcfg, seed).items()})
    for name, corpus in corpora.items():
        write_csv(corpus, out / f"{name}.csv")
        print(f"wrote {out / (name + '.csv')} ({len(corpus)} rows)")
    return EXIT_OK


def cmd_suite(args, cfg, seed, out) -> int:
    seeds = (seed,) if args.seed is not None else cfg.suite.seeds
    results = run_experiment_suite(cfg, seeds=seeds, out_dir=out)
    print(comparison_table(results), end="")
    return EXIT_OK


HANDLERS = {
    "pretrain": cmd_pretrain,
    "train": cmd_train,
    "refine": cmd_refine,
    "generate": cmd_generate,
    "evaluate": cmd_evaluate,
    "synth": cmd_synth,
    "suite": cmd_suite,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("missing command")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
        cfg, seed, out = _resolve(args)
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"dhgflow: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        return HANDLERS[args.command](args, cfg, seed, out)
    except DivergenceError as exc:
        print(f"dhgflow: diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (DhgError, OSError, ValueError) as exc:
        print(f"dhgflow: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
