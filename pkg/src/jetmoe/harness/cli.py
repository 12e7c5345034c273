"""Command line entry point.

Exit codes: 0 success, 1 usage/configuration error, 2 data error,
3 numeric error (non-finite loss or gradient).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from ..checkpoint import load_checkpoint
from ..errors import (CheckpointError, ConfigurationError, DataError, DegenerateBatchError,
                      NumericError)
from ..model import ModelConfig, count_params
from .config import TrainRunConfig, load_run_config
from .data import load_preferences, load_sft, read_corpus, write_jsonl
from .synthetic import make_corpus, make_preferences, make_sft
from .train import dpo, dump_schedule, eval_perplexity, pretrain, sft

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="TOML run configuration")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", type=Path, help="output directory")
    p.add_argument("--resume", type=Path, help="checkpoint to resume or initialize from")
    p.add_argument("--steps", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="jetmoe", description="Toy-scale JetMoE training and inspection.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("pretrain", help="language-model pretraining on a byte corpus")
    _common(p)
    p.add_argument("--corpus", type=Path)

    p = sub.add_parser("sft", help="supervised fine-tuning on prompt/response pairs")
    _common(p)
    p.add_argument("--data", type=Path, required=True, help="JSON-lines SFT dataset")

    p = sub.add_parser("dpo", help="preference optimization against a frozen reference")
    _common(p)
    p.add_argument("--data", type=Path, required=True, help="JSON-lines preference dataset")
    p.add_argument("--reference", type=Path, required=True, help="reference checkpoint")

    p = sub.add_parser("eval", help="perplexity of a checkpoint on a byte corpus")
    _common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--corpus", type=Path, required=True)
    p.add_argument("--seq-len", type=int)

    p = sub.add_parser("count-params", help="total and active parameter counts")
    _common(p)
    p.add_argument("--preset", choices=("tiny", "8b"), default=None)
    p.add_argument("--vocab-size", type=int)

    p = sub.add_parser("dump-schedule", help="print the learning-rate schedule as CSV")
    _common(p)

    p = sub.add_parser("make-data", help="write the synthetic toy corpus and datasets")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--corpus-bytes", type=int, default=100_000)
    return parser


def _run_config(args) -> TrainRunConfig:
    cfg = load_run_config(args.config) if args.config else TrainRunConfig()
    over = {"seed": args.seed, "out_dir": str(args.out) if args.out else None}
    if args.command == "pretrain":
        over["steps"] = args.steps
        over["corpus"] = str(args.corpus) if getattr(args, "corpus", None) else None
    cfg = cfg.with_overrides(**over)
    if args.steps is not None and args.command in ("sft", "dpo"):
        stage = getattr(cfg, args.command)
        cfg = replace(cfg, **{args.command: replace(stage, steps=args.steps)})
    return cfg


def _cmd_pretrain(args) -> dict:
    cfg = _run_config(args)
    res = pretrain(cfg, resume=args.resume)
    last = res.records[-1] if res.records else {}
    return {"checkpoint": str(res.checkpoint), "final_lm_loss": last.get("lm_loss")}


def _cmd_sft(args) -> dict:
    cfg = _run_config(args)
    examples = load_sft(args.data, cfg.model.vocab_size)
    res = sft(cfg, examples, init=args.resume)
    return {"checkpoint": str(res.checkpoint), "final_lm_loss": res.records[-1]["lm_loss"]}


def _cmd_dpo(args) -> dict:
    cfg = _run_config(args)
    examples = load_preferences(args.data, cfg.model.vocab_size)
    reference = load_checkpoint(args.reference).model
    if reference.config != cfg.model:
        raise ConfigurationError("reference checkpoint config differs from the run config")
    res = dpo(cfg, examples, reference, init=args.resume)
    last = res.records[-1]
    return {"checkpoint": str(res.checkpoint), "final_dpo_loss": last["dpo_loss"],
            "final_reward_margin": last["reward_margin"]}


def _cmd_eval(args) -> dict:
    model = load_checkpoint(args.checkpoint).model
    seq_len = args.seq_len or (load_run_config(args.config).seq_len if args.config else TrainRunConfig().seq_len)
    ppl = eval_perplexity(model, read_corpus(args.corpus), min(seq_len, model.config.max_positions))
    return {"perplexity": ppl}


def _cmd_count(args) -> dict:
    if args.config:
        mcfg = load_run_config(args.config).model
    elif args.preset == "8b":
        mcfg = ModelConfig.jetmoe_8b()
    else:
        mcfg = ModelConfig.tiny()
    if args.vocab_size:
        mcfg = replace(mcfg, vocab_size=args.vocab_size)
    total, active = count_params(mcfg)
    return {"total": total, "active": active, "config": mcfg.to_dict()}


def _cmd_schedule(args) -> None:
    cfg = load_run_config(args.config) if args.config else TrainRunConfig()
    steps = args.steps if args.steps is not None else cfg.schedule.total_steps
    print("step,lr")
    for step, lr in dump_schedule(cfg.schedule, steps):
        print(f"{step},{lr!r}")


def _cmd_make_data(args) -> dict:
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    (out / "corpus.txt").write_bytes(make_corpus(args.corpus_bytes, seed=args.seed))
    write_jsonl(out / "sft.jsonl", make_sft(seed=args.seed))
    write_jsonl(out / "dpo.jsonl", make_preferences(seed=args.seed))
    return {"corpus": str(out / "corpus.txt"), "sft": str(out / "sft.jsonl"), "dpo": str(out / "dpo.jsonl")}


COMMANDS = {"pretrain": _cmd_pretrain, "sft": _cmd_sft, "dpo": _cmd_dpo, "eval": _cmd_eval,
            "count-params": _cmd_count, "dump-schedule": _cmd_schedule, "make-data": _cmd_make_data}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        result = COMMANDS[args.command](args)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, DegenerateBatchError, CheckpointError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    if result is not None:
        print(json.dumps(result))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
