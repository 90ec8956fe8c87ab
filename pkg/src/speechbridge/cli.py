"""Command line entry point."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import ExperimentConfig, PRESETS, load_config, save_config

log = logging.getLogger("speechbridge")


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    if getattr(args, "strategy", None):
        cfg = cfg.replace(strategy=args.strategy)
    return cfg


def cmd_synth_data(args) -> int:
    from .data import synth_generate, write_dataset
    cfg = _config(args)
    if cfg.data.synth is None:
        raise ValueError("config has no synthetic task section")
    seed = cfg.data.seed if args.seed is None else args.seed
    out = write_dataset(synth_generate(cfg.data.synth, seed), args.out or "synth_data")
    print(f"wrote dataset to {out}")
    return 0


def cmd_train(args) -> int:
    from .training import train
    cfg = _config(args)
    out = Path(args.out or cfg.output_dir or "run")
    result = train(cfg, out_dir=out)
    save_config(cfg, out / "config.yaml")
    for c in result.candidates:
        status = f"failed ({c.reason})" if c.failed else f"best valid {c.best_valid:.4f} at step {c.best_step}"
        print(f"lr {c.lr:g}: {status}")
    print(f"selected lr {result.best_lr:g}; checkpoint {out / 'checkpoint_best.bin'}")
    return 0


def cmd_eval(args) -> int:
    from .checkpoint import load_checkpoint
    from .data import load_dataset_dir
    from .evaluation import evaluate
    from .training import load_data, model_from_checkpoint
    ckpt = load_checkpoint(args.checkpoint)
    model, _, cfg = model_from_checkpoint(ckpt)
    ds = load_dataset_dir(args.data) if args.data else load_data(cfg)
    beam = args.beam if args.beam is not None else cfg.beam
    report = evaluate(model, ds, args.split, beam, cfg.max_decode_len, ckpt.config.get("pairs"),
                      cfg.label_smoothing)
    print(report.render())
    if args.out:
        Path(args.out).write_text("\n".join(report.hypotheses) + "\n", encoding="utf-8")
    return 0


def cmd_count_params(args) -> int:
    from .finetune import STRATEGIES, emit_budget_table
    if args.strategy == "all":
        strategies = list(STRATEGIES.values())
    else:
        strategies = [PRESETS[args.strategy]]
    print(emit_budget_table(strategies=strategies).render())
    return 0


def cmd_ablate(args) -> int:
    from .ablation import run_ablation_grid
    cfg = _config(args)
    report = run_ablation_grid(args.grid, cfg, workers=args.workers)
    text = report.render()
    print(text)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    return 0 if all(c.ok for c in report.cells) else 1


def cmd_grad_check(args) -> int:
    from .gradchecks import TOLERANCE, run_grad_checks
    errors = run_grad_checks(args.seed or 0)
    for name, err in errors.items():
        print(f"{name}\t{err:.3e}\t{'ok' if err <= TOLERANCE else 'FAIL'}")
    bad = [n for n, e in errors.items() if e > TOLERANCE]
    if bad:
        print(f"error: relative error above {TOLERANCE:g} for {', '.join(bad)}", file=sys.stderr)
        return 1
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="speechbridge",
                                     description="Speech-to-text translation with a bridged encoder and decoder.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    def add(name, fn, help_text, config=True):
        p = sub.add_parser(name, help=help_text)
        if config:
            p.add_argument("--config", help="YAML experiment config")
        p.add_argument("--seed", type=int, help="override the experiment seed")
        p.add_argument("--out", help="output path")
        p.set_defaults(func=fn)
        return p

    add("synth-data", cmd_synth_data, "generate the synthetic speech-translation task")
    p = add("train", cmd_train, "finetune with a learning-rate sweep")
    p.add_argument("--strategy", choices=sorted(PRESETS), help="override the finetuning strategy")
    p = add("eval", cmd_eval, "decode a split with beam search and report BLEU", config=False)
    p.add_argument("checkpoint", help="checkpoint file written by train")
    p.add_argument("--data", help="dataset directory written by synth-data")
    p.add_argument("--split", default="test")
    p.add_argument("--beam", type=int)
    p = add("count-params", cmd_count_params, "trainable-parameter budget at reference scale", config=False)
    p.add_argument("--strategy", default="all", choices=["all", *sorted(PRESETS)])
    p = add("ablate", cmd_ablate, "train and evaluate an ablation grid")
    p.add_argument("--grid", required=True, choices=["strategies", "adaptor"])
    p.add_argument("--workers", type=int, default=1)
    add("grad-check", cmd_grad_check, "finite-difference check of every layer type", config=False)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_usage(sys.stderr)
        print("error: a command is required", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except KeyboardInterrupt:
        return 130
    except Exception as e:  # noqa: BLE001 - one-line diagnostic instead of a traceback
        log.debug("command failed", exc_info=True)
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
