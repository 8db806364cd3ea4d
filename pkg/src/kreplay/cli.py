"""Command-line entry point.

Exit status: 0 on success, 1 on a validation or usage error, 2 when a
run aborts (for example on a diverging loss).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import PipelineConfig, load_config
from .corpus import DatasetError
from .evalkit import evaluate_model, generate_captions, write_predictions
from .model import read_header, save_checkpoint
from .pipeline import (
    MissingStageError, RunLogger, checkpoint_path, final_report, new_run_dir, require_checkpoint,
    require_world, run_ablation_suite, run_build_replay, run_finetune, run_kreplay, run_pipeline, run_pretrain,
    stage_summary, world_vocab, write_json,
)
from .plots import plot_run
from .replay import ReplaySet
from .trainer import TrainingDiverged

log = logging.getLogger("kreplay")

SPLIT_ALIASES = {"knoweval-seen": "knoweval_seen", "knoweval-unseen": "knoweval_unseen",
                 "knoweval-val": "knoweval_val", "generic-val": "generic_val", "generic-train": "generic_train"}


class UsageError(Exception):
    def __init__(self, message: str, usage: str):
        super().__init__(message)
        self.usage = usage


class Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message, self.format_usage())


def _split(name: str) -> str:
    return SPLIT_ALIASES.get(name, name)


def build_parser() -> Parser:
    p = Parser(prog="kreplay", description="Knowledge-retaining caption fine-tuning on a synthetic world.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=Parser)
    sub.required = True

    def with_config(sp, world=True):
        sp.add_argument("--config", type=Path, help="JSON config file")
        sp.add_argument("--set", dest="overrides", action="extend", nargs="+", default=[], metavar="KEY=VALUE",
                        help="dotted-path overrides, repeatable")
        sp.add_argument("--seed", type=int, help="top-level seed")
        sp.add_argument("--run-root", type=Path, help="parent of new run directories")
        sp.add_argument("--run-dir", type=Path, help="explicit (new or empty) run directory")
        if world:
            sp.add_argument("--world", type=Path, help="world directory written by 'synth'")
        return sp

    sp = with_config(sub.add_parser("synth", help="generate a synthetic world"), world=False)
    sp.add_argument("--out", type=Path, help="world directory (default: <run>/world)")

    with_config(sub.add_parser("pretrain", help="pretrain on the noisy corpus"))

    sp = with_config(sub.add_parser("finetune", help="vanilla caption fine-tuning (teacher)"))
    sp.add_argument("--init", type=Path, help="pretrained checkpoint")

    sp = with_config(sub.add_parser("kreplay", help="K-Replay fine-tuning"))
    sp.add_argument("--init", type=Path, help="pretrained checkpoint")
    sp.add_argument("--teacher", type=Path, help="vanilla fine-tuned checkpoint")
    sp.add_argument("--replay", type=Path, help="replay set file (default: built from the world)")

    sp = with_config(sub.add_parser("build-replay", help="filter replay exemplars from the pretraining corpus"))
    sp.add_argument("--out", type=Path, help="replay JSONL path (default: <run>/replay.jsonl)")

    for name, helptext in (("evaluate", "score a checkpoint on a split"),
                           ("generate", "write greedy captions for a split")):
        sp = with_config(sub.add_parser(name, help=helptext))
        sp.add_argument("--ckpt", type=Path, required=True)
        sp.add_argument("--split", required=True)
        if name == "generate":
            sp.add_argument("--out", type=Path, help="predictions JSONL (default: <run>/predictions.jsonl)")

    sp = sub.add_parser("plot", help="loss and RecogAcc plots from a run directory")
    sp.add_argument("--run", type=Path, required=True)
    sp.add_argument("--out", type=Path, help="output directory (default: a new run directory)")
    sp.add_argument("--run-root", type=Path)

    with_config(sub.add_parser("pipeline", help="synth, pretrain, finetune, kreplay and evaluate"))

    sp = sub.add_parser("ablate", help="ablation and replay-size sweeps from a finished pipeline run")
    sp.add_argument("--run", type=Path, required=True, help="pipeline run directory")
    sp.add_argument("--set", dest="overrides", action="extend", nargs="+", default=[], metavar="KEY=VALUE")
    sp.add_argument("--run-root", type=Path)
    sp.add_argument("--run-dir", type=Path)
    return p


# ---------------------------------------------------------------------------


def _config(args) -> PipelineConfig:
    cfg = load_config(args.config, args.overrides, args.seed)
    world = getattr(args, "world", None)
    if world is not None:
        cfg.paths.world_dir = str(Path(world).resolve())
    return cfg


def _run_dir(args, command: str) -> Path:
    return new_run_dir(command, getattr(args, "run_root", None), getattr(args, "run_dir", None))


def _snapshot(cfg: PipelineConfig, run_dir: Path) -> None:
    cfg.paths.run_dir = str(run_dir.resolve())
    write_json(run_dir / "config.json", cfg.to_dict())


def _config_near_checkpoint(ckpt: Path) -> dict | None:
    cand = Path(ckpt).resolve().parent.parent / "config.json"
    return json.loads(cand.read_text(encoding="utf-8")) if cand.exists() else None


def _world_for(args, cfg: PipelineConfig, ckpt: Path | None = None):
    if cfg.paths.world_dir is None and ckpt is not None:
        near = _config_near_checkpoint(ckpt)
        if near:
            cfg.paths.world_dir = near.get("paths", {}).get("world_dir")
    return require_world(cfg.paths.world_dir)


def cmd_synth(args) -> None:
    from .synthworld import generate_world, world_stats

    cfg = _config(args)
    run_dir = _run_dir(args, "synth")
    out = args.out or (run_dir / "world")
    bundle = generate_world(cfg.world)
    bundle.save(out)
    cfg.paths.world_dir = str(Path(out).resolve())
    _snapshot(cfg, run_dir)
    write_json(run_dir / "world_stats.json", world_stats(bundle))
    print(out)


def cmd_pretrain(args) -> None:
    cfg = _config(args)
    bundle = _world_for(args, cfg)
    vocab = world_vocab(bundle)
    run_dir = _run_dir(args, "pretrain")
    _snapshot(cfg, run_dir)
    model, record = run_pretrain(cfg, bundle, vocab)
    RunLogger(run_dir).add("pretrain", record)
    save_checkpoint(checkpoint_path(run_dir, "pretrained"), model, vocab_hash=vocab.sha256(), stage="pretrained",
                    step=record.best_step or 0, seed=cfg.pretrain.seed)
    write_json(run_dir / "report.json", {**final_report(model, bundle, vocab, cfg.eval.max_len),
                                         "training": stage_summary(record)})
    print(run_dir)


def cmd_finetune(args) -> None:
    cfg = _config(args)
    bundle = _world_for(args, cfg, args.init)
    vocab = world_vocab(bundle)
    pre = require_checkpoint(args.init, "pretrained", vocab)
    run_dir = _run_dir(args, "finetune")
    _snapshot(cfg, run_dir)
    model, record = run_finetune(cfg, bundle, vocab, pre)
    RunLogger(run_dir).add("vanilla_ft", record)
    save_checkpoint(checkpoint_path(run_dir, "vanilla_ft"), model, vocab_hash=vocab.sha256(), stage="vanilla_ft",
                    step=record.best_step or 0, seed=cfg.finetune.seed)
    write_json(run_dir / "report.json", {**final_report(model, bundle, vocab, cfg.eval.max_len),
                                         "training": stage_summary(record)})
    print(run_dir)


def cmd_kreplay(args) -> None:
    cfg = _config(args)
    bundle = _world_for(args, cfg, args.init)
    vocab = world_vocab(bundle)
    pre = require_checkpoint(args.init, "pretrained", vocab)
    teacher = require_checkpoint(args.teacher, "vanilla_ft", vocab)
    replay = ReplaySet.load(args.replay, vocab) if args.replay else run_build_replay(cfg, bundle, vocab)
    run_dir = _run_dir(args, "kreplay")
    _snapshot(cfg, run_dir)
    replay.save(run_dir / "replay.jsonl")
    model, record = run_kreplay(cfg, bundle, vocab, pre, teacher, replay)
    RunLogger(run_dir).add("kreplay", record)
    save_checkpoint(checkpoint_path(run_dir, "kreplay"), model, vocab_hash=vocab.sha256(), stage="kreplay",
                    step=record.best_step or 0, seed=cfg.train.seed)
    write_json(run_dir / "report.json", {**final_report(model, bundle, vocab, cfg.eval.max_len),
                                         "training": stage_summary(record)})
    print(run_dir)


def cmd_build_replay(args) -> None:
    cfg = _config(args)
    bundle = _world_for(args, cfg)
    vocab = world_vocab(bundle)
    replay = run_build_replay(cfg, bundle, vocab)
    if args.out is not None:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        out = args.out
    else:
        run_dir = _run_dir(args, "build-replay")
        _snapshot(cfg, run_dir)
        out = run_dir / "replay.jsonl"
    replay.save(out)
    print(out)


def _load_for_eval(args):
    cfg = _config(args)
    bundle = _world_for(args, cfg, args.ckpt)
    vocab = world_vocab(bundle)
    stage = read_header(args.ckpt)["stage"] if Path(args.ckpt).exists() else None
    if stage is None:
        raise MissingStageError(f"checkpoint not found: {args.ckpt}")
    model = require_checkpoint(args.ckpt, stage, vocab)
    split = _split(args.split)
    return cfg, bundle, vocab, model, stage, split


def cmd_evaluate(args) -> None:
    cfg, bundle, vocab, model, stage, split = _load_for_eval(args)
    report = evaluate_model(model, bundle.split(split), vocab, bundle.world, cfg.eval.max_len)
    run_dir = _run_dir(args, "evaluate")
    _snapshot(cfg, run_dir)
    write_json(run_dir / "report.json", {"stage": stage, "split": split, "metrics": report.to_dict()})
    print(json.dumps(report.to_dict(), sort_keys=True))


def cmd_generate(args) -> None:
    cfg, bundle, vocab, model, _, split = _load_for_eval(args)
    dataset = bundle.split(split)
    captions = generate_captions(model, dataset, bundle.world, vocab, cfg.eval.max_len)
    if args.out is not None:
        out = args.out
        out.parent.mkdir(parents=True, exist_ok=True)
    else:
        run_dir = _run_dir(args, "generate")
        _snapshot(cfg, run_dir)
        out = run_dir / "predictions.jsonl"
    write_predictions(out, [r.image_id for r in dataset], captions)
    print(out)


def cmd_plot(args) -> None:
    out = args.out or new_run_dir("plot", args.run_root)
    for path in plot_run(args.run, out):
        print(path)


def cmd_pipeline(args) -> None:
    cfg = _config(args)
    run_dir = _run_dir(args, "pipeline")
    cfg.paths.run_dir = str(run_dir.resolve())
    run_pipeline(cfg, run_dir)
    print(run_dir)


def cmd_ablate(args) -> None:
    snapshot = args.run / "config.json"
    if not snapshot.exists():
        raise MissingStageError(f"{args.run}: no config.json (missing stage: pipeline)")
    from .config import apply_overrides

    raw = apply_overrides(json.loads(snapshot.read_text(encoding="utf-8")), args.overrides)
    cfg = PipelineConfig.from_dict(raw).resolve()
    out = new_run_dir("ablate", args.run_root, args.run_dir)
    _snapshot(cfg, out)
    run_ablation_suite(cfg, args.run, out)
    print(out / "ablation.csv")


COMMANDS = {
    "synth": cmd_synth, "pretrain": cmd_pretrain, "finetune": cmd_finetune, "kreplay": cmd_kreplay,
    "build-replay": cmd_build_replay, "evaluate": cmd_evaluate, "generate": cmd_generate, "plot": cmd_plot,
    "pipeline": cmd_pipeline, "ablate": cmd_ablate,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as err:
        sys.stderr.write(err.usage)
        sys.stderr.write(f"kreplay: error: {err}\n")
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        COMMANDS[args.command](args)
    except (TrainingDiverged, RuntimeError) as err:
        sys.stderr.write(f"kreplay: aborted: {err}\n")
        return 2
    except (ValueError, KeyError, DatasetError, FileNotFoundError, json.JSONDecodeError) as err:
        sys.stderr.write(f"kreplay: error: {err}\n")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
