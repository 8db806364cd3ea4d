"""Stage orchestration shared by the command line and the acceptance suite.

A run directory holds ``config.json``, ``checkpoints/``, ``logs/losses.csv``,
``logs/eval.csv`` and ``report.json``.
"""
from __future__ import annotations

import csv
import json
import logging
import os
from dataclasses import asdict, replace
from datetime import datetime
from pathlib import Path
from typing import Sequence

from .config import PipelineConfig
from .corpus import Vocabulary, build_vocab
from .evalkit import MetricsReport, evaluate_model
from .losses import LossBreakdown
from .model import CaptionModel, init_model, load_checkpoint, parameter_checksum, save_checkpoint
from .replay import ReplaySet, build_replay_set, make_keyword
from .synthworld import WorldBundle, generate_world, load_world
from .trainer import (
    ReplayItem, RunRecord, TrainConfig, kreplay_finetune, pretrain, vanilla_finetune, validation_ce,
)

log = logging.getLogger(__name__)

RUN_ROOT_ENV = "KREPLAY_RUN_ROOT"
REPORT_SPLITS = ("generic_val", "knoweval_seen", "knoweval_unseen")
LOSS_COLUMNS = ("stage", "step") + tuple(f.name for f in LossBreakdown.__dataclass_fields__.values())
METRIC_COLUMNS = ("bleu1", "bleu2", "bleu3", "bleu4", "rouge_l", "cider", "recog_acc", "n_examples")
EVAL_COLUMNS = ("stage", "step", "score") + METRIC_COLUMNS
CHECKPOINT_NAMES = {"pretrained": "pretrained.safetensors", "vanilla_ft": "vanilla_ft.safetensors",
                    "kreplay": "kreplay.safetensors"}


class MissingStageError(ValueError):
    pass


# ---------------------------------------------------------------------------
# run directories
# ---------------------------------------------------------------------------


def default_run_root() -> Path:
    return Path(os.environ.get(RUN_ROOT_ENV) or "runs")


def new_run_dir(command: str, root=None, explicit=None) -> Path:
    """Create a fresh run directory; never reuses a non-empty one."""
    if explicit is not None:
        path = Path(explicit)
        if path.exists() and any(path.iterdir()):
            raise ValueError(f"{path}: run directory exists and is not empty")
        path.mkdir(parents=True, exist_ok=True)
        return path
    root = Path(root) if root is not None else default_run_root()
    stamp = datetime.now().strftime("%Y%m%d-%H%M%S")
    for k in range(1000):
        path = root / (f"{stamp}-{command}" if k == 0 else f"{stamp}-{command}-{k}")
        try:
            path.mkdir(parents=True)
            return path
        except FileExistsError:
            continue
    raise RuntimeError(f"could not allocate a run directory under {root}")


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


class RunLogger:
    """Appends loss and evaluation rows to the run's CSV logs."""

    def __init__(self, run_dir: Path):
        self.dir = Path(run_dir) / "logs"
        self.dir.mkdir(parents=True, exist_ok=True)
        self.losses = self.dir / "losses.csv"
        self.evals = self.dir / "eval.csv"
        for path, cols in ((self.losses, LOSS_COLUMNS), (self.evals, EVAL_COLUMNS)):
            if not path.exists():
                with path.open("w", newline="") as fh:
                    csv.writer(fh).writerow(cols)

    def add(self, stage: str, record: RunRecord) -> None:
        with self.losses.open("a", newline="") as fh:
            w = csv.writer(fh)
            for step, parts in record.losses:
                row = asdict(parts)
                w.writerow([stage, step] + [row[c] for c in LOSS_COLUMNS[2:]])
        with self.evals.open("a", newline="") as fh:
            w = csv.writer(fh)
            for ev in record.evals:
                w.writerow([stage, ev["step"], ev["score"]] + [ev.get(c, "") for c in METRIC_COLUMNS])


# ---------------------------------------------------------------------------
# world, vocabulary, checkpoints
# ---------------------------------------------------------------------------


def world_vocab(bundle: WorldBundle) -> Vocabulary:
    return build_vocab(bundle.training_texts())


def obtain_world(cfg: PipelineConfig, run_dir: Path | None = None) -> WorldBundle:
    """Load ``paths.world_dir`` if it holds a world, else generate and save one."""
    world_dir = cfg.paths.world_dir
    if world_dir and (Path(world_dir) / "manifest.json").exists():
        return load_world(world_dir)
    bundle = generate_world(cfg.world)
    target = Path(world_dir) if world_dir else (run_dir / "world" if run_dir else None)
    if target is not None:
        bundle.save(target)
        cfg.paths.world_dir = str(target.resolve())
    return bundle


def require_world(world_dir) -> WorldBundle:
    if not world_dir:
        raise ValueError("no world directory: pass --world or set paths.world_dir")
    if not (Path(world_dir) / "manifest.json").exists():
        raise MissingStageError(f"{world_dir}: no synthesized world found (missing stage: synth)")
    return load_world(world_dir)


def require_checkpoint(path, stage: str, vocab: Vocabulary) -> CaptionModel:
    if path is None or not Path(path).exists():
        raise MissingStageError(f"missing {stage} checkpoint{'' if path is None else f' at {path}'}")
    model, header = load_checkpoint(path, vocab_hash=vocab.sha256())
    if header["stage"] != stage:
        raise ValueError(f"{path}: expected a {stage} checkpoint, found {header['stage']}")
    return model


def checkpoint_path(run_dir: Path, stage: str) -> Path:
    return Path(run_dir) / "checkpoints" / CHECKPOINT_NAMES[stage]


# ---------------------------------------------------------------------------
# evaluators
# ---------------------------------------------------------------------------


def knowledge_evaluator(bundle: WorldBundle, vocab: Vocabulary, max_len: int):
    """Selection by CIDEr on the knowledge validation split."""
    split = bundle.knoweval_val
    world = bundle.world

    def evaluate(model):
        report = evaluate_model(model, split, vocab, world, max_len)
        return report.cider, report.to_dict()

    return evaluate


def pretrain_evaluator(bundle: WorldBundle, vocab: Vocabulary):
    """Selection by (negated) cross-entropy on held-out clean pretraining text."""
    examples = bundle.pretrain_val_examples(vocab)

    def evaluate(model):
        ce = validation_ce(model, examples)
        return -ce, {"val_ce": ce}

    return evaluate


def final_report(model: CaptionModel, bundle: WorldBundle, vocab: Vocabulary, max_len: int,
                 splits: Sequence[str] = REPORT_SPLITS) -> dict:
    return {s: evaluate_model(model, bundle.split(s), vocab, bundle.world, max_len).to_dict() for s in splits}


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------


def run_pretrain(cfg: PipelineConfig, bundle: WorldBundle, vocab: Vocabulary) -> tuple[CaptionModel, RunRecord]:
    model = init_model(cfg.model.build(len(vocab), bundle.config.feature_dim))
    model.vocab_hash = vocab.sha256()
    out, record = pretrain(model, bundle.pretrain_pairs(), cfg.pretrain, vocab,
                           evaluator=pretrain_evaluator(bundle, vocab))
    out.vocab_hash = vocab.sha256()
    return out, record


def run_finetune(cfg: PipelineConfig, bundle: WorldBundle, vocab: Vocabulary,
                 pretrained: CaptionModel) -> tuple[CaptionModel, RunRecord]:
    out, record = vanilla_finetune(pretrained, bundle.caption_examples("generic_train", vocab), cfg.finetune,
                                   evaluator=knowledge_evaluator(bundle, vocab, cfg.eval.max_len))
    out.vocab_hash = vocab.sha256()
    return out, record


def replay_keywords(bundle: WorldBundle, vocab: Vocabulary, num_categories: int | None):
    seen = bundle.seen_keywords
    if num_categories is not None:
        if num_categories > len(seen):
            raise ValueError(f"replay.num_categories={num_categories} exceeds the {len(seen)} seen categories")
        seen = seen[:num_categories]
    ids = {k["keyword"]: k["category_id"] for k in bundle.keywords}
    return [make_keyword(k, vocab, ids[k]) for k in seen]


def run_build_replay(cfg: PipelineConfig, bundle: WorldBundle, vocab: Vocabulary) -> ReplaySet:
    r = cfg.replay
    keywords = replay_keywords(bundle, vocab, r.num_categories)
    return build_replay_set(bundle.pretrain.records, keywords, r.per_category_cap, r.total_cap, r.seed)


def replay_items(bundle: WorldBundle, replay: ReplaySet) -> list[ReplayItem]:
    records = {r.image_id: r for r in bundle.pretrain}
    missing = [ex.image_id for ex in replay.exemplars if ex.image_id not in records]
    if missing:
        raise ValueError(f"replay exemplars reference unknown images, e.g. {missing[0]}")
    return [ReplayItem(bundle.world.record_features(records[ex.image_id]), ex.keyword) for ex in replay.exemplars]


def run_kreplay(cfg: PipelineConfig, bundle: WorldBundle, vocab: Vocabulary, pretrained: CaptionModel,
                teacher: CaptionModel, replay: ReplaySet,
                train: TrainConfig | None = None) -> tuple[CaptionModel, RunRecord]:
    out, record = kreplay_finetune(pretrained, teacher, bundle.caption_examples("generic_train", vocab),
                                   replay_items(bundle, replay), train or cfg.train,
                                   evaluator=knowledge_evaluator(bundle, vocab, cfg.eval.max_len))
    out.vocab_hash = vocab.sha256()
    return out, record


def stage_summary(record: RunRecord) -> dict:
    return {"steps": record.steps, "best_step": record.best_step, "selection_metric": record.selection_metric,
            "best_score": record.best_score}


def run_pipeline(cfg: PipelineConfig, run_dir: Path) -> dict:
    """synth -> pretrain -> finetune -> build-replay -> kreplay -> evaluate."""
    run_dir = Path(run_dir)
    bundle = obtain_world(cfg, run_dir)
    write_json(run_dir / "config.json", cfg.to_dict())
    vocab = world_vocab(bundle)
    vocab.save(run_dir / "vocab.json")
    logger = RunLogger(run_dir)
    h = vocab.sha256()

    log.info("pretraining for %d steps", cfg.pretrain.max_steps)
    pre, rec_pre = run_pretrain(cfg, bundle, vocab)
    logger.add("pretrain", rec_pre)
    save_checkpoint(checkpoint_path(run_dir, "pretrained"), pre, vocab_hash=h, stage="pretrained",
                    step=rec_pre.best_step or 0, seed=cfg.pretrain.seed)

    log.info("vanilla fine-tuning for %d steps", cfg.finetune.max_steps)
    teacher, rec_ft = run_finetune(cfg, bundle, vocab, pre)
    logger.add("vanilla_ft", rec_ft)
    save_checkpoint(checkpoint_path(run_dir, "vanilla_ft"), teacher, vocab_hash=h, stage="vanilla_ft",
                    step=rec_ft.best_step or 0, seed=cfg.finetune.seed)

    replay = run_build_replay(cfg, bundle, vocab)
    replay.save(run_dir / "replay.jsonl")

    log.info("K-Replay fine-tuning for %d steps on %d exemplars", cfg.train.max_steps, len(replay))
    student, rec_kr = run_kreplay(cfg, bundle, vocab, pre, teacher, replay)
    logger.add("kreplay", rec_kr)
    save_checkpoint(checkpoint_path(run_dir, "kreplay"), student, vocab_hash=h, stage="kreplay",
                    step=rec_kr.best_step or 0, seed=cfg.train.seed)

    report = {
        "seed": cfg.seed,
        "vocab_sha256": h,
        "replay_size": len(replay),
        "stages": {
            "pretrained": {**final_report(pre, bundle, vocab, cfg.eval.max_len), "training": stage_summary(rec_pre)},
            "vanilla_ft": {**final_report(teacher, bundle, vocab, cfg.eval.max_len), "training": stage_summary(rec_ft)},
            "kreplay": {**final_report(student, bundle, vocab, cfg.eval.max_len),
                        "training": {**stage_summary(rec_kr), "teacher_checksum": parameter_checksum(teacher)}},
        },
    }
    write_json(run_dir / "report.json", report)
    return report


# ---------------------------------------------------------------------------
# ablations
# ---------------------------------------------------------------------------

ABLATION_COLUMNS = ("run", "ablation", "per_category_cap", "num_categories", "replay_size", "best_step",
                    "generic_cider", "seen_cider", "seen_recog_acc", "unseen_cider", "unseen_recog_acc",
                    "l_know_max", "l_kd_max")


def ablation_plan(cfg: PipelineConfig, num_seen: int) -> list[dict]:
    base_cap = cfg.replay.per_category_cap
    plan = [
        {"run": "full", "ablation": "none", "per_category_cap": base_cap, "num_categories": None},
        {"run": "no_pred", "ablation": "no_pred", "per_category_cap": base_cap, "num_categories": None},
        {"run": "no_kd", "ablation": "no_kd", "per_category_cap": base_cap, "num_categories": None},
    ]
    for cap in (25, 10, 5, 1):
        plan.append({"run": f"cap_{cap}", "ablation": "none", "per_category_cap": cap, "num_categories": None})
    for n in (5, 10, 20):
        plan.append({"run": f"categories_{n}", "ablation": "none", "per_category_cap": base_cap,
                     "num_categories": None if n >= num_seen else n})
    return plan


def run_ablation_suite(cfg: PipelineConfig, source_run: Path, out_dir: Path) -> list[dict]:
    """Re-run K-Replay under each ablation / sweep setting from a finished pipeline run.

    Settings that coincide with an earlier row (same ablation, cap and
    category count) reuse its result since the seed is shared.
    """
    source_run, out_dir = Path(source_run), Path(out_dir)
    bundle = require_world(cfg.paths.world_dir)
    vocab = world_vocab(bundle)
    pre = require_checkpoint(checkpoint_path(source_run, "pretrained"), "pretrained", vocab)
    teacher = require_checkpoint(checkpoint_path(source_run, "vanilla_ft"), "vanilla_ft", vocab)
    logger = RunLogger(out_dir)

    vanilla = final_report(teacher, bundle, vocab, cfg.eval.max_len)
    rows, cache = [], {}
    for item in ablation_plan(cfg, len(bundle.seen_keywords)):
        key = (item["ablation"], item["per_category_cap"], item["num_categories"])
        if key not in cache:
            run_cfg = PipelineConfig.from_dict(cfg.to_dict())
            run_cfg.replay.per_category_cap = item["per_category_cap"]
            run_cfg.replay.num_categories = item["num_categories"]
            replay = run_build_replay(run_cfg, bundle, vocab)
            train = replace(cfg.train, ablation=item["ablation"])
            log.info("ablation %s: %d exemplars", item["run"], len(replay))
            model, record = run_kreplay(run_cfg, bundle, vocab, pre, teacher, replay, train)
            logger.add(item["run"], record)
            rep = final_report(model, bundle, vocab, cfg.eval.max_len)
            cache[key] = {
                "replay_size": len(replay),
                "best_step": record.best_step,
                "generic_cider": rep["generic_val"]["cider"],
                "seen_cider": rep["knoweval_seen"]["cider"],
                "seen_recog_acc": rep["knoweval_seen"]["recog_acc"],
                "unseen_cider": rep["knoweval_unseen"]["cider"],
                "unseen_recog_acc": rep["knoweval_unseen"]["recog_acc"],
                "l_know_max": max(p.l_know for _, p in record.losses) if record.losses else 0.0,
                "l_kd_max": max(p.l_kd for _, p in record.losses) if record.losses else 0.0,
            }
        n_cat = item["num_categories"] if item["num_categories"] is not None else len(bundle.seen_keywords)
        rows.append({"run": item["run"], "ablation": item["ablation"], "per_category_cap": item["per_category_cap"],
                     "num_categories": n_cat, **cache[key]})

    with (out_dir / "ablation.csv").open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=ABLATION_COLUMNS)
        w.writeheader()
        w.writerows(rows)
    write_json(out_dir / "vanilla.json", vanilla)
    from .plots import plot_ablation

    plot_ablation(rows, vanilla, out_dir / "ablation.png")
    return rows


def metrics_from_report(report: dict, stage: str, split: str) -> MetricsReport:
    return MetricsReport(**{k: v for k, v in report["stages"][stage][split].items()})
