"""Pretraining, vanilla fine-tuning and knowledge-replay fine-tuning loops."""
from __future__ import annotations

import copy
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Iterator, Sequence

import numpy as np
import torch

from .corpus import BOS_ID, EOS_ID, CaptionExample, ImageFeatures, PretrainPair, Vocabulary, tokenize
from .losses import KDConfig, LossBreakdown, batch_objective
from .model import CaptionModel, collate_images, greedy_decode_batch, pad_sequences, parameter_checksum
from .replay import KnowledgeKeyword

log = logging.getLogger(__name__)

TRAIN_STAGES = ("pretrain", "vanilla_ft", "kreplay")
ABLATIONS = ("none", "no_pred", "no_kd")
STAGE_TAGS = {"pretrain": "pretrained", "vanilla_ft": "vanilla_ft", "kreplay": "kreplay"}


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, value: float):
        super().__init__(f"non-finite loss {value} at step {step}")
        self.step = step


@dataclass
class TrainConfig:
    stage: str = "kreplay"
    lambda_know: float = 1.0
    kd: KDConfig = field(default_factory=KDConfig)
    learning_rate: float = 3e-4
    batch_size: int = 32
    replay_per_batch: int = 8
    max_steps: int = 1000
    eval_every: int = 100
    seed: int = 0
    ablation: str = "none"

    def __post_init__(self):
        if isinstance(self.kd, dict):
            self.kd = KDConfig(**self.kd)

    def validate(self) -> "TrainConfig":
        def bad(name, why):
            raise ValueError(f"TrainConfig.{name}: {why}")

        if self.stage not in TRAIN_STAGES:
            bad("stage", f"must be one of {TRAIN_STAGES}")
        if self.ablation not in ABLATIONS:
            bad("ablation", f"must be one of {ABLATIONS}")
        if self.lambda_know < 0:
            bad("lambda_know", "must be >= 0")
        if not self.learning_rate > 0:
            bad("learning_rate", "must be > 0")
        if self.batch_size < 1:
            bad("batch_size", "must be >= 1")
        if not 0 <= self.replay_per_batch < self.batch_size:
            bad("replay_per_batch", "must lie in [0, batch_size)")
        if self.max_steps < 0:
            bad("max_steps", "must be >= 0")
        if self.eval_every < 1:
            bad("eval_every", "must be >= 1")
        return self

    @property
    def use_know(self) -> bool:
        return self.ablation != "no_pred"

    @property
    def use_kd(self) -> bool:
        return self.ablation != "no_kd"

    @property
    def effective_lambda_know(self) -> float:
        return self.lambda_know if self.use_know else 0.0

    @property
    def effective_lambda_kd(self) -> float:
        return self.kd.lambda_kd if self.use_kd else 0.0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, obj: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ValueError(f"TrainConfig: unknown fields {sorted(unknown)}")
        return cls(**obj)


@dataclass
class ReplayItem:
    image: ImageFeatures
    keyword: KnowledgeKeyword


@dataclass
class RunRecord:
    config: dict
    losses: list[tuple[int, LossBreakdown]] = field(default_factory=list)
    evals: list[dict] = field(default_factory=list)
    best_step: int | None = None
    best_score: float | None = None
    selection_metric: str | None = None
    steps: int = 0


# (score, metrics) -- larger score is better
Evaluator = Callable[[CaptionModel], "tuple[float, dict]"]


def as_caption_examples(items, vocab: Vocabulary | None = None) -> list[CaptionExample]:
    out = []
    for it in items:
        if isinstance(it, CaptionExample):
            out.append(it)
        elif isinstance(it, PretrainPair):
            if vocab is None:
                raise ValueError("a vocabulary is needed to tokenize pretraining text")
            out.append(CaptionExample(it.image, tokenize(it.text, vocab)))
        else:
            raise TypeError(f"cannot train on {type(it).__name__}")
    return out


def _index_stream(n: int, rng: np.random.Generator) -> Iterator[int]:
    """Endless sampling without replacement within each epoch."""
    while True:
        yield from (int(i) for i in rng.permutation(n))


def _teacher_forcing(seq: Sequence[int]) -> tuple[list[int], list[int]]:
    """(input, target) for a caption; an eos is appended to the target if missing."""
    target = list(seq) if seq and seq[-1] == EOS_ID else list(seq) + [EOS_ID]
    return [BOS_ID] + target[:-1], target


def _fit_len(seq: Sequence[int], max_len: int) -> list[int]:
    return list(seq[: max_len - 1]) if len(seq) >= max_len else list(seq)


def _check_finite(total: torch.Tensor, step: int) -> None:
    value = float(total.detach())
    if not math.isfinite(value):
        raise TrainingDiverged(step, value)


def make_batch(captions: Sequence[CaptionExample], replays: Sequence[ReplayItem],
               pseudo: Sequence[Sequence[int]], max_len: int):
    """Collate caption rows (first) and replay rows (after) into model inputs."""
    inputs, targets, keywords = [], [], []
    for ex in captions:
        x, y = _teacher_forcing(_fit_len(ex.reference, max_len))
        inputs.append(x)
        targets.append(y)
        keywords.append(None)
    for item, yp in zip(replays, pseudo):
        x, y = _teacher_forcing(yp)
        inputs.append(x)
        targets.append(y)
        keywords.append(item.keyword.tokens)
    images = [ex.image for ex in captions] + [it.image for it in replays]
    tokens = pad_sequences(inputs)
    tgt = pad_sequences(targets)
    lengths = torch.tensor([len(x) for x in inputs])
    mask = torch.arange(tokens.shape[1])[None] < lengths[:, None]
    is_replay = torch.zeros(len(inputs), dtype=torch.bool)
    is_replay[len(captions):] = True
    return images, tokens, tgt, mask, is_replay, keywords


def _dtype(model) -> torch.dtype:
    return next(model.parameters()).dtype


def compute_objective(student: CaptionModel, teacher: CaptionModel | None, captions, replays, pseudo,
                      cfg: TrainConfig):
    """Student forward on a mixed batch and the routed objective.

    The student is run in whatever mode it is in; the teacher runs in eval
    mode without gradients.
    """
    max_len = student.config.max_len
    images, tokens, tgt, mask, is_replay, keywords = make_batch(captions, replays, pseudo, max_len)
    regions, region_mask = collate_images(images, _dtype(student))
    teacher_logits = None
    if replays and cfg.use_kd:
        if teacher is None:
            raise ValueError("K-Replay with distillation needs a teacher")
        rows = is_replay.nonzero().flatten()
        with torch.no_grad():
            teacher.eval()
            z_hat = teacher(regions[rows], region_mask[rows], tokens[rows])
        teacher_logits = torch.zeros(tokens.shape + (z_hat.shape[-1],), dtype=z_hat.dtype)
        teacher_logits[rows] = z_hat
    logits = student(regions, region_mask, tokens)
    return batch_objective(
        logits, tgt, mask, is_replay, keywords, teacher_logits,
        lambda_know=cfg.lambda_know, lambda_kd=cfg.kd.lambda_kd, temperature=cfg.kd.temperature,
        use_know=cfg.use_know, use_kd=cfg.use_kd,
    )


def pseudo_captions(student: CaptionModel, replays: Sequence[ReplayItem], max_len: int) -> list[tuple[int, ...]]:
    if not replays:
        return []
    return greedy_decode_batch(student, [r.image for r in replays], max_len)


def kreplay_step(student: CaptionModel, teacher: CaptionModel | None, captions: Sequence[CaptionExample],
                 replays: Sequence[ReplayItem], cfg: TrainConfig, optimizer: torch.optim.Optimizer,
                 pseudo_max_len: int, step: int = 0) -> LossBreakdown:
    """One mini-batch update.

    Greedy pseudo-captions are decoded for the replay images with the current
    student (dropout off), the teacher scores them, then a single student
    forward over captions and pseudo-captions feeds cross-entropy (caption
    rows), knowledge loss and distillation (replay rows), and one optimizer
    step is taken on the weighted total.
    """
    if teacher is not None:
        s_hash, t_hash = getattr(student, "vocab_hash", None), getattr(teacher, "vocab_hash", None)
        if s_hash and t_hash and s_hash != t_hash:
            raise ValueError("teacher and student vocabularies differ")
    pseudo = pseudo_captions(student, replays, pseudo_max_len)
    student.train()
    total, parts = compute_objective(student, teacher, captions, replays, pseudo, cfg)
    _check_finite(total, step)
    optimizer.zero_grad(set_to_none=True)
    total.backward()
    optimizer.step()
    student.eval()
    return parts


def make_optimizer(model: CaptionModel, cfg: TrainConfig) -> torch.optim.Optimizer:
    return torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)


def _run(model: CaptionModel, captions: list[CaptionExample], replays: list[ReplayItem],
         teacher: CaptionModel | None, cfg: TrainConfig, evaluator: Evaluator | None,
         pseudo_max_len: int, selection_metric: str | None,
         on_step: Callable[[int, LossBreakdown], None] | None = None) -> tuple[CaptionModel, RunRecord]:
    cfg.validate()
    record = RunRecord(config=cfg.to_dict(), selection_metric=selection_metric)
    n_rep = cfg.replay_per_batch if replays else 0
    n_cap = cfg.batch_size - n_rep
    if n_cap > 0 and not captions:
        raise ValueError("no caption examples to train on")
    rng = np.random.default_rng(cfg.seed)
    stream = _index_stream(len(captions), rng) if captions else iter(())
    optimizer = make_optimizer(model, cfg)
    best_state = None
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        for step in range(1, cfg.max_steps + 1):
            batch_c = [captions[next(stream)] for _ in range(n_cap)]
            batch_r = [replays[int(i)] for i in rng.integers(len(replays), size=n_rep)] if n_rep else []
            parts = kreplay_step(model, teacher, batch_c, batch_r, cfg, optimizer, pseudo_max_len, step)
            record.losses.append((step, parts))
            record.steps = step
            if on_step is not None:
                on_step(step, parts)
            if evaluator is not None and (step % cfg.eval_every == 0 or step == cfg.max_steps):
                score, metrics = evaluator(model)
                record.evals.append({"step": step, "score": score, **metrics})
                log.info("%s step %d: score %.4f", cfg.stage, step, score)
                if record.best_score is None or score > record.best_score:
                    record.best_score, record.best_step = score, step
                    best_state = copy.deepcopy(model.state_dict())
    if best_state is not None:
        model.load_state_dict(best_state)
    elif cfg.max_steps > 0:
        record.best_step = cfg.max_steps
    model.eval()
    return model, record


def _fresh_copy(model: CaptionModel, stage: str) -> CaptionModel:
    out = copy.deepcopy(model)
    out.stage = STAGE_TAGS[stage]
    return out


def pretrain(model: CaptionModel, corpus, cfg: TrainConfig, vocab: Vocabulary | None = None,
             evaluator: Evaluator | None = None, **kw) -> tuple[CaptionModel, RunRecord]:
    """Cross-entropy training on (image, text) pairs, noisy ones included."""
    if cfg.stage != "pretrain":
        raise ValueError("pretrain requires stage='pretrain'")
    examples = as_caption_examples(corpus, vocab)
    return _run(_fresh_copy(model, "pretrain"), examples, [], None, cfg, evaluator, 0,
                "neg_val_ce" if evaluator else None, **kw)


def vanilla_finetune(model: CaptionModel, d_c, cfg: TrainConfig, vocab: Vocabulary | None = None,
                     evaluator: Evaluator | None = None, selection_metric: str = "cider",
                     **kw) -> tuple[CaptionModel, RunRecord]:
    """Cross-entropy only fine-tuning; the result serves as the teacher."""
    if cfg.stage != "vanilla_ft":
        raise ValueError("vanilla_finetune requires stage='vanilla_ft'")
    examples = as_caption_examples(d_c, vocab)
    return _run(_fresh_copy(model, "vanilla_ft"), examples, [], None, cfg, evaluator, 0,
                selection_metric if evaluator else None, **kw)


def kreplay_finetune(pretrained: CaptionModel, teacher: CaptionModel, d_c, d_k: Sequence[ReplayItem],
                     cfg: TrainConfig, vocab: Vocabulary | None = None, evaluator: Evaluator | None = None,
                     pseudo_max_len: int | None = None, **kw) -> tuple[CaptionModel, RunRecord]:
    """Mixed-batch fine-tuning from the pretrained model with replay exemplars."""
    if cfg.stage != "kreplay":
        raise ValueError("kreplay_finetune requires stage='kreplay'")
    if not d_k:
        raise ValueError("empty replay set; use vanilla_finetune for caption-only training")
    if getattr(teacher, "stage", "vanilla_ft") != "vanilla_ft":
        raise ValueError("teacher must be a vanilla fine-tuned model")
    examples = as_caption_examples(d_c, vocab)
    if pseudo_max_len is None:
        pseudo_max_len = max(len(ex.reference) for ex in examples) + 1
    teacher = teacher.eval()
    before = parameter_checksum(teacher)
    for p in teacher.parameters():
        p.requires_grad_(False)
    try:
        model, record = _run(_fresh_copy(pretrained, "kreplay"), examples, list(d_k), teacher, cfg, evaluator,
                             pseudo_max_len, "cider" if evaluator else None, **kw)
    finally:
        for p in teacher.parameters():
            p.requires_grad_(True)
    if parameter_checksum(teacher) != before:
        raise RuntimeError("teacher parameters changed during K-Replay")
    return model, record


def validation_ce(model: CaptionModel, examples: Sequence[CaptionExample], batch_size: int = 256) -> float:
    """Mean per-caption cross-entropy in eval mode."""
    cfg = TrainConfig(stage="pretrain", replay_per_batch=0)
    total, n = 0.0, 0
    model.eval()
    with torch.no_grad():
        for i in range(0, len(examples), batch_size):
            chunk = list(examples[i:i + batch_size])
            _, parts = compute_objective(model, None, chunk, [], [], cfg)
            total += parts.l_ce * len(chunk)
            n += len(chunk)
    return total / n
