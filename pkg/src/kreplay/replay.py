"""Keyword filtering of pretraining pairs into a replay exemplar set."""
from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .corpus import UNK_ID, Vocabulary, normalize_words, tokenize


@dataclass(frozen=True)
class KnowledgeKeyword:
    surface: str
    tokens: tuple[int, ...]
    category_id: int

    @property
    def words(self) -> tuple[str, ...]:
        return tuple(normalize_words(self.surface))


def make_keyword(surface: str, vocab: Vocabulary, category_id: int) -> KnowledgeKeyword:
    """Tokenize a keyword, refusing any out-of-vocabulary word."""
    tokens = tokenize(surface, vocab)
    if not tokens:
        raise ValueError(f"keyword {surface!r} is empty after normalization")
    if UNK_ID in tokens:
        missing = [w for w in normalize_words(surface) if w not in vocab]
        raise ValueError(f"keyword {surface!r} has out-of-vocabulary words {missing}")
    return KnowledgeKeyword(surface, tokens, category_id)


def contains_words(words: Sequence[str], needle: Sequence[str]) -> bool:
    n = len(needle)
    if n == 0:
        return False
    needle = list(needle)
    return any(list(words[i:i + n]) == needle for i in range(len(words) - n + 1))


def detect_keyword(text: str, keyword: KnowledgeKeyword) -> bool:
    """True iff the keyword's words occur contiguously in the normalized text."""
    return contains_words(normalize_words(text), keyword.words)


@dataclass
class ReplayExemplar:
    image_id: str
    keyword: KnowledgeKeyword
    text: str = ""


@dataclass
class ReplaySet:
    exemplars: list[ReplayExemplar]
    keyword_set: list[KnowledgeKeyword]
    seed: int = 0
    provenance: list[str] = field(init=False)

    def __post_init__(self):
        self.provenance = [ex.image_id for ex in self.exemplars]

    def __len__(self) -> int:
        return len(self.exemplars)

    def category_counts(self) -> dict[int, int]:
        counts: dict[int, int] = defaultdict(int)
        for ex in self.exemplars:
            counts[ex.keyword.category_id] += 1
        return dict(counts)

    def save(self, path) -> None:
        path = Path(path)
        lines = [
            json.dumps({"image_id": ex.image_id, "keyword": ex.keyword.surface,
                        "category_id": ex.keyword.category_id})
            for ex in self.exemplars
        ]
        path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
        sidecar = {
            "keyword_set": [{"keyword": k.surface, "category_id": k.category_id} for k in self.keyword_set],
            "seed": self.seed,
        }
        _sidecar(path).write_text(json.dumps(sidecar, indent=2) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path, vocab: Vocabulary) -> "ReplaySet":
        path = Path(path)
        meta = json.loads(_sidecar(path).read_text(encoding="utf-8"))
        keywords = [make_keyword(k["keyword"], vocab, k["category_id"]) for k in meta["keyword_set"]]
        by_key = {(k.surface, k.category_id): k for k in keywords}
        exemplars = []
        for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
            if not line.strip():
                continue
            obj = json.loads(line)
            key = (obj["keyword"], obj["category_id"])
            if key not in by_key:
                raise ValueError(f"{path}: line {lineno}: keyword {obj['keyword']!r} not in keyword_set")
            exemplars.append(ReplayExemplar(obj["image_id"], by_key[key]))
        return cls(exemplars, keywords, meta["seed"])


def _sidecar(path: Path) -> Path:
    return path.with_name(path.stem + ".meta.json")


def _proportional_quota(sizes: list[int], total: int) -> list[int]:
    """Largest-remainder allocation of ``total`` proportional to ``sizes``."""
    n = sum(sizes)
    exact = [s * total / n for s in sizes]
    quota = [min(int(np.floor(x)), s) for x, s in zip(exact, sizes)]
    order = sorted(range(len(sizes)), key=lambda i: (-(exact[i] - quota[i]), i))
    left = total - sum(quota)
    for i in order:
        if left == 0:
            break
        if quota[i] < sizes[i]:
            quota[i] += 1
            left -= 1
    return quota


def build_replay_set(corpus, keywords: Sequence[KnowledgeKeyword], per_category_cap: int = 25,
                     total_cap: int | None = None, seed: int = 0) -> ReplaySet:
    """Scan ``corpus`` in order and collect (image, keyword) exemplars.

    A text is assigned to the first keyword in ``keywords`` it contains.
    Categories stop accepting once they hold ``per_category_cap`` items. If
    more than ``total_cap`` remain, a seeded subsample keeps per-category
    proportions up to integer rounding.
    """
    if not keywords:
        raise ValueError("keywords must be non-empty")
    if per_category_cap < 1:
        raise ValueError("per_category_cap must be >= 1")
    if total_cap is not None and total_cap < 1:
        raise ValueError("total_cap must be >= 1")

    word_lists = [k.words for k in keywords]
    buckets: list[list[ReplayExemplar]] = [[] for _ in keywords]
    for rec in corpus:
        words = normalize_words(rec.text)
        for idx, kw_words in enumerate(word_lists):
            if contains_words(words, kw_words):
                if len(buckets[idx]) < per_category_cap:
                    buckets[idx].append(ReplayExemplar(rec.image_id, keywords[idx], rec.text))
                break

    total = sum(len(b) for b in buckets)
    if total == 0:
        raise ValueError("no replay exemplars found")
    if total_cap is not None and total > total_cap:
        rng = np.random.default_rng(seed)
        quota = _proportional_quota([len(b) for b in buckets], total_cap)
        buckets = [
            [b[i] for i in sorted(rng.choice(len(b), size=q, replace=False))] if q < len(b) else b
            for b, q in zip(buckets, quota)
        ]

    # restore corpus order across categories
    position = {rec.image_id: i for i, rec in enumerate(corpus)}
    exemplars = sorted((ex for b in buckets for ex in b), key=lambda ex: position[ex.image_id])
    return ReplaySet(exemplars, list(keywords), seed)


def split_categories(keywords: Sequence, unseen_fraction: float, seed: int) -> tuple[list, list]:
    """Seeded partition of keywords into (seen, unseen), each in input order."""
    m = len(keywords)
    if m < 2:
        raise ValueError("need at least 2 keywords to split")
    if not 0.0 < unseen_fraction < 1.0:
        raise ValueError("unseen_fraction must lie in (0, 1)")
    n_unseen = int(round(unseen_fraction * m))
    if n_unseen == 0 or n_unseen == m:
        raise ValueError(f"unseen_fraction={unseen_fraction} leaves one side of the split empty for {m} keywords")
    perm = np.random.default_rng([seed, 7]).permutation(m)
    unseen_idx = set(int(i) for i in perm[:n_unseen])
    seen = [k for i, k in enumerate(keywords) if i not in unseen_idx]
    unseen = [k for i, k in enumerate(keywords) if i in unseen_idx]
    return seen, unseen
