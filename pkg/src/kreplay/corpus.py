"""Vocabulary, word-level tokenization and the JSON Lines dataset schemas."""
from __future__ import annotations

import hashlib
import json
import string
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

PAD, BOS, EOS, UNK = "<pad>", "<bos>", "<eos>", "<unk>"
SPECIAL_TOKENS = (PAD, BOS, EOS, UNK)
PAD_ID, BOS_ID, EOS_ID, UNK_ID = 0, 1, 2, 3

DATASET_KINDS = ("pretrain", "caption", "knoweval")
NUM_REFERENCES = 3

# hyphens are handled separately: kept inside words, stripped at the edges
_STRIP_TABLE = str.maketrans("", "", string.punctuation.replace("-", ""))


class DatasetError(ValueError):
    """Raised when a dataset file or record violates its schema."""


def normalize_words(text: str) -> list[str]:
    """Lowercase, drop ASCII punctuation (internal hyphens survive), split."""
    words = []
    for raw in text.lower().translate(_STRIP_TABLE).split():
        word = raw.strip("-")
        if word:
            words.append(word)
    return words


@dataclass(frozen=True)
class Vocabulary:
    """Bijective token/id mapping. Ids 0..3 are pad, bos, eos, unk."""

    id_to_token: tuple[str, ...]
    token_to_id: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if tuple(self.id_to_token[:4]) != SPECIAL_TOKENS:
            raise ValueError("vocabulary must start with the four special tokens")
        mapping = {tok: i for i, tok in enumerate(self.id_to_token)}
        if len(mapping) != len(self.id_to_token):
            raise ValueError("duplicate tokens in vocabulary")
        object.__setattr__(self, "token_to_id", mapping)

    pad_id = PAD_ID
    bos_id = BOS_ID
    eos_id = EOS_ID
    unk_id = UNK_ID

    def __len__(self) -> int:
        return len(self.id_to_token)

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id

    @property
    def special_ids(self) -> frozenset[int]:
        return frozenset((PAD_ID, BOS_ID, EOS_ID, UNK_ID))

    def sha256(self) -> str:
        payload = json.dumps(list(self.id_to_token), ensure_ascii=False).encode("utf-8")
        return hashlib.sha256(payload).hexdigest()

    def to_json(self) -> dict:
        return {"tokens": list(self.id_to_token)}

    @classmethod
    def from_json(cls, obj: dict) -> "Vocabulary":
        return cls(tuple(obj["tokens"]))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), ensure_ascii=False) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def build_vocab(texts: Sequence[str], min_count: int = 1) -> Vocabulary:
    """Build a vocabulary from raw texts.

    Specials come first, then tokens by descending count with lexicographic
    tie-breaking, so the same corpus always yields the same ids.
    """
    if len(texts) == 0:
        raise ValueError("empty corpus")
    counts = Counter()
    for text in texts:
        counts.update(normalize_words(text))
    kept = [tok for tok, c in counts.items() if c >= min_count and tok not in SPECIAL_TOKENS]
    kept.sort(key=lambda tok: (-counts[tok], tok))
    return Vocabulary(SPECIAL_TOKENS + tuple(kept))


def tokenize(text: str, vocab: Vocabulary) -> tuple[int, ...]:
    """Map text to ids; unknown words become ``unk_id``. No bos/eos is added."""
    lookup = vocab.token_to_id
    return tuple(lookup.get(w, UNK_ID) for w in normalize_words(text))


def detokenize(ids: Iterable[int], vocab: Vocabulary) -> str:
    """Inverse of :func:`tokenize`; stops at eos and drops pad/bos."""
    words = []
    for i in ids:
        i = int(i)
        if i == EOS_ID:
            break
        if i in (PAD_ID, BOS_ID):
            continue
        words.append(vocab.id_to_token[i])
    return " ".join(words)


# ---------------------------------------------------------------------------
# in-memory example types
# ---------------------------------------------------------------------------


@dataclass
class ImageFeatures:
    regions: np.ndarray  # (R, d)
    source_id: str

    def __post_init__(self):
        self.regions = np.asarray(self.regions, dtype=np.float64)
        if self.regions.ndim != 2 or self.regions.shape[0] < 1:
            raise ValueError(f"image {self.source_id}: regions must be an (R>=1, d) matrix")
        if not np.all(np.isfinite(self.regions)):
            raise ValueError(f"image {self.source_id}: non-finite region features")


@dataclass
class CaptionExample:
    image: ImageFeatures
    reference: tuple[int, ...]

    def __post_init__(self):
        if len(self.reference) < 1:
            raise ValueError(f"image {self.image.source_id}: empty reference")


@dataclass
class PretrainPair:
    image: ImageFeatures
    text: str
    is_noisy: bool = False

    def __post_init__(self):
        if not self.text:
            raise ValueError(f"image {self.image.source_id}: empty text")


# ---------------------------------------------------------------------------
# JSON Lines records
# ---------------------------------------------------------------------------


@dataclass
class TextRecord:
    """One line of a ``pretrain`` or ``caption`` file."""

    image_id: str
    objects: list[int]
    entity: str | None
    text: str


@dataclass
class KnowEvalRecord:
    image_id: str
    objects: list[int]
    entity: str
    keyword: str
    references: list[str]


@dataclass
class Dataset:
    kind: str
    records: list

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def __getitem__(self, i):
        return self.records[i]


_SCHEMAS = {
    "pretrain": ("image_id", "objects", "entity", "text"),
    "caption": ("image_id", "objects", "entity", "text"),
    "knoweval": ("image_id", "objects", "entity", "keyword", "references"),
}


def _check_kind(kind: str) -> None:
    if kind not in DATASET_KINDS:
        raise DatasetError(f"unknown dataset kind {kind!r}; expected one of {DATASET_KINDS}")


def _fail(kind, lineno, msg):
    where = f"line {lineno}" if lineno is not None else "record"
    raise DatasetError(f"{kind} dataset, {where}: {msg}")


def _parse_record(obj, kind: str, lineno=None):
    if not isinstance(obj, dict):
        _fail(kind, lineno, "record is not a JSON object")
    for name in _SCHEMAS[kind]:
        if name not in obj:
            _fail(kind, lineno, f"missing field {name!r}")
    if not isinstance(obj["image_id"], str) or not obj["image_id"]:
        _fail(kind, lineno, "field 'image_id' must be a non-empty string")
    objects = obj["objects"]
    if not isinstance(objects, list) or not all(isinstance(o, int) and not isinstance(o, bool) for o in objects):
        _fail(kind, lineno, "field 'objects' must be a list of integers")
    if kind == "knoweval":
        if not isinstance(obj["entity"], str) or not obj["entity"]:
            _fail(kind, lineno, "field 'entity' must be a non-empty string")
        if not isinstance(obj["keyword"], str) or not normalize_words(obj["keyword"]):
            _fail(kind, lineno, "field 'keyword' must be a non-empty string")
        refs = obj["references"]
        if not isinstance(refs, list) or len(refs) != NUM_REFERENCES or not all(isinstance(r, str) and r for r in refs):
            _fail(kind, lineno, f"field 'references' must hold exactly {NUM_REFERENCES} non-empty strings")
        return KnowEvalRecord(obj["image_id"], list(objects), obj["entity"], obj["keyword"], list(refs))
    if obj["entity"] is not None and not isinstance(obj["entity"], str):
        _fail(kind, lineno, "field 'entity' must be a string or null")
    if not isinstance(obj["text"], str) or not obj["text"].strip():
        _fail(kind, lineno, "field 'text' must be a non-empty string")
    return TextRecord(obj["image_id"], list(objects), obj["entity"], obj["text"])


def validate_dataset(dataset: Dataset) -> Dataset:
    """Re-check every record against its schema; returns the dataset unchanged."""
    _check_kind(dataset.kind)
    for i, rec in enumerate(dataset.records, start=1):
        _parse_record(asdict(rec), dataset.kind, i)
    return dataset


def load_dataset(path, kind: str) -> Dataset:
    _check_kind(kind)
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                _fail(kind, lineno, f"invalid JSON ({exc.msg})")
            records.append(_parse_record(obj, kind, lineno))
    return Dataset(kind, records)


def dumps_records(records) -> str:
    return "".join(json.dumps(asdict(r), ensure_ascii=False, sort_keys=False) + "\n" for r in records)


def save_dataset(dataset: Dataset, path) -> None:
    validate_dataset(dataset)
    Path(path).write_text(dumps_records(dataset.records), encoding="utf-8")
