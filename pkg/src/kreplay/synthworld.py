"""Deterministic synthetic world: noisy knowledge-bearing pretraining pairs,
generically captioned fine-tuning data and a keyword evaluation set.

Entity images carry a feature signature mixing a superordinate-class
direction with an entity-specific direction. Pretraining texts name the
entity; fine-tuning captions only use the superordinate word, which is what
teaches a fine-tuned model to stop naming entities.
"""
from __future__ import annotations

import hashlib
import json
from collections import Counter
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .corpus import (
    CaptionExample,
    Dataset,
    ImageFeatures,
    KnowEvalRecord,
    PretrainPair,
    TextRecord,
    Vocabulary,
    dumps_records,
    load_dataset,
    normalize_words,
    tokenize,
)
from .replay import split_categories

SUPER_WORDS = ("tower", "castle", "bridge", "statue", "temple", "fountain", "palace", "stadium")

OBJECT_WORDS = (
    "dog", "cat", "tree", "car", "bus", "bike", "bench", "boat", "bird", "horse",
    "cow", "sheep", "cup", "bottle", "chair", "table", "lamp", "clock", "kite", "ball",
    "umbrella", "bag", "hat", "flag", "fence", "sign", "truck", "train", "plane", "kayak",
    "cloud", "rock", "flower", "bush", "road", "river", "hill", "lake", "door", "window",
    "pole", "wall", "crowd", "child", "woman", "man", "girl", "boy", "tent", "cart",
    "apple", "banana", "pizza", "cake", "book", "phone", "laptop", "guitar", "drum", "piano",
)

_ONSETS = ("b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "kr", "st", "th", "dr", "sh")
_VOWELS = ("a", "e", "i", "o", "u", "ai", "ou")
_CODAS = ("", "", "n", "r", "l", "s", "x", "m")

FILES = {
    "pretrain": ("pretrain.jsonl", "pretrain"),
    "generic_train": ("generic_train.jsonl", "caption"),
    "generic_val": ("generic_val.jsonl", "caption"),
    "knoweval_val": ("knoweval_val.jsonl", "knoweval"),
    "knoweval_seen": ("knoweval_seen.jsonl", "knoweval"),
    "knoweval_unseen": ("knoweval_unseen.jsonl", "knoweval"),
}
MANIFEST = "manifest.json"


@dataclass
class WorldConfig:
    num_entities: int = 40
    num_objects: int = 60
    images_per_entity: int = 50
    generic_images: int = 2000
    noise_rate: float = 0.15
    feature_dim: int = 32
    seed: int = 0
    num_supercategories: int = 8
    unseen_fraction: float = 0.5
    caption_images_per_entity: int = 10
    val_images_per_entity: int = 3
    eval_images_per_entity: int = 6
    pretrain_plain_images: int = 1000
    generic_val_fraction: float = 0.1
    region_noise: float = 0.1
    signature_class_weight: float = 0.6

    def validate(self) -> "WorldConfig":
        def bad(name, why):
            raise ValueError(f"WorldConfig.{name}: {why}")

        if self.num_entities < 2:
            bad("num_entities", "must be >= 2")
        if not 0.0 <= self.noise_rate < 1.0:
            bad("noise_rate", "must lie in [0, 1)")
        if self.feature_dim < 4:
            bad("feature_dim", "must be >= 4")
        if not 3 <= self.num_objects <= len(OBJECT_WORDS):
            bad("num_objects", f"must lie in [3, {len(OBJECT_WORDS)}]")
        if not 1 <= self.num_supercategories <= len(SUPER_WORDS):
            bad("num_supercategories", f"must lie in [1, {len(SUPER_WORDS)}]")
        if not 0.0 < self.unseen_fraction < 1.0:
            bad("unseen_fraction", "must lie in (0, 1)")
        if not 0.0 < self.generic_val_fraction < 1.0:
            bad("generic_val_fraction", "must lie in (0, 1)")
        for name in ("images_per_entity", "generic_images", "caption_images_per_entity",
                     "val_images_per_entity", "eval_images_per_entity", "pretrain_plain_images"):
            if getattr(self, name) < 0:
                bad(name, "must be >= 0")
        if self.images_per_entity < 1:
            bad("images_per_entity", "must be >= 1")
        if self.eval_images_per_entity < 1:
            bad("eval_images_per_entity", "must be >= 1")
        if self.region_noise < 0:
            bad("region_noise", "must be >= 0")
        if not 0.0 <= self.signature_class_weight < 1.0:
            bad("signature_class_weight", "must lie in [0, 1)")
        return self

    @classmethod
    def from_dict(cls, obj: dict) -> "WorldConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ValueError(f"WorldConfig: unknown fields {sorted(unknown)}")
        return cls(**obj)


@dataclass(frozen=True)
class Entity:
    category_id: int
    name: str
    superordinate: str


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def _stable_int(*parts) -> int:
    digest = hashlib.sha256("|".join(map(str, parts)).encode()).digest()
    return int.from_bytes(digest[:8], "little")


class World:
    """Entity/object inventory plus the feature renderer for a config."""

    def __init__(self, cfg: WorldConfig):
        self.cfg = cfg.validate()
        rng = np.random.default_rng(cfg.seed)
        d = cfg.feature_dim
        self.object_words = OBJECT_WORDS[: cfg.num_objects]
        self.super_words = SUPER_WORDS[: cfg.num_supercategories]
        self.object_vectors = _unit(rng.standard_normal((cfg.num_objects, d)))
        class_vectors = _unit(rng.standard_normal((cfg.num_supercategories, d)))
        own = _unit(rng.standard_normal((cfg.num_entities, d)))

        reserved = set(self.object_words) | set(self.super_words) | set(_TEMPLATE_WORDS)
        used: set[str] = set()
        self.entities: list[Entity] = []
        signatures = []
        w = cfg.signature_class_weight
        for e in range(cfg.num_entities):
            n_words = 1 + int(rng.random() < 0.5)
            words = []
            while len(words) < n_words:
                word = _make_word(rng)
                if word in used or word in reserved:
                    continue
                used.add(word)
                words.append(word)
            sup = e % cfg.num_supercategories
            self.entities.append(Entity(e, " ".join(words), self.super_words[sup]))
            signatures.append(w * class_vectors[sup] + np.sqrt(1.0 - w * w) * own[e])
        self.signatures = _unit(np.asarray(signatures))
        self.by_name = {ent.name: ent for ent in self.entities}

    def features(self, image_id: str, objects, entity: str | None) -> ImageFeatures:
        rows = []
        if entity is not None:
            rows.append(self.signatures[self.by_name[entity].category_id])
        rows.extend(self.object_vectors[o] for o in objects)
        regions = np.asarray(rows)
        noise_rng = np.random.default_rng(_stable_int(self.cfg.seed, image_id))
        scale = self.cfg.region_noise / np.sqrt(self.cfg.feature_dim)
        regions = regions + scale * noise_rng.standard_normal(regions.shape)
        return ImageFeatures(regions, image_id)

    def record_features(self, record) -> ImageFeatures:
        return self.features(record.image_id, record.objects, record.entity)


_TEMPLATE_WORDS = ("a", "photo", "of", "with", "and", "next", "to", "the", "view", "on", "its", "own")


def _make_word(rng) -> str:
    n_syl = 2 + int(rng.random() < 0.4)
    parts = []
    for _ in range(n_syl):
        parts.append(_ONSETS[rng.integers(len(_ONSETS))] + _VOWELS[rng.integers(len(_VOWELS))])
    return "".join(parts) + _CODAS[rng.integers(len(_CODAS))]


def _object_phrase(world: World, objects) -> str:
    items = [f"a {world.object_words[o]}" for o in objects]
    if len(items) == 1:
        return items[0]
    return ", ".join(items[:-1]) + " and " + items[-1]


def pretrain_text(world: World, objects, entity: str | None) -> str:
    if entity is None:
        return f"a photo of {_object_phrase(world, objects)}"
    return f"a photo of {entity} next to {_object_phrase(world, objects)}"


def generic_caption(world: World, objects, entity: str | None) -> str:
    if entity is not None:
        return f"a {world.by_name[entity].superordinate} next to {_object_phrase(world, objects)}"
    if len(objects) == 1:
        return f"{_object_phrase(world, objects)} on its own"
    return f"a {world.object_words[objects[0]]} next to {_object_phrase(world, objects[1:])}"


def knowledge_references(world: World, objects, entity: str) -> list[str]:
    sup = world.by_name[entity].superordinate
    phrase = _object_phrase(world, objects)
    return [
        f"the {entity} next to {phrase}",
        f"a view of the {entity} {sup} next to {phrase}",
        f"{entity} {sup} next to {phrase}",
    ]


@dataclass
class WorldBundle:
    config: WorldConfig
    pretrain: Dataset
    noisy: list[bool]
    generic_train: Dataset
    generic_val: Dataset
    knoweval_val: Dataset
    knoweval_seen: Dataset
    knoweval_unseen: Dataset
    keywords: list[dict]

    _world: World | None = None

    @property
    def world(self) -> World:
        if self._world is None:
            self._world = World(self.config)
        return self._world

    @property
    def seen_keywords(self) -> list[str]:
        return [k["keyword"] for k in self.keywords if k["split"] == "seen"]

    @property
    def unseen_keywords(self) -> list[str]:
        return [k["keyword"] for k in self.keywords if k["split"] == "unseen"]

    def split(self, name: str) -> Dataset:
        if name not in FILES:
            raise KeyError(f"unknown split {name!r}; expected one of {sorted(FILES)}")
        return getattr(self, name)

    def pretrain_pairs(self) -> list[PretrainPair]:
        return [
            PretrainPair(self.world.record_features(r), r.text, flag)
            for r, flag in zip(self.pretrain.records, self.noisy)
        ]

    def caption_examples(self, split: str, vocab: Vocabulary) -> list[CaptionExample]:
        return [CaptionExample(self.world.record_features(r), tokenize(r.text, vocab)) for r in self.split(split)]

    def pretrain_val_examples(self, vocab: Vocabulary) -> list[CaptionExample]:
        """Held-out knowledge-validation images with clean pretraining-style text."""
        return [
            CaptionExample(self.world.record_features(r), tokenize(pretrain_text(self.world, r.objects, r.entity), vocab))
            for r in self.knoweval_val
        ]

    def training_texts(self) -> list[str]:
        return [r.text for r in self.pretrain] + [r.text for r in self.generic_train]

    def manifest(self) -> dict:
        return {
            "config": asdict(self.config),
            "entities": [asdict(e) for e in self.world.entities],
            "keywords": self.keywords,
            "seen_keywords": self.seen_keywords,
            "unseen_keywords": self.unseen_keywords,
            "noisy_image_ids": [r.image_id for r, f in zip(self.pretrain.records, self.noisy) if f],
        }

    def serialize(self) -> dict[str, str]:
        """Filename -> file content for every file the bundle writes."""
        out = {fname: dumps_records(self.split(name).records) for name, (fname, _) in FILES.items()}
        out[MANIFEST] = json.dumps(self.manifest(), indent=2, ensure_ascii=False) + "\n"
        return out

    def save(self, directory) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for fname, content in self.serialize().items():
            (directory / fname).write_text(content, encoding="utf-8")
        return directory


def load_world(directory) -> WorldBundle:
    directory = Path(directory)
    manifest = json.loads((directory / MANIFEST).read_text(encoding="utf-8"))
    cfg = WorldConfig.from_dict(manifest["config"]).validate()
    splits = {name: load_dataset(directory / fname, kind) for name, (fname, kind) in FILES.items()}
    noisy_ids = set(manifest["noisy_image_ids"])
    noisy = [r.image_id in noisy_ids for r in splits["pretrain"].records]
    return WorldBundle(cfg, noisy=noisy, keywords=manifest["keywords"], **splits)


def _pick_objects(rng, n_objects: int) -> list[int]:
    k = int(rng.integers(1, 4))
    return sorted(int(o) for o in rng.choice(n_objects, size=k, replace=False))


def generate_world(cfg: WorldConfig) -> WorldBundle:
    """Build every split of the synthetic world from ``cfg`` alone."""
    world = World(cfg)
    rng = np.random.default_rng([cfg.seed, 1])
    ents = world.entities

    # pretraining pairs: entity images plus plain object images, shuffled
    content = [(e.name, _pick_objects(rng, cfg.num_objects)) for e in ents for _ in range(cfg.images_per_entity)]
    content += [(None, _pick_objects(rng, cfg.num_objects)) for _ in range(cfg.pretrain_plain_images)]
    order = rng.permutation(len(content))
    content = [content[i] for i in order]
    clean = [pretrain_text(world, objs, ent) for ent, objs in content]
    texts, noisy = list(clean), [False] * len(clean)
    if cfg.noise_rate > 0 and len(clean) > 1:
        for i in range(len(clean)):
            if rng.random() < cfg.noise_rate:
                j = int(rng.integers(len(clean) - 1))
                j += j >= i
                texts[i], noisy[i] = clean[j], True
    pretrain = Dataset("pretrain", [
        TextRecord(f"pt-{i:06d}", objs, ent, text) for i, ((ent, objs), text) in enumerate(zip(content, texts))
    ])

    names = [e.name for e in ents]
    seen, unseen = split_categories(names, cfg.unseen_fraction, cfg.seed)
    unseen_set = set(unseen)

    # generic caption data: seen-entity images described by class word, plus plain images.
    # Unseen entities are kept out entirely so their only supervision is pretraining.
    generic = [(name, _pick_objects(rng, cfg.num_objects)) for name in seen for _ in range(cfg.caption_images_per_entity)]
    generic += [(None, _pick_objects(rng, cfg.num_objects)) for _ in range(cfg.generic_images)]
    generic = [generic[i] for i in rng.permutation(len(generic))]
    records = [TextRecord(f"gc-{i:06d}", objs, ent, generic_caption(world, objs, ent)) for i, (ent, objs) in enumerate(generic)]
    n_val = int(round(cfg.generic_val_fraction * len(records)))
    generic_val = Dataset("caption", records[:n_val])
    generic_train = Dataset("caption", records[n_val:])

    keywords = [
        {"keyword": e.name, "entity": e.name, "category_id": e.category_id, "superordinate": e.superordinate,
         "split": "unseen" if e.name in unseen_set else "seen"}
        for e in ents
    ]

    counter = iter(range(10**9))

    def eval_records(entity_names, per_entity):
        out = []
        for name in entity_names:
            for _ in range(per_entity):
                objs = _pick_objects(rng, cfg.num_objects)
                out.append(KnowEvalRecord(f"ke-{next(counter):06d}", objs, name, name,
                                          knowledge_references(world, objs, name)))
        return Dataset("knoweval", out)

    knoweval_val = eval_records(seen, cfg.val_images_per_entity)
    knoweval_seen = eval_records(seen, cfg.eval_images_per_entity)
    knoweval_unseen = eval_records(unseen, cfg.eval_images_per_entity)

    bundle = WorldBundle(cfg, pretrain, noisy, generic_train, generic_val,
                         knoweval_val, knoweval_seen, knoweval_unseen, keywords)
    bundle._world = world
    return bundle


def world_stats(bundle: WorldBundle) -> dict:
    """Per-entity pretraining frequencies, reference lengths and noise rate."""
    image_freq = Counter(r.entity for r in bundle.pretrain if r.entity is not None)
    text_freq = Counter()
    for r in bundle.pretrain:
        words = f" {' '.join(normalize_words(r.text))} "
        for k in bundle.keywords:
            if f" {k['keyword']} " in words:
                text_freq[k["keyword"]] += 1
    refs = [ref for split in ("knoweval_val", "knoweval_seen", "knoweval_unseen")
            for rec in bundle.split(split) for ref in rec.references]
    captions = [r.text for r in bundle.generic_train] + [r.text for r in bundle.generic_val]
    n = len(bundle.noisy)
    return {
        "num_pretrain_pairs": n,
        "num_entity_images": sum(image_freq.values()),
        "entity_image_frequency": {k["keyword"]: image_freq.get(k["entity"], 0) for k in bundle.keywords},
        "entity_text_frequency": {k["keyword"]: text_freq.get(k["keyword"], 0) for k in bundle.keywords},
        "mean_reference_length": float(np.mean([len(normalize_words(r)) for r in refs])) if refs else 0.0,
        "mean_caption_length": float(np.mean([len(normalize_words(c)) for c in captions])) if captions else 0.0,
        "noise_fraction": (sum(bundle.noisy) / n) if n else 0.0,
        "split_sizes": {name: len(bundle.split(name)) for name in FILES},
    }
