"""Pipeline configuration: nested sections, JSON round trip, dotted overrides
and per-stage seed derivation."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Any

from .model import ModelConfig
from .synthworld import WorldConfig
from .trainer import TrainConfig

# aliases accepted in override keys (the Greek spellings follow the usual notation)
KEY_ALIASES = {"λ_know": "lambda_know", "λ_kd": "kd.lambda_kd", "lambda_kd": "kd.lambda_kd"}


def derive_seed(seed: int, name: str) -> int:
    digest = hashlib.sha256(f"{seed}:{name}".encode()).digest()
    return int.from_bytes(digest[:4], "big") & 0x7FFFFFFF


@dataclass
class ModelSection:
    d_model: int = 64
    num_layers: int = 2
    num_heads: int = 4
    max_len: int = 24
    dropout: float = 0.1
    seed: int | None = None

    def build(self, vocab_size: int, feature_dim: int) -> ModelConfig:
        return ModelConfig(vocab_size=vocab_size, feature_dim=feature_dim, d_model=self.d_model,
                           num_layers=self.num_layers, num_heads=self.num_heads, max_len=self.max_len,
                           dropout=self.dropout, seed=self.seed).validate()


@dataclass
class ReplaySection:
    per_category_cap: int = 25
    total_cap: int | None = 500
    num_categories: int | None = None  # None keeps every seen category
    seed: int | None = None

    def validate(self) -> "ReplaySection":
        if self.per_category_cap < 1:
            raise ValueError("replay.per_category_cap: must be >= 1")
        if self.total_cap is not None and self.total_cap < 1:
            raise ValueError("replay.total_cap: must be >= 1")
        if self.num_categories is not None and self.num_categories < 1:
            raise ValueError("replay.num_categories: must be >= 1")
        return self


@dataclass
class EvalSection:
    max_len: int = 20
    batch_size: int = 256


@dataclass
class PathsSection:
    world_dir: str | None = None
    run_dir: str | None = None


def _pretrain_defaults() -> TrainConfig:
    return TrainConfig(stage="pretrain", replay_per_batch=0, max_steps=3000, eval_every=500)


def _finetune_defaults() -> TrainConfig:
    return TrainConfig(stage="vanilla_ft", replay_per_batch=0, max_steps=1000, eval_every=100)


def _kreplay_defaults() -> TrainConfig:
    return TrainConfig(stage="kreplay", max_steps=1500, eval_every=100)


STAGE_FOR_SECTION = {"pretrain": "pretrain", "finetune": "vanilla_ft", "train": "kreplay"}


@dataclass
class PipelineConfig:
    seed: int = 0
    world: WorldConfig = field(default_factory=WorldConfig)
    model: ModelSection = field(default_factory=ModelSection)
    replay: ReplaySection = field(default_factory=ReplaySection)
    pretrain: TrainConfig = field(default_factory=_pretrain_defaults)
    finetune: TrainConfig = field(default_factory=_finetune_defaults)
    train: TrainConfig = field(default_factory=_kreplay_defaults)
    eval: EvalSection = field(default_factory=EvalSection)
    paths: PathsSection = field(default_factory=PathsSection)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, ensure_ascii=False) + "\n"

    @classmethod
    def from_dict(cls, obj: dict, *, explicit_seeds: bool = True) -> "PipelineConfig":
        """Build from a (possibly partial) dict; missing fields take defaults.

        With ``explicit_seeds`` False, section seeds absent from ``obj`` are
        left unset so that ``resolve`` derives them.
        """
        obj = dict(obj)
        unknown = set(obj) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"config: unknown sections {sorted(unknown)}")
        cfg = cls()
        if "seed" in obj:
            cfg.seed = _as_int("seed", obj.pop("seed"))
        for name, value in obj.items():
            if not isinstance(value, dict):
                raise ValueError(f"config.{name}: expected an object")
            setattr(cfg, name, _merge(getattr(cfg, name), value, name))
        if not explicit_seeds:
            for name in ("world", "model", "replay", "pretrain", "finetune", "train"):
                if "seed" not in obj.get(name, {}):
                    getattr(cfg, name).seed = None
        return cfg

    def resolve(self) -> "PipelineConfig":
        """Fill unset seeds from the top-level seed and validate every section."""
        for name in ("world", "model", "replay", "pretrain", "finetune", "train"):
            section = getattr(self, name)
            if section.seed is None:
                section.seed = derive_seed(self.seed, name)
        for name, stage in STAGE_FOR_SECTION.items():
            section = getattr(self, name)
            if section.stage != stage:
                raise ValueError(f"config.{name}.stage: must be {stage!r}")
            section.validate()
        self.world.validate()
        self.replay.validate()
        return self


def _as_int(name, value):
    if isinstance(value, bool) or not isinstance(value, int):
        raise ValueError(f"config.{name}: expected an integer")
    return value


def _merge(current, value: dict, path: str):
    known = {f.name: f for f in fields(current)}
    unknown = set(value) - set(known)
    if unknown:
        raise ValueError(f"config.{path}: unknown fields {sorted(unknown)}")
    kwargs = {}
    for key, v in value.items():
        sub = getattr(current, key)
        if is_dataclass(sub):
            v = _merge(sub, v, f"{path}.{key}") if isinstance(v, dict) else v
        kwargs[key] = v
    merged = {f.name: getattr(current, f.name) for f in fields(current)}
    merged.update(kwargs)
    try:
        return type(current)(**merged)
    except (TypeError, ValueError) as err:
        raise ValueError(f"config.{path}: {err}") from None


def parse_value(text: str) -> Any:
    """JSON literal if it parses, else the raw string."""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def canonical_key(key: str) -> str:
    parts = key.split(".")
    out = []
    for p in parts:
        out.extend(KEY_ALIASES.get(p, p).split("."))
    return ".".join(out)


def apply_overrides(base: dict, overrides: list[str]) -> dict:
    """Apply ``key=value`` strings (dotted keys) to a nested config dict."""
    out = json.loads(json.dumps(base))
    for item in overrides:
        if "=" not in item:
            raise ValueError(f"override {item!r}: expected key=value")
        key, raw = item.split("=", 1)
        path = canonical_key(key.strip()).split(".")
        if not all(path):
            raise ValueError(f"override {item!r}: empty key component")
        node = out
        for part in path[:-1]:
            nxt = node.setdefault(part, {})
            if not isinstance(nxt, dict):
                raise ValueError(f"override {item!r}: {part!r} is not a section")
            node = nxt
        node[path[-1]] = parse_value(raw)
    return out


def load_config(path=None, overrides: list[str] | None = None, seed: int | None = None) -> PipelineConfig:
    """Read a JSON config (or start from defaults), apply overrides, resolve."""
    raw: dict = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as err:
            raise ValueError(f"{path}: invalid JSON ({err})") from None
        if not isinstance(raw, dict):
            raise ValueError(f"{path}: expected a JSON object")
    if seed is not None:
        raw["seed"] = seed
    raw = apply_overrides(raw, overrides or [])
    return PipelineConfig.from_dict(raw, explicit_seeds=False).resolve()
