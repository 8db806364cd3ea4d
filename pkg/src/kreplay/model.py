"""Small image-conditioned causal transformer used as the caption generator."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from safetensors.torch import load_file, save_file
from torch import nn

from .corpus import BOS_ID, EOS_ID, PAD_ID, ImageFeatures

STAGES = ("init", "pretrained", "vanilla_ft", "kreplay")
EMBED_INIT_BOUND = 0.04


@dataclass
class ModelConfig:
    vocab_size: int
    feature_dim: int = 32
    d_model: int = 64
    num_layers: int = 2
    num_heads: int = 4
    max_len: int = 24
    dropout: float = 0.1
    seed: int = 0

    def validate(self) -> "ModelConfig":
        def bad(name, why):
            raise ValueError(f"ModelConfig.{name}: {why}")

        if self.vocab_size < 5:
            bad("vocab_size", "must be >= 5")
        if self.d_model < 1 or self.num_heads < 1 or self.d_model % self.num_heads:
            bad("d_model", "must be a positive multiple of num_heads")
        if self.num_layers < 1:
            bad("num_layers", "must be >= 1")
        if self.max_len < 4:
            bad("max_len", "must be >= 4")
        if not 0.0 <= self.dropout < 1.0:
            bad("dropout", "must lie in [0, 1)")
        if self.feature_dim < 1:
            bad("feature_dim", "must be >= 1")
        return self

    @classmethod
    def from_dict(cls, obj: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in obj.items() if k in known})


class CaptionModel(nn.Module):
    """Token + position embeddings, pre-norm decoder layers with cross-attention
    over projected image regions, final norm and a vocabulary head."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config.validate()
        d = config.d_model
        self.token_emb = nn.Embedding(config.vocab_size, d)
        self.pos_emb = nn.Embedding(config.max_len, d)
        self.img_proj = nn.Linear(config.feature_dim, d)
        layer = nn.TransformerDecoderLayer(
            d, config.num_heads, dim_feedforward=4 * d, dropout=config.dropout,
            batch_first=True, norm_first=True,
        )
        self.decoder = nn.TransformerDecoder(layer, config.num_layers)
        self.norm = nn.LayerNorm(d)
        self.head = nn.Linear(d, config.vocab_size)

    def forward(self, regions: torch.Tensor, region_mask: torch.Tensor, tokens: torch.Tensor) -> torch.Tensor:
        """regions (B, R, f), region_mask (B, R) True on padding, tokens (B, T) -> logits (B, T, V)."""
        T = tokens.shape[1]
        if T > self.config.max_len:
            raise ValueError(f"input length {T} exceeds max_len {self.config.max_len}")
        pos = torch.arange(T, device=tokens.device)
        x = self.token_emb(tokens) + self.pos_emb(pos)[None]
        memory = self.img_proj(regions)
        causal = torch.triu(torch.full((T, T), float("-inf"), dtype=x.dtype, device=x.device), diagonal=1)
        h = self.decoder(x, memory, tgt_mask=causal, memory_key_padding_mask=region_mask)
        return self.head(self.norm(h))


def _reset_parameters(model: CaptionModel) -> None:
    norms = {id(m.weight) for m in model.modules() if isinstance(m, nn.LayerNorm)}
    for name, p in model.named_parameters():
        if name.endswith("emb.weight"):
            nn.init.trunc_normal_(p, std=0.02, a=-EMBED_INIT_BOUND, b=EMBED_INIT_BOUND)
        elif id(p) in norms:
            nn.init.ones_(p)
        elif p.dim() >= 2:
            nn.init.xavier_uniform_(p)
        else:
            nn.init.zeros_(p)


def init_bound(name: str, p: torch.Tensor) -> float:
    """Largest absolute value the initializer may produce for a parameter."""
    if name.endswith("emb.weight"):
        return EMBED_INIT_BOUND
    if p.dim() >= 2:
        fan_out, fan_in = p.shape[0], int(np.prod(p.shape[1:]))
        return float(np.sqrt(6.0 / (fan_in + fan_out)))
    return 1.0


def init_model(cfg: ModelConfig) -> CaptionModel:
    cfg.validate()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        model = CaptionModel(cfg)
        _reset_parameters(model)
    model.eval()
    return model


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def parameter_checksum(model: nn.Module) -> str:
    h = hashlib.sha256()
    for name, p in sorted(model.state_dict().items()):
        h.update(name.encode())
        h.update(p.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def _dtype(model: nn.Module) -> torch.dtype:
    return next(model.parameters()).dtype


def collate_images(images: Sequence[ImageFeatures], dtype=torch.float32) -> tuple[torch.Tensor, torch.Tensor]:
    """Pad region matrices to a common count; mask is True on padded regions."""
    r_max = max(im.regions.shape[0] for im in images)
    f = images[0].regions.shape[1]
    regions = np.zeros((len(images), r_max, f))
    mask = np.ones((len(images), r_max), dtype=bool)
    for i, im in enumerate(images):
        r = im.regions.shape[0]
        regions[i, :r] = im.regions
        mask[i, :r] = False
    return torch.as_tensor(regions, dtype=dtype), torch.as_tensor(mask)


def pad_sequences(seqs: Sequence[Sequence[int]], pad: int = PAD_ID) -> torch.Tensor:
    T = max(len(s) for s in seqs)
    out = torch.full((len(seqs), T), pad, dtype=torch.long)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = torch.as_tensor(list(s), dtype=torch.long)
    return out


def forward(model: CaptionModel, image: ImageFeatures, input_tokens: Sequence[int]) -> torch.Tensor:
    """Teacher-forced logits (T, V) for one image; row t scores position t+1."""
    tokens = list(input_tokens)
    if not tokens or tokens[0] != BOS_ID:
        raise ValueError("input_tokens must begin with bos_id")
    if len(tokens) > model.config.max_len:
        raise ValueError(f"input length {len(tokens)} exceeds max_len {model.config.max_len}")
    regions, mask = collate_images([image], _dtype(model))
    with torch.no_grad():
        return model(regions, mask, torch.tensor([tokens]))[0]


def step_probs(logits: torch.Tensor) -> torch.Tensor:
    """Row-wise softmax at temperature 1."""
    return torch.softmax(torch.as_tensor(logits), dim=-1)


@torch.no_grad()
def greedy_decode_batch(model: CaptionModel, images: Sequence[ImageFeatures], max_len: int) -> list[tuple[int, ...]]:
    """Greedy captions without bos; each includes eos if it was emitted.

    Ties go to the lowest id (``torch.argmax`` returns the first maximum).
    The full prefix is re-scored at every step, so each emitted token is the
    argmax of ``forward`` on exactly that prefix.
    """
    was_training = model.training
    model.eval()
    max_len = min(max_len, model.config.max_len)
    regions, mask = collate_images(images, _dtype(model))
    B = len(images)
    tokens = torch.full((B, 1), BOS_ID, dtype=torch.long)
    done = torch.zeros(B, dtype=torch.bool)
    for _ in range(max_len):
        nxt = model(regions, mask, tokens)[:, -1].argmax(dim=-1)
        nxt = torch.where(done, torch.full_like(nxt, PAD_ID), nxt)
        tokens = torch.cat([tokens, nxt[:, None]], dim=1)
        done |= nxt == EOS_ID
        if bool(done.all()):
            break
    model.train(was_training)
    out = []
    for row in tokens[:, 1:].tolist():
        seq = []
        for t in row:
            if t == PAD_ID:
                break
            seq.append(t)
            if t == EOS_ID:
                break
        out.append(tuple(seq))
    return out


def greedy_decode(model: CaptionModel, image: ImageFeatures, max_len: int) -> tuple[int, ...]:
    return greedy_decode_batch(model, [image], max_len)[0]


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(path, model: CaptionModel, *, vocab_hash: str, stage: str, step: int = 0, seed: int = 0) -> Path:
    if stage not in STAGES:
        raise ValueError(f"unknown stage tag {stage!r}")
    header = {
        "model_config": asdict(model.config),
        "vocab_hash": vocab_hash,
        "stage": stage,
        "step": int(step),
        "seed": int(seed),
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tensors = {k: v.detach().cpu().contiguous() for k, v in model.state_dict().items()}
    save_file(tensors, str(path), metadata={"header": json.dumps(header, sort_keys=True)})
    return path


def read_header(path) -> dict:
    from safetensors import safe_open

    with safe_open(str(path), framework="pt") as fh:
        return json.loads(fh.metadata()["header"])


def load_checkpoint(path, vocab_hash: str | None = None) -> tuple[CaptionModel, dict]:
    header = read_header(path)
    if vocab_hash is not None and header["vocab_hash"] != vocab_hash:
        raise ValueError(f"{path}: vocabulary hash mismatch (checkpoint {header['vocab_hash'][:12]}, "
                         f"expected {vocab_hash[:12]})")
    model = CaptionModel(ModelConfig.from_dict(header["model_config"]))
    model.load_state_dict(load_file(str(path)))
    model.eval()
    model.vocab_hash = header["vocab_hash"]
    model.stage = header["stage"]
    return model, header
