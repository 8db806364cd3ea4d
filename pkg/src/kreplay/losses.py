"""Training objectives: caption cross-entropy, keyword coverage with the
degeneration penalty, temperature-softened distillation and their sum.

Every function is differentiable with respect to its probability/logit
inputs; teacher logits are always detached.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import torch
import torch.nn.functional as F

from .corpus import UNK_ID


@dataclass
class LossBreakdown:
    l_ce: float = 0.0
    l_cov: float = 0.0
    l_rep: float = 0.0
    l_know: float = 0.0
    l_kd: float = 0.0
    total: float = 0.0
    ce_count: int = 0
    know_count: int = 0
    kd_count: int = 0

    CSV_COLUMNS = ("l_ce", "l_cov", "l_rep", "l_know", "l_kd", "total")

    def as_row(self) -> dict:
        return {k: v for k, v in asdict(self).items()}


@dataclass(frozen=True)
class KDConfig:
    temperature: float = 16.0
    lambda_kd: float = 1.0

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError("KDConfig.temperature: must be > 0")
        if self.lambda_kd < 0:
            raise ValueError("KDConfig.lambda_kd: must be >= 0")


def _as_tensor(x, dtype=None) -> torch.Tensor:
    return x if isinstance(x, torch.Tensor) else torch.as_tensor(x, dtype=dtype)


def ce_loss(probs, reference, mask=None) -> torch.Tensor:
    """Mean negative log-probability of the gold tokens over unmasked steps."""
    probs = _as_tensor(probs, torch.float64)
    reference = _as_tensor(reference, torch.long)
    mask = torch.ones_like(reference, dtype=torch.bool) if mask is None else _as_tensor(mask).bool()
    if not bool(mask.any()):
        raise ValueError("ce_loss: every position is masked")
    gold = probs.gather(-1, reference.unsqueeze(-1)).squeeze(-1)
    return -(torch.log(gold) * mask).sum() / mask.sum()


def _keyword_ids(keyword) -> list[int]:
    ids = list(getattr(keyword, "tokens", keyword))
    if not ids:
        raise ValueError("keyword has no tokens")
    if UNK_ID in ids:
        raise ValueError("keyword contains unk_id")
    return ids


def accumulate_token_prob(probs, token_ids, mask=None) -> torch.Tensor:
    """Sum over (unmasked) steps of the probability of each id in ``token_ids``."""
    probs = _as_tensor(probs, torch.float64)
    cols = probs[..., torch.as_tensor(list(token_ids), dtype=torch.long)]
    if mask is not None:
        cols = cols * _as_tensor(mask).to(cols.dtype).unsqueeze(-1)
    return cols.sum(dim=-2)


def accumulate_keyword_prob(probs, keyword, mask=None) -> torch.Tensor:
    """Accumulated generation probability of each keyword token, shape (N,)."""
    return accumulate_token_prob(probs, _keyword_ids(keyword), mask)


def coverage_loss(accumulated) -> torch.Tensor:
    """-sum log sigmoid(p) over keyword tokens."""
    acc = _as_tensor(accumulated, torch.float64)
    return F.softplus(-acc).sum(dim=-1)


def repetition_penalty(accumulated) -> torch.Tensor:
    """sum (1 - p)^2 over keyword tokens; zero only when every p is 1."""
    acc = _as_tensor(accumulated, torch.float64)
    return ((1.0 - acc) ** 2).sum(dim=-1)


def knowledge_loss(accumulated) -> torch.Tensor:
    return coverage_loss(accumulated) + repetition_penalty(accumulated)


def kd_loss(teacher_logits, student_logits, temperature: float, mask=None) -> torch.Tensor:
    """Mean over steps of KL(softmax(z_t/T) || softmax(z_s/T)).

    No T^2 rescaling is applied. Steps where ``mask`` is False are skipped.
    """
    zt = _as_tensor(teacher_logits, torch.float64).detach()
    zs = _as_tensor(student_logits, torch.float64)
    if zt.shape != zs.shape:
        raise ValueError(f"kd_loss: shape mismatch {tuple(zt.shape)} vs {tuple(zs.shape)}")
    if not temperature > 0:
        raise ValueError("kd_loss: temperature must be > 0")
    log_pt = F.log_softmax(zt / temperature, dim=-1)
    log_ps = F.log_softmax(zs / temperature, dim=-1)
    per_step = (log_pt.exp() * (log_pt - log_ps)).sum(dim=-1)
    if mask is None:
        return per_step.mean(dim=-1)
    m = _as_tensor(mask).to(per_step.dtype)
    return (per_step * m).sum(dim=-1) / m.sum(dim=-1)


def total_loss(l_ce, l_know, l_kd, lambda_know: float, lambda_kd: float):
    if lambda_know < 0 or lambda_kd < 0:
        raise ValueError("loss weights must be non-negative")
    return l_ce + lambda_know * l_know + lambda_kd * l_kd


def batch_objective(
    logits: torch.Tensor,
    targets: torch.Tensor,
    mask: torch.Tensor,
    is_replay: torch.Tensor,
    keywords: Sequence[Sequence[int] | None],
    teacher_logits: torch.Tensor | None,
    *,
    lambda_know: float,
    lambda_kd: float,
    temperature: float,
    use_know: bool = True,
    use_kd: bool = True,
) -> tuple[torch.Tensor, LossBreakdown]:
    """Route one mixed batch through the objective.

    Caption rows (``is_replay`` False) contribute cross-entropy against
    ``targets``; replay rows contribute the knowledge loss for their keyword
    and distillation against ``teacher_logits`` (aligned with ``logits``).
    Each term is averaged over the rows that feed it and is exactly zero if
    none do. Returns the differentiable total and a float breakdown.
    """
    zero = logits.new_zeros(())
    cap_rows = (~is_replay).nonzero().flatten()
    rep_rows = is_replay.nonzero().flatten()
    fmask = mask.to(logits.dtype)

    l_ce = zero
    if len(cap_rows):
        logp = F.log_softmax(logits[cap_rows], dim=-1)
        nll = -logp.gather(-1, targets[cap_rows].unsqueeze(-1)).squeeze(-1)
        m = fmask[cap_rows]
        l_ce = ((nll * m).sum(-1) / m.sum(-1)).mean()

    l_cov = l_rep = l_kd = zero
    if len(rep_rows) and use_know:
        probs = torch.softmax(logits[rep_rows], dim=-1)
        covs, reps = [], []
        for j, row in enumerate(rep_rows.tolist()):
            acc = accumulate_keyword_prob(probs[j], keywords[row], fmask[row])
            covs.append(coverage_loss(acc))
            reps.append(repetition_penalty(acc))
        l_cov = torch.stack(covs).mean()
        l_rep = torch.stack(reps).mean()
    if len(rep_rows) and use_kd:
        if teacher_logits is None:
            raise ValueError("teacher logits are required for replay rows")
        l_kd = kd_loss(teacher_logits[rep_rows], logits[rep_rows], temperature, mask[rep_rows]).mean()
    l_know = l_cov + l_rep

    lam_know = lambda_know if use_know else 0.0
    lam_kd = lambda_kd if use_kd else 0.0
    total = total_loss(l_ce, l_know, l_kd, lam_know, lam_kd)
    n_rep = len(rep_rows)
    # logged values obey the sum identities in float64, independent of the training dtype
    f_ce, f_cov, f_rep, f_kd = (float(t.detach()) for t in (l_ce, l_cov, l_rep, l_kd))
    f_know = f_cov + f_rep
    parts = LossBreakdown(
        l_ce=f_ce, l_cov=f_cov, l_rep=f_rep, l_know=f_know, l_kd=f_kd,
        total=total_loss(f_ce, f_know, f_kd, lam_know, lam_kd),
        ce_count=len(cap_rows), know_count=n_rep, kd_count=n_rep,
    )
    return total, parts
