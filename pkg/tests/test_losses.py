import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from kreplay.corpus import UNK_ID
from kreplay.losses import (
    KDConfig, accumulate_keyword_prob, accumulate_token_prob, batch_objective, ce_loss, coverage_loss, kd_loss,
    knowledge_loss, repetition_penalty, total_loss,
)


def sigmoid(x):
    return 1.0 / (1.0 + math.exp(-x))


# ---- cross-entropy -----------------------------------------------------------

def test_ce_perfect_prediction():
    probs = torch.eye(4, dtype=torch.float64)[[1, 2, 3]]
    assert float(ce_loss(probs, [1, 2, 3])) == 0.0


def test_ce_uniform():
    probs = torch.full((5, 8), 1 / 8, dtype=torch.float64)
    assert float(ce_loss(probs, [0, 1, 2, 3, 4])) == pytest.approx(math.log(8), abs=1e-12)
    assert math.log(8) == pytest.approx(2.0794, abs=1e-4)


def test_ce_two_steps():
    probs = torch.tensor([[0.5, 0.5], [0.75, 0.25]], dtype=torch.float64)
    expected = (math.log(2) + math.log(4)) / 2
    assert float(ce_loss(probs, [0, 1])) == pytest.approx(expected, abs=1e-12)
    assert expected == pytest.approx(1.0397, abs=1e-4)


def test_ce_mask():
    probs = torch.tensor([[0.5, 0.5], [0.75, 0.25], [0.1, 0.9]], dtype=torch.float64)
    assert float(ce_loss(probs, [0, 1, 0], [True, True, False])) == pytest.approx(1.0397, abs=1e-4)
    with pytest.raises(ValueError):
        ce_loss(probs, [0, 1, 0], [False, False, False])


# ---- accumulated keyword probability ----------------------------------------

def test_accumulate_example():
    rows = torch.tensor([[0.2, 0.5, 0.3], [0.1, 0.6, 0.3]], dtype=torch.float64)
    assert accumulate_keyword_prob(rows, [1]).tolist() == pytest.approx([1.1], abs=1e-12)


def test_accumulate_single_row():
    row = torch.tensor([[0.2, 0.5, 0.3]], dtype=torch.float64)
    assert accumulate_keyword_prob(row, [2, 0]).tolist() == pytest.approx([0.3, 0.2])


def test_accumulate_rejects_unk():
    with pytest.raises(ValueError):
        accumulate_keyword_prob(torch.full((2, 5), 0.2), [4, UNK_ID])


@given(st.integers(1, 6), st.integers(2, 9), st.integers(0, 10_000))
def test_accumulate_conservation(T, V, seed):
    probs = torch.softmax(torch.randn(T, V, generator=torch.Generator().manual_seed(seed), dtype=torch.float64), -1)
    acc = accumulate_token_prob(probs, range(V))
    assert float(acc.sum()) == pytest.approx(T, abs=1e-6)
    assert bool(((acc >= 0) & (acc <= T)).all())


# ---- coverage / repetition / knowledge ----------------------------------------

def test_coverage_closed_forms():
    assert float(coverage_loss([0.0])) == pytest.approx(math.log(2), abs=1e-12)
    assert float(coverage_loss([1.0])) == pytest.approx(-math.log(sigmoid(1.0)), abs=1e-12)
    assert -math.log(sigmoid(1.0)) == pytest.approx(0.3133, abs=1e-4)
    assert float(coverage_loss([0.0, 0.0])) == pytest.approx(2 * math.log(2), abs=1e-12)


@given(st.lists(st.floats(0, 5), min_size=1, max_size=5), st.lists(st.floats(0, 5), min_size=1, max_size=5))
def test_coverage_and_repetition_additive(a, b):
    for fn in (coverage_loss, repetition_penalty):
        whole = float(fn(a + b))
        assert whole == pytest.approx(float(fn(a)) + float(fn(b)), rel=1e-9, abs=1e-12)


@given(st.lists(st.floats(0, 5), min_size=1, max_size=4), st.integers(0, 3), st.floats(1e-3, 2))
def test_coverage_strictly_decreasing(acc, i, bump):
    i = i % len(acc)
    up = list(acc)
    up[i] += bump
    assert float(coverage_loss(up)) < float(coverage_loss(acc))


def test_repetition_examples():
    assert float(repetition_penalty([1.0])) == 0.0
    assert float(repetition_penalty([0.5, 2.0])) == 1.25
    for delta in (0.1, 0.37, 1.0):
        assert float(repetition_penalty([1 + delta])) == pytest.approx(float(repetition_penalty([1 - delta])))


def test_knowledge_loss_at_one():
    assert float(knowledge_loss([1.0])) == pytest.approx(-math.log(sigmoid(1.0)), abs=1e-12)


def test_knowledge_loss_minimizer_by_grid_search():
    grid = np.linspace(0.0, 3.0, 30001)
    oracle = np.log1p(np.exp(-grid)) + (1.0 - grid) ** 2
    p_star = grid[np.argmin(oracle)]
    assert 1.0 < p_star < 1.2
    assert p_star == pytest.approx(1.11, abs=0.015)
    ours = knowledge_loss(torch.tensor(grid)[:, None]).numpy()
    assert grid[np.argmin(ours)] == p_star


def test_knowledge_terms_move_apart_past_one():
    p = torch.linspace(1.0, 3.0, 50, dtype=torch.float64)[:, None]
    cov, rep = coverage_loss(p).numpy(), repetition_penalty(p).numpy()
    assert np.all(np.diff(cov) < 0) and np.all(np.diff(rep) > 0)


# ---- distillation -------------------------------------------------------------

@pytest.mark.parametrize("T", [1.0, 16.0])
def test_kd_identity(T):
    z = torch.randn(5, 11, generator=torch.Generator().manual_seed(1), dtype=torch.float64)
    assert abs(float(kd_loss(z, z, T))) < 1e-9


@pytest.mark.parametrize("T", [1.0, 16.0])
def test_kd_two_class_closed_form(T):
    # teacher softens to [p, q], student to [q, p]: KL = (p - q) ln(p / q), and ln(p / q) = 1 / T
    p = sigmoid(1.0 / T)
    q = 1.0 - p
    expected = (p - q) * math.log(p / q)
    got = float(kd_loss(torch.tensor([[1.0, 0.0]], dtype=torch.float64), torch.tensor([[0.0, 1.0]], dtype=torch.float64), T))
    assert got == pytest.approx(expected, abs=1e-12)
    assert got == pytest.approx({1.0: 0.46212, 16.0: 0.0019525}[T], abs=1e-5)


def test_kd_direction_teacher_is_target():
    zt = torch.tensor([[2.0, 0.0, 0.0]], dtype=torch.float64)
    zs = torch.tensor([[0.0, 1.0, -1.0]], dtype=torch.float64)
    p, q = torch.softmax(zt, -1)[0], torch.softmax(zs, -1)[0]
    expected = float((p * (p / q).log()).sum())
    assert float(kd_loss(zt, zs, 1.0)) == pytest.approx(expected, abs=1e-12)


def test_kd_no_gradient_to_teacher():
    zt = torch.randn(3, 4, dtype=torch.float64, requires_grad=True)
    zs = torch.randn(3, 4, dtype=torch.float64, requires_grad=True)
    kd_loss(zt, zs, 2.0).backward()
    assert zt.grad is None and zs.grad is not None


@settings(max_examples=50)
@given(st.integers(0, 10_000), st.sampled_from([0.5, 1.0, 16.0]))
def test_kd_nonnegative(seed, T):
    g = torch.Generator().manual_seed(seed)
    zt, zs = torch.randn(4, 6, generator=g, dtype=torch.float64), torch.randn(4, 6, generator=g, dtype=torch.float64)
    assert float(kd_loss(zt, zs, T)) >= 0.0


def test_kd_shift_invariant_zero():
    z = torch.randn(3, 5, dtype=torch.float64)
    assert abs(float(kd_loss(z, z + 3.0, 16.0))) < 1e-9


def test_kd_errors():
    with pytest.raises(ValueError):
        kd_loss(torch.zeros(2, 3), torch.zeros(3, 3), 1.0)
    with pytest.raises(ValueError):
        KDConfig(temperature=0.0)


def test_kd_mask_averages_valid_steps():
    zt = torch.tensor([[1.0, 0.0], [5.0, -5.0]], dtype=torch.float64)
    zs = torch.tensor([[0.0, 1.0], [0.0, 0.0]], dtype=torch.float64)
    full = float(kd_loss(zt[:1], zs[:1], 1.0))
    assert float(kd_loss(zt, zs, 1.0, torch.tensor([True, False]))) == pytest.approx(full)


# ---- total ---------------------------------------------------------------------

def test_total_loss_weights():
    assert total_loss(1.0, 0.5, 0.2, 1.0, 1.0) == pytest.approx(1.7)
    assert total_loss(1.0, 0.5, 0.2, 0.0, 0.0) == 1.0
    with pytest.raises(ValueError):
        total_loss(1.0, 0.5, 0.2, -1.0, 1.0)


def _batch(n_cap, n_rep, T=4, V=7, seed=0):
    g = torch.Generator().manual_seed(seed)
    B = n_cap + n_rep
    logits = torch.randn(B, T, V, generator=g, dtype=torch.float64)
    teacher = torch.randn(B, T, V, generator=g, dtype=torch.float64)
    targets = torch.randint(0, V, (B, T), generator=g)
    mask = torch.ones(B, T, dtype=torch.bool)
    mask[0, -1] = False
    is_replay = torch.tensor([False] * n_cap + [True] * n_rep)
    keywords = [None] * n_cap + [[4, 5]] * n_rep
    return logits, targets, mask, is_replay, keywords, teacher


def test_batch_only_captions_gives_ce():
    logits, targets, mask, is_replay, kws, teacher = _batch(3, 0)
    total, parts = batch_objective(logits, targets, mask, is_replay, kws, teacher,
                                   lambda_know=1.0, lambda_kd=1.0, temperature=16.0)
    assert parts.total == parts.l_ce and parts.l_know == 0.0 and parts.l_kd == 0.0
    assert (parts.ce_count, parts.know_count, parts.kd_count) == (3, 0, 0)


def test_batch_breakdown_identities():
    logits, targets, mask, is_replay, kws, teacher = _batch(3, 2)
    total, parts = batch_objective(logits, targets, mask, is_replay, kws, teacher,
                                   lambda_know=0.7, lambda_kd=1.3, temperature=4.0)
    assert abs(parts.l_know - (parts.l_cov + parts.l_rep)) < 1e-9
    assert abs(parts.total - (parts.l_ce + 0.7 * parts.l_know + 1.3 * parts.l_kd)) < 1e-9
    assert float(total) == pytest.approx(parts.total, abs=1e-9)
    assert (parts.ce_count, parts.know_count, parts.kd_count) == (3, 2, 2)

    # per-row reference computation
    probs = torch.softmax(logits, -1)
    ce = np.mean([float(ce_loss(probs[i], targets[i], mask[i])) for i in range(3)])
    know = np.mean([float(knowledge_loss(accumulate_keyword_prob(probs[i], [4, 5], mask[i]))) for i in (3, 4)])
    kd = np.mean([float(kd_loss(teacher[i], logits[i], 4.0, mask[i])) for i in (3, 4)])
    assert parts.l_ce == pytest.approx(ce, abs=1e-12)
    assert parts.l_know == pytest.approx(know, abs=1e-12)
    assert parts.l_kd == pytest.approx(kd, abs=1e-12)


@pytest.mark.parametrize("use_know,use_kd", [(False, True), (True, False)])
def test_batch_ablation_switches(use_know, use_kd):
    logits, targets, mask, is_replay, kws, teacher = _batch(2, 2)
    _, parts = batch_objective(logits, targets, mask, is_replay, kws, teacher, lambda_know=1.0, lambda_kd=1.0,
                               temperature=16.0, use_know=use_know, use_kd=use_kd)
    if not use_know:
        assert parts.l_know == 0.0 and parts.l_kd > 0
    if not use_kd:
        assert parts.l_kd == 0.0 and parts.l_know > 0
    assert abs(parts.total - (parts.l_ce + parts.l_know + parts.l_kd)) < 1e-9
