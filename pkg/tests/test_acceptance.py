"""Acceptance checks, one PASS/FAIL line per criterion.

Criteria 5-7 run the full default pipeline (twice, seed 7) and the ablation
suite on top of it, so this module takes most of an hour on one CPU core.
Lines are collected in ``VERDICTS`` and echoed in the terminal summary.
"""
import csv
import json
import math
import time

import pytest
import torch

from kreplay.cli import main
from kreplay.evalkit import EvalPair, bleu, cider_d, cider_d_scores, recog_acc, rouge_l
from kreplay.losses import accumulate_token_prob, coverage_loss, kd_loss, repetition_penalty
from kreplay.model import load_checkpoint, parameter_checksum

from test_evalkit import HAND_CORPUS, brute_force_recog, hand_cider_scores, random_recog_corpora
from test_gradients import tiny_problem, worst_relative_error

VERDICTS: list[str] = []

PIPELINE_BUDGET_S = 20 * 60
ABLATION_BUDGET_S = 45 * 60


def verdict(criterion: str, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'}  {criterion}: {detail}"
    VERDICTS.append(line)
    print(line)
    assert ok, line


# ---- 1. loss oracles ------------------------------------------------------------

def test_criterion_1_kd_identity():
    g = torch.Generator().manual_seed(0)
    worst = 0.0
    for T in (1.0, 16.0):
        z = torch.randn(6, 13, generator=g, dtype=torch.float64) * 3
        worst = max(worst, abs(float(kd_loss(z, z, T))))
    verdict("1 kd identity", worst < 1e-9, f"max |kd(z, z, T)| = {worst:.2e} over T in {{1, 16}} (tol 1e-9)")


def test_criterion_1_kd_closed_form():
    zt = torch.tensor([[1.0, 0.0]], dtype=torch.float64)
    zs = torch.tensor([[0.0, 1.0]], dtype=torch.float64)
    got = {T: float(kd_loss(zt, zs, T)) for T in (1.0, 16.0)}
    target = {1.0: 0.4621, 16.0: 0.0039}
    ok = all(abs(got[T] - target[T]) <= 1e-4 for T in target)
    verdict("1 kd two-class closed form", ok,
            f"T=1: {got[1.0]:.6f} (target 0.4621), T=16: {got[16.0]:.6f} (target 0.0039), tol 1e-4")


def test_criterion_1_coverage_and_penalty():
    c0 = float(coverage_loss(torch.tensor([0.0], dtype=torch.float64)))
    c1 = float(coverage_loss(torch.tensor([1.0], dtype=torch.float64)))
    rep = float(repetition_penalty(torch.tensor([0.5, 2.0], dtype=torch.float64)))
    ok = abs(c0 - math.log(2)) <= 1e-4 and abs(c1 - 0.3133) <= 1e-4 and rep == 1.25
    verdict("1 coverage/penalty closed forms", ok,
            f"coverage(0) = {c0:.6f} (ln 2), coverage(1) = {c1:.6f} (0.3133), penalty([0.5, 2]) = {rep!r} (1.25)")


def test_criterion_1_conservation():
    g = torch.Generator().manual_seed(3)
    probs = torch.softmax(torch.randn(7, 19, generator=g, dtype=torch.float64), -1)
    acc = accumulate_token_prob(probs, list(range(19)))
    err = abs(float(acc.sum()) - 7)
    verdict("1 accumulated-probability conservation", err <= 1e-6, f"|sum - T_steps| = {err:.2e} (tol 1e-6)")


# ---- 2. gradients ---------------------------------------------------------------

def test_criterion_2_gradients():
    start = time.perf_counter()
    model, data = tiny_problem()
    worst = {w: worst_relative_error(model, data, w, n_coords=120) for w in ("ce", "know", "kd", "total")}
    elapsed = time.perf_counter() - start
    ok = max(worst.values()) < 1e-4 and elapsed < 300
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    verdict("2 gradient check", ok, f"worst relative error on 120 coords each: {detail} (tol 1e-4), {elapsed:.0f}s")


# ---- 3. metric oracles ----------------------------------------------------------

def test_criterion_3_metrics():
    P = EvalPair
    checks = {
        "bleu brevity": (bleu([P("the cat sat", ["the cat sat down"])], 1)[0], math.exp(1 - 4 / 3)),
        "bleu clipping": (bleu([P("the the the", ["the cat"])], 1)[0], 1 / 3),
        "rouge-l": (rouge_l([P("a b c d", ["a c d e"])]), 0.75),
    }
    expected = hand_cider_scores()
    for i, (got, want) in enumerate(zip(cider_d_scores(HAND_CORPUS), expected)):
        checks[f"cider pair {i + 1}"] = (got, want)
    checks["cider corpus"] = (cider_d(HAND_CORPUS), sum(expected) / 3)
    worst = max(abs(a - b) for a, b in checks.values())
    corpora = list(random_recog_corpora(50))
    recog_ok = all(recog_acc(c) == brute_force_recog(c) for c in corpora)
    verdict("3 metric oracles", worst <= 1e-6 and recog_ok,
            f"max |metric - oracle| = {worst:.1e} over {len(checks)} values (tol 1e-6); "
            f"recog_acc exact on {len(corpora)} random corpora: {recog_ok}")


# ---- 5-7. full pipeline ---------------------------------------------------------

@pytest.fixture(scope="session")
def pipeline_runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("acceptance")
    runs, times = [], []
    for k in (1, 2):
        run = root / f"pipeline-{k}"
        start = time.perf_counter()
        assert main(["pipeline", "--seed", "7", "--run-dir", str(run)]) == 0
        times.append(time.perf_counter() - start)
        runs.append(run)
    return runs, times


@pytest.fixture(scope="session")
def report(pipeline_runs):
    return json.loads((pipeline_runs[0][0] / "report.json").read_text())


@pytest.fixture(scope="session")
def ablation(pipeline_runs):
    out = pipeline_runs[0][0].parent / "ablate"
    start = time.perf_counter()
    assert main(["ablate", "--run", str(pipeline_runs[0][0]), "--run-dir", str(out)]) == 0
    elapsed = time.perf_counter() - start
    with (out / "ablation.csv").open(newline="") as fh:
        rows = {r["run"]: r for r in csv.DictReader(fh)}
    vanilla = json.loads((out / "vanilla.json").read_text())
    return rows, vanilla, out, elapsed


def _m(report, stage, split, key):
    return report["stages"][stage][split][key]


def test_criterion_4_routing(pipeline_runs, report):
    run = pipeline_runs[0][0]
    cfg = json.loads((run / "config.json").read_text())["train"]
    with (run / "logs" / "losses.csv").open(newline="") as fh:
        rows = [r for r in csv.DictReader(fh) if r["stage"] == "kreplay"]
    bad = [r["step"] for r in rows
           if int(r["ce_count"]) + int(r["know_count"]) != cfg["batch_size"]
           or not int(r["know_count"]) == int(r["kd_count"]) == cfg["replay_per_batch"]]
    teacher, _ = load_checkpoint(run / "checkpoints" / "vanilla_ft.safetensors")
    same = parameter_checksum(teacher) == report["stages"]["kreplay"]["training"]["teacher_checksum"]
    verdict("4 routing and frozen teacher", bool(rows) and not bad and same,
            f"{len(rows)} logged batches, {len(bad)} with wrong counts "
            f"(batch {cfg['batch_size']}, replay {cfg['replay_per_batch']}); teacher checksum unchanged: {same}")


def test_criterion_5a_pretrained_knowledge(report):
    acc = _m(report, "pretrained", "knoweval_seen", "recog_acc")
    verdict("5a pretrained seen RecogAcc", acc >= 0.60, f"{acc:.3f} (need >= 0.60)")


def test_criterion_5b_forgetting(report):
    pre = _m(report, "pretrained", "knoweval_seen", "recog_acc")
    van = _m(report, "vanilla_ft", "knoweval_seen", "recog_acc")
    drop = (pre - van) / pre if pre > 0 else 0.0
    c_pre = _m(report, "pretrained", "generic_val", "cider")
    c_van = _m(report, "vanilla_ft", "generic_val", "cider")
    verdict("5b vanilla forgets, captions improve", drop >= 0.30 and c_van > c_pre,
            f"seen RecogAcc {pre:.3f} -> {van:.3f} (relative drop {drop:.1%}, need >= 30%); "
            f"generic CIDEr {c_pre:.3f} -> {c_van:.3f} (must rise)")


def test_criterion_5c_recovery(report):
    van = _m(report, "vanilla_ft", "knoweval_seen", "recog_acc")
    kr = _m(report, "kreplay", "knoweval_seen", "recog_acc")
    c_van = _m(report, "vanilla_ft", "generic_val", "cider")
    c_kr = _m(report, "kreplay", "generic_val", "cider")
    rel = abs(c_kr - c_van) / c_van
    verdict("5c K-Replay recovers knowledge, keeps captions", kr >= van + 0.15 and rel <= 0.05,
            f"seen RecogAcc {kr:.3f} vs vanilla {van:.3f} (need >= +0.15); "
            f"generic CIDEr {c_kr:.3f} vs {c_van:.3f} (gap {rel:.1%}, need <= 5%)")


def test_criterion_5d_unseen(report):
    van = _m(report, "vanilla_ft", "knoweval_unseen", "recog_acc")
    kr = _m(report, "kreplay", "knoweval_unseen", "recog_acc")
    verdict("5d unseen categories", kr > van, f"unseen RecogAcc {kr:.3f} vs vanilla {van:.3f} (need >)")


def test_criterion_5_runtime(pipeline_runs):
    t = pipeline_runs[1][0]
    verdict("5 runtime", t < PIPELINE_BUDGET_S, f"pipeline took {t / 60:.1f} min (budget 20)")


def test_criterion_6_no_pred(ablation):
    rows, vanilla, _, _ = ablation
    got = float(rows["no_pred"]["seen_recog_acc"])
    van = vanilla["knoweval_seen"]["recog_acc"]
    verdict("6 no_pred", abs(got - van) <= 0.05, f"seen RecogAcc {got:.3f} vs vanilla {van:.3f} (need within 0.05)")


def test_criterion_6_no_kd(ablation):
    rows, _, out, _ = ablation
    with (out / "logs" / "losses.csv").open(newline="") as fh:
        kd = [float(r["l_kd"]) for r in csv.DictReader(fh) if r["stage"] == "no_kd"]
    ok = bool(kd) and all(v == 0.0 for v in kd)
    verdict("6 no_kd", ok, f"{len(kd)} logged batches, max l_kd {max(kd, default=float('nan'))}")


def test_criterion_6_replay_sweep(ablation):
    rows, vanilla, _, _ = ablation
    accs = [float(rows[f"cap_{c}"]["seen_recog_acc"]) for c in (25, 10, 5, 1)]
    van = vanilla["knoweval_seen"]["recog_acc"]
    monotone = all(a >= b for a, b in zip(accs, accs[1:]))
    verdict("6 replay-size sweep", monotone and accs[-1] > van,
            f"seen RecogAcc at 25/10/5/1 per category: {', '.join(f'{a:.3f}' for a in accs)} "
            f"(non-increasing: {monotone}); 1/category {accs[-1]:.3f} vs vanilla {van:.3f}")


def test_criterion_6_runtime(ablation):
    t = ablation[3]
    verdict("6 runtime", t < ABLATION_BUDGET_S, f"ablation suite took {t / 60:.1f} min (budget 45)")


def test_criterion_7_determinism(pipeline_runs):
    a, b = (run / "report.json" for run in pipeline_runs[0])
    same = a.read_bytes() == b.read_bytes()
    verdict("7 determinism", same, f"report.json byte-identical across two seed-7 runs: {same}")
