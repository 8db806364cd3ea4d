"""Caption metrics (corpus BLEU-1..4, ROUGE-L, CIDEr-D, RecogAcc) and the
model evaluation driver."""
from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

from .corpus import Dataset, KnowEvalRecord, Vocabulary, detokenize, normalize_words
from .replay import KnowledgeKeyword, contains_words


@dataclass
class EvalPair:
    candidate: str
    references: Sequence[str]
    gold_keyword: KnowledgeKeyword | str | None = None

    def __post_init__(self):
        if len(self.references) < 1:
            raise ValueError("EvalPair needs at least one reference")


@dataclass
class MetricsReport:
    bleu1: float
    bleu2: float
    bleu3: float
    bleu4: float
    rouge_l: float
    cider: float
    recog_acc: float | None
    n_examples: int

    def to_dict(self) -> dict:
        return asdict(self)


def _ngrams(words: Sequence[str], n: int) -> Counter:
    return Counter(tuple(words[i:i + n]) for i in range(len(words) - n + 1))


def _require(pairs) -> list[EvalPair]:
    pairs = list(pairs)
    if not pairs:
        raise ValueError("no evaluation pairs")
    return pairs


def bleu(pairs: Sequence[EvalPair], max_n: int = 4) -> list[float]:
    """Corpus BLEU-1..max_n with clipped counts, no smoothing.

    The brevity penalty uses, per candidate, the reference length closest to
    the candidate length (shorter reference on ties).
    """
    pairs = _require(pairs)
    if not 1 <= max_n <= 4:
        raise ValueError("max_n must lie in [1, 4]")
    matched = [0] * max_n
    total = [0] * max_n
    cand_len = ref_len = 0
    for p in pairs:
        cand = normalize_words(p.candidate)
        refs = [normalize_words(r) for r in p.references]
        cand_len += len(cand)
        ref_len += min((abs(len(r) - len(cand)), len(r)) for r in refs)[1]
        for n in range(1, max_n + 1):
            counts = _ngrams(cand, n)
            ceiling: Counter = Counter()
            for r in refs:
                ceiling |= _ngrams(r, n)
            matched[n - 1] += sum(min(c, ceiling[g]) for g, c in counts.items())
            total[n - 1] += max(len(cand) - n + 1, 0)
    if cand_len == 0:
        return [0.0] * max_n
    bp = 1.0 if cand_len >= ref_len else math.exp(1.0 - ref_len / cand_len)
    scores = []
    log_sum = 0.0
    for n in range(max_n):
        if matched[n] == 0 or total[n] == 0:
            # every higher order has a zero factor as well
            scores.extend([0.0] * (max_n - n))
            break
        log_sum += math.log(matched[n] / total[n])
        scores.append(bp * math.exp(log_sum / (n + 1)))
    return scores


def modified_precision(pairs: Sequence[EvalPair], n: int) -> float:
    matched = total = 0
    for p in _require(pairs):
        cand = normalize_words(p.candidate)
        ceiling: Counter = Counter()
        for r in p.references:
            ceiling |= _ngrams(normalize_words(r), n)
        counts = _ngrams(cand, n)
        matched += sum(min(c, ceiling[g]) for g, c in counts.items())
        total += sum(counts.values())
    return matched / total if total else 0.0


def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, start=1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def rouge_l(pairs: Sequence[EvalPair], beta: float = 1.2) -> float:
    """Mean over pairs of the best LCS F-measure across references."""
    pairs = _require(pairs)
    b2 = beta * beta
    scores = []
    for p in pairs:
        cand = normalize_words(p.candidate)
        best = 0.0
        for ref in p.references:
            r = normalize_words(ref)
            lcs = lcs_length(cand, r)
            if lcs == 0:
                continue
            prec, rec = lcs / len(cand), lcs / len(r)
            best = max(best, (1 + b2) * prec * rec / (rec + b2 * prec))
        scores.append(best)
    return sum(scores) / len(scores)


class CiderD:
    """CIDEr-D scorer with document frequencies taken from the reference sets
    it is built on.

    n-grams of orders 1..n are weighted by tf-idf; per order, the candidate
    vector is clipped against each reference vector, the cosine-like
    similarity is damped by ``exp(-(len_c - len_r)^2 / (2 sigma^2))``, and
    scores are averaged over orders and references then multiplied by 10.
    """

    def __init__(self, reference_sets: Sequence[Sequence[str]], n: int = 4, sigma: float = 6.0):
        if len(reference_sets) < 2:
            raise ValueError("degenerate document frequency: CIDEr-D needs at least 2 reference sets")
        self.n = n
        self.sigma = sigma
        self.df: Counter = Counter()
        for refs in reference_sets:
            seen = set()
            for ref in refs:
                seen.update(self._counts(normalize_words(ref)))
            self.df.update(seen)
        self.log_num_docs = math.log(float(len(reference_sets)))

    def _counts(self, words) -> Counter:
        out: Counter = Counter()
        for k in range(1, self.n + 1):
            out.update(_ngrams(words, k))
        return out

    def _vector(self, words):
        vec = [dict() for _ in range(self.n)]
        norm = [0.0] * self.n
        for gram, tf in self._counts(words).items():
            k = len(gram) - 1
            w = tf * (self.log_num_docs - math.log(max(1.0, self.df[gram])))
            vec[k][gram] = w
            norm[k] += w * w
        return vec, [math.sqrt(x) for x in norm], len(words)

    def score(self, candidate: str, references: Sequence[str]) -> float:
        vc, nc, lc = self._vector(normalize_words(candidate))
        total = 0.0
        for ref in references:
            vr, nr, lr = self._vector(normalize_words(ref))
            penalty = math.exp(-((lc - lr) ** 2) / (2 * self.sigma ** 2))
            sims = 0.0
            for k in range(self.n):
                dot = sum(min(w, vr[k].get(g, 0.0)) * vr[k].get(g, 0.0) for g, w in vc[k].items())
                if nc[k] != 0 and nr[k] != 0:
                    dot /= nc[k] * nr[k]
                sims += dot * penalty
            total += sims / self.n
        return 10.0 * total / len(references)


def cider_d_scores(pairs: Sequence[EvalPair], sigma: float = 6.0) -> list[float]:
    pairs = _require(pairs)
    scorer = CiderD([p.references for p in pairs], sigma=sigma)
    return [scorer.score(p.candidate, p.references) for p in pairs]


def cider_d(pairs: Sequence[EvalPair], sigma: float = 6.0) -> float:
    scores = cider_d_scores(pairs, sigma)
    return sum(scores) / len(scores)


def _keyword_words(keyword) -> tuple[str, ...]:
    if isinstance(keyword, KnowledgeKeyword):
        return keyword.words
    return tuple(normalize_words(keyword))


def recog_acc(pairs: Sequence[EvalPair]) -> float:
    """Fraction of candidates that contain their gold keyword."""
    pairs = _require(pairs)
    hits = 0
    for i, p in enumerate(pairs):
        if p.gold_keyword is None:
            raise ValueError(f"pair {i} has no gold keyword")
        hits += contains_words(normalize_words(p.candidate), _keyword_words(p.gold_keyword))
    return hits / len(pairs)


def score_pairs(pairs: Sequence[EvalPair], with_recog: bool) -> MetricsReport:
    pairs = _require(pairs)
    b = bleu(pairs, 4)
    return MetricsReport(
        bleu1=b[0], bleu2=b[1], bleu3=b[2], bleu4=b[3],
        rouge_l=rouge_l(pairs),
        cider=cider_d(pairs),
        recog_acc=recog_acc(pairs) if with_recog else None,
        n_examples=len(pairs),
    )


def eval_pairs(dataset: Dataset, candidates: Sequence[str]) -> list[EvalPair]:
    if len(candidates) != len(dataset):
        raise ValueError("one candidate per record is required")
    pairs = []
    for rec, cand in zip(dataset.records, candidates):
        if isinstance(rec, KnowEvalRecord):
            pairs.append(EvalPair(cand, rec.references, rec.keyword))
        else:
            pairs.append(EvalPair(cand, [rec.text]))
    return pairs


def generate_captions(model, dataset: Dataset, world, vocab: Vocabulary, max_len: int = 20,
                      batch_size: int = 256) -> list[str]:
    from .model import greedy_decode_batch

    out = []
    records = dataset.records
    for i in range(0, len(records), batch_size):
        images = [world.record_features(r) for r in records[i:i + batch_size]]
        out.extend(detokenize(seq, vocab) for seq in greedy_decode_batch(model, images, max_len))
    return out


def evaluate_model(model, dataset: Dataset, vocab: Vocabulary, world, max_len: int = 20) -> MetricsReport:
    """Greedy-decode every image of ``dataset`` and score the captions."""
    if len(dataset) == 0:
        raise ValueError("empty evaluation set")
    model_hash = getattr(model, "vocab_hash", None)
    if model_hash is not None and model_hash != vocab.sha256():
        raise ValueError("model and vocabulary hashes differ")
    captions = generate_captions(model, dataset, world, vocab, max_len)
    return score_pairs(eval_pairs(dataset, captions), with_recog=dataset.kind == "knoweval")


def write_predictions(path, image_ids: Sequence[str], candidates: Sequence[str]) -> None:
    lines = [json.dumps({"image_id": i, "candidate": c}, ensure_ascii=False) for i, c in zip(image_ids, candidates)]
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def read_predictions(path) -> list[dict]:
    out = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        obj = json.loads(line)
        if not isinstance(obj.get("image_id"), str) or not isinstance(obj.get("candidate"), str):
            raise ValueError(f"{path}: line {lineno}: expected string fields 'image_id' and 'candidate'")
        out.append(obj)
    return out
