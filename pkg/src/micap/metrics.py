"""Caption metrics: corpus BLEU@4, ROUGE-L, METEOR-lite and CIDEr-D.

All metrics operate on token lists produced by :func:`tokenize_text`
(lowercase, punctuation to spaces, whitespace split).  METEOR-lite has
exact and Porter-stem matching stages only; there is no synonym stage.
"""

from __future__ import annotations

import json
import math
import re
import warnings
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from nltk.stem.porter import PorterStemmer

from .errors import ConfigError, DataError

METRIC_VERSIONS = {
    "bleu": "corpus BLEU-4, closest reference length, no smoothing",
    "rouge": "ROUGE-L F, beta=1.2, max over references",
    "meteor": "meteor_lite: exact+porter stages, no synonyms, alpha=0.9 beta=3 gamma=0.5",
    "cider": "CIDEr-D, sigma=6, clipped tf-idf, x10",
}

_PUNCT = re.compile(r"[^\w\s]|_")

Tokens = Sequence[str]


def tokenize_text(text: str) -> list[str]:
    return _PUNCT.sub(" ", text.lower()).split()


def _ngrams(tokens: Tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


# -------------------------------------------------------------- BLEU


def bleu4(hypotheses: Sequence[Tokens], references: Sequence[Sequence[Tokens]]) -> float:
    """Corpus BLEU-4: clipped n-gram counts pooled over every sample."""
    if not hypotheses:
        raise ConfigError("BLEU of an empty corpus")
    if len(hypotheses) != len(references):
        raise ConfigError("hypothesis/reference count mismatch")
    matched = [0] * 4
    total = [0] * 4
    hyp_len = ref_len = 0
    for hyp, refs in zip(hypotheses, references):
        hyp_len += len(hyp)
        # closest reference length, shorter one on ties
        ref_len += min((abs(len(r) - len(hyp)), len(r)) for r in refs)[1]
        for n in range(1, 5):
            m, t = modified_precision(hyp, refs, n)
            matched[n - 1] += m
            total[n - 1] += t
    if hyp_len == 0 or any(m == 0 for m in matched):
        return 0.0
    log_p = sum(math.log(m / t) for m, t in zip(matched, total)) / 4
    bp = 1.0 if hyp_len > ref_len else math.exp(1 - ref_len / hyp_len)
    return bp * math.exp(log_p)


def modified_precision(hyp: Tokens, refs: Sequence[Tokens], n: int) -> tuple[int, int]:
    """(clipped n-gram matches, hypothesis n-gram count) for one sample."""
    counts = _ngrams(hyp, n)
    max_ref = Counter()
    for r in refs:
        max_ref |= _ngrams(r, n)
    return sum(min(c, max_ref[g]) for g, c in counts.items()), max(len(hyp) - n + 1, 0)


# -------------------------------------------------------------- ROUGE-L


def lcs_length(a: Tokens, b: Tokens) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(hypothesis: Tokens, references: Sequence[Tokens], beta: float = 1.2) -> float:
    best = 0.0
    if not hypothesis:
        return 0.0
    for ref in references:
        lcs = lcs_length(hypothesis, ref)
        if lcs == 0 or not ref:
            continue
        p, r = lcs / len(hypothesis), lcs / len(ref)
        best = max(best, (1 + beta ** 2) * p * r / (r + beta ** 2 * p))
    return best


# -------------------------------------------------------------- METEOR-lite

_stemmer = PorterStemmer()


def _stem(word: str) -> str:
    return _stemmer.stem(word)


def _align(hyp: Tokens, ref: Tokens) -> list[tuple[int, int]]:
    """Exact stage then stem stage; within a stage each hypothesis word takes
    the unmatched reference position that extends the previous match if
    possible, else the leftmost one."""
    h_free = set(range(len(hyp)))
    r_free = set(range(len(ref)))
    pairs: dict[int, int] = {}
    for key in (lambda w: w, _stem):
        rk = [key(w) for w in ref]
        for i in range(len(hyp)):
            if i not in h_free:
                continue
            hk = key(hyp[i])
            options = [j for j in sorted(r_free) if rk[j] == hk]
            if not options:
                continue
            prev = pairs.get(i - 1)
            j = prev + 1 if prev is not None and prev + 1 in options else options[0]
            pairs[i] = j
            h_free.discard(i)
            r_free.discard(j)
    return sorted(pairs.items())


def _chunks(pairs: list[tuple[int, int]]) -> int:
    chunks = 0
    last = None
    for i, j in pairs:
        if last is None or i != last[0] + 1 or j != last[1] + 1:
            chunks += 1
        last = (i, j)
    return chunks


def meteor_single(hyp: Tokens, ref: Tokens) -> float:
    pairs = _align(hyp, ref)
    m = len(pairs)
    if m == 0:
        return 0.0
    p, r = m / len(hyp), m / len(ref)
    f_mean = 10 * p * r / (r + 9 * p)
    penalty = 0.5 * (_chunks(pairs) / m) ** 3
    return f_mean * (1 - penalty)


def meteor_lite(hypothesis: Tokens, references: Sequence[Tokens]) -> float:
    return max((meteor_single(hypothesis, r) for r in references), default=0.0)


# -------------------------------------------------------------- CIDEr-D


def _tfidf(counts: Counter, df: Counter, log_n: float):
    vec = {g: tf * (log_n - math.log(max(1.0, df[g]))) for g, tf in counts.items()}
    norm = math.sqrt(sum(v * v for v in vec.values()))
    return vec, norm


def cider_d_scores(hypotheses: Sequence[Tokens], references: Sequence[Sequence[Tokens]],
                   sigma: float = 6.0) -> list[float]:
    """Per-sample CIDEr-D; document frequencies come from the reference corpus."""
    if len(hypotheses) != len(references):
        raise ConfigError("hypothesis/reference count mismatch")
    n_docs = len(references)
    if n_docs < 2:
        warnings.warn("CIDEr-D on fewer than 2 samples: every idf weight is zero")
    df = Counter()
    for refs in references:
        seen = set()
        for r in refs:
            for n in range(1, 5):
                seen.update(_ngrams(r, n))
        df.update(seen)
    log_n = math.log(float(max(n_docs, 1)))
    scores = []
    for hyp, refs in zip(hypotheses, references):
        per_ref = []
        hv = [_tfidf(_ngrams(hyp, n), df, log_n) for n in range(1, 5)]
        for r in refs:
            rv = [_tfidf(_ngrams(r, n), df, log_n) for n in range(1, 5)]
            delta = len(hyp) - len(r)
            penalty = math.exp(-(delta ** 2) / (2 * sigma ** 2))
            total = 0.0
            for (vh, nh), (vr, nr) in zip(hv, rv):
                if nh == 0 or nr == 0:
                    continue
                dot = sum(min(val, vr[g]) * vr[g] for g, val in vh.items() if g in vr)
                total += dot / (nh * nr) * penalty
            per_ref.append(total / 4)
        scores.append(10.0 * sum(per_ref) / len(per_ref))
    return scores


def cider_d(hypotheses, references, sigma: float = 6.0) -> float:
    scores = cider_d_scores(hypotheses, references, sigma)
    return sum(scores) / len(scores)


# -------------------------------------------------------------- report


@dataclass
class EvalReport:
    bleu4: float
    rouge_l: float
    meteor: float
    cider: float
    per_sample: dict[str, list[float]] = field(default_factory=dict)
    ids: list[str] = field(default_factory=list)
    metadata: dict = field(default_factory=lambda: dict(METRIC_VERSIONS))

    @property
    def scaled(self) -> dict[str, float]:
        """Scores on a shared 0-100 scale (CIDEr's 0-10 range times 10)."""
        return {
            "BLEU@4": 100 * self.bleu4,
            "ROUGE-L": 100 * self.rouge_l,
            "METEOR": 100 * self.meteor,
            "CIDEr": 10 * self.cider,
        }

    @property
    def avg(self) -> float:
        s = self.scaled
        return sum(s.values()) / len(s)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["scaled"] = self.scaled
        out["AVG"] = self.avg
        return out


def evaluate_corpus(hypotheses: Sequence[str | Tokens], references: Sequence[Sequence[str | Tokens]],
                    ids: Sequence[str] | None = None) -> EvalReport:
    if len(hypotheses) != len(references):
        raise ConfigError(f"{len(hypotheses)} hypotheses but {len(references)} reference sets")
    if not hypotheses:
        raise ConfigError("empty corpus")
    hyps = [tokenize_text(h) if isinstance(h, str) else list(h) for h in hypotheses]
    refs = [[tokenize_text(r) if isinstance(r, str) else list(r) for r in rs] for rs in references]
    rouge = [rouge_l(h, r) for h, r in zip(hyps, refs)]
    meteor = [meteor_lite(h, r) for h, r in zip(hyps, refs)]
    cider = cider_d_scores(hyps, refs)
    return EvalReport(
        bleu4=bleu4(hyps, refs),
        rouge_l=sum(rouge) / len(rouge),
        meteor=sum(meteor) / len(meteor),
        cider=sum(cider) / len(cider),
        per_sample={"ROUGE-L": rouge, "METEOR": meteor, "CIDEr": cider},
        ids=list(ids) if ids is not None else [str(i) for i in range(len(hyps))],
    )


# -------------------------------------------------------------- results file I/O


def write_results(path: str | Path, rows: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps({"video_id": row["video_id"], "hypothesis": row["hypothesis"],
                                 "references": list(row["references"])}) + "\n")


def read_results(path: str | Path) -> list[dict]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                rows.append({"video_id": str(row["video_id"]), "hypothesis": row["hypothesis"],
                             "references": list(row["references"])})
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise DataError(f"{path}:{lineno}: bad results row ({exc})") from exc
    return rows


def evaluate_results_file(path: str | Path) -> EvalReport:
    rows = read_results(path)
    return evaluate_corpus([r["hypothesis"] for r in rows], [r["references"] for r in rows],
                           [r["video_id"] for r in rows])


def write_report(report: EvalReport, path: str | Path) -> None:
    Path(path).write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n",
                          encoding="utf-8")
