"""Word error rate, corpus BLEU and exact match on token sequences."""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Hashable, Sequence

from .errors import InvalidInputError

Tokens = Sequence[Hashable]


def edit_distance(hyp: Tokens, ref: Tokens) -> int:
    """Levenshtein distance with unit substitution, insertion and deletion costs."""
    n, m = len(hyp), len(ref)
    d = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(n + 1):
        d[i][0] = i
    for j in range(m + 1):
        d[0][j] = j
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            sub = 0 if hyp[i - 1] == ref[j - 1] else 1
            d[i][j] = min(d[i - 1][j] + 1, d[i][j - 1] + 1, d[i - 1][j - 1] + sub)
    return d[n][m]


def wer(hyp: Tokens, ref: Tokens) -> float:
    if not ref:
        return 0.0 if not hyp else math.inf
    return edit_distance(hyp, ref) / len(ref)


def corpus_wer(hyps: Sequence[Tokens], refs: Sequence[Tokens]) -> float:
    """Total edits over total reference tokens."""
    if len(hyps) != len(refs):
        raise InvalidInputError("hypothesis and reference corpora differ in size")
    edits = sum(edit_distance(h, r) for h, r in zip(hyps, refs))
    words = sum(len(r) for r in refs)
    if words == 0:
        return 0.0 if edits == 0 else math.inf
    return edits / words


def _ngrams(tokens: Tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu(
    hyps: Sequence[Tokens], refs: Sequence[Tokens], max_n: int = 4, smoothing: bool = True
) -> float:
    """Corpus BLEU in ``[0, 100]``.

    With ``smoothing`` the precisions for ``n > 1`` use add-one counts; the
    unigram precision is never smoothed, so a corpus with no unigram overlap
    scores 0.
    """
    if not hyps:
        raise InvalidInputError("BLEU needs a non-empty corpus")
    if len(hyps) != len(refs):
        raise InvalidInputError("hypothesis and reference corpora differ in size")
    matches = [0] * max_n
    totals = [0] * max_n
    hyp_len = ref_len = 0
    for h, r in zip(hyps, refs):
        hyp_len += len(h)
        ref_len += len(r)
        for n in range(1, max_n + 1):
            hc, rc = _ngrams(h, n), _ngrams(r, n)
            matches[n - 1] += sum(min(c, rc[g]) for g, c in hc.items())
            totals[n - 1] += max(len(h) - n + 1, 0)
    log_p = 0.0
    for n in range(max_n):
        m, t = matches[n], totals[n]
        if smoothing and n > 0:
            m, t = m + 1, t + 1
        if m == 0 or t == 0:
            return 0.0
        log_p += math.log(m / t) / max_n
    if hyp_len == 0:
        return 0.0
    bp = 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / hyp_len)
    return 100.0 * bp * math.exp(log_p)


def exact_match(hyps: Sequence[Tokens], refs: Sequence[Tokens]) -> float:
    if len(hyps) != len(refs):
        raise InvalidInputError("hypothesis and reference corpora differ in size")
    if not hyps:
        return 0.0
    return sum(list(h) == list(r) for h, r in zip(hyps, refs)) / len(hyps)


@dataclass
class EvalReport:
    wer: float
    bleu: float
    exact_match: float
    num_samples: int
    records: list[dict] = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def summary_line(self) -> str:
        return (
            f"n={self.num_samples}\twer={self.wer:.4f}\tbleu={self.bleu:.2f}"
            f"\texact_match={self.exact_match:.4f}"
        )


def evaluate(
    ids: Sequence[str],
    hyps: Sequence[Tokens],
    refs: Sequence[Tokens],
    config: dict | None = None,
) -> EvalReport:
    records = [
        {"id": i, "hyp": list(h), "ref": list(r), "errors": edit_distance(h, r)}
        for i, h, r in zip(ids, hyps, refs)
    ]
    return EvalReport(
        wer=corpus_wer(hyps, refs),
        bleu=bleu(hyps, refs) if hyps else 0.0,
        exact_match=exact_match(hyps, refs),
        num_samples=len(hyps),
        records=records,
        config=dict(config or {}),
    )


def write_report(report: EvalReport, path: str | Path) -> Path:
    path = Path(path)
    path.write_text(report.to_json() + "\n", encoding="utf-8")
    return path
