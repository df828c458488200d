"""Evaluation suite: ROUGE-1/2/L, corpus BLEU, and truncation protocols."""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence


class RougeVariant(str, Enum):
    RECALL = "recall"
    F1 = "f1"


class Aggregation(str, Enum):
    MAX = "max"
    AVERAGE = "average"


@dataclass(frozen=True)
class Truncation:
    """BYTES(n): longest UTF-8 prefix <= n bytes on a character boundary.
    CHARS(n): first n characters, per-example when n is None. NONE: identity."""

    kind: str = "none"            # "bytes" | "chars" | "none"
    n: int | None = None

    def __post_init__(self) -> None:
        if self.kind not in ("bytes", "chars", "none"):
            raise ValueError(f"unknown truncation kind {self.kind!r}")
        if self.kind == "bytes" and (self.n is None or self.n < 1):
            raise ValueError("byte truncation needs n >= 1")


@dataclass(frozen=True)
class EvalProtocol:
    truncation: Truncation = Truncation("none")
    rouge_variant: RougeVariant = RougeVariant.RECALL
    multi_ref_aggregation: Aggregation = Aggregation.MAX


@dataclass
class EvalReport:
    rouge1: float
    rouge2: float
    rougeL: float
    bleu: float
    length_compliance: float | None
    n_examples: int

    def as_dict(self) -> dict:
        return {
            "rouge1": self.rouge1,
            "rouge2": self.rouge2,
            "rougeL": self.rougeL,
            "bleu": self.bleu,
            "length_compliance": self.length_compliance,
            "n_examples": self.n_examples,
        }


def truncate(text: str, protocol: Truncation, n_override: int | None = None) -> str:
    n = n_override if n_override is not None else protocol.n
    if protocol.kind == "none":
        return text
    if n is None:
        raise ValueError("truncation count missing")
    if protocol.kind == "chars":
        return text[:n]
    encoded = text.encode("utf-8")
    if len(encoded) <= n:
        return text
    # dropping the trailing partial character keeps the boundary intact
    return encoded[:n].decode("utf-8", errors="ignore")


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i: i + n]) for i in range(len(tokens) - n + 1))


def _aggregate(scores: list[float], agg: Aggregation) -> float:
    if agg is Aggregation.MAX:
        return max(scores)
    return sum(scores) / len(scores)


def _combine(matches: float, ref_total: float, hyp_total: float,
             variant: RougeVariant) -> float:
    recall = matches / ref_total if ref_total else 0.0
    if variant is RougeVariant.RECALL:
        return recall
    precision = matches / hyp_total if hyp_total else 0.0
    if recall + precision == 0.0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def rouge_n(references: Sequence[Sequence[str]], hypothesis: Sequence[str], n: int,
            variant: RougeVariant = RougeVariant.RECALL,
            aggregation: Aggregation = Aggregation.MAX) -> float:
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if not references:
        raise ValueError("need at least one reference")
    hyp_counts = _ngrams(hypothesis, n)
    hyp_total = sum(hyp_counts.values())
    scores = []
    for ref in references:
        ref_counts = _ngrams(ref, n)
        matches = sum(min(c, hyp_counts[g]) for g, c in ref_counts.items())
        scores.append(_combine(matches, sum(ref_counts.values()), hyp_total, variant))
    return _aggregate(scores, aggregation)


def _lcs_len(a: Sequence[str], b: Sequence[str]) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0] * (len(b) + 1)
        for j, y in enumerate(b, start=1):
            cur[j] = prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1])
        prev = cur
    return prev[-1]


def rouge_l(references: Sequence[Sequence[str]], hypothesis: Sequence[str],
            variant: RougeVariant = RougeVariant.RECALL,
            aggregation: Aggregation = Aggregation.MAX) -> float:
    if not references:
        raise ValueError("need at least one reference")
    scores = []
    for ref in references:
        lcs = _lcs_len(ref, hypothesis)
        scores.append(_combine(lcs, len(ref), len(hypothesis), variant))
    return _aggregate(scores, aggregation)


def bleu(references: Sequence[Sequence[Sequence[str]]],
         hypotheses: Sequence[Sequence[str]], max_n: int = 4) -> float:
    """Unsmoothed corpus BLEU in [0, 100]; zero if any n-gram precision is zero."""
    if not hypotheses:
        raise ValueError("empty hypothesis set")
    if len(references) != len(hypotheses):
        raise ValueError(f"{len(references)} reference sets vs {len(hypotheses)} hypotheses")
    matches = [0] * max_n
    totals = [0] * max_n
    hyp_len = 0
    ref_len = 0
    for refs, hyp in zip(references, hypotheses):
        if not refs:
            raise ValueError("example with no references")
        hyp_len += len(hyp)
        ref_len += min((len(r) for r in refs), key=lambda L: (abs(L - len(hyp)), L))
        for n in range(1, max_n + 1):
            hyp_counts = _ngrams(hyp, n)
            if not hyp_counts:
                continue
            clipped = Counter()
            for ref in refs:
                ref_counts = _ngrams(ref, n)
                for g in hyp_counts:
                    clipped[g] = max(clipped[g], min(hyp_counts[g], ref_counts[g]))
            matches[n - 1] += sum(clipped.values())
            totals[n - 1] += sum(hyp_counts.values())
    if any(t == 0 or m == 0 for m, t in zip(matches, totals)):
        return 0.0
    log_prec = sum(math.log(m / t) for m, t in zip(matches, totals)) / max_n
    bp = 1.0 if hyp_len > ref_len else math.exp(1 - ref_len / max(hyp_len, 1))
    return 100.0 * bp * math.exp(log_prec)


def evaluate(outputs: Sequence[str], references: Sequence[Sequence[str]],
             protocol: EvalProtocol,
             desired_lengths: Sequence[int] | None = None,
             truncation_lengths: Sequence[int] | None = None) -> EvalReport:
    """Score system outputs against references.

    Truncation applies to hypotheses only.  With per-example CHARS truncation,
    truncation_lengths supplies the character budgets (defaults to
    desired_lengths).  Length compliance compares the pre-truncation token
    count of each output to its desired length.
    """
    if len(outputs) != len(references):
        raise ValueError(f"{len(outputs)} outputs vs {len(references)} reference sets")
    if desired_lengths is not None and len(desired_lengths) != len(outputs):
        raise ValueError("desired_lengths count mismatch")
    if truncation_lengths is None:
        truncation_lengths = desired_lengths
    trunc = protocol.truncation
    per_example = trunc.kind == "chars" and trunc.n is None
    if per_example and truncation_lengths is None:
        raise ValueError("per-example CHARS truncation needs lengths")

    hyp_tokens = []
    ref_tokens = [[r.split() for r in refs] for refs in references]
    compliant = 0
    for i, out in enumerate(outputs):
        if desired_lengths is not None and len(out.split()) == desired_lengths[i]:
            compliant += 1
        cut = truncate(out, trunc, truncation_lengths[i] if per_example else None)
        hyp_tokens.append(cut.split())

    variant = protocol.rouge_variant
    agg = protocol.multi_ref_aggregation
    n = len(outputs)

    def mean(f):
        return sum(f(refs, hyp) for refs, hyp in zip(ref_tokens, hyp_tokens)) / n

    return EvalReport(
        rouge1=mean(lambda r, h: rouge_n(r, h, 1, variant, agg)),
        rouge2=mean(lambda r, h: rouge_n(r, h, 2, variant, agg)),
        rougeL=mean(lambda r, h: rouge_l(r, h, variant, agg)),
        bleu=bleu(ref_tokens, hyp_tokens),
        length_compliance=(compliant / n) if desired_lengths is not None else None,
        n_examples=n,
    )


def report_table(reports: dict[str, EvalReport]) -> str:
    """Aligned plain-text table, scores reported on the 0-100 scale."""
    header = f"{'system':<24}{'R-1':>8}{'R-2':>8}{'R-L':>8}{'BLEU':>8}{'len%':>8}{'n':>6}"
    lines = [header, "-" * len(header)]
    for name, r in reports.items():
        comp = f"{100 * r.length_compliance:.1f}" if r.length_compliance is not None else "-"
        lines.append(
            f"{name:<24}{100 * r.rouge1:8.2f}{100 * r.rouge2:8.2f}"
            f"{100 * r.rougeL:8.2f}{r.bleu:8.2f}{comp:>8}{r.n_examples:>6}")
    return "\n".join(lines)
