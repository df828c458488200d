"""Pseudo-data construction from genuine parallel corpora.

Every pipeline is parameterized over a GeneratorBackend: a callable from
(tagged source id sequence, PEMode) to an output id sequence.  A trained
model's decoder and the corpus oracles both satisfy it.
"""
from __future__ import annotations

import logging
import math
from typing import Callable, Sequence

from .corpus import (
    Dataset,
    Example,
    Provenance,
    SynthSpec,
    Task,
    Vocabulary,
    summarize_oracle,
)
from .model import PEMode, SINUSOIDAL
from .router import TASK_TOKEN_ID

log = logging.getLogger(__name__)

GeneratorBackend = Callable[[Sequence[int], PEMode], list[int]]

SKIP_THRESHOLD = 0.10


class PipelineError(RuntimeError):
    """Too many items failed; the backend is likely degenerate."""


def default_length_policy(target: Sequence[int]) -> int:
    return max(1, math.ceil(len(target) / 2))


def oracle_translator(vocab: Vocabulary, translate: Callable[[Sequence[str]], list[str]]) -> GeneratorBackend:
    """Wrap a tokenwise cipher oracle as a generator backend."""

    def backend(tagged_source: Sequence[int], pe_mode: PEMode) -> list[int]:
        tokens = vocab.decode(tagged_source[1:])
        return vocab.encode(translate(tokens))

    return backend


def oracle_summarizer(vocab: Vocabulary, spec: SynthSpec) -> GeneratorBackend:
    """Wrap the deterministic summarization oracle as a generator backend."""

    def backend(tagged_source: Sequence[int], pe_mode: PEMode) -> list[int]:
        if not pe_mode.is_length_ratio:
            raise ValueError("summarizer backend needs a length-ratio PE mode")
        tokens = vocab.decode(tagged_source[1:])
        return vocab.encode(summarize_oracle(tokens, pe_mode.length, spec))

    return backend


def _run(items, produce, what: str):
    outputs = []
    skipped = []
    for idx, item in enumerate(items):
        try:
            outputs.append(produce(item))
        except Exception as e:  # backend failures skip the item
            log.warning("%s: skipped item %d: %s", what, idx, e)
            skipped.append(idx)
    if len(items) and len(skipped) > SKIP_THRESHOLD * len(items):
        raise PipelineError(
            f"{what}: {len(skipped)}/{len(items)} items failed (> {SKIP_THRESHOLD:.0%})")
    return outputs, skipped


def _stats(name: str, n_in: int, outputs: list[Example], skipped: list[int]) -> dict:
    def mean(xs):
        return sum(xs) / len(xs) if xs else 0.0

    return {
        "pipeline": name,
        "n_in": n_in,
        "n_out": len(outputs),
        "skipped": skipped,
        "mean_source_len": mean([len(e.source) for e in outputs]),
        "mean_target_len": mean([len(e.target) for e in outputs]),
    }


def pseudo_from_monosum(monosum: Dataset, back_translator: GeneratorBackend
                        ) -> tuple[Dataset, Dataset, dict]:
    """Back-translate monolingual sentence-summary pairs.

    Yields cross-lingual pairs (translated sentence -> genuine summary) and
    pseudo translation pairs (translated sentence -> genuine sentence).
    """
    for ex in monosum:
        if ex.task is not Task.SUMMARY or ex.desired_length is None:
            raise ValueError("pseudo_from_monosum expects SUMMARY examples with lengths")

    def produce(ex: Example) -> tuple[Example, Example]:
        tagged = [TASK_TOKEN_ID[Task.TRANS]] + list(ex.source)
        translated = back_translator(tagged, SINUSOIDAL)
        xling = Example(task=Task.SUMMARY, source=translated, target=list(ex.target),
                        desired_length=ex.desired_length, provenance=Provenance.PSEUDO)
        ptrans = Example(task=Task.PSEUDO_TRANS, source=translated,
                         target=list(ex.source), provenance=Provenance.PSEUDO)
        return xling, ptrans

    pairs, skipped = _run(monosum.examples, produce, "pseudo_from_monosum")
    xling = Dataset([p[0] for p in pairs], "pseudo_xling_from_sum",
                    monosum.src_vocab, monosum.tgt_vocab)
    ptrans = Dataset([p[1] for p in pairs], "pseudo_trans",
                     monosum.src_vocab, monosum.tgt_vocab)
    stats = _stats("pseudo_from_monosum", len(monosum), xling.examples, skipped)
    return xling, ptrans, stats


def pseudo_from_trans(trans: Dataset, summarizer: GeneratorBackend,
                      length_policy: Callable[[Sequence[int]], int] = default_length_policy
                      ) -> tuple[Dataset, dict]:
    """Summarize the target side of translation pairs; pair the summaries with
    the genuine source-language sentences."""
    for ex in trans:
        if ex.task is not Task.TRANS:
            raise ValueError("pseudo_from_trans expects TRANS examples")

    def produce(ex: Example) -> Example:
        length = length_policy(ex.target)
        tagged = [TASK_TOKEN_ID[Task.SUMMARY]] + list(ex.target)
        summary = summarizer(tagged, PEMode(length))
        return Example(task=Task.SUMMARY, source=list(ex.source), target=summary,
                       desired_length=length, provenance=Provenance.PSEUDO)

    outputs, skipped = _run(trans.examples, produce, "pseudo_from_trans")
    ds = Dataset(outputs, "pseudo_xling_from_trans", trans.src_vocab, trans.tgt_vocab)
    return ds, _stats("pseudo_from_trans", len(trans), outputs, skipped)


def trans_as_sum(trans: Dataset) -> Dataset:
    """Relabel genuine translation pairs as uncompressed sentence-summary pairs."""
    for ex in trans:
        if ex.task is not Task.TRANS:
            raise ValueError("trans_as_sum expects TRANS examples")
    out = [Example(task=Task.SUMMARY, source=list(ex.source), target=list(ex.target),
                   desired_length=len(ex.target), provenance=Provenance.GENUINE)
           for ex in trans]
    return Dataset(out, "trans_as_sum", trans.src_vocab, trans.tgt_vocab)
