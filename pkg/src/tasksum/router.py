"""Task-token routing: source tagging, decoder PE selection, mixture assembly."""
from __future__ import annotations

import random
from dataclasses import dataclass, field

from .corpus import (
    ConfigError,
    Dataset,
    Example,
    PSEUDO_TRANS_ID,
    SUMMARY_ID,
    TRANS_ID,
    Task,
)
from .model import PEMode, SINUSOIDAL

TASK_TOKEN_ID = {
    Task.TRANS: TRANS_ID,
    Task.SUMMARY: SUMMARY_ID,
    Task.PSEUDO_TRANS: PSEUDO_TRANS_ID,
}


class MissingLengthError(ValueError):
    """A summarization request arrived without a desired length."""


def tag_source(example: Example) -> list[int]:
    """Prepend the task token id to the example's source ids."""
    return [TASK_TOKEN_ID[example.task]] + list(example.source)


def pe_mode_for(task: Task, length: int | None = None) -> PEMode:
    """Summarization runs the decoder with length-ratio PE; everything else
    uses the conventional sinusoidal encoding."""
    if task is Task.SUMMARY:
        if length is None:
            raise MissingLengthError("SUMMARY task requires a desired length")
        return PEMode(length)
    return SINUSOIDAL


def pe_mode_for_example(example: Example) -> PEMode:
    return pe_mode_for(example.task, example.desired_length)


MIXTURE_COMPONENTS = (
    "genuine_trans",
    "genuine_monosum",
    "pseudo_xling_from_sum",
    "pseudo_xling_from_trans",
    "trans_as_sum",
    "pseudo_trans",
)


@dataclass
class TrainingMixture:
    """Named component datasets; None means the component is excluded."""

    genuine_trans: Dataset | None = None
    genuine_monosum: Dataset | None = None
    pseudo_xling_from_sum: Dataset | None = None
    pseudo_xling_from_trans: Dataset | None = None
    trans_as_sum: Dataset | None = None
    pseudo_trans: Dataset | None = None
    shuffle_seed: int = 0

    def components(self) -> list[tuple[str, Dataset]]:
        out = []
        for name in MIXTURE_COMPONENTS:
            ds = getattr(self, name)
            if ds is not None:
                if len(ds) == 0:
                    raise ConfigError(f"mixture component {name} is empty")
                out.append((name, ds))
        return out


def assemble(mixture: TrainingMixture) -> tuple[Dataset, dict]:
    """Concatenate the included components and shuffle uniformly.

    Returns the shuffled dataset and a manifest with per-component counts.
    """
    components = mixture.components()
    if not components:
        raise ConfigError("mixture includes no datasets")
    examples: list[Example] = []
    counts = {}
    for name, ds in components:
        counts[name] = len(ds)
        examples.extend(ds.examples)
    random.Random(mixture.shuffle_seed).shuffle(examples)
    manifest = {
        "components": counts,
        "total": len(examples),
        "shuffle_seed": mixture.shuffle_seed,
    }
    first = components[0][1]
    return Dataset(examples, "mixture", first.src_vocab, first.tgt_vocab), manifest
