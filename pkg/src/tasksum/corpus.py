"""Synthetic corpora: tokenization, vocabulary, task datasets, JSONL I/O.

Two toy languages stand in for real parallel corpora: language A with
content tokens a0..a(k-1) and language B with b0..b(k-1) (zero-padded so
lexicographic order equals numeric order).  Translation is a seeded token
cipher between them; summarization is a deterministic filter+prefix rule.
"""
from __future__ import annotations

import json
import math
import random
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Iterable, Sequence

PAD_ID = 0
BOS_ID = 1
EOS_ID = 2
UNK_ID = 3
TRANS_ID = 4
SUMMARY_ID = 5
PSEUDO_TRANS_ID = 6

RESERVED_TOKENS = (
    "<PAD>", "<BOS>", "<EOS>", "<UNK>", "<Trans>", "<Summary>", "<PseudoTrans>",
)
NUM_RESERVED = len(RESERVED_TOKENS)
TASK_TOKEN_IDS = frozenset((TRANS_ID, SUMMARY_ID, PSEUDO_TRANS_ID))
RESERVED_IDS = frozenset(range(NUM_RESERVED))


class ConfigError(ValueError):
    """Invalid configuration value."""


class SchemaError(ValueError):
    """Record violates the corpus schema."""


class ParseError(ValueError):
    """File could not be parsed."""


class Task(str, Enum):
    TRANS = "TRANS"
    PSEUDO_TRANS = "PSEUDO_TRANS"
    SUMMARY = "SUMMARY"


class Provenance(str, Enum):
    GENUINE = "GENUINE"
    PSEUDO = "PSEUDO"


def tokenize(text: str) -> list[str]:
    """Whitespace tokenization."""
    return text.split()


def detokenize(tokens: Sequence[str]) -> str:
    return " ".join(tokens)


class Vocabulary:
    """Immutable token<->id map with the fixed reserved-id layout."""

    def __init__(self, content_tokens: Sequence[str]):
        for tok in content_tokens:
            if tok in RESERVED_TOKENS:
                raise ConfigError(f"content token clashes with reserved token: {tok!r}")
        if len(set(content_tokens)) != len(content_tokens):
            raise ConfigError("duplicate content tokens")
        self.id_to_token: tuple[str, ...] = RESERVED_TOKENS + tuple(content_tokens)
        self.token_to_id: dict[str, int] = {t: i for i, t in enumerate(self.id_to_token)}

    @property
    def size(self) -> int:
        return len(self.id_to_token)

    def encode(self, tokens: Sequence[str]) -> list[int]:
        try:
            return [self.token_to_id[t] for t in tokens]
        except KeyError as e:
            raise SchemaError(f"unknown token {e.args[0]!r}") from None

    def decode(self, ids: Sequence[int]) -> list[str]:
        return [self.id_to_token[i] for i in ids]

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Vocabulary) and self.id_to_token == other.id_to_token

    def __len__(self) -> int:
        return self.size


def build_vocab(corpus_text: Iterable[Sequence[str]], max_size: int) -> Vocabulary:
    """Frequency-ordered vocabulary; ties broken lexicographically.

    Reserved tokens always occupy ids 0-6; at most max_size entries total.
    """
    if max_size < NUM_RESERVED:
        raise ConfigError(f"max_size must be >= {NUM_RESERVED}, got {max_size}")
    counts: dict[str, int] = {}
    for seq in corpus_text:
        for tok in seq:
            counts[tok] = counts.get(tok, 0) + 1
    ordered = sorted(counts, key=lambda t: (-counts[t], t))
    return Vocabulary(ordered[: max_size - NUM_RESERVED])


@dataclass
class Example:
    """One training/eval instance; source/target are content-token ids."""

    task: Task
    source: list[int]
    target: list[int]
    desired_length: int | None = None
    provenance: Provenance = Provenance.GENUINE

    def __post_init__(self) -> None:
        self.task = Task(self.task)
        self.provenance = Provenance(self.provenance)
        if (self.task is Task.SUMMARY) != (self.desired_length is not None):
            raise SchemaError("desired_length must be present iff task is SUMMARY")
        if self.desired_length is not None and self.desired_length < 1:
            raise SchemaError(f"desired_length must be >= 1, got {self.desired_length}")
        for seq in (self.source, self.target):
            for i in seq:
                if i in RESERVED_IDS:
                    raise SchemaError(f"reserved id {i} in example body")


@dataclass
class Dataset:
    examples: list[Example]
    name: str
    src_vocab: Vocabulary
    tgt_vocab: Vocabulary

    def __len__(self) -> int:
        return len(self.examples)

    def __iter__(self):
        return iter(self.examples)


@dataclass(frozen=True)
class SynthSpec:
    """Deterministic recipe for the synthetic translation/summarization corpora."""

    vocab_content_size: int = 25
    cipher_seed: int = 7
    function_token_fraction: float = 0.5
    min_len: int = 8
    max_len: int = 16
    summary_length_policy: str = "half"
    n_pairs: tuple[int, int, int] = (3000, 3000, 300)
    split_seed: int = 13

    def __post_init__(self) -> None:
        if not (0 < self.min_len <= self.max_len):
            raise ConfigError("need 0 < min_len <= max_len")
        if not (0.0 < self.function_token_fraction < 1.0):
            raise ConfigError("function_token_fraction must be in (0, 1)")
        if self.vocab_content_size < 2:
            raise ConfigError("vocab_content_size must be >= 2")
        if any(n < 0 for n in self.n_pairs):
            raise ConfigError("n_pairs must be non-negative")

    def desired_length(self, source_len: int) -> int:
        policy = self.summary_length_policy
        if policy == "half":
            return max(1, math.ceil(source_len / 2))
        if policy == "quarter":
            return max(1, math.ceil(source_len / 4))
        if policy.startswith("fixed:"):
            return int(policy.split(":", 1)[1])
        raise ConfigError(f"unknown summary_length_policy {policy!r}")


def content_tokens(lang: str, k: int) -> list[str]:
    """Content tokens of one language, zero-padded for stable sorting."""
    width = len(str(k - 1))
    return [f"{lang}{i:0{width}d}" for i in range(k)]


def function_tokens(spec: SynthSpec, lang: str = "b") -> set[str]:
    """The lexicographically last floor(fraction*k) content tokens of a language."""
    toks = sorted(content_tokens(lang, spec.vocab_content_size))
    n_func = int(spec.function_token_fraction * spec.vocab_content_size)
    return set(toks[len(toks) - n_func:]) if n_func else set()


def synth_cipher(spec: SynthSpec) -> tuple[Callable[[Sequence[str]], list[str]],
                                            Callable[[Sequence[str]], list[str]]]:
    """Seeded tokenwise bijection A->B and its inverse.

    cipher_seed == 0 selects the identity permutation (ai -> bi).
    """
    k = spec.vocab_content_size
    a_toks = content_tokens("a", k)
    b_toks = content_tokens("b", k)
    perm = list(range(k))
    if spec.cipher_seed != 0:
        random.Random(spec.cipher_seed).shuffle(perm)
    fwd = {a_toks[i]: b_toks[perm[i]] for i in range(k)}
    inv = {v: t for t, v in fwd.items()}

    def translate(tokens: Sequence[str]) -> list[str]:
        try:
            return [fwd[t] for t in tokens]
        except KeyError as e:
            raise SchemaError(f"not a language-A token: {e.args[0]!r}") from None

    def inverse(tokens: Sequence[str]) -> list[str]:
        try:
            return [inv[t] for t in tokens]
        except KeyError as e:
            raise SchemaError(f"not a language-B token: {e.args[0]!r}") from None

    return translate, inverse


def summarize_oracle(source: Sequence[str], length: int, spec: SynthSpec,
                     lang: str = "b") -> list[str]:
    """Deterministic summary: drop function tokens, keep the first `length`,
    pad by repeating the last kept token."""
    if length < 1:
        raise ConfigError(f"desired length must be >= 1, got {length}")
    func = function_tokens(spec, lang)
    kept = [t for t in source if t not in func]
    if not kept:
        raise SchemaError("source contains only function tokens; summary undefined")
    out = kept[:length]
    while len(out) < length:
        out.append(kept[-1])
    return out


def shared_vocab(spec: SynthSpec) -> Vocabulary:
    """One vocabulary covering both synthetic languages."""
    toks = content_tokens("a", spec.vocab_content_size) + content_tokens("b", spec.vocab_content_size)
    return build_vocab([toks], max_size=NUM_RESERVED + len(toks))


def synth_corpora(spec: SynthSpec) -> tuple[Dataset, Dataset, Dataset]:
    """Generate (translation, monolingual-summarization, cross-lingual test) corpora.

    Pure function of the spec: sources are disjoint across corpora and the
    whole generation is reproducible bit-for-bit.
    """
    vocab = shared_vocab(spec)
    translate, _ = synth_cipher(spec)
    a_toks = content_tokens("a", spec.vocab_content_size)
    b_toks = content_tokens("b", spec.vocab_content_size)
    b_func = function_tokens(spec, "b")
    b_content_only = [t for t in b_toks if t not in b_func]
    rng = random.Random(spec.split_seed)
    seen: set[tuple[str, ...]] = set()

    def sample_source(alphabet: list[str], need_survivor: bool) -> list[str]:
        while True:
            n = rng.randint(spec.min_len, spec.max_len)
            src = [rng.choice(alphabet) for _ in range(n)]
            if need_survivor and all(t in b_func for t in src):
                src[rng.randrange(n)] = rng.choice(b_content_only)
            key = tuple(src)
            if key not in seen:
                seen.add(key)
                return src

    def survivor_safe(a_src: list[str]) -> bool:
        return any(t not in b_func for t in translate(a_src))

    n_trans, n_monosum, n_xling = spec.n_pairs

    trans_examples = []
    for _ in range(n_trans):
        src = sample_source(a_toks, need_survivor=False)
        trans_examples.append(Example(
            task=Task.TRANS, source=vocab.encode(src),
            target=vocab.encode(translate(src))))

    monosum_examples = []
    for _ in range(n_monosum):
        src = sample_source(b_toks, need_survivor=True)
        length = spec.desired_length(len(src))
        monosum_examples.append(Example(
            task=Task.SUMMARY, source=vocab.encode(src),
            target=vocab.encode(summarize_oracle(src, length, spec)),
            desired_length=length))

    xling_examples = []
    while len(xling_examples) < n_xling:
        src = sample_source(a_toks, need_survivor=False)
        if not survivor_safe(src):
            continue
        length = spec.desired_length(len(src))
        xling_examples.append(Example(
            task=Task.SUMMARY, source=vocab.encode(src),
            target=vocab.encode(summarize_oracle(translate(src), length, spec)),
            desired_length=length))

    return (
        Dataset(trans_examples, "trans", vocab, vocab),
        Dataset(monosum_examples, "monosum", vocab, vocab),
        Dataset(xling_examples, "xling_test", vocab, vocab),
    )


def example_to_record(ex: Example, src_vocab: Vocabulary, tgt_vocab: Vocabulary) -> dict:
    rec = {
        "task": ex.task.value,
        "source": detokenize(src_vocab.decode(ex.source)),
        "target": detokenize(tgt_vocab.decode(ex.target)),
        "provenance": ex.provenance.value,
    }
    if ex.desired_length is not None:
        rec["desired_length"] = ex.desired_length
    return rec


def write_jsonl(dataset: Dataset, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for ex in dataset.examples:
            rec = example_to_record(ex, dataset.src_vocab, dataset.tgt_vocab)
            f.write(json.dumps(rec, ensure_ascii=False, sort_keys=True) + "\n")


def read_jsonl(path, src_vocab: Vocabulary, tgt_vocab: Vocabulary | None = None,
               name: str | None = None) -> Dataset:
    """Read a JSONL corpus, validating the schema line by line."""
    tgt_vocab = tgt_vocab or src_vocab
    examples = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise ParseError(f"{path}: line {lineno}: {e}") from None
            if not isinstance(rec, dict):
                raise SchemaError(f"{path}: line {lineno}: expected an object")
            for key in ("task", "source", "target"):
                if key not in rec:
                    raise SchemaError(f"{path}: line {lineno}: missing field {key!r}")
            try:
                task = Task(rec["task"])
            except ValueError:
                raise SchemaError(
                    f"{path}: line {lineno}: unknown task {rec['task']!r}") from None
            try:
                ex = Example(
                    task=task,
                    source=src_vocab.encode(tokenize(rec["source"])),
                    target=tgt_vocab.encode(tokenize(rec["target"])),
                    desired_length=rec.get("desired_length"),
                    provenance=Provenance(rec.get("provenance", "GENUINE")),
                )
            except (SchemaError, ValueError) as e:
                raise SchemaError(f"{path}: line {lineno}: {e}") from None
            examples.append(ex)
    return Dataset(examples, name or str(path), src_vocab, tgt_vocab)
