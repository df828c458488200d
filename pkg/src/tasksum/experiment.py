"""End-to-end experiment orchestration shared by the CLI and the test suite."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field

from . import corpus as cp
from . import pseudo as ps
from .corpus import Dataset, Example, Provenance, SynthSpec, Task, Vocabulary
from .decode import DecodeRequest, batch_greedy, greedy_decode
from .metrics import (EvalProtocol, EvalReport, RougeVariant, Truncation,
                      evaluate, rouge_n)
from .model import ModelConfig, PEMode, SINUSOIDAL, TransformerModel
from .router import TASK_TOKEN_ID, TrainingMixture, assemble, pe_mode_for
from .trainer import TrainSettings, token_accuracy, train

MIXTURE_PRESETS = {
    "trans_only": ("genuine_trans",),
    "zero_shot": ("genuine_trans", "genuine_monosum"),
    "pseudo_only": ("pseudo_xling_from_sum", "pseudo_xling_from_trans"),
    "transum_full": (
        "genuine_trans", "genuine_monosum", "pseudo_xling_from_sum",
        "pseudo_xling_from_trans", "trans_as_sum", "pseudo_trans",
    ),
}


@dataclass
class ExperimentConfig:
    synth: SynthSpec = field(default_factory=SynthSpec)
    d_model: int = 64
    n_heads: int = 4
    n_layers_enc: int = 2
    n_layers_dec: int = 2
    d_ff: int = 256
    dropout_rate: float = 0.1
    label_smoothing: float = 0.1
    precision: str = "float32"
    total_steps: int = 2000
    batch_size: int = 64
    warmup: int = 400
    lr_factor: float = 1.0
    held_out: int = 200
    decode_max_len: int = 48
    eval_every: int = 0     # dev-loss cadence for best-checkpoint selection
    dev_size: int = 0       # mixture examples withheld as the dev set
    patience: int = 0       # dev evals without improvement before stopping
    pseudo_backend: str = "oracle"  # "oracle" or "model" generators
    backbone_steps: int = 0  # model-backend training budget; 0 = total_steps
    seed: int = 0

    def as_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["synth"]["n_pairs"] = list(d["synth"]["n_pairs"])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        synth = d.pop("synth", {})
        if "n_pairs" in synth:
            synth["n_pairs"] = tuple(synth["n_pairs"])
        return cls(synth=SynthSpec(**synth), **d)

    def config_hash(self) -> str:
        blob = json.dumps(self.as_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]

    def model_config(self, vocab: Vocabulary, seed: int | None = None,
                     dropout: float | None = None) -> ModelConfig:
        max_len = max(self.synth.max_len + 2, self.decode_max_len + 2)
        return ModelConfig(
            src_vocab_size=vocab.size, tgt_vocab_size=vocab.size,
            d_model=self.d_model, n_heads=self.n_heads,
            n_layers_enc=self.n_layers_enc, n_layers_dec=self.n_layers_dec,
            d_ff=self.d_ff, max_len=max_len,
            dropout_rate=self.dropout_rate if dropout is None else dropout,
            label_smoothing=self.label_smoothing,
            seed=self.seed if seed is None else seed, precision=self.precision)

    def train_settings(self, seed: int | None = None) -> TrainSettings:
        return TrainSettings(total_steps=self.total_steps, batch_size=self.batch_size,
                             warmup=self.warmup, lr_factor=self.lr_factor,
                             eval_every=self.eval_every, patience=self.patience,
                             seed=self.seed if seed is None else seed)


@dataclass
class CorpusBundle:
    """Train corpora plus held-out slices carved off the same generation."""

    vocab: Vocabulary
    spec: SynthSpec
    trans: Dataset
    monosum: Dataset
    xling_test: Dataset
    trans_test: Dataset
    monosum_test: Dataset


def build_corpora(config: ExperimentConfig) -> CorpusBundle:
    spec = config.synth
    h = config.held_out
    n_trans, n_monosum, n_xling = spec.n_pairs
    gen_spec = dataclasses.replace(spec, n_pairs=(n_trans + h, n_monosum + h, n_xling))
    trans, monosum, xling = cp.synth_corpora(gen_spec)

    def split(ds: Dataset, n_train: int) -> tuple[Dataset, Dataset]:
        return (Dataset(ds.examples[:n_train], ds.name, ds.src_vocab, ds.tgt_vocab),
                Dataset(ds.examples[n_train:], ds.name + "_test", ds.src_vocab, ds.tgt_vocab))

    trans, trans_test = split(trans, n_trans)
    monosum, monosum_test = split(monosum, n_monosum)
    return CorpusBundle(trans.src_vocab, spec, trans, monosum, xling,
                        trans_test, monosum_test)


def build_oracle_pseudo(bundle: CorpusBundle) -> dict:
    """All pseudo corpora built with the synthetic oracle backends."""
    translate, inverse = cp.synth_cipher(bundle.spec)
    back_translator = ps.oracle_translator(bundle.vocab, inverse)
    summarizer = ps.oracle_summarizer(bundle.vocab, bundle.spec)
    xling_from_sum, pseudo_trans, stats_a = ps.pseudo_from_monosum(
        bundle.monosum, back_translator)
    xling_from_trans, stats_b = ps.pseudo_from_trans(bundle.trans, summarizer)
    return {
        "pseudo_xling_from_sum": xling_from_sum,
        "pseudo_trans": pseudo_trans,
        "pseudo_xling_from_trans": xling_from_trans,
        "trans_as_sum": ps.trans_as_sum(bundle.trans),
        "stats": [stats_a, stats_b],
    }


def _generator_backend(model: TransformerModel, max_len: int,
                       precompute: list[tuple[tuple[int, ...], PEMode]] | None = None
                       ) -> ps.GeneratorBackend:
    """Greedy-decode backend; known requests are decoded in one batched pass."""
    def request(tagged_source, pe_mode):
        return DecodeRequest(tuple(tagged_source), pe_mode, max_len=max_len,
                             strict_length=pe_mode.is_length_ratio)

    cache: dict[tuple, list[int]] = {}
    if precompute:
        requests = [request(src, pe) for src, pe in precompute]
        for req, res in zip(requests, batch_greedy(model, requests)):
            cache[(req.tagged_source, req.pe_mode)] = res.ids

    def backend(tagged_source, pe_mode):
        key = (tuple(tagged_source), pe_mode)
        if key not in cache:
            cache[key] = greedy_decode(model, request(*key)).ids
        return cache[key]

    return backend


def build_model_pseudo(config: ExperimentConfig, bundle: CorpusBundle) -> dict:
    """Pseudo corpora generated by a trained backbone model.

    One task-routed model serves as both backends: the back-translator is
    its TRANS direction (trained on flipped translation pairs) and the
    summarizer its SUMMARY direction. Unlike the oracle backends, its
    outputs carry genuine generation noise, so mixtures trained on them
    inherit the quality gap between pseudo and genuine supervision.
    """
    flipped = Dataset(
        [Example(task=Task.TRANS, source=list(ex.target), target=list(ex.source))
         for ex in bundle.trans],
        "trans_flipped", bundle.vocab, bundle.vocab)
    mixture = TrainingMixture(genuine_trans=flipped, genuine_monosum=bundle.monosum,
                              shuffle_seed=config.seed)
    dataset, _ = assemble(mixture)
    steps = config.backbone_steps or config.total_steps
    settings = dataclasses.replace(config.train_settings(seed=config.seed),
                                   total_steps=steps, eval_every=0)
    backbone = TransformerModel(config.model_config(bundle.vocab, seed=config.seed))
    train(backbone, dataset, settings)
    precompute = [
        (tuple([TASK_TOKEN_ID[Task.TRANS]] + list(ex.source)), SINUSOIDAL)
        for ex in bundle.monosum
    ] + [
        (tuple([TASK_TOKEN_ID[Task.SUMMARY]] + list(ex.target)),
         PEMode(ps.default_length_policy(ex.target)))
        for ex in bundle.trans
    ]
    backend = _generator_backend(backbone, config.decode_max_len, precompute)
    xling_from_sum, pseudo_trans, stats_a = ps.pseudo_from_monosum(
        bundle.monosum, backend)
    xling_from_trans, stats_b = ps.pseudo_from_trans(bundle.trans, backend)
    return {
        "pseudo_xling_from_sum": xling_from_sum,
        "pseudo_trans": pseudo_trans,
        "pseudo_xling_from_trans": xling_from_trans,
        "trans_as_sum": ps.trans_as_sum(bundle.trans),
        "stats": [stats_a, stats_b],
    }


def build_pseudo(config: ExperimentConfig, bundle: CorpusBundle) -> dict:
    if config.pseudo_backend == "model":
        return build_model_pseudo(config, bundle)
    if config.pseudo_backend == "oracle":
        return build_oracle_pseudo(bundle)
    raise cp.ConfigError(f"unknown pseudo backend {config.pseudo_backend!r}")


def make_mixture(name: str, bundle: CorpusBundle, pseudo_sets: dict | None,
                 shuffle_seed: int = 0) -> TrainingMixture:
    if name not in MIXTURE_PRESETS:
        raise cp.ConfigError(f"unknown mixture preset {name!r}; "
                             f"choose from {sorted(MIXTURE_PRESETS)}")
    pools = {
        "genuine_trans": bundle.trans,
        "genuine_monosum": bundle.monosum,
    }
    if pseudo_sets:
        pools.update({k: v for k, v in pseudo_sets.items() if k != "stats"})
    kwargs = {}
    for component in MIXTURE_PRESETS[name]:
        if component not in pools:
            raise cp.ConfigError(f"mixture {name} needs component {component}; "
                                 "build the pseudo corpora first")
        kwargs[component] = pools[component]
    return TrainingMixture(shuffle_seed=shuffle_seed, **kwargs)


def train_mixture(config: ExperimentConfig, bundle: CorpusBundle, mixture_name: str,
                  pseudo_sets: dict | None = None, seed: int | None = None):
    """Train one mixture row; returns (model, manifest, history)."""
    seed = config.seed if seed is None else seed
    mixture = make_mixture(mixture_name, bundle, pseudo_sets, shuffle_seed=seed)
    dataset, manifest = assemble(mixture)
    manifest["mixture"] = mixture_name
    dev_score = None
    if config.eval_every > 0 and config.dev_size > 0:
        n_dev = min(config.dev_size, len(dataset) // 10)
        dev = Dataset(dataset.examples[:n_dev], dataset.name + "_dev",
                      dataset.src_vocab, dataset.tgt_vocab)
        dataset = Dataset(dataset.examples[n_dev:], dataset.name,
                          dataset.src_vocab, dataset.tgt_vocab)
        manifest["dev_examples"] = n_dev

        def dev_score(m: TransformerModel) -> float:
            # Free-running decode quality, not teacher-forced loss: the dev
            # criterion has to see the same failure modes as evaluation does.
            # Errors on genuine translation examples carry an extra penalty:
            # translation anchors the pipeline, so a checkpoint should not
            # trade it away for summary gains. Pseudo examples are excluded
            # from that term — their noisy pairings are not exactly fittable.
            outs = decode_dataset(m, dev, max_len=config.decode_max_len)
            trans_wrong = 0
            scores = []
            for out, ex in zip(outs, dev.examples):
                exact = out == list(ex.target)
                if (ex.task is not Task.SUMMARY and not exact
                        and ex.provenance is Provenance.GENUINE):
                    trans_wrong += 1
                scores.append((rouge_n([ex.target], out, 1) + exact) / 2)
            return 0.02 * trans_wrong + 1.0 - sum(scores) / len(scores)

    model = TransformerModel(config.model_config(bundle.vocab, seed=seed))
    history, _, _ = train(model, dataset, config.train_settings(seed=seed),
                          dev_score=dev_score)
    return model, manifest, history


def toy_char_budget(spec: SynthSpec, length: int) -> int:
    """Character budget covering exactly `length` fixed-width tokens."""
    token_width = 1 + len(str(spec.vocab_content_size - 1))
    return (token_width + 1) * length - 1


def decode_dataset(model: TransformerModel, dataset: Dataset, *, as_task: Task | None = None,
                   strict_length: bool = False, max_len: int = 48) -> list[list[int]]:
    """Greedy-decode every example, tagging sources with the example task
    (or an override) and routing the decoder PE accordingly."""
    requests = []
    for ex in dataset:
        task = as_task or ex.task
        length = ex.desired_length if task is Task.SUMMARY else None
        pe = pe_mode_for(task, length)
        requests.append(DecodeRequest(
            tagged_source=tuple([TASK_TOKEN_ID[task]] + list(ex.source)),
            pe_mode=pe, max_len=max_len, strict_length=strict_length))
    return [r.ids for r in batch_greedy(model, requests)]


def eval_xling(model: TransformerModel, bundle: CorpusBundle, *,
               as_task: Task = Task.SUMMARY, max_len: int = 48) -> EvalReport:
    """Cross-lingual test ROUGE under per-example character truncation."""
    test = bundle.xling_test
    outputs = decode_dataset(model, test, as_task=as_task, max_len=max_len)
    hyp = [cp.detokenize(bundle.vocab.decode(ids)) for ids in outputs]
    refs = [[cp.detokenize(bundle.vocab.decode(ex.target))] for ex in test]
    lengths = [ex.desired_length for ex in test]
    budgets = [toy_char_budget(bundle.spec, L) for L in lengths]
    protocol = EvalProtocol(truncation=Truncation("chars", None),
                            rouge_variant=RougeVariant.RECALL)
    return evaluate(hyp, refs, protocol, desired_lengths=lengths,
                    truncation_lengths=budgets)


def eval_monosum(model: TransformerModel, bundle: CorpusBundle,
                 max_len: int = 48) -> EvalReport:
    test = bundle.monosum_test
    outputs = decode_dataset(model, test, max_len=max_len)
    hyp = [cp.detokenize(bundle.vocab.decode(ids)) for ids in outputs]
    refs = [[cp.detokenize(bundle.vocab.decode(ex.target))] for ex in test]
    lengths = [ex.desired_length for ex in test]
    budgets = [toy_char_budget(bundle.spec, L) for L in lengths]
    protocol = EvalProtocol(truncation=Truncation("chars", None),
                            rouge_variant=RougeVariant.RECALL)
    return evaluate(hyp, refs, protocol, desired_lengths=lengths,
                    truncation_lengths=budgets)


def eval_translation(model: TransformerModel, bundle: CorpusBundle,
                     max_len: int = 48) -> EvalReport:
    test = bundle.trans_test
    outputs = decode_dataset(model, test, max_len=max_len)
    hyp = [cp.detokenize(bundle.vocab.decode(ids)) for ids in outputs]
    refs = [[cp.detokenize(bundle.vocab.decode(ex.target))] for ex in test]
    return evaluate(hyp, refs, EvalProtocol())


def run_ablation(config: ExperimentConfig, rows: list[str] | None = None,
                 seeds: list[int] | None = None) -> dict:
    """Train each mixture row across seeds and evaluate on all three test sets.

    The cross-lingual eval decodes the translation-only row as plain
    translation (pipeline-free baseline); all other rows decode with the
    summary token and length-ratio PE.
    """
    rows = rows or list(MIXTURE_PRESETS)
    seeds = seeds or [config.seed]
    bundle = build_corpora(config)
    pseudo_sets = build_pseudo(config, bundle)
    table: dict[str, dict] = {}
    for row in rows:
        per_seed = []
        for seed in seeds:
            model, manifest, _ = train_mixture(config, bundle, row, pseudo_sets, seed=seed)
            xling_task = Task.TRANS if row == "trans_only" else Task.SUMMARY
            xling = eval_xling(model, bundle, as_task=xling_task,
                               max_len=config.decode_max_len)
            trans = eval_translation(model, bundle, max_len=config.decode_max_len)
            mono = eval_monosum(model, bundle, max_len=config.decode_max_len)
            per_seed.append({
                "seed": seed,
                "xling_rouge1": 100 * xling.rouge1,
                "xling_rouge2": 100 * xling.rouge2,
                "xling_rougeL": 100 * xling.rougeL,
                "xling_compliance": xling.length_compliance,
                "trans_bleu": trans.bleu,
                "monosum_rouge1": 100 * mono.rouge1,
                "manifest": manifest,
            })
        def mean(key: str) -> float:
            return sum(s[key] for s in per_seed) / len(per_seed)
        table[row] = {
            "seeds": per_seed,
            "xling_rouge1_mean": mean("xling_rouge1"),
            "trans_bleu_mean": mean("trans_bleu"),
            "monosum_rouge1_mean": mean("monosum_rouge1"),
        }
    table["orderings"] = check_orderings(table, rows)
    return table


def check_orderings(table: dict, rows: list[str], slack: float = 0.5) -> dict:
    """The qualitative orderings the toy run is expected to reproduce."""
    out: dict[str, bool | None] = {}
    chain = ["transum_full", "pseudo_only", "zero_shot", "trans_only"]
    if all(r in rows for r in chain):
        ok = True
        for hi, lo in zip(chain, chain[1:]):
            if table[hi]["xling_rouge1_mean"] < table[lo]["xling_rouge1_mean"] - slack:
                ok = False
        out["xling_rouge1_chain"] = ok
    else:
        out["xling_rouge1_chain"] = None
    if "transum_full" in rows and "trans_only" in rows:
        out["bleu_multitask_gain"] = (
            table["transum_full"]["trans_bleu_mean"] >= table["trans_only"]["trans_bleu_mean"])
    else:
        out["bleu_multitask_gain"] = None
    return out


def ablation_table_text(table: dict, rows: list[str]) -> str:
    header = f"{'mixture':<16}{'xling R-1':>12}{'mono R-1':>12}{'BLEU':>10}"
    lines = [header, "-" * len(header)]
    for row in rows:
        r = table[row]
        lines.append(f"{row:<16}{r['xling_rouge1_mean']:12.2f}"
                     f"{r['monosum_rouge1_mean']:12.2f}{r['trans_bleu_mean']:10.2f}")
    for name, ok in table.get("orderings", {}).items():
        status = "pass" if ok else ("fail" if ok is not None else "skipped")
        lines.append(f"ordering {name}: {status}")
    return "\n".join(lines)
