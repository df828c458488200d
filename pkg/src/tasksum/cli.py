"""Command-line entry point: synth / train / build-pseudo / decode / eval /
gradcheck / ablation, all deterministic under a fixed config and seed."""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
from pathlib import Path

import torch

from . import corpus as cp
from . import pseudo as ps
from .corpus import Dataset, Example, SynthSpec, Task, Vocabulary
from .decode import DecodeRequest, batch_greedy, decode as decode_one
from .experiment import (
    CorpusBundle,
    ExperimentConfig,
    MIXTURE_PRESETS,
    ablation_table_text,
    build_corpora,
    build_oracle_pseudo,
    eval_xling,
    run_ablation,
    toy_char_budget,
    train_mixture,
)
from .metrics import (
    Aggregation,
    EvalProtocol,
    RougeVariant,
    Truncation,
    evaluate,
    report_table,
)
from .model import (
    ModelConfig,
    PEMode,
    TransformerModel,
    grad_check,
    load_checkpoint,
    save_checkpoint,
)
from .router import TASK_TOKEN_ID, pe_mode_for
from .trainer import make_batch


def load_config(args) -> ExperimentConfig:
    if args.config:
        with open(args.config, encoding="utf-8") as f:
            config = ExperimentConfig.from_dict(json.load(f))
    else:
        config = ExperimentConfig()
    if args.seed is not None:
        config.seed = args.seed
    return config


def run_dir(args, config: ExperimentConfig) -> Path:
    out = Path(args.out) / config.config_hash()
    out.mkdir(parents=True, exist_ok=True)
    return out


def write_json(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n",
                    encoding="utf-8")


def save_vocab(path: Path, vocab: Vocabulary) -> None:
    write_json(path, {"content_tokens": list(vocab.id_to_token[cp.NUM_RESERVED:])})


def read_vocab(path: Path) -> Vocabulary:
    return Vocabulary(json.loads(path.read_text())["content_tokens"])


def cmd_synth(args) -> int:
    config = load_config(args)
    if any(n <= 0 for n in config.synth.n_pairs):
        print("error: every n_pairs entry must be positive", file=sys.stderr)
        return 2
    out = run_dir(args, config)
    bundle = build_corpora(config)
    files = {
        "trans.jsonl": bundle.trans,
        "monosum.jsonl": bundle.monosum,
        "xling_test.jsonl": bundle.xling_test,
        "trans_test.jsonl": bundle.trans_test,
        "monosum_test.jsonl": bundle.monosum_test,
    }
    for name, ds in files.items():
        cp.write_jsonl(ds, out / name)
    save_vocab(out / "vocab.json", bundle.vocab)
    write_json(out / "manifest.json", {
        "config": config.as_dict(),
        "counts": {name: len(ds) for name, ds in files.items()},
        "vocab_size": bundle.vocab.size,
    })
    print(f"wrote {len(files)} corpora to {out}")
    return 0


def _model_backend(ckpt_path: str, max_len: int) -> ps.GeneratorBackend:
    model, _ = load_checkpoint(ckpt_path)

    def backend(tagged_source, pe_mode):
        req = DecodeRequest(tuple(tagged_source), pe_mode, max_len=max_len,
                            strict_length=pe_mode.is_length_ratio)
        return decode_one(model, req).ids

    return backend


def cmd_build_pseudo(args) -> int:
    config = load_config(args)
    out = run_dir(args, config)
    bundle = build_corpora(config)
    if args.oracle:
        pseudo_sets = build_oracle_pseudo(bundle)
        stats = pseudo_sets.pop("stats")
    else:
        if not (args.backtrans_ckpt and args.summarizer_ckpt):
            print("error: need --backtrans-ckpt and --summarizer-ckpt "
                  "(or --oracle)", file=sys.stderr)
            return 2
        back = _model_backend(args.backtrans_ckpt, config.decode_max_len)
        summ = _model_backend(args.summarizer_ckpt, config.decode_max_len)
        xling_a, ptrans, stats_a = ps.pseudo_from_monosum(bundle.monosum, back)
        xling_b, stats_b = ps.pseudo_from_trans(bundle.trans, summ)
        pseudo_sets = {
            "pseudo_xling_from_sum": xling_a,
            "pseudo_trans": ptrans,
            "pseudo_xling_from_trans": xling_b,
            "trans_as_sum": ps.trans_as_sum(bundle.trans),
        }
        stats = [stats_a, stats_b]
    for name, ds in pseudo_sets.items():
        cp.write_jsonl(ds, out / f"{name}.jsonl")
    write_json(out / "pseudo_stats.json", stats)
    if args.oracle:
        # pseudo sources must round-trip through the cipher to the genuine sources
        translate, _ = cp.synth_cipher(bundle.spec)
        mismatches = 0
        for ex, orig in zip(pseudo_sets["pseudo_xling_from_sum"].examples,
                            bundle.monosum.examples):
            back = translate(bundle.vocab.decode(ex.source))
            if back != bundle.vocab.decode(orig.source) or ex.target != orig.target:
                mismatches += 1
        write_json(out / "oracle_check.json", {
            "checked": len(bundle.monosum), "mismatches": mismatches})
    print(f"wrote {len(pseudo_sets)} pseudo corpora to {out}")
    return 0


def cmd_train(args) -> int:
    config = load_config(args)
    out = run_dir(args, config)
    bundle = build_corpora(config)
    if args.swap_direction:
        swapped = [Example(task=Task.TRANS, source=list(ex.target),
                           target=list(ex.source)) for ex in bundle.trans]
        bundle = dataclasses.replace(
            bundle, trans=Dataset(swapped, "trans_rev", bundle.vocab, bundle.vocab))
    needs_pseudo = any(c.startswith(("pseudo", "trans_as"))
                       for c in MIXTURE_PRESETS[args.mixture])
    pseudo_sets = build_oracle_pseudo(bundle) if needs_pseudo else None
    model, manifest, history = train_mixture(config, bundle, args.mixture,
                                             pseudo_sets, seed=config.seed)
    suffix = "_rev" if args.swap_direction else ""
    name = f"{args.mixture}{suffix}_seed{config.seed}"
    save_checkpoint(out / f"{name}.ckpt", model,
                    meta={"vocab": list(bundle.vocab.id_to_token[cp.NUM_RESERVED:]),
                          "mixture": manifest})
    write_json(out / f"{name}_manifest.json", manifest)
    with open(out / f"{name}_loss.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["step", "loss", "lr"])
        writer.writerows(history)
    print(f"trained {name}: final loss {history[-1][1]:.4f}")
    return 0


def cmd_decode(args) -> int:
    model, meta = load_checkpoint(args.ckpt)
    vocab = Vocabulary(meta["vocab"])
    requests = []
    records = []
    with open(args.input, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            rec = json.loads(line)
            task = Task(rec["task"])
            length = args.length if args.length else rec.get("desired_length")
            if task is Task.SUMMARY and length is None:
                print(f"error: line {lineno}: SUMMARY input without --length or "
                      "desired_length", file=sys.stderr)
                return 2
            try:
                source = vocab.encode(cp.tokenize(rec["source"]))
            except cp.SchemaError as e:
                print(f"error: line {lineno}: input does not match checkpoint "
                      f"vocabulary: {e}", file=sys.stderr)
                return 2
            pe = pe_mode_for(task, length if task is Task.SUMMARY else None)
            requests.append(DecodeRequest(
                tagged_source=tuple([TASK_TOKEN_ID[task]] + source), pe_mode=pe,
                max_len=args.max_len, beam_size=args.beam,
                strict_length=args.strict_length))
            records.append(rec)
    if args.beam > 1:
        results = [decode_one(model, r) for r in requests]
    else:
        results = batch_greedy(model, requests)
    with open(args.output, "w", encoding="utf-8") as f:
        for res in results:
            f.write(json.dumps({
                "output": cp.detokenize(vocab.decode(res.ids)),
                "length": len(res.ids),
                "flagged": res.flagged,
            }, sort_keys=True) + "\n")
    print(f"decoded {len(results)} inputs -> {args.output}")
    return 0


def parse_truncation(text: str) -> Truncation:
    if text == "none":
        return Truncation("none")
    kind, _, n = text.partition(":")
    if kind == "bytes":
        return Truncation("bytes", int(n))
    if kind == "chars":
        return Truncation("chars", None if n in ("", "per") else int(n))
    raise ValueError(f"bad truncation spec {text!r}")


def _read_jsonl_records(path: str) -> list[dict]:
    records = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            if line.strip():
                records.append(json.loads(line))
    return records


def cmd_eval(args) -> int:
    hyp_records = _read_jsonl_records(args.hyp)
    ref_records = _read_jsonl_records(args.ref)
    if len(hyp_records) != len(ref_records):
        print(f"error: {len(hyp_records)} hypotheses vs {len(ref_records)} "
              "references", file=sys.stderr)
        return 2
    outputs = [r.get("output", r.get("target", "")) for r in hyp_records]
    references = []
    for r in ref_records:
        refs = r.get("targets") or [r["target"]]
        references.append([ref for ref in refs])
    lengths = [r.get("desired_length") for r in ref_records]
    have_lengths = all(x is not None for x in lengths)
    protocol = EvalProtocol(
        truncation=parse_truncation(args.truncate),
        rouge_variant=RougeVariant(args.variant),
        multi_ref_aggregation=Aggregation(args.agg))
    report = evaluate(outputs, references, protocol,
                      desired_lengths=lengths if have_lengths else None)
    write_json(Path(args.report), report.as_dict())
    table = report_table({"system": report})
    Path(args.report).with_suffix(".txt").write_text(table + "\n", encoding="utf-8")
    print(table)
    return 0


def cmd_gradcheck(args) -> int:
    spec = SynthSpec(vocab_content_size=6, min_len=4, max_len=8,
                     n_pairs=(8, 8, 2), split_seed=args.seed or 0)
    trans, monosum, _ = cp.synth_corpora(spec)
    vocab = trans.src_vocab
    config = ModelConfig(src_vocab_size=vocab.size, tgt_vocab_size=vocab.size,
                         d_model=16, n_heads=2, n_layers_enc=1, n_layers_dec=1,
                         d_ff=32, max_len=16, dropout_rate=0.0,
                         precision="float64", seed=args.seed or 0)
    model = TransformerModel(config)
    batch = make_batch(trans.examples[:4] + monosum.examples[:4],
                       config.sinusoid_base, config.torch_dtype)
    err = grad_check(model, batch, epsilon=args.epsilon, n_samples=200)
    ok = err < 1e-4
    print(f"gradcheck: max relative error {err:.3e} ({'pass' if ok else 'FAIL'})")
    return 0 if ok else 1


def cmd_ablation(args) -> int:
    config = load_config(args)
    out = run_dir(args, config)
    rows = args.rows or list(MIXTURE_PRESETS)
    seeds = args.ablation_seeds or [config.seed]
    table = run_ablation(config, rows=rows, seeds=seeds)
    write_json(out / "ablation.json", table)
    text = ablation_table_text(table, rows)
    (out / "ablation.txt").write_text(text + "\n", encoding="utf-8")
    print(text)
    if args.sweep:
        sweep_rows = []
        for size in args.sweep:
            sub = dataclasses.replace(
                config, synth=dataclasses.replace(config.synth,
                                                  n_pairs=(size, size, config.synth.n_pairs[2])))
            sub_table = run_ablation(sub, rows=["pseudo_only", "transum_full"],
                                     seeds=seeds[:1])
            for mixture in ("pseudo_only", "transum_full"):
                sweep_rows.append((mixture, size,
                                   sub_table[mixture]["xling_rouge1_mean"]))
        with open(out / "sweep.csv", "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["mixture", "n_pairs", "xling_rouge1"])
            writer.writerows(sweep_rows)
        print(f"wrote sweep.csv ({len(sweep_rows)} rows)")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tasksum",
        description="Multi-task translation/summarization laboratory")
    parser.add_argument("--config", help="experiment config JSON")
    parser.add_argument("--seed", type=int, default=None, help="global seed override")
    parser.add_argument("--out", default="runs", help="output root directory")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("synth", help="generate the synthetic corpora")

    p = sub.add_parser("train", help="train one mixture")
    p.add_argument("--mixture", choices=sorted(MIXTURE_PRESETS), default="transum_full")
    p.add_argument("--swap-direction", action="store_true",
                   help="train on reversed translation pairs (B->A)")

    p = sub.add_parser("build-pseudo", help="construct pseudo corpora")
    p.add_argument("--oracle", action="store_true",
                   help="use the synthetic oracles as backends")
    p.add_argument("--backtrans-ckpt", help="B->A translation checkpoint")
    p.add_argument("--summarizer-ckpt", help="monolingual summarization checkpoint")

    p = sub.add_parser("decode", help="batch-decode a JSONL file")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--beam", type=int, default=1)
    p.add_argument("--strict-length", action="store_true")
    p.add_argument("--length", type=int, default=None,
                   help="desired length override for SUMMARY inputs")
    p.add_argument("--max-len", type=int, default=48)

    p = sub.add_parser("eval", help="score hypotheses against references")
    p.add_argument("--hyp", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--truncate", default="none",
                   help="none | bytes:N | chars:N | chars:per")
    p.add_argument("--variant", choices=["recall", "f1"], default="recall")
    p.add_argument("--agg", choices=["max", "average"], default="max")

    p = sub.add_parser("gradcheck", help="finite-difference gradient check")
    p.add_argument("--epsilon", type=float, default=1e-5)

    p = sub.add_parser("ablation", help="train and evaluate mixture rows")
    p.add_argument("--rows", nargs="*", choices=sorted(MIXTURE_PRESETS))
    p.add_argument("--ablation-seeds", nargs="*", type=int)
    p.add_argument("--sweep", nargs="*", type=int,
                   help="data sizes for the pseudo-vs-full sweep CSV")

    return parser


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "build-pseudo": cmd_build_pseudo,
    "decode": cmd_decode,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "ablation": cmd_ablation,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    torch.manual_seed(args.seed or 0)
    try:
        return COMMANDS[args.command](args)
    except (cp.ConfigError, cp.SchemaError, cp.ParseError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
