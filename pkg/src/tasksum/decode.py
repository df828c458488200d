"""Greedy and beam decoding with task-token routing and length control.

Strict-length mode masks EOS before position L and forces it at L, so the
output length is guaranteed rather than learned.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import torch

from .corpus import BOS_ID, ConfigError, EOS_ID, PAD_ID, TASK_TOKEN_IDS
from .model import PEMode, TransformerModel

NEVER_EMIT = (PAD_ID, BOS_ID) + tuple(sorted(TASK_TOKEN_IDS))


@dataclass(frozen=True)
class DecodeRequest:
    tagged_source: tuple[int, ...]
    pe_mode: PEMode
    max_len: int = 64
    beam_size: int = 1
    strict_length: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(self, "tagged_source", tuple(self.tagged_source))
        if self.beam_size < 1:
            raise ConfigError(f"beam size must be >= 1, got {self.beam_size}")
        if self.strict_length and not self.pe_mode.is_length_ratio:
            raise ConfigError("strict-length decoding requires a length-ratio PE mode")
        if self.strict_length and self.pe_mode.length > self.max_len:
            raise ConfigError("strict length exceeds max_len")


@dataclass
class DecodeResult:
    ids: list[int]
    flagged: bool = False          # hit max_len without EOS (non-strict only)
    log_prob: float = 0.0


def _mask_logits(logits: torch.Tensor, emitted: int, request: DecodeRequest) -> torch.Tensor:
    logits = logits.clone()
    logits[..., list(NEVER_EMIT)] = float("-inf")
    if request.strict_length:
        if emitted < request.pe_mode.length:
            logits[..., EOS_ID] = float("-inf")
        else:
            keep = logits[..., EOS_ID].clone()
            logits[...] = float("-inf")
            logits[..., EOS_ID] = keep
    return logits


def greedy_decode(model: TransformerModel, request: DecodeRequest) -> DecodeResult:
    """Argmax decoding; ties resolve to the lowest token id."""
    cfg = model.config
    model.eval()
    src = torch.tensor([list(request.tagged_source)], dtype=torch.long)
    src_pad = src == PAD_ID
    base = torch.tensor([request.pe_mode.base(cfg.sinusoid_base)], dtype=cfg.torch_dtype)
    out: list[int] = []
    log_prob = 0.0
    flagged = False
    with torch.no_grad():
        memory = model.encode(src, src_pad)
        prefix = [BOS_ID]
        while True:
            tgt = torch.tensor([prefix], dtype=torch.long)
            logits = model.decode(tgt, memory, src_pad, base)[0, -1]
            logits = _mask_logits(logits, len(out), request)
            logp = torch.log_softmax(logits, dim=-1)
            token = int(torch.argmax(logits).item())
            log_prob += float(logp[token].item())
            if token == EOS_ID:
                break
            out.append(token)
            prefix.append(token)
            if len(out) >= request.max_len:
                flagged = not request.strict_length
                break
    return DecodeResult(out, flagged=flagged, log_prob=log_prob)


def beam_decode(model: TransformerModel, request: DecodeRequest) -> DecodeResult:
    """Beam search scored by mean log-probability per output token."""
    k = request.beam_size
    if k == 1:
        return greedy_decode(model, request)
    cfg = model.config
    model.eval()
    src = torch.tensor([list(request.tagged_source)], dtype=torch.long)
    src_pad = src == PAD_ID
    base = torch.tensor([request.pe_mode.base(cfg.sinusoid_base)], dtype=cfg.torch_dtype)
    with torch.no_grad():
        memory = model.encode(src, src_pad)
        beams: list[tuple[list[int], float]] = [([], 0.0)]
        finished: list[DecodeResult] = []
        for _ in range(request.max_len + 1):
            candidates: list[tuple[float, list[int], int]] = []
            for ids, score in beams:
                tgt = torch.tensor([[BOS_ID] + ids], dtype=torch.long)
                logits = model.decode(tgt, memory, src_pad, base)[0, -1]
                logits = _mask_logits(logits, len(ids), request)
                logp = torch.log_softmax(logits, dim=-1)
                top = torch.topk(logp, min(k, logp.shape[-1]))
                for val, tok in zip(top.values.tolist(), top.indices.tolist()):
                    if val == float("-inf"):
                        continue
                    candidates.append((score + val, ids, tok))
            candidates.sort(key=lambda c: (-c[0], c[2]))
            beams = []
            for total, ids, tok in candidates[: k * 2]:
                if tok == EOS_ID:
                    norm = total / max(len(ids), 1)
                    finished.append(DecodeResult(list(ids), log_prob=norm))
                elif len(beams) < k:
                    beams.append((ids + [tok], total))
            if len(finished) >= k or not beams:
                break
        if not finished:
            # no beam emitted EOS within max_len
            ids, score = beams[0]
            return DecodeResult(ids, flagged=not request.strict_length,
                                log_prob=score / max(len(ids), 1))
    finished.sort(key=lambda r: -r.log_prob)
    return finished[0]


def decode(model: TransformerModel, request: DecodeRequest) -> DecodeResult:
    if request.beam_size > 1:
        return beam_decode(model, request)
    return greedy_decode(model, request)


def batch_greedy(model: TransformerModel, requests: list[DecodeRequest],
                 batch_size: int = 128) -> list[DecodeResult]:
    """Greedy decoding over many requests at once; identical outputs to
    greedy_decode on each request."""
    results: list[DecodeResult | None] = [None] * len(requests)
    cfg = model.config
    model.eval()
    order = sorted(range(len(requests)), key=lambda i: len(requests[i].tagged_source))
    for start in range(0, len(order), batch_size):
        chunk = order[start: start + batch_size]
        reqs = [requests[i] for i in chunk]
        max_src = max(len(r.tagged_source) for r in reqs)
        src = torch.full((len(reqs), max_src), PAD_ID, dtype=torch.long)
        for row, r in enumerate(reqs):
            src[row, : len(r.tagged_source)] = torch.tensor(r.tagged_source)
        src_pad = src == PAD_ID
        bases = torch.tensor([r.pe_mode.base(cfg.sinusoid_base) for r in reqs],
                             dtype=cfg.torch_dtype)
        strict = torch.tensor([r.strict_length for r in reqs])
        lengths = torch.tensor([r.pe_mode.length if r.strict_length else -1
                                for r in reqs])
        max_steps = max(r.max_len for r in reqs)
        with torch.no_grad():
            memory = model.encode(src, src_pad)
            prefix = torch.full((len(reqs), 1), BOS_ID, dtype=torch.long)
            done = torch.zeros(len(reqs), dtype=torch.bool)
            outs: list[list[int]] = [[] for _ in reqs]
            logps = [0.0] * len(reqs)
            flagged = [False] * len(reqs)
            for step in range(max_steps + 1):
                logits = model.decode(prefix, memory, src_pad, bases)[:, -1]
                logits[:, list(NEVER_EMIT)] = float("-inf")
                mask_eos = strict & (step < lengths)
                force_eos = strict & (step == lengths)
                logits[mask_eos, EOS_ID] = float("-inf")
                if force_eos.any():
                    keep = logits[force_eos, EOS_ID].clone()
                    logits[force_eos] = float("-inf")
                    logits[force_eos, EOS_ID] = keep
                logp = torch.log_softmax(logits, dim=-1)
                tokens = logits.argmax(dim=-1)
                for row, r in enumerate(reqs):
                    if done[row]:
                        continue
                    tok = int(tokens[row])
                    logps[row] += float(logp[row, tok])
                    if tok == EOS_ID:
                        done[row] = True
                    else:
                        outs[row].append(tok)
                        if len(outs[row]) >= r.max_len:
                            flagged[row] = not r.strict_length
                            done[row] = True
                tokens = torch.where(done, torch.full_like(tokens, EOS_ID), tokens)
                if bool(done.all()):
                    break
                prefix = torch.cat([prefix, tokens.unsqueeze(1)], dim=1)
        for row, i in enumerate(chunk):
            results[i] = DecodeResult(outs[row], flagged=flagged[row], log_prob=logps[row])
    return results  # type: ignore[return-value]
