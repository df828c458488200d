"""Toy transformer encoder-decoder with switchable decoder positional encoding.

The decoder can use either the conventional sinusoidal encoding or a
length-ratio encoding whose base is the desired output length L, so the
phase of every dimension completes a fixed fraction of its cycle by
position L regardless of L's value.
"""
from __future__ import annotations

import json
import math
import struct
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .corpus import BOS_ID, ConfigError, PAD_ID

CHECKPOINT_MAGIC = b"TSUMCKPT1"


class InvalidInputError(ValueError):
    """Input ids or shapes violate the model contract."""


class CheckpointError(ValueError):
    """Checkpoint file is malformed."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""


@dataclass
class ModelConfig:
    src_vocab_size: int
    tgt_vocab_size: int
    d_model: int = 64
    n_heads: int = 4
    n_layers_enc: int = 2
    n_layers_dec: int = 2
    d_ff: int = 256
    max_len: int = 64
    dropout_rate: float = 0.1
    label_smoothing: float = 0.1
    sinusoid_base: float = 10000.0
    seed: int = 0
    precision: str = "float32"
    tie_embeddings: bool = True

    def __post_init__(self) -> None:
        if self.d_model % 2 != 0:
            raise ConfigError("d_model must be even")
        if self.d_model % self.n_heads != 0:
            raise ConfigError("d_model must be divisible by n_heads")
        if self.precision not in ("float32", "float64"):
            raise ConfigError(f"unknown precision {self.precision!r}")
        if self.tie_embeddings and self.src_vocab_size != self.tgt_vocab_size:
            raise ConfigError("tied embeddings need equal vocab sizes")

    @property
    def torch_dtype(self) -> torch.dtype:
        return torch.float64 if self.precision == "float64" else torch.float32


@dataclass(frozen=True)
class PEMode:
    """Decoder positional-encoding mode: sinusoidal, or length-ratio with base L."""

    length: int | None = None

    def __post_init__(self) -> None:
        if self.length is not None and self.length < 1:
            raise ConfigError(f"length-ratio PE needs L >= 1, got {self.length}")

    @property
    def is_length_ratio(self) -> bool:
        return self.length is not None

    def base(self, sinusoid_base: float) -> float:
        return float(self.length) if self.length is not None else sinusoid_base


SINUSOIDAL = PEMode(None)


def _pe_vector(pos: int, d: int, base: float) -> list[float]:
    if d % 2 != 0:
        raise ConfigError(f"dimension must be even, got {d}")
    if pos < 0:
        raise InvalidInputError(f"position must be >= 0, got {pos}")
    out = [0.0] * d
    for i in range(d // 2):
        angle = pos / base ** (2 * i / d)
        out[2 * i] = math.sin(angle)
        out[2 * i + 1] = math.cos(angle)
    return out


def sinusoidal_pe(pos: int, d: int, base: float = 10000.0) -> list[float]:
    """Conventional sinusoidal positional encoding at one position."""
    return _pe_vector(pos, d, base)


def lrpe(pos: int, length: int, d: int) -> list[float]:
    """Length-ratio positional encoding: sinusoid with base = desired length."""
    if length < 1:
        raise ConfigError(f"desired length must be >= 1, got {length}")
    return _pe_vector(pos, d, float(length))


def pe_table(n_positions: int, d: int, bases: torch.Tensor) -> torch.Tensor:
    """Stack of PE matrices, one per base value. bases: (B,) -> (B, n_positions, d)."""
    dtype = bases.dtype
    pos = torch.arange(n_positions, dtype=dtype)
    exponent = torch.arange(0, d, 2, dtype=dtype) / d
    inv = bases.view(-1, 1) ** (-exponent)            # (B, d/2)
    angles = pos.view(1, -1, 1) * inv.unsqueeze(1)    # (B, P, d/2)
    table = torch.zeros(bases.shape[0], n_positions, d, dtype=dtype)
    table[:, :, 0::2] = torch.sin(angles)
    table[:, :, 1::2] = torch.cos(angles)
    return table


class MultiHeadAttention(nn.Module):
    def __init__(self, d_model: int, n_heads: int, dropout: float):
        super().__init__()
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.q_proj = nn.Linear(d_model, d_model)
        self.k_proj = nn.Linear(d_model, d_model)
        self.v_proj = nn.Linear(d_model, d_model)
        self.out_proj = nn.Linear(d_model, d_model)
        self.dropout = nn.Dropout(dropout)

    def forward(self, query, key, value, mask=None):
        b, tq, d = query.shape
        tk = key.shape[1]

        def split(x, t):
            return x.view(b, t, self.n_heads, self.d_head).transpose(1, 2)

        q = split(self.q_proj(query), tq)
        k = split(self.k_proj(key), tk)
        v = split(self.v_proj(value), tk)
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.d_head)
        if mask is not None:
            scores = scores.masked_fill(~mask, float("-inf"))
        attn = self.dropout(torch.softmax(scores, dim=-1))
        out = (attn @ v).transpose(1, 2).reshape(b, tq, d)
        return self.out_proj(out)


class FeedForward(nn.Module):
    def __init__(self, d_model: int, d_ff: int, dropout: float):
        super().__init__()
        self.fc1 = nn.Linear(d_model, d_ff)
        self.fc2 = nn.Linear(d_ff, d_model)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x):
        return self.fc2(self.dropout(F.relu(self.fc1(x))))


class EncoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.self_attn = MultiHeadAttention(cfg.d_model, cfg.n_heads, cfg.dropout_rate)
        self.ff = FeedForward(cfg.d_model, cfg.d_ff, cfg.dropout_rate)
        self.norm1 = nn.LayerNorm(cfg.d_model)
        self.norm2 = nn.LayerNorm(cfg.d_model)
        self.dropout = nn.Dropout(cfg.dropout_rate)

    def forward(self, x, src_mask):
        h = self.norm1(x)
        x = x + self.dropout(self.self_attn(h, h, h, src_mask))
        x = x + self.dropout(self.ff(self.norm2(x)))
        return x


class DecoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.self_attn = MultiHeadAttention(cfg.d_model, cfg.n_heads, cfg.dropout_rate)
        self.cross_attn = MultiHeadAttention(cfg.d_model, cfg.n_heads, cfg.dropout_rate)
        self.ff = FeedForward(cfg.d_model, cfg.d_ff, cfg.dropout_rate)
        self.norm1 = nn.LayerNorm(cfg.d_model)
        self.norm2 = nn.LayerNorm(cfg.d_model)
        self.norm3 = nn.LayerNorm(cfg.d_model)
        self.dropout = nn.Dropout(cfg.dropout_rate)

    def forward(self, x, memory, tgt_mask, mem_mask):
        h = self.norm1(x)
        x = x + self.dropout(self.self_attn(h, h, h, tgt_mask))
        x = x + self.dropout(self.cross_attn(self.norm2(x), memory, memory, mem_mask))
        x = x + self.dropout(self.ff(self.norm3(x)))
        return x


class TransformerModel(nn.Module):
    """Pre-norm encoder-decoder; encoder PE is always sinusoidal, decoder PE
    is selected per example."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        torch.manual_seed(config.seed)
        cfg = config
        self.src_embed = nn.Embedding(cfg.src_vocab_size, cfg.d_model)
        if cfg.tie_embeddings:
            self.tgt_embed = self.src_embed
        else:
            self.tgt_embed = nn.Embedding(cfg.tgt_vocab_size, cfg.d_model)
        nn.init.normal_(self.src_embed.weight, std=cfg.d_model ** -0.5)
        nn.init.normal_(self.tgt_embed.weight, std=cfg.d_model ** -0.5)
        self.enc_layers = nn.ModuleList(EncoderLayer(cfg) for _ in range(cfg.n_layers_enc))
        self.dec_layers = nn.ModuleList(DecoderLayer(cfg) for _ in range(cfg.n_layers_dec))
        self.enc_norm = nn.LayerNorm(cfg.d_model)
        self.dec_norm = nn.LayerNorm(cfg.d_model)
        self.out_proj = nn.Linear(cfg.d_model, cfg.tgt_vocab_size)
        if cfg.tie_embeddings:
            self.out_proj.weight = self.tgt_embed.weight
        self.dropout = nn.Dropout(cfg.dropout_rate)
        self.to(cfg.torch_dtype)

    def _check_ids(self, ids: torch.Tensor, vocab_size: int, what: str) -> None:
        if ids.numel() and (ids.min() < 0 or ids.max() >= vocab_size):
            raise InvalidInputError(f"{what} id out of range [0, {vocab_size})")
        if ids.shape[-1] > self.config.max_len:
            raise InvalidInputError(
                f"{what} length {ids.shape[-1]} exceeds max_len {self.config.max_len}")

    def encode(self, src: torch.Tensor, src_pad: torch.Tensor) -> torch.Tensor:
        cfg = self.config
        self._check_ids(src, cfg.src_vocab_size, "source")
        bases = torch.full((src.shape[0],), cfg.sinusoid_base, dtype=cfg.torch_dtype)
        pe = pe_table(src.shape[1], cfg.d_model, bases)
        x = self.src_embed(src) * math.sqrt(cfg.d_model) + pe
        x = self.dropout(x)
        mask = (~src_pad).view(src.shape[0], 1, 1, -1)
        for layer in self.enc_layers:
            x = layer(x, mask)
        return self.enc_norm(x)

    def decode(self, tgt_in: torch.Tensor, memory: torch.Tensor,
               src_pad: torch.Tensor, pe_bases: torch.Tensor) -> torch.Tensor:
        cfg = self.config
        self._check_ids(tgt_in, cfg.tgt_vocab_size, "target")
        b, t = tgt_in.shape
        pe = pe_table(t, cfg.d_model, pe_bases.to(cfg.torch_dtype))
        x = self.tgt_embed(tgt_in) * math.sqrt(cfg.d_model) + pe
        x = self.dropout(x)
        causal = torch.tril(torch.ones(t, t, dtype=torch.bool)).view(1, 1, t, t)
        mem_mask = (~src_pad).view(b, 1, 1, -1)
        for layer in self.dec_layers:
            x = layer(x, memory, causal, mem_mask)
        return self.out_proj(self.dec_norm(x))

    def forward(self, src: torch.Tensor, tgt_in: torch.Tensor,
                pe_bases: torch.Tensor) -> torch.Tensor:
        src_pad = src == PAD_ID
        memory = self.encode(src, src_pad)
        return self.decode(tgt_in, memory, src_pad, pe_bases)

    def logits_for(self, tagged_source: list[int], target_prefix: list[int],
                   pe_mode: PEMode) -> torch.Tensor:
        """Logits over the target vocabulary for one (source, prefix) pair."""
        if not target_prefix or target_prefix[0] != BOS_ID:
            raise InvalidInputError("target prefix must start with BOS")
        src = torch.tensor([tagged_source], dtype=torch.long)
        tgt = torch.tensor([target_prefix], dtype=torch.long)
        bases = torch.tensor([pe_mode.base(self.config.sinusoid_base)],
                             dtype=self.config.torch_dtype)
        return self.forward(src, tgt, bases)[0]


def sequence_loss(logits: torch.Tensor, targets: torch.Tensor,
                  label_smoothing: float = 0.0, pad_id: int = PAD_ID) -> torch.Tensor:
    """Mean token-level label-smoothed cross-entropy, PAD positions excluded."""
    if logits.shape[:-1] != targets.shape:
        raise InvalidInputError(
            f"logit rows {tuple(logits.shape[:-1])} != targets {tuple(targets.shape)}")
    logp = F.log_softmax(logits, dim=-1)
    nll = -logp.gather(-1, targets.unsqueeze(-1)).squeeze(-1)
    smooth = -logp.mean(dim=-1)
    tok = (1.0 - label_smoothing) * nll + label_smoothing * smooth
    mask = targets != pad_id
    if not mask.any():
        raise InvalidInputError("all targets are PAD")
    return tok[mask].mean()


def make_optimizer(model: TransformerModel, warmup: int = 400,
                   lr_factor: float = 1.0):
    """Adam with the inverse-sqrt warmup schedule."""
    d = model.config.d_model
    opt = torch.optim.Adam(model.parameters(), lr=1.0, betas=(0.9, 0.98), eps=1e-9)

    def lr_at(step: int) -> float:
        s = max(step, 1)
        return lr_factor * d ** -0.5 * min(s ** -0.5, s * warmup ** -1.5)

    sched = torch.optim.lr_scheduler.LambdaLR(opt, lr_at)
    return opt, sched


def train_step(model: TransformerModel, optimizer, scheduler, batch,
               clip_norm: float = 1.0) -> float:
    """One Adam update on a padded batch (src, tgt_in, tgt_out, pe_bases)."""
    src, tgt_in, tgt_out, pe_bases = batch
    model.train()
    optimizer.zero_grad()
    logits = model(src, tgt_in, pe_bases)
    loss = sequence_loss(logits, tgt_out, model.config.label_smoothing)
    if not torch.isfinite(loss):
        raise DivergenceError(f"non-finite loss {loss.item()} at lr "
                              f"{scheduler.get_last_lr()[0]:.3e}")
    loss.backward()
    torch.nn.utils.clip_grad_norm_(model.parameters(), clip_norm)
    optimizer.step()
    scheduler.step()
    return loss.item()


def grad_check(model: TransformerModel, batch, epsilon: float = 1e-5,
               n_samples: int = 200, seed: int = 0) -> float:
    """Max relative error between autograd and central finite differences,
    sampled across every parameter group. Requires float64 and no dropout."""
    if model.config.torch_dtype != torch.float64:
        raise ConfigError("grad_check requires float64 precision")
    if model.config.dropout_rate != 0.0:
        raise ConfigError("grad_check requires dropout disabled")
    src, tgt_in, tgt_out, pe_bases = batch
    model.eval()

    def loss_value() -> torch.Tensor:
        logits = model(src, tgt_in, pe_bases)
        return sequence_loss(logits, tgt_out, model.config.label_smoothing)

    model.zero_grad()
    loss_value().backward()
    params = [(n, p) for n, p in model.named_parameters() if p.requires_grad]
    rng = np.random.default_rng(seed)
    per_group = max(1, math.ceil(n_samples / len(params)))
    max_rel = 0.0
    with torch.no_grad():
        for name, p in params:
            flat = p.view(-1)
            grad = p.grad.view(-1)
            idxs = rng.choice(flat.numel(), size=min(per_group, flat.numel()),
                              replace=False)
            for i in idxs:
                orig = flat[i].item()
                flat[i] = orig + epsilon
                hi = loss_value().item()
                flat[i] = orig - epsilon
                lo = loss_value().item()
                flat[i] = orig
                numeric = (hi - lo) / (2 * epsilon)
                analytic = grad[i].item()
                denom = max(abs(numeric), abs(analytic))
                if denom < 1e-8:
                    continue
                max_rel = max(max_rel, abs(numeric - analytic) / denom)
    return max_rel


def save_checkpoint(path, model: TransformerModel, optimizer=None,
                    meta: dict | None = None) -> None:
    """Deterministic binary checkpoint: JSON header + raw little-endian tensors."""
    tensors: list[tuple[str, torch.Tensor]] = []
    seen: set[int] = set()
    for name, p in model.named_parameters():
        if id(p) in seen:          # tied weights stored once
            continue
        seen.add(id(p))
        tensors.append((f"param.{name}", p.detach()))
    if optimizer is not None:
        name_of = {id(p): n for n, p in model.named_parameters()}
        for p, state in optimizer.state.items():
            pname = name_of[id(p)]
            for key in ("step", "exp_avg", "exp_avg_sq"):
                val = state[key]
                if not torch.is_tensor(val):
                    val = torch.tensor(float(val), dtype=torch.float64)
                tensors.append((f"opt.{pname}.{key}", val.detach()))
    entries = []
    blob = bytearray()
    for name, t in tensors:
        arr = t.cpu().numpy()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": str(arr.dtype)})
        blob.extend(arr.tobytes())
    header = json.dumps({
        "config": asdict(model.config),
        "meta": meta or {},
        "tensors": entries,
    }, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack(">Q", len(header)))
        f.write(header)
        f.write(bytes(blob))


def load_checkpoint(path, with_optimizer: bool = False, warmup: int = 400,
                    lr_factor: float = 1.0):
    """Load a checkpoint; returns (model, meta) or (model, optimizer, scheduler, meta)."""
    with open(path, "rb") as f:
        magic = f.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file")
        (hlen,) = struct.unpack(">Q", f.read(8))
        header = json.loads(f.read(hlen))
        data = f.read()
    arrays = {}
    offset = 0
    for entry in header["tensors"]:
        arr = np.frombuffer(data, dtype=np.dtype(entry["dtype"]),
                            count=int(np.prod(entry["shape"])) if entry["shape"] else 1,
                            offset=offset).reshape(entry["shape"])
        offset += arr.nbytes
        arrays[entry["name"]] = torch.from_numpy(arr.copy())
    config = ModelConfig(**header["config"])
    model = TransformerModel(config)
    with torch.no_grad():
        seen: set[int] = set()
        for name, p in model.named_parameters():
            if id(p) in seen:
                continue
            seen.add(id(p))
            p.copy_(arrays[f"param.{name}"])
    meta = header["meta"]
    if not with_optimizer:
        return model, meta
    optimizer, scheduler = make_optimizer(model, warmup=warmup, lr_factor=lr_factor)
    name_of = dict(model.named_parameters())
    for pname, p in name_of.items():
        key = f"opt.{pname}.step"
        if key in arrays:
            optimizer.state[p] = {
                "step": arrays[key].to(torch.float32).reshape(()),
                "exp_avg": arrays[f"opt.{pname}.exp_avg"],
                "exp_avg_sq": arrays[f"opt.{pname}.exp_avg_sq"],
            }
    sched_step = int(meta.get("sched_step", 0))
    with warnings.catch_warnings():
        # replaying the schedule without optimizer steps is intentional here
        warnings.simplefilter("ignore", UserWarning)
        for _ in range(sched_step):
            scheduler.step()
    return model, optimizer, scheduler, meta
