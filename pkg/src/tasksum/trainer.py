"""Training loop over assembled mixtures, plus held-out token accuracy."""
from __future__ import annotations

import random
from dataclasses import dataclass, field

import torch

from .corpus import BOS_ID, Dataset, EOS_ID, Example, PAD_ID
from .model import (
    ModelConfig,
    TransformerModel,
    make_optimizer,
    sequence_loss,
    train_step,
)
from .router import pe_mode_for_example, tag_source


@dataclass
class TrainSettings:
    total_steps: int = 2000
    batch_size: int = 64
    warmup: int = 400
    lr_factor: float = 1.0
    clip_norm: float = 1.0
    log_every: int = 50
    eval_every: int = 0     # if > 0 and a dev set is given, keep the best weights
    patience: int = 0       # stop after this many dev evals without improvement
    seed: int = 0


def make_batch(examples: list[Example], sinusoid_base: float, dtype: torch.dtype):
    """Pad a list of examples into (src, tgt_in, tgt_out, pe_bases) tensors."""
    srcs = [tag_source(ex) for ex in examples]
    tgt_ins = [[BOS_ID] + list(ex.target) for ex in examples]
    tgt_outs = [list(ex.target) + [EOS_ID] for ex in examples]
    max_s = max(len(s) for s in srcs)
    max_t = max(len(t) for t in tgt_ins)
    src = torch.full((len(examples), max_s), PAD_ID, dtype=torch.long)
    tgt_in = torch.full((len(examples), max_t), PAD_ID, dtype=torch.long)
    tgt_out = torch.full((len(examples), max_t), PAD_ID, dtype=torch.long)
    for i, (s, ti, to) in enumerate(zip(srcs, tgt_ins, tgt_outs)):
        src[i, : len(s)] = torch.tensor(s)
        tgt_in[i, : len(ti)] = torch.tensor(ti)
        tgt_out[i, : len(to)] = torch.tensor(to)
    bases = torch.tensor(
        [pe_mode_for_example(ex).base(sinusoid_base) for ex in examples], dtype=dtype)
    return src, tgt_in, tgt_out, bases


def train(model: TransformerModel, dataset: Dataset, settings: TrainSettings,
          optimizer=None, scheduler=None, start_step: int = 0,
          dev: Dataset | None = None, dev_score=None):
    """Run up to settings.total_steps updates; returns (history, optimizer, scheduler).

    Epoch shuffles and the torch RNG are reseeded from (seed, epoch), so a
    run resumed from an epoch-boundary checkpoint replays bit-identically.
    With eval_every > 0, the weights scoring best on the dev criterion are
    restored at the end: dev_score(model) -> float (lower is better) when
    given, otherwise teacher-forced loss on the dev set.
    """
    if optimizer is None:
        optimizer, scheduler = make_optimizer(model, settings.warmup, settings.lr_factor)
    cfg = model.config
    history: list[tuple[int, float, float]] = []
    step = start_step
    steps_per_epoch = max(1, (len(dataset) + settings.batch_size - 1) // settings.batch_size)
    epoch = start_step // steps_per_epoch
    if dev_score is None and dev is not None and len(dev) > 0:
        dev_score = lambda m: held_out_loss(m, dev)
    select = settings.eval_every > 0 and dev_score is not None
    best_loss = float("inf")
    best_state = None
    evals_since_best = 0
    stop = False
    while step < settings.total_steps and not stop:
        order = list(range(len(dataset)))
        random.Random(settings.seed * 100003 + epoch).shuffle(order)
        torch.manual_seed(settings.seed * 100003 + epoch)
        for lo in range(0, len(order), settings.batch_size):
            if step >= settings.total_steps:
                break
            batch_examples = [dataset.examples[i] for i in order[lo: lo + settings.batch_size]]
            batch = make_batch(batch_examples, cfg.sinusoid_base, cfg.torch_dtype)
            loss = train_step(model, optimizer, scheduler, batch, settings.clip_norm)
            step += 1
            if step % settings.log_every == 0 or step == settings.total_steps:
                history.append((step, loss, scheduler.get_last_lr()[0]))
            if select and (step % settings.eval_every == 0
                           or step == settings.total_steps):
                dev_loss = dev_score(model)
                model.train()
                if dev_loss < best_loss:
                    best_loss = dev_loss
                    best_state = {k: v.detach().clone()
                                  for k, v in model.state_dict().items()}
                    evals_since_best = 0
                else:
                    evals_since_best += 1
                if best_loss <= 0.0 or (settings.patience > 0
                                        and evals_since_best >= settings.patience):
                    stop = True
                    break
        epoch += 1
    if select and best_state is not None:
        model.load_state_dict(best_state)
    return history, optimizer, scheduler


def token_accuracy(model: TransformerModel, dataset: Dataset,
                   batch_size: int = 256) -> float:
    """Teacher-forced next-token accuracy, PAD positions excluded."""
    model.eval()
    cfg = model.config
    correct = 0
    total = 0
    with torch.no_grad():
        for lo in range(0, len(dataset), batch_size):
            examples = dataset.examples[lo: lo + batch_size]
            src, tgt_in, tgt_out, bases = make_batch(examples, cfg.sinusoid_base,
                                                     cfg.torch_dtype)
            pred = model(src, tgt_in, bases).argmax(dim=-1)
            mask = tgt_out != PAD_ID
            correct += int((pred[mask] == tgt_out[mask]).sum())
            total += int(mask.sum())
    return correct / total if total else 0.0


def held_out_loss(model: TransformerModel, dataset: Dataset,
                  batch_size: int = 256) -> float:
    model.eval()
    cfg = model.config
    losses = []
    with torch.no_grad():
        for lo in range(0, len(dataset), batch_size):
            examples = dataset.examples[lo: lo + batch_size]
            batch = make_batch(examples, cfg.sinusoid_base, cfg.torch_dtype)
            src, tgt_in, tgt_out, bases = batch
            losses.append(float(sequence_loss(model(src, tgt_in, bases), tgt_out,
                                              cfg.label_smoothing)))
    return sum(losses) / len(losses) if losses else 0.0
