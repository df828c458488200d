import math

import pytest
import torch

from tasksum.corpus import BOS_ID, ConfigError, EOS_ID, SynthSpec, synth_corpora
from tasksum.model import (
    DivergenceError,
    InvalidInputError,
    ModelConfig,
    PEMode,
    SINUSOIDAL,
    TransformerModel,
    grad_check,
    load_checkpoint,
    lrpe,
    make_optimizer,
    save_checkpoint,
    sequence_loss,
    sinusoidal_pe,
    train_step,
)
from tasksum.trainer import TrainSettings, make_batch, train


def tiny_config(**overrides):
    defaults = dict(src_vocab_size=20, tgt_vocab_size=20, d_model=16, n_heads=2,
                    n_layers_enc=1, n_layers_dec=1, d_ff=32, max_len=16,
                    dropout_rate=0.0, precision="float64", seed=0)
    defaults.update(overrides)
    return ModelConfig(**defaults)


def tiny_batch(vocab_size=20, n=4, src_len=6, tgt_len=5, seed=0, dtype=torch.float64):
    g = torch.Generator().manual_seed(seed)
    src = torch.randint(7, vocab_size, (n, src_len), generator=g)
    src[:, 0] = 4  # task token
    tgt = torch.randint(7, vocab_size, (n, tgt_len), generator=g)
    tgt_in = torch.cat([torch.full((n, 1), BOS_ID), tgt[:, :-1]], dim=1)
    tgt_out = tgt.clone()
    tgt_out[:, -1] = EOS_ID
    bases = torch.tensor([10000.0, 5.0, 10.0, 10000.0][:n], dtype=dtype)
    return src, tgt_in, tgt_out, bases


class TestPositionalEncodings:
    def test_position_zero(self):
        for d in (2, 8, 64):
            vec = sinusoidal_pe(0, d)
            assert vec[0::2] == [0.0] * (d // 2)
            assert vec[1::2] == [1.0] * (d // 2)
            assert lrpe(0, 7, d) == vec

    def test_sinusoidal_closed_form(self):
        assert sinusoidal_pe(1, 4) == pytest.approx(
            [0.841471, 0.540302, 0.010000, 0.999950], abs=1e-6)
        assert sinusoidal_pe(2, 2) == pytest.approx([0.909297, -0.416147], abs=1e-6)

    def test_lrpe_closed_form(self):
        assert lrpe(4, 4, 4) == pytest.approx(
            [-0.756802, -0.653644, 0.909297, -0.416147], abs=1e-6)

    def test_lrpe_degenerate_base(self):
        for pos in (0, 1, 5, 9):
            vec = lrpe(pos, 1, 6)
            assert vec[0::2] == pytest.approx([math.sin(pos)] * 3)
            assert vec[1::2] == pytest.approx([math.cos(pos)] * 3)

    def test_lrpe_equals_sinusoidal_at_base(self):
        for pos in range(0, 40, 7):
            assert lrpe(pos, 10000, 32) == sinusoidal_pe(pos, 32)

    def test_values_in_unit_interval(self):
        for pos in range(0, 101, 10):
            for L in (1, 5, 26, 100):
                assert all(-1.0 <= x <= 1.0 for x in lrpe(pos, L, 64))
            assert all(-1.0 <= x <= 1.0 for x in sinusoidal_pe(pos, 64))

    def test_periodicity(self):
        L, d = 5, 8
        for i in range(d // 2):
            period = 2 * math.pi * L ** (2 * i / d)
            k = max(1, round(37 / period))
            base = lrpe(0, L, d)
            # evaluate the i-th pair one whole number of periods later
            shifted_angle = (0 + k * period) / L ** (2 * i / d)
            assert math.sin(shifted_angle) == pytest.approx(base[2 * i], abs=1e-9)
            assert math.cos(shifted_angle) == pytest.approx(base[2 * i + 1], abs=1e-9)

    def test_odd_dimension_rejected(self):
        with pytest.raises(ConfigError):
            sinusoidal_pe(1, 3)
        with pytest.raises(ConfigError):
            lrpe(1, 5, 5)

    def test_invalid_length_rejected(self):
        with pytest.raises(ConfigError):
            lrpe(1, 0, 4)
        with pytest.raises(ConfigError):
            PEMode(0)


class TestModelConfig:
    def test_odd_d_model_rejected(self):
        with pytest.raises(ConfigError):
            tiny_config(d_model=15, n_heads=3)

    def test_heads_must_divide(self):
        with pytest.raises(ConfigError):
            tiny_config(d_model=16, n_heads=3)


class TestForward:
    def test_deterministic_without_dropout(self):
        model = TransformerModel(tiny_config())
        model.eval()
        src = [4, 8, 9]
        prefix = [BOS_ID, 10]
        a = model.logits_for(src, prefix, SINUSOIDAL)
        b = model.logits_for(src, prefix, SINUSOIDAL)
        assert torch.equal(a, b)

    def test_logit_shape_and_softmax(self):
        model = TransformerModel(tiny_config())
        model.eval()
        logits = model.logits_for([4, 8, 9, 10], [BOS_ID, 11, 12], SINUSOIDAL)
        assert logits.shape == (3, 20)
        probs = torch.softmax(logits, dim=-1)
        assert torch.allclose(probs.sum(-1), torch.ones(3, dtype=probs.dtype), atol=1e-6)

    def test_pe_mode_changes_logits(self):
        model = TransformerModel(tiny_config())
        model.eval()
        src = [5, 8, 9]
        prefix = [BOS_ID, 10, 11]
        a = model.logits_for(src, prefix, SINUSOIDAL)
        b = model.logits_for(src, prefix, PEMode(4))
        assert not torch.allclose(a, b)

    def test_out_of_range_id_rejected(self):
        model = TransformerModel(tiny_config())
        with pytest.raises(InvalidInputError):
            model.logits_for([4, 99], [BOS_ID], SINUSOIDAL)

    def test_length_overflow_rejected(self):
        model = TransformerModel(tiny_config(max_len=4))
        with pytest.raises(InvalidInputError):
            model.logits_for([4] + [8] * 10, [BOS_ID], SINUSOIDAL)

    def test_prefix_must_start_with_bos(self):
        model = TransformerModel(tiny_config())
        with pytest.raises(InvalidInputError):
            model.logits_for([4, 8], [8, 9], SINUSOIDAL)


class TestLoss:
    def test_one_hot_correct_tends_to_zero(self):
        targets = torch.tensor([[7, 8, 9]])
        logits = torch.full((1, 3, 10), -100.0, dtype=torch.float64)
        for i, t in enumerate(targets[0]):
            logits[0, i, t] = 100.0
        assert sequence_loss(logits, targets).item() == pytest.approx(0.0, abs=1e-9)

    def test_uniform_logits_give_log_vocab(self):
        vocab = 37
        logits = torch.zeros((1, 4, vocab), dtype=torch.float64)
        targets = torch.tensor([[7, 8, 9, 10]])
        assert sequence_loss(logits, targets).item() == pytest.approx(math.log(vocab))

    def test_smoothing_floor(self):
        targets = torch.tensor([[7]])
        logits = torch.full((1, 1, 10), -100.0, dtype=torch.float64)
        logits[0, 0, 7] = 100.0
        assert sequence_loss(logits, targets, label_smoothing=0.1).item() > 1.0

    def test_pad_positions_excluded(self):
        logits = torch.zeros((1, 2, 10), dtype=torch.float64)
        with_pad = sequence_loss(logits, torch.tensor([[7, 0]]))
        without = sequence_loss(logits[:, :1], torch.tensor([[7]]))
        assert with_pad.item() == pytest.approx(without.item())

    def test_shape_mismatch(self):
        with pytest.raises(InvalidInputError):
            sequence_loss(torch.zeros((1, 2, 10)), torch.tensor([[7, 8, 9]]))


class TestTrainStep:
    def test_zero_lr_is_noop(self):
        model = TransformerModel(tiny_config())
        opt = torch.optim.Adam(model.parameters(), lr=1.0)
        sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda s: 0.0)
        before = {n: p.clone() for n, p in model.named_parameters()}
        train_step(model, opt, sched, tiny_batch())
        for n, p in model.named_parameters():
            assert torch.equal(before[n], p)

    def test_overfit_single_example(self):
        model = TransformerModel(tiny_config())
        opt, sched = make_optimizer(model, warmup=20, lr_factor=0.3)
        batch = tiny_batch(n=1)
        losses = [train_step(model, opt, sched, batch) for _ in range(150)]
        after_warmup = losses[30:]
        drops = sum(b <= a + 1e-9 for a, b in zip(after_warmup, after_warmup[1:]))
        assert drops / (len(after_warmup) - 1) >= 0.9
        assert after_warmup[-1] < losses[0]

    def test_deterministic_loss_curve(self):
        curves = []
        for _ in range(2):
            model = TransformerModel(tiny_config())
            opt, sched = make_optimizer(model, warmup=20)
            batch = tiny_batch()
            curves.append([train_step(model, opt, sched, batch) for _ in range(10)])
        assert curves[0] == curves[1]

    def test_divergence_detected(self):
        model = TransformerModel(tiny_config())
        with torch.no_grad():
            model.out_proj.bias.fill_(float("nan"))
        opt, sched = make_optimizer(model)
        with pytest.raises(DivergenceError):
            train_step(model, opt, sched, tiny_batch())


class TestGradCheck:
    def test_full_model_matches_finite_differences(self):
        model = TransformerModel(tiny_config())
        err = grad_check(model, tiny_batch(), epsilon=1e-5, n_samples=200)
        assert err < 1e-4

    def test_embedding_group_alone(self):
        model = TransformerModel(tiny_config(tie_embeddings=False))
        src, tgt_in, tgt_out, bases = tiny_batch()

        def loss_value():
            return sequence_loss(model(src, tgt_in, bases), tgt_out,
                                 model.config.label_smoothing)

        model.zero_grad()
        loss_value().backward()
        emb = model.src_embed.weight
        grad = emb.grad.view(-1)
        flat = emb.view(-1)
        eps = 1e-5
        with torch.no_grad():
            for i in range(0, flat.numel(), flat.numel() // 40):
                orig = flat[i].item()
                flat[i] = orig + eps
                hi = loss_value().item()
                flat[i] = orig - eps
                lo = loss_value().item()
                flat[i] = orig
                numeric = (hi - lo) / (2 * eps)
                analytic = grad[i].item()
                denom = max(abs(numeric), abs(analytic))
                if denom > 1e-8:
                    assert abs(numeric - analytic) / denom < 1e-4

    def test_requires_float64(self):
        model = TransformerModel(tiny_config(precision="float32"))
        with pytest.raises(ConfigError):
            grad_check(model, tiny_batch(dtype=torch.float32))

    def test_requires_dropout_off(self):
        model = TransformerModel(tiny_config(dropout_rate=0.1))
        with pytest.raises(ConfigError):
            grad_check(model, tiny_batch())


class TestCheckpoint:
    def make_trained(self, tmp_path, steps=6):
        spec = SynthSpec(vocab_content_size=8, min_len=4, max_len=8,
                         n_pairs=(32, 32, 4))
        trans, monosum, _ = synth_corpora(spec)
        from tasksum.corpus import Dataset

        ds = Dataset(trans.examples + monosum.examples, "mix",
                     trans.src_vocab, trans.tgt_vocab)
        config = tiny_config(src_vocab_size=ds.src_vocab.size,
                             tgt_vocab_size=ds.src_vocab.size, max_len=32)
        model = TransformerModel(config)
        settings = TrainSettings(total_steps=steps, batch_size=16, warmup=10, seed=3)
        history, opt, sched = train(model, ds, settings)
        return model, opt, sched, ds, settings

    def test_round_trip_bitwise(self, tmp_path):
        model, opt, _, _, _ = self.make_trained(tmp_path)
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, model, opt, meta={"note": "test"})
        loaded, meta = load_checkpoint(path)
        assert meta["note"] == "test"
        for (n, a), (_, b) in zip(model.named_parameters(), loaded.named_parameters()):
            assert torch.equal(a, b), n

    def test_deterministic_bytes(self, tmp_path):
        model, opt, _, _, _ = self.make_trained(tmp_path)
        save_checkpoint(tmp_path / "a.ckpt", model, opt)
        save_checkpoint(tmp_path / "b.ckpt", model, opt)
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()

    def test_resume_is_bit_reproducible(self, tmp_path):
        # unbroken run: 4 epochs' worth of steps (8 per epoch here)
        model, opt, sched, ds, settings = self.make_trained(tmp_path, steps=4)
        path = tmp_path / "mid.ckpt"
        save_checkpoint(path, model, opt, meta={"sched_step": 4})
        import dataclasses

        full_settings = dataclasses.replace(settings, total_steps=8)
        train(model, ds, full_settings, optimizer=opt, scheduler=sched, start_step=4)

        resumed, opt2, sched2, meta = load_checkpoint(path, with_optimizer=True,
                                                      warmup=full_settings.warmup)
        train(resumed, ds, full_settings, optimizer=opt2, scheduler=sched2,
              start_step=4)
        for (n, a), (_, b) in zip(model.named_parameters(), resumed.named_parameters()):
            assert torch.equal(a, b), n
