import math
import pickle

import numpy as np
import pytest

from adaclust import tensor as T
from adaclust.cli import TINY_CONFIG, gradcheck_model
from adaclust.cluster1d import check_cluster_matrix
from adaclust.model import (
    BOS,
    EOS,
    PAD,
    CaptionerModel,
    ModelConfig,
    beam_decode,
    cross_entropy,
    generate,
    greedy_decode,
)
from adaclust.optim import Adam, step_decay_lr
from adaclust.scenes import make_samples
from adaclust.train import NonFiniteError, batch_loss, train_step
from adaclust.tensor import Tensor

TINY = ModelConfig(**TINY_CONFIG)


def tiny_model(seed=0, **overrides):
    cfg = dict(TINY_CONFIG, seed=seed)
    cfg.update(overrides)
    return CaptionerModel.init(ModelConfig(**cfg))


def feats_for(cfg, seed, batch=None):
    shape = (cfg.grid_h, cfg.grid_w, cfg.d_in)
    return np.random.default_rng(seed).normal(size=shape if batch is None else (batch,) + shape)


class TestConfig:
    def test_defaults(self):
        cfg = ModelConfig()
        assert (cfg.d, cfg.n_heads, cfg.d_ff, cfg.m_e, cfg.m_d) == (64, 4, 256, 3, 3)
        assert cfg.variant == "acf"

    @pytest.mark.parametrize("bad", [dict(d=10, n_heads=4), dict(m_e=0), dict(vocab_size=2),
                                     dict(cluster_mode="softer"), dict(dropout=1.0)])
    def test_invalid(self, bad):
        with pytest.raises(ValueError):
            ModelConfig(**bad)

    def test_dict_roundtrip_and_unknown_keys(self):
        cfg = ModelConfig(d=16, n_heads=2)
        assert ModelConfig.from_dict(cfg.to_dict()) == cfg
        with pytest.raises(ValueError):
            ModelConfig.from_dict({"width": 3})

    @pytest.mark.parametrize("name,flags", [("base", (False, False)), ("acf1", (True, False)),
                                            ("acf2", (False, True)), ("acf", (True, True))])
    def test_variants(self, name, flags):
        cfg = ModelConfig().with_variant(name)
        assert (cfg.encoder_cluster, cfg.decoder_cluster) == flags and cfg.variant == name


class TestModelShapes:
    def test_parameter_names_unique_and_count_pure(self):
        a, b = tiny_model(0), tiny_model(5)
        assert list(a.parameters()) == list(b.parameters())
        assert a.parameter_count() == b.parameter_count()
        assert all(p.name == n for n, p in a.parameters().items())

    def test_encode_shapes_and_trace(self):
        m = tiny_model(1)
        memory, trace = m.encode(feats_for(m.config, 1))
        assert memory.shape == (9, 8) and len(trace) == 2
        assert np.all(trace[1].data >= trace[0].data)

    def test_encode_rejects_wrong_grid(self):
        m = tiny_model(1)
        with pytest.raises(T.ShapeError):
            m.encode(np.zeros((4, 3, 8)))

    def test_single_layer_zero_scorers_closed_form(self):
        m = tiny_model(2, m_e=1)
        m.encoder[0].scorers.horizontal.weight.data[:] = 0
        m.encoder[0].scorers.horizontal.bias.data[:] = 0
        m.encoder[0].scorers.vertical.weight.data[:] = 0
        m.encoder[0].scorers.vertical.bias.data[:] = 0
        _, trace = m.encode(feats_for(m.config, 2))
        r, c = np.divmod(np.arange(9), 3)
        span = np.abs(r[:, None] - r[None, :]) + np.abs(c[:, None] - c[None, :])
        np.testing.assert_allclose(trace[0].data, 0.5 ** span, atol=1e-15)

    def test_logits_shape_and_causality(self):
        m = tiny_model(3)
        memory, _ = m.encode(feats_for(m.config, 3))
        tokens = np.array([BOS, 5, 9, 4])
        logits, trace = m.decode_teacher_forced(memory, tokens)
        assert logits.shape == (4, 21)
        for j in range(1, 4):
            changed = tokens.copy()
            changed[j] = 17
            other, _ = m.decode_teacher_forced(memory, changed)
            np.testing.assert_array_equal(other.data[:j], logits.data[:j])
        for c in trace:
            check_cluster_matrix(c.data)
        assert np.all(trace[1].data >= trace[0].data)

    def test_token_range(self):
        m = tiny_model(3)
        memory, _ = m.encode(feats_for(m.config, 3))
        with pytest.raises(IndexError):
            m.decode_teacher_forced(memory, [BOS, 21])
        with pytest.raises(ValueError):
            m.decode_teacher_forced(memory, [BOS] * 5)

    def test_base_variant_has_no_trace(self):
        m = tiny_model(4, encoder_cluster=False, decoder_cluster=False)
        memory, enc_trace = m.encode(feats_for(m.config, 4))
        _, dec_trace = m.decode_teacher_forced(memory, [BOS, 4])
        assert enc_trace == [] and dec_trace == []


class TestCrossEntropy:
    def test_uniform(self):
        loss = cross_entropy(Tensor(np.zeros((3, 16))), [4, 5, 6]).item()
        assert loss == pytest.approx(math.log(16), abs=1e-12)

    def test_saturated(self):
        logits = np.zeros((2, 5))
        logits[0, 3] = logits[1, 1] = 40.0
        assert cross_entropy(Tensor(logits), [3, 1]).item() < 1e-12

    def test_random_recomputation(self):
        rng = np.random.default_rng(0)
        logits = rng.normal(size=(2, 6, 7))
        targets = rng.integers(3, 7, size=(2, 6))
        targets[0, 4:] = PAD
        expected = 0.0
        for b in range(2):
            terms = []
            for t in range(6):
                if targets[b, t] == PAD:
                    continue
                row = logits[b, t]
                terms.append(-(row[targets[b, t]] - math.log(sum(math.exp(v) for v in row))))
            expected += sum(terms) / len(terms) / 2
        assert abs(cross_entropy(Tensor(logits), targets).item() - expected) <= 1e-12

    def test_all_pad_rejected(self):
        with pytest.raises(ValueError):
            cross_entropy(Tensor(np.zeros((2, 4))), [PAD, PAD])

    def test_length_mismatch(self):
        with pytest.raises(T.ShapeError):
            cross_entropy(Tensor(np.zeros((2, 4))), [3])


def test_model_gradients_tiny_config():
    report = gradcheck_model(TINY, fraction=0.1, seed=3)
    assert report.coords_checked > 0
    assert report.passed(1e-4), report.worst


class TestGeneration:
    def _forced(self, token):
        m = tiny_model(6)
        m.out_proj.weight.data[:] = 0.0
        m.out_proj.bias.data[:] = 0.0
        m.out_proj.bias.data[token] = 10.0
        return m

    def test_constant_token_hits_cap(self):
        m = self._forced(7)
        out = generate(m, feats_for(m.config, 0))
        assert out == [7] * m.config.max_caption_len
        assert beam_decode(m, feats_for(m.config, 0), 3) == [7] * m.config.max_caption_len

    def test_forced_eos_is_empty(self):
        m = self._forced(EOS)
        assert generate(m, feats_for(m.config, 0)) == []
        assert generate(m, feats_for(m.config, 0), "beam", 4) == []

    @pytest.mark.parametrize("seed", range(20))
    def test_beam_one_is_greedy(self, seed):
        m = tiny_model(seed, max_caption_len=6)
        f = feats_for(m.config, seed)
        assert beam_decode(m, f, 1) == generate(m, f)

    def test_batched_greedy_matches_single(self):
        m = tiny_model(7, max_caption_len=6)
        feats = feats_for(m.config, 7, batch=3)
        assert greedy_decode(m, feats) == [generate(m, f) for f in feats]

    def test_unknown_strategy(self):
        m = tiny_model(0)
        with pytest.raises(ValueError):
            generate(m, feats_for(m.config, 0), "sample")
        with pytest.raises(ValueError):
            beam_decode(m, feats_for(m.config, 0), 0)


def _toy_model(seed=0, **overrides):
    return CaptionerModel.init(ModelConfig(d=8, n_heads=2, m_e=2, m_d=2, seed=seed, **overrides))


class TestTraining:
    def test_first_loss_is_pre_update(self):
        m = _toy_model()
        samples = make_samples(0, 4)
        before = batch_loss(m, samples).item()
        assert train_step(m, samples, Adam(lr=1e-3)) == before
        assert batch_loss(m, samples).item() != before

    def test_bit_identical_runs(self):
        def curve():
            m = _toy_model(1)
            opt = Adam(lr=1e-3)
            samples = make_samples(1, 4)
            return [train_step(m, samples, opt) for _ in range(3)]

        assert curve() == curve()

    def test_empty_batch(self):
        with pytest.raises(ValueError):
            train_step(_toy_model(), [], Adam())

    def test_non_finite_names_tensor(self):
        m = _toy_model()
        m.parameters()["out_proj.bias"].data[4] = np.nan
        with pytest.raises(NonFiniteError, match="out_proj.bias"):
            train_step(m, make_samples(0, 2), Adam())

    def test_dropout_masks_repeat_per_step(self):
        samples = make_samples(2, 3)
        m = _toy_model(2, dropout=0.2)
        first = batch_loss(m, samples, m.dropout(5)).item()
        assert batch_loss(m, samples, m.dropout(5)).item() == first
        assert batch_loss(m, samples, m.dropout(6)).item() != first
        assert batch_loss(m, samples).item() == batch_loss(_toy_model(2), samples).item()
        assert _toy_model(2).dropout(5) is None

    def test_dropout_training_is_bit_identical(self):
        def curve():
            m = _toy_model(1, dropout=0.1)
            opt = Adam(lr=1e-3)
            return [train_step(m, make_samples(1, 4), opt) for _ in range(3)]

        assert curve() == curve()

    def test_single_sample_overfit(self):
        m = _toy_model(0)
        sample = make_samples(0, 1)
        opt = Adam(lr=1e-2)
        for _ in range(200):
            train_step(m, sample, opt)
        assert batch_loss(m, sample).item() < 0.01


class TestOptimizer:
    def test_first_adam_step_is_lr_times_sign(self):
        p = Tensor(np.array([1.0, -2.0, 0.5]), requires_grad=True)
        p.grad = np.array([0.3, -4.0, 1e-3])
        Adam(lr=0.1).step({"p": p})
        np.testing.assert_allclose(p.data, [0.9, -1.9, 0.4], atol=1e-6)

    def test_params_without_grad_untouched(self):
        p = Tensor(np.ones(2), requires_grad=True)
        opt = Adam()
        opt.step({"p": p})
        assert np.array_equal(p.data, np.ones(2)) and "p" not in opt.m

    def test_step_decay(self):
        assert [step_decay_lr(1.0, e, 0.8, 5) for e in (0, 4, 5, 10)] == [1.0, 1.0, 0.8, 0.8 ** 2]

    def test_state_pickles(self):
        opt = Adam(lr=0.5, step_count=3)
        assert pickle.loads(pickle.dumps(opt)) == opt
