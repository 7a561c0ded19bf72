import json
import math

import numpy as np
import pytest

from vcrn import numerics as nx
from vcrn.corpus import generate_synthetic_corpus
from vcrn.dictionary import encode_dictionary, kmeans_fit, pool_frames
from vcrn.errors import BadMagicError, ConfigError, DimensionError, TrainingError, TruncatedPayloadError
from vcrn.model import DICTIONARY_PARAM, VCRN, ModelConfig
from vcrn.numerics import ParameterStore
from vcrn.training import (
    AdamState, TrainConfig, adam_step, build_vocab_from_captions, cross_entropy_loss, decode_checkpoint,
    encode_checkpoint, gradcheck, load_checkpoint, make_caption_data, train,
)


def tiny_setup(num_videos=6, strategy="GATE", use_dictionary=True, epochs=2, fixed=True, seed=0, M=3):
    corpus = generate_synthetic_corpus(seed, num_videos, 3, num_frames=4, d_a=4, d_m=4)
    tc = TrainConfig(learning_rate=1e-2, batch_size=4, epochs=epochs, seed=seed, fixed_dictionary=fixed,
                     min_occurrences=0)
    vocab = build_vocab_from_captions(corpus.captions, tc)
    mc = ModelConfig(vocab_size=len(vocab), d_in=8, num_centers=M, d_model=8, d_hid=8, heads=2,
                     strategy=strategy, use_dictionary=use_dictionary)
    dictionary = kmeans_fit(pool_frames(corpus.videos), M, seed=seed) if use_dictionary else None
    return corpus, tc, mc, vocab, dictionary


class TestCrossEntropy:
    def test_perfect_predictions(self):
        probs = [np.eye(5)[[1, 3]]]
        assert cross_entropy_loss(probs, [np.array([1, 3])]) == 0.0

    def test_uniform(self):
        V, T = 7, 4
        probs = [np.full((T, V), 1 / V), np.full((T, V), 1 / V)]
        targets = [np.array([4, 5, 6, 2]), np.array([1, 2, 3, 4])]
        assert cross_entropy_loss(probs, targets) == pytest.approx(T * math.log(V), abs=1e-12)

    def test_all_pad(self):
        assert cross_entropy_loss([np.full((3, 5), 0.2)], [np.zeros(3, dtype=int)]) == 0.0

    def test_floor(self):
        assert cross_entropy_loss([np.array([[1.0, 0.0]])], [np.array([1])]) == pytest.approx(-math.log(1e-12))

    def test_matches_model_loss_reduction(self):
        corpus, tc, mc, vocab, d = tiny_setup()
        model = VCRN(mc, d.centers)
        data = make_caption_data(corpus.videos, corpus.captions, vocab)
        feats, tokens = data.features[data.video_index[:3]], data.tokens[:3]
        encoded = model.encode(feats)
        state = model.initial_state(3)
        probs = []
        for t in range(tokens.shape[1] - 1):
            out = model.step(encoded, tokens[:, t], state)
            state = out.state
            probs.append(out.probs)
        stacked = np.stack(probs, axis=1)
        expected = cross_entropy_loss(list(stacked), list(tokens[:, 1:]))
        assert float(model.loss(feats, tokens).values) == pytest.approx(expected, abs=1e-10)


def reference_adam(theta, grads, lr, b1, b2, eps):
    """Published update rule, step by step, scalars only."""
    m = v = 0.0
    out = []
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        theta = theta - lr * m_hat / (math.sqrt(v_hat) + eps)
        out.append(theta)
    return out


class TestAdam:
    def store_with(self, values):
        store = ParameterStore()
        store.add("w", values)
        return store

    def test_zero_gradient(self):
        store = self.store_with([1.0, -2.0])
        store["w"].grad = np.zeros(2)
        adam_step(store, AdamState(), TrainConfig(learning_rate=0.1))
        np.testing.assert_array_equal(store["w"].values, [1.0, -2.0])

    def test_first_step(self):
        store = self.store_with(0.0)
        store["w"].grad = np.array(1.0)
        adam_step(store, AdamState(), TrainConfig(learning_rate=1e-3))
        assert float(store["w"].values) == pytest.approx(-1e-3, rel=1e-7)

    def test_matches_reference_over_ten_steps(self):
        rng = np.random.default_rng(0)
        grads = rng.normal(size=(10, 3))
        store = self.store_with([0.5, -1.0, 2.0])
        cfg = TrainConfig(learning_rate=3e-2, betas=(0.8, 0.99), eps=1e-6, grad_clip_norm=0.0)
        state = AdamState()
        history = []
        for g in grads:
            store["w"].grad = g.copy()
            adam_step(store, state, cfg)
            history.append(store["w"].values.copy())
        for k, start in enumerate([0.5, -1.0, 2.0]):
            expected = reference_adam(start, grads[:, k], 3e-2, 0.8, 0.99, 1e-6)
            np.testing.assert_allclose([h[k] for h in history], expected, atol=1e-10, rtol=0)

    def test_global_norm_clipping(self):
        store = ParameterStore()
        a, b = store.add("a", [0.0]), store.add("b", [0.0])
        a.grad, b.grad = np.array([30.0]), np.array([40.0])
        cfg = TrainConfig(learning_rate=1.0, betas=(0.0, 0.0), eps=0.0, grad_clip_norm=5.0)
        norm = adam_step(store, AdamState(), cfg)
        assert norm == pytest.approx(50.0)
        # with beta=0 the step is g / |g| per coordinate: clipping keeps the sign
        np.testing.assert_allclose([a.values[0], b.values[0]], [-1.0, -1.0])

    def test_nan_names_parameter(self):
        store = self.store_with([1.0])
        store.add("good", [1.0]).grad = np.zeros(1)
        store["w"].grad = np.array([np.nan])
        with pytest.raises(TrainingError, match="'w'"):
            adam_step(store, AdamState(), TrainConfig())

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            TrainConfig(learning_rate=0.0)
        with pytest.raises(ConfigError):
            TrainConfig(batch_size=0)


class TestTrain:
    def test_smoke_one_epoch_two_examples(self):
        corpus, tc, mc, vocab, d = tiny_setup(num_videos=3)
        tc.epochs = 1
        result = train(corpus.videos[:2], corpus.captions[:2], mc, tc, dictionary=d, vocab=vocab)
        assert len(result.log) == 1 and math.isfinite(result.log[0]["train_loss"])

    def test_log_records(self, tmp_path):
        corpus, tc, mc, vocab, d = tiny_setup()
        train(corpus.videos[:4], corpus.captions[:4], mc, tc, dictionary=d, vocab=vocab,
              val_videos=corpus.videos[4:], val_captions=corpus.captions[4:], log_path=tmp_path / "log.jsonl")
        lines = [json.loads(line) for line in (tmp_path / "log.jsonl").read_text().splitlines()]
        assert [r["epoch"] for r in lines] == [1, 2]
        for r in lines:
            assert set(r) == {"epoch", "train_loss", "val_loss", "val_token_acc", "wall_time_s"}
            assert 0.0 <= r["val_token_acc"] <= 1.0

    def test_reproducible(self, tmp_path):
        runs = []
        for name in ("a", "b"):
            corpus, tc, mc, vocab, d = tiny_setup(epochs=3, fixed=False)
            train(corpus.videos, corpus.captions, mc, tc, dictionary=d, vocab=vocab,
                  checkpoint_path=tmp_path / f"{name}.ckpt", log_path=tmp_path / f"{name}.log")
            log = [json.loads(line) for line in (tmp_path / f"{name}.log").read_text().splitlines()]
            runs.append(([{k: v for k, v in r.items() if k != "wall_time_s"} for r in log],
                         (tmp_path / f"{name}.ckpt").read_bytes()))
        assert runs[0] == runs[1]

    def test_fixed_dictionary_untouched(self):
        corpus, tc, mc, vocab, d = tiny_setup(epochs=3, fixed=True)
        before = encode_dictionary(d)
        result = train(corpus.videos, corpus.captions, mc, tc, dictionary=d, vocab=vocab)
        assert encode_dictionary(d) == before
        assert result.model.store[DICTIONARY_PARAM].values.astype("<f4").tobytes() == d.centers.astype("<f4").tobytes()

    def test_joint_dictionary_changes(self):
        corpus, tc, mc, vocab, d = tiny_setup(epochs=3, fixed=False)
        result = train(corpus.videos, corpus.captions, mc, tc, dictionary=d, vocab=vocab)
        assert not np.array_equal(result.model.store[DICTIONARY_PARAM].values, d.centers)
        assert np.abs(result.model.store[DICTIONARY_PARAM].grad).sum() > 0

    def test_joint_dictionary_without_fit(self):
        corpus, tc, mc, vocab, _ = tiny_setup(fixed=False)
        train(corpus.videos, corpus.captions, mc, tc, dictionary=None, vocab=vocab)

    def test_fixed_mode_requires_dictionary(self):
        corpus, tc, mc, vocab, _ = tiny_setup()
        with pytest.raises(ConfigError):
            train(corpus.videos, corpus.captions, mc, tc, dictionary=None, vocab=vocab)

    def test_dimension_mismatch_caught_before_training(self):
        corpus, tc, mc, vocab, d = tiny_setup()
        mc.d_in = 10
        with pytest.raises(DimensionError):
            train(corpus.videos, corpus.captions, mc, tc, dictionary=d, vocab=vocab)
        mc.d_in = 8
        other = kmeans_fit(pool_frames(corpus.videos), 2)
        with pytest.raises(DimensionError):
            train(corpus.videos, corpus.captions, mc, tc, dictionary=other, vocab=vocab)

    @pytest.mark.parametrize("use_dictionary,strategy", [(False, "ADD"), (True, "ADD"), (True, "MLP"), (True, "MHA")])
    def test_variants_train(self, use_dictionary, strategy):
        corpus, tc, mc, vocab, d = tiny_setup(strategy=strategy, use_dictionary=use_dictionary)
        result = train(corpus.videos, corpus.captions, mc, tc, dictionary=d, vocab=vocab)
        assert all(math.isfinite(r["train_loss"]) for r in result.log)

    def test_loss_invariant_to_batch_order(self):
        corpus, tc, mc, vocab, d = tiny_setup()
        model = VCRN(mc, d.centers)
        data = make_caption_data(corpus.videos, corpus.captions, vocab)
        feats, tokens = data.features[data.video_index], data.tokens
        perm = np.random.default_rng(1).permutation(len(tokens))
        a = float(model.loss(feats, tokens).values)
        b = float(model.loss(feats[perm], tokens[perm]).values)
        assert a == pytest.approx(b, abs=1e-12)


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        corpus, tc, mc, vocab, d = tiny_setup(epochs=1)
        result = train(corpus.videos, corpus.captions, mc, tc, dictionary=d, vocab=vocab,
                       checkpoint_path=tmp_path / "m.ckpt")
        ckpt = load_checkpoint(tmp_path / "m.ckpt")
        assert ckpt.vocab == vocab
        assert ckpt.model.config == mc
        assert ckpt.model.fixed_dictionary
        for name, t in result.model.store.items():
            np.testing.assert_array_equal(ckpt.model.store[name].values, t.values.astype(np.float32))
        assert encode_checkpoint(ckpt.model, ckpt.vocab, ckpt.seed, ckpt.best_loss) == (tmp_path / "m.ckpt").read_bytes()

    def test_corruption(self):
        corpus, tc, mc, vocab, d = tiny_setup()
        buf = encode_checkpoint(VCRN(mc, d.centers), vocab)
        with pytest.raises(BadMagicError):
            decode_checkpoint(b"XXXXXXXX" + buf[8:])
        with pytest.raises(TruncatedPayloadError):
            decode_checkpoint(buf[:-1])


SMALL = dict(vocab_size=6, d_in=4, num_centers=2, d_model=4, d_hid=4, heads=2, dropout_p=0.0, init_range=0.5)


class TestGradcheck:
    def test_lists_every_parameter_once(self):
        report = gradcheck(ModelConfig(**SMALL), caption_len=2)
        model = VCRN(ModelConfig(**SMALL), fixed_dictionary=False)
        assert sorted(report.errors) == model.store.names()
        assert DICTIONARY_PARAM in report.errors
        assert report.passed

    def test_corrupted_rule_is_caught(self, monkeypatch):
        def wrong_tanh(x):
            out = np.tanh(x.values)
            return nx._record(out, (x,), lambda g: (g * (1.0 - out),))

        monkeypatch.setattr(nx, "tanh", wrong_tanh)
        report = gradcheck(ModelConfig(**SMALL), caption_len=2)
        assert report.worst_error > 1e-2
        assert not report.passed

    def test_rejects_single_precision(self):
        with pytest.raises(ConfigError):
            gradcheck(ModelConfig(**{**SMALL, "dtype": "float32"}))
