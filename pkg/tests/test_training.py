import logging

import numpy as np
import pytest

from maptone import dsp, synth, tensor as T, training
from maptone.model import Discriminator, ModelConfig, Translator
from maptone.synth import Sample, SyntheticCorpusSpec, generate_synthetic_corpus
from maptone.tensor import Tensor, grad_check, make_rng
from maptone.training import (TrainConfig, augment_H, augment_audio, gan_losses,
                              mmd_loss, mse_loss, total_translator_loss, train)

SMALL_SPEC = SyntheticCorpusSpec(n_subjects=2, n_repetitions=2,
                                 width_range=(600, 1400), nmf_iters=40)


@pytest.fixture(scope="module")
def small_corpus():
    return generate_synthetic_corpus(SMALL_SPEC, make_rng(42), keep_waveforms=False)


class TestMseLoss:
    def test_identical(self):
        g = make_rng(0).random((64, 64))
        assert mse_loss(Tensor(g), g).item() == pytest.approx(0.0)

    def test_uniform_offset(self):
        g = make_rng(1).random((64, 64))
        assert mse_loss(Tensor(g + 0.1), g).item() == pytest.approx(0.01)

    def test_matches_elementwise_oracle(self):
        rng = make_rng(2)
        a, b = rng.random((64, 64)), rng.random((64, 64))
        oracle = sum((a[i, j] - b[i, j]) ** 2 for i in range(64)
                     for j in range(64)) / 4096
        assert mse_loss(Tensor(a), b).item() == pytest.approx(oracle, abs=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(T.ShapeError, match="mse_loss"):
            mse_loss(Tensor(np.zeros((64, 64))), np.zeros((32, 32)))


def kernel_sum_oracle(x, y, bandwidths):
    """Direct double-loop paired MMD^2 with the same kernel definition."""
    from scipy.spatial.distance import pdist
    pooled = np.concatenate([x, y])
    med = max(np.median(pdist(pooled, "sqeuclidean")), 1e-12)

    def k(u, v):
        d2 = np.sum((u - v) ** 2)
        return np.mean([np.exp(-bw * d2 / med) for bw in bandwidths])

    m = len(x)
    total = 0.0
    for i in range(m):
        for j in range(m):
            if i == j:
                continue
            total += k(x[i], x[j]) + k(y[i], y[j]) - k(x[i], y[j]) - k(x[j], y[i])
    return total / (m * (m - 1))


class TestMmdLoss:
    def test_identical_sets_zero(self):
        x = make_rng(3).standard_normal((6, 256))
        val = mmd_loss(Tensor(x), Tensor(x.copy()), True).item()
        assert abs(val) < 1e-9

    def test_different_utterance_exactly_zero(self):
        rng = make_rng(4)
        x, y = rng.standard_normal((5, 256)), rng.standard_normal((5, 256))
        out = mmd_loss(Tensor(x), Tensor(y), False)
        assert out.item() == 0.0

    def test_separated_clouds_exceed_one(self):
        rng = make_rng(5)
        dim = 4
        x = 5.0 + 0.1 * rng.standard_normal((50, dim))
        y = -5.0 + 0.1 * rng.standard_normal((50, dim))
        val = mmd_loss(Tensor(x), Tensor(y), True).item()
        assert val > 1.0
        assert val == pytest.approx(kernel_sum_oracle(x, y, (1, 2, 4, 8)), rel=1e-9)

    def test_matches_oracle_on_random_sets(self):
        rng = make_rng(6)
        x, y = rng.standard_normal((7, 10)), rng.standard_normal((7, 10)) + 0.5
        val = mmd_loss(Tensor(x), Tensor(y), True).item()
        assert val == pytest.approx(kernel_sum_oracle(x, y, (1, 2, 4, 8)), abs=1e-12)

    def test_small_sets_return_zero_with_warning(self, caplog):
        rng = make_rng(7)
        with caplog.at_level(logging.WARNING):
            val = mmd_loss(Tensor(rng.standard_normal(256)),
                           Tensor(rng.standard_normal(256)), True)
        assert val.item() == 0.0
        assert any("fewer than 2" in r.message for r in caplog.records)

    def test_gradient_flows_to_inputs(self):
        rng = make_rng(8)
        x = Tensor(rng.standard_normal((4, 8)), requires_grad=True)
        y = Tensor(rng.standard_normal((4, 8)) + 1.0, requires_grad=True)
        err = grad_check(lambda: mmd_loss(x, y, True), [x, y], max_coords=4,
                         rng=make_rng(9))
        assert err < 1e-4


class ConstantDisc:
    """Stub discriminator producing a fixed probability."""

    def __init__(self, p):
        self.p = p

    def forward(self, grids):
        n = grids.shape[0] if len(grids.shape) == 3 else 1
        return T.sigmoid(Tensor(np.full(n, 0.0))) * (2 * self.p)  # p via scaling


class TestGanLosses:
    def test_indifferent_discriminator_values(self):
        # zero-weight discriminator outputs exactly 0.5 everywhere
        disc = Discriminator(ModelConfig(), make_rng(10))
        for p in disc.parameters().values():
            p.data[:] = 0.0
        rng = make_rng(11)
        real = Tensor(rng.random((2, 64, 64)))
        fake = Tensor(rng.random((2, 64, 64)))
        loss_d, loss_t = gan_losses(disc, real, fake)
        assert loss_d.item() == pytest.approx(2 * np.log(2), abs=1e-9)
        assert loss_t.item() == pytest.approx(np.log(2), abs=1e-9)

    def test_perfect_discriminator_limit(self):
        class Perfect:
            def __init__(self):
                self.call = 0

            def forward(self, grids):
                n = grids.shape[0]
                self.call += 1
                # first call sees real, later calls see fake
                p = 1.0 - 1e-9 if self.call == 1 else 1e-9
                return Tensor(np.full(n, p))

        rng = make_rng(12)
        loss_d, _ = gan_losses(Perfect(), Tensor(rng.random((2, 64, 64))),
                               Tensor(rng.random((2, 64, 64))))
        assert abs(loss_d.item()) < 1e-6

    def test_generator_gradient_vs_finite_differences(self):
        rng = make_rng(13)
        disc = Discriminator(ModelConfig(), make_rng(14))
        seed_grid = rng.random((1, 64, 64))
        w = Tensor(rng.standard_normal((1, 1)) * 0.1 + 1.0, requires_grad=True)

        def f():
            fake = Tensor(seed_grid) * w.reshape(1, 1, 1)
            return training.generator_gan_loss(disc, fake)

        assert grad_check(f, [w], max_coords=1, rng=make_rng(15)) < 1e-4

    def test_literal_formula_flag(self):
        disc = Discriminator(ModelConfig(), make_rng(16))
        for p in disc.parameters().values():
            p.data[:] = 0.0
        fake = Tensor(make_rng(17).random((2, 64, 64)))
        literal = training.generator_gan_loss(disc, fake, literal=True)
        assert literal.item() == pytest.approx(np.log(2), abs=1e-9)

    def test_real_samples_never_reach_generator_loss(self):
        # generator term is computed from fake only; the real batch has no
        # gradient path into it
        disc = Discriminator(ModelConfig(), make_rng(18))
        fake = Tensor(make_rng(19).random((1, 64, 64)), requires_grad=True)
        loss_t = training.generator_gan_loss(disc, fake)
        T.backward(loss_t)
        assert fake.grad is not None


class TestTotalLoss:
    def test_reduces_to_mse(self):
        cfg = TrainConfig(beta=0.0, lambda_gan=0.0)
        val = total_translator_loss(Tensor(0.42), Tensor(9.0), Tensor(7.0), cfg)
        assert val.item() == pytest.approx(0.42)

    def test_weighted_sum_arithmetic(self):
        cfg = TrainConfig(beta=0.75, lambda_gan=1.0)
        val = total_translator_loss(Tensor(0.5), Tensor(0.2), Tensor(0.7), cfg)
        assert val.item() == pytest.approx(1.35)

    def test_matches_sum_of_parts(self):
        rng = make_rng(20)
        for _ in range(5):
            a, b, c = rng.random(3)
            beta, lam = rng.random(2)
            cfg = TrainConfig(beta=float(beta), lambda_gan=float(lam))
            val = total_translator_loss(Tensor(a), Tensor(b), Tensor(c), cfg)
            assert val.item() == pytest.approx(a + beta * b + lam * c, abs=1e-10)


class TestAugmentation:
    def test_width_rounds_to_lower_hundred(self):
        h = make_rng(21).random((20, 9882))
        out = augment_H(h, make_rng(0))
        assert out.shape == (20, 9800)

    def test_exact_hundred_unchanged(self):
        h = make_rng(22).random((20, 5700))
        out = augment_H(h, make_rng(1))
        assert out.shape == (20, 5700)
        assert np.array_equal(out, h)

    def test_survivors_are_a_subsequence(self):
        h = np.arange(20 * 437, dtype=float).reshape(20, 437)
        out = augment_H(h, make_rng(2))
        assert out.shape == (20, 400)
        cols = out[0]
        assert np.all(np.diff(cols) > 0)          # order preserved
        assert set(cols) <= set(h[0])             # columns taken from input

    def test_below_hundred_rejected(self):
        with pytest.raises(ValueError, match="100"):
            augment_H(np.ones((20, 60)), make_rng(3))

    def test_audio_offsets_span_slack(self):
        wav = dsp.Waveform(np.zeros(24175), 10500)
        crops = augment_audio(wav, 21000, 100)
        assert len(crops) == 100
        assert all(c.samples.size == 21000 for c in crops)

    def test_audio_exact_length_all_identical(self):
        rng = make_rng(23)
        wav = dsp.Waveform(rng.standard_normal(21000) * 0.1, 10500)
        crops = augment_audio(wav, 21000, 5)
        for c in crops:
            assert np.array_equal(c.samples, wav.samples)

    def test_crops_are_contiguous_slices(self):
        n = 23000
        wav = dsp.Waveform(np.arange(n, dtype=float) / n, 10500)
        crops = augment_audio(wav, 21000, 10)
        offsets = np.round(np.linspace(0, n - 21000, 10)).astype(int)
        for off, c in zip(offsets, crops):
            assert np.array_equal(c.samples, wav.samples[off:off + 21000])

    def test_too_short_rejected(self):
        with pytest.raises(ValueError, match="21000"):
            augment_audio(dsp.Waveform(np.zeros(100), 10500), 21000, 3)


class TestSyntheticCorpus:
    def test_deterministic_bitwise(self):
        a = generate_synthetic_corpus(SMALL_SPEC, make_rng(9), keep_waveforms=True)
        b = generate_synthetic_corpus(SMALL_SPEC, make_rng(9), keep_waveforms=True)
        for s1, s2 in zip(a, b):
            assert s1.h.tobytes() == s2.h.tobytes()
            assert s1.mel.grid.tobytes() == s2.mel.grid.tobytes()
            assert s1.waveform.samples.tobytes() == s2.waveform.samples.tobytes()

    def test_counts_and_width_bounds(self, small_corpus):
        assert len(small_corpus) == 8    # 2 subjects x 2 utterances x 2 reps
        for s in small_corpus:
            assert s.h.shape[0] == 20
            assert SMALL_SPEC.width_range[0] <= s.h.shape[1] <= SMALL_SPEC.width_range[1]
            assert np.all(s.h >= 0)

    def test_same_utterance_pairs_correlate_higher(self, small_corpus):
        import itertools
        same, cross = [], []
        for a, b in itertools.combinations(small_corpus, 2):
            c = dsp.corr2d(a.mel.grid, b.mel.grid)
            (same if a.utterance_id == b.utterance_id else cross).append(c)
        assert np.mean(same) > np.mean(cross)


class TestTrainLoop:
    def test_loss_decreases_on_tiny_overfit(self, small_corpus):
        cfg = TrainConfig(lr_t=1.0, momentum=0.9, beta=0.0, lambda_gan=0.0,
                          epochs=30, batch=2, seed=0, augment=False, eval_cap=2)
        res = train(small_corpus[:2], cfg, max_steps=30)
        first, last = res.history[0], res.history[-1]
        assert last["loss_mse"] < first["loss_mse"]
        assert last["train_corr2d"] > first["train_corr2d"]

    def test_full_objective_short_run_no_nan(self, small_corpus):
        cfg = TrainConfig(lr_t=0.5, lr_d=1e-3, momentum=0.9, beta=0.75,
                          lambda_gan=1.0, epochs=3, batch=4, seed=0,
                          augment=False, eval_cap=4)
        res = train(small_corpus, cfg)
        for row in res.history:
            for key in ("loss_mse", "loss_mmd", "loss_gan_t", "loss_gan_d"):
                assert np.isfinite(row[key])

    def test_discriminator_step_leaves_translator_untouched(self, small_corpus):
        from maptone.training import discriminator_loss
        with T.precision(np.float32):
            translator = Translator(ModelConfig(), seed=0)
            disc = Discriminator(ModelConfig(), make_rng(1))
            out, _ = translator.forward(small_corpus[0].h.astype(np.float32))
            fake = T.stack([out])
            real = Tensor(np.stack([small_corpus[0].mel.grid]))
            before = {k: v.data.tobytes() for k, v in translator.parameters().items()}
            loss_d = discriminator_loss(disc, real, fake)
            T.backward(loss_d)
            T.SGD(list(disc.parameters().values()), 1e-3, 0.5).step()
            after = {k: v.data.tobytes() for k, v in translator.parameters().items()}
            assert before == after
            # and the detach means no gradient reached translator params
            assert all(p.grad is None for p in translator.parameters().values())

    def test_translator_step_leaves_discriminator_untouched(self, small_corpus):
        with T.precision(np.float32):
            translator = Translator(ModelConfig(), seed=0)
            disc = Discriminator(ModelConfig(), make_rng(1))
            out, _ = translator.forward(small_corpus[0].h.astype(np.float32))
            fake = T.stack([out])
            before = {k: v.data.tobytes() for k, v in disc.parameters().items()}
            loss_t = training.generator_gan_loss(disc, fake)
            T.backward(loss_t)
            T.SGD(list(translator.parameters().values()), 1e-3, 0.5).step()
            after = {k: v.data.tobytes() for k, v in disc.parameters().items()}
            assert before == after

    def test_reproducible_histories(self, small_corpus):
        cfg = TrainConfig(lr_t=0.5, momentum=0.9, beta=0.75, lambda_gan=1.0,
                          epochs=2, batch=4, seed=7, augment=False, eval_cap=4)
        h1 = train(small_corpus, cfg).history
        h2 = train(small_corpus, cfg).history
        assert h1 == h2

    def test_nan_abort_diagnostics(self, small_corpus):
        cfg = TrainConfig(lr_t=1e12, momentum=0.99, beta=0.0, lambda_gan=0.0,
                          epochs=50, batch=4, seed=0, augment=False, eval_cap=2)
        with pytest.raises(training.TrainingError, match="epoch"):
            train(small_corpus, cfg, max_steps=50)

    def test_mmd_reads_only_utterance_channels(self):
        # gradient of the batch MMD w.r.t. subject channels must be zero
        with T.precision(np.float64):
            translator = Translator(ModelConfig(), seed=0)
            rng = make_rng(2)
            latents = [Tensor(rng.standard_normal((8, 8, 20)), requires_grad=True)
                       for _ in range(4)]
            sam = [Sample("s0", "u", None, None) for _ in range(4)]
            loss = training._batch_mmd(translator, latents, sam, TrainConfig())
            T.backward(loss)
            for lat in latents:
                assert lat.grad is not None
                assert np.all(lat.grad[:, :, 4:] == 0.0)
                assert np.any(lat.grad[:, :, :4] != 0.0)


class TestEvaluate:
    def test_ground_truth_scores_one(self, small_corpus, tmp_path):
        class Oracle:
            def translate(self, h):
                for s in small_corpus:
                    if s.h is h:
                        return s.mel.grid
                raise AssertionError

        csv_path = tmp_path / "eval.csv"
        scores = training.evaluate(Oracle(), small_corpus, fold=3, seed=5,
                                   csv_path=csv_path)
        assert scores["corr2d_mean"] == pytest.approx(1.0)
        lines = csv_path.read_text().splitlines()
        assert len(lines) == 1 + len(small_corpus)
        assert lines[0].startswith("fold,seed,sample")
        assert lines[1].split(",")[:2] == ["3", "5"]

    def test_permuted_baseline_reported_separately(self, small_corpus):
        translator = Translator(ModelConfig(), seed=0)
        scores = training.evaluate(translator, small_corpus[:4])
        assert scores["corr2d_permuted_mean"] is not None
        assert scores["corr2d_permuted_mean"] != scores["corr2d_mean"]

    def test_leave_one_out_excludes_test_subject(self, small_corpus, monkeypatch):
        seen = []

        def fake_train(train_set, cfg, **kwargs):
            seen.append({s.subject_id for s in train_set})
            state = {k: v.data.copy()
                     for k, v in Translator(ModelConfig(), seed=cfg.seed)
                     .parameters().items()}
            return training.TrainResult(history=[], best_corr=0.0,
                                        best_state=state)

        monkeypatch.setattr(training, "train", fake_train)
        result = training.leave_one_out(small_corpus, TrainConfig(epochs=1),
                                        seeds=(0,))
        subjects = sorted({s.subject_id for s in small_corpus})
        assert len(result["rows"]) == len(subjects)
        for fold, train_subjects in enumerate(seen):
            assert subjects[fold] not in train_subjects
