import csv

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from speech2sing.data import UnpairedExample, make_synthetic_pair
from speech2sing.net import ModelConfig, reconstruction_loss
from speech2sing.train import (
    CHECKPOINT_VERSION,
    METRIC_FIELDS,
    BEGANState,
    ConfigError,
    TrainConfig,
    Trainer,
    TrainingError,
    diversity_ratio_estimate,
    generator_from_checkpoint,
    load_checkpoint,
    loss_discriminator,
    loss_generator,
    train_loop,
    update_k,
)

from oracles import scalar_losses

SMALL = ModelConfig.reduced()


def pairs(n=3, seed=0):
    rng = np.random.default_rng(seed)
    return [make_synthetic_pair(rng, n_notes=4, frames_per_note=8, n_mels=8) for _ in range(n)]


def small_config(**kw):
    base = dict(steps=10, batch_size=2, segment_frames=16, checkpoint_every=5, random_resample=True)
    base.update(kw)
    return TrainConfig(**base)


class TestLosses:
    def test_discriminator_example(self):
        assert loss_discriminator(1.0, 0.5, 0.2) == pytest.approx(0.9)

    def test_generator_example(self):
        y = np.zeros((2, 2))
        y_hat = np.full((2, 2), 0.5)
        assert loss_generator(0.75, y, y_hat, 0.5) == pytest.approx(1.0)

    def test_perfect_everything(self):
        y = np.ones((3, 4))
        assert loss_generator(0.0, y, y.copy(), 0.5) == 0.0
        assert loss_discriminator(0.0, 0.0, 0.5) == 0.0

    def test_second_example(self):
        # L(Y)=0.8, L(G)=0.5, k=0.2 -> 0.7 ; L(G)=0.3 with |Y-G|=0.4 at beta 0.5 -> 0.5
        assert loss_discriminator(0.8, 0.5, 0.2) == pytest.approx(0.7)
        assert loss_generator(0.3, np.zeros(4), np.full(4, 0.4), 0.5) == pytest.approx(0.5)

    def test_unpaired_is_fake_loss(self):
        assert loss_generator(0.3, None, None, 0.5) == 0.3

    def test_negative_rejected(self):
        with pytest.raises(ValueError):
            loss_discriminator(-0.1, 0.5, 0.2)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            loss_generator(0.1, np.zeros(3), np.zeros(4), 0.5)

    @given(st.floats(0, 10), st.floats(0, 10), st.floats(0, 1), st.floats(0, 5), st.floats(0, 1))
    def test_matches_scalar_oracle(self, l_real, l_fake, k, beta, gamma):
        y = np.zeros(4)
        y_hat = np.full(4, 0.25)
        want_d, want_g, want_k = scalar_losses(l_real, l_fake, k, beta, 0.25, gamma, 0.01)
        assert loss_discriminator(l_real, l_fake, k) == pytest.approx(want_d)
        assert loss_generator(l_fake, y, y_hat, beta) == pytest.approx(want_g)
        assert update_k(BEGANState(k, gamma, 0.01), l_real, l_fake).k == pytest.approx(want_k)


class TestUpdateK:
    def test_stays_at_zero(self):
        assert update_k(BEGANState(0.0, 0.0, 0.01), 1.0, 0.5).k == 0.0

    def test_interior(self):
        state = update_k(BEGANState(0.5, 0.5, 0.01), 1.0, 0.2)
        assert state.k == pytest.approx(0.503)
        assert state.step == 1

    def test_upper_clamp(self):
        assert update_k(BEGANState(0.999, 1.0, 0.5), 1.0, 0.0).k == 1.0

    @given(st.floats(0, 1), st.floats(0, 1), st.floats(1e-4, 1), st.floats(0, 100), st.floats(0, 100))
    def test_bounded(self, k, gamma, lam, l_real, l_fake):
        assert 0.0 <= update_k(BEGANState(k, gamma, lam), l_real, l_fake).k <= 1.0

    def test_invalid_state(self):
        with pytest.raises(ValueError):
            BEGANState(k=1.5)
        with pytest.raises(ValueError):
            BEGANState(lambda_k=0)


class TestDiversityRatio:
    def test_equal(self):
        assert diversity_ratio_estimate([1.0, 1.0], [1.0, 1.0]) == 1.0

    def test_zero_fake(self):
        assert diversity_ratio_estimate([0.5, 0.7], [0.0, 0.0]) == 0.0

    def test_value(self):
        assert diversity_ratio_estimate([1.0, 1.0], [0.2, 0.4]) == pytest.approx(0.3)

    def test_zero_real(self):
        with pytest.raises(ZeroDivisionError):
            diversity_ratio_estimate([0.0, 0.0], [0.1, 0.2])


class TestConfig:
    def test_lr_schedule(self):
        cfg = TrainConfig()
        assert cfg.lr_at(0) == 0.001
        assert cfg.lr_at(99) == 0.001
        assert cfg.lr_at(100) == pytest.approx(0.00099)
        assert cfg.lr_at(250) == pytest.approx(0.001 * 0.99**2)

    def test_defaults(self):
        cfg = TrainConfig()
        assert (cfg.batch_size, cfg.steps, cfg.lambda_k, cfg.gamma, cfg.beta, cfg.k0) == (32, 20000, 0.01, 0.0, 0.5, 0.0)

    @pytest.mark.parametrize("kw", [dict(lr=0), dict(segment_frames=12), dict(gamma=1.5), dict(beta=-1),
                                    dict(batch_size=0), dict(k0=2)])
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            TrainConfig(**kw)


class TestTrainer:
    def test_empty_paired(self):
        with pytest.raises(ConfigError, match="paired"):
            Trainer(small_config(), [], model_config=SMALL)

    def test_batch_shapes(self):
        trainer = Trainer(small_config(), pairs(), model_config=SMALL)
        batch = trainer.sample_batch(True)
        assert batch.x.shape == (2, 8, 16)
        assert batch.contour.shape == (2, 128, 16)
        assert torch.all(batch.contour.sum(dim=1) == 1)

    def test_short_examples_padded(self):
        trainer = Trainer(small_config(segment_frames=64), pairs(), model_config=SMALL)
        batch = trainer.sample_batch(True)
        assert batch.y.shape[-1] == 64
        assert torch.all(batch.contour[:, 0, 32:] == 1)

    def test_gamma_zero_keeps_k_zero(self):
        trainer = Trainer(small_config(), pairs(), model_config=SMALL)
        rows = trainer.run()
        assert len(rows) == 10
        assert all(r["k"] == 0.0 for r in rows)

    def test_k_moves_with_gamma(self):
        trainer = Trainer(small_config(gamma=0.5, lambda_k=0.5), pairs(), model_config=SMALL)
        rows = trainer.run(until=3)
        assert any(r["k"] > 0 for r in rows)

    def test_unpaired_schedule(self):
        un = [UnpairedExample(p.singing, p.contour) for p in pairs(2, seed=3)]
        trainer = Trainer(small_config(random_resample=False), pairs(), un, model_config=SMALL)
        assert [trainer.is_paired_step(s) for s in range(1, 5)] == [True, False, True, False]
        batch = trainer.sample_batch(False)
        assert not batch.paired
        # unpaired batches feed the singing itself as generator input
        torch.testing.assert_close(batch.x, batch.y)

    def test_unpaired_generator_loss_equals_fake_loss(self):
        un = [UnpairedExample(p.singing, p.contour) for p in pairs(2, seed=3)]
        trainer = Trainer(small_config(), pairs(), un, model_config=SMALL)
        batch = trainer.sample_batch(False)
        with torch.no_grad():
            y_hat = trainer.generator(batch.x, batch.contour)
            expected = reconstruction_loss(trainer.discriminator(y_hat), y_hat).item()
        row = trainer.train_step(batch)
        assert row["L_G"] == pytest.approx(expected, rel=1e-6)
        assert row["L_fake"] == pytest.approx(expected, rel=1e-6)

    def test_gradient_isolation(self):
        # Adam's first step moves each parameter by about -lr * sign(grad); compare
        # against the gradient of L_G alone for G and of L_D alone for D.
        trainer = Trainer(small_config(lr=1e-4), pairs(), model_config=SMALL)
        gen, disc = trainer.generator, trainer.discriminator
        batch = trainer.sample_batch(True)
        y_hat = gen(batch.x, batch.contour)
        l_g = loss_generator(reconstruction_loss(disc(y_hat), y_hat), batch.y, y_hat, 0.5)
        g_grads = torch.autograd.grad(l_g, list(gen.parameters()))
        fake = y_hat.detach()
        l_d = reconstruction_loss(disc(batch.y), batch.y) - 0.0 * reconstruction_loss(disc(fake), fake)
        d_grads = torch.autograd.grad(l_d, list(disc.parameters()))
        before_g = [p.detach().clone() for p in gen.parameters()]
        before_d = [p.detach().clone() for p in disc.parameters()]
        trainer.train_step(batch)
        for params, before, grads in ((gen.parameters(), before_g, g_grads), (disc.parameters(), before_d, d_grads)):
            for p, b, g in zip(params, before, grads):
                big = g.abs() > 1e-6
                moved = (p.detach() - b)[big]
                assert torch.all(torch.sign(moved) == -torch.sign(g[big]))

    def test_non_finite_raises(self):
        trainer = Trainer(small_config(), pairs(), model_config=SMALL)
        batch = trainer.sample_batch(True)
        batch.y[0, 0, 0] = float("inf")
        with pytest.raises(TrainingError, match="non-finite"):
            trainer.train_step(batch)

    def test_deterministic(self):
        a = Trainer(small_config(), pairs(), model_config=SMALL).run(until=4)
        b = Trainer(small_config(), pairs(), model_config=SMALL).run(until=4)
        assert a == b


class TestCheckpoint:
    def test_resume_matches_uninterrupted(self, tmp_path):
        full = Trainer(small_config(), pairs(), model_config=SMALL).run()
        first = Trainer(small_config(), pairs(), model_config=SMALL)
        first.run(until=5, checkpoint_dir=tmp_path)
        resumed = Trainer(small_config(), pairs(), model_config=SMALL)
        resumed.load_checkpoint(tmp_path / "step_0000005.pt")
        assert resumed.step == 5
        assert resumed.run() == full[5:]

    def test_round_trip_bit_exact(self, tmp_path):
        trainer = Trainer(small_config(), pairs(), model_config=SMALL)
        trainer.run(until=2)
        path = trainer.save_checkpoint(tmp_path / "c.pt")
        ckpt = load_checkpoint(path)
        assert ckpt["format_version"] == CHECKPOINT_VERSION
        gen, _ = generator_from_checkpoint(path)
        for a, b in zip(gen.state_dict().values(), trainer.generator.state_dict().values()):
            assert torch.equal(a, b)

    def test_config_mismatch_names_keys(self, tmp_path):
        trainer = Trainer(small_config(), pairs(), model_config=SMALL)
        path = trainer.save_checkpoint(tmp_path / "c.pt")
        other = Trainer(small_config(), pairs(), model_config=ModelConfig.reduced().__class__(
            n_mels=8, pitch_embed=8, pitch_widths=(8, 4, 2), decoder_widths=(16, 8, 8), disc_widths=(16, 16, 8),
            leaky_slope=0.1))
        with pytest.raises(ConfigError, match="leaky_slope"):
            other.load_checkpoint(path)

    def test_bad_version(self, tmp_path):
        torch.save({"format_version": 99}, tmp_path / "x.pt")
        with pytest.raises(ConfigError, match="version"):
            load_checkpoint(tmp_path / "x.pt")

    def test_train_loop_outputs(self, tmp_path):
        metrics = tmp_path / "m.csv"
        train_loop(small_config(steps=6), pairs(), checkpoint_dir=tmp_path / "ck", metrics_path=metrics,
                   model_config=SMALL)
        assert (tmp_path / "ck" / "final.pt").exists()
        assert (tmp_path / "ck" / "step_0000005.pt").exists()
        rows = list(csv.reader(metrics.open()))
        assert tuple(rows[0]) == METRIC_FIELDS
        assert [int(r[0]) for r in rows[1:]] == list(range(1, 7))

    def test_resume_appends_metrics(self, tmp_path):
        metrics = tmp_path / "m.csv"
        train_loop(small_config(steps=5), pairs(), checkpoint_dir=tmp_path, metrics_path=metrics, model_config=SMALL)
        train_loop(small_config(steps=8), pairs(), checkpoint_dir=tmp_path, metrics_path=metrics,
                   resume=tmp_path / "final.pt", model_config=SMALL)
        rows = list(csv.reader(metrics.open()))
        assert [int(r[0]) for r in rows[1:]] == list(range(1, 9))
