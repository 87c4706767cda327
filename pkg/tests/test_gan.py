import math

import pytest
import torch
import torch.nn as nn

from fingersynth.errors import CapabilityError, ConfigurationError, TrainingDivergedError
from fingersynth.gan import (
    GanLossConfig,
    NoiseGenerator,
    PatchCritic,
    build_critic,
    build_generator,
    gradient_penalty,
    load_wgan,
    original_gan_loss,
    save_wgan,
    train_wgan_gp,
    wgan_generator_loss,
    wgan_gp_critic_loss,
    wgan_loss,
)


class LinearCritic(nn.Module):
    """D(x) = w . x + b over flattened pixels."""

    def __init__(self, n_pixels, w=None, b=0.0):
        super().__init__()
        self.lin = nn.Linear(n_pixels, 1)
        with torch.no_grad():
            if w is not None:
                self.lin.weight.copy_(torch.as_tensor(w, dtype=torch.float32).view(1, -1))
            self.lin.bias.fill_(b)

    def forward(self, x):
        return self.lin(x.flatten(1)).squeeze(1)


def rng(seed=0):
    return torch.Generator().manual_seed(seed)


class TestGradientPenalty:
    def test_unit_slope_critic_zero_penalty(self):
        n = 16
        w = torch.full((n,), 1.0 / math.sqrt(n))  # unit L2 norm
        D = LinearCritic(n, w=w)
        gp = gradient_penalty(D, torch.randn(8, 1, 4, 4), torch.randn(8, 1, 4, 4), rng())
        assert float(gp.detach()) < 1e-10

    def test_constant_slope_two(self):
        D = LinearCritic(1, w=[2.0])
        gp = gradient_penalty(D, torch.randn(8, 1, 1, 1), torch.randn(8, 1, 1, 1), rng())
        assert float(gp.detach()) == pytest.approx(1.0, abs=1e-6)

    def test_zero_critic_penalty_is_one(self):
        gp = gradient_penalty(lambda x: torch.zeros(x.shape[0]), torch.randn(4, 1, 2, 2), torch.randn(4, 1, 2, 2), rng())
        assert float(gp.detach()) == pytest.approx(1.0, abs=0)

    def test_non_tensor_critic_rejected(self):
        with pytest.raises(CapabilityError):
            gradient_penalty(lambda x: [0.0] * x.shape[0], torch.randn(2, 1, 2, 2), torch.randn(2, 1, 2, 2), rng())

    def test_shape_mismatch_rejected(self):
        D = LinearCritic(4)
        with pytest.raises(ValueError):
            gradient_penalty(D, torch.randn(2, 1, 2, 2), torch.randn(2, 1, 3, 3), rng())

    def test_finite_difference_gradient_wrt_critic_weight(self):
        # 1-pixel critic: the penalty's gradient in the weight, by central differences
        D = LinearCritic(1, w=[1.7], b=0.3).double()
        real, fake = torch.randn(16, 1, 1, 1).double(), torch.randn(16, 1, 1, 1).double()

        gp = gradient_penalty(D, real, fake, rng(5))
        D.zero_grad()
        gp.backward()
        autograd = D.lin.weight.grad.item()

        h = 1e-6
        with torch.no_grad():
            orig = D.lin.weight.item()
        vals = []
        for delta in (h, -h):
            with torch.no_grad():
                D.lin.weight.fill_(orig + delta)
            vals.append(float(gradient_penalty(D, real, fake, rng(5)).detach()))
        fd = (vals[0] - vals[1]) / (2 * h)
        assert abs(fd - autograd) / max(abs(fd), abs(autograd)) < 1e-3


class TestLosses:
    def test_zero_critic_gives_lambda(self):
        D = LinearCritic(4, w=[0.0] * 4, b=0.0)
        G = lambda z: torch.zeros(z.shape[0], 1, 2, 2)
        cfg = GanLossConfig(lambda_gp=10.0)
        loss = wgan_gp_critic_loss(D, G, torch.randn(8, 1, 2, 2), torch.randn(8, 3), cfg, rng())
        assert float(loss.detach()) == pytest.approx(10.0, abs=1e-5)

    def test_mean_critic_arithmetic(self):
        D = lambda x: x.flatten(1).mean(1)
        G = lambda z: torch.zeros(z.shape[0], 1, 2, 2)
        cfg = GanLossConfig(lambda_gp=0.0)
        loss = wgan_gp_critic_loss(D, G, torch.ones(8, 1, 2, 2), torch.randn(8, 3), cfg, rng())
        assert float(loss.detach()) == pytest.approx(-1.0, abs=1e-6)

    def test_generator_loss_zero_critic(self):
        D = lambda x: torch.zeros(x.shape[0])
        G = lambda z: torch.randn(z.shape[0], 1, 2, 2)
        assert float(wgan_generator_loss(D, G, torch.randn(4, 3))) == 0.0

    def test_generator_loss_arithmetic(self):
        D = lambda x: x.flatten(1).mean(1)
        G = lambda z: torch.ones(z.shape[0], 1, 2, 2)
        assert float(wgan_generator_loss(D, G, torch.randn(4, 3))) == pytest.approx(-1.0, abs=1e-6)

    def test_generator_loss_sign_convention(self):
        # lowering the loss must raise the frozen critic's score on fakes
        D = lambda x: x.flatten(1).mean(1)
        z = torch.randn(16, 3)
        low = wgan_generator_loss(D, lambda z: torch.full((z.shape[0], 1, 2, 2), 0.9), z)
        high = wgan_generator_loss(D, lambda z: torch.full((z.shape[0], 1, 2, 2), 0.1), z)
        assert float(low) < float(high)

    def test_antisymmetry_without_penalty(self):
        D = LinearCritic(4)
        with torch.no_grad():
            D.lin.weight.copy_(torch.randn(1, 4))
        real, fake_img = torch.randn(8, 1, 2, 2), torch.randn(8, 1, 2, 2)
        G = lambda z: fake_img
        Gswap = lambda z: real
        cfg = GanLossConfig(lambda_gp=0.0)
        a = wgan_gp_critic_loss(D, G, real, torch.zeros(8, 1), cfg, rng())
        b = wgan_gp_critic_loss(D, Gswap, fake_img, torch.zeros(8, 1), cfg, rng())
        assert float(a.detach()) == pytest.approx(-float(b.detach()), abs=1e-6)

    def test_original_gan_loss_half_critic(self):
        D = lambda x: torch.full((x.shape[0],), 0.5)
        G = lambda z: torch.zeros(z.shape[0], 1, 2, 2)
        loss = original_gan_loss(D, G, torch.randn(4, 1, 2, 2), torch.randn(4, 3))
        assert float(loss.detach()) == pytest.approx(2 * math.log(0.5), rel=1e-6)

    def test_wgan_loss_formula(self):
        D = lambda x: x.flatten(1).sum(1)
        G = lambda z: torch.zeros(z.shape[0], 1, 1, 1)
        loss = wgan_loss(D, G, torch.full((4, 1, 1, 1), 2.0), torch.randn(4, 3))
        assert float(loss.detach()) == pytest.approx(2.0, abs=1e-6)


class TestCriticLossAudit:
    def test_term_by_term_against_scripted_evaluation(self):
        # independent oracle: evaluate each term of the penalized critic
        # objective by hand for an analytic linear critic
        torch.manual_seed(3)
        n_px = 4
        w = torch.randn(n_px).double()
        b = 0.42
        D = LinearCritic(n_px, w=w, b=b).double()
        real = torch.randn(8, 1, 2, 2).double()
        fake_img = torch.randn(8, 1, 2, 2).double()
        G = lambda z: fake_img
        cfg = GanLossConfig(lambda_gp=10.0)

        got = float(wgan_gp_critic_loss(D, G, real, torch.zeros(8, 1), cfg, rng(11)))

        term_fake = sum(float(w @ fake_img[i].flatten().double()) + b for i in range(8)) / 8
        term_real = sum(float(w @ real[i].flatten().double()) + b for i in range(8)) / 8
        # gradient of a linear critic is w everywhere, for any mixing coefficient
        _ = torch.rand(8, 1, 1, 1, generator=rng(11))  # same draw the implementation makes
        penalty = (float(w.norm()) - 1.0) ** 2
        expected = term_fake - term_real + 10.0 * penalty
        assert got == pytest.approx(expected, abs=1e-6)


class TestNetworks:
    def test_generator_output_shape_and_range(self):
        G = build_generator(latent_dim=16, out_size=32, base=8, seed=0)
        out = G(torch.randn(5, 16))
        assert out.shape == (5, 1, 32, 32)
        assert out.min() >= -1.0 and out.max() <= 1.0

    def test_generator_bad_latent_rejected(self):
        G = build_generator(latent_dim=16, out_size=32, base=8, seed=0)
        with pytest.raises(ValueError):
            G(torch.randn(5, 8))

    def test_generator_size_must_divide(self):
        with pytest.raises(ConfigurationError):
            NoiseGenerator(16, out_size=50, base=8)

    def test_critic_scalar_scores(self):
        D = build_critic(base=8, seed=0)
        assert D(torch.randn(5, 1, 32, 32)).shape == (5,)

    def test_critic_paper_layout(self):
        D = build_critic(base=64, seed=0)
        convs = [blk[0] for blk in D.blocks]
        assert [c.out_channels for c in convs] == [64, 128, 256, 512]
        assert all(c.kernel_size == (4, 4) and c.stride == (2, 2) for c in convs)
        assert not any(isinstance(m, nn.InstanceNorm2d) for m in D.blocks[0])
        assert all(any(isinstance(m, nn.InstanceNorm2d) for m in blk) for blk in list(D.blocks)[1:])
        slopes = [m.negative_slope for m in D.modules() if isinstance(m, nn.LeakyReLU)]
        assert slopes and all(s == pytest.approx(0.2) for s in slopes)


class TestTraining:
    def _toy(self):
        torch.manual_seed(0)
        images = torch.rand(48, 1, 32, 32) * 2 - 1
        G = build_generator(latent_dim=8, out_size=32, base=4, seed=1)
        D = build_critic(base=4, seed=2)
        return images, G, D

    def test_two_epoch_run_logs(self):
        images, G, D = self._toy()
        cfg = GanLossConfig(lambda_gp=10.0, n_critic=2, learning_rate=1e-4)
        log = train_wgan_gp(images, G, D, cfg, epochs=2, seed=0, batch_size=16)
        assert [r["epoch"] for r in log] == [1, 2]
        for r in log:
            assert math.isfinite(r["critic_loss"])
            assert math.isfinite(r["generator_loss"])
            assert math.isfinite(r["penalty_mean"])

    def test_empty_dataset_rejected(self):
        _, G, D = self._toy()
        with pytest.raises(ConfigurationError):
            train_wgan_gp(torch.zeros(0, 1, 32, 32), G, D, GanLossConfig(), epochs=1, seed=0)

    def test_divergence_aborts(self):
        images, G, D = self._toy()
        with torch.no_grad():
            D.head.weight.fill_(float("inf"))
        with pytest.raises(TrainingDivergedError):
            train_wgan_gp(images, G, D, GanLossConfig(), epochs=1, seed=0, batch_size=16)

    def test_resume_matches_unbroken_run(self, tmp_path):
        # oracle: the unbroken 3-epoch reference run
        images, G, D = self._toy()
        cfg = GanLossConfig(lambda_gp=10.0, n_critic=2, learning_rate=1e-3)
        full_log = train_wgan_gp(images, G, D, cfg, epochs=3, seed=9, batch_size=16)

        images2, G2, D2 = self._toy()
        path = tmp_path / "wgan.fsck"

        def snapshot(epoch, record, handles):
            if epoch == 2:
                save_wgan(path, handles["G"], handles["D"], handles["opt_g"], handles["opt_d"], epoch=epoch)

        train_wgan_gp(images2, G2, D2, cfg, epochs=2, seed=9, batch_size=16, on_epoch=snapshot)

        G3, D3, resume = load_wgan(path)
        assert resume["epoch"] == 2
        resumed = train_wgan_gp(
            images2, G3, D3, cfg, epochs=3, seed=9, batch_size=16,
            start_epoch=3, resume_state=resume,
        )
        assert resumed[0]["epoch"] == 3
        for key in ("critic_loss", "generator_loss", "penalty_mean"):
            assert abs(resumed[0][key] - full_log[2][key]) < 1e-4


def test_config_validation():
    with pytest.raises(ConfigurationError):
        GanLossConfig(lambda_gp=-1.0)
    with pytest.raises(ConfigurationError):
        GanLossConfig(n_critic=0)
    with pytest.raises(ConfigurationError):
        GanLossConfig(lambda_gp=float("nan"))
