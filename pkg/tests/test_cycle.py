import math

import pytest
import torch
import torch.nn as nn

from fingersynth.cycle import (
    CycleLossConfig,
    CycleModelSet,
    ResnetGenerator,
    build_cycle_models,
    cycle_consistency_loss,
    cycle_full_objective,
    identity_loss,
    load_cycle_set,
    lr_at_epoch,
    save_cycle_set,
    train_cycle_wgan_gp,
    translate,
)
from fingersynth.errors import ConfigurationError, TrainingDivergedError
from fingersynth.gan import PatchCritic


def rng(seed=0):
    return torch.Generator().manual_seed(seed)


identity = lambda x: x


class TestLrSchedule:
    def test_constant_phase(self):
        for epoch in (1, 50, 100):
            assert lr_at_epoch(epoch, 2e-4, 100, 100) == 2e-4

    def test_midpoint_of_decay(self):
        # closed form: 2e-4 * (1 - 50/100) = 1e-4
        assert lr_at_epoch(150, 2e-4, 100, 100) == pytest.approx(1e-4, rel=1e-12)

    def test_reaches_zero_and_stays(self):
        assert lr_at_epoch(200, 2e-4, 100, 100) == 0.0
        assert lr_at_epoch(500, 2e-4, 100, 100) == 0.0

    def test_scaled_toy_schedule(self):
        assert lr_at_epoch(30, 2e-4, 20, 20) == pytest.approx(2e-4 * 0.5)


class TestCycleLoss:
    def test_identity_generators_zero(self):
        a, b = torch.rand(3, 1, 4, 4), torch.rand(5, 1, 4, 4)
        assert float(cycle_consistency_loss(identity, identity, a, b)) == 0.0

    def test_exact_inverse_pair(self):
        g_ab = lambda x: x + 1
        g_ba = lambda y: y - 1
        a, b = torch.rand(2, 1, 1, 1), torch.rand(2, 1, 1, 1)
        assert float(cycle_consistency_loss(g_ab, g_ba, a, b)) == pytest.approx(0.0, abs=1e-7)

    def test_hand_evaluated_round_trips(self):
        # oracle: |1 - 2| from A->B->A plus |1 - 2| from B->A->B
        g_ab = lambda x: 2 * x
        g_ba = lambda y: y
        ones = torch.ones(1, 1, 1, 1)
        assert float(cycle_consistency_loss(g_ab, g_ba, ones, ones)) == pytest.approx(2.0)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            cycle_consistency_loss(identity, identity, torch.rand(2, 1, 4, 4), torch.rand(2, 1, 8, 8))

    def test_nonnegative_and_zero_iff_exact(self):
        g_ab = lambda x: x + 0.25
        g_ba = identity
        a, b = torch.rand(4, 1, 2, 2), torch.rand(4, 1, 2, 2)
        val = float(cycle_consistency_loss(g_ab, g_ba, a, b))
        assert val > 0.0


class TestIdentityLoss:
    def test_identity_generators_zero(self):
        a, b = torch.rand(3, 1, 4, 4), torch.rand(5, 1, 4, 4)
        assert float(identity_loss(identity, identity, a, b)) == 0.0

    def test_offset_arithmetic(self):
        g_ab = lambda y: y + 0.5
        b = torch.rand(4, 1, 1, 1)
        a = torch.rand(4, 1, 1, 1)
        assert float(identity_loss(g_ab, identity, a, b)) == pytest.approx(0.5, rel=1e-6)

    def test_term_by_term_against_scripted_evaluation(self):
        # oracle: evaluate both mean-absolute terms with explicit python loops
        torch.manual_seed(4)
        conv_ab = nn.Conv2d(1, 1, 3, padding=1)
        conv_ba = nn.Conv2d(1, 1, 3, padding=1)
        a, b = torch.randn(3, 1, 4, 4), torch.randn(2, 1, 4, 4)
        with torch.no_grad():
            got = float(identity_loss(conv_ab, conv_ba, a, b))
            term_b = sum(float((conv_ab(b[i : i + 1]) - b[i : i + 1]).abs().sum()) for i in range(2)) / (2 * 16)
            term_a = sum(float((conv_ba(a[i : i + 1]) - a[i : i + 1]).abs().sum()) for i in range(3)) / (3 * 16)
        assert got == pytest.approx(term_b + term_a, abs=1e-6)


class ZeroCritic(nn.Module):
    def forward(self, x):
        return torch.zeros(x.shape[0])


class TestFullObjective:
    def test_identity_generators_zero_critics(self):
        models = CycleModelSet(g_ab=identity, g_ba=identity, d_a=ZeroCritic(), d_b=ZeroCritic())
        cfg = CycleLossConfig(lambda_gp=10.0)
        a, b = torch.rand(4, 1, 4, 4), torch.rand(4, 1, 4, 4)
        total, parts = cycle_full_objective(models, a, b, cfg, rng())
        assert float(total.detach()) == pytest.approx(20.0, abs=1e-5)
        assert parts["cycle"] == pytest.approx(0.0, abs=1e-7)
        assert parts["identity"] == pytest.approx(0.0, abs=1e-7)

    def test_zero_weights_leave_pure_critic_terms(self):
        class MeanCritic(nn.Module):
            def forward(self, x):
                return x.flatten(1).mean(1)

        models = CycleModelSet(g_ab=lambda x: x * 0, g_ba=lambda x: x * 0, d_a=MeanCritic(), d_b=MeanCritic())
        cfg = CycleLossConfig(lambda_cycle=0.0, lambda_identity=0.0, lambda_gp=0.0)
        a = torch.ones(4, 1, 2, 2)
        b = torch.full((4, 1, 2, 2), 2.0)
        total, parts = cycle_full_objective(models, a, b, cfg, rng())
        # adv_a: E[D_a(0)] - E[D_a(a)] = -1 ; adv_b: 0 - 2 = -2
        assert parts["adv_a"] == pytest.approx(-1.0, abs=1e-6)
        assert parts["adv_b"] == pytest.approx(-2.0, abs=1e-6)
        assert float(total.detach()) == pytest.approx(-3.0, abs=1e-6)

    def test_paper_default_weights(self):
        cfg = CycleLossConfig()
        assert cfg.lambda_cycle == 10.0
        assert cfg.lambda_identity == 0.5
        assert cfg.lambda_gp == 10.0
        assert cfg.learning_rate == 2e-4
        assert cfg.beta1 == 0.5
        assert cfg.batch_size == 1

    def test_total_equals_breakdown_sum(self):
        torch.manual_seed(1)
        models = build_cycle_models(base=2, n_blocks=1, critic_base=2, seed=1)
        a, b = torch.rand(2, 1, 32, 32) * 2 - 1, torch.rand(2, 1, 32, 32) * 2 - 1
        total, parts = cycle_full_objective(models, a, b, CycleLossConfig(), rng(3))
        assert float(total.detach()) == pytest.approx(sum(parts.values()), abs=1e-6)

    def test_invalid_weights_rejected(self):
        with pytest.raises(ConfigurationError):
            CycleLossConfig(lambda_cycle=-1.0)
        with pytest.raises(ConfigurationError):
            CycleLossConfig(lambda_gp=float("nan"))


class TestGeneratorArchitecture:
    def test_paper_layer_sequence(self):
        g = ResnetGenerator(base=64, n_blocks=6)
        head_conv = g.head[1]
        assert isinstance(g.head[0], nn.ReflectionPad2d)
        assert head_conv.kernel_size == (7, 7) and head_conv.stride == (1, 1) and head_conv.out_channels == 64
        d1, d2 = g.down1[0], g.down2[0]
        assert d1.out_channels == 128 and d1.stride == (2, 2) and d1.kernel_size == (3, 3)
        assert d2.out_channels == 256 and d2.stride == (2, 2)
        blocks = list(g.res)
        assert len(blocks) == 6
        for blk in blocks:
            convs = [m for m in blk.body if isinstance(m, nn.Conv2d)]
            assert len(convs) == 2
            assert all(c.in_channels == 256 and c.out_channels == 256 and c.kernel_size == (3, 3) for c in convs)
        u1, u2 = g.up1[0], g.up2[0]
        assert isinstance(u1, nn.ConvTranspose2d) and u1.out_channels == 128 and u1.stride == (2, 2)
        assert isinstance(u2, nn.ConvTranspose2d) and u2.out_channels == 64
        tail_conv = g.tail[1]
        assert tail_conv.kernel_size == (7, 7) and tail_conv.out_channels == 1
        assert isinstance(g.tail[-1], nn.Tanh)
        assert any(isinstance(m, nn.InstanceNorm2d) for m in g.modules())

    def test_critic_matches_appendix(self):
        d = PatchCritic(base=64)
        convs = [blk[0] for blk in d.blocks]
        assert [c.out_channels for c in convs] == [64, 128, 256, 512]
        assert not any(isinstance(m, nn.InstanceNorm2d) for m in d.blocks[0])

    def test_shape_preserved_through_round_trip(self):
        g_ab = ResnetGenerator(base=2, n_blocks=1)
        g_ba = ResnetGenerator(base=2, n_blocks=1)
        x = torch.rand(2, 1, 16, 16)
        assert g_ba(g_ab(x)).shape == x.shape


class TestTranslate:
    def test_shape_and_range(self):
        g = ResnetGenerator(base=2, n_blocks=1)
        out = translate(g, torch.rand(3, 1, 16, 16) * 2 - 1)
        assert out.shape == (3, 1, 16, 16)
        assert out.min() >= -1.0 and out.max() <= 1.0

    def test_deterministic(self):
        g = ResnetGenerator(base=2, n_blocks=1)
        x = torch.rand(2, 1, 16, 16)
        assert torch.equal(translate(g, x), translate(g, x))

    def test_bad_size_rejected(self):
        g = ResnetGenerator(base=2, n_blocks=1)
        with pytest.raises(ValueError):
            translate(g, torch.rand(2, 1, 15, 15))
        with pytest.raises(ValueError):
            translate(g, torch.rand(2, 3, 16, 16))


class TestTraining:
    def _domains(self):
        torch.manual_seed(0)
        a = torch.rand(10, 1, 32, 32) * 2 - 1
        b = torch.rand(6, 1, 32, 32) * 2 - 1
        return a, b

    def test_two_epoch_toy_run(self):
        a, b = self._domains()
        cfg = CycleLossConfig(epochs_constant=1, epochs_decay=1, n_critic=2, learning_rate=1e-4)
        models, log = train_cycle_wgan_gp(a, b, cfg, seed=3, base=2, n_blocks=1, critic_base=2)
        assert [r["epoch"] for r in log] == [1, 2]
        for r in log:
            for key in ("adv_a", "adv_b", "cycle", "identity", "lr"):
                assert math.isfinite(r[key]), key

    def test_epoch_iterates_larger_domain(self):
        a, b = self._domains()
        cfg = CycleLossConfig(epochs_constant=1, epochs_decay=0, n_critic=5)
        _, log = train_cycle_wgan_gp(a, b, cfg, seed=0, base=2, n_blocks=1, critic_base=2)
        assert log[0]["iterations"] == 10  # max(|A|, |B|)

    def test_empty_domain_rejected(self):
        a, _ = self._domains()
        with pytest.raises(ConfigurationError):
            train_cycle_wgan_gp(a, torch.zeros(0, 1, 32, 32), CycleLossConfig(), seed=0)

    def test_divergence_aborts(self):
        a, b = self._domains()
        models = build_cycle_models(base=2, n_blocks=1, critic_base=2, seed=0)
        with torch.no_grad():
            models.d_a.head.weight.fill_(float("inf"))
        cfg = CycleLossConfig(epochs_constant=1, epochs_decay=0)
        with pytest.raises(TrainingDivergedError):
            train_cycle_wgan_gp(a, b, cfg, seed=0, models=models)


class TestCheckpoint:
    def test_bundle_round_trip(self, tmp_path):
        models = build_cycle_models(base=2, n_blocks=2, critic_base=2, seed=5)
        cfg = CycleLossConfig()
        path = tmp_path / "cycle.fsck"
        save_cycle_set(path, models, cfg, epoch=7)
        back, extra = load_cycle_set(path)
        assert extra["epoch"] == 7
        assert extra["config"]["lambda_cycle"] == 10.0
        x = torch.rand(2, 1, 16, 16)
        assert torch.allclose(translate(models.g_ab, x), translate(back.g_ab, x), atol=1e-6)
        assert torch.allclose(translate(models.g_ba, x), translate(back.g_ba, x), atol=1e-6)
        scores_old = models.d_a(torch.rand(2, 1, 32, 32))
        # weights restored bit-exact through the f32 container
        for (ka, va), (kb, vb) in zip(models.d_b.state_dict().items(), back.d_b.state_dict().items()):
            assert ka == kb and torch.equal(va, vb)
