import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from jointscan.errors import ConfigurationError
from jointscan.model import EncoderSpec
from jointscan.pretrain import (
    DistillConfig,
    DistillHead,
    DistillModel,
    center_update,
    collapse_statistic,
    corpus_norm_stats,
    distill_loss,
    ema_update,
    multi_crop,
    pretrain_encoder,
)

SPEC = EncoderSpec(backbone="small-cnn", feature_dim=16, ffn_dim=16)


def tiny_config(**kwargs) -> DistillConfig:
    base = dict(
        n_prototypes=16,
        epochs=1,
        batch_size=4,
        n_local_crops=2,
        global_crop_px=32,
        local_crop_px=16,
        warmup_steps=2,
    )
    base.update(kwargs)
    return DistillConfig(**base)


class TestLoss:
    def test_uniform_teacher_and_student_give_log_k(self):
        """When teacher targets and student predictions are both uniform the
        cross-entropy equals ln K exactly."""
        for k in (4, 64, 256):
            b = 3
            teacher = [torch.zeros(b, k), torch.zeros(b, k)]
            student = [torch.zeros(b, k) for _ in range(4)]
            loss = distill_loss(student, teacher, torch.zeros(k), 0.1, 0.04)
            assert abs(loss.item() - math.log(k)) < 1e-5, k

    def test_matches_hand_computed_two_prototype_case(self):
        # teacher [2, 0], center [0.5, -0.5], tau_t = 0.5 -> q = softmax([3, 1])
        # student [1, -1], tau_s = 1.0; single (teacher view 0, student view 1) pair
        teacher = [torch.tensor([[2.0, 0.0]], dtype=torch.float64)]
        student = [
            torch.tensor([[99.0, -99.0]], dtype=torch.float64),
            torch.tensor([[1.0, -1.0]], dtype=torch.float64),
        ]
        center = torch.tensor([0.5, -0.5], dtype=torch.float64)
        loss = distill_loss(student, teacher, center, 1.0, 0.5)
        np.testing.assert_allclose(loss.item(), 0.36533385508720756, rtol=1e-12)

    def test_teacher_never_scored_against_its_own_view(self):
        """Student view i is skipped for teacher view i, so with one teacher
        view and two student views, view 0 can change arbitrarily without
        moving the loss."""
        gen = torch.Generator().manual_seed(0)
        k, b = 8, 2
        teacher = [torch.randn(b, k, generator=gen)]
        shared = torch.randn(b, k, generator=gen)
        a = distill_loss([torch.full((b, k), 7.0), shared], teacher, torch.zeros(k), 0.1, 0.04)
        b_ = distill_loss([torch.full((b, k), -3.0), shared], teacher, torch.zeros(k), 0.1, 0.04)
        torch.testing.assert_close(a, b_, rtol=0, atol=0)

    def test_all_self_pairs_is_an_error(self):
        with pytest.raises(ConfigurationError, match="self pair"):
            distill_loss([torch.zeros(1, 4)], [torch.zeros(1, 4)], torch.zeros(4), 0.1, 0.04)

    def test_center_shift_invariance(self):
        """Adding a constant vector to teacher logits and the center leaves
        the loss unchanged."""
        gen = torch.Generator().manual_seed(1)
        k = 12
        teacher = [torch.randn(2, k, generator=gen) for _ in range(2)]
        student = [torch.randn(2, k, generator=gen) for _ in range(4)]
        center = torch.randn(k, generator=gen)
        shift = torch.randn(k, generator=gen)
        a = distill_loss(student, teacher, center, 0.1, 0.04)
        b = distill_loss([s for s in student], [t + shift for t in teacher], center + shift, 0.1, 0.04)
        torch.testing.assert_close(a, b, rtol=1e-5, atol=1e-5)

    def test_sharper_teacher_temperature_lowers_target_entropy(self):
        gen = torch.Generator().manual_seed(2)
        logits = torch.randn(1, 32, generator=gen)

        def entropy(tau):
            q = F.softmax(logits / tau, dim=-1)
            return -(q * q.clamp_min(1e-30).log()).sum().item()

        assert entropy(0.04) < entropy(0.1) < entropy(1.0)

    def test_no_gradient_reaches_teacher(self):
        model_s = DistillHead(8, 16)
        model_t = DistillHead(8, 16)
        x = torch.randn(4, 8)
        student = [model_s(x), model_s(x + 1)]
        teacher = [model_t(x), model_t(x + 1)]
        loss = distill_loss(student, teacher, torch.zeros(16), 0.1, 0.04)
        loss.backward()
        assert all(p.grad is None for p in model_t.parameters())
        assert any(p.grad is not None and p.grad.abs().sum() > 0 for p in model_s.parameters())

    def test_student_gradient_matches_finite_differences(self):
        """Toy K=4 head: analytic d(loss)/d(weights) vs central differences."""
        torch.manual_seed(3)
        k = 4
        head = torch.nn.Linear(3, k, bias=False).double()
        x = torch.randn(5, 3, dtype=torch.float64)
        teacher = [torch.randn(5, k, dtype=torch.float64)]
        center = torch.randn(k, dtype=torch.float64)

        def loss_value():
            return distill_loss([teacher[0], head(x)], teacher, center, 0.1, 0.04)

        loss = loss_value()
        (analytic,) = torch.autograd.grad(loss, head.weight)
        eps = 1e-3
        flat = head.weight.data.view(-1)
        fd = torch.zeros_like(flat)
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + eps
            hi = loss_value().item()
            flat[i] = orig - eps
            lo = loss_value().item()
            flat[i] = orig
            fd[i] = (hi - lo) / (2 * eps)
        rel = (analytic.view(-1) - fd).norm() / (analytic.norm() + fd.norm())
        assert rel.item() < 1e-3


class TestUpdates:
    def test_ema_single_step_arithmetic(self):
        t = torch.nn.Linear(1, 1, bias=False)
        s = torch.nn.Linear(1, 1, bias=False)
        with torch.no_grad():
            t.weight.fill_(1.0)
            s.weight.fill_(0.0)
        ema_update(t, s, momentum=0.9)
        np.testing.assert_allclose(t.weight.item(), 0.9, rtol=1e-7)

    def test_ema_matches_closed_form_over_many_steps(self):
        """With a constant student, n EMA steps give
        m^n * theta_0 + (1 - m^n) * theta_s exactly."""
        torch.manual_seed(4)
        teacher = torch.nn.Linear(6, 5).double()
        student = torch.nn.Linear(6, 5).double()
        theta0 = [p.detach().clone() for p in teacher.parameters()]
        m, n = 0.996, 50
        for _ in range(n):
            ema_update(teacher, student, m)
        for p_t, p_0, p_s in zip(teacher.parameters(), theta0, student.parameters()):
            closed = (m**n) * p_0 + (1 - m**n) * p_s.detach()
            assert (p_t.detach() - closed).abs().max().item() < 1e-10

    def test_center_update_single_step(self):
        center = torch.zeros(4, dtype=torch.float64)
        logits = torch.ones(8, 4, dtype=torch.float64)
        out = center_update(center, logits, momentum=0.9)
        np.testing.assert_allclose(out.numpy(), np.full(4, 0.1), rtol=1e-12)

    def test_center_update_closed_form(self):
        lam, n = 0.9, 30
        center = torch.zeros(3, dtype=torch.float64)
        logits = torch.full((5, 3), 2.5, dtype=torch.float64)
        for _ in range(n):
            center = center_update(center, logits, lam)
        np.testing.assert_allclose(center.numpy(), np.full(3, (1 - lam**n) * 2.5), rtol=1e-12)


class TestCropsAndStats:
    def test_degenerate_crops_equal_resized_original(self):
        gen = torch.Generator().manual_seed(5)
        img = torch.rand(3, 48, 48, generator=gen)
        cfg = tiny_config(global_crop_scale=(1.0, 1.0), local_crop_scale=(1.0, 1.0), augment=False)
        g_views, l_views = multi_crop(img, cfg, torch.Generator().manual_seed(0))
        expected_g = F.interpolate(img[None], size=(32, 32), mode="bilinear", align_corners=False)[0]
        expected_l = F.interpolate(img[None], size=(16, 16), mode="bilinear", align_corners=False)[0]
        for v in g_views:
            torch.testing.assert_close(v, expected_g)
        for v in l_views:
            torch.testing.assert_close(v, expected_l)

    def test_multi_crop_is_deterministic_given_generator(self):
        gen_img = torch.Generator().manual_seed(6)
        img = torch.rand(3, 48, 48, generator=gen_img)
        cfg = tiny_config()
        a = multi_crop(img, cfg, torch.Generator().manual_seed(7))
        b = multi_crop(img, cfg, torch.Generator().manual_seed(7))
        for va, vb in zip(a[0] + a[1], b[0] + b[1]):
            torch.testing.assert_close(va, vb, rtol=0, atol=0)

    def test_views_have_requested_sizes(self):
        img = torch.rand(3, 40, 40)
        g_views, l_views = multi_crop(img, tiny_config(), torch.Generator().manual_seed(8))
        assert len(g_views) == 2 and len(l_views) == 2
        assert all(v.shape == (3, 32, 32) for v in g_views)
        assert all(v.shape == (3, 16, 16) for v in l_views)

    def test_collapse_statistic(self):
        constant = torch.ones(8, 16)
        assert collapse_statistic(constant) == 0.0
        spread = torch.randn(256, 16, generator=torch.Generator().manual_seed(9))
        assert 0.8 < collapse_statistic(spread) < 1.2

    def test_corpus_norm_stats_are_sane(self):
        imgs = [torch.full((3, 8, 8), 0.25), torch.full((3, 8, 8), 0.75)]
        stats = corpus_norm_stats(imgs)
        np.testing.assert_allclose(stats.mean, [0.5] * 3, rtol=1e-6)
        np.testing.assert_allclose(stats.std, [0.25] * 3, rtol=1e-5)

    def test_config_validation(self):
        with pytest.raises(ConfigurationError):
            tiny_config(n_global_crops=3).validate()
        with pytest.raises(ConfigurationError):
            tiny_config(teacher_temp=0.0).validate()
        with pytest.raises(ConfigurationError):
            tiny_config(ema_momentum=1.0).validate()
        with pytest.raises(ConfigurationError):
            tiny_config(global_crop_scale=(0.9, 0.2)).validate()


class TestLoop:
    def make_corpus(self, n=6, px=48, seed=10):
        gen = torch.Generator().manual_seed(seed)
        return [torch.rand(3, px, px, generator=gen) for _ in range(n)]

    def test_fixed_seed_reproduces_loss_exactly(self, tmp_path):
        corpus = self.make_corpus()
        cfg = tiny_config()
        _, r1 = pretrain_encoder(corpus, SPEC, cfg, seed=0, checkpoint_path=tmp_path / "a.pt")
        _, r2 = pretrain_encoder(corpus, SPEC, cfg, seed=0, checkpoint_path=tmp_path / "b.pt")
        assert r1.epoch_losses == r2.epoch_losses
        assert r1.collapse_stats == r2.collapse_stats
        a = torch.load(tmp_path / "a.pt", weights_only=False)
        b = torch.load(tmp_path / "b.pt", weights_only=False)
        torch.testing.assert_close(a["probe"]["embeddings"], b["probe"]["embeddings"], rtol=0, atol=0)

    def test_teacher_moves_and_loss_stays_finite(self, tmp_path):
        corpus = self.make_corpus(seed=11)
        teacher, result = pretrain_encoder(
            corpus, SPEC, tiny_config(epochs=2), seed=1, log_path=tmp_path / "log.jsonl"
        )
        assert all(np.isfinite(result.epoch_losses))
        assert len(result.epoch_losses) == 2
        lines = (tmp_path / "log.jsonl").read_text().splitlines()
        assert len(lines) == 2
        import json

        rec = json.loads(lines[0])
        assert set(rec) >= {"epoch", "loss", "collapse_stat", "wall_time_s"}

    def test_identical_corpus_images_trigger_collapse_warning(self):
        img = torch.rand(3, 48, 48, generator=torch.Generator().manual_seed(12))
        corpus = [img.clone() for _ in range(4)]
        with pytest.warns(RuntimeWarning, match="collaps"):
            _, result = pretrain_encoder(corpus, SPEC, tiny_config(), seed=2)
        assert result.collapsed

    def test_empty_corpus_rejected(self):
        with pytest.raises(ConfigurationError, match="empty"):
            pretrain_encoder([], SPEC, tiny_config(), seed=0)
