import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from jointscan.errors import ConfigurationError, UndefinedLossError
from jointscan.finetune import (
    ABSENT,
    FocalLossConfig,
    TrainConfig,
    encode_labels,
    finetune,
    focal_loss,
    predict,
)
from jointscan.model import EncoderSpec, GlobalLocalNet, encoder_checksum
from jointscan.preprocess import PreparedSample

SMALL = EncoderSpec(backbone="small-cnn", feature_dim=16, ffn_dim=16)


def numpy_focal(probs: np.ndarray, labels: np.ndarray, gamma: float, eps: float = 1e-7) -> float:
    """Independent reference implementation (plain numpy, no torch)."""
    mask = labels != ABSENT
    p = np.clip(probs[mask], eps, 1 - eps)
    y = labels[mask].astype(np.float64)
    terms = y * (1 - p) ** gamma * np.log(p) + (1 - y) * p**gamma * np.log(1 - p)
    return float(-terms.mean())


class TestFocalValues:
    def test_single_positive_at_point_nine(self):
        """gamma=2, y=1, p=0.9: the loss is (0.1)^2 * (-ln 0.9)."""
        loss = focal_loss(
            torch.tensor([0.9], dtype=torch.float64),
            torch.tensor([1]),
            FocalLossConfig(gamma=2.0),
        )
        np.testing.assert_allclose(loss.item(), 1.0536051565782623e-3, atol=1e-9)

    def test_symmetric_pair_gives_same_mean(self):
        # (y=1, p=0.9) and (y=0, p=0.1) are mirror images; their mean equals
        # the single-entry value
        loss = focal_loss(
            torch.tensor([0.9, 0.1], dtype=torch.float64),
            torch.tensor([1, 0]),
            FocalLossConfig(gamma=2.0),
        )
        np.testing.assert_allclose(loss.item(), 1.0536051565782623e-3, atol=1e-9)

    def test_gamma_zero_is_bce(self):
        gen = torch.Generator().manual_seed(0)
        probs = torch.rand(500, dtype=torch.float64, generator=gen).clamp(1e-4, 1 - 1e-4)
        labels = (torch.rand(500, generator=gen) > 0.5).long()
        ours = focal_loss(probs, labels, FocalLossConfig(gamma=0.0))
        reference = F.binary_cross_entropy(probs, labels.double())
        np.testing.assert_allclose(ours.item(), reference.item(), rtol=1e-9)

    def test_loss_decreases_as_positive_prob_improves(self):
        cfg = FocalLossConfig(gamma=2.0)
        grid = torch.linspace(0.05, 0.95, 19, dtype=torch.float64)
        values = [focal_loss(p.reshape(1), torch.tensor([1]), cfg).item() for p in grid]
        assert all(a > b for a, b in zip(values, values[1:]))

    def test_gamma_downweights_confident_examples(self):
        """At p=0.9 for a positive, the focal term is (1-p)^2 = 1% of BCE."""
        p = torch.tensor([0.9], dtype=torch.float64)
        y = torch.tensor([1])
        bce = focal_loss(p, y, FocalLossConfig(gamma=0.0)).item()
        foc = focal_loss(p, y, FocalLossConfig(gamma=2.0)).item()
        np.testing.assert_allclose(foc / bce, 0.01, rtol=1e-9)
        # near p = 0.5 the discount is much milder
        p_mid = torch.tensor([0.55], dtype=torch.float64)
        ratio_mid = (
            focal_loss(p_mid, y, FocalLossConfig(gamma=2.0)).item()
            / focal_loss(p_mid, y, FocalLossConfig(gamma=0.0)).item()
        )
        assert ratio_mid > 0.2

    def test_analytic_derivative_wrt_probability(self):
        # d/dp [-(1-p)^g ln p] = g (1-p)^(g-1) ln p - (1-p)^g / p
        p_val, g = 0.7, 2.0
        expected = g * (1 - p_val) ** (g - 1) * math.log(p_val) - (1 - p_val) ** g / p_val
        p = torch.tensor([p_val], dtype=torch.float64, requires_grad=True)
        loss = focal_loss(p, torch.tensor([1]), FocalLossConfig(gamma=g))
        (grad,) = torch.autograd.grad(loss, p)
        np.testing.assert_allclose(grad.item(), expected, rtol=1e-9)

    def test_extreme_probabilities_stay_finite(self):
        cfg = FocalLossConfig(gamma=2.0, epsilon=1e-7)
        loss = focal_loss(
            torch.tensor([0.0, 1.0, 1.0], dtype=torch.float64),
            torch.tensor([1, 0, 1]),
            cfg,
        )
        assert math.isfinite(loss.item())
        # clamped positive at p=0: -(1-eps)^2 ln(eps), averaged with the others
        manual = numpy_focal(np.array([0.0, 1.0, 1.0]), np.array([1, 0, 1]), 2.0)
        np.testing.assert_allclose(loss.item(), manual, rtol=1e-9)

    @settings(max_examples=100, deadline=None)
    @given(
        probs=hnp.arrays(np.float64, st.integers(1, 40), elements=st.floats(0.0, 1.0)),
        gamma=st.sampled_from([0.0, 0.5, 1.0, 2.0, 5.0]),
        data=st.data(),
    )
    def test_matches_reference_implementation(self, probs, gamma, data):
        labels = data.draw(
            hnp.arrays(np.int64, probs.shape, elements=st.sampled_from([ABSENT, 0, 1]))
        )
        if not (labels != ABSENT).any():
            labels[0] = 1
        ours = focal_loss(
            torch.from_numpy(probs), torch.from_numpy(labels), FocalLossConfig(gamma=gamma)
        ).item()
        ref = numpy_focal(probs, labels, gamma)
        assert math.isfinite(ours) and ours >= 0.0
        np.testing.assert_allclose(ours, ref, rtol=1e-9)


class TestMissingLabels:
    def test_unlabeled_entries_are_ignored(self):
        cfg = FocalLossConfig(gamma=2.0)
        full = focal_loss(
            torch.tensor([0.8, 0.3], dtype=torch.float64), torch.tensor([1, 0]), cfg
        )
        with_gap = focal_loss(
            torch.tensor([0.8, 0.99, 0.3], dtype=torch.float64), torch.tensor([1, ABSENT, 0]), cfg
        )
        np.testing.assert_allclose(full.item(), with_gap.item(), rtol=1e-12)

    def test_unlabeled_entry_gets_zero_gradient(self):
        p = torch.tensor([0.8, 0.5, 0.3], dtype=torch.float64, requires_grad=True)
        loss = focal_loss(p, torch.tensor([1, ABSENT, 0]), FocalLossConfig())
        (grad,) = torch.autograd.grad(loss, p)
        assert grad[1].item() == 0.0
        assert grad[0].item() != 0.0 and grad[2].item() != 0.0

    def test_all_absent_raises(self):
        with pytest.raises(UndefinedLossError):
            focal_loss(torch.tensor([0.5, 0.5]), torch.tensor([ABSENT, ABSENT]))

    def test_encode_labels(self):
        t = encode_labels([1, 0, None, 1])
        assert t.tolist() == [1, 0, ABSENT, 1]


class TestConfigs:
    def test_focal_config_bounds(self):
        with pytest.raises(ConfigurationError):
            FocalLossConfig(gamma=-1.0).validate()
        with pytest.raises(ConfigurationError):
            FocalLossConfig(epsilon=0.0).validate()
        with pytest.raises(ConfigurationError):
            FocalLossConfig(epsilon=1e-3).validate()
        with pytest.raises(ConfigurationError):
            FocalLossConfig(alpha=1.5).validate()

    def test_train_config_bounds(self):
        with pytest.raises(ConfigurationError):
            TrainConfig(learning_rate=0.0).validate()
        with pytest.raises(ConfigurationError):
            TrainConfig(loss="hinge").validate()

    def test_alpha_hook_reweights(self):
        p = torch.tensor([0.5, 0.5], dtype=torch.float64)
        y = torch.tensor([1, 0])
        plain = focal_loss(p, y, FocalLossConfig(gamma=0.0)).item()
        tilted = focal_loss(p, y, FocalLossConfig(gamma=0.0, alpha=0.9)).item()
        # weights 0.9 and 0.1 on two equal terms halve the symmetric mean
        np.testing.assert_allclose(tilted, plain * 0.5, rtol=1e-9)
        only_pos = focal_loss(p[:1], y[:1], FocalLossConfig(gamma=0.0, alpha=0.9)).item()
        np.testing.assert_allclose(only_pos, 0.9 * (-math.log(0.5)), rtol=1e-9)


def make_samples(n=8, n_joints=4, px=24, seed=0):
    """Synthetic separable task: a joint is positive iff its patch is bright."""
    gen = torch.Generator().manual_seed(seed)
    samples = []
    for i in range(n):
        patches = torch.rand(n_joints, 3, px, px, generator=gen) * 0.3
        labels = []
        for j in range(n_joints):
            positive = torch.rand((), generator=gen) < 0.4
            if positive:
                patches[j] += 0.6
            labels.append(int(positive))
        samples.append(
            PreparedSample(
                global_image=torch.rand(3, px, px, generator=gen),
                local_patches=patches,
                joint_ids=tuple(range(n_joints)),  # type: ignore[arg-type]
                labels=tuple(labels),
                patient_id=f"p{i}",
            )
        )
    return samples


class TestLoop:
    def test_loss_decreases_on_separable_task(self):
        torch.manual_seed(20)
        net = GlobalLocalNet(SMALL)
        samples = make_samples(n=10, seed=20)
        result = finetune(
            net,
            samples,
            TrainConfig(learning_rate=5e-3, epochs=6, batch_size=4, seed=1),
            FocalLossConfig(gamma=2.0),
        )
        assert result.epoch_losses[-1] < result.epoch_losses[0]

    def test_encoders_never_move_during_training(self):
        torch.manual_seed(21)
        net = GlobalLocalNet(SMALL)
        before = encoder_checksum(net)
        result = finetune(
            net,
            make_samples(n=6, seed=21),
            TrainConfig(learning_rate=1e-3, epochs=2, batch_size=3, seed=2),
            FocalLossConfig(),
        )
        assert encoder_checksum(net) == before
        assert all(rec["encoder_checksum"] == before for rec in result.log_records)

    def test_unfrozen_control_run_moves_encoders(self):
        torch.manual_seed(22)
        net = GlobalLocalNet(SMALL)
        before = encoder_checksum(net)
        finetune(
            net,
            make_samples(n=4, seed=22),
            TrainConfig(learning_rate=1e-3, epochs=1, batch_size=2, freeze_encoders=False, seed=3),
            FocalLossConfig(),
        )
        assert encoder_checksum(net) != before

    def test_bce_mode_equals_gamma_zero(self):
        samples = make_samples(n=6, seed=23)
        torch.manual_seed(23)
        net_a = GlobalLocalNet(SMALL)
        torch.manual_seed(23)
        net_b = GlobalLocalNet(SMALL)
        res_a = finetune(
            net_a, samples, TrainConfig(epochs=2, batch_size=3, loss="bce", seed=4), FocalLossConfig(gamma=2.0)
        )
        res_b = finetune(
            net_b, samples, TrainConfig(epochs=2, batch_size=3, loss="focal", seed=4), FocalLossConfig(gamma=0.0)
        )
        np.testing.assert_allclose(res_a.epoch_losses, res_b.epoch_losses, rtol=1e-6)

    def test_same_seed_reproduces_run(self):
        samples = make_samples(n=6, seed=24)
        losses = []
        for _ in range(2):
            torch.manual_seed(24)
            net = GlobalLocalNet(SMALL)
            res = finetune(net, samples, TrainConfig(epochs=2, batch_size=3, seed=5), FocalLossConfig())
            losses.append(res.epoch_losses)
        assert losses[0] == losses[1]

    def test_empty_training_set_rejected(self):
        net = GlobalLocalNet(SMALL)
        with pytest.raises(ConfigurationError, match="empty"):
            finetune(net, [], TrainConfig(), FocalLossConfig())

    def test_fully_unlabeled_samples_are_skipped(self):
        torch.manual_seed(25)
        net = GlobalLocalNet(SMALL)
        samples = make_samples(n=4, seed=25)
        blank = PreparedSample(
            global_image=samples[0].global_image.clone(),
            local_patches=samples[0].local_patches.clone(),
            joint_ids=samples[0].joint_ids,
            labels=(None,) * 4,
            patient_id="blank",
        )
        result = finetune(
            net, samples + [blank], TrainConfig(epochs=1, batch_size=1, seed=6), FocalLossConfig()
        )
        assert math.isfinite(result.epoch_losses[0])

    def test_predict_shape_and_range(self):
        torch.manual_seed(26)
        net = GlobalLocalNet(SMALL)
        samples = make_samples(n=5, seed=26)
        probs = predict(net, samples, batch_size=2)
        assert probs.shape == (5, 4)
        assert torch.all(probs > 0) and torch.all(probs < 1)
