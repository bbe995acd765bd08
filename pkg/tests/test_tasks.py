import math

import pytest
import torch

from semcom.agent import AgentError, WeightPair
from semcom.latent import LatentCode
from semcom.lora import AdapterPair, AdapterSpec
from semcom.tasks import (
    ClassifierConfig,
    LatentClassifier,
    MetricsRecord,
    accuracy,
    f1_macro,
    predict_classes,
    psnr,
    psnr_per_image,
    read_metrics_csv,
    ssim,
    ssim_per_image,
    total_loss,
    write_metrics_csv,
)


class TestClassifier:
    def make(self, seed=0, input_dim=32, k=4):
        torch.manual_seed(seed)
        return LatentClassifier(ClassifierConfig(input_dim=input_dim, num_classes=k))

    def test_zero_weights_tie_breaks_low(self):
        clf = self.make()
        with torch.no_grad():
            for p in clf.parameters():
                p.zero_()
        logits = clf(torch.randn(3, 32))
        assert torch.equal(predict_classes(logits), torch.zeros(3, dtype=torch.int64))

    def test_zero_init_adapter_is_transparent(self):
        clf = self.make(seed=1)
        x = torch.randn(4, 32)
        base = clf(x)
        rng = torch.Generator().manual_seed(0)
        clf.head.set_adapter(AdapterPair(4, 256, AdapterSpec("classifier", 4), rng))
        assert torch.equal(clf(x), base)

    def test_permuting_head_rows_permutes_logits(self):
        clf = self.make(seed=2)
        x = torch.randn(5, 32)
        base = clf(x)
        perm = torch.tensor([2, 0, 3, 1])
        with torch.no_grad():
            clf.head.weight.copy_(clf.head.weight[perm])
            clf.head.bias.copy_(clf.head.bias[perm])
        assert torch.allclose(clf(x), base[:, perm], atol=1e-6)

    def test_batch_order_invariance(self):
        clf = self.make(seed=3)
        x = torch.randn(6, 32)
        perm = torch.randperm(6)
        assert torch.allclose(clf(x[perm]), clf(x)[perm], atol=1e-6)

    def test_shape_mismatch_rejected(self):
        clf = self.make()
        with pytest.raises(ValueError):
            clf(torch.randn(2, 33))

    def test_accepts_latent_code(self):
        clf = self.make()
        z = LatentCode(torch.randn(2, 32), (4, 4, 2))
        assert clf(z).shape == (2, 4)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            ClassifierConfig(input_dim=8, num_classes=1)


class TestTotalLoss:
    def test_perfect_prediction_near_zero(self):
        x = torch.rand(2, 1, 8, 8)
        y = torch.tensor([0, 1])
        logits = torch.tensor([[30.0, 0.0, 0.0], [0.0, 30.0, 0.0]])
        loss = total_loss(x, x.clone(), y, logits, WeightPair(0.5, 0.5))
        assert float(loss) == pytest.approx(0.0, abs=1e-6)

    def test_recon_endpoint_is_mse(self):
        x = torch.rand(3, 1, 4, 4)
        x_hat = torch.rand(3, 1, 4, 4)
        y = torch.tensor([0, 1, 0])
        logits = torch.randn(3, 2)
        loss = total_loss(x, x_hat, y, logits, WeightPair(1.0, 0.0))
        assert float(loss) == pytest.approx(float((x - x_hat).square().mean()), rel=1e-6)

    def test_hand_arithmetic(self):
        # MSE = 0.04, CE = 2.0, lambda = 0.5 -> 1.02
        x = torch.zeros(1, 1, 1, 1)
        x_hat = torch.full((1, 1, 1, 1), 0.2)  # MSE 0.04
        p = math.exp(-2.0)
        # two-class logits chosen so CE(y=0) = 2.0
        logits = torch.tensor([[math.log(p / (1 - p)), 0.0]])
        y = torch.tensor([0])
        loss = total_loss(x, x_hat, y, logits, WeightPair(0.5, 0.5))
        assert float(loss) == pytest.approx(1.02, rel=1e-5)

    def test_linear_in_weights(self):
        torch.manual_seed(0)
        x, x_hat = torch.rand(2, 1, 4, 4), torch.rand(2, 1, 4, 4)
        y = torch.tensor([1, 0])
        logits = torch.randn(2, 3)
        at0 = float(total_loss(x, x_hat, y, logits, WeightPair(0.0, 1.0)))
        at1 = float(total_loss(x, x_hat, y, logits, WeightPair(1.0, 0.0)))
        for lam in (0.25, 0.5, 0.75):
            mid = float(total_loss(x, x_hat, y, logits, WeightPair.from_lambda(lam)))
            assert mid == pytest.approx(lam * at1 + (1 - lam) * at0, rel=1e-6)

    def test_off_simplex_weights_rejected(self):
        with pytest.raises(AgentError):
            WeightPair(0.6, 0.6)
        with pytest.raises(AgentError):
            WeightPair(-0.1, 1.1)


class TestPsnr:
    def test_known_mse(self):
        x = torch.zeros(1, 1, 10, 10)
        x_hat = torch.full((1, 1, 10, 10), 0.1)  # MSE 0.01
        assert psnr(x, x_hat) == pytest.approx(20.0, rel=1e-6)

    def test_identical_images_infinite(self):
        x = torch.rand(1, 3, 8, 8)
        assert psnr(x, x.clone()) == math.inf

    def test_monotone_in_noise(self):
        g = torch.Generator().manual_seed(0)
        x = torch.rand(4, 1, 16, 16, generator=g)
        values = []
        for scale in (0.01, 0.05, 0.1, 0.2):
            noisy = (x + scale * torch.randn(x.shape, generator=g)).clamp(0, 1)
            values.append(psnr(x, noisy))
        assert values == sorted(values, reverse=True)

    def test_per_image(self):
        x = torch.zeros(2, 1, 4, 4)
        x_hat = x.clone()
        x_hat[1] += 0.1
        out = psnr_per_image(x, x_hat)
        assert out[0] == math.inf
        assert float(out[1]) == pytest.approx(20.0, rel=1e-6)


class TestSsim:
    def test_identity_is_one(self):
        x = torch.rand(2, 3, 16, 16)
        assert ssim(x, x.clone()) == 1.0

    def test_symmetry(self):
        g = torch.Generator().manual_seed(1)
        x = torch.rand(2, 1, 16, 16, generator=g)
        y = torch.rand(2, 1, 16, 16, generator=g)
        assert ssim(x, y) == ssim(y, x)

    def test_degrades_with_noise(self):
        g = torch.Generator().manual_seed(2)
        x = torch.rand(1, 1, 32, 32, generator=g)
        light = (x + 0.05 * torch.randn(x.shape, generator=g)).clamp(0, 1)
        heavy = (x + 0.4 * torch.randn(x.shape, generator=g)).clamp(0, 1)
        assert ssim(x, heavy) < ssim(x, light) < 1.0

    def test_shape_handling(self):
        x = torch.rand(16, 16)
        assert isinstance(ssim(x, x.clone()), float)
        batch = torch.rand(3, 1, 16, 16)
        assert ssim_per_image(batch, batch.clone()).shape == (3,)

    def test_too_small_rejected(self):
        x = torch.rand(1, 1, 8, 8)
        with pytest.raises(ValueError):
            ssim(x, x)


class TestClassificationMetrics:
    def test_hand_confusion_case(self):
        labels = [0, 1, 1, 0]
        preds = [0, 1, 0, 0]
        assert accuracy(labels, preds) == pytest.approx(0.75)
        # class 0: P=2/3, R=1 -> F1=0.8 ; class 1: P=1, R=0.5 -> F1=2/3
        assert f1_macro(labels, preds) == pytest.approx((0.8 + 2.0 / 3.0) / 2.0, rel=1e-9)

    def test_perfect_predictions(self):
        labels = [0, 1, 2, 1]
        assert accuracy(labels, labels) == 1.0
        assert f1_macro(labels, labels) == 1.0

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            accuracy([], [])
        with pytest.raises(ValueError):
            f1_macro([], [])


class TestMetricsRecord:
    def record(self, **overrides):
        kwargs = dict(
            psnr=18.5,
            ssim=0.82,
            accuracy=0.7,
            f1_macro=0.68,
            loss_recon=0.01,
            loss_cls=0.9,
            lambda_recon=0.5,
            snr_db=10.0,
            epoch=3,
            channel_kind="awgn",
        )
        kwargs.update(overrides)
        return MetricsRecord(**kwargs)

    def test_csv_round_trip(self, tmp_path):
        rows = [self.record(), self.record(snr_db=20.0, channel_kind="rayleigh")]
        path = tmp_path / "metrics.csv"
        write_metrics_csv(path, rows)
        header = path.read_text().splitlines()[0]
        assert header == ",".join(MetricsRecord.FIELDS)
        back = read_metrics_csv(path)
        assert back == rows

    def test_validation(self):
        with pytest.raises(ValueError):
            self.record(accuracy=1.5)
        with pytest.raises(ValueError):
            self.record(psnr=-3.0)
