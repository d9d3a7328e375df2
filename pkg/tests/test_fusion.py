import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from lesionfuse.fusion import (
    FusedClassifier,
    FusionConfig,
    FusionHead,
    HeadSpec,
    build_head,
    fuse_forward,
    reduced_image_features,
    total_features,
)
from lesionfuse.trainer import weighted_cross_entropy

# (c_f, n_img, total) for n_cli = 28
REFERENCE_WIDTHS = [
    (0.5, 28, 56),
    (0.6, 42, 70),
    (0.7, 66, 94),
    (0.8, 112, 140),
    (0.9, 252, 280),
]


class TestCombinationArithmetic:
    @pytest.mark.parametrize("c_f,n_img,total", REFERENCE_WIDTHS)
    def test_reference_widths(self, c_f, n_img, total):
        assert reduced_image_features(28, c_f) == n_img
        assert total_features(28, c_f) == total

    def test_zero_factor_rejected(self):
        with pytest.raises(ValueError, match="reducer width must be positive"):
            reduced_image_features(28, 0.0)

    def test_factor_bounds(self):
        with pytest.raises(ValueError):
            reduced_image_features(28, 1.0)
        with pytest.raises(ValueError):
            reduced_image_features(28, -0.1)

    def test_total_equals_direct_ceiling(self):
        import math
        for c_f in np.linspace(0.05, 0.95, 50):
            n = 28
            want = math.ceil(round(n / (1 - c_f), 9))
            assert total_features(n, float(c_f)) == want

    @given(n_cli=st.integers(1, 200),
           pair=st.tuples(st.floats(0.01, 0.99), st.floats(0.01, 0.99)))
    @settings(max_examples=200, deadline=None)
    def test_monotonic_in_factor(self, n_cli, pair):
        lo, hi = sorted(pair)
        try:
            w_lo = reduced_image_features(n_cli, lo)
        except ValueError:
            return  # factor too small for any image features
        assert reduced_image_features(n_cli, hi) >= w_lo

    @given(n_cli=st.integers(1, 100), c_f=st.floats(0.05, 0.95))
    @settings(max_examples=200, deadline=None)
    def test_image_share_close_to_factor(self, n_cli, c_f):
        try:
            n_img = reduced_image_features(n_cli, c_f)
        except ValueError:
            return
        total = n_img + n_cli
        share = n_img / total
        assert c_f - 1e-9 <= share <= c_f + 1.0 / total + 1e-9


class TestBuildHead:
    def test_resnet_like_fused(self):
        spec = build_head(FusionConfig(c_f=0.8, backbone_dim=2048, scenario="fused"))
        assert spec.reducer_layers == ((2048, 112),)
        assert spec.concat_width == 140
        head = FusionHead(spec)
        assert head.classifier.in_features == 140
        assert head.classifier.out_features == 6

    def test_vgg_like_gets_intermediate_layer(self):
        spec = build_head(FusionConfig(c_f=0.8, backbone_dim=25088, scenario="fused",
                                       vgg_intermediate=1024))
        assert spec.reducer_layers == ((25088, 1024), (1024, 112))
        assert spec.concat_width == 140

    def test_image_only_keeps_reducer_no_concat(self):
        spec = build_head(FusionConfig(c_f=0.8, backbone_dim=1024,
                                       scenario="image_only"))
        assert spec.reducer_layers == ((1024, 112),)
        assert spec.concat_width == 112
        head = FusionHead(spec)
        assert head.classifier.in_features == 112

    def test_spec_roundtrips_through_dict(self):
        spec = build_head(FusionConfig(c_f=0.7, backbone_dim=64, scenario="fused"))
        assert HeadSpec.from_dict(spec.to_dict()) == spec

    def test_chained_widths_validated(self):
        with pytest.raises(ValueError, match="chain"):
            HeadSpec(reducer_layers=((10, 5), (6, 3)), scenario="fused",
                     n_cli=28, dropout=0.5)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            FusionConfig(c_f=1.0, backbone_dim=64)
        with pytest.raises(ValueError):
            FusionConfig(c_f=0.5, backbone_dim=64, scenario="both")
        with pytest.raises(ValueError):
            FusionConfig(c_f=0.5, backbone_dim=64, dropout=1.0)


def _make_head(scenario="fused", c_f=0.8, backbone_dim=64, dropout=0.5):
    return FusionHead(build_head(FusionConfig(
        c_f=c_f, backbone_dim=backbone_dim, scenario=scenario, dropout=dropout)))


class TestFuseForward:
    def test_probabilities_sum_to_one(self):
        torch.manual_seed(0)
        head = _make_head()
        out = fuse_forward(torch.randn(5, 64), torch.rand(5, 28), head)
        assert out.shape == (5, 6)
        assert torch.all(out >= 0)
        assert torch.allclose(out.sum(dim=1), torch.ones(5), atol=1e-6)

    def test_eval_mode_deterministic(self):
        torch.manual_seed(0)
        head = _make_head()
        x, c = torch.randn(3, 64), torch.rand(3, 28)
        a = fuse_forward(x, c, head, mode="eval")
        b = fuse_forward(x, c, head, mode="eval")
        assert torch.equal(a, b)

    def test_train_mode_dropout_active(self):
        torch.manual_seed(0)
        head = _make_head(dropout=0.5)
        x, c = torch.randn(8, 64), torch.rand(8, 28)
        a = fuse_forward(x, c, head, mode="train")
        b = fuse_forward(x, c, head, mode="train")
        assert not torch.equal(a, b)

    def test_single_vector_accepted(self):
        torch.manual_seed(0)
        head = _make_head()
        out = fuse_forward(torch.randn(64), torch.rand(28), head)
        assert out.shape == (6,)
        assert float(out.sum().detach()) == pytest.approx(1.0, abs=1e-6)

    def test_dimension_mismatch_errors(self):
        head = _make_head()
        with pytest.raises(ValueError, match="image features"):
            head(torch.randn(2, 63), torch.rand(2, 28))
        with pytest.raises(ValueError, match="clinical"):
            head(torch.randn(2, 64), torch.rand(2, 27))
        with pytest.raises(ValueError, match="requires the clinical"):
            head(torch.randn(2, 64))
        image_only = _make_head(scenario="image_only")
        with pytest.raises(ValueError, match="does not accept"):
            image_only(torch.randn(2, 64), torch.rand(2, 28))

    def test_clinical_slice_changes_output(self):
        torch.manual_seed(3)
        head = _make_head().eval()
        x = torch.randn(4, 64)
        c = torch.rand(4, 28)
        out_real = head(x, c)
        out_zeroed = head(x, torch.zeros_like(c))
        assert not torch.allclose(out_real, out_zeroed)

    def test_gradient_matches_central_finite_differences(self):
        torch.manual_seed(7)
        head = _make_head(c_f=0.6, backbone_dim=32).double()
        head.eval()  # dropout off so the loss surface is deterministic
        x = torch.randn(4, 32, dtype=torch.float64)
        clinical = torch.rand(4, 28, dtype=torch.float64)
        labels = torch.tensor([0, 2, 5, 1])
        weights = torch.tensor([1.5, 2.0, 1.0, 3.0, 1.2, 2.5], dtype=torch.float64)

        def loss_value():
            return weighted_cross_entropy(head(x, clinical), labels, weights)

        loss = loss_value()
        loss.backward()
        weight_tensor = head.reducer[0].weight
        grad = weight_tensor.grad.clone()

        rng = np.random.default_rng(0)
        eps = 1e-6
        for _ in range(20):
            i = rng.integers(weight_tensor.shape[0])
            j = rng.integers(weight_tensor.shape[1])
            with torch.no_grad():
                orig = weight_tensor[i, j].item()
                weight_tensor[i, j] = orig + eps
                up = loss_value().item()
                weight_tensor[i, j] = orig - eps
                down = loss_value().item()
                weight_tensor[i, j] = orig
            numeric = (up - down) / (2 * eps)
            denom = max(abs(numeric), abs(grad[i, j].item()), 1e-8)
            assert abs(numeric - grad[i, j].item()) / denom < 1e-4

    def test_gradient_reaches_unfrozen_backbone(self):
        torch.manual_seed(0)
        from lesionfuse.backbones import create_extractor
        extractor = create_extractor("tiny")
        model = FusedClassifier(extractor, _make_head(backbone_dim=64))
        probs = model(torch.rand(2, 3, 16, 16), torch.rand(2, 28))
        loss = weighted_cross_entropy(probs, torch.tensor([0, 1]), torch.ones(6))
        loss.backward()
        grads = [p.grad for p in extractor.parameters() if p.grad is not None]
        assert grads and any(g.abs().sum() > 0 for g in grads)

    def test_bad_mode(self):
        with pytest.raises(ValueError):
            fuse_forward(torch.randn(64), torch.rand(28), _make_head(), mode="test")
