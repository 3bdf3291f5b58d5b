import numpy as np
import pytest
import torch

from omniqa.config import ModelConfig
from omniqa.errors import CheckpointError, ConfigError
from omniqa.lgqa import HPA, FeedForward, MultiHeadSelfAttention, PatchEmbedding, ScoreHead, patch_vector
from omniqa.model import QualityModel

REDUCED = ModelConfig(backbone_channels=(4, 8, 16, 32, 32), input_side=64, k_patches=3, embed_dim=16)


def perturb_zero_init(model, std=0.05, seed=0):
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, p in model.named_parameters():
            if "offset_head.out" in name:
                p.copy_(std * torch.randn(p.shape, generator=g, dtype=p.dtype))


class TestHPA:
    def test_weights_are_distributions(self):
        torch.manual_seed(0)
        hpa = HPA(32, 32, groups=8, gn_groups=4)
        out, w = hpa(torch.randn(2, 32, 5, 5), return_weights=True)
        assert out.shape == (2, 32, 5, 5)
        for key in ("W1", "W2"):
            assert w[key].shape == (16, 4)
            assert (w[key].sum(dim=1) - 1).abs().max() <= 1e-6
            assert w[key].min() >= 0

    def test_output_channels(self):
        assert HPA(32, 24, groups=4, gn_groups=2)(torch.randn(1, 32, 3, 3)).shape == (1, 24, 3, 3)

    def test_bad_groups(self):
        with pytest.raises(ConfigError):
            HPA(30, 30, groups=8)
        with pytest.raises(ConfigError):
            HPA(32, 32, groups=8, gn_groups=3)

    def test_batch_independence(self):
        torch.manual_seed(1)
        hpa = HPA(32, 32).double()
        x = torch.randn(2, 32, 4, 4, dtype=torch.float64)
        both = hpa(x)
        torch.testing.assert_close(both[0:1], hpa(x[0:1]), atol=1e-12, rtol=0)
        torch.testing.assert_close(both[1:2], hpa(x[1:2]), atol=1e-12, rtol=0)
        torch.testing.assert_close(hpa(x.flip(0)), both.flip(0), atol=1e-12, rtol=0)

    def test_gradcheck(self):
        torch.manual_seed(2)
        hpa = HPA(16, 16, groups=4, gn_groups=2).double()
        perturb_zero_init(hpa)
        x = torch.randn(1, 16, 3, 3, dtype=torch.float64, requires_grad=True)
        assert torch.autograd.gradcheck(hpa, (x,), eps=1e-6, atol=1e-5, rtol=1e-3)


class TestPatchVector:
    def test_zero_hpa(self):
        f4 = torch.rand(3, 8, 7, 7)
        torch.testing.assert_close(patch_vector(f4, torch.zeros(3, 8, 3, 3)), f4.mean(dim=(2, 3)))

    def test_constant_map(self):
        v = patch_vector(torch.full((1, 8, 7, 7), 0.25), torch.zeros(1, 8, 3, 3))
        assert torch.all(v == 0.25)

    def test_channel_mismatch(self):
        with pytest.raises(ValueError):
            patch_vector(torch.rand(1, 8, 7, 7), torch.rand(1, 4, 3, 3))


class TestEmbedding:
    def test_zero_weights_gives_positions(self):
        emb = PatchEmbedding(128, 128, 10)
        with torch.no_grad():
            emb.proj.weight.zero_()
            emb.proj.bias.zero_()
        out = emb(torch.randn(1, 10, 128))
        assert out.shape == (1, 10, 128)
        assert torch.equal(out, emb.pos)

    def test_order_changes_rows(self):
        torch.manual_seed(0)
        emb = PatchEmbedding(8, 8, 4)
        v = torch.randn(1, 4, 8)
        a = emb(v)
        b = emb(v[:, [1, 0, 2, 3]])
        assert not torch.allclose(a[:, 0], b[:, 1])
        torch.testing.assert_close(a[:, 2:], b[:, 2:])

    def test_positional_table_is_standard_normal(self):
        torch.manual_seed(0)
        pos = PatchEmbedding(16, 256, 64).pos.detach().numpy().ravel()
        assert abs(pos.mean()) < 0.02 and abs(pos.std() - 1) < 0.02

    def test_wrong_patch_count(self):
        with pytest.raises(CheckpointError):
            PatchEmbedding(8, 8, 4)(torch.randn(1, 5, 8))


class TestAttention:
    def test_rows_sum_to_one(self):
        torch.manual_seed(0)
        attn = MultiHeadSelfAttention(128, 8)
        y, a = attn(torch.randn(2, 10, 128), return_attention=True)
        assert y.shape == (2, 10, 128)
        assert a.shape == (2, 8, 10, 10)
        assert (a.sum(-1) - 1).abs().max() <= 1e-6

    def test_single_token(self):
        torch.manual_seed(1)
        attn = MultiHeadSelfAttention(16, 8)
        x = torch.randn(3, 1, 16)
        y, a = attn(x, return_attention=True)
        assert torch.all(a == 1)
        # V_m = out(v(x)), an affine map
        torch.testing.assert_close(y, attn.out(attn.v(x)))

    def test_duplicate_tokens(self):
        torch.manual_seed(2)
        attn = MultiHeadSelfAttention(16, 8)
        x = torch.randn(1, 4, 16)
        x[:, 2] = x[:, 0]
        y = attn(x)
        torch.testing.assert_close(y[:, 0], y[:, 2])

    def test_indivisible(self):
        with pytest.raises(ConfigError):
            MultiHeadSelfAttention(20, 8)


class TestFeedForward:
    def test_layer_norm_rows(self):
        torch.manual_seed(0)
        ffn = FeedForward(32, affine=False)
        out = ffn(torch.randn(2, 5, 32), torch.randn(2, 5, 32))
        assert out.shape == (2, 5, 32)
        np.testing.assert_allclose(out.mean(-1).detach().numpy(), 0, atol=1e-6)
        np.testing.assert_allclose(out.var(-1, unbiased=False).detach().numpy(), 1, atol=1e-4)

    def test_gradcheck_with_attention(self):
        torch.manual_seed(1)
        attn = MultiHeadSelfAttention(16, 8).double()
        ffn = FeedForward(16).double()
        x = torch.randn(1, 4, 16, dtype=torch.float64, requires_grad=True)
        assert torch.autograd.gradcheck(lambda t: ffn(attn(t), t), (x,), eps=1e-6, atol=1e-5, rtol=1e-3)


class TestScoreHead:
    def test_identical_rows(self):
        head = ScoreHead(8)
        row = torch.randn(8)
        tokens = row.expand(1, 5, 8)
        torch.testing.assert_close(head(tokens), head.fc(row).view(1))

    def test_constant_head(self):
        head = ScoreHead(8)
        with torch.no_grad():
            head.fc.weight.zero_()
            head.fc.bias.fill_(2.5)
        assert torch.all(head(torch.randn(3, 4, 8)) == 2.5)

    def test_linear_in_weight(self):
        torch.manual_seed(3)
        head = ScoreHead(8)
        t = torch.randn(2, 4, 8)
        base = head(t) - head.fc.bias
        with torch.no_grad():
            head.fc.weight.mul_(2)
        torch.testing.assert_close(head(t) - head.fc.bias, 2 * base)


class TestFullModel:
    def test_finite_and_deterministic(self):
        model = QualityModel(REDUCED).eval()
        x = torch.rand(2, 3, 3, 64, 64)
        a, b = model(x), model(x)
        assert a.shape == (2,)
        assert torch.isfinite(a).all()
        assert torch.equal(a, b)

    def test_global_rng_untouched(self):
        torch.manual_seed(123)
        expected = torch.rand(3)
        torch.manual_seed(123)
        QualityModel(REDUCED)
        torch.testing.assert_close(torch.rand(3), expected)

    def test_patch_permutation_invariant_without_positions(self):
        torch.manual_seed(4)
        model = QualityModel(REDUCED).eval()
        with torch.no_grad():
            model.embed.pos.zero_()
        x = torch.rand(1, 3, 3, 64, 64)
        torch.testing.assert_close(model(x), model(x[:, [2, 0, 1]]), atol=1e-5, rtol=0)

    def test_positions_make_order_matter(self):
        model = QualityModel(REDUCED).eval()
        x = torch.rand(1, 3, 3, 64, 64)
        assert not torch.allclose(model(x), model(x[:, [2, 0, 1]]))

    def test_gradient_presence_sweep(self):
        model = QualityModel(REDUCED)
        perturb_zero_init(model)
        model.train()
        x = torch.rand(2, 3, 3, 64, 64)
        model(x).sum().backward()
        missing = [n for n, p in model.named_parameters()
                   if p.requires_grad and (p.grad is None or p.grad.abs().max() == 0)]
        assert missing == []
        assert all(p.grad is None for p in model.backbone.parameters())

    def test_reduced_model_finite_differences(self):
        model = QualityModel(REDUCED).double()
        perturb_zero_init(model)
        model.eval()
        x = torch.rand(2, 3, 3, 64, 64, dtype=torch.float64)
        params = [p for p in model.parameters() if p.requires_grad]
        model(x).sum().backward()
        rng = np.random.default_rng(0)
        sizes = np.array([p.numel() for p in params])
        eps = 1e-6
        worst = 0.0
        for _ in range(50):
            pi = rng.choice(len(params), p=sizes / sizes.sum())
            p = params[pi]
            j = int(rng.integers(p.numel()))
            flat = p.data.view(-1)
            old = flat[j].item()
            with torch.no_grad():
                flat[j] = old + eps
                up = model(x).sum().item()
                flat[j] = old - eps
                down = model(x).sum().item()
                flat[j] = old
            num = (up - down) / (2 * eps)
            ana = p.grad.view(-1)[j].item()
            worst = max(worst, abs(ana - num) / max(abs(ana), abs(num), 1e-6))
        assert worst <= 1e-3

    def test_ablations(self):
        x = torch.rand(1, 3, 3, 64, 64)
        for kw in ({"use_hpa": False}, {"use_pdff": False, "use_hpa": False}, {"use_pa": False}):
            cfg = ModelConfig(**{**REDUCED.__dict__, **kw})
            assert QualityModel(cfg)(x).shape == (1,)
        with pytest.raises(ConfigError):
            ModelConfig(use_pdff=False, use_hpa=True)

    def test_trainable_parameter_count(self):
        model = QualityModel(ModelConfig())
        assert sum(p.numel() for p in model.trainable_parameters()) == 774_503
