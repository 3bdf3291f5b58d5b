import itertools

import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings
from hypothesis import strategies as st

from omniqa.deform import (
    DeformConv2d,
    DeformConvSpec,
    DeformField,
    OffsetHead,
    deform_conv,
    zero_field,
)
from omniqa.errors import NumericalError


def random_field(spec, b, h, w, scale=0.7, seed=0, dtype=torch.float64):
    g = torch.Generator().manual_seed(seed)
    ho, wo = spec.output_size(h, w)
    off = scale * torch.randn(b, spec.groups, spec.points, 2, ho, wo, generator=g, dtype=dtype)
    logits = torch.randn(b, spec.groups, spec.points, ho, wo, generator=g, dtype=dtype)
    return DeformField(off, logits)


class TestSpec:
    def test_defaults(self):
        s = DeformConvSpec(8, 8)
        assert (s.kernel, s.groups, s.stride, s.padding, s.points) == (3, 4, 1, 1, 9)
        assert s.output_size(10, 12) == (10, 12)
        assert DeformConvSpec(8, 8, stride=2).output_size(10, 11) == (5, 6)

    def test_invalid(self):
        with pytest.raises(ValueError):
            DeformConvSpec(6, 8, groups=4)
        with pytest.raises(ValueError):
            DeformConvSpec(8, 8, kernel=4)


class TestZeroFieldReduction:
    @pytest.mark.parametrize("k,g,stride", list(itertools.product([3, 7], [1, 4], [1, 2])))
    def test_grouped_conv(self, k, g, stride):
        torch.manual_seed(0)
        c = 8
        spec = DeformConvSpec(c, c, k, g, stride)
        x = torch.randn(2, c, 13, 11, dtype=torch.float64)
        w = torch.randn(c, c // g, k, k, dtype=torch.float64)
        y = deform_conv(x, w, zero_field(spec, 2, 13, 11, torch.float64), spec)
        ref = F.conv2d(x, w / (k * k), stride=stride, padding=k // 2, groups=g)
        assert y.shape == ref.shape
        assert (y - ref).abs().max().item() <= 1e-6

    def test_single_precision(self):
        # float32 differs from the reference conv only in summation order
        torch.manual_seed(0)
        spec = DeformConvSpec(8, 8, 3, 1)
        x = torch.randn(2, 8, 13, 11)
        w = torch.randn(8, 8, 3, 3)
        y = deform_conv(x, w, zero_field(spec, 2, 13, 11), spec)
        torch.testing.assert_close(y, F.conv2d(x, w / 9, padding=1), atol=1e-5, rtol=1e-5)

    def test_with_projection(self):
        torch.manual_seed(1)
        spec = DeformConvSpec(8, 12, 3, 4)
        x = torch.randn(1, 8, 6, 6)
        w = torch.randn(8, 2, 3, 3)
        pw, pb = torch.randn(12, 8, 1, 1), torch.randn(12)
        y = deform_conv(x, w, zero_field(spec, 1, 6, 6), spec, pw, pb)
        ref = F.conv2d(F.conv2d(x, w / 9, padding=1, groups=4), pw, pb)
        torch.testing.assert_close(y, ref, atol=1e-5, rtol=1e-5)


class TestShiftOracle:
    def test_unit_column_offset(self):
        x = torch.arange(2 * 5 * 7, dtype=torch.float64).reshape(1, 2, 5, 7)
        spec = DeformConvSpec(2, 2, kernel=1, groups=2)
        field = zero_field(spec, 1, 5, 7, torch.float64)
        field.offsets[:, :, :, 1] = 1.0
        w = torch.ones(2, 1, 1, 1, dtype=torch.float64)
        y = deform_conv(x, w, field, spec)
        expected = torch.zeros_like(x)
        expected[..., :-1] = x[..., 1:]
        torch.testing.assert_close(y, expected, atol=1e-12, rtol=0)

    def test_half_pixel_offset_interpolates(self):
        x = torch.rand(1, 1, 4, 5, dtype=torch.float64)
        spec = DeformConvSpec(1, 1, kernel=1, groups=1)
        field = zero_field(spec, 1, 4, 5, torch.float64)
        field.offsets[:, :, :, 0] = 0.5
        y = deform_conv(x, torch.ones(1, 1, 1, 1, dtype=torch.float64), field, spec)
        torch.testing.assert_close(y[0, 0, :-1], 0.5 * (x[0, 0, :-1] + x[0, 0, 1:]))
        torch.testing.assert_close(y[0, 0, -1], 0.5 * x[0, 0, -1])


class TestGradients:
    def test_offsets_fd(self):
        spec = DeformConvSpec(4, 4, 3, 2)
        x = torch.rand(1, 4, 6, 6, dtype=torch.float64)
        w = torch.randn(4, 2, 3, 3, dtype=torch.float64)
        field = random_field(spec, 1, 6, 6, seed=3)
        off = field.offsets.clone().requires_grad_(True)

        def f(o):
            return deform_conv(x, w, DeformField(o, field.logits), spec).sum()

        f(off).backward()
        analytic = off.grad
        eps = 1e-6
        flat = off.detach().clone().reshape(-1)
        idx = torch.randperm(flat.numel(), generator=torch.Generator().manual_seed(0))[:40]
        for i in idx:
            p, m = flat.clone(), flat.clone()
            p[i] += eps
            m[i] -= eps
            num = (f(p.view_as(off)) - f(m.view_as(off))) / (2 * eps)
            a = analytic.reshape(-1)[i]
            assert abs(a - num) <= 1e-3 * max(1.0, abs(num.item()))

    def test_gradcheck_all_inputs(self):
        spec = DeformConvSpec(4, 4, 3, 2)
        x = torch.rand(1, 4, 5, 5, dtype=torch.float64, requires_grad=True)
        w = torch.randn(4, 2, 3, 3, dtype=torch.float64, requires_grad=True)
        field = random_field(spec, 1, 5, 5, seed=4)
        off = field.offsets.clone().requires_grad_(True)
        logits = field.logits.clone().requires_grad_(True)
        assert torch.autograd.gradcheck(
            lambda a, b, c, d: deform_conv(a, b, DeformField(c, d), spec), (x, w, off, logits),
            eps=1e-6, atol=1e-5, rtol=1e-3)

    def test_gradient_reaches_input_through_head(self):
        torch.manual_seed(0)
        layer = DeformConv2d(8, 8).double()
        with torch.no_grad():
            layer.offset_head.out.weight.normal_(0, 0.1)
        x = torch.rand(1, 8, 6, 6, dtype=torch.float64, requires_grad=True)
        layer(x).sum().backward()
        assert x.grad.abs().sum() > 0
        assert layer.offset_head.dw.weight.grad.abs().sum() > 0


class TestModulation:
    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000), st.sampled_from([1, 3, 5]))
    def test_sums_to_one(self, seed, k):
        spec = DeformConvSpec(4, 4, k, 2)
        m = random_field(spec, 2, 4, 4, seed=seed).modulation()
        assert (m.sum(dim=2) - 1).abs().max().item() <= 1e-6
        assert m.min().item() >= 0

    def test_non_finite_field(self):
        spec = DeformConvSpec(4, 4)
        field = zero_field(spec, 1, 4, 4)
        field.offsets[0, 0, 0, 0, 0, 0] = float("nan")
        with pytest.raises(NumericalError):
            deform_conv(torch.rand(1, 4, 4, 4), torch.rand(4, 1, 3, 3), field, spec)


class TestLinearity:
    @settings(max_examples=20, deadline=None)
    @given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 1000))
    def test_linear_in_input(self, a, b, seed):
        spec = DeformConvSpec(4, 4, 3, 2, stride=2)
        g = torch.Generator().manual_seed(seed)
        x1 = torch.randn(1, 4, 7, 7, generator=g, dtype=torch.float64)
        x2 = torch.randn(1, 4, 7, 7, generator=g, dtype=torch.float64)
        w = torch.randn(4, 2, 3, 3, generator=g, dtype=torch.float64)
        field = random_field(spec, 1, 7, 7, seed=seed)
        lhs = deform_conv(a * x1 + b * x2, w, field, spec)
        rhs = a * deform_conv(x1, w, field, spec) + b * deform_conv(x2, w, field, spec)
        assert (lhs - rhs).abs().max().item() <= 1e-6


class TestOffsetHead:
    def test_zero_init(self):
        spec = DeformConvSpec(8, 8, 3, 4, stride=2)
        head = OffsetHead(spec)
        field = head(torch.randn(2, 8, 9, 9))
        assert field.offsets.shape == (2, 4, 9, 2, 5, 5)
        assert field.logits.shape == (2, 4, 9, 5, 5)
        assert field.offsets.abs().max() == 0 and field.logits.abs().max() == 0

    def test_channel_mismatch(self):
        with pytest.raises(ValueError):
            OffsetHead(DeformConvSpec(8, 8))(torch.randn(1, 4, 5, 5))

    def test_fresh_layer_is_grouped_conv_plus_projection(self):
        torch.manual_seed(2)
        layer = DeformConv2d(8, 16, kernel=3, groups=4, stride=2)
        x = torch.randn(2, 8, 10, 10)
        ref = F.conv2d(F.conv2d(x, layer.weight / 9, stride=2, padding=1, groups=4),
                       layer.proj.weight, layer.proj.bias)
        torch.testing.assert_close(layer(x), ref, atol=1e-5, rtol=1e-5)
        assert layer(x).shape == (2, 16, 5, 5)
