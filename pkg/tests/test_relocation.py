import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from relocgan.networks import ConfigError
from relocgan.relocation import (ALPHA_SHRINK, AdaptiveOffsetNets, AlphaModules, DeltaW, UnifiedDelta,
                                 constant_nets_like, extend, interpolate, offsets_of, relocate_alpha,
                                 relocate_constant, relocate_unified, trainable_count)


class TestExtend:
    def test_rows_are_copies(self):
        w = torch.randn(3, 5)
        e = extend(w, 4)
        assert e.shape == (3, 4, 5)
        for i in range(4):
            assert torch.equal(e[:, i], w)
        e[0, 0, 0] = 99.0  # writable, not a broadcast view
        assert w[0, 0] != 99.0

    def test_single_vector(self):
        assert extend(torch.zeros(5), 3).shape == (3, 5)


class TestConstant:
    def test_zero_init_is_identity(self, toy_arch):
        dw = DeltaW.for_arch(toy_arch)
        w = torch.randn(4, 11, 64)
        assert torch.equal(dw(w), w)
        assert trainable_count(dw) == 704

    @given(st.integers(0, 2**31 - 1))
    @settings(max_examples=25, deadline=None)
    def test_relocation_preserves_differences(self, seed):
        # A constant shift is an isometry: pairwise differences survive exactly (up to fp rounding).
        g = torch.Generator().manual_seed(seed)
        w = torch.randn(6, 4, 3, generator=g, dtype=torch.float64)
        delta = torch.randn(4, 3, generator=g, dtype=torch.float64)
        t = relocate_constant(w, delta)
        np.testing.assert_allclose((t[1:] - t[:-1]).numpy(), (w[1:] - w[:-1]).numpy(), atol=1e-12)

    def test_offset_is_recovered(self):
        delta = torch.randn(4, 3)
        w = torch.randn(10, 4, 3)
        np.testing.assert_allclose((relocate_constant(w, delta) - w).numpy(),
                                   delta.expand(10, -1, -1).numpy(), atol=1e-6)

    def test_shape_mismatch(self):
        with pytest.raises(ConfigError):
            relocate_constant(torch.zeros(2, 4, 3), torch.zeros(5, 3))


class TestUnified:
    def test_same_offset_every_row(self):
        u = UnifiedDelta(3)
        with torch.no_grad():
            u.offset.copy_(torch.tensor([1.0, -2.0, 0.5]))
        w = torch.zeros(2, 4, 3)
        out = u(w)
        assert torch.equal(out, torch.tensor([1.0, -2.0, 0.5]).expand(2, 4, 3))
        assert trainable_count(u) == 3

    def test_shape_mismatch(self):
        with pytest.raises(ConfigError):
            relocate_unified(torch.zeros(2, 4, 3), torch.zeros(4))


class TestAdaptive:
    def test_zero_output_layer_is_identity(self):
        nets = AdaptiveOffsetNets(4, 6)
        w = torch.randn(5, 4, 6)
        assert torch.equal(nets(w), w)

    def test_constant_function_nets(self):
        delta = torch.randn(4, 6)
        nets = constant_nets_like(delta)
        w = torch.randn(7, 4, 6)
        off = offsets_of(nets, w)
        assert torch.equal(off, delta.expand(7, -1, -1))

    def test_row_count_error(self):
        with pytest.raises(ConfigError):
            AdaptiveOffsetNets(4, 6)(torch.zeros(2, 5, 6))


class TestAlpha:
    def test_alpha_bounds_many_samples(self, toy_arch):
        # large weights push tanh towards saturation; outputs must stay strictly inside (-1, 1)
        torch.manual_seed(0)
        mods = AlphaModules.for_arch(toy_arch)
        with torch.no_grad():
            for net in mods.nets:
                net.fc2.weight.normal_(0, 50.0)
        w = torch.randn(100_000, 11, 64)
        with torch.no_grad():
            a = mods.alphas(w)
        assert a.shape == (100_000, 4)
        # the raw tanh saturates to exactly +-1 for many of these samples
        assert (a.abs() == ALPHA_SHRINK).any()
        assert torch.all(a > -1) and torch.all(a < 1)

    def test_intensity_endpoints(self):
        mods = AlphaModules([[0, 1], [2]], 3)
        delta = torch.ones(3, 3)
        w = torch.zeros(1, 3, 3)
        doubled = relocate_alpha(w, delta, mods, alpha_values=torch.tensor([[1.0, 1.0]]))
        cancelled = relocate_alpha(w, delta, mods, alpha_values=torch.tensor([[-1.0, -1.0]]))
        assert torch.equal(doubled, 2 * delta[None])
        assert torch.equal(cancelled, torch.zeros(1, 3, 3))

    def test_alpha_shared_within_block(self):
        mods = AlphaModules([[0, 1], [2]], 3)
        delta = torch.ones(3, 3)
        out = relocate_alpha(torch.zeros(1, 3, 3), delta, mods, alpha_values=torch.tensor([[0.5, -0.5]]))
        np.testing.assert_allclose(out[0, :, 0].numpy(), [1.5, 1.5, 0.5])

    def test_zero_init_reduces_to_constant(self, toy_arch):
        mods = AlphaModules.for_arch(toy_arch)
        w = torch.randn(3, 11, 64)
        delta = torch.randn(11, 64)
        assert torch.equal(relocate_alpha(w, delta, mods), relocate_constant(w, delta))

    def test_layer_mismatch(self):
        with pytest.raises(ConfigError):
            relocate_alpha(torch.zeros(1, 4, 3), torch.zeros(4, 3), AlphaModules([[0, 1], [2]], 3))


class TestInterpolate:
    def test_endpoints(self):
        w = torch.randn(5, 4, 3)
        delta = torch.randn(4, 3)
        assert torch.equal(interpolate(w, delta, 0.0), w)
        assert torch.equal(interpolate(w, delta, 1.0), relocate_constant(w, delta))

    @given(st.floats(-1.0, 2.0, allow_nan=False))
    @settings(max_examples=30, deadline=None)
    def test_linear_in_lambda(self, lam):
        w = torch.randn(2, 4, 3, dtype=torch.float64)
        delta = torch.randn(4, 3, dtype=torch.float64)
        np.testing.assert_allclose((interpolate(w, delta, lam) - w).numpy(), (lam * delta).expand(2, -1, -1).numpy(),
                                   atol=1e-12)
