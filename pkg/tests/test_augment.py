import itertools

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from aide.augment import (DIHEDRAL_GROUP, IDENTITY, TransformDescriptor, apply, distill_pseudo_label,
                          sample_transform)
from aide.core import ArchConfig, SeededRng
from aide.losses import sharpen
from aide.network import build_network, forward

ALL16 = [TransformDescriptor(k, h, v) for k in range(4) for h in (False, True) for v in (False, True)]
descriptors = st.builds(TransformDescriptor, st.integers(0, 3), st.booleans(), st.booleans())


def _as_matrix_action(t):
    # the pixel permutation of t on a generic grid identifies the group element
    g = np.arange(12).reshape(3, 4)
    return apply(t, g).tobytes() + bytes(apply(t, g).shape)


class TestGroup:
    def test_sixteen_codes_eight_elements(self):
        assert len(set(ALL16)) == 8
        assert len({_as_matrix_action(t) for t in ALL16}) == 8
        assert set(DIHEDRAL_GROUP) == set(ALL16)

    def test_equality_matches_pixel_action(self):
        for a, b in itertools.product(ALL16, ALL16):
            assert (a == b) == (_as_matrix_action(a) == _as_matrix_action(b))

    @given(descriptors, descriptors)
    def test_compose_matches_sequential_application(self, a, b):
        g = np.arange(20).reshape(4, 5)
        assert np.array_equal(apply(a.compose(b), g), apply(a, apply(b, g)))

    @given(descriptors)
    def test_inverse(self, t):
        assert t.compose(t.inverse()).is_identity
        assert t.inverse().compose(t) == IDENTITY

    def test_rotation_group_law(self):
        g = np.arange(16).reshape(4, 4)
        r90 = TransformDescriptor(1)
        assert np.array_equal(apply(r90, apply(r90, g)), apply(TransformDescriptor(2), g))


class TestApply:
    def test_identity(self, gen):
        g = gen.random((3, 5, 7))
        assert np.array_equal(apply(IDENTITY, g), g)

    @pytest.mark.parametrize("t", DIHEDRAL_GROUP)
    def test_round_trip_numpy_and_torch(self, t, gen):
        g = gen.random((2, 5, 7))
        assert np.array_equal(apply(t.inverse(), apply(t, g)), g)
        tg = torch.from_numpy(g)
        assert torch.equal(apply(t.inverse(), apply(t, tg)), tg)
        assert np.array_equal(apply(t, tg).numpy(), apply(t, g))

    def test_non_square_rotation_swaps_dimensions(self):
        assert apply(TransformDescriptor(1), np.zeros((3, 5))).shape == (5, 3)

    @given(descriptors, st.integers(0, 2**31 - 1))
    def test_pixel_multiset_preserved(self, t, seed):
        g = np.random.default_rng(seed).integers(0, 9, size=(4, 6))
        assert sorted(apply(t, g).ravel()) == sorted(g.ravel())


class TestSampling:
    def test_reproducible(self):
        r1, r2 = SeededRng(3).split("aug"), SeededRng(3).split("aug")
        seq1 = [sample_transform(r1) for _ in range(50)]
        seq2 = [sample_transform(r2) for _ in range(50)]
        assert [(t.rotation, t.hflip, t.vflip) for t in seq1] == [(t.rotation, t.hflip, t.vflip) for t in seq2]

    def test_uniform_frequency(self):
        rng = SeededRng(0).split("freq")
        counts = {}
        for _ in range(10_000):
            t = sample_transform(rng)
            key = (t.rotation, t.hflip, t.vflip)
            counts[key] = counts.get(key, 0) + 1
        assert len(counts) == 16
        expected = 10_000 / 16
        assert all(abs(c - expected) <= 0.2 * expected for c in counts.values())


def _constant_model(fg):
    def model(x):
        b, _, h, w = x.shape
        f = torch.full((b, h, w), fg, dtype=torch.float32)
        return torch.stack([1 - f, f], 1)
    return model


def _equivariant_model(x):
    # pixelwise function of the image: commutes with every grid permutation
    f = torch.sigmoid(4 * (x[:, 0] - 0.5))
    return torch.stack([1 - f, f], 1)


class TestDistill:
    def test_constant_model(self):
        for K in (1, 3, 8):
            out = distill_pseudo_label(_constant_model(0.7), torch.rand(2, 1, 8, 8), K, 0.5, rng=SeededRng(K))
            want = sharpen(torch.tensor([0.3, 0.7]).view(2, 1, 1), 0.5).view(2)
            assert torch.allclose(out[:, :, 0, 0], want.expand(2, 2), atol=1e-6)

    def test_k1_identity_is_sharpened_forward(self, gen):
        model = build_network(ArchConfig(base_channels=2, depth=3), 0)
        x = torch.from_numpy(gen.random((2, 1, 16, 16)).astype(np.float32))
        out = distill_pseudo_label(model, x, 1, 0.5, transforms=[IDENTITY])
        assert torch.allclose(out, sharpen(forward(model, x), 0.5))

    @pytest.mark.parametrize("K", [1, 2, 5])
    def test_equivariant_mock(self, K, gen):
        x = torch.from_numpy(gen.random((3, 1, 6, 10)).astype(np.float32))
        out = distill_pseudo_label(_equivariant_model, x, K, 0.3, rng=SeededRng(K))
        assert torch.allclose(out, sharpen(_equivariant_model(x), 0.3), atol=1e-6)

    def test_single_image_and_validity(self, gen):
        x = torch.from_numpy(gen.random((1, 8, 8)).astype(np.float32))
        out = distill_pseudo_label(_equivariant_model, x, 4, 0.5, rng=SeededRng(0))
        assert out.shape == (2, 8, 8)
        assert torch.allclose(out.sum(0), torch.ones(8, 8))

    def test_deterministic_given_seed(self, gen):
        model = build_network(ArchConfig(base_channels=2, depth=3), 0)
        x = torch.from_numpy(gen.random((2, 1, 16, 16)).astype(np.float32))
        a = distill_pseudo_label(model, x, 3, 0.5, rng=SeededRng(4))
        b = distill_pseudo_label(model, x, 3, 0.5, rng=SeededRng(4))
        assert torch.equal(a, b)

    @pytest.mark.parametrize("t", DIHEDRAL_GROUP)
    def test_each_transform_maps_back_to_original_frame(self, t):
        x = torch.zeros(1, 1, 4, 6)
        x[..., :2] = 1.0  # foreground only on the left
        out = distill_pseudo_label(_equivariant_model, x, 1, 1.0, transforms=[t])
        assert torch.allclose(out, sharpen(_equivariant_model(x), 1.0), atol=1e-6)

    def test_averaging_reduces_variance(self):
        gen = torch.Generator().manual_seed(0)
        truth = torch.rand(1, 8, 8, generator=gen)

        def noisy(x):
            f = (truth + 0.2 * torch.randn(x.shape[0], 8, 8, generator=gen)).clamp(0, 1)
            return torch.stack([1 - f, f], 1)

        def mse(K):
            errs = []
            for trial in range(100):
                avg = distill_pseudo_label(noisy, torch.zeros(1, 1, 8, 8), K, 1.0, transforms=[IDENTITY] * K,
                                           form="power")
                errs.append(float(((avg[:, 1] - truth) ** 2).mean()))
            return np.mean(errs)

        assert mse(8) <= mse(1)

    def test_argument_errors(self):
        with pytest.raises(ValueError):
            distill_pseudo_label(_equivariant_model, torch.rand(1, 1, 4, 4), 0, 0.5, rng=SeededRng(0))
        with pytest.raises(ValueError):
            distill_pseudo_label(_equivariant_model, torch.rand(1, 1, 4, 4), 2, 0.5)
        with pytest.raises(ValueError):
            distill_pseudo_label(_equivariant_model, torch.rand(1, 1, 4, 4), 2, 0.5, transforms=[IDENTITY])
