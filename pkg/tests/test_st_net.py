import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from mdss import synth
from mdss.st_net import (PAD_CELLS, DistillConfig, StConfig, discrepancy, distill_teacher,
                         downsample_mask, dynamic_loss, feature_grid_size, fit_feature_normalization,
                         grid_to_image, images_to_tensor, make_pdn, pdn_forward, rgb_score_maps,
                         train_student)
from oracles import brute_force_majority, sort_threshold_mean

SMALL = (8, 16, 16, 16)


def normal_samples(n, size=64, seed=0):
    return [synth.generate(synth.random_scene(seed + i, size=size), split="train", stem=f"{i:03d}")
            for i in range(n)]


class TestPdn:
    @pytest.mark.parametrize("n,g", [(256, 56), (128, 24), (64, 8)])
    def test_grid_size(self, n, g):
        assert feature_grid_size(n) == g
        net = make_pdn(SMALL)
        assert net(torch.zeros(1, 3, n, n)).shape == (1, 16, g, g)

    def test_default_output_shape(self):
        out = make_pdn()(torch.rand(1, 3, 256, 256))
        assert out.shape == (1, 384, 56, 56)

    def test_receptive_field_is_33(self):
        net = make_pdn(SMALL, seed=3).double()
        x = torch.rand(1, 3, 64, 64, dtype=torch.float64)
        base = net(x)
        # a pixel at (r, c) reaches cell (i, j) iff 4i <= r <= 4i + 32
        y = x.clone()
        y[0, :, 40, 20] += 1.0
        changed = (net(y) - base).abs().sum(1)[0] > 0
        rows = np.flatnonzero(changed.any(1).numpy())
        cols = np.flatnonzero(changed.any(0).numpy())
        assert rows.tolist() == [i for i in range(8) if 4 * i <= 40 <= 4 * i + 32]
        assert cols.tolist() == [j for j in range(8) if 4 * j <= 20 <= 4 * j + 32]

    def test_seeded_init_leaves_global_rng(self):
        torch.manual_seed(5)
        before = torch.rand(1)
        torch.manual_seed(5)
        a = make_pdn(SMALL, seed=1)
        after = torch.rand(1)
        assert torch.equal(before, after)
        assert torch.equal(a.conv1.weight, make_pdn(SMALL, seed=1).conv1.weight)

    def test_non_finite_weights(self):
        net = make_pdn(SMALL)
        with torch.no_grad():
            net.conv2.weight[0, 0, 0, 0] = float("nan")
        with pytest.raises(FloatingPointError, match="conv2"):
            pdn_forward(net, torch.zeros(1, 3, 64, 64))

    def test_feature_normalization(self):
        net = make_pdn(SMALL)
        x = images_to_tensor(normal_samples(3))
        fit_feature_normalization(net, x)
        out = net(x).detach().double()
        np.testing.assert_allclose(out.mean(dim=(0, 2, 3)).numpy(), 0, atol=1e-4)
        np.testing.assert_allclose(out.std(dim=(0, 2, 3), unbiased=False).numpy(), 1, atol=1e-3)


class TestDynamicLoss:
    def test_uniform_grid_returns_max(self):
        D = torch.full((1, 4, 4), 2.0)
        assert float(dynamic_loss(D, torch.ones(1, 4, 4), 0.99)) == 2.0

    def test_single_hot_entry(self):
        D = torch.zeros(1, 10, 10)
        D[0, 3, 3] = 5.0
        assert float(dynamic_loss(D, torch.ones(1, 10, 10), 0.5)) == 5.0

    def test_invalid_d(self):
        with pytest.raises(ValueError):
            dynamic_loss(torch.ones(2, 2), torch.ones(2, 2), 1.0)

    def test_mask_suppresses_background(self):
        D = torch.arange(16.0).view(1, 4, 4)
        M = torch.zeros(1, 4, 4)
        M[0, 0, :2] = 1
        assert float(dynamic_loss(D, M, 0.5)) == pytest.approx(1.0)
        assert float(dynamic_loss(D, M, 0.4, foreground_only=True)) == pytest.approx(1.0)
        assert float(dynamic_loss(D, torch.zeros(1, 4, 4), 0.5, foreground_only=True)) == 0.0

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 2 ** 31), st.integers(2, 20), st.sampled_from([0.5, 0.9, 0.99, 0.999]))
    def test_matches_sort_oracle(self, seed, n, d):
        rng = np.random.default_rng(seed)
        D = rng.integers(0, 4, (n, n)).astype(np.float64) * rng.uniform(size=(n, n))
        M = rng.uniform(size=(n, n)) < 0.7
        got = float(dynamic_loss(torch.from_numpy(D), torch.from_numpy(M), d))
        assert got == pytest.approx(sort_threshold_mean(D, M, d), abs=1e-12)

    def test_gradient_only_through_hard_entries(self):
        D = torch.tensor([[1.0, 2.0], [3.0, 4.0]], requires_grad=True)
        dynamic_loss(D, torch.ones(2, 2), 0.5).backward()
        np.testing.assert_allclose(D.grad.numpy(), [[0, 0], [0.5, 0.5]])


class TestGridMaps:
    def test_downsample_matches_brute_force(self, rng):
        for pad in (0, PAD_CELLS):
            for _ in range(5):
                fg = rng.uniform(size=(64, 64)) < 0.5
                np.testing.assert_array_equal(downsample_mask(fg, 8, 8, pad),
                                              brute_force_majority(fg, 8, 8, pad))

    def test_downsample_extremes(self):
        assert downsample_mask(np.ones((256, 256), bool), 56).all()
        assert not downsample_mask(np.zeros((256, 256), bool), 56, pad_cells=4).any()

    def test_grid_to_image_places_cells_at_receptive_field_centres(self):
        # cell i covers pixels 4i .. 4i+32, centred at 4i + 16
        small = np.zeros((56, 56))
        small[10, 20] = 1.0
        big = grid_to_image(small, 256, 256)
        r, c = np.unravel_index(np.argmax(big), big.shape)
        assert abs(r - (4 * 10 + 16)) <= 2 and abs(c - (4 * 20 + 16)) <= 2

    def test_discrepancy(self):
        a = torch.ones(1, 3, 2, 2)
        assert torch.equal(discrepancy(a, a * 0), torch.full((1, 2, 2), 3.0))


class TestTraining:
    def test_student_loss_decreases(self):
        samples = normal_samples(4)
        teacher = make_pdn(SMALL, seed=0)
        fit_feature_normalization(teacher, images_to_tensor(samples))
        state = train_student(teacher, samples, StConfig(steps=60, lr=3e-3, batch_size=2))
        h = state.loss_history
        assert len(h) == 60 and np.mean(h[-10:]) < np.mean(h[:10])
        maps = rgb_score_maps(teacher, state.student, samples[:2])
        for (m, score), s in zip(maps, samples):
            assert m.shape == (64, 64)
            assert np.all(m[~s.fg] == 0)
            assert score == m.max() >= 0

    def test_student_is_deterministic(self):
        samples = normal_samples(2)
        teacher = make_pdn(SMALL)
        cfg = StConfig(steps=5, batch_size=1)
        a = train_student(teacher, samples, cfg).student
        b = train_student(teacher, samples, cfg).student
        for (k, v), w in zip(a.state_dict().items(), b.state_dict().values()):
            assert torch.equal(v, w), k

    def test_rejects_anomalous(self):
        spec = synth.random_scene(0, size=64)
        bad = synth.generate(spec, [synth.DefectSpec("color_blotch", (32, 32), 5, 0.3)], split="test")
        with pytest.raises(ValueError, match="anomalous"):
            train_student(make_pdn(SMALL), [bad], StConfig(steps=1))

    def test_distillation(self):
        samples = normal_samples(2)
        ref = make_pdn(SMALL, seed=9)
        hist = []
        t = distill_teacher(ref, samples, DistillConfig(steps=40, lr=3e-3), channels=(8, 16, 16, 16),
                            history=hist)
        assert t.out_channels == 16 and np.mean(hist[-5:]) < np.mean(hist[:5])
        with pytest.raises(ValueError, match="channels"):
            distill_teacher(ref, samples, DistillConfig(steps=1), channels=(8, 16, 16, 32))
