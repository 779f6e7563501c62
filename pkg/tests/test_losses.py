"""Attract/repel losses against an independent scalar-loop oracle."""

import math

import numpy as np
import pytest
import torch

import ktgraph as kt
from ktgraph import AttentionMap, LossDesign, NodeOutput
from ktgraph.losses import CropPair, crop_attention, l2_normalize

import oracles
from conftest import random_probs


def make_output(probs: torch.Tensor, attention: torch.Tensor, sizes=(3,)) -> NodeOutput:
    logits = probs.clamp_min(1e-9).log()
    return NodeOutput(logits, probs, AttentionMap(attention, tuple(sizes)))


class TestProbKl:
    def test_identical_distributions_zero(self):
        p = torch.tensor([[0.5, 0.5]], dtype=torch.float64)
        assert kt.prob_kl(p, p).item() == pytest.approx(0.0, abs=1e-12)

    def test_spot_value(self):
        p_s = torch.tensor([[0.5, 0.5]], dtype=torch.float64)
        p_t = torch.tensor([[0.25, 0.75]], dtype=torch.float64)
        assert kt.prob_kl(p_s, p_t).item() == pytest.approx(0.143841, abs=1e-6)

    def test_one_hot_against_uniform(self):
        p_s = torch.tensor([[1.0, 0.0]], dtype=torch.float64)
        p_t = torch.tensor([[0.5, 0.5]], dtype=torch.float64)
        assert kt.prob_kl(p_s, p_t).item() == pytest.approx(math.log(2), abs=1e-9)

    def test_nonnegative_and_zero_iff_equal(self):
        """Checked on a grid of 2- and 3-class distributions."""
        grid = np.linspace(0.0, 1.0, 21)
        for a in grid:
            for b in grid:
                p = torch.tensor([[a, 1 - a]], dtype=torch.float64)
                q = torch.tensor([[b, 1 - b]], dtype=torch.float64)
                v = kt.prob_kl(p, q).item()
                assert v >= -1e-15
                if abs(a - b) > 1e-9:
                    assert v > 0
                else:
                    assert v == pytest.approx(0.0, abs=1e-9)
        step = np.linspace(0.05, 0.9, 8)
        for a in step:
            for b in step:
                if a + b >= 1.0:
                    continue
                p = torch.tensor([[a, b, 1 - a - b]], dtype=torch.float64)
                assert kt.prob_kl(p, p).item() == pytest.approx(0.0, abs=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="shape"):
            kt.prob_kl(torch.ones(2, 3) / 3, torch.ones(2, 4) / 4)

    def test_matches_oracle_on_random_batches(self):
        rng = np.random.default_rng(42)
        for c in (2, 5, 10):
            p_s = random_probs(rng, 16, c)
            p_t = random_probs(rng, 16, c)
            got = kt.prob_kl(p_s, p_t)
            want = [oracles.kl_per_sample(p_s[i], p_t[i]) for i in range(16)]
            np.testing.assert_allclose(got.numpy(), want, atol=1e-9)


class TestProbCosine:
    def test_self_similarity_is_one(self):
        rng = np.random.default_rng(0)
        p = random_probs(rng, 8, 5)
        np.testing.assert_allclose(kt.prob_cosine(p, p).numpy(), 1.0, atol=1e-12)

    def test_orthogonal_one_hots(self):
        p_s = torch.tensor([[1.0, 0.0]], dtype=torch.float64)
        p_t = torch.tensor([[0.0, 1.0]], dtype=torch.float64)
        assert kt.prob_cosine(p_s, p_t).item() == pytest.approx(0.0, abs=1e-12)

    def test_spot_value(self):
        p_s = torch.tensor([[0.5, 0.5]], dtype=torch.float64)
        p_t = torch.tensor([[1.0, 0.0]], dtype=torch.float64)
        assert kt.prob_cosine(p_s, p_t).item() == pytest.approx(
            1 / math.sqrt(2), abs=1e-9
        )

    def test_range_for_probability_vectors(self):
        rng = np.random.default_rng(1)
        p_s, p_t = random_probs(rng, 64, 7), random_probs(rng, 64, 7)
        vals = kt.prob_cosine(p_s, p_t)
        assert ((vals >= 0) & (vals <= 1 + 1e-12)).all()

    def test_zero_vector_guarded(self):
        z = torch.zeros(1, 4, dtype=torch.float64)
        assert torch.isfinite(kt.prob_cosine(z, z)).all()


class TestCropAttention:
    def test_centered_window(self):
        grid = torch.zeros(1, 7, 7)
        grid[0, 3, 3] = 1.0
        pairs = crop_attention(grid, grid, [3])
        want = grid[0, 2:5, 2:5].reshape(1, 9)
        assert torch.equal(pairs[0].q_s, want)
        assert torch.equal(pairs[0].q_t, want)

    def test_corner_peak_clamped(self):
        grid = torch.zeros(1, 7, 7)
        grid[0, 0, 0] = 1.0
        pairs = crop_attention(grid, grid, [3])
        want = grid[0, 0:3, 0:3].reshape(1, 9)
        assert torch.equal(pairs[0].q_s, want)

    def test_two_sizes_give_two_pairs(self):
        rng = np.random.default_rng(3)
        q_s = torch.from_numpy(rng.random((4, 8, 8)))
        q_t = torch.from_numpy(rng.random((4, 8, 8)))
        pairs = crop_attention(q_s, q_t, [3, 5])
        assert len(pairs) == 2
        assert pairs[0].q_s.shape == (4, 9)
        assert pairs[1].q_s.shape == (4, 25)

    def test_windows_match_oracle(self):
        rng = np.random.default_rng(4)
        grid_s = rng.random((6, 9, 11))
        grid_t = rng.random((6, 9, 11))
        pairs = crop_attention(torch.from_numpy(grid_s), torch.from_numpy(grid_t), [3, 5])
        for n in range(6):
            want = oracles.crop_pairs(grid_s[n], grid_t[n], [3, 5])
            for k, pair in enumerate(pairs):
                np.testing.assert_allclose(pair.q_s[n].numpy(), want[k][0])
                np.testing.assert_allclose(pair.q_t[n].numpy(), want[k][1])

    def test_peak_tie_breaks_row_major(self):
        grid = torch.zeros(1, 5, 5)
        grid[0, 1, 4] = 1.0
        grid[0, 3, 0] = 1.0  # same value, later in row-major order
        peaks = AttentionMap(grid, (3,)).peaks()
        assert peaks.tolist() == [[1, 4]]

    def test_even_size_rejected(self):
        grid = torch.ones(1, 6, 6)
        with pytest.raises(ValueError, match="even"):
            crop_attention(grid, grid, [4])

    def test_oversized_crop_rejected(self):
        grid = torch.ones(1, 6, 6)
        with pytest.raises(ValueError, match="exceeds"):
            crop_attention(grid, grid, [7])

    def test_windows_inside_bounds_and_coincide(self):
        rng = np.random.default_rng(5)
        for _ in range(25):
            h, w = rng.integers(5, 12, size=2)
            k = int(rng.choice([3, 5]))
            if k > min(h, w):
                continue
            grid_s = torch.from_numpy(rng.random((3, h, w)))
            grid_t = torch.from_numpy(rng.random((3, h, w)))
            (pair,) = crop_attention(grid_s, grid_t, [k])
            for n in range(3):
                window = pair.q_s[n].reshape(k, k)
                found = False
                for r0 in range(h - k + 1):
                    for c0 in range(w - k + 1):
                        if torch.equal(window, grid_s[n, r0 : r0 + k, c0 : c0 + k]):
                            if torch.equal(
                                pair.q_t[n].reshape(k, k),
                                grid_t[n, r0 : r0 + k, c0 : c0 + k],
                            ):
                                found = True
                assert found, "crop window not found at a shared in-bounds position"


class TestAttentionLosses:
    def test_identical_crops(self):
        q = torch.rand(5, 9, dtype=torch.float64)
        pairs = [CropPair(q, q.clone(), 3)]
        np.testing.assert_allclose(kt.attn_mse(pairs).numpy(), 0.0, atol=1e-12)
        np.testing.assert_allclose(kt.attn_cosine(pairs).numpy(), 1.0, atol=1e-12)

    def test_orthogonal_normalized_crops(self):
        q_s = torch.tensor([[1.0, 0.0]], dtype=torch.float64)
        q_t = torch.tensor([[0.0, 1.0]], dtype=torch.float64)
        pairs = [CropPair(q_s, q_t, 1)]
        assert kt.attn_mse(pairs).item() == pytest.approx(2.0, abs=1e-12)
        assert kt.attn_cosine(pairs).item() == pytest.approx(0.0, abs=1e-12)

    def test_spot_values(self):
        q_s = torch.tensor([[1.0, 0.0]], dtype=torch.float64)
        q_t = torch.tensor([[0.6, 0.8]], dtype=torch.float64)
        pairs = [CropPair(q_s, q_t, 1)]
        assert kt.attn_mse(pairs).item() == pytest.approx(0.8, abs=1e-9)
        assert kt.attn_cosine(pairs).item() == pytest.approx(0.6, abs=1e-9)

    def test_mse_cosine_identity(self):
        """attn_mse == 2 * (1 - attn_cosine) on the same crops."""
        rng = np.random.default_rng(6)
        for _ in range(20):
            pairs = [
                CropPair(
                    torch.from_numpy(rng.random((8, 9))),
                    torch.from_numpy(rng.random((8, 9))),
                    3,
                )
                for _ in range(3)
            ]
            mse = kt.attn_mse(pairs)
            cos = kt.attn_cosine(pairs)
            np.testing.assert_allclose(
                mse.numpy(), (2 * (1 - cos)).numpy(), atol=1e-9
            )

    def test_matches_oracle(self):
        rng = np.random.default_rng(7)
        grid_s = rng.random((10, 12, 12))
        grid_t = rng.random((10, 12, 12))
        sizes = [3, 5, 7]
        pairs = crop_attention(
            torch.from_numpy(grid_s), torch.from_numpy(grid_t), sizes
        )
        got_mse = kt.attn_mse(pairs).numpy()
        got_cos = kt.attn_cosine(pairs).numpy()
        for n in range(10):
            want = oracles.crop_pairs(grid_s[n], grid_t[n], sizes)
            assert got_mse[n] == pytest.approx(
                oracles.attn_mse_per_sample(want), abs=1e-9
            )
            assert got_cos[n] == pytest.approx(
                oracles.attn_cosine_per_sample(want), abs=1e-9
            )


class TestDesignLoss:
    def _pair(self, seed=0, n=4, c=5, side=8):
        rng = np.random.default_rng(seed)
        out_s = make_output(
            random_probs(rng, n, c), torch.from_numpy(rng.random((n, side, side)))
        )
        out_t = make_output(
            random_probs(rng, n, c), torch.from_numpy(rng.random((n, side, side)))
        )
        return out_s, out_t

    def test_both_closer_vanishes_on_identical_outputs(self):
        out, _ = self._pair()
        vals = kt.design_loss(LossDesign.BOTH_CLOSER, out, out)
        np.testing.assert_allclose(vals.numpy(), 0.0, atol=1e-12)

    def test_prob_apart_identical_outputs_is_one(self):
        out, _ = self._pair(1)
        vals = kt.design_loss(LossDesign.PROB_APART, out, out)
        np.testing.assert_allclose(vals.numpy(), 1.0, atol=1e-12)

    def test_both_apart_identical_outputs_is_two(self):
        out, _ = self._pair(2)
        vals = kt.design_loss(LossDesign.BOTH_APART, out, out)
        np.testing.assert_allclose(vals.numpy(), 2.0, atol=1e-12)

    def test_label_hard_rejected(self):
        out_s, out_t = self._pair(3)
        with pytest.raises(ValueError, match="LabelHard"):
            kt.design_loss(LossDesign.LABEL_HARD, out_s, out_t)

    def test_composites_sum_their_parts(self):
        out_s, out_t = self._pair(4)
        kl = kt.prob_kl(out_s.probs, out_t.probs)
        pairs = crop_attention(out_s.attention, out_t.attention, (3,))
        mse = kt.attn_mse(pairs)
        both = kt.design_loss(LossDesign.BOTH_CLOSER, out_s, out_t)
        np.testing.assert_allclose(both.numpy(), (kl + mse).numpy(), atol=1e-12)


class TestGradientContracts:
    def _leaf_pair(self, seed=0, n=3, c=4, side=6):
        rng = np.random.default_rng(seed)
        z_s = torch.from_numpy(rng.normal(size=(n, c))).requires_grad_(True)
        z_t = torch.from_numpy(rng.normal(size=(n, c))).requires_grad_(True)
        a_s = torch.from_numpy(rng.random((n, side, side))).requires_grad_(True)
        a_t = torch.from_numpy(rng.random((n, side, side))).requires_grad_(True)
        out_s = NodeOutput(z_s, torch.softmax(z_s, -1), AttentionMap(a_s, (3,)))
        out_t = NodeOutput(z_t, torch.softmax(z_t, -1), AttentionMap(a_t, (3,)))
        return (z_s, a_s, z_t, a_t), out_s, out_t

    @pytest.mark.parametrize(
        "design",
        [d for d in LossDesign if d is not LossDesign.LABEL_HARD],
    )
    def test_source_gradient_exactly_zero(self, design):
        (z_s, a_s, z_t, a_t), out_s, out_t = self._leaf_pair()
        kt.design_loss(design, out_s, out_t).sum().backward()
        assert z_s.grad is None or torch.equal(z_s.grad, torch.zeros_like(z_s))
        assert a_s.grad is None or torch.equal(a_s.grad, torch.zeros_like(a_s))
        assert z_t.grad is not None or a_t.grad is not None

    @pytest.mark.parametrize(
        "design",
        [d for d in LossDesign if d is not LossDesign.LABEL_HARD],
    )
    def test_target_gradients_match_finite_differences(self, design):
        """Central differences on target logits and attention entries."""
        (z_s, a_s, z_t, a_t), out_s, out_t = self._leaf_pair(seed=11)

        def loss_at(z, a):
            o_t = NodeOutput(z, torch.softmax(z, -1), AttentionMap(a, (3,)))
            return kt.design_loss(design, out_s, o_t).sum()

        loss_at(z_t, a_t).backward()
        eps = 1e-6
        for leaf in (z_t, a_t):
            grad = leaf.grad
            if grad is None:
                continue
            flat = leaf.detach().clone().reshape(-1)
            picks = np.random.default_rng(0).choice(len(flat), size=8, replace=False)
            for idx in picks:
                plus = flat.clone()
                plus[idx] += eps
                minus = flat.clone()
                minus[idx] -= eps
                args_p = [t.detach() for t in (z_t, a_t)]
                args_m = [t.detach() for t in (z_t, a_t)]
                which = 0 if leaf is z_t else 1
                args_p[which] = plus.reshape(leaf.shape)
                args_m[which] = minus.reshape(leaf.shape)
                fd = (loss_at(*args_p) - loss_at(*args_m)).item() / (2 * eps)
                an = grad.reshape(-1)[idx].item()
                assert an == pytest.approx(fd, rel=1e-5, abs=1e-7)
