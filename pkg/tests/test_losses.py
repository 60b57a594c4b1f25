import numpy as np
import pytest
import torch

from oracle_refs import ref_contrastive, ref_comparison_count, ref_masked_mse
from tmae.errors import (
    DegenerateNorm,
    EmptyMaskSet,
    ShapeMismatch,
    TooFewFrames,
)
from tmae.losses import (
    ContrastiveParams,
    comparison_count,
    cosine_distance,
    frame_features,
    reconstruction_loss,
    temporal_contrastive_loss,
    total_loss,
)
from tmae.masking import make_mask_plan


class TestReconstruction:
    def test_perfect_reconstruction(self, rng):
        plan = make_mask_plan(3, 4, 0.5, seed=0)
        target = torch.tensor(rng.random((3, 4, 4)))
        assert reconstruction_loss(target, target, plan).item() == 0.0

    def test_single_patch_hand_value(self):
        # one masked patch with residual (1,1,1,1): per-patch pixel MSE is 1
        plan = make_mask_plan(1, 2, 0.5, seed=0)
        masked = int(np.nonzero(plan.mask[0])[0][0])
        target = torch.zeros(1, 2, 4)
        pred = torch.zeros(1, 2, 4)
        pred[0, masked] = 1.0
        assert reconstruction_loss(pred, target, plan).item() == pytest.approx(1.0)

    def test_visible_patches_ignored(self, rng):
        plan = make_mask_plan(2, 4, 0.5, seed=1)
        target = torch.tensor(rng.random((2, 4, 9)))
        pred = torch.tensor(rng.random((2, 4, 9)))
        base = reconstruction_loss(pred, target, plan).item()
        altered = pred.clone()
        for t in range(2):
            for i in plan.keep_indices[t]:
                altered[t, i] += torch.tensor(rng.random(9))
        assert reconstruction_loss(altered, target, plan).item() == pytest.approx(base)

    def test_matches_bruteforce(self, rng):
        for seed in range(10):
            T, N, p2 = 4, 6, 8
            plan = make_mask_plan(T, N, 0.6, seed=seed)
            pred = torch.tensor(rng.random((T, N, p2)))
            target = torch.tensor(rng.random((T, N, p2)))
            ours = reconstruction_loss(pred, target, plan).item()
            ref = ref_masked_mse(pred.numpy(), target.numpy(), plan.mask)
            assert ours == pytest.approx(ref, rel=1e-12)

    def test_empty_mask_rejected(self, rng):
        plan = make_mask_plan(2, 4, 0.0, seed=0)
        x = torch.tensor(rng.random((2, 4, 4)))
        with pytest.raises(EmptyMaskSet):
            reconstruction_loss(x, x, plan)

    def test_permutation_invariance(self, rng):
        T, N, p2 = 3, 5, 4
        plan = make_mask_plan(T, N, 0.4, seed=3)
        pred = torch.tensor(rng.random((T, N, p2)))
        target = torch.tensor(rng.random((T, N, p2)))
        base = reconstruction_loss(pred, target, plan).item()
        perm = rng.permutation(N)
        permuted_plan = make_mask_plan(T, N, 0.4, seed=3)
        object.__setattr__(permuted_plan, "mask", plan.mask[:, perm])
        object.__setattr__(
            permuted_plan, "keep_indices",
            np.sort(np.argsort(perm)[plan.keep_indices], axis=1),
        )
        shuffled = reconstruction_loss(pred[:, perm], target[:, perm], permuted_plan).item()
        assert shuffled == pytest.approx(base, rel=1e-12)

    def test_batched_mean(self, rng):
        T, N, p2 = 2, 4, 4
        plans = [make_mask_plan(T, N, 0.5, seed=s) for s in (1, 2)]
        pred = torch.tensor(rng.random((2, T, N, p2)))
        target = torch.tensor(rng.random((2, T, N, p2)))
        batched = reconstruction_loss(pred, target, plans).item()
        singles = [
            reconstruction_loss(pred[i], target[i], plans[i]).item() for i in range(2)
        ]
        assert batched == pytest.approx(sum(singles) / 2, rel=1e-12)


class TestFrameFeatures:
    def test_single_token_per_frame(self, rng):
        plan = make_mask_plan(3, 4, 0.75, seed=0)
        tokens = torch.tensor(rng.random((3, 5)))
        feats = frame_features(tokens, plan)
        assert torch.equal(feats, tokens)

    def test_mean_of_two(self):
        plan = make_mask_plan(1, 2, 0.0, seed=0)
        tokens = torch.tensor([[1.0, 0.0], [0.0, 1.0]])
        feats = frame_features(tokens, plan)
        assert torch.allclose(feats, torch.tensor([[0.5, 0.5]]))

    def test_order_independent(self, rng):
        plan = make_mask_plan(2, 6, 0.5, seed=1)
        tokens = torch.tensor(rng.random((plan.n_visible, 4)))
        base = frame_features(tokens, plan)
        per_frame = plan.N - plan.masked_per_frame
        shuffled = tokens.reshape(2, per_frame, 4)[:, [2, 0, 1], :].reshape(-1, 4)
        assert torch.allclose(frame_features(shuffled, plan), base, rtol=1e-12, atol=1e-15)


class TestCosineDistance:
    def test_identical(self):
        v = torch.tensor([1.0, 2.0, 3.0], dtype=torch.float64)
        assert cosine_distance(v, v).item() == pytest.approx(0.0, abs=1e-12)

    def test_orthogonal(self):
        a = torch.tensor([1.0, 0.0])
        b = torch.tensor([0.0, 1.0])
        assert cosine_distance(a, b).item() == pytest.approx(1.0)

    def test_opposite(self):
        a = torch.tensor([0.5, -2.0])
        assert cosine_distance(a, -a).item() == pytest.approx(2.0)

    def test_scale_invariance(self, rng):
        a = torch.tensor(rng.standard_normal(6))
        b = torch.tensor(rng.standard_normal(6))
        base = cosine_distance(a, b).item()
        assert cosine_distance(3.7 * a, 0.002 * b).item() == pytest.approx(base, rel=1e-9)

    def test_degenerate_norm(self):
        with pytest.raises(DegenerateNorm):
            cosine_distance(torch.zeros(4), torch.ones(4))


class TestContrastive:
    def test_comparison_count_closed_form(self):
        for T in range(2, 13):
            assert comparison_count(T) == ref_comparison_count(T) == T * (T - 1) // 2
        assert comparison_count(10) == 45

    def test_identical_features_zero_loss(self):
        f = torch.ones(5, 3)
        params = ContrastiveParams(tau_p=4, tau_m=0.5)
        assert temporal_contrastive_loss(f, params).item() == pytest.approx(0.0, abs=1e-12)

    def test_hand_worked_example(self):
        # pairs: (1,2) gap 1 d=0 -> 0; (2,3) gap 1 d=1 -> 1; (1,3) gap 2 hinge(1-1)=0
        f = torch.tensor([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
        params = ContrastiveParams(tau_p=1, tau_m=1.0)
        assert temporal_contrastive_loss(f, params).item() == pytest.approx(1 / 3)

    def test_matches_reference(self, rng):
        for trial in range(200):
            T = int(rng.integers(2, 13))
            D = int(rng.integers(2, 17))
            tau_p = int(rng.integers(1, T)) if T > 1 else 1
            tau_m = float(rng.uniform(1e-3, 2.0))
            f = rng.standard_normal((T, D))
            ours = temporal_contrastive_loss(
                torch.tensor(f), ContrastiveParams(tau_p=tau_p, tau_m=tau_m)
            ).item()
            ref = ref_contrastive(f, tau_p, tau_m)
            assert ours == pytest.approx(ref, rel=1e-9, abs=1e-12)

    def test_nonnegative_and_zero_iff(self, rng):
        f = torch.tensor(rng.standard_normal((6, 4)))
        params = ContrastiveParams(tau_p=2, tau_m=0.8)
        assert temporal_contrastive_loss(f, params).item() >= 0.0

    def test_too_few_frames(self):
        with pytest.raises(TooFewFrames):
            temporal_contrastive_loss(torch.ones(1, 4), ContrastiveParams())

    def test_degenerate_norm(self):
        f = torch.ones(3, 2)
        f[1] = 0.0
        with pytest.raises(DegenerateNorm):
            temporal_contrastive_loss(f, ContrastiveParams())

    def test_batched_mean(self, rng):
        f = torch.tensor(rng.standard_normal((3, 5, 4)))
        params = ContrastiveParams(tau_p=2, tau_m=1.0)
        batched = temporal_contrastive_loss(f, params).item()
        singles = [temporal_contrastive_loss(f[i], params).item() for i in range(3)]
        assert batched == pytest.approx(sum(singles) / 3, rel=1e-12)

    def test_pure_positive_when_tau_covers(self, rng):
        f = rng.standard_normal((5, 3))
        loss = temporal_contrastive_loss(
            torch.tensor(f), ContrastiveParams(tau_p=4, tau_m=0.5)
        ).item()
        dists = []
        fn = f / np.linalg.norm(f, axis=1, keepdims=True)
        for t in range(5):
            for u in range(t + 1, 5):
                dists.append((1 - fn[t] @ fn[u]) ** 2)
        assert loss == pytest.approx(sum(dists) / 10, rel=1e-9)


class TestTotalLoss:
    def test_weight_zero(self):
        rec = torch.tensor(0.7, dtype=torch.float64)
        assert total_loss(rec, torch.tensor(9.9, dtype=torch.float64), 0.0).item() == 0.7

    def test_weighted_sum(self):
        out = total_loss(
            torch.tensor(0.2, dtype=torch.float64), torch.tensor(0.3, dtype=torch.float64), 1.0
        )
        assert out.item() == pytest.approx(0.5)

    def test_weight_gradient(self):
        # d(total)/d(weight) equals the contrastive term; check by finite differences
        l_rec = torch.tensor(0.37, dtype=torch.float64)
        l_con = torch.tensor(0.82, dtype=torch.float64)
        h = 1e-6
        fd = (
            total_loss(l_rec, l_con, 0.5 + h).item() - total_loss(l_rec, l_con, 0.5 - h).item()
        ) / (2 * h)
        assert fd == pytest.approx(l_con.item(), rel=1e-6)

    def test_invalid_weight(self):
        with pytest.raises(ValueError):
            total_loss(torch.tensor(0.1), torch.tensor(0.1), 1.5)


class TestContrastiveParams:
    def test_invariants(self):
        with pytest.raises(ValueError):
            ContrastiveParams(tau_p=0)
        with pytest.raises(ValueError):
            ContrastiveParams(tau_m=0.0)
        with pytest.raises(ValueError):
            ContrastiveParams(tau_m=2.5)
        with pytest.raises(ValueError):
            ContrastiveParams(weight=-0.1)
