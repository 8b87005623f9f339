import math

import pytest
import torch

from vlhumor.objective import (
    ContrastiveViews,
    affinity,
    language_perspective_loss,
    log_affinity,
    nce_log_ratio,
    pretrain_loss,
    pretrain_loss_reference,
    video_perspective_loss,
)

LN4 = math.log(4.0)
LN2 = math.log(2.0)


def zero_views(batch=2, dim=12):
    z = torch.zeros(batch, dim, dtype=torch.float64)
    return ContrastiveViews(video=z, video_alt=z.clone(), lang=z.clone(),
                            lang_alt=z.clone(), fused_alt_video=z.clone(),
                            fused_alt_lang=z.clone())


def random_views(batch, dim, seed=0, dtype=torch.float64, scale=1.0):
    g = torch.Generator().manual_seed(seed)
    mk = lambda: torch.randn(batch, dim, generator=g, dtype=dtype) * scale
    return ContrastiveViews(video=mk(), video_alt=mk(), lang=mk(),
                            lang_alt=mk(), fused_alt_video=mk(), fused_alt_lang=mk())


class TestAffinity:
    def test_orthogonal_gives_one(self):
        p = torch.tensor([1.0, 0.0])
        q = torch.tensor([0.0, 1.0])
        assert float(affinity(p, q, 0.37)) == 1.0

    def test_log2_closed_form(self):
        tau = 0.4
        p = torch.tensor([1.0, 0.0])
        q = torch.tensor([tau * LN2, 0.0])
        assert float(affinity(p, q, tau)) == pytest.approx(2.0, rel=1e-12)

    def test_symmetry(self):
        g = torch.Generator().manual_seed(3)
        for _ in range(50):
            p = torch.randn(8, generator=g)
            q = torch.randn(8, generator=g)
            assert float(affinity(p, q, 0.2)) == pytest.approx(float(affinity(q, p, 0.2)))

    def test_scale_temperature_identity(self):
        # f(p, q, tau) == f(c*p, q, c*tau) exactly: both reduce to sim/tau
        g = torch.Generator().manual_seed(4)
        p = torch.randn(6, generator=g, dtype=torch.float64)
        q = torch.randn(6, generator=g, dtype=torch.float64)
        for c in (0.5, 2.0, 7.3):
            a = log_affinity(p, q, 0.3)
            b = log_affinity(c * p, q, c * 0.3)
            assert float(a) == pytest.approx(float(b), rel=1e-12)


class TestNceLogRatio:
    def test_uniform_closed_form(self):
        g = nce_log_ratio(torch.tensor(0.0, dtype=torch.float64),
                          torch.zeros(3, dtype=torch.float64))
        assert float(g) == pytest.approx(-LN4, abs=1e-12)

    def test_dominant_positive(self):
        # pos sim 1 at tau=0.07 vs three zero-sim negatives
        pos = torch.tensor(1 / 0.07, dtype=torch.float64)
        g = nce_log_ratio(pos, torch.zeros(3, dtype=torch.float64))
        assert float(g) == pytest.approx(-1.8746230949773235e-06, rel=1e-6)

    def test_always_non_positive(self):
        gen = torch.Generator().manual_seed(0)
        for _ in range(1000):
            pos = torch.randn((), generator=gen, dtype=torch.float64) * 5
            negs = torch.randn(9, generator=gen, dtype=torch.float64) * 5
            assert float(nce_log_ratio(pos, negs)) <= 0.0

    def test_monotone_in_positive_score(self):
        negs = torch.randn(6, generator=torch.Generator().manual_seed(1), dtype=torch.float64)
        values = [float(nce_log_ratio(torch.tensor(x, dtype=torch.float64), negs))
                  for x in (-2.0, -1.0, 0.0, 1.0, 2.0)]
        assert all(a < b for a, b in zip(values, values[1:]))

    def test_empty_negatives_rejected(self):
        with pytest.raises(ValueError, match="negative"):
            nce_log_ratio(torch.tensor(0.0), torch.zeros(0))


class TestClosedForms:
    def test_zero_sims_b2(self):
        lb = pretrain_loss(zero_views(), 1.0)
        assert float(lb.video_nce) == pytest.approx(6 * LN4 / 2 * 2, abs=1e-9)
        assert float(lb.video_nce) == pytest.approx(8.317766166719343, abs=1e-6)
        assert float(lb.video_norm) == pytest.approx(4.1588830833596715, abs=1e-6)
        assert float(lb.lang_nce) == pytest.approx(8.317766166719343, abs=1e-6)
        assert float(lb.lang_norm) == pytest.approx(4.1588830833596715, abs=1e-6)
        assert float(lb.total) == pytest.approx(24.953298500158032, abs=1e-6)

    def test_breakdown_identities(self):
        lb = pretrain_loss(random_views(4, 8), 0.5)
        assert float(lb.video_total) == float(lb.video_nce) + float(lb.video_norm)
        assert float(lb.lang_total) == float(lb.lang_nce) + float(lb.lang_norm)
        assert float(lb.total) == pytest.approx(
            float(lb.video_total) + float(lb.lang_total), rel=1e-15)
        assert float(lb.per_sample.sum()) == pytest.approx(float(lb.total), rel=1e-12)

    def test_hand_constructed_pm1_sims(self):
        # vectors engineered so every matched sim is +1, every crossed sim -1
        v = torch.tensor([[1.0, 0.0], [0.0, 1.0]], dtype=torch.float64)
        f = torch.tensor([[1.0, -1.0], [-1.0, 1.0]], dtype=torch.float64)
        views = ContrastiveViews(video=v, video_alt=v, lang=f, lang_alt=f,
                                 fused_alt_video=f, fused_alt_lang=v)
        lb = pretrain_loss(views, 1.0)
        # frozen from manual expansion of the twelve ratio terms per perspective
        assert float(lb.video_nce) == pytest.approx(2.0445177234787866, abs=1e-9)
        assert float(lb.video_norm) == pytest.approx(0.7615680662578348, abs=1e-9)
        assert float(lb.total) == pytest.approx(5.612171579473243, abs=1e-9)
        ref = pretrain_loss_reference(views, 1.0)
        assert float(ref.total) == pytest.approx(float(lb.total), rel=1e-12)

    def test_doubling_temperature_equals_halving_sims(self):
        views = random_views(4, 8, seed=5)
        a = pretrain_loss(views, 2.0)
        halved = ContrastiveViews(
            **{k: getattr(views, k) * (0.5 ** 0.5) for k in views.field_names()})
        b = pretrain_loss(halved, 1.0)
        assert float(a.total) == pytest.approx(float(b.total), rel=1e-12)


class TestOracleEquivalence:
    @pytest.mark.parametrize("batch", [2, 4, 6])
    @pytest.mark.parametrize("dim", [4, 16, 64])
    def test_matches_reference(self, batch, dim):
        for seed in range(3):
            views = random_views(batch, dim, seed=seed, scale=1.0 / math.sqrt(dim))
            vec = pretrain_loss(views, 0.7)
            ref = pretrain_loss_reference(views, 0.7)
            for name in ("video_nce", "video_norm", "lang_nce", "lang_norm", "total"):
                a, b = float(getattr(vec, name)), float(getattr(ref, name))
                assert a == pytest.approx(b, rel=1e-5), name

    def test_reference_rejects_large_batches(self):
        with pytest.raises(ValueError, match="32"):
            pretrain_loss_reference(random_views(33, 4), 1.0)


class TestInvariants:
    def test_all_components_non_negative(self):
        for seed in range(40):
            views = random_views(5, 6, seed=seed, scale=2.0)
            lb = pretrain_loss(views, 0.3)
            assert float(lb.video_nce) >= 0
            assert float(lb.video_norm) >= 0
            assert float(lb.lang_nce) >= 0
            assert float(lb.lang_norm) >= 0

    def test_batch_permutation_invariance(self):
        views = random_views(6, 16, seed=9)
        base = pretrain_loss(views, 0.45)
        perm = torch.randperm(6, generator=torch.Generator().manual_seed(1))
        shuffled = pretrain_loss(views.permuted(perm), 0.45)
        assert abs(float(base.total) - float(shuffled.total)) < 1e-9

    def test_swapping_branches_swaps_perspectives(self):
        views = random_views(4, 8, seed=11)
        swapped = ContrastiveViews(
            video=views.lang, video_alt=views.lang_alt,
            lang=views.video, lang_alt=views.video_alt,
            fused_alt_video=views.fused_alt_lang, fused_alt_lang=views.fused_alt_video,
        )
        v_nce, v_norm, _ = video_perspective_loss(views, 0.6)
        l_nce2, l_norm2, _ = language_perspective_loss(swapped, 0.6)
        assert float(v_nce) == pytest.approx(float(l_nce2), rel=1e-12)
        assert float(v_norm) == pytest.approx(float(l_norm2), rel=1e-12)

    def test_batch_of_one_rejected(self):
        with pytest.raises(ValueError, match="batch"):
            pretrain_loss(random_views(1, 4), 1.0)

    def test_normalize_flag_bounds_sims(self):
        views = random_views(3, 8, seed=2, scale=50.0)
        lb = pretrain_loss(views, 0.07, normalize=True)
        ref = pretrain_loss_reference(views, 0.07, normalize=True)
        assert math.isfinite(float(lb.total))
        assert float(lb.total) == pytest.approx(float(ref.total), rel=1e-5)

    def test_large_sims_stay_finite(self):
        # unnormalized vectors with big norms overflow exp(); log-space must not
        views = random_views(3, 8, seed=4, scale=40.0)
        lb = pretrain_loss(views, 0.07)
        assert math.isfinite(float(lb.total))


class TestGradients:
    def test_views_and_temperature_match_finite_differences(self):
        from conftest import finite_difference_gradient, relative_gradient_error

        batch, dim = 3, 8
        gen = torch.Generator().manual_seed(21)
        tensors = {
            name: torch.randn(batch, dim, generator=gen, dtype=torch.float64,
                              requires_grad=True)
            for name in ContrastiveViews.field_names()
        }
        log_temp = torch.tensor(math.log(0.3), dtype=torch.float64, requires_grad=True)
        params = list(tensors.values()) + [log_temp]

        def loss_value():
            views = ContrastiveViews(**tensors)
            return float(pretrain_loss(views, log_temp.exp()).total)

        loss = pretrain_loss(ContrastiveViews(**tensors), log_temp.exp()).total
        loss.backward()
        analytic = torch.cat([p.grad.view(-1) for p in params])
        numeric = finite_difference_gradient(loss_value, params)
        assert relative_gradient_error(analytic, numeric) < 1e-3
