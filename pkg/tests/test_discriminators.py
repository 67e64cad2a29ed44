import torch
import pytest

from sefgan.config import DiscEnsembleConfig
from sefgan.discriminators import (
    DiscOutput,
    DiscriminatorEnsemble,
    PeriodDiscriminator,
    ScaleDiscriminator,
    fold_period,
)

SMALL = DiscEnsembleConfig(mpd_channels=4, msd_channels=8, max_channels=32)


def make_ensemble(seed=0) -> DiscriminatorEnsemble:
    torch.manual_seed(seed)
    ens = DiscriminatorEnsemble(SMALL)
    ens.eval()
    return ens


class TestFold:
    def test_period_two_length_ten(self):
        x = torch.arange(10.0).view(1, 1, 10)
        folded = fold_period(x, 2)
        assert folded.shape == (1, 1, 2, 5)
        assert folded[0, 0, 0].tolist() == [0.0, 2.0, 4.0, 6.0, 8.0]
        assert folded[0, 0, 1].tolist() == [1.0, 3.0, 5.0, 7.0, 9.0]

    def test_reflect_padding_to_divisible(self):
        x = torch.arange(11.0).view(1, 1, 11)
        folded = fold_period(x, 2)
        assert folded.shape == (1, 1, 2, 6)
        # reflect pad appends sample index 9's value
        assert folded[0, 0, 1, -1].item() == 9.0


class TestPeriodDiscriminator:
    def test_purity(self):
        torch.manual_seed(0)
        disc = PeriodDiscriminator(3, channels=4, max_channels=16).eval()
        x = torch.randn(1, 1, 300)
        a = disc(x)
        b = disc(x)
        assert torch.equal(a.score, b.score)
        assert all(torch.equal(f1, f2) for f1, f2 in zip(a.features, b.features))

    def test_features_non_empty_and_finite(self):
        torch.manual_seed(0)
        disc = PeriodDiscriminator(5, channels=4, max_channels=16)
        out = disc(torch.randn(2, 1, 500))
        assert isinstance(out, DiscOutput)
        assert len(out.features) > 0
        assert torch.isfinite(out.score).all()


class TestScaleDiscriminator:
    def test_scale_zero_runs_on_raw_length(self):
        torch.manual_seed(0)
        disc = ScaleDiscriminator(0, channels=8, max_channels=32).eval()
        out = disc(torch.randn(1, 1, 1600))
        # first conv is stride 1 with symmetric padding
        assert out.features[0].shape[-1] == 1600

    def test_scale_two_pools_to_quarter_length(self):
        torch.manual_seed(0)
        disc = ScaleDiscriminator(2, channels=8, max_channels=32).eval()
        out = disc(torch.randn(1, 1, 16000))
        assert out.features[0].shape[-1] == 4000

    def test_mean_pool_preserves_constants(self):
        x = torch.full((1, 1, 64), 0.37)
        pooled = torch.nn.functional.avg_pool1d(x, 2, 2)
        assert torch.allclose(pooled, torch.full((1, 1, 32), 0.37))


class TestEnsemble:
    def test_exactly_eight_outputs(self):
        ens = make_ensemble()
        outputs = ens(torch.randn(1, 1200))
        assert len(outputs) == 8
        assert len(ens) == 8

    def test_feature_lists_non_empty(self):
        ens = make_ensemble()
        outputs = ens(torch.randn(1, 1200))
        assert all(len(o.features) > 0 for o in outputs)

    def test_ordering_stable_across_calls(self):
        ens = make_ensemble()
        x = torch.randn(1, 1200)
        a = ens(x)
        b = ens(x)
        assert len(a) == len(b)
        for out_a, out_b in zip(a, b):
            assert out_a.score.shape == out_b.score.shape
            assert torch.equal(out_a.score, out_b.score)

    def test_period_then_scale_order(self):
        ens = make_ensemble()
        periods = [d.period for d in ens.period_discs]
        assert periods == sorted(SMALL.periods)
        rounds = [d.pool_rounds for d in ens.scale_discs]
        assert rounds == [0, 1, 2]

    def test_norm_convention(self):
        # Spectral norm on the raw-scale critic, weight norm elsewhere.
        from torch.nn.utils.parametrizations import spectral_norm  # noqa: F401

        ens = make_ensemble()

        def norm_kind(module):
            p = module.parametrizations.weight[0]
            return type(p).__name__

        assert norm_kind(ens.scale_discs[0].convs[0]) == "_SpectralNorm"
        assert norm_kind(ens.scale_discs[1].convs[0]) == "_WeightNorm"
        assert norm_kind(ens.period_discs[0].convs[0]) == "_WeightNorm"
