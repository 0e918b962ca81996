import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from meme.distributions import (
    LOG_2PI, CategoricalLikelihood, DiagGaussian, GaussianLikelihood, LaplaceLikelihood,
    gauss_log_prob, gauss_rsample, w2_gaussian_diag,
)
from meme.exceptions import DomainError, ShapeError

from oracles import w2_full

t64 = torch.float64


def gauss(mean, scale):
    return DiagGaussian(torch.as_tensor(mean, dtype=t64), torch.as_tensor(scale, dtype=t64))


class TestRsample:
    def test_zero_noise_returns_mean(self):
        d = gauss([1.0, -2.0], [0.5, 3.0])
        assert torch.equal(gauss_rsample(d, torch.zeros(2, dtype=t64)), d.mean)

    def test_standard_normal_passes_noise_through(self):
        e = torch.tensor([0.3, -1.7], dtype=t64)
        assert torch.equal(gauss_rsample(gauss([0.0, 0.0], [1.0, 1.0]), e), e)

    def test_monte_carlo_mean(self):
        d = gauss([1.5, -0.5, 4.0], [0.2, 2.0, 7.0])
        n = 100_000
        noise = torch.randn((n, 3), generator=torch.Generator().manual_seed(0), dtype=t64)
        draws = gauss_rsample(d, noise)
        tol = 4 * d.scale / math.sqrt(n)
        assert torch.all(torch.abs(draws.mean(0) - d.mean) < tol)

    def test_pathwise_derivative_of_mean_is_one(self):
        mean = torch.tensor([0.1, 0.2], dtype=t64, requires_grad=True)
        d = DiagGaussian(mean, torch.tensor([1.0, 2.0], dtype=t64))
        gauss_rsample(d, torch.tensor([0.7, -0.4], dtype=t64)).sum().backward()
        assert torch.equal(mean.grad, torch.ones(2, dtype=t64))

    def test_leading_sample_axes_allowed(self):
        d = gauss(np.zeros((4, 2)), np.ones((4, 2)))
        assert gauss_rsample(d, torch.zeros((7, 4, 2), dtype=t64)).shape == (7, 4, 2)

    @pytest.mark.parametrize("shape", [(3,), (2, 3), (4, 1)])
    def test_shape_mismatch(self, shape):
        with pytest.raises(ShapeError):
            gauss_rsample(gauss(np.zeros((4, 2)), np.ones((4, 2))), torch.zeros(shape, dtype=t64))

    def test_mean_scale_shape_mismatch(self):
        with pytest.raises(ShapeError):
            gauss([0.0, 1.0], [1.0])


class TestLogProb:
    @pytest.mark.parametrize("x,expected", [(0.0, -0.91894), (1.0, -1.41894)])
    def test_standard_normal_values(self, x, expected):
        v = float(gauss_log_prob(gauss([0.0], [1.0]), torch.tensor([x], dtype=t64)))
        assert v == pytest.approx(expected, abs=1e-5)
        assert v == pytest.approx(-0.5 * LOG_2PI - 0.5 * x * x, abs=1e-15)

    def test_sums_over_latent_axis(self):
        d = gauss([0.0, 1.0], [1.0, 2.0])
        x = torch.tensor([0.5, -1.0], dtype=t64)
        ref = torch.distributions.Normal(d.mean, d.scale).log_prob(x).sum()
        assert float(gauss_log_prob(d, x)) == pytest.approx(float(ref), abs=1e-13)

    @pytest.mark.parametrize("mean,scale", [(0.0, 1.0), (2.5, 0.3), (-1.0, 4.0)])
    def test_integrates_to_one(self, mean, scale):
        x = np.linspace(mean - 15 * scale, mean + 15 * scale, 200_001)
        lp = gauss_log_prob(gauss([mean], [scale]), torch.from_numpy(x).unsqueeze(-1)).numpy()
        assert np.trapezoid(np.exp(lp), x) == pytest.approx(1.0, abs=1e-4)

    @pytest.mark.parametrize("bad", [0.0, -1.0])
    def test_nonpositive_scale(self, bad):
        with pytest.raises(DomainError):
            gauss_log_prob(gauss([0.0], [bad]), torch.zeros(1, dtype=t64))

    def test_broadcast_against_components(self):
        comps = gauss(np.zeros((5, 2)), np.ones((5, 2)))
        z = torch.zeros((3, 1, 2), dtype=t64)
        assert gauss_log_prob(comps, z).shape == (3, 5)


class TestWasserstein:
    def test_identity(self):
        d = gauss([0.3, 1.0], [0.5, 2.0])
        assert float(w2_gaussian_diag(d, d)) == 0.0

    def test_one_dimensional_shift(self):
        assert float(w2_gaussian_diag(gauss([0.0], [1.0]), gauss([3.0], [1.0]))) == 9.0

    def test_difference_not_sum_of_means(self):
        a, b = gauss([1.0], [1.0]), gauss([1.0], [1.0])
        assert float(w2_gaussian_diag(a, b)) == 0.0

    def test_matches_full_covariance_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            k = int(rng.integers(1, 6))
            m1, m2 = rng.normal(size=k) * 3, rng.normal(size=k) * 3
            s1, s2 = np.exp(rng.normal(size=k)), np.exp(rng.normal(size=k))
            got = float(w2_gaussian_diag(gauss(m1, s1), gauss(m2, s2)))
            ref = w2_full(m1, np.diag(s1 ** 2), m2, np.diag(s2 ** 2))
            assert got == pytest.approx(ref, abs=1e-9, rel=1e-9)

    def test_metric_axioms_on_random_triples(self):
        rng = np.random.default_rng(1)
        n, k = 1000, 3
        m = torch.from_numpy(rng.normal(size=(3, n, k)) * 2)
        s = torch.from_numpy(np.exp(rng.normal(size=(3, n, k))))
        a, b, c = (DiagGaussian(m[i], s[i]) for i in range(3))
        dab = torch.sqrt(w2_gaussian_diag(a, b))
        dba = torch.sqrt(w2_gaussian_diag(b, a))
        dbc = torch.sqrt(w2_gaussian_diag(b, c))
        dac = torch.sqrt(w2_gaussian_diag(a, c))
        assert torch.all(dab >= 0)
        assert torch.allclose(dab, dba, atol=1e-9, rtol=0)
        assert torch.all(dac <= dab + dbc + 1e-9)
        assert torch.all(w2_gaussian_diag(a, a) == 0)
        assert torch.all(dab > 0)

    @settings(max_examples=200, deadline=None)
    @given(
        arrays(np.float64, 3, elements=st.floats(-50, 50)),
        arrays(np.float64, 3, elements=st.floats(-50, 50)),
        arrays(np.float64, 3, elements=st.floats(1e-3, 50)),
        arrays(np.float64, 3, elements=st.floats(1e-3, 50)),
    )
    def test_symmetric_nonnegative(self, m1, m2, s1, s2):
        a, b = gauss(m1, s1), gauss(m2, s2)
        d = float(w2_gaussian_diag(a, b))
        assert d >= 0
        assert d == float(w2_gaussian_diag(b, a))

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            w2_gaussian_diag(gauss([0.0, 1.0], [1.0, 1.0]), gauss([0.0], [1.0]))


class TestLikelihoods:
    @pytest.mark.parametrize("cls,loc,scale", [(LaplaceLikelihood, 0.4, 0.1), (LaplaceLikelihood, -2.0, 1.5),
                                               (GaussianLikelihood, 1.0, 0.7)])
    def test_integrates_to_one(self, cls, loc, scale):
        x = np.linspace(loc - 40 * scale, loc + 40 * scale, 400_001)
        lik = cls(torch.full((1,), loc, dtype=t64), scale)
        lp = lik.log_prob(torch.from_numpy(x).unsqueeze(-1)).numpy()
        assert np.trapezoid(np.exp(lp), x) == pytest.approx(1.0, abs=1e-4)

    def test_laplace_matches_torch(self):
        loc = torch.tensor([[0.1, 0.5, -0.3]], dtype=t64)
        x = torch.tensor([[0.0, 1.0, 2.0]], dtype=t64)
        ref = torch.distributions.Laplace(loc, 0.1).log_prob(x).sum(-1)
        assert torch.allclose(LaplaceLikelihood(loc, 0.1).log_prob(x), ref, atol=1e-12)

    def test_laplace_image_event_dims(self):
        loc = torch.zeros((2, 1, 4, 4), dtype=t64)
        assert LaplaceLikelihood(loc, 0.1, event_ndim=3).log_prob(loc).shape == (2,)

    def test_laplace_rejects_nonpositive_scale(self):
        with pytest.raises(DomainError):
            LaplaceLikelihood(torch.zeros(3, dtype=t64), 0.0)

    def test_categorical_normalised(self):
        logits = torch.randn((2, 5, 7), generator=torch.Generator().manual_seed(0), dtype=t64)
        lik = CategoricalLikelihood(logits, event_ndim=1)
        # normalisation factorises over positions
        per_pos = torch.logsumexp(torch.log_softmax(logits, -1), -1)
        assert torch.allclose(per_pos, torch.zeros_like(per_pos), atol=1e-12)
        x = torch.randint(0, 7, (2, 5), generator=torch.Generator().manual_seed(1))
        ref = torch.distributions.Categorical(logits=logits).log_prob(x).sum(-1)
        assert torch.allclose(lik.log_prob(x), ref, atol=1e-12)
        assert lik.mode.shape == (2, 5)

    def test_categorical_rejects_nonfinite(self):
        with pytest.raises(DomainError):
            CategoricalLikelihood(torch.tensor([[0.0, float("inf")]]))
