"""scikit-learn compatible front-end.

``MemeVAE`` wraps model construction, pseudo-bank initialisation and
training behind ``fit``. It consumes two 2-D views; a row that is all-NaN
in one view marks that modality as unobserved for the sample::

    est = MemeVAE(latent_dim=2).fit(S, T)
    Z = est.transform(S)                  # posterior means of q(z|s)
    T_hat = est.generate(S, source="s")   # cross-generation s -> t

Setting ``transform_modality`` lets the estimator sit inside a
``Pipeline`` as a feature extractor for either view.
"""

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import _validation as val
from .data import PairedDataset
from .evaluation import cross_generate, encode_latents, relatedness
from .model import HeadConfig, MemeModel, ModalitySpec
from .objective import ObjectiveConfig, batch_objective
from .training import TrainConfig, init_pseudo_banks, train


class MemeVAE(TransformerMixin, BaseEstimator):
    """Mutually supervised two-view VAE.

    Parameters
    ----------
    latent_dim : int
    hidden : tuple of int
        Hidden widths of every MLP head.
    likelihood_scale : float
        Scale of the Laplace likelihood of both views.
    mc_samples : int
        Number of latents in the ``log q(t|s)`` estimate.
    classifier_weight : float
        Weight on the standalone ``log q(t|s)`` term.
    n_pseudo : int
        Pseudo-inputs per view.
    epochs, batch_size, learning_rate, grad_clip
        Optimiser settings.
    transform_modality : {"s", "t"}
        View encoded by :meth:`transform` when ``modality`` is not given.
    random_state : int
        Seeds initialisation, batching and reparameterisation noise.
    dtype : {"float32", "float64"}
    """

    def __init__(self, latent_dim=2, hidden=(64, 64), likelihood_scale=0.1, mc_samples=16,
                 classifier_weight=10.0, n_pseudo=50, epochs=10, batch_size=64, learning_rate=1e-3,
                 grad_clip=10.0, transform_modality="s", random_state=0, dtype="float32"):
        self.latent_dim = latent_dim
        self.hidden = hidden
        self.likelihood_scale = likelihood_scale
        self.mc_samples = mc_samples
        self.classifier_weight = classifier_weight
        self.n_pseudo = n_pseudo
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.grad_clip = grad_clip
        self.transform_modality = transform_modality
        self.random_state = random_state
        self.dtype = dtype

    def _objective(self):
        return ObjectiveConfig(self.mc_samples, self.classifier_weight, self.n_pseudo)

    def fit(self, S, T):
        """Fit on two views; all-NaN rows mark a missing modality."""
        S, T, mask = val.check_views(S, T)
        self.n_features_s_, self.n_features_t_ = S.shape[1], T.shape[1]
        self.n_features_in_ = self.n_features_s_
        data = PairedDataset(S, T, mask, np.full(len(mask), -1))
        model = MemeModel(
            ModalitySpec("s", (S.shape[1],), likelihood_scale=self.likelihood_scale),
            ModalitySpec("t", (T.shape[1],), likelihood_scale=self.likelihood_scale),
            self.latent_dim, HeadConfig(hidden=tuple(self.hidden)), self.n_pseudo,
            seed=self.random_state, dtype=self.dtype,
        )
        init_pseudo_banks(model, data, seed=self.random_state)
        cfg = TrainConfig(self.epochs, self.batch_size, self.learning_rate, self.random_state,
                          self._objective(), grad_clip=self.grad_clip)
        self.model_, self.history_ = train(model, data, cfg)
        return self

    def _view(self, X, modality):
        m = modality or self.transform_modality
        if m not in ("s", "t"):
            raise ValueError(f"modality must be 's' or 't', got {m!r}")
        X = val.check_view(X, m, allow_missing=False)
        val.check_n_features(X, self.n_features_s_ if m == "s" else self.n_features_t_, m)
        return X, m

    def transform(self, X, modality=None):
        """Posterior means of ``q(z|X)`` for the chosen view."""
        check_is_fitted(self, "model_")
        X, m = self._view(X, modality)
        return encode_latents(self.model_, m, X)

    def encode(self, X, modality=None):
        """Return ``(mean, scale)`` of the posterior for each row."""
        check_is_fitted(self, "model_")
        X, m = self._view(X, modality)
        with torch.no_grad():
            q = self.model_.encode(m, torch.as_tensor(X).to(self.model_.param_dtype))
        return q.mean.numpy(), q.scale.numpy()

    def generate(self, X, source="s", sample=False, random_state=None):
        """Cross-generate the other view from ``X``."""
        check_is_fitted(self, "model_")
        X, m = self._view(X, source)
        gen = torch.Generator().manual_seed(self.random_state if random_state is None else random_state)
        return cross_generate(self.model_, m, X, generator=gen, sample=sample).numpy()

    def relatedness(self, S, T, labels=None):
        """Squared-W2 relatedness report over paired rows of ``S`` and ``T``."""
        check_is_fitted(self, "model_")
        S, _ = self._view(S, "s")
        T, _ = self._view(T, "t")
        return relatedness(self.model_, S, T, labels)

    def score(self, S, T):
        """Mean per-row objective (higher is better), seeded by ``random_state``."""
        check_is_fitted(self, "model_")
        S, T, mask = val.check_views(S, T)
        data = PairedDataset(S, T, mask, np.full(len(mask), -1))
        gen = torch.Generator().manual_seed(self.random_state)
        with torch.no_grad():
            terms = batch_objective(self.model_, data.batch(dtype=self.model_.param_dtype), self._objective(), gen)
        return float(terms.total)
