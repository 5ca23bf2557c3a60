"""scikit-learn style wrapper around the dense beta-VAE."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import analysis
from .losses import CLI_ALIASES, LOSS_TAGS, CodingLossKind
from .validation import check_choice, check_data, check_positive
from .vae import LOSS_FORMS, VaeConfig, dense_chain, run_training


class BetaVAE(TransformerMixin, BaseEstimator):
    """Beta-VAE with tanh hidden layers, trained with ``lam * D + KL``.

    ``transform`` returns posterior means; ``score_samples`` returns the
    log of the metric-corrected density estimate (prior at the mean times the
    product of posterior widths, scaled by ``a_x^(k/2)``), up to a constant.

    Parameters
    ----------
    latent_dim : int
    hidden : tuple of int
        Trunk widths; the decoder mirrors them.
    lam : float
        Distortion weight, ``1 / beta``.
    loss : str
        Loss tag or alias (``mse``, ``down``, ``up``, ``bce``, ``ssim``).
    reduction : {"sum", "mean"}
    """

    def __init__(self, latent_dim=3, hidden=(128, 64), lam=100.0, loss="square_error",
                 reduction="sum", loss_form="decomposed", epochs=500, batch_size=128,
                 lr=1e-3, random_state=0, informative_threshold=analysis.INFORMATIVE_THRESHOLD):
        self.latent_dim = latent_dim
        self.hidden = hidden
        self.lam = lam
        self.loss = loss
        self.reduction = reduction
        self.loss_form = loss_form
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.random_state = random_state
        self.informative_threshold = informative_threshold

    def _make_config(self, n_features: int) -> VaeConfig:
        check_positive(self.latent_dim, "latent_dim", integer=True)
        check_positive(self.lam, "lam")
        check_positive(self.batch_size, "batch_size", integer=True)
        check_choice(CLI_ALIASES.get(self.loss, self.loss), "loss", LOSS_TAGS)
        check_choice(self.loss_form, "loss_form", LOSS_FORMS)
        widths = [int(w) for w in self.hidden]
        last = "sigmoid" if CLI_ALIASES.get(self.loss, self.loss) == "bce" else "linear"
        enc = dense_chain([n_features, *widths], "tanh", "tanh")
        dec = dense_chain([self.latent_dim, *reversed(widths), n_features], "tanh", last)
        seed = 0 if self.random_state is None else int(self.random_state)
        return VaeConfig(enc, dec, int(self.latent_dim), lam=float(self.lam),
                         loss=CodingLossKind(self.loss, reduction=self.reduction),
                         loss_form=self.loss_form, epochs=int(self.epochs),
                         batch_size=int(self.batch_size), seed=seed, lr=float(self.lr))

    def fit(self, X, y=None):
        X = check_data(X)
        config = self._make_config(X.shape[1])
        state = run_training(config, X)
        self.model_ = state.model
        self.history_ = state.history
        self.n_features_in_ = X.shape[1]
        stats = self.model_.posterior_stats(X)
        self.mean_inv_sigma2_ = np.mean(stats.sigma ** -2.0, axis=0)
        self.informative_ = self.mean_inv_sigma2_ >= self.informative_threshold
        self.variance_ = 0.5 * config.beta * self.mean_inv_sigma2_
        return self

    def _check(self, X):
        check_is_fitted(self, "model_")
        return check_data(X, self.n_features_in_)

    def encode(self, X):
        """Posterior ``(mu, sigma)``."""
        X = self._check(X)
        stats = self.model_.posterior_stats(X)
        return stats.mu, stats.sigma

    def transform(self, X):
        return self.encode(X)[0]

    def inverse_transform(self, Z):
        check_is_fitted(self, "model_")
        Z = check_data(Z, self.model_.config.latent_dim, name="Z")
        return self.model_.decode(Z)

    def score_samples(self, X):
        X = self._check(X)
        logs = analysis.log_probability_estimates(self.model_, X, self.informative_)
        return logs["est_iii"]

    def score(self, X, y=None):
        """Mean negative deterministic objective ``-L_x`` (higher is better)."""
        X = self._check(X)
        return float(-np.mean(analysis.elbo_at_point(self.model_, X)))
