import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError
from sklearn.pipeline import make_pipeline
from sklearn.preprocessing import FunctionTransformer

from rdvae import BetaVAE
from rdvae.datasets import FactorDatasetSpec, generate_toy


@pytest.fixture(scope="module")
def data():
    return generate_toy(FactorDatasetSpec.preset("mix", n_samples=3000, seed=2))


@pytest.fixture(scope="module")
def fitted(data):
    return BetaVAE(latent_dim=4, epochs=40, random_state=2).fit(data.x)


def test_params_roundtrip():
    est = BetaVAE(latent_dim=5, lam=50.0, loss="down")
    params = est.get_params()
    assert params["latent_dim"] == 5 and params["loss"] == "down"
    twin = clone(est)
    assert twin.get_params() == params and twin is not est
    est.set_params(epochs=3)
    assert est.epochs == 3


def test_not_fitted_and_bad_input(data):
    est = BetaVAE()
    with pytest.raises(NotFittedError):
        est.transform(data.x)
    with pytest.raises(ValueError):
        BetaVAE(lam=-1.0, epochs=1).fit(data.x)
    with pytest.raises(ValueError):
        BetaVAE(loss="l1", epochs=1).fit(data.x)
    bad = data.x[:10].copy()
    bad[0, 0] = np.nan
    with pytest.raises(ValueError):
        BetaVAE(epochs=1).fit(bad)


def test_fitted_attributes(fitted, data):
    assert fitted.n_features_in_ == 16
    assert len(fitted.history_) == 40
    assert fitted.informative_.sum() == 3
    Z = fitted.transform(data.x)
    assert Z.shape == (3000, 4)
    mu, sigma = fitted.encode(data.x[:5])
    assert np.all(sigma > 0) and np.allclose(mu, Z[:5])
    with pytest.raises(ValueError):
        fitted.transform(data.x[:, :3])


def test_inverse_transform_reconstructs(fitted, data):
    rec = fitted.inverse_transform(fitted.transform(data.x))
    rel = np.mean(np.sum((rec - data.x) ** 2, axis=1)) / np.mean(np.sum(data.x ** 2, axis=1))
    assert rel < 0.05


def test_score_samples_tracks_density(fitted, data):
    s = fitted.score_samples(data.x)
    assert s.shape == (3000,) and np.all(np.isfinite(s))
    assert np.corrcoef(s, np.log(data.density))[0, 1] > 0.5
    assert np.isfinite(fitted.score(data.x))


def test_pipeline_compatible(data):
    pipe = make_pipeline(FunctionTransformer(), BetaVAE(latent_dim=3, epochs=2, random_state=0))
    out = pipe.fit_transform(data.x[:500])
    assert out.shape == (500, 3)


def test_fit_is_deterministic(data):
    a = BetaVAE(latent_dim=3, epochs=2, random_state=7).fit(data.x[:600]).transform(data.x[:20])
    b = BetaVAE(latent_dim=3, epochs=2, random_state=7).fit(data.x[:600]).transform(data.x[:20])
    assert np.array_equal(a, b)
