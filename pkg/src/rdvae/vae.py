"""Beta-VAE on the dense engine: objectives, exact gradients, training loop.

The objective uses the lambda-scaled form ``L = lam * D + KL`` with
``lam = 1 / beta``. Two forms are available:

* ``conventional``: ``lam * D(x, Dec(z)) + KL``
* ``decomposed``: ``lam * (D(x, Dec(mu)) + D(Dec(mu), Dec(z))) + KL``

where ``z = mu + sigma * noise`` is a single reparameterised sample.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import nn
from .losses import CodingLossKind, coding_loss, coding_loss_grads, kl_divergence
from .nn import DivergenceError, LayerSpec, MlpParams

log = logging.getLogger(__name__)

LOGVAR_MIN = -20.0
LOGVAR_MAX = 10.0
LOSS_FORMS = ("conventional", "decomposed")


def dense_chain(widths: Sequence[int], activation: str, last_activation: str | None = None):
    """LayerSpecs for ``widths[0] -> widths[1] -> ...``."""
    specs = []
    for k in range(len(widths) - 1):
        act = activation if k < len(widths) - 2 or last_activation is None else last_activation
        specs.append(LayerSpec(int(widths[k]), int(widths[k + 1]), act))
    return specs


@dataclass
class VaeConfig:
    """Architecture and training settings.

    ``encoder_specs`` is the shared trunk; the mean and log-variance heads are
    linear layers from the trunk output to ``latent_dim``.
    """

    encoder_specs: list[LayerSpec]
    decoder_specs: list[LayerSpec]
    latent_dim: int
    lam: float = 100.0
    loss: CodingLossKind = field(default_factory=CodingLossKind)
    loss_form: str = "decomposed"
    epochs: int = 500
    batch_size: int = 128
    seed: int = 0
    lr: float = 1e-3
    max_iterations: int | None = None

    def __post_init__(self):
        self.encoder_specs = nn.check_chain(self.encoder_specs)
        self.decoder_specs = nn.check_chain(self.decoder_specs)
        self.loss = CodingLossKind.from_dict(self.loss)
        if not self.lam > 0:
            raise ValueError("lambda must be positive")
        if self.loss_form not in LOSS_FORMS:
            raise ValueError(f"loss_form must be one of {LOSS_FORMS}")
        if self.decoder_specs[0].in_dim != self.latent_dim:
            raise ValueError("decoder input width must equal latent_dim")
        if self.decoder_specs[-1].out_dim != self.encoder_specs[0].in_dim:
            raise ValueError("decoder output width must equal the input dimension")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")

    @property
    def beta(self) -> float:
        return 1.0 / self.lam

    @property
    def input_dim(self) -> int:
        return self.encoder_specs[0].in_dim

    @property
    def head_specs(self) -> list[LayerSpec]:
        return [LayerSpec(self.encoder_specs[-1].out_dim, self.latent_dim, "linear")]

    def to_dict(self) -> dict:
        return {
            "encoder": [s.to_dict() for s in self.encoder_specs],
            "decoder": [s.to_dict() for s in self.decoder_specs],
            "latent_dim": self.latent_dim, "lambda": self.lam, "loss": self.loss.to_dict(),
            "loss_form": self.loss_form, "epochs": self.epochs, "batch_size": self.batch_size,
            "seed": self.seed, "lr": self.lr, "max_iterations": self.max_iterations,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "VaeConfig":
        return cls(
            [LayerSpec.from_obj(s) for s in d["encoder"]],
            [LayerSpec.from_obj(s) for s in d["decoder"]],
            int(d["latent_dim"]), float(d["lambda"]), CodingLossKind.from_dict(d["loss"]),
            d.get("loss_form", "decomposed"), int(d.get("epochs", 500)),
            int(d.get("batch_size", 128)), int(d.get("seed", 0)), float(d.get("lr", 1e-3)),
            d.get("max_iterations"),
        )


def toy_config(input_dim: int = 16, latent_dim: int = 3, **kw) -> VaeConfig:
    """FC(16,128,tanh)-FC(128,64,tanh) trunk, FC(3,64,tanh)-FC(64,128,tanh)-FC(128,16) decoder.

    A loss given as a tag string uses summed (not averaged) squared error over
    the input dimensions, which keeps ``2 lam sigma^2 D'`` near 1 at ``lam=100``.
    """
    loss = kw.pop("loss", "square_error")
    kw["loss"] = CodingLossKind(loss, reduction="sum") if isinstance(loss, str) else loss
    enc = dense_chain([input_dim, 128, 64], "tanh", "tanh")
    dec = dense_chain([latent_dim, 64, 128, input_dim], "tanh", "linear")
    return VaeConfig(enc, dec, latent_dim, **kw)


def image_config(input_dim: int = 784, latent_dim: int = 32, width: int = 256, **kw) -> VaeConfig:
    """Reduced-width relu network with a sigmoid output for BCE on [0, 1] pixels."""
    kw.setdefault("loss", CodingLossKind("bce"))
    kw.setdefault("loss_form", "conventional")
    kw.setdefault("lam", 2000.0)
    enc = dense_chain([input_dim, width, width], "relu", "relu")
    dec = dense_chain([latent_dim, width, width, input_dim], "relu", "sigmoid")
    return VaeConfig(enc, dec, latent_dim, **kw)


class VaeModel:
    """Parameters of trunk, two heads and decoder, stored in one flat vector."""

    def __init__(self, config: VaeConfig, theta: np.ndarray | None = None):
        self.config = config
        self._groups = [config.encoder_specs, config.head_specs, config.head_specs, config.decoder_specs]
        self._sizes = [sum(s.n_params for s in g) for g in self._groups]
        total = sum(self._sizes)
        if theta is None:
            rng = np.random.default_rng(config.seed)
            theta = np.concatenate([nn.init_params(g, rng).to_vector() for g in self._groups])
        theta = np.array(theta, dtype=np.float64)
        if theta.shape != (total,):
            raise ValueError(f"expected {total} parameters, got {theta.shape}")
        self.theta = theta
        self._bind()

    def _bind(self):
        self.trunk, self.mu_head, self.logvar_head, self.decoder = self._views(self.theta)

    def _views(self, vec):
        out, pos = [], 0
        for g, size in zip(self._groups, self._sizes):
            out.append(MlpParams.from_vector(g, vec[pos:pos + size]))
            pos += size
        return out

    @property
    def n_params(self) -> int:
        return self.theta.size

    def set_theta(self, theta: np.ndarray) -> None:
        self.theta[...] = theta

    def copy(self) -> "VaeModel":
        return VaeModel(self.config, self.theta.copy())

    # -- inference ----------------------------------------------------------
    def encode(self, x):
        """Posterior mean and standard deviation; log-variance clamped to [-20, 10]."""
        x = np.asarray(x, dtype=np.float64)
        h = nn.forward(self.trunk, x)
        mu = nn.forward(self.mu_head, h)
        logvar = np.clip(nn.forward(self.logvar_head, h), LOGVAR_MIN, LOGVAR_MAX)
        return mu, np.exp(0.5 * logvar)

    def decode(self, z):
        return nn.forward(self.decoder, np.asarray(z, dtype=np.float64))

    def posterior_stats(self, x, chunk: int = 8192) -> "PosteriorStats":
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        mus, sigmas = [], []
        for start in range(0, x.shape[0], chunk):
            mu, sigma = self.encode(x[start:start + chunk])
            mus.append(mu)
            sigmas.append(sigma)
        return PosteriorStats(np.concatenate(mus), np.concatenate(sigmas))

    # -- persistence ---------------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "trunk": nn.params_to_dict(self.trunk),
            "mu_head": nn.params_to_dict(self.mu_head),
            "logvar_head": nn.params_to_dict(self.logvar_head),
            "decoder": nn.params_to_dict(self.decoder),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "VaeModel":
        config = VaeConfig.from_dict(d["config"])
        parts = [nn.params_from_dict(d[k]) for k in ("trunk", "mu_head", "logvar_head", "decoder")]
        return cls(config, np.concatenate([p.to_vector() for p in parts]))


@dataclass
class PosteriorStats:
    mu: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        if np.any(self.sigma <= 0) or not np.all(np.isfinite(self.mu)):
            raise ValueError("posterior sigma must be positive and mu finite")


def encode(model: VaeModel, x):
    return model.encode(x)


def reparameterize(mu, sigma, noise):
    return np.asarray(mu) + np.asarray(sigma) * np.asarray(noise)


def _loss_parts(model: VaeModel, x, noise):
    cfg = model.config
    mu, sigma = model.encode(x)
    z = reparameterize(mu, sigma, noise)
    _, kl = kl_divergence(mu, sigma)
    parts = {"kl": kl}
    if cfg.loss_form == "conventional":
        parts["coding_loss"] = coding_loss(x, model.decode(z), cfg.loss)
        parts["transform_loss"] = np.zeros_like(kl)
    else:
        x_mean = model.decode(mu)
        parts["transform_loss"] = coding_loss(x, x_mean, cfg.loss)
        parts["coding_loss"] = coding_loss(x_mean, model.decode(z), cfg.loss)
    parts["total"] = cfg.lam * (parts["transform_loss"] + parts["coding_loss"]) + kl
    return parts


def vae_objective(model: VaeModel, x, rng=None, noise=None):
    """Batch-mean objective and its parts. Exactly one of ``rng``/``noise`` is used."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if noise is None:
        rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
        noise = rng.standard_normal((x.shape[0], model.config.latent_dim))
    parts = _loss_parts(model, x, np.atleast_2d(noise))
    means = {k: float(np.mean(v)) for k, v in parts.items()}
    if not math.isfinite(means["total"]):
        raise DivergenceError("objective is not finite")
    return means["total"], means


def objective_and_grad(model: VaeModel, x: np.ndarray, noise: np.ndarray, grad: np.ndarray | None = None):
    """Batch-mean objective, its parts, and the exact gradient w.r.t. ``model.theta``."""
    cfg = model.config
    lam = cfg.lam
    B = x.shape[0]
    if grad is None:
        grad = np.zeros_like(model.theta)
    else:
        grad.fill(0.0)
    g_trunk, g_mu_head, g_lv_head, g_dec = model._views(grad)

    h, c_trunk = nn.forward(model.trunk, x, cache=True)
    mu, c_mu = nn.forward(model.mu_head, h, cache=True)
    logvar_raw, c_lv = nn.forward(model.logvar_head, h, cache=True)
    logvar = np.clip(logvar_raw, LOGVAR_MIN, LOGVAR_MAX)
    inside = (logvar_raw > LOGVAR_MIN) & (logvar_raw < LOGVAR_MAX)
    sigma = np.exp(0.5 * logvar)
    z = mu + sigma * noise
    kl = 0.5 * (mu * mu + sigma * sigma - logvar - 1.0)

    if cfg.loss_form == "conventional":
        x_hat, c_dec = nn.forward(model.decoder, z, cache=True)
        d_code, _, gy = coding_loss_grads(x, x_hat, cfg.loss)
        d_trans = np.zeros(B)
        _, g_z = nn.backward(model.decoder, c_dec, (lam / B) * gy, g_dec)
        g_mu = g_z
    else:
        out, c_dec = nn.forward(model.decoder, np.concatenate([mu, z]), cache=True)
        x_mean, x_hat = out[:B], out[B:]
        d_trans, _, g1y = coding_loss_grads(x, x_mean, cfg.loss)
        d_code, g2x, g2y = coding_loss_grads(x_mean, x_hat, cfg.loss)
        g_out = np.concatenate([g1y + g2x, g2y]) * (lam / B)
        _, g_in = nn.backward(model.decoder, c_dec, g_out, g_dec)
        g_mu = g_in[:B] + g_in[B:]
        g_z = g_in[B:]

    g_mu = g_mu + mu / B
    g_sigma = g_z * noise
    g_logvar = (g_sigma * 0.5 * sigma + 0.5 * (sigma * sigma - 1.0) / B) * inside
    _, g_h1 = nn.backward(model.mu_head, c_mu, g_mu, g_mu_head)
    _, g_h2 = nn.backward(model.logvar_head, c_lv, g_logvar, g_lv_head)
    nn.backward(model.trunk, c_trunk, g_h1 + g_h2, g_trunk)

    kl_sum = kl.sum(axis=1)
    total = lam * (d_trans + d_code) + kl_sum
    parts = {
        "total": float(total.mean()), "transform_loss": float(d_trans.mean()),
        "coding_loss": float(d_code.mean()), "kl": float(kl_sum.mean()),
    }
    if not math.isfinite(parts["total"]):
        raise DivergenceError("objective is not finite")
    return parts["total"], parts, grad


# --- training -------------------------------------------------------------------

HISTORY_FIELDS = ("epoch", "total", "transform_loss", "coding_loss", "kl")


@dataclass
class TrainState:
    model: VaeModel
    adam: nn.AdamState
    epoch: int = 0
    history: list[dict] = field(default_factory=list)


def _epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    # one independent stream per epoch makes resuming exact
    return np.random.default_rng([int(seed), int(epoch)])


def save_checkpoint(path, state: TrainState) -> None:
    cfg = state.model.config.to_dict()
    doc = {
        "format": "rdvae-checkpoint-v1",
        "config_hash": nn.config_hash(cfg),
        "seed": state.model.config.seed,
        "epoch": state.epoch,
        "model": state.model.to_dict(),
        "adam": state.adam.to_dict(),
        "history": state.history,
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(doc))
    tmp.replace(path)


def load_checkpoint(path) -> TrainState:
    doc = json.loads(Path(path).read_text())
    model = VaeModel.from_dict(doc["model"])
    return TrainState(model, nn.AdamState.from_dict(doc["adam"]), int(doc["epoch"]), list(doc["history"]))


def train(config: VaeConfig, data, checkpoint_path=None, resume: TrainState | None = None,
          epochs: int | None = None, progress: bool = False):
    """Train on ``data`` (n, m). Returns ``(model, history)``.

    ``history`` holds one dict per epoch with batch-averaged loss parts. On
    divergence the last good state is written to ``checkpoint_path`` (if set)
    and :class:`DivergenceError` is raised.
    """
    state = run_training(config, data, checkpoint_path, resume, epochs, progress)
    return state.model, state.history


def run_training(config: VaeConfig, data, checkpoint_path=None, resume: TrainState | None = None,
                 epochs: int | None = None, progress: bool = False) -> TrainState:
    """Like :func:`train` but returns the full :class:`TrainState` (model, Adam state, history)."""
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 2 or data.shape[1] != config.input_dim:
        raise ValueError(f"data shape {data.shape} does not match input_dim={config.input_dim}")
    if resume is None:
        fresh = VaeModel(config)
        resume = TrainState(fresh, nn.AdamState.zeros(fresh.n_params, lr=config.lr))
    state = resume
    model = state.model
    n = data.shape[0]
    B = min(config.batch_size, n)
    target_epochs = config.epochs if epochs is None else epochs
    grad = np.zeros_like(model.theta)
    last_good = (model.theta.copy(), state.adam)

    while state.epoch < target_epochs:
        if config.max_iterations is not None and state.adam.step >= config.max_iterations:
            break
        rng = _epoch_rng(config.seed, state.epoch)
        order = rng.permutation(n)
        sums = dict.fromkeys(HISTORY_FIELDS[1:], 0.0)
        n_batches = 0
        try:
            for start in range(0, n, B):
                if config.max_iterations is not None and state.adam.step >= config.max_iterations:
                    break
                xb = data[order[start:start + B]]
                noise = rng.standard_normal((xb.shape[0], config.latent_dim))
                _, parts, grad = objective_and_grad(model, xb, noise, grad)
                state.adam, new_theta = nn.adam_step(state.adam, model.theta, grad)
                model.set_theta(new_theta)
                for k in sums:
                    sums[k] += parts[k]
                n_batches += 1
        except DivergenceError:
            model.set_theta(last_good[0])
            state.adam = last_good[1]
            if checkpoint_path is not None:
                save_checkpoint(checkpoint_path, state)
            raise
        state.epoch += 1
        row = {"epoch": state.epoch, **{k: v / max(n_batches, 1) for k, v in sums.items()}}
        state.history.append(row)
        last_good = (model.theta.copy(), state.adam)
        if progress:
            log.info("epoch %d total=%.5f coding=%.5f kl=%.4f", state.epoch, row["total"],
                     row["coding_loss"], row["kl"])
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, state)
    return state
