"""Reproducible toy training runs with an on-disk checkpoint cache."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from pathlib import Path

from . import nn
from .datasets import FactorDatasetSpec, ToyDataset, generate_toy
from .vae import VaeModel, load_checkpoint, run_training, toy_config

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ToyRun:
    """One toy experiment: dataset preset, loss, lambda and seeds.

    ``seed`` drives both the dataset draw and the training streams.
    """

    dataset: str = "mix"
    loss: str = "square_error"
    lam: float = 100.0
    seed: int = 0
    epochs: int = 500
    latent_dim: int = 3
    n_samples: int = 50_000
    batch_size: int = 128
    loss_form: str = "decomposed"

    def dataset_spec(self) -> FactorDatasetSpec:
        return FactorDatasetSpec.preset(self.dataset, n_samples=self.n_samples, seed=self.seed)

    def vae_config(self):
        return toy_config(latent_dim=self.latent_dim, lam=self.lam, loss=self.loss,
                          loss_form=self.loss_form, epochs=self.epochs,
                          batch_size=self.batch_size, seed=self.seed)

    def key(self) -> str:
        return f"{self.dataset}-{self.loss}-s{self.seed}-" + nn.config_hash(asdict(self))


def run_toy(run: ToyRun, cache_dir=None, save_every: int = 50, progress: bool = False
            ) -> tuple[VaeModel, ToyDataset]:
    """Train (or resume, or load) ``run``; checkpoints go to ``cache_dir/<key>.json``."""
    data = generate_toy(run.dataset_spec())
    config = run.vae_config()
    path = None if cache_dir is None else Path(cache_dir) / f"{run.key()}.json"
    state = None
    if path is not None and path.exists():
        state = load_checkpoint(path)
        if state.epoch >= run.epochs:
            return state.model, data
        log.info("resuming %s from epoch %d", run.key(), state.epoch)
    step = max(1, save_every) if path is not None else run.epochs
    target = 0 if state is None else state.epoch
    while target < run.epochs or state is None:
        target = min(run.epochs, target + step)
        state = run_training(config, data.x, path, resume=state, epochs=target, progress=progress)
    return state.model, data
