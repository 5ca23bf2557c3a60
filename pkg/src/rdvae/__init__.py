"""Beta-VAE as rate-distortion-optimal transform coding, on a small numpy engine."""

from .analysis import (PropertyReport, accurate_variance, coding_second_derivative, elbo_at_point,
                       estimated_variance, norm_statistic, order_latents, pearson, probability_estimates,
                       property_report, traverse, write_report)
from .datasets import (FactorDatasetSpec, FactorDistribution, IdxFormatError, ToyDataset, generate_toy,
                       load_dataset, load_idx, save_dataset)
from .estimator import BetaVAE
from .losses import CodingLossKind, coding_loss, convex_scale, kl_divergence, metric_form
from .nn import DivergenceError, LayerSpec
from .rd import RdPoint, quant_rate, quantizer_distortion, rd_optimal
from .vae import PosteriorStats, VaeConfig, VaeModel, image_config, toy_config, train, vae_objective

__version__ = "0.1.0"
