"""Neuroevolution search for river water-surface-elevation regressors on DSM + orthophoto tiles."""

__version__ = "0.1.0"

from .dataset import (
    Sample, SynthConfig, WsePoint, generate_synthetic, idw_interpolate, load_samples, save_samples, split_dataset,
)
from .evolution import EvolutionConfig, crossover, evolve, mutate, train_genome
from .finetune import FinetuneConfig, finetune, perturb_weights
from .genome import BlockGene, Genome, SearchSpaceConfig, instantiate, random_genome, validate
from .preprocess import (
    DatasetStats, compute_dsm_sigma, destandardize_wse, prepare_samples, standardize_dsm, standardize_ortho,
)
from .tensor import Model, TrainConfig, backward, forward, sgd_step, train

__all__ = [
    "BlockGene", "DatasetStats", "EvolutionConfig", "FinetuneConfig", "Genome", "Model", "Sample",
    "SearchSpaceConfig", "SynthConfig", "TrainConfig", "WsePoint", "backward", "compute_dsm_sigma", "crossover",
    "destandardize_wse", "evolve", "finetune", "forward", "generate_synthetic", "idw_interpolate",
    "instantiate", "load_samples", "mutate", "perturb_weights", "prepare_samples", "random_genome",
    "save_samples", "sgd_step", "split_dataset", "standardize_dsm", "standardize_ortho", "train",
    "train_genome", "validate",
]
