"""Pairwise spatial-transformer ranking networks on numpy."""
from .kernels import BACKEND, use_backend
from .numcore import DimensionError, LayerParams, NumericalError, make_rng, sgd_step
from .stn import AffineParams, BoundsReport, SamplingGrid, affine_grid, bilinear_sample, bounds_check
from .ranker import (ConfigError, LossBreakdown, NetConfig, ScoreTrace, ScoringNet, rank_loss,
                     rank_prob)
from .data import DataError, Manifest, Pair, SplitSpec, SynthConfig, load_manifest, make_pairs
from .train import (EvalReport, TrainConfig, evaluate, grad_check, load_checkpoint, save_checkpoint)

__version__ = "0.1.0"
