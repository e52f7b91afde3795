"""Mini-Hes: block-diagonal Gauss-Newton latent factor analysis on sparse rating data."""

__version__ = "0.1.0"

from minihes.data import HdiDataset, parse_ratings, read_ratings, split_dataset
from minihes.factors import FactorState, evaluate, gradient, init_factors, loss, predict
from minihes.schemas import OptimizerConfig, TrainReport
from minihes.trainer import grid_search, train, train_first_order, train_mini_hes

__all__ = [
    "__version__",
    "HdiDataset",
    "parse_ratings",
    "read_ratings",
    "split_dataset",
    "FactorState",
    "init_factors",
    "predict",
    "loss",
    "gradient",
    "evaluate",
    "OptimizerConfig",
    "TrainReport",
    "train",
    "train_mini_hes",
    "train_first_order",
    "grid_search",
]
