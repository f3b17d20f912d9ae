"""Stochastic branch regularization for dense and convolutional networks."""
from .branch import BranchSpec, collapse, ensemble_size, expand_pretrained, random_split, turn_off_probability
from .config import RunConfig, load_config, parse_config
from .core import Rng
from .diagnostics import branch_cosine, measure_vsr
from .estimator import StochasticBranchClassifier
from .layers import Mode, SBConv2d, SBLinear
from .network import Network, build_network, collapsed_network

__version__ = "0.1.0"
