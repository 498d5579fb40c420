"""Normal estimation for point clouds: n-jet fitting and a hyper-surface fitting network."""

from .classical import JetConfig, estimate_batch, fit_jet, jet_normal, pca_normal
from .geometry import KDTree, Patch, PointCloud, extract_patch, unoriented_angle
from .model import ModelConfig, forward, init_params, predict
from .training import TrainConfig, train

__version__ = "0.1.0"
