__version__ = "0.1.0"

from .config import TrainConfig, parse_config
from .data import Dataset, load_mnist_idx, make_synthetic
from .modes import training_mode
from .nn import Network, build_architecture, forward, init
from .certify import evaluate
from .trainer import Trainer, finetune, train

__all__ = [
    "__version__",
    "TrainConfig",
    "parse_config",
    "Dataset",
    "load_mnist_idx",
    "make_synthetic",
    "training_mode",
    "Network",
    "build_architecture",
    "forward",
    "init",
    "evaluate",
    "Trainer",
    "train",
    "finetune",
]
