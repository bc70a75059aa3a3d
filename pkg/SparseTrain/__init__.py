from .core import Trainer
from .config import Config, RunConfig
