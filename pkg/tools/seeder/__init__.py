from .ctx import TorchSeedContext
