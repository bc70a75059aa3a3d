import torch


class TorchSeedContext:
    """
    Scope in which the global torch RNG is seeded and, unless disabled,
    deterministic algorithms are enforced. The previous RNG state and
    determinism setting are restored on exit.
    """

    def __init__(self, seed: int, deterministic: bool = True):
        self.seed = seed
        self.deterministic = deterministic
        self.state = None
        self.was_deterministic = False

    def __enter__(self):
        self.state = torch.random.get_rng_state()
        self.was_deterministic = torch.are_deterministic_algorithms_enabled()
        torch.manual_seed(self.seed)
        if self.deterministic:
            torch.use_deterministic_algorithms(True)
        return self

    def __exit__(self, type, value, traceback):
        torch.random.set_rng_state(self.state)
        torch.use_deterministic_algorithms(self.was_deterministic)
