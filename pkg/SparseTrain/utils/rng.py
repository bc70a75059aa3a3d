from typing import Dict, Tuple

import numpy as np
import torch

STREAMS: Tuple[str, ...] = ("init", "shuffle", "realloc", "noise")


class RngStreams:
    """
    Named torch generators expanded from one master seed.

    Each stream is seeded from a child of `np.random.SeedSequence(seed)` keyed by
    its position in `STREAMS`, so a method that never draws from e.g. "noise"
    leaves the other streams on exactly the same trajectory as a method that does.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        children = np.random.SeedSequence(self.seed).spawn(len(STREAMS))
        self.generators: Dict[str, torch.Generator] = {}
        for name, child in zip(STREAMS, children):
            g = torch.Generator(device="cpu")
            g.manual_seed(int(child.generate_state(1, dtype=np.uint64)[0]))
            self.generators[name] = g

    def __getitem__(self, name: str) -> torch.Generator:
        return self.generators[name]

    @property
    def init(self) -> torch.Generator:
        return self.generators["init"]

    @property
    def shuffle(self) -> torch.Generator:
        return self.generators["shuffle"]

    @property
    def realloc(self) -> torch.Generator:
        return self.generators["realloc"]

    @property
    def noise(self) -> torch.Generator:
        return self.generators["noise"]

    def get_state(self) -> Dict[str, bytes]:
        return {
            name: g.get_state().numpy().tobytes() for name, g in self.generators.items()
        }

    def set_state(self, states: Dict[str, bytes]):
        for name, raw in states.items():
            if name not in self.generators:
                raise ValueError(f"unknown rng stream {name!r} in saved state")
            self.generators[name].set_state(
                torch.from_numpy(np.frombuffer(raw, dtype=np.uint8).copy())
            )


def generator_from(seed_or_generator) -> torch.Generator:
    if isinstance(seed_or_generator, torch.Generator):
        return seed_or_generator
    g = torch.Generator(device="cpu")
    g.manual_seed(int(seed_or_generator))
    return g
