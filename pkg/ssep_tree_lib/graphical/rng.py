from typing import Any

import numpy as np

MASK64 = (1 << 64) - 1
GOLDEN_GAMMA = 0x9E3779B97F4A7C15


def splitmix64(value: int) -> int:
    z = (value + GOLDEN_GAMMA) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def mix64(seed: int, stream: int) -> int:
    """
    key of stream `stream` under master seed `seed`:
    splitmix64(seed xor splitmix64(stream)), both arguments taken mod 2^64
    """
    return splitmix64((seed & MASK64) ^ splitmix64(stream & MASK64))


class RngStream:
    """
    same (seed, stream) gives the same numbers on every platform: PCG64 seeded
    through SeedSequence with the mixed 64-bit key
    """

    def __init__(self, seed: int, stream: int = 0) -> None:
        if not 0 <= seed <= MASK64:
            raise ValueError(f"Master seed must fit in 64 bits, got {seed}")
        if not 0 <= stream <= MASK64:
            raise ValueError(f"Stream id must fit in 64 bits, got {stream}")
        self.seed = seed
        self.stream = stream
        self.key = mix64(seed, stream)
        self.generator = np.random.Generator(
            np.random.PCG64(np.random.SeedSequence(self.key))
        )

    @classmethod
    def for_replicate(cls, seed: int, replicate: int) -> "RngStream":
        return cls(seed, replicate)

    def spawn(self, child: int) -> "RngStream":
        return RngStream(self.seed, mix64(self.stream, child))

    @property
    def state(self) -> dict[str, Any]:
        return self.generator.bit_generator.state

    def provenance(self) -> str:
        return f"{self.seed}:{self.stream}"

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, stream={self.stream})"
