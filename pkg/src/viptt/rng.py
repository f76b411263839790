"""SplitMix64: the portable generator behind splits, shuffles and augmentation draws.

State is one unsigned 64-bit integer. Each draw adds the golden-ratio
increment ``0x9E3779B97F4A7C15`` and mixes the result with two
xor-shift-multiply rounds. Bounded integers use rejection sampling so they
are exactly uniform, and shuffles are Fisher-Yates from the last index
down. Any implementation following these rules reproduces the same
sequences.
"""

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15


def mix64(z: int) -> int:
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def derive_seed(seed: int, stream: int) -> int:
    """Independent child seed for a numbered stream (e.g. an epoch)."""
    return mix64((seed + GOLDEN * (stream + 1)) & MASK64)


class SplitMix64:
    def __init__(self, seed: int):
        self.state = int(seed) & MASK64

    def next_u64(self) -> int:
        self.state = (self.state + GOLDEN) & MASK64
        return mix64(self.state)

    def below(self, n: int) -> int:
        """Uniform integer in [0, n)."""
        if n <= 0:
            raise ValueError("n must be positive")
        limit = (1 << 64) - ((1 << 64) % n)
        while True:
            v = self.next_u64()
            if v < limit:
                return v % n

    def uniform(self) -> float:
        """Uniform float in [0, 1) with 53 random bits."""
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def shuffle(self, items: list) -> list:
        out = list(items)
        for i in range(len(out) - 1, 0, -1):
            j = self.below(i + 1)
            out[i], out[j] = out[j], out[i]
        return out

    def choice(self, seq):
        return seq[self.below(len(seq))]
