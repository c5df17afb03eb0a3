"""64-bit linear congruential generator with a fixed, documented algorithm.

state' = (A * state + C) mod 2**64 with Knuth's MMIX constants. Seeds go
through one splitmix64 round first so neighbouring seeds start far apart.
Uniforms take the top 53 bits; normals use Box-Muller on pairs of uniforms.
Draws are produced in blocks with precomputed jump coefficients, which gives
exactly the sequential stream.
"""
import numpy as np

MASK64 = (1 << 64) - 1
LCG_A = 6364136223846793005
LCG_C = 1442695040888963407
BLOCK = 4096


def splitmix64(x):
    z = (x + 0x9E3779B97F4A7C15) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def _jump_tables(size):
    # state_k = A_k * state_0 + C_k for k = 1..size
    mults, incs = [], []
    a, c = 1, 0
    for _ in range(size):
        a = (a * LCG_A) & MASK64
        c = (c * LCG_A + LCG_C) & MASK64
        mults.append(a)
        incs.append(c)
    return np.array(mults, dtype=np.uint64), np.array(incs, dtype=np.uint64)


_MULTS, _INCS = _jump_tables(BLOCK)


class PortableRandom:
    def __init__(self, seed):
        self.state = splitmix64(int(seed) & MASK64)

    def next_u64(self):
        self.state = (LCG_A * self.state + LCG_C) & MASK64
        return self.state

    def raw(self, count):
        """The next ``count`` states as uint64."""
        out = np.empty(count, dtype=np.uint64)
        filled = 0
        while filled < count:
            take = min(BLOCK, count - filled)
            base = np.uint64(self.state)
            block = _MULTS[:take] * base + _INCS[:take]
            out[filled:filled + take] = block
            self.state = int(block[-1])
            filled += take
        return out

    def uniform(self, count):
        return (self.raw(count) >> np.uint64(11)).astype(np.float64) * 2.0 ** -53

    def integers(self, count, high):
        return np.minimum((self.uniform(count) * high).astype(np.int64), high - 1)

    def normal(self, count):
        pairs = (count + 1) // 2
        u = self.uniform(2 * pairs)
        radius = np.sqrt(-2.0 * np.log(1.0 - u[0::2]))
        angle = 2.0 * np.pi * u[1::2]
        z = np.empty(2 * pairs)
        z[0::2] = radius * np.cos(angle)
        z[1::2] = radius * np.sin(angle)
        return z[:count]
