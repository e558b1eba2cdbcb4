"""Born-rule outcome selection with a reproducible random stream.

All protocol randomness flows through RandomStream so that a (seed, draw
order) pair pins a trajectory bit-exactly on a given build.  Per-trajectory
seeds are derived from the master seed with SplitMix64, a fixed, documented
mixing function, so results do not depend on execution order.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

PROB_FLOOR = 1e-12
_MASK64 = (1 << 64) - 1


def _splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


def derive_seed(master_seed: int, index: int) -> int:
    """Stable per-trajectory seed: SplitMix64 over (master, index)."""
    return _splitmix64((_splitmix64(master_seed & _MASK64) ^ index) & _MASK64)


class RandomStream:
    """PCG64 generator with a draw counter, seeded by a 64-bit integer."""

    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK64
        self.counter = 0
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def uniform(self) -> float:
        self.counter += 1
        return float(self._gen.random())

    def uniforms(self, n: int) -> np.ndarray:
        self.counter += n
        return self._gen.random(n)

    def integer(self, upper: int) -> int:
        """Uniform integer in [0, upper)."""
        self.counter += 1
        return int(self._gen.integers(upper))

    def choose_subset(self, n: int, k: int) -> tuple[int, ...]:
        """k distinct indices from range(n), uniformly, via partial Fisher-Yates."""
        pool = list(range(n))
        for i in range(k):
            j = i + self.integer(n - i)
            pool[i], pool[j] = pool[j], pool[i]
        return tuple(sorted(pool[:k]))


@dataclass
class OutcomeDistribution:
    """Discrete outcome values with Born weights; tiny weights are dead.

    Weights at or below PROB_FLOOR are treated as exactly zero and can never
    be selected, so numerically extinct branches do not resurrect.
    """
    outcomes: np.ndarray
    probabilities: np.ndarray
    _support: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.outcomes = np.asarray(self.outcomes, dtype=float)
        p = np.asarray(self.probabilities, dtype=float)
        if p.shape != self.outcomes.shape:
            raise ValueError("outcomes and probabilities must have equal length")
        if np.any(p < -1e-9):
            raise ValueError("negative probability")
        p = np.where(p > PROB_FLOOR, p, 0.0)
        total = p.sum()
        if total <= 0:
            raise ValueError("all outcome probabilities are zero")
        if abs(total - 1.0) > 1e-6:
            raise ValueError(f"probabilities sum to {total:.9f}, not 1")
        self.probabilities = p / total
        self._support = np.nonzero(p)[0]

    @property
    def support(self) -> np.ndarray:
        return self._support


def sample_exact(dist: OutcomeDistribution, rng: RandomStream) -> float:
    """One outcome by cumulative-sum inversion of a single uniform draw."""
    cum = np.cumsum(dist.probabilities)
    idx = int(np.searchsorted(cum, rng.uniform() * cum[-1], side="right"))
    idx = min(idx, len(cum) - 1)
    return float(dist.outcomes[idx])


def sample_accept_reject(dist: OutcomeDistribution, rng: RandomStream,
                         max_iterations: int = 1_000_000) -> float:
    """One outcome by uniform proposal and acceptance with probability p_m.

    Proposals are uniform over the outcomes with nonzero support; a proposal
    m is accepted when a fresh uniform r satisfies r < p_m, so acceptance is
    proportional to the Born weight (no envelope constant is needed because
    projector weights never exceed 1).
    """
    support = dist.support
    for _ in range(max_iterations):
        pick = support[rng.integer(len(support))]
        if rng.uniform() < dist.probabilities[pick]:
            return float(dist.outcomes[pick])
    raise RuntimeError(f"no acceptance after {max_iterations} proposals")


def make_sampler(kind: str):
    if kind == "exact":
        return sample_exact
    if kind == "accept-reject":
        return sample_accept_reject
    raise ValueError(f"unknown sampler kind {kind!r}")
