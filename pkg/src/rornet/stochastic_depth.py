"""Drop-path regularization over residual branches.

Each residual block l (1-based, counted across the whole network) survives a
training mini-batch with probability p_l decaying linearly from the input
toward the terminal value: p_l = 1 - (l/L)(1 - p_L). Gates are resampled
once per mini-batch; at test time branches are scaled by their survival
probability instead. Upper-level shortcuts are never gated.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .exceptions import ConfigError


@dataclass(frozen=True)
class SurvivalSchedule:
    """Per-block survival probabilities p_1..p_L."""

    probs: np.ndarray
    p_terminal: float

    def __len__(self) -> int:
        return len(self.probs)

    @property
    def expected_active(self) -> float:
        # exactly rounded sum: round decimals like 40.25 come out bit-exact
        return math.fsum(self.probs)


@dataclass(frozen=True)
class GateVector:
    """One mini-batch's sampled on/off pattern plus the seed that produced it."""

    gates: np.ndarray
    seed: int

    def __len__(self) -> int:
        return len(self.gates)

    @property
    def active(self) -> int:
        return int(self.gates.sum())


def survival_schedule(num_blocks: int, p_terminal: float) -> SurvivalSchedule:
    """Linear-decay schedule from (almost) 1 at the first block to p_terminal."""
    if num_blocks < 1:
        raise ConfigError(f"schedule needs at least one block, got {num_blocks}")
    if not 0.0 < p_terminal <= 1.0:
        raise ConfigError(f"terminal survival probability must lie in (0, 1], got {p_terminal}")
    l = np.arange(1, num_blocks + 1, dtype=np.float64)
    probs = 1.0 - (l / num_blocks) * (1.0 - p_terminal)
    return SurvivalSchedule(probs, float(p_terminal))


def sample_gates(schedule: SurvivalSchedule, seed: int) -> GateVector:
    """Independent Bernoulli(p_l) draw per block; deterministic per seed."""
    rng = np.random.default_rng(seed)
    gates = (rng.random(len(schedule.probs)) < schedule.probs).astype(np.uint8)
    return GateVector(gates, int(seed))


def batch_gate_seeds(epoch_seed: int, batches: int) -> list[int]:
    """Per-batch gate seeds derived from one logged epoch seed.

    The training loop records only the epoch seed in its metrics; this is the
    derivation it uses per mini-batch, so a run's gate pattern can be replayed
    from the CSV alone.
    """
    rng = np.random.default_rng(epoch_seed)
    return [int(s) for s in rng.integers(0, 2 ** 31, size=batches)]


def nominal_compute_saving(p_terminal: float) -> float:
    """Nominal fraction of residual branches skipped, (1 - p_L) / 2.

    The exact per-network expectation is (1 - p_L) * (L + 1) / (2L), which
    approaches this value from above as the block count grows.
    """
    return (1.0 - p_terminal) / 2.0
