from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from typing import Literal, Sequence

import numpy as np
from scipy.special import ndtr, ndtri

from .config import PrivacyConfig
from .problem import ProblemSpec

log = logging.getLogger(__name__)

Mechanism = Literal["none", "laplace", "gaussian"]
Distribution = Literal["laplace", "gaussian"]

# draws are generated per block of consecutive timesteps, one generator per block
BLOCK_SIZE = 1024
CONSTRAINT_STREAM = 0
_HALF_OPEN = float(np.nextafter(0.5, 0.0))


class PrivacyError(ValueError):
    pass


@dataclass(frozen=True)
class PrivacyPolicy:
    mechanism: Mechanism = "none"
    epsilon: float = 1.0
    delta: float = 0.0
    bound: float = 1.0  # adjacency bound B

    def __post_init__(self) -> None:
        if self.mechanism not in ("none", "laplace", "gaussian"):
            raise PrivacyError(f"unknown mechanism: {self.mechanism!r}")
        if self.mechanism == "none":
            return
        if not self.epsilon > 0:
            raise PrivacyError("epsilon must be positive")
        if not self.bound > 0:
            raise PrivacyError("adjacency bound B must be positive")
        if self.mechanism == "laplace" and self.delta != 0:
            raise PrivacyError("the Laplace mechanism is pure epsilon-DP (delta = 0)")
        if self.mechanism == "gaussian" and not (0 < self.delta < 0.5):
            raise PrivacyError("the Gaussian mechanism needs 0 < delta < 1/2")

    @classmethod
    def from_config(cls, cfg: PrivacyConfig) -> PrivacyPolicy:
        return cls(cfg.mechanism, cfg.epsilon, cfg.delta, cfg.bound)

    @property
    def active(self) -> bool:
        return self.mechanism != "none"

    @property
    def p(self) -> int:
        return 2 if self.mechanism == "gaussian" else 1


@dataclass(frozen=True)
class SensitivityBundle:
    p: int
    bound: float
    delta_g: float
    delta_blocks: dict[int, float]
    m: int
    block_dims: dict[int, int]

    def __post_init__(self) -> None:
        if self.delta_g < 0 or any(v < 0 for v in self.delta_blocks.values()):
            raise PrivacyError("sensitivities must be nonnegative")

    def scaled(self, factor: float) -> SensitivityBundle:
        return replace(
            self,
            bound=self.bound * factor,
            delta_g=self.delta_g * factor,
            delta_blocks={i: v * factor for i, v in self.delta_blocks.items()},
        )


def sensitivities(spec: ProblemSpec, bound: float, p: int) -> SensitivityBundle:
    """Delta_p g = K^g_p B and Delta_p g_{x_i} = K^i_p B from the constraint's Lipschitz constants."""
    if p not in (1, 2):
        raise PrivacyError("p must be 1 or 2")
    if not bound > 0:
        raise PrivacyError("adjacency bound B must be positive")
    c = spec.constraint
    try:
        delta_g = c.lipschitz_g[p] * bound
        blocks = {i: c.lipschitz_blocks[(i, p)] * bound for i in range(1, spec.num_agents + 1)}
    except KeyError as e:
        raise PrivacyError(f"constraint is missing Lipschitz constant {e.args[0]!r}") from None
    dims = {i: blk.stop - blk.start for i, blk in enumerate(spec.blocks, start=1)}
    return SensitivityBundle(p, float(bound), float(delta_g), blocks, spec.m, dims)


def q_function(y: float) -> float:
    """Standard normal tail P(N(0,1) > y)."""
    return float(ndtr(-y))


def q_inverse(delta: float) -> float:
    if not (0.0 < delta < 1.0):
        raise PrivacyError(f"q_inverse needs 0 < delta < 1, got {delta!r}")
    return float(-ndtri(delta))


def kappa(delta: float, epsilon: float) -> float:
    if not (0.0 < delta < 0.5):
        raise PrivacyError(f"kappa needs 0 < delta < 1/2, got {delta!r}")
    if not epsilon > 0:
        raise PrivacyError(f"kappa needs epsilon > 0, got {epsilon!r}")
    k_delta = q_inverse(delta)
    return (k_delta + math.sqrt(k_delta * k_delta + 2.0 * epsilon)) / (2.0 * epsilon)


@dataclass(frozen=True)
class NoiseChannel:
    distribution: Distribution
    scale: float  # Laplace b, or Gaussian sigma
    shape: tuple[int, ...]
    stream: int
    seed: int = 0

    @property
    def variance(self) -> float:
        if self.distribution == "laplace":
            return 2.0 * self.scale * self.scale
        return self.scale * self.scale

    def with_seed(self, seed: int) -> NoiseChannel:
        return replace(self, seed=int(seed))


def calibrate(policy: PrivacyPolicy, sens: SensitivityBundle, seed: int = 0) -> tuple[NoiseChannel, ...]:
    """
    One channel per g_{x_i} (shape m x n_i, stream i) and one for g (shape m, stream 0).

    Laplace uses b = Delta_1 / epsilon; Gaussian uses sigma = kappa(delta, epsilon) Delta_2.
    """
    if not policy.active:
        return ()
    if sens.p != policy.p:
        raise PrivacyError(f"sensitivities use p={sens.p} but the {policy.mechanism} mechanism needs p={policy.p}")
    if policy.mechanism == "laplace":
        factor = 1.0 / policy.epsilon
    else:
        factor = kappa(policy.delta, policy.epsilon)

    channels = [NoiseChannel(policy.mechanism, sens.delta_g * factor, (sens.m,), CONSTRAINT_STREAM, seed)]
    for i, d in sorted(sens.delta_blocks.items()):
        channels.append(NoiseChannel(policy.mechanism, d * factor, (sens.m, sens.block_dims[i]), i, seed))
    return tuple(channels)


def _generate_block(channel: NoiseChannel, block: int) -> np.ndarray:
    shape = (BLOCK_SIZE, *channel.shape)
    if channel.scale == 0.0:
        return np.zeros(shape)
    ss = np.random.SeedSequence(entropy=channel.seed, spawn_key=(channel.stream, block))
    rng = np.random.Generator(np.random.PCG64(ss))
    if channel.distribution == "laplace":
        # inverse CDF of Lap(0, b) at u in (-1/2, 1/2)
        u = np.clip(rng.random(shape) - 0.5, -_HALF_OPEN, _HALF_OPEN)
        return -channel.scale * np.sign(u) * np.log1p(-2.0 * np.abs(u))
    return channel.scale * rng.standard_normal(shape)


def draw(channel: NoiseChannel, k: int) -> np.ndarray:
    """Sample w(k) for this channel; fixed by (seed, stream, k)."""
    if k < 0:
        raise PrivacyError("timestep must be nonnegative")
    block, offset = divmod(k, BLOCK_SIZE)
    return _generate_block(channel, block)[offset].copy()


class NoiseBank:
    """
    The calibrated channels of one run, with one cached block per channel.

    Draws are identical to `draw(channel, k)` regardless of access order.
    """

    def __init__(self, channels: Sequence[NoiseChannel], *, noisy_dual: bool = True) -> None:
        self._channels: dict[int, NoiseChannel] = {}
        for ch in channels:
            if ch.stream in self._channels:
                raise PrivacyError(f"duplicate noise stream {ch.stream}")
            self._channels[ch.stream] = ch
        self.noisy_dual = noisy_dual
        self._cache: dict[int, tuple[int, np.ndarray]] = {}

    @classmethod
    def for_policy(
        cls, spec: ProblemSpec, policy: PrivacyPolicy | None, seed: int, *, noisy_dual: bool = True
    ) -> NoiseBank:
        if policy is None or not policy.active:
            return cls((), noisy_dual=noisy_dual)
        sens = sensitivities(spec, policy.bound, policy.p)
        return cls(calibrate(policy, sens, seed), noisy_dual=noisy_dual)

    @property
    def active(self) -> bool:
        return bool(self._channels)

    @property
    def channels(self) -> tuple[NoiseChannel, ...]:
        return tuple(self._channels[s] for s in sorted(self._channels))

    def channel(self, stream: int) -> NoiseChannel:
        return self._channels[stream]

    def draw(self, stream: int, k: int) -> np.ndarray:
        block, offset = divmod(k, BLOCK_SIZE)
        cached = self._cache.get(stream)
        if cached is None or cached[0] != block:
            cached = (block, _generate_block(self._channels[stream], block))
            self._cache[stream] = cached
        return cached[1][offset]

    def agent(self, i: int, k: int) -> np.ndarray | None:
        """w_i(k), shape m x n_i; None when noise-free."""
        if i not in self._channels:
            return None
        return self.draw(i, k)

    def constraint(self, k: int) -> np.ndarray | None:
        """w_g(k), shape m; None when noise-free or when the dual update uses the exact g."""
        if not self.noisy_dual or CONSTRAINT_STREAM not in self._channels:
            return None
        return self.draw(CONSTRAINT_STREAM, k)

    def scales(self) -> dict[str, float]:
        return {("w_g" if s == CONSTRAINT_STREAM else f"w_{s}"): ch.scale for s, ch in sorted(self._channels.items())}


def noise_variance_bound(bank: NoiseBank, radius: float) -> float:
    """
    K_w >= E|w(k)|^2 for w = (w_x^T mu, w_g) with |mu|_1 <= radius.

    Each entry of w_i^T mu has variance var_i |mu|_2^2 <= var_i R^2.
    """
    total = 0.0
    for ch in bank.channels:
        if ch.stream == CONSTRAINT_STREAM:
            if bank.noisy_dual:
                total += ch.shape[0] * ch.variance
        else:
            total += radius * radius * ch.shape[1] * ch.variance
    return total


def adjacency(x1: np.ndarray, x2: np.ndarray, bound: float, p: int) -> bool:
    """True iff the stacked signals are within p-norm distance B."""
    a = np.asarray(x1, dtype=float)
    b = np.asarray(x2, dtype=float)
    if a.shape != b.shape:
        raise PrivacyError(f"signal shapes differ: {a.shape} vs {b.shape}")
    if p not in (1, 2):
        raise PrivacyError("p must be 1 or 2")
    d = (a - b).ravel()
    dist = float(np.sum(np.abs(d))) if p == 1 else float(np.sqrt(d @ d))
    return dist <= bound
