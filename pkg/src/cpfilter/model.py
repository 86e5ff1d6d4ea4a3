"""State-space models, the UNGM benchmark and measurement-noise regimes.

Model functions operate on arrays whose *last* axis is the state (or
measurement) dimension, so a stack of sigma points or particles of shape
``(N, n)`` can be pushed through ``transition`` in one call.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable

import numpy as np

__all__ = [
    "NoiseCase",
    "NoiseRegime",
    "StateSpaceModel",
    "Trajectory",
    "case_b_variance",
    "make_rng",
    "sample_meas_noise",
    "simulate",
    "ungm_measurement",
    "ungm_model",
    "ungm_transition",
]


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """PCG64 generator for ``seed``, optionally split into a substream.

    ``make_rng(s)`` drives trajectory generation; ``make_rng(s, i)`` is the
    i-th independent child stream of the same seed (used e.g. by particle
    filters), so consumers never share draws with the simulator.
    """
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(s) for s in stream))
    return np.random.Generator(np.random.PCG64(ss))


# ---------------------------------------------------------------------------
# UNGM


def ungm_transition(x, k):
    """Deterministic part of the UNGM state transition at step ``k``."""
    x = np.asarray(x, dtype=float)
    return 0.5 * x + 25.0 * x / (1.0 + x * x) + 8.0 * math.cos(1.2 * (k - 1))


def ungm_measurement(x):
    """Deterministic part of the UNGM observation, ``x**2 / 20``."""
    x = np.asarray(x, dtype=float)
    return x * x / 20.0


@dataclass(frozen=True)
class StateSpaceModel:
    """Discrete-time model ``x_k = f(x_{k-1}, k) + w``, ``z_k = h(x_k) + v``.

    ``transition(x, k)`` and ``measurement(x)`` must be pure and broadcast
    over leading axes of ``x``.
    """

    state_dim: int
    meas_dim: int
    transition: Callable[[np.ndarray, int], np.ndarray]
    measurement: Callable[[np.ndarray], np.ndarray]
    process_cov: np.ndarray

    def __post_init__(self):
        if self.state_dim < 1 or self.meas_dim < 1:
            raise ValueError("state_dim and meas_dim must be positive")
        Q = np.atleast_2d(np.asarray(self.process_cov, dtype=float))
        if Q.shape != (self.state_dim, self.state_dim):
            raise ValueError(
                f"process_cov has shape {Q.shape}, expected "
                f"{(self.state_dim, self.state_dim)}"
            )
        Q = 0.5 * (Q + Q.T)
        if np.linalg.eigvalsh(Q).min() < -1e-10:
            raise ValueError("process_cov must be positive semi-definite")
        object.__setattr__(self, "process_cov", Q)


def ungm_model(Q: float = 10.0) -> StateSpaceModel:
    """The scalar UNGM benchmark with process-noise variance ``Q``."""
    return StateSpaceModel(
        state_dim=1,
        meas_dim=1,
        transition=ungm_transition,
        measurement=ungm_measurement,
        process_cov=np.array([[Q]]),
    )


# ---------------------------------------------------------------------------
# measurement-noise regimes


class NoiseCase(str, Enum):
    A = "A"  # stationary Gaussian
    B = "B"  # Gaussian, time-varying variance
    C = "C"  # two-component Gaussian mixture
    D = "D"  # mixture whose nominal component follows the case-B schedule


def case_b_variance(k: int, M: int) -> float:
    """Time-varying measurement variance of case B at step ``k`` of ``M``.

    The switch point ``k == 1.5 * M / 4`` belongs to the second branch.
    """
    if M < 1:
        raise ValueError(f"M must be >= 1, got {M}")
    if not 1 <= k <= M:
        raise ValueError(f"step k={k} outside [1, {M}]")
    if k < 1.5 * M / 4:
        return 3.0 + 2.0 * (2.0 + math.atan(0.3 * (k - M / 4)))
    return 3.0 + 2.0 * (2.0 + math.atan(-0.3 * (k - M / 2)))


@dataclass(frozen=True)
class NoiseRegime:
    """Scalar measurement-noise description for the four benchmark cases.

    Attributes
    ----------
    case : NoiseCase
        Which of the four regimes.
    R : float
        Variance of the stationary case-A noise.
    a : float
        Contamination fraction of the mixture cases.
    R1, R2 : float
        Standard deviations of the nominal and contaminating components.
        In case D the nominal component uses the case-B variance instead of
        ``R1**2``.
    M : int
        Horizon used by the case-B schedule.
    """

    case: NoiseCase = NoiseCase.A
    R: float = 1.0
    a: float = 0.1
    R1: float = 1.0
    R2: float = 30.0
    M: int = 500

    def __post_init__(self):
        if not isinstance(self.case, NoiseCase):
            try:
                object.__setattr__(self, "case", NoiseCase(str(self.case).upper()))
            except ValueError:
                raise ValueError(f"unknown noise case {self.case!r}") from None
        if not self.R > 0:
            raise ValueError(f"R must be positive, got {self.R}")
        if not 0.0 <= self.a <= 1.0:
            raise ValueError(f"contamination a must lie in [0, 1], got {self.a}")
        if not (self.R1 > 0 and self.R2 > 0):
            raise ValueError("mixture standard deviations R1, R2 must be positive")
        if self.M < 1:
            raise ValueError(f"M must be >= 1, got {self.M}")

    def nominal_variance(self, k: int) -> float:
        """Variance of the uncontaminated component at step ``k``."""
        if self.case is NoiseCase.A:
            return self.R
        if self.case is NoiseCase.C:
            return self.R1**2
        return case_b_variance(k, self.M)

    def variance(self, k: int) -> float:
        """Total noise variance at step ``k`` (mixture second moment)."""
        if self.case in (NoiseCase.A, NoiseCase.B):
            return self.nominal_variance(k)
        return (1.0 - self.a) * self.nominal_variance(k) + self.a * self.R2**2


def sample_meas_noise(regime: NoiseRegime, k: int, rng: np.random.Generator) -> float:
    """Draw one scalar measurement-noise sample for step ``k``.

    Every case consumes exactly one uniform and one standard normal, so two
    regimes driven by the same generator stay aligned draw for draw.
    """
    u = rng.random()
    e = rng.standard_normal()
    if regime.case in (NoiseCase.C, NoiseCase.D) and u < regime.a:
        return regime.R2 * e
    return math.sqrt(regime.nominal_variance(k)) * e


@dataclass
class Trajectory:
    truth: np.ndarray  # (M, n)
    measurements: np.ndarray  # (M, m)
    seed: int
    regime: NoiseRegime | None = field(default=None, compare=False)

    def __post_init__(self):
        if len(self.truth) != len(self.measurements):
            raise ValueError("truth and measurements must have equal length")

    def __len__(self):
        return len(self.truth)

    def __eq__(self, other):
        if not isinstance(other, Trajectory):
            return NotImplemented
        return (
            self.seed == other.seed
            and np.array_equal(self.truth, other.truth)
            and np.array_equal(self.measurements, other.measurements)
        )


def simulate(
    model: StateSpaceModel,
    regime: NoiseRegime,
    M: int,
    seed: int,
    x0=0.1,
) -> Trajectory:
    """Sample a trajectory of ``M`` steps starting from true state ``x0``.

    Per step the draws are: process noise (``state_dim`` normals), then one
    measurement-noise sample per measurement component.
    """
    if M < 1:
        raise ValueError(f"M must be >= 1, got {M}")
    if regime.M < M:
        raise ValueError(f"regime horizon M={regime.M} shorter than {M} steps")
    rng = make_rng(seed)
    n, m = model.state_dim, model.meas_dim
    Q = model.process_cov
    diag_Q = np.count_nonzero(Q - np.diag(np.diag(Q))) == 0
    if diag_Q:
        L = np.sqrt(np.diag(Q))
    else:
        # symmetric square root; Q may be singular
        lam, U = np.linalg.eigh(Q)
        L = U * np.sqrt(np.clip(lam, 0.0, None))

    truth = np.empty((M, n))
    meas = np.empty((M, m))
    x = np.broadcast_to(np.asarray(x0, dtype=float), (n,)).copy()
    for k in range(1, M + 1):
        w = rng.standard_normal(n)
        x = np.asarray(model.transition(x, k), dtype=float) + (L * w if diag_Q else L @ w)
        z = np.asarray(model.measurement(x), dtype=float).reshape(m)
        noise = np.array([sample_meas_noise(regime, k, rng) for _ in range(m)])
        truth[k - 1] = x
        meas[k - 1] = z + noise
    return Trajectory(truth=truth, measurements=meas, seed=seed, regime=regime)
