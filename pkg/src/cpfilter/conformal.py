"""Split conformal prediction and sliding-window conformal outlier detection.

Class labels are 1-based throughout (``1 <= label <= K``), matching the
node ids written by the fingerprint tools.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Sequence

import numpy as np

from .filters import regularized_inv

__all__ = [
    "CODFilter",
    "CalibrationWindow",
    "CodDecision",
    "CoverageReport",
    "cod_gate",
    "conformal_quantile",
    "conformal_rank",
    "coverage_report",
    "innovation_score",
    "nonconformity_score",
    "prediction_set",
]

SIMPLEX_TOL = 1e-9


def _check_simplex(probs) -> np.ndarray:
    p = np.asarray(probs, dtype=float)
    if p.ndim != 1 or p.size == 0:
        raise ValueError("probabilities must be a non-empty vector")
    if np.any(p < -SIMPLEX_TOL) or abs(p.sum() - 1.0) > SIMPLEX_TOL:
        raise ValueError("probabilities must be nonnegative and sum to 1")
    return p


def nonconformity_score(probs, label: int) -> float:
    """``1 - probs[label]`` for a 1-based ``label``."""
    p = _check_simplex(probs)
    if not 1 <= label <= p.size:
        raise ValueError(f"label {label} outside 1..{p.size}")
    return float(1.0 - p[label - 1])


def conformal_rank(n: int, alpha: float) -> int:
    """Order-statistic index ``ceil((n + 1) (1 - alpha))`` (1-based).

    ``alpha`` is read as the decimal it prints as, so ``0.3`` means exactly
    3/10 and the ceiling is not disturbed by binary rounding.
    """
    if n < 1:
        raise ValueError("need at least one calibration score")
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    a = Fraction(repr(float(alpha)))
    return math.ceil((n + 1) * (1 - a))


def conformal_quantile(scores: Iterable[float], alpha: float) -> float:
    """Conformal threshold: the ``ceil((n+1)(1-alpha))``-th smallest score.

    Returns ``inf`` when that rank exceeds ``n`` (too few scores to certify
    the requested coverage).
    """
    s = sorted(float(x) for x in scores)
    rank = conformal_rank(len(s), alpha)
    return math.inf if rank > len(s) else s[rank - 1]


def prediction_set(probs, qhat: float) -> set[int]:
    """1-based labels whose score ``1 - p`` does not exceed ``qhat``."""
    p = np.asarray(probs, dtype=float)
    return {i + 1 for i in np.flatnonzero(1.0 - p <= qhat)}


def innovation_score(z, z_pred, S) -> float:
    """Mahalanobis norm of the innovation ``z - z_pred`` under ``S``."""
    r = np.atleast_1d(np.asarray(z, dtype=float) - np.asarray(z_pred, dtype=float))
    S = np.atleast_2d(np.asarray(S, dtype=float))
    return math.sqrt(max(float(r @ regularized_inv(S) @ r), 0.0))


class CalibrationWindow:
    """FIFO of the ``w`` most recent calibration scores.

    Attributes
    ----------
    w : int
        Capacity; older scores are evicted first.
    alpha : float
        Miscoverage level used by :meth:`quantile`.
    """

    def __init__(self, w: int = 100, alpha: float = 0.05, scores: Sequence[float] = ()):
        if w < 1:
            raise ValueError(f"window size must be positive, got {w}")
        self.w = int(w)
        self.alpha = float(alpha)
        self._rank = conformal_rank(self.w, self.alpha)
        self.scores: deque[float] = deque(maxlen=self.w)
        for s in scores:
            self.push(s)

    def __len__(self):
        return len(self.scores)

    @property
    def full(self) -> bool:
        return len(self.scores) == self.w

    def push(self, score: float) -> None:
        if score < 0:
            raise ValueError("scores must be nonnegative")
        self.scores.append(float(score))

    def quantile(self) -> float:
        """Conformal threshold over the current contents."""
        if len(self.scores) == self.w:
            # fast path: rank is fixed once the window is full
            if self._rank > self.w:
                return math.inf
            return sorted(self.scores)[self._rank - 1]
        return conformal_quantile(self.scores, self.alpha)

    def threshold(self) -> float:
        """Gate threshold: ``inf`` during warm-up, else :meth:`quantile`."""
        return self.quantile() if self.full else math.inf


@dataclass(frozen=True)
class CodDecision:
    score: float
    threshold: float
    is_outlier: bool
    inflation_applied: bool


def cod_gate(score: float, win: CalibrationWindow, R, gamma: float = 10.0,
             exclude_flagged: bool = True):
    """Flag ``score`` against the window and inflate ``R`` if it is an outlier.

    The decision is taken before the score enters the window. Flagged scores
    are kept out of the window unless ``exclude_flagged`` is false.

    Returns ``(CodDecision, R_effective)``.
    """
    if not gamma > 1:
        raise ValueError(f"gamma must exceed 1, got {gamma}")
    qhat = win.threshold()
    flag = bool(score > qhat)
    R_eff = gamma * np.asarray(R, dtype=float) if flag else R
    if not (flag and exclude_flagged):
        win.push(score)
    return CodDecision(float(score), float(qhat), flag, flag), R_eff


@dataclass(frozen=True)
class CoverageReport:
    empirical_coverage: float
    bound_ok: bool
    tolerance: float
    n: int


def coverage_report(flags: Sequence[bool], alpha: float, w: int, C: float = 2.0) -> CoverageReport:
    """Empirical coverage of ``s_k <= q_k`` flags against ``1 - alpha - C/sqrt(w)``."""
    f = np.asarray(flags, dtype=bool)
    if f.size == 0:
        raise ValueError("coverage needs at least one post-warm-up step")
    cov = float(f.mean())
    tol = C / math.sqrt(w)
    return CoverageReport(cov, cov >= 1.0 - alpha - tol, tol, int(f.size))


class CODFilter:
    """Wrap a filter with the conformal outlier gate.

    Each step scores the normalized innovation of the pending prediction,
    gates it against the sliding window and runs the inner update once,
    with the measurement noise scaled by ``gamma`` on flagged steps.

    ``inner`` must expose ``predict()``, ``innovation() -> (z_pred, S)``,
    ``update(z, inflation)``, ``estimate`` and ``R``. Passing ``window``
    shares one calibration window between several filters run in sequence.
    """

    def __init__(self, inner, w: int = 100, alpha: float = 0.05, gamma: float = 10.0,
                 exclude_flagged: bool = True, window: CalibrationWindow | None = None):
        self.inner = inner
        self.window = window if window is not None else CalibrationWindow(w, alpha)
        self.gamma = float(gamma)
        self.exclude_flagged = exclude_flagged
        self.decisions: list[CodDecision] = []
        self.name = f"{inner.name}+COD"

    @property
    def estimate(self):
        return self.inner.estimate

    @property
    def R(self):
        return self.inner.R

    def step(self, z):
        self.inner.predict()
        z_pred, S = self.inner.innovation()
        score = innovation_score(z, z_pred, S)
        decision, _ = cod_gate(score, self.window, self.inner.R, self.gamma, self.exclude_flagged)
        self.decisions.append(decision)
        return self.inner.update(z, inflation=self.gamma if decision.is_outlier else 1.0)
