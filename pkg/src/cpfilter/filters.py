"""UKF-family estimators, the Huber robust update, VB noise adaptation and a
bootstrap particle filter.

The module exposes two layers:

* pure step functions (``ukf_predict``, ``ukf_update``, ``huber_update``,
  ``vb_aukf_step``, ``vb_haukf_step``, ``pf_step``) that map an estimate to a
  new estimate;
* small stateful wrappers (``UKF``, ``HUKF``, ``VBAUKF``, ``VBHAUKF``, ``PF``)
  with a uniform ``predict`` / ``innovation`` / ``update`` interface, which is
  what the conformal gate and the benchmark harness drive.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .model import StateSpaceModel
from .unscented import sigma_points, symmetrize, unscented_moments

__all__ = [
    "FILTER_NAMES",
    "FilterConfig",
    "HUKF",
    "NoiseBelief",
    "PF",
    "ParticleCloud",
    "StateEstimate",
    "UKF",
    "VBAUKF",
    "VBHAUKF",
    "huber_joseph_cov",
    "huber_update",
    "huber_weight",
    "make_filter",
    "measurement_moments",
    "pf_step",
    "regularized_inv",
    "resolve_delta",
    "systematic_resample",
    "ukf_predict",
    "ukf_update",
    "vb_aukf_step",
    "vb_haukf_step",
    "vb_predict_belief",
]

HUBER_TUNING = 1.345


@dataclass(frozen=True)
class StateEstimate:
    mean: np.ndarray
    cov: np.ndarray
    step: int = 0

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        cov = np.atleast_2d(np.asarray(self.cov, dtype=float))
        if cov.shape != (mean.size, mean.size):
            raise ValueError(f"cov shape {cov.shape} does not match mean of size {mean.size}")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @classmethod
    def _unchecked(cls, mean: np.ndarray, cov: np.ndarray, step: int) -> "StateEstimate":
        e = object.__new__(cls)
        object.__setattr__(e, "mean", mean)
        object.__setattr__(e, "cov", cov)
        object.__setattr__(e, "step", step)
        return e

    def min_eig(self) -> float:
        return float(np.linalg.eigvalsh(symmetrize(self.cov)).min())


@dataclass(frozen=True)
class NoiseBelief:
    """Inverse-Wishart belief ``IW(v, V)`` over the measurement covariance."""

    v: float
    V: np.ndarray

    def __post_init__(self):
        V = np.atleast_2d(np.asarray(self.V, dtype=float))
        m = V.shape[0]
        if V.shape != (m, m):
            raise ValueError("V must be square")
        if not self.v > m + 1:
            raise ValueError(f"degrees of freedom v={self.v} must exceed m + 1 = {m + 1}")
        if not np.allclose(V, V.T) or np.linalg.eigvalsh(V).min() <= 0:
            raise ValueError("scale matrix V must be symmetric positive definite")
        object.__setattr__(self, "V", V)

    @classmethod
    def _unchecked(cls, v: float, V: np.ndarray) -> "NoiseBelief":
        # internal fast path; callers guarantee the invariants
        b = object.__new__(cls)
        object.__setattr__(b, "v", v)
        object.__setattr__(b, "V", V)
        return b

    @property
    def m(self) -> int:
        return self.V.shape[0]

    def expected_R(self) -> np.ndarray:
        return self.V / (self.v - self.m - 1)

    @classmethod
    def default(cls, m: int = 1, R0=None) -> "NoiseBelief":
        """Weak prior ``v0 = m + 3`` whose mean equals ``R0`` (identity)."""
        v0 = m + 3.0
        R0 = np.eye(m) if R0 is None else np.atleast_2d(np.asarray(R0, dtype=float))
        return cls(v=v0, V=(v0 - m - 1) * R0)


@dataclass(frozen=True)
class FilterConfig:
    """Tuning shared by the filter family.

    ``huber_delta`` is either ``"auto"`` or a positive threshold on the
    Mahalanobis-normalized innovation.
    """

    kappa: float | None = None
    rho: float = 0.97
    vb_iters: int = 3
    huber_delta: float | str = "auto"
    pf_particles: int = 500

    def __post_init__(self):
        if not 0.0 < self.rho <= 1.0:
            raise ValueError(f"rho must lie in (0, 1], got {self.rho}")
        if int(self.vb_iters) != self.vb_iters or self.vb_iters < 1:
            raise ValueError(f"vb_iters must be a positive integer, got {self.vb_iters}")
        if isinstance(self.huber_delta, str):
            if self.huber_delta != "auto":
                raise ValueError(f"huber_delta must be 'auto' or a number, got {self.huber_delta!r}")
        elif not self.huber_delta > 0:
            raise ValueError(f"huber_delta must be positive, got {self.huber_delta}")
        if self.pf_particles < 2:
            raise ValueError("pf_particles must be at least 2")


# ---------------------------------------------------------------------------
# linear algebra helpers


def regularized_inv(S: np.ndarray) -> np.ndarray:
    """Inverse of an innovation covariance, regularized if singular."""
    m = S.shape[0]
    if m == 1:
        s = S[0, 0]
        if s > 0 and np.isfinite(s):
            return np.array([[1.0 / s]])
    else:
        try:
            Sinv = np.linalg.inv(S)
            if np.all(np.isfinite(Sinv)) and np.linalg.eigvalsh(symmetrize(S)).min() > 0:
                return Sinv
        except np.linalg.LinAlgError:
            pass
    tr = abs(np.trace(S))
    reg = 1e-9 * (tr / m if tr > 0 else 1.0)
    return np.linalg.pinv(S + reg * np.eye(m))


def _as_cov(R, m: int) -> np.ndarray:
    R = np.atleast_2d(np.asarray(R, dtype=float))
    if R.shape != (m, m):
        raise ValueError(f"measurement covariance has shape {R.shape}, expected {(m, m)}")
    return R


def _mahalanobis(r: np.ndarray, Sinv: np.ndarray) -> float:
    return math.sqrt(max(float(r @ Sinv @ r), 0.0))


# ---------------------------------------------------------------------------
# UKF


def ukf_predict(est: StateEstimate, model: StateSpaceModel, cfg: FilterConfig = FilterConfig()) -> StateEstimate:
    """Unscented time update to step ``est.step + 1``."""
    k = est.step + 1
    s = sigma_points(est.mean, est.cov, cfg.kappa)
    Y = np.asarray(model.transition(s.points, k), dtype=float).reshape(len(s.points), -1)
    mean, cov = unscented_moments(Y, s.w_mean, s.w_cov, model.process_cov)
    return StateEstimate._unchecked(mean, cov, k)


class MeasurementMoments(NamedTuple):
    z_pred: np.ndarray
    Pzz: np.ndarray  # without measurement noise
    Pxz: np.ndarray


def measurement_moments(prior: StateEstimate, model: StateSpaceModel, cfg: FilterConfig = FilterConfig()) -> MeasurementMoments:
    s = sigma_points(prior.mean, prior.cov, cfg.kappa)
    Z = np.asarray(model.measurement(s.points), dtype=float).reshape(len(s.points), -1)
    z_pred, Pzz = unscented_moments(Z, s.w_mean, s.w_cov)
    dX = s.points - prior.mean
    Pxz = (dX.T * s.w_cov) @ (Z - z_pred)
    return MeasurementMoments(z_pred, Pzz, Pxz)


def _gain_update(prior: StateEstimate, mm: MeasurementMoments, z: np.ndarray, R: np.ndarray):
    S = mm.Pzz + R
    K = mm.Pxz @ regularized_inv(S)
    mean = prior.mean + K @ (z - mm.z_pred)
    cov = prior.cov - K @ S @ K.T
    return mean, (cov if cov.shape[0] == 1 else symmetrize(cov))


def ukf_update(prior: StateEstimate, z, model: StateSpaceModel, R, cfg: FilterConfig = FilterConfig()) -> StateEstimate:
    """Unscented measurement update with a fixed noise covariance ``R``."""
    z = np.atleast_1d(np.asarray(z, dtype=float))
    R = _as_cov(R, model.meas_dim)
    mm = measurement_moments(prior, model, cfg)
    mean, cov = _gain_update(prior, mm, z, R)
    return StateEstimate(mean, cov, prior.step)


# ---------------------------------------------------------------------------
# Huber robust update


def huber_weight(r, delta: float) -> float:
    """Huber weight: 1 inside ``|r| <= delta``, ``delta / |r|`` outside."""
    if not delta > 0:
        raise ValueError(f"delta must be positive, got {delta}")
    a = abs(float(r))
    return 1.0 if a <= delta else delta / a


def resolve_delta(cfg: FilterConfig) -> float:
    """Threshold on the normalized innovation.

    ``"auto"`` is the 1.345 rule: on the scale of an innovation divided by
    its own standard deviation, 1.345 sigma is simply 1.345.
    """
    return HUBER_TUNING if cfg.huber_delta == "auto" else float(cfg.huber_delta)


def huber_joseph_cov(P, K, H, R, W: float, nonlinear_cov=None) -> np.ndarray:
    """Huber-weighted Joseph-form covariance.

    ``(I - W K H) P (I - W K H)^T + W K R K^T`` plus, for a statistically
    linearized ``H``, the PSD term ``W^2 K D K^T`` where ``D`` is the part of
    the predicted measurement covariance not explained by ``H P H^T``.
    Every term is a congruence of a PSD matrix, so the result is PSD for any
    ``W >= 0``.
    """
    P = np.atleast_2d(P)
    n = P.shape[0]
    A = np.eye(n) - W * (K @ H)
    out = A @ P @ A.T + W * (K @ R @ K.T)
    if nonlinear_cov is not None:
        out = out + (W * W) * (K @ nonlinear_cov @ K.T)
    return symmetrize(out)


def _stat_linearization(P: np.ndarray, Pxz: np.ndarray) -> np.ndarray:
    """``H = Pxz^T P^-1`` (pseudo-inverse when P is singular)."""
    if P.shape[0] == 1:
        p = P[0, 0]
        return Pxz.T / p if p > 0 else np.zeros_like(Pxz.T)
    try:
        return np.linalg.solve(P, Pxz).T
    except np.linalg.LinAlgError:
        return Pxz.T @ np.linalg.pinv(P)


def _huber_update(prior, mm: MeasurementMoments, z, R, delta):
    r = z - mm.z_pred
    s = _mahalanobis(r, regularized_inv(mm.Pzz + R))
    W = huber_weight(s, delta)
    # K = Pxz (Pzz + R/W)^-1, written so that W -> 0 stays finite
    K = W * (mm.Pxz @ regularized_inv(W * mm.Pzz + R))
    H = _stat_linearization(prior.cov, mm.Pxz)
    D = symmetrize(mm.Pzz - H @ prior.cov @ H.T)
    # the state moves by W K r, so the correction vanishes as |r| grows
    mean = prior.mean + W * (K @ r)
    cov = huber_joseph_cov(prior.cov, K, H, R, W, D)
    return mean, cov, W, s


def huber_update(prior: StateEstimate, z, model: StateSpaceModel, R, cfg: FilterConfig = FilterConfig()) -> StateEstimate:
    """Huber-weighted unscented measurement update.

    The weight is computed from the Mahalanobis norm of the innovation
    against ``Pzz + R``; the gain is ``K = Pxz (Pzz + R / W)^-1`` and the
    state moves by ``W K r``. The observation matrix needed by the Joseph form
    is the statistical linearization ``Pxz^T P^-1``.
    """
    z = np.atleast_1d(np.asarray(z, dtype=float))
    R = _as_cov(R, model.meas_dim)
    mm = measurement_moments(prior, model, cfg)
    mean, cov, _, _ = _huber_update(prior, mm, z, R, resolve_delta(cfg))
    return StateEstimate(mean, cov, prior.step)


# ---------------------------------------------------------------------------
# variational Bayesian adaptation


def vb_predict_belief(belief: NoiseBelief, rho: float) -> NoiseBelief:
    """Forgetting step: ``v <- rho (v - m - 1) + m + 1`` and ``V <- rho V``."""
    m = belief.m
    return NoiseBelief._unchecked(rho * (belief.v - m - 1) + m + 1, rho * belief.V)


def _vb_update(prior, belief_pred: NoiseBelief, z, model, cfg, robust: bool, inflation: float = 1.0):
    """Fixed-point VB measurement update.

    Each iteration uses the current noise mean ``V / (v - m - 1)`` (with
    ``v`` already incremented for this measurement) to form the gain from the
    predicted moments, then refreshes ``V`` from the predicted scale plus the
    expected squared residual under the updated state posterior.

    A measurement assimilated with noise ``inflation * R / W`` (conformal
    inflation, Huber weight ``W``) contributes ``W / inflation`` times its
    residual scatter to ``V``.
    """
    m = belief_pred.m
    v = belief_pred.v + 1.0
    mm = measurement_moments(prior, model, cfg)
    r = z - mm.z_pred
    delta = resolve_delta(cfg) if robust else None
    V = belief_pred.V
    mean, cov = prior.mean, prior.cov
    for _ in range(int(cfg.vb_iters)):
        ER = (inflation / (v - m - 1.0)) * V
        W = 1.0
        if robust:
            W = huber_weight(_mahalanobis(r, regularized_inv(mm.Pzz + ER)), delta)
            ER = ER / W
        mean, cov = _gain_update(prior, mm, z, ER)
        post = sigma_points(mean, cov, cfg.kappa)
        Zp = np.asarray(model.measurement(post.points), dtype=float).reshape(len(post.points), -1)
        E = z - Zp
        scatter = (E.T * post.w_cov) @ E
        V = belief_pred.V + (W / inflation) * (scatter if m == 1 else symmetrize(scatter))
    return StateEstimate._unchecked(mean, cov, prior.step), NoiseBelief._unchecked(v, V)


def vb_aukf_step(est: StateEstimate, belief: NoiseBelief, z, model: StateSpaceModel, cfg: FilterConfig = FilterConfig()):
    """One predict/update cycle of the VB adaptive UKF.

    Returns the posterior state estimate and the posterior noise belief.
    """
    z = np.atleast_1d(np.asarray(z, dtype=float))
    prior = ukf_predict(est, model, cfg)
    return _vb_update(prior, vb_predict_belief(belief, cfg.rho), z, model, cfg, robust=False)


def vb_haukf_step(est: StateEstimate, belief: NoiseBelief, z, model: StateSpaceModel, cfg: FilterConfig = FilterConfig()):
    """VB adaptive UKF whose noise mean is divided by a Huber weight,
    recomputed at every fixed-point iteration."""
    z = np.atleast_1d(np.asarray(z, dtype=float))
    prior = ukf_predict(est, model, cfg)
    return _vb_update(prior, vb_predict_belief(belief, cfg.rho), z, model, cfg, robust=True)


# ---------------------------------------------------------------------------
# particle filter


@dataclass(frozen=True)
class ParticleCloud:
    particles: np.ndarray  # (P, n)
    weights: np.ndarray  # (P,)
    step: int = 0
    reset: bool = False  # set when the likelihood underflowed everywhere

    def __post_init__(self):
        p = np.asarray(self.particles, dtype=float)
        if p.ndim == 1:
            p = p[:, None]
        w = np.asarray(self.weights, dtype=float)
        if len(p) < 2 or w.shape != (len(p),):
            raise ValueError("need at least two particles with one weight each")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-10:
            raise ValueError("particle weights must be nonnegative and sum to 1")
        object.__setattr__(self, "particles", p)
        object.__setattr__(self, "weights", w)

    @classmethod
    def from_gaussian(cls, mean, cov, P: int, rng: np.random.Generator, step: int = 0):
        mean = np.atleast_1d(np.asarray(mean, dtype=float))
        cov = np.atleast_2d(np.asarray(cov, dtype=float))
        pts = rng.multivariate_normal(mean, cov, size=P, method="eigh")
        return cls(pts, np.full(P, 1.0 / P), step)

    def mean(self) -> np.ndarray:
        return self.weights @ self.particles

    def cov(self) -> np.ndarray:
        d = self.particles - self.mean()
        return symmetrize((d.T * self.weights) @ d)

    def ess(self) -> float:
        return 1.0 / float(self.weights @ self.weights)

    def estimate(self) -> StateEstimate:
        return StateEstimate(self.mean(), self.cov(), self.step)


def systematic_resample(weights: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Indices drawn by systematic resampling (one uniform offset)."""
    P = len(weights)
    positions = (rng.random() + np.arange(P)) / P
    cdf = np.cumsum(weights)
    cdf[-1] = 1.0
    return np.searchsorted(cdf, positions, side="right")


def _pf_propagate(cloud: ParticleCloud, model: StateSpaceModel, rng: np.random.Generator) -> np.ndarray:
    k = cloud.step + 1
    x = np.asarray(model.transition(cloud.particles, k), dtype=float).reshape(cloud.particles.shape)
    n = model.state_dim
    noise = rng.standard_normal(x.shape)
    Q = model.process_cov
    if n == 1:
        return x + math.sqrt(Q[0, 0]) * noise
    lam, U = np.linalg.eigh(Q)
    return x + noise @ (U * np.sqrt(np.clip(lam, 0.0, None))).T


def _pf_reweight(particles, weights, z, model, R):
    """Posterior weights and whether the likelihood underflowed."""
    Zp = np.asarray(model.measurement(particles), dtype=float).reshape(len(particles), -1)
    E = z - Zp
    Rinv = regularized_inv(R)
    loglik = -0.5 * np.einsum("pi,ij,pj->p", E, Rinv, E)
    with np.errstate(divide="ignore"):
        logw = np.log(weights) + loglik
    top = np.max(logw)
    if not np.isfinite(top):
        return np.full(len(weights), 1.0 / len(weights)), True
    w = np.exp(logw - top)
    w /= w.sum()
    return w, False


def pf_step(cloud: ParticleCloud, z, model: StateSpaceModel, R, rng: np.random.Generator) -> ParticleCloud:
    """Bootstrap particle filter step.

    Particles move through the transition plus process noise, are weighted by
    the Gaussian likelihood of ``z``, and are resampled systematically when
    the effective sample size drops below half the particle count.
    """
    z = np.atleast_1d(np.asarray(z, dtype=float))
    R = _as_cov(R, model.meas_dim)
    x = _pf_propagate(cloud, model, rng)
    w, reset = _pf_reweight(x, cloud.weights, z, model, R)
    P = len(w)
    if 1.0 / float(w @ w) < P / 2:
        x = x[systematic_resample(w, rng)]
        w = np.full(P, 1.0 / P)
    return ParticleCloud(x, w, cloud.step + 1, reset)


# ---------------------------------------------------------------------------
# stateful wrappers


class _UKFBase:
    """Shared predict/innovation plumbing for the sigma-point filters."""

    name = "UKF"

    def __init__(self, model: StateSpaceModel, R, cfg: FilterConfig = FilterConfig(),
                 x0=0.0, P0=1.0):
        self.model = model
        self.R = _as_cov(R, model.meas_dim)
        self.cfg = cfg
        self.est = StateEstimate(np.atleast_1d(x0), np.atleast_2d(P0), 0)
        self._prior: StateEstimate | None = None
        self._mm: MeasurementMoments | None = None

    @property
    def estimate(self) -> StateEstimate:
        return self.est

    def predict(self) -> StateEstimate:
        self._prior = ukf_predict(self.est, self.model, self.cfg)
        self._mm = measurement_moments(self._prior, self.model, self.cfg)
        return self._prior

    def _noise(self) -> np.ndarray:
        return self.R

    def innovation(self):
        """Predicted measurement and innovation covariance for the pending step."""
        return self._mm.z_pred, self._mm.Pzz + self._noise()

    def update(self, z, inflation: float = 1.0) -> StateEstimate:
        raise NotImplementedError

    def step(self, z) -> StateEstimate:
        self.predict()
        return self.update(z)


class UKF(_UKFBase):
    name = "UKF"

    def update(self, z, inflation: float = 1.0) -> StateEstimate:
        z = np.atleast_1d(np.asarray(z, dtype=float))
        mean, cov = _gain_update(self._prior, self._mm, z, inflation * self.R)
        self.est = StateEstimate._unchecked(mean, cov, self._prior.step)
        return self.est


class HUKF(_UKFBase):
    name = "HUKF"

    def update(self, z, inflation: float = 1.0) -> StateEstimate:
        z = np.atleast_1d(np.asarray(z, dtype=float))
        mean, cov, self.last_weight, _ = _huber_update(
            self._prior, self._mm, z, inflation * self.R, resolve_delta(self.cfg))
        self.est = StateEstimate._unchecked(mean, cov, self._prior.step)
        return self.est


class VBAUKF(_UKFBase):
    name = "VB-AUKF"
    robust = False

    def __init__(self, model, R, cfg: FilterConfig = FilterConfig(), x0=0.0, P0=1.0, belief=None):
        super().__init__(model, R, cfg, x0, P0)
        self.belief = belief if belief is not None else NoiseBelief.default(model.meas_dim, self.R)
        self._belief_pred: NoiseBelief | None = None

    def predict(self) -> StateEstimate:
        self._belief_pred = vb_predict_belief(self.belief, self.cfg.rho)
        return super().predict()

    def _noise(self) -> np.ndarray:
        b = self._belief_pred
        return b.V / (b.v + 1.0 - b.m - 1.0)

    def update(self, z, inflation: float = 1.0) -> StateEstimate:
        z = np.atleast_1d(np.asarray(z, dtype=float))
        self.est, self.belief = _vb_update(
            self._prior, self._belief_pred, z, self.model, self.cfg, self.robust, inflation)
        return self.est


class VBHAUKF(VBAUKF):
    name = "VB-HAUKF"
    robust = True


class PF:
    name = "PF"

    def __init__(self, model: StateSpaceModel, R, cfg: FilterConfig = FilterConfig(),
                 x0=0.0, P0=1.0, rng: np.random.Generator | None = None):
        self.model = model
        self.R = _as_cov(R, model.meas_dim)
        self.cfg = cfg
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.cloud = ParticleCloud.from_gaussian(x0, P0, cfg.pf_particles, self.rng)
        self.est = self.cloud.estimate()
        self.resets = 0
        self._x: np.ndarray | None = None

    @property
    def estimate(self) -> StateEstimate:
        return self.est

    def predict(self) -> np.ndarray:
        self._x = _pf_propagate(self.cloud, self.model, self.rng)
        return self._x

    def innovation(self):
        Zp = np.asarray(self.model.measurement(self._x), dtype=float).reshape(len(self._x), -1)
        z_pred, Pzz = unscented_moments(Zp, self.cloud.weights, self.cloud.weights)
        return z_pred, Pzz + self.R

    def update(self, z, inflation: float = 1.0) -> StateEstimate:
        z = np.atleast_1d(np.asarray(z, dtype=float))
        w, reset = _pf_reweight(self._x, self.cloud.weights, z, self.model, inflation * self.R)
        self.resets += reset
        k = self.cloud.step + 1
        self.est = ParticleCloud(self._x, w, k, reset).estimate()
        x = self._x
        P = len(w)
        if 1.0 / float(w @ w) < P / 2:
            x = x[systematic_resample(w, self.rng)]
            w = np.full(P, 1.0 / P)
        self.cloud = ParticleCloud(x, w, k, reset)
        return self.est

    def step(self, z) -> StateEstimate:
        self.predict()
        return self.update(z)


FILTER_NAMES = ("PF", "UKF", "HUKF", "VB-AUKF", "VB-HAUKF")
_CLASSES = {"UKF": UKF, "HUKF": HUKF, "VB-AUKF": VBAUKF, "VB-HAUKF": VBHAUKF}


def make_filter(name: str, model: StateSpaceModel, R, cfg: FilterConfig = FilterConfig(),
                x0=0.0, P0=1.0, rng: np.random.Generator | None = None):
    """Construct one of the five benchmark filters by identifier."""
    if name == "PF":
        return PF(model, R, cfg, x0, P0, rng)
    try:
        cls = _CLASSES[name]
    except KeyError:
        raise ValueError(f"unknown filter {name!r}; expected one of {FILTER_NAMES}") from None
    return cls(model, R, cfg, x0, P0)
