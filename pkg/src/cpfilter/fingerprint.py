"""Geomagnetic fingerprint localization on synthetic data.

Pipeline: carrier-frame magnetometer readings are rotated into the global
frame, matched against a per-node fingerprint database with a softmax
matcher, and turned into conformal prediction sets over grid nodes.
Node ids are 1-based.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .conformal import CalibrationWindow, CODFilter, conformal_quantile, nonconformity_score, prediction_set
from .filters import UKF
from .model import NoiseRegime, StateSpaceModel, make_rng

__all__ = [
    "DB_COLUMNS",
    "DBFormatError",
    "FingerprintDB",
    "Localization",
    "MagSample",
    "SyntheticField",
    "build_db",
    "calibration_scores",
    "labeled_queries",
    "ccs_to_gcs",
    "gcs_to_ccs",
    "grid_nodes",
    "localize",
    "match_probabilities",
    "rot_x",
    "rot_y",
    "rot_z",
    "run_session",
]

DB_COLUMNS = ("node_id", "x_m", "y_m", "sig_x", "sig_y", "sig_z", "dispersion")
DISPERSION_FLOOR = 1e-3


# ---------------------------------------------------------------------------
# frames


def rot_x(roll: float) -> np.ndarray:
    c, s = math.cos(roll), math.sin(roll)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(pitch: float) -> np.ndarray:
    c, s = math.cos(pitch), math.sin(pitch)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_z(yaw: float) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class MagSample:
    """Magnetometer reading in the carrier frame plus attitude (radians)."""

    m_ccs: np.ndarray
    roll: float = 0.0
    pitch: float = 0.0
    yaw: float = 0.0

    def __post_init__(self):
        m = np.asarray(self.m_ccs, dtype=float).reshape(3)
        object.__setattr__(self, "m_ccs", m)
        if not all(math.isfinite(a) for a in (self.roll, self.pitch, self.yaw)):
            raise ValueError("attitude angles must be finite")


def ccs_to_gcs(s: MagSample) -> np.ndarray:
    """Rotate a carrier-frame field vector into the global frame (yaw-pitch-roll)."""
    return rot_z(s.yaw) @ rot_y(s.pitch) @ rot_x(s.roll) @ s.m_ccs


def gcs_to_ccs(m_gcs, roll: float, pitch: float, yaw: float) -> np.ndarray:
    """Inverse of :func:`ccs_to_gcs`: negated angles applied in reverse order."""
    return rot_x(-roll) @ rot_y(-pitch) @ rot_z(-yaw) @ np.asarray(m_gcs, dtype=float)


# ---------------------------------------------------------------------------
# database


class DBFormatError(ValueError):
    """Malformed fingerprint database file."""


@dataclass(frozen=True)
class FingerprintDB:
    node_ids: np.ndarray  # (K,) int, 1-based
    locations: np.ndarray  # (K, 2) metres
    signatures: np.ndarray  # (K, 3) mean GCS field
    dispersions: np.ndarray  # (K,)

    def __post_init__(self):
        K = len(self.node_ids)
        if K < 2:
            raise ValueError("a fingerprint database needs at least two nodes")
        if self.locations.shape != (K, 2) or self.signatures.shape != (K, 3) or self.dispersions.shape != (K,):
            raise ValueError("inconsistent fingerprint database shapes")
        if len({tuple(p) for p in self.locations.tolist()}) != K:
            raise ValueError("node coordinates must be distinct")
        if np.any(self.dispersions <= 0):
            raise ValueError("dispersions must be positive")

    def __len__(self):
        return len(self.node_ids)

    def location_of(self, node_id: int) -> np.ndarray:
        return self.locations[self.index_of(node_id)]

    def index_of(self, node_id: int) -> int:
        idx = np.flatnonzero(self.node_ids == node_id)
        if idx.size == 0:
            raise KeyError(node_id)
        return int(idx[0])

    def to_csv(self, path, metadata: Sequence[str] = ()) -> None:
        with open(path, "w", newline="") as fh:
            for line in metadata:
                fh.write(f"# {line}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(DB_COLUMNS)
            for i in range(len(self)):
                w.writerow([int(self.node_ids[i]), *(repr(float(v)) for v in self.locations[i]),
                            *(repr(float(v)) for v in self.signatures[i]), repr(float(self.dispersions[i]))])

    @classmethod
    def from_csv(cls, path) -> "FingerprintDB":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"fingerprint database {path} not found")
        with open(path, newline="") as fh:
            rows = [r for r in csv.reader(line for line in fh if not line.startswith("#")) if r]
        if not rows or tuple(rows[0]) != DB_COLUMNS:
            raise DBFormatError(f"{path}: expected header {','.join(DB_COLUMNS)}")
        ids, locs, sigs, disp = [], [], [], []
        for lineno, row in enumerate(rows[1:], start=2):
            if len(row) != len(DB_COLUMNS):
                raise DBFormatError(f"{path}: row {lineno} has {len(row)} columns, expected {len(DB_COLUMNS)}")
            try:
                ids.append(int(row[0]))
                vals = [float(v) for v in row[1:]]
            except ValueError as exc:
                raise DBFormatError(f"{path}: row {lineno}: {exc}") from None
            locs.append(vals[0:2])
            sigs.append(vals[2:5])
            disp.append(vals[5])
        try:
            return cls(np.array(ids), np.array(locs, dtype=float).reshape(-1, 2),
                       np.array(sigs, dtype=float).reshape(-1, 3), np.array(disp, dtype=float))
        except ValueError as exc:
            raise DBFormatError(f"{path}: {exc}") from None


def match_probabilities(db: FingerprintDB, query) -> np.ndarray:
    """Softmax over nodes of ``-|query - signature|^2 / (2 dispersion^2)``."""
    if len(db) == 0:
        raise ValueError("empty fingerprint database")
    q = np.asarray(query, dtype=float).reshape(3)
    d2 = np.sum((db.signatures - q) ** 2, axis=1)
    logits = -d2 / (2.0 * db.dispersions**2)
    logits -= logits.max()
    p = np.exp(logits)
    return p / p.sum()


@dataclass(frozen=True)
class Localization:
    point_estimate: int  # node id
    set: frozenset  # node ids
    probs: np.ndarray = field(repr=False)
    flagged: bool = False  # no calibration scores were available


def localize(db: FingerprintDB, query, calibration_scores: Iterable[float], alpha: float = 0.05) -> Localization:
    """Most probable node plus the split-conformal prediction set.

    An empty calibration set yields the full node set with ``flagged`` set.
    """
    p = match_probabilities(db, query)
    best = int(db.node_ids[int(np.argmax(p))])
    scores = list(calibration_scores)
    if not scores:
        return Localization(best, frozenset(int(i) for i in db.node_ids), p, True)
    qhat = conformal_quantile(scores, alpha)
    members = frozenset(int(db.node_ids[i - 1]) for i in prediction_set(p, qhat))
    return Localization(best, members, p, False)


# ---------------------------------------------------------------------------
# synthetic field


def grid_nodes(nx: int, ny: int, spacing: float = 3.0) -> np.ndarray:
    """Row-major ``(nx*ny, 2)`` grid of node coordinates in metres."""
    xs, ys = np.meshgrid(np.arange(nx) * spacing, np.arange(ny) * spacing, indexing="xy")
    return np.column_stack([xs.ravel(), ys.ravel()])


@dataclass(frozen=True)
class SyntheticField:
    """Smooth indoor field: a constant background plus Gaussian bumps.

    Each bump has a centre (m), a width (m) and a 3-vector amplitude (uT).
    """

    background: np.ndarray
    centres: np.ndarray
    widths: np.ndarray
    amplitudes: np.ndarray

    @classmethod
    def random(cls, extent: tuple[float, float], n_bumps: int = 4, seed: int = 0,
               amplitude: float = 12.0) -> "SyntheticField":
        if not 3 <= n_bumps <= 5:
            raise ValueError("n_bumps must be between 3 and 5")
        rng = make_rng(seed, 7)
        ex, ey = extent
        centres = np.column_stack([rng.uniform(0, ex, n_bumps), rng.uniform(0, ey, n_bumps)])
        widths = rng.uniform(2.0, 5.0, n_bumps)
        amps = rng.normal(0.0, amplitude, (n_bumps, 3))
        return cls(np.array([22.0, 4.0, -42.0]), centres, widths, amps)

    def __call__(self, xy) -> np.ndarray:
        xy = np.atleast_2d(np.asarray(xy, dtype=float))
        d2 = np.sum((xy[:, None, :] - self.centres[None]) ** 2, axis=2)
        g = np.exp(-d2 / (2.0 * self.widths**2))
        out = self.background + g @ self.amplitudes
        return out if len(out) > 1 else out[0]


def sample_readings(field_gcs: np.ndarray, n: int, rng: np.random.Generator, noise_std: float = 1.0,
                    contamination: NoiseRegime | None = None) -> np.ndarray:
    """``n`` GCS readings of a node whose true field is ``field_gcs``.

    Each reading is taken at a random attitude: the field is rotated into the
    carrier frame, sensor noise is added there, and the result is rotated
    back with :func:`ccs_to_gcs`. With ``contamination`` (a case-C regime)
    each axis is replaced by a heavy-tail draw with probability ``a``.
    """
    out = np.empty((n, 3))
    for i in range(n):
        roll, pitch, yaw = rng.uniform(-math.pi, math.pi), rng.uniform(-0.5, 0.5), rng.uniform(-math.pi, math.pi)
        m = gcs_to_ccs(field_gcs, roll, pitch, yaw)
        e = noise_std * rng.standard_normal(3)
        if contamination is not None:
            u = rng.random(3)
            heavy = contamination.R2 * rng.standard_normal(3)
            e = np.where(u < contamination.a, heavy, e)
        out[i] = ccs_to_gcs(MagSample(m + e, roll, pitch, yaw))
    return out


def build_db(field: SyntheticField, locations: np.ndarray, rng: np.random.Generator,
             n_cal: int = 20, noise_std: float = 1.0) -> FingerprintDB:
    """Survey every node with ``n_cal`` clean readings.

    The signature is their mean; the dispersion is the RMS of the per-axis
    sample standard deviations, floored at ``1e-3``.
    """
    K = len(locations)
    sigs = np.empty((K, 3))
    disp = np.empty(K)
    truth = field(locations)
    for i in range(K):
        r = sample_readings(truth[i], n_cal, rng, noise_std)
        sigs[i] = r.mean(axis=0)
        disp[i] = max(math.sqrt(np.mean(r.var(axis=0, ddof=1))), DISPERSION_FLOOR)
    return FingerprintDB(np.arange(1, K + 1), np.asarray(locations, dtype=float), sigs, disp)


def labeled_queries(db: FingerprintDB, field: SyntheticField, n: int, rng: np.random.Generator,
                    noise_std: float = 1.0, contamination: NoiseRegime | None = None):
    """``n`` single-reading queries at uniformly drawn nodes.

    Returns ``(queries (n, 3), labels (n,))`` with 1-based node ids.
    """
    truth = field(db.locations)
    idx = rng.integers(len(db), size=n)
    q = np.vstack([sample_readings(truth[i], 1, rng, noise_std, contamination) for i in idx])
    return q, db.node_ids[idx].astype(int)


def calibration_scores(db: FingerprintDB, queries, labels) -> np.ndarray:
    """Nonconformity ``1 - p(true node)`` of each labeled query."""
    return np.array([nonconformity_score(match_probabilities(db, q), db.index_of(int(y)) + 1)
                     for q, y in zip(queries, labels)])


# ---------------------------------------------------------------------------
# sequential sessions with optional conformal gating


def _static_field_model(q: float) -> StateSpaceModel:
    return StateSpaceModel(3, 3, lambda x, k: x, lambda x: x, q * np.eye(3))


@dataclass
class SessionResult:
    true_nodes: np.ndarray
    estimates: np.ndarray  # node id per query
    errors_m: np.ndarray

    @property
    def accuracy(self) -> float:
        return float(np.mean(self.true_nodes == self.estimates))

    @property
    def mean_error(self) -> float:
        return float(np.mean(self.errors_m))


def run_session(db: FingerprintDB, field: SyntheticField, seed: int, n_queries: int = 50,
                readings_per_query: int = 10, noise_std: float = 1.0,
                contamination: NoiseRegime | None = None, gate: bool = False,
                w: int = 100, alpha: float = 0.05, gamma: float = 10.0,
                warmup_queries: int = 15) -> SessionResult:
    """Localize ``n_queries`` random visits, each a burst of readings.

    Each burst is fused by a static-field Kalman filter; with ``gate`` the
    filter is wrapped by the conformal outlier gate, whose calibration window
    persists across bursts. Warm-up bursts fill the window and are not scored.
    The reading stream depends only on ``seed``, so gated and ungated runs
    see identical data.
    """
    rng = make_rng(seed, 11)
    model = _static_field_model(1e-6)
    R = noise_std**2 * np.eye(3)
    P0 = 100.0 * np.eye(3)
    x0 = db.signatures.mean(axis=0)
    window = CalibrationWindow(w, alpha)
    truth_field = field(db.locations)

    true_nodes, estimates, errors = [], [], []
    for q in range(warmup_queries + n_queries):
        i = int(rng.integers(len(db)))
        readings = sample_readings(truth_field[i], readings_per_query, rng, noise_std, contamination)
        f = UKF(model, R, x0=x0, P0=P0)
        if gate:
            f = CODFilter(f, alpha=alpha, gamma=gamma, window=window)
        for z in readings:
            f.step(z)
        if q < warmup_queries:
            continue
        p = match_probabilities(db, f.estimate.mean)
        j = int(np.argmax(p))
        true_nodes.append(int(db.node_ids[i]))
        estimates.append(int(db.node_ids[j]))
        errors.append(float(np.linalg.norm(db.locations[j] - db.locations[i])))
    return SessionResult(np.array(true_nodes), np.array(estimates), np.array(errors))
