"""Monte Carlo harness: paired runs of the five filters with and without COD.

Every run ``r`` simulates one trajectory from seed ``base_seed + r`` and feeds
the same measurements to every (filter, cod) combination, so differences
between cells are paired.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .conformal import CODFilter
from .filters import FILTER_NAMES, FilterConfig, make_filter
from .model import NoiseCase, NoiseRegime, StateSpaceModel, make_rng, simulate, ungm_model

__all__ = [
    "CellResult",
    "ExperimentSpec",
    "OrderingCheck",
    "ResultTable",
    "cdf_points",
    "check_orderings",
    "mse",
    "run_experiment",
    "write_cdf_csv",
    "write_runs_csv",
    "write_summary_csv",
]


def mse(estimates: Sequence[float], truth: Sequence[float]) -> float:
    """Mean squared error over time steps, ``mean((x_hat - x)**2)``."""
    e = np.asarray(estimates, dtype=float)
    t = np.asarray(truth, dtype=float)
    if e.shape != t.shape:
        raise ValueError(f"length mismatch: {e.shape} vs {t.shape}")
    if e.size == 0:
        raise ValueError("need at least one step")
    return float(np.mean((e - t) ** 2))


def cdf_points(errors: Iterable[float]) -> list[tuple[float, float]]:
    """Empirical CDF as sorted ``(value, i / n)`` pairs."""
    x = np.sort(np.asarray(list(errors), dtype=float).ravel())
    if x.size == 0:
        raise ValueError("cdf of an empty sample")
    n = x.size
    return [(float(v), (i + 1) / n) for i, v in enumerate(x)]


@dataclass(frozen=True)
class ExperimentSpec:
    """What to run.

    ``cod`` lists the COD settings tried for every filter; ``(False, True)``
    runs each filter bare and wrapped.
    """

    regime: NoiseRegime
    filters: tuple[str, ...] = FILTER_NAMES
    cod: tuple[bool, ...] = (False, True)
    runs: int = 100
    M: int = 500
    base_seed: int = 42
    Q: float = 10.0
    R_nominal: float = 1.0
    x0_true: float = 0.1
    x0: float = 0.0
    P0: float = 1.0
    filter_cfg: FilterConfig = field(default_factory=FilterConfig)
    w: int = 100
    alpha: float = 0.05
    gamma: float = 10.0
    exclude_flagged: bool = True

    def __post_init__(self):
        if self.runs < 1:
            raise ValueError(f"runs must be >= 1, got {self.runs}")
        if self.M < 1:
            raise ValueError(f"M must be >= 1, got {self.M}")
        object.__setattr__(self, "filters", tuple(self.filters))
        object.__setattr__(self, "cod", tuple(bool(c) for c in self.cod))
        bad = [f for f in self.filters if f not in FILTER_NAMES]
        if bad:
            raise ValueError(f"unknown filter(s) {bad}; expected from {FILTER_NAMES}")
        if not self.filters or not self.cod:
            raise ValueError("need at least one filter and one cod setting")
        if self.regime.M < self.M:
            object.__setattr__(
                self, "regime",
                NoiseRegime(self.regime.case, self.regime.R, self.regime.a,
                            self.regime.R1, self.regime.R2, self.M),
            )

    def model(self) -> StateSpaceModel:
        return ungm_model(self.Q)


@dataclass
class CellResult:
    """Per-run outcomes of one (filter, cod) cell."""

    mse: list[float] = field(default_factory=list)
    diverged: list[bool] = field(default_factory=list)
    errors: list[np.ndarray] = field(default_factory=list)  # |x_hat - x| per step

    @property
    def runs_used(self) -> int:
        return len(self.diverged) - sum(self.diverged)

    @property
    def mean_mse(self) -> float:
        """Mean over non-diverged runs (``nan`` if all diverged)."""
        vals = [m for m, d in zip(self.mse, self.diverged) if not d]
        return float(np.mean(vals)) if vals else math.nan

    def error_samples(self) -> np.ndarray:
        keep = [e for e, d in zip(self.errors, self.diverged) if not d]
        return np.concatenate(keep) if keep else np.empty(0)


@dataclass
class ResultTable:
    spec: ExperimentSpec
    cells: dict[tuple[str, bool], CellResult]

    def __getitem__(self, key: tuple[str, bool]) -> CellResult:
        return self.cells[key]

    def mean_mse(self, name: str, cod: bool) -> float:
        return self.cells[(name, cod)].mean_mse

    def keys(self):
        return [(f, c) for f in self.spec.filters for c in self.spec.cod]


def _run_one(spec: ExperimentSpec, r: int):
    seed = spec.base_seed + r
    model = spec.model()
    traj = simulate(model, spec.regime, spec.M, seed, x0=spec.x0_true)
    truth = traj.truth[:, 0]
    out = {}
    for name in spec.filters:
        for cod in spec.cod:
            # every PF instance of the run replays the same particle stream
            f = make_filter(name, model, spec.R_nominal, spec.filter_cfg,
                            x0=spec.x0, P0=spec.P0, rng=make_rng(seed, 1))
            if cod:
                f = CODFilter(f, w=spec.w, alpha=spec.alpha, gamma=spec.gamma,
                              exclude_flagged=spec.exclude_flagged)
            est = np.empty(spec.M)
            for k in range(spec.M):
                f.step(traj.measurements[k])
                est[k] = f.estimate.mean[0]
            finite = bool(np.all(np.isfinite(est)))
            out[(name, cod)] = (mse(est, truth) if finite else math.nan,
                                not finite, np.abs(est - truth))
    return r, out


def run_experiment(spec: ExperimentSpec, workers: int = 1) -> ResultTable:
    """Run ``spec.runs`` paired Monte Carlo runs.

    With ``workers > 1`` runs execute in separate processes; results are
    reassembled in run order, so the table does not depend on ``workers``.
    """
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(_run_one, [spec] * spec.runs, range(spec.runs)))
    else:
        results = [_run_one(spec, r) for r in range(spec.runs)]
    results.sort(key=lambda t: t[0])
    cells = {key: CellResult() for key in [(f, c) for f in spec.filters for c in spec.cod]}
    for _, out in results:
        for key, (m, div, err) in out.items():
            cells[key].mse.append(m)
            cells[key].diverged.append(div)
            cells[key].errors.append(err)
    return ResultTable(spec, cells)


# ---------------------------------------------------------------------------
# ordering suite


@dataclass(frozen=True)
class OrderingCheck:
    name: str
    passed: bool
    detail: str


def _improvement(table: ResultTable, name: str) -> float:
    base = table.mean_mse(name, False)
    return (base - table.mean_mse(name, True)) / base


def check_orderings(table: ResultTable) -> list[OrderingCheck]:
    """Directional checks on one regime's table.

    Cases C and D: COD lowers the mean MSE of every filter run both ways.
    Case C: ``VB-HAUKF <= VB-AUKF <= UKF`` without COD.
    Case D: COD's relative MSE reduction is larger for UKF than for VB-HAUKF.
    Checks whose filters or regime are absent are skipped.
    """
    spec = table.spec
    case = spec.regime.case
    checks: list[OrderingCheck] = []
    both = {False, True} <= set(spec.cod)
    if case in (NoiseCase.C, NoiseCase.D) and both:
        for f in spec.filters:
            a, b = table.mean_mse(f, False), table.mean_mse(f, True)
            checks.append(OrderingCheck(f"{case.value}: COD reduces {f}", b < a,
                                        f"{a:.4f} -> {b:.4f}"))
    have = set(spec.filters)
    if case is NoiseCase.C and False in spec.cod and {"UKF", "VB-AUKF", "VB-HAUKF"} <= have:
        h, v, u = (table.mean_mse(f, False) for f in ("VB-HAUKF", "VB-AUKF", "UKF"))
        checks.append(OrderingCheck("C: VB-HAUKF <= VB-AUKF <= UKF", h <= v <= u,
                                    f"{h:.4f} <= {v:.4f} <= {u:.4f}"))
    if case is NoiseCase.D and both and {"UKF", "VB-HAUKF"} <= have:
        iu, ih = _improvement(table, "UKF"), _improvement(table, "VB-HAUKF")
        checks.append(OrderingCheck("D: COD gain UKF > VB-HAUKF", iu > ih,
                                    f"{100 * iu:.2f}% vs {100 * ih:.2f}%"))
    return checks


# ---------------------------------------------------------------------------
# CSV output


def _write(path, metadata: dict | None, header: Sequence[str], rows: Iterable[Sequence]):
    with open(path, "w", newline="") as fh:
        for k, v in (metadata or {}).items():
            fh.write(f"# {k}: {v}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _fmt(x: float) -> str:
    return repr(float(x))


def write_runs_csv(table: ResultTable, path, metadata: dict | None = None) -> None:
    case = table.spec.regime.case.value
    rows = []
    for f, c in table.keys():
        cell = table[(f, c)]
        for r, (m, d) in enumerate(zip(cell.mse, cell.diverged)):
            rows.append((case, f, int(c), r, _fmt(m), int(d)))
    _write(path, metadata, ("regime", "filter", "cod", "run", "mse", "diverged"), rows)


def summary_rows(table: ResultTable):
    case = table.spec.regime.case.value
    return [(case, f, int(c), _fmt(table[(f, c)].mean_mse), table[(f, c)].runs_used)
            for f, c in table.keys()]


def write_summary_csv(table: ResultTable, path, metadata: dict | None = None) -> None:
    _write(path, metadata, ("regime", "filter", "cod", "mean_mse", "runs_used"),
           summary_rows(table))


def write_cdf_csv(table: ResultTable, path, metadata: dict | None = None,
                  max_points: int = 1000) -> None:
    """Empirical CDF of per-step absolute errors, thinned to ``max_points`` rows per cell.

    Thinning keeps evenly spaced order statistics (always including the
    maximum), which is enough for plotting.
    """
    rows = []
    for f, c in table.keys():
        errs = table[(f, c)].error_samples()
        if errs.size == 0:
            continue
        pts = cdf_points(errs)
        n = len(pts)
        if n > max_points:
            idx = np.unique(np.ceil(np.linspace(1, n, max_points)).astype(int) - 1)
            pts = [pts[i] for i in idx]
        rows.extend((f, int(c), _fmt(e), _fmt(p)) for e, p in pts)
    _write(path, metadata, ("filter", "cod", "error", "fraction"), rows)
