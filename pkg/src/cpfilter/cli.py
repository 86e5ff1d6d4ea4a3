"""Command-line driver: simulate, bench, cod-demo and fingerprint build/match.

Configuration is a YAML file of nested sections (see ``DEFAULTS``). Every
key is optional; unknown keys are rejected. All randomness derives from the
top-level ``seed`` (default 42), which ``--seed`` overrides.

Exit codes: 0 success, 1 invalid input, 2 runtime or numerical failure,
3 ordering check failure (``bench --check``).
"""

from __future__ import annotations

import argparse
import copy
import csv
import sys
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .bench import (ExperimentSpec, check_orderings, run_experiment, summary_rows,
                    write_cdf_csv, write_runs_csv, write_summary_csv)
from .conformal import CalibrationWindow, cod_gate, conformal_quantile
from .filters import FILTER_NAMES, FilterConfig
from .fingerprint import (DBFormatError, FingerprintDB, SyntheticField, build_db,
                          calibration_scores, grid_nodes, labeled_queries, localize)
from .model import NoiseRegime, make_rng, simulate, ungm_model

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME, EXIT_CHECK = 0, 1, 2, 3

DEFAULTS = {
    "seed": 42,
    "model": {"Q": 10.0, "x0": 0.1},
    "regime": {"case": "A", "R": 1.0, "a": 0.1, "R1": 1.0, "R2": 30.0, "M": 500},
    "filters": {
        "names": list(FILTER_NAMES),
        "R": 1.0,
        "x0": 0.0,
        "P0": 1.0,
        "kappa": None,
        "rho": 0.97,
        "vb_iters": 3,
        "huber_delta": "auto",
        "pf_particles": 500,
    },
    "cod": {"enabled": [False, True], "w": 100, "alpha": 0.05, "gamma": 10.0,
            "exclude_flagged": True},
    "bench": {"runs": 100, "workers": 1, "cdf_points": 1000},
    "fingerprint": {
        "nx": 4,
        "ny": 4,
        "spacing": 3.0,
        "n_bumps": 4,
        "n_cal": 20,
        "noise_std": 1.0,
        "n_calib": 1000,
        "n_test": 1000,
        "alpha": 0.05,
        "db": "fingerprint_db.csv",
    },
    "output": {"dir": "out"},
}


class ConfigError(ValueError):
    pass


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, val in override.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown configuration key '{where}'")
        if isinstance(base[key], dict):
            if not isinstance(val, dict):
                raise ConfigError(f"'{where}' must be a section of key: value pairs")
            out[key] = _merge(base[key], val, where + ".")
        else:
            out[key] = val
    return out


def load_config(path: str | None, seed: int | None = None) -> dict:
    """Parse ``path`` (or use the defaults) and apply the ``--seed`` override."""
    data = {}
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        try:
            data = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
    cfg = _merge(DEFAULTS, data)
    if seed is not None:
        cfg["seed"] = seed
    try:
        cfg["seed"] = int(cfg["seed"])
    except (TypeError, ValueError):
        raise ConfigError(f"seed must be an integer, got {cfg['seed']!r}") from None
    if cfg["seed"] < 0:
        raise ConfigError("seed must be nonnegative")
    return cfg


def _flatten(d: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in d.items():
        if isinstance(v, dict):
            out.update(_flatten(v, f"{prefix}{k}."))
        else:
            out[f"{prefix}{k}"] = v
    return out


def metadata(cfg: dict, command: str) -> dict:
    meta = {"command": command, "version": __version__}
    meta.update(_flatten(cfg))
    return meta


def _regime(cfg: dict) -> NoiseRegime:
    r = cfg["regime"]
    try:
        return NoiseRegime(case=r["case"], R=float(r["R"]), a=float(r["a"]), R1=float(r["R1"]),
                           R2=float(r["R2"]), M=int(r["M"]))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"regime: {exc}") from None


def _experiment(cfg: dict) -> ExperimentSpec:
    f, c, m = cfg["filters"], cfg["cod"], cfg["model"]
    try:
        fcfg = FilterConfig(kappa=f["kappa"], rho=float(f["rho"]), vb_iters=int(f["vb_iters"]),
                            huber_delta=f["huber_delta"], pf_particles=int(f["pf_particles"]))
        enabled = c["enabled"]
        if isinstance(enabled, bool):
            enabled = [enabled]
        reg = _regime(cfg)
        return ExperimentSpec(
            regime=reg, filters=tuple(f["names"]), cod=tuple(enabled),
            runs=int(cfg["bench"]["runs"]), M=reg.M, base_seed=cfg["seed"],
            Q=float(m["Q"]), R_nominal=float(f["R"]), x0_true=float(m["x0"]),
            x0=float(f["x0"]), P0=float(f["P0"]), filter_cfg=fcfg,
            w=int(c["w"]), alpha=float(c["alpha"]), gamma=float(c["gamma"]),
            exclude_flagged=bool(c["exclude_flagged"]),
        )
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def _out_dir(cfg: dict, override: str | None) -> Path:
    d = Path(override if override is not None else cfg["output"]["dir"])
    d.mkdir(parents=True, exist_ok=True)
    return d


def _write_csv(path: Path, meta: dict, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        for k, v in meta.items():
            fh.write(f"# {k}: {v}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


# ---------------------------------------------------------------------------
# commands


def cmd_simulate(cfg: dict, out: Path) -> int:
    reg = _regime(cfg)
    try:
        model = ungm_model(float(cfg["model"]["Q"]))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"model: {exc}") from None
    traj = simulate(model, reg, reg.M, cfg["seed"], x0=float(cfg["model"]["x0"]))
    rows = [(k + 1, repr(float(traj.truth[k, 0])), repr(float(traj.measurements[k, 0])))
            for k in range(len(traj))]
    path = out / "trajectory.csv"
    _write_csv(path, metadata(cfg, "simulate"), ("k", "truth", "measurement"), rows)
    print(f"wrote {len(rows)} steps to {path}")
    return EXIT_OK


def cmd_bench(cfg: dict, out: Path, check: bool) -> int:
    spec = _experiment(cfg)
    table = run_experiment(spec, workers=int(cfg["bench"]["workers"]))
    meta = metadata(cfg, "bench")
    write_runs_csv(table, out / "bench_runs.csv", meta)
    write_summary_csv(table, out / "bench_summary.csv", meta)
    write_cdf_csv(table, out / "bench_cdf.csv", meta, max_points=int(cfg["bench"]["cdf_points"]))

    print(f"{'regime':<7}{'filter':<10}{'cod':>4}{'mean_mse':>14}{'runs_used':>11}")
    for case, name, cod, m, used in summary_rows(table):
        print(f"{case:<7}{name:<10}{cod:>4}{float(m):>14.4f}{used:>11}")
    if not check:
        return EXIT_OK
    checks = check_orderings(table)
    for c in checks:
        print(f"[{'PASS' if c.passed else 'FAIL'}] {c.name}: {c.detail}")
    if not checks:
        print("no ordering checks apply to this configuration")
    return EXIT_OK if all(c.passed for c in checks) else EXIT_CHECK


def cmd_cod_demo(cfg: dict, out: Path) -> int:
    """Twenty clean calibration scores, then twenty test scores with two gross outliers."""
    alpha = float(cfg["cod"]["alpha"])
    rng = make_rng(cfg["seed"], 31)
    calib = np.abs(rng.standard_normal(20))
    test = np.abs(rng.standard_normal(20))
    test[[6, 14]] += 6.0
    win = CalibrationWindow(20, alpha, calib)
    qhat = conformal_quantile(calib, alpha)
    rows, flagged = [], []
    for k, s in enumerate(test, start=1):
        d, _ = cod_gate(float(s), win, 1.0, gamma=float(cfg["cod"]["gamma"]), exclude_flagged=True)
        rows.append((k, repr(d.score), repr(d.threshold), int(d.is_outlier)))
        if d.is_outlier:
            flagged.append(k)
    _write_csv(out / "cod_demo.csv", metadata(cfg, "cod-demo"), ("step", "score", "threshold", "flag"), rows)
    print(f"alpha={alpha} initial threshold={qhat:.4f}")
    print("flagged steps:", " ".join(map(str, flagged)) if flagged else "none")
    return EXIT_OK


def _field_and_nodes(cfg: dict):
    fp = cfg["fingerprint"]
    try:
        nx, ny, spacing = int(fp["nx"]), int(fp["ny"]), float(fp["spacing"])
        if nx < 1 or ny < 1 or nx * ny < 2 or spacing <= 0:
            raise ValueError("grid needs at least two nodes and a positive spacing")
        nodes = grid_nodes(nx, ny, spacing)
        field = SyntheticField.random(((nx - 1) * spacing, (ny - 1) * spacing),
                                      n_bumps=int(fp["n_bumps"]), seed=cfg["seed"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"fingerprint: {exc}") from None
    return field, nodes


def _db_path(cfg: dict, out: Path) -> Path:
    p = Path(cfg["fingerprint"]["db"])
    return p if p.is_absolute() else out / p


def cmd_fingerprint_build(cfg: dict, out: Path) -> int:
    field, nodes = _field_and_nodes(cfg)
    fp = cfg["fingerprint"]
    db = build_db(field, nodes, make_rng(cfg["seed"], 21), n_cal=int(fp["n_cal"]),
                  noise_std=float(fp["noise_std"]))
    path = _db_path(cfg, out)
    db.to_csv(path, [f"{k}: {v}" for k, v in metadata(cfg, "fingerprint build").items()])
    print(f"wrote {len(db)} nodes to {path}")
    return EXIT_OK


def cmd_fingerprint_match(cfg: dict, out: Path) -> int:
    """Split-conformal localization of held-out synthetic queries.

    The synthetic field is regenerated from the seed and grid settings, so
    ``match`` must use the configuration the database was built with.
    """
    from scipy.stats import binom

    db = FingerprintDB.from_csv(_db_path(cfg, out))
    field, _ = _field_and_nodes(cfg)
    fp = cfg["fingerprint"]
    alpha = float(fp["alpha"])
    n_calib, n_test = int(fp["n_calib"]), int(fp["n_test"])
    if n_calib < 1 or n_test < 1:
        raise ConfigError("fingerprint: n_calib and n_test must be positive")
    rng = make_rng(cfg["seed"], 22)
    noise = float(fp["noise_std"])
    cq, cy = labeled_queries(db, field, n_calib, rng, noise)
    scores = calibration_scores(db, cq, cy)
    tq, ty = labeled_queries(db, field, n_test, rng, noise)

    rows, covered = [], 0
    for i, (q, y) in enumerate(zip(tq, ty), start=1):
        loc = localize(db, q, scores, alpha)
        hit = int(y) in loc.set
        covered += hit
        rows.append((i, int(y), loc.point_estimate, " ".join(map(str, sorted(loc.set))),
                     len(loc.set), int(hit)))
    _write_csv(out / "fingerprint_match.csv", metadata(cfg, "fingerprint match"),
               ("query", "true_node", "point_estimate", "set_members", "set_size", "covered"), rows)
    cov = covered / n_test
    lo = binom.ppf(0.005, n_test, 1.0 - alpha) / n_test
    acc = np.mean([r[1] == r[2] for r in rows])
    print(f"queries={n_test} coverage={cov:.4f} (99% binomial lower bound at {1 - alpha:.2f}: {lo:.4f}) "
          f"accuracy={acc:.4f} mean_set_size={np.mean([r[4] for r in rows]):.3f}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML configuration file")
    common.add_argument("--out", help="output directory (overrides output.dir)")
    common.add_argument("--seed", type=int, help="random seed (overrides the config)")

    p = argparse.ArgumentParser(prog="cpfilter", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("simulate", parents=[common], help="write one UNGM trajectory")
    b = sub.add_parser("bench", parents=[common], help="Monte Carlo filter comparison")
    b.add_argument("--check", action="store_true", help="exit 3 unless all ordering checks pass")
    sub.add_parser("cod-demo", parents=[common], help="conformal outlier gate on 20 scores")
    fp = sub.add_parser("fingerprint", help="fingerprint database tools")
    fsub = fp.add_subparsers(dest="action", required=True)
    fsub.add_parser("build", parents=[common], help="survey a synthetic grid into a DB CSV")
    fsub.add_parser("match", parents=[common], help="localize held-out queries against a DB")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.seed)
        out = _out_dir(cfg, args.out)
        if args.command == "simulate":
            return cmd_simulate(cfg, out)
        if args.command == "bench":
            return cmd_bench(cfg, out, args.check)
        if args.command == "cod-demo":
            return cmd_cod_demo(cfg, out)
        if args.action == "build":
            return cmd_fingerprint_build(cfg, out)
        return cmd_fingerprint_match(cfg, out)
    except (ConfigError, DBFormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (ValueError, np.linalg.LinAlgError, FloatingPointError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
