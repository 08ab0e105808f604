"""Result files: a regret CSV and a JSON manifest per experiment."""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import numpy as np

from ..core_model import MetaInstance, compute_derived_constants
from ..meta_learner import compute_N0, compute_N1_N2

__all__ = ["CSV_COLUMNS", "emit_results", "theory_lengths", "constants_report", "read_results"]

CSV_COLUMNS = ("epoch", "policy", "mean_cum_meta_regret", "stderr", "trials")

PROTOCOL_NOTE = ("replay is semi-synthetic: per-epoch least-squares fits act as the true demand "
                 "parameters and demand noise is Gaussian with the pooled residual scale")


def _jsonable(x):
    if isinstance(x, float) and not math.isfinite(x):
        return None
    if isinstance(x, (np.floating,)):
        return _jsonable(float(x))
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, np.ndarray):
        return [_jsonable(v) for v in x.tolist()]
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    return x


def theory_lengths(meta: MetaInstance) -> dict:
    """Exploration lengths from the closed-form formulas (None when constants degenerate)."""
    c = compute_derived_constants(meta)
    if c.degenerate:
        return {"N0": None, "N1": None, "N2": None}
    n0 = compute_N0(meta, c)
    n1, n2 = compute_N1_N2(meta, c, N0=n0, check_horizon=False)
    return {"N0": n0, "N1": n1, "N2": n2}


def constants_report(meta: MetaInstance, schedule=None) -> dict:
    c = compute_derived_constants(meta)
    out = {"c0": c.c0, "c1": c.c1, "c2": c.c2, "c3": c.c3, "c4": c.c4, "R": c.R,
           **theory_lengths(meta)}
    if schedule is not None:
        out["schedule"] = schedule.to_dict()
    return _jsonable(out)


def emit_results(curves: dict, out_dir, manifest: dict | None = None,
                 name: str = "results") -> tuple[Path, Path]:
    """Write ``<name>.csv`` (one row per epoch and policy) and ``<name>.manifest.json``.

    Curves are written in the given policy order; floats use their shortest
    round-trip representation so reruns are byte-identical.
    """
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from exc
    csv_path = out / f"{name}.csv"
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for policy, curve in curves.items():
            for k in range(curve.n_epochs):
                w.writerow([k + 1, policy, repr(float(curve.mean[k])),
                            repr(float(curve.stderr[k])), curve.trials])
    man_path = out / f"{name}.manifest.json"
    man_path.write_text(json.dumps(_jsonable(manifest or {}), indent=2, sort_keys=True) + "\n",
                        encoding="utf-8")
    return csv_path, man_path


def read_results(csv_path) -> dict:
    """Inverse of :func:`emit_results` for the CSV: ``{policy: (mean, stderr, trials)}``."""
    rows: dict = {}
    with open(csv_path, newline="", encoding="utf-8") as fh:
        for r in csv.DictReader(fh):
            rows.setdefault(r["policy"], []).append(
                (float(r["mean_cum_meta_regret"]), float(r["stderr"]), int(r["trials"])))
    return {p: (np.array([v[0] for v in vals]), np.array([v[1] for v in vals]), vals[0][2])
            for p, vals in rows.items()}
