"""Historical epoch data: CSV ingestion, reference-model fitting, semi-synthetic replay.

The replay environment treats the per-epoch least-squares fits as ground
truth and draws fresh Gaussian noise, because historical data only contain
the demand at the price that was actually charged.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from ..core_model import MetaInstance, PriceBounds
from ..simulator import (
    EpochEnvironment,
    RunSettings,
    SeedPlan,
    curves_from_trials,
    run_meta_paired,
)

log = logging.getLogger(__name__)

__all__ = [
    "DataError",
    "DatasetSchema",
    "EpochDataset",
    "FittedReference",
    "ReplayFeatures",
    "ReplayEnvironment",
    "load_schema",
    "ingest_epoch_dataset",
    "fit_reference_model",
    "save_fitted",
    "load_fitted",
    "replay_instance",
    "run_replay",
]

PD_FLOOR = 1e-8
MODEL_SIGMA_FLOOR = 1e-6


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class DatasetSchema:
    """Column mapping: ``epoch_key`` columns form the grouping key."""

    epoch_key: tuple[str, ...]
    features: tuple[str, ...]
    price: str
    outcome: str
    order: str = "lexicographic"
    shuffle_seed: int = 0
    price_bounds: tuple[float, float] | None = None

    def __post_init__(self):
        if not self.epoch_key:
            raise DataError("schema: epoch_key must name at least one column")
        if not self.features:
            raise DataError("schema: features must name at least one column")
        if self.order not in ("lexicographic", "shuffle"):
            raise DataError("schema: order must be 'lexicographic' or 'shuffle'")

    @classmethod
    def from_dict(cls, data: dict) -> "DatasetSchema":
        required = ("epoch_key", "features", "price", "outcome")
        for k in required:
            if k not in data:
                raise DataError(f"schema: missing field {k!r}")
        unknown = set(data) - set(required) - {"order", "shuffle_seed", "price_bounds"}
        if unknown:
            raise DataError(f"schema: unknown fields {sorted(unknown)}")
        key = data["epoch_key"]
        key = (key,) if isinstance(key, str) else tuple(key)
        bounds = data.get("price_bounds")
        return cls(key, tuple(data["features"]), data["price"], data["outcome"],
                   data.get("order", "lexicographic"), int(data.get("shuffle_seed", 0)),
                   tuple(float(b) for b in bounds) if bounds is not None else None)


def load_schema(path) -> DatasetSchema:
    try:
        return DatasetSchema.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"schema: cannot read {path}: {exc}") from exc


@dataclass(frozen=True)
class EpochDataset:
    key: tuple[str, ...]
    X: np.ndarray
    prices: np.ndarray
    outcomes: np.ndarray

    @property
    def horizon(self) -> int:
        return self.prices.size

    @property
    def designs(self) -> np.ndarray:
        return np.hstack([self.X, self.prices[:, None] * self.X])


def _parse_float(cell: str, row: int, column: str) -> float:
    try:
        value = float(cell)
    except ValueError:
        raise DataError(f"row {row}: column {column!r} is not numeric ({cell!r})") from None
    if not math.isfinite(value):
        raise DataError(f"row {row}: column {column!r} is not finite ({cell!r})")
    return value


def ingest_epoch_dataset(csv_path, schema: DatasetSchema) -> list[EpochDataset]:
    """Group CSV rows into epochs; epochs with fewer than ``2d + 2`` rows are dropped.

    Row numbers in error messages count the header as row 1.
    """
    d = len(schema.features)
    groups: dict[tuple, list] = {}
    with open(csv_path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{csv_path}: empty file, header expected") from None
        dupes = sorted({h for h in header if header.count(h) > 1})
        if dupes:
            raise DataError(f"duplicate header columns {dupes}")
        index = {h: k for k, h in enumerate(header)}
        wanted = [*schema.epoch_key, *schema.features, schema.price, schema.outcome]
        missing = [c for c in wanted if c not in index]
        if missing:
            raise DataError(f"schema names columns absent from the CSV header: {missing}")
        fcols = [index[c] for c in schema.features]
        for row_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(f"row {row_no}: expected {len(header)} cells, got {len(row)}")
            key = tuple(row[index[c]] for c in schema.epoch_key)
            x = [_parse_float(row[k], row_no, header[k]) for k in fcols]
            p = _parse_float(row[index[schema.price]], row_no, schema.price)
            y = _parse_float(row[index[schema.outcome]], row_no, schema.outcome)
            groups.setdefault(key, []).append((x, p, y))

    keys = sorted(groups)
    if schema.order == "shuffle":
        perm = np.random.default_rng(schema.shuffle_seed).permutation(len(keys))
        keys = [keys[k] for k in perm]
    out, dropped = [], 0
    for key in keys:
        rows = groups[key]
        if len(rows) < 2 * d + 2:
            dropped += 1
            continue
        X = np.array([r[0] for r in rows], dtype=float).reshape(len(rows), d)
        out.append(EpochDataset(key, X, np.array([r[1] for r in rows]),
                                np.array([r[2] for r in rows])))
    if dropped:
        log.info("dropped %d epoch(s) with fewer than %d rows", dropped, 2 * d + 2)
    return out


# ----------------------------------------------------------------------------
# Reference model


@dataclass(frozen=True)
class FittedReference:
    keys: list
    thetas: np.ndarray
    prior_mean: np.ndarray
    prior_cov: np.ndarray
    sigma: float
    X: list
    bounds: PriceBounds
    dropped: list = field(default_factory=list)

    @property
    def n_epochs(self) -> int:
        return len(self.keys)

    @property
    def dim(self) -> int:
        return self.thetas.shape[1] // 2

    def horizons(self) -> list[int]:
        return [x.shape[0] for x in self.X]


def fit_reference_model(datasets: Sequence[EpochDataset],
                        bounds: PriceBounds | tuple | None = None) -> FittedReference:
    """Per-epoch OLS on ``(x, p x)``, then a Gaussian over the fits.

    Epochs with a singular design Gram are dropped. The prior covariance is
    floored to be positive definite, and ``sigma`` is the pooled RMS residual.
    """
    keys, thetas, Xs, dropped = [], [], [], []
    sq, n = 0.0, 0
    for ds in datasets:
        M = ds.designs
        G = M.T @ M
        scale = max(float(np.max(np.abs(np.diag(G)))), 1e-300)
        if np.linalg.eigvalsh(G / scale)[0] <= 1e-12:
            log.info("dropping epoch %s: singular design Gram", ds.key)
            dropped.append(ds.key)
            continue
        theta = np.linalg.solve(G, M.T @ ds.outcomes)
        resid = ds.outcomes - M @ theta
        sq += float(resid @ resid)
        n += resid.size
        keys.append(ds.key)
        thetas.append(theta)
        Xs.append(ds.X)
    if len(thetas) < 2:
        raise DataError(f"need >= 2 epochs with identifiable fits, got {len(thetas)}")
    Th = np.vstack(thetas)
    mean = Th.mean(axis=0)
    cov = np.cov(Th, rowvar=False, ddof=1)
    cov = 0.5 * (cov + cov.T)
    eps = max(0.0, PD_FLOOR - float(np.linalg.eigvalsh(cov)[0]))
    cov = cov + eps * np.eye(cov.shape[0])
    if bounds is None:
        all_p = np.concatenate([ds.prices for ds in datasets])
        bounds = (float(all_p.min()), float(all_p.max()))
    if not isinstance(bounds, PriceBounds):
        try:
            bounds = PriceBounds(*bounds)
        except ValueError as exc:
            raise DataError(f"invalid price bounds {bounds}: {exc}") from exc
    return FittedReference(keys, Th, mean, cov, math.sqrt(sq / n), Xs, bounds, dropped)


def save_fitted(fitted: FittedReference, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    offsets = np.cumsum([0] + fitted.horizons())
    np.savez(out / "fitted.npz", thetas=fitted.thetas, prior_mean=fitted.prior_mean,
             prior_cov=fitted.prior_cov, X=np.vstack(fitted.X), offsets=offsets)
    meta = {"keys": [list(k) for k in fitted.keys], "sigma": fitted.sigma,
            "p_min": fitted.bounds.p_min, "p_max": fitted.bounds.p_max,
            "dropped": [list(k) for k in fitted.dropped], "n_epochs": fitted.n_epochs,
            "dim": fitted.dim}
    (out / "fitted.json").write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")
    return out


def load_fitted(directory) -> FittedReference:
    d = Path(directory)
    try:
        meta = json.loads((d / "fitted.json").read_text(encoding="utf-8"))
        arrays = np.load(d / "fitted.npz")
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read fitted model from {d}: {exc}") from exc
    off = arrays["offsets"]
    X = [arrays["X"][off[k]:off[k + 1]] for k in range(off.size - 1)]
    return FittedReference([tuple(k) for k in meta["keys"]], arrays["thetas"],
                           arrays["prior_mean"], arrays["prior_cov"], float(meta["sigma"]), X,
                           PriceBounds(meta["p_min"], meta["p_max"]),
                           [tuple(k) for k in meta.get("dropped", [])])


# ----------------------------------------------------------------------------
# Replay


@dataclass(frozen=True)
class ReplayFeatures:
    """Empirical feature pool; only the structural constants are used."""

    dim: int
    x_max: float
    lambda0: float

    @classmethod
    def from_pool(cls, Xs: Sequence[np.ndarray]) -> "ReplayFeatures":
        X = np.vstack(Xs)
        lam = float(np.linalg.eigvalsh(X.T @ X / X.shape[0])[0])
        return cls(X.shape[1], float(np.max(np.linalg.norm(X, axis=1))), max(lam, 1e-12))

    def sample(self, rng, n):
        raise NotImplementedError("replay features come from the historical pool")


def replay_instance(fitted: FittedReference) -> MetaInstance:
    sigma = fitted.sigma
    if sigma < MODEL_SIGMA_FLOOR:
        log.warning("pooled residual sigma %.3g is below %.0e; policies use the floor",
                    sigma, MODEL_SIGMA_FLOOR)
        sigma = MODEL_SIGMA_FLOOR
    return MetaInstance(
        n_epochs=fitted.n_epochs, horizon=max(fitted.horizons()),
        prior_mean=fitted.prior_mean, prior_cov=fitted.prior_cov, sigma=sigma,
        bounds=fitted.bounds, features=ReplayFeatures.from_pool(fitted.X),
    )


class ReplayEnvironment:
    """Historical features (permuted within each epoch) with the fitted truth."""

    def __init__(self, fitted: FittedReference, seed_plan: SeedPlan, permute: bool = True,
                 sigma: float | None = None):
        self.fitted = fitted
        self.seed_plan = seed_plan
        self.permute = permute
        self.sigma = fitted.sigma if sigma is None else sigma

    def __call__(self, trial: int, epoch: int) -> EpochEnvironment:
        X = self.fitted.X[epoch - 1]
        T = X.shape[0]
        sp = self.seed_plan
        if self.permute:
            X = X[sp.environment(trial, epoch, "features").permutation(T)]
        noise = self.sigma * sp.environment(trial, epoch, "noise").standard_normal(T)
        return EpochEnvironment(np.array(self.fitted.thetas[epoch - 1]),
                                np.ascontiguousarray(X, dtype=float), noise)


def run_replay(policies: Sequence[str], fitted: FittedReference, permutations: int, seed: int,
               settings: RunSettings | None = None, permute: bool = True) -> dict:
    """Paired replay over ``permutations`` within-epoch shuffles; one curve per policy."""
    if permutations < 1:
        raise DataError("replay needs at least one permutation")
    meta = replay_instance(fitted)
    plan = SeedPlan(seed)
    env = ReplayEnvironment(fitted, plan, permute=permute)
    results = [
        run_meta_paired(meta, policies, plan, trial=k, settings=settings, environment=env)
        for k in range(permutations)
    ]
    return curves_from_trials(results, policies)
