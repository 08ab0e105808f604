"""Experiment configuration, presets and validation."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from ..core_model import ConstantFeatures, MetaInstance, PriceBounds, UniformBoxFeatures
from ..simulator import POLICY_KINDS

__all__ = ["ConfigError", "ExperimentConfig", "PRESETS", "preset", "load_config", "dump_config"]

USER_POLICIES = ("meta-oracle", "meta-dp", "meta-dp-pp", "greedy", "greedy-pp", "prior-free",
                 "ucb-only")
DEFAULT_TRIALS = 10


class ConfigError(ValueError):
    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


@dataclass(frozen=True)
class ExperimentConfig:
    """One synthetic experiment.

    ``prior_cov_scale`` sets ``Sigma = scale * I`` unless ``prior_cov`` is given;
    ``covariance`` says whether the policies are told the prior covariance.
    The environment always draws from the true prior.
    """

    scenario: str = "custom"
    n_epochs: int = 1000
    horizon: int = 1000
    dim: int = 5
    sigma: float = 1.0
    prior_mean: list | None = None
    prior_cov: list | None = None
    prior_cov_scale: float = 1e-2
    covariance: str = "known"
    p_min: float = 0.1
    p_max: float = 1.0
    features: dict = field(default_factory=lambda: {"kind": "uniform"})
    policies: list = field(default_factory=lambda: ["meta-dp", "greedy", "prior-free"])
    trials: int = DEFAULT_TRIALS
    seed: int = 0
    rho: float = 1.0
    ucb_mode: str = "fixed"
    exploration: dict = field(default_factory=lambda: {"mode": "practical"})
    output_dir: str = "results"
    notes: list = field(default_factory=list)

    # -- validation -------------------------------------------------------

    def __post_init__(self):
        _check(isinstance(self.n_epochs, int) and self.n_epochs >= 1, "n_epochs",
               "must be a positive integer")
        _check(isinstance(self.horizon, int) and self.horizon >= 2, "horizon",
               "must be an integer >= 2")
        _check(isinstance(self.dim, int) and self.dim >= 1, "dim", "must be a positive integer")
        _check(_is_real(self.sigma) and self.sigma >= 0, "sigma", "must be a nonnegative number")
        _check(_is_real(self.p_min) and _is_real(self.p_max) and 0 < self.p_min <= self.p_max,
               "p_min/p_max", "need 0 < p_min <= p_max")
        _check(self.covariance in ("known", "unknown"), "covariance",
               "must be 'known' or 'unknown'")
        _check(isinstance(self.trials, int) and self.trials >= 1, "trials",
               "must be a positive integer")
        _check(isinstance(self.seed, int) and 0 <= self.seed < 2**64, "seed",
               "must be an unsigned 64-bit integer")
        _check(_is_real(self.rho) and self.rho >= 1, "rho", "must be >= 1")
        _check(self.ucb_mode in ("fixed", "theory"), "ucb_mode", "must be 'fixed' or 'theory'")
        _check(isinstance(self.policies, list) and len(self.policies) > 0, "policies",
               "must be a nonempty list")
        for p in self.policies:
            _check(p in USER_POLICIES, "policies", f"unknown policy {p!r}")
        if self.covariance == "unknown":
            _check("meta-dp" not in self.policies, "policies",
                   "meta-dp needs the prior covariance; use meta-dp-pp when covariance is unknown")
        kind = self.features.get("kind") if isinstance(self.features, dict) else None
        _check(kind in ("uniform", "constant"), "features.kind", "must be 'uniform' or 'constant'")
        if kind == "constant":
            val = self.features.get("value", [1.0] * self.dim)
            _check(len(val) == self.dim, "features.value", f"must have length dim = {self.dim}")
        if self.prior_mean is not None:
            _check(len(self.prior_mean) == 2 * self.dim, "prior_mean",
                   f"must have length 2*dim = {2 * self.dim}")
        if self.prior_cov is not None:
            cov = np.asarray(self.prior_cov, dtype=float)
            _check(cov.shape == (2 * self.dim, 2 * self.dim), "prior_cov",
                   f"must be a {2 * self.dim}x{2 * self.dim} matrix")
        else:
            _check(_is_real(self.prior_cov_scale) and self.prior_cov_scale > 0,
                   "prior_cov_scale", "must be positive")
        ex = self.exploration
        _check(isinstance(ex, dict) and ex.get("mode", "practical") in ("practical", "theory"),
               "exploration.mode", "must be 'practical' or 'theory'")
        unknown = set(ex) - {"mode", "n0", "n1", "n2", "correction", "alternate_n0"}
        _check(not unknown, "exploration", f"unknown keys {sorted(unknown)}")
        if ex.get("n2") is not None:
            _check(int(ex["n2"]) % 2 == 0, "exploration.n2", "must be even")

    # -- derived objects ----------------------------------------------------

    def feature_sampler(self):
        if self.features["kind"] == "constant":
            return ConstantFeatures(tuple(self.features.get("value", [1.0] * self.dim)))
        return UniformBoxFeatures(self.dim, self.features.get("upper"))

    def meta_instance(self) -> MetaInstance:
        d = self.dim
        mean = (np.asarray(self.prior_mean, dtype=float) if self.prior_mean is not None
                else 0.1 * np.concatenate([np.ones(d), -np.ones(d)]))
        cov = (np.asarray(self.prior_cov, dtype=float) if self.prior_cov is not None
               else self.prior_cov_scale * np.eye(2 * d))
        return MetaInstance(
            n_epochs=self.n_epochs, horizon=self.horizon, prior_mean=mean, prior_cov=cov,
            sigma=float(self.sigma), bounds=PriceBounds(float(self.p_min), float(self.p_max)),
            features=self.feature_sampler(),
        )

    def simulator_policies(self) -> list[str]:
        """User policy names mapped to simulator kinds ("greedy" follows the covariance setting)."""
        out = []
        for p in self.policies:
            if p == "greedy" and self.covariance == "unknown":
                p = "greedy-pp"
            if p not in out:
                out.append(p)
        assert all(p in POLICY_KINDS for p in out)
        return out

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        if not isinstance(data, dict):
            raise ConfigError("<root>", "config must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(sorted(unknown)[0], "unknown field")
        base = {}
        if "preset" in data:
            raise ConfigError("preset", "use the 'scenario' field or --preset")
        if data.get("scenario") in PRESETS:
            base = PRESETS[data["scenario"]].to_dict()
        merged = {**base, **data}
        try:
            return cls(**merged)
        except TypeError as exc:
            raise ConfigError("<root>", str(exc)) from exc

    def with_overrides(self, **kw) -> "ExperimentConfig":
        kw = {k: v for k, v in kw.items() if v is not None}
        return replace(self, **kw)


def _is_real(x) -> bool:
    return isinstance(x, (int, float)) and not isinstance(x, bool) and math.isfinite(x)


def _check(ok: bool, name: str, message: str) -> None:
    if not ok:
        raise ConfigError(name, message)


_PMIN_NOTE = ("prices are (0, 1] in the source experiments; p_min = 0.1 is used because "
              "the model needs p_min > 0")

PRESETS = {
    "fig1": ExperimentConfig(scenario="fig1", notes=[_PMIN_NOTE]),
    "fig2a": ExperimentConfig(scenario="fig2a", dim=1,
                              features={"kind": "constant", "value": [1.0]}, notes=[_PMIN_NOTE]),
    "fig2b": ExperimentConfig(scenario="fig2b", dim=10, notes=[_PMIN_NOTE]),
    "fig3": ExperimentConfig(scenario="fig3", horizon=2000, covariance="unknown",
                             policies=["meta-dp-pp", "greedy", "prior-free"], notes=[_PMIN_NOTE]),
    "desk": ExperimentConfig(scenario="desk", n_epochs=300, horizon=300, dim=3,
                             notes=[_PMIN_NOTE]),
}


def preset(name: str) -> ExperimentConfig:
    if name not in PRESETS:
        raise ConfigError("preset", f"unknown preset {name!r}; known: {sorted(PRESETS)}")
    return PRESETS[name]


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise ConfigError("<file>", f"{path} does not exist") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError("<file>", f"invalid JSON: {exc}") from exc
    return ExperimentConfig.from_dict(data)


def dump_config(config: ExperimentConfig, path) -> None:
    Path(path).write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n",
                          encoding="utf-8")
