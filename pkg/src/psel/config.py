"""JSON experiment configuration: parsing, validation and serialization.

Field names mirror :class:`~psel.montecarlo.ExperimentConfig`::

    {
      "model": {"family": "gaussian", "M": 2, "N": 10, "noise_variances": [1.0, 0.1]},
      "theta_true": [0.0, 0.1],
      "rule": {"kind": "sms"},
      "estimators": ["ml", "psml_nr", "mbp"],
      "estimator_options": {"mbp": {"max_iterations": 1}},
      "replications": 20000,
      "seed": 0,
      "sweep": {"axis": "N", "values": [5, 10, 20]},
      "batches": 32
    }
"""

from __future__ import annotations

import json
from pathlib import Path

from .errors import InputError
from .model import ModelSpec
from .montecarlo import ExperimentConfig, Sweep
from .selection import RuleKind, SelectionRule

_TOP_KEYS = {"model", "theta_true", "rule", "estimators", "estimator_options",
             "replications", "seed", "sweep", "batches"}
DEFAULT_REPLICATIONS = 100_000


def _require(d: dict, key: str, where: str):
    if key not in d:
        raise InputError(f"missing field '{key}' in {where}")
    return d[key]


def _only(d, allowed: set, where: str):
    if not isinstance(d, dict):
        raise InputError(f"{where} must be a JSON object")
    extra = set(d) - allowed
    if extra:
        raise InputError(f"unknown fields {sorted(extra)} in {where}")


def model_from_dict(d: dict) -> ModelSpec:
    _only(d, {"family", "M", "N", "noise_variances"}, "model")
    nv = d.get("noise_variances")
    return ModelSpec(_require(d, "family", "model"), _require(d, "M", "model"),
                     _require(d, "N", "model"), None if nv is None else tuple(nv))


def rule_from_dict(d: dict) -> SelectionRule:
    _only(d, {"kind", "weights"}, "rule")
    w = d.get("weights")
    return SelectionRule(_require(d, "kind", "rule"), None if w is None else tuple(w))


def config_from_dict(d: dict) -> ExperimentConfig:
    """Build and validate an :class:`ExperimentConfig`.

    Raises:
        InputError: on unknown fields, missing fields or invalid values.
    """
    _only(d, _TOP_KEYS, "config")
    try:
        model = model_from_dict(_require(d, "model", "config"))
        rule = rule_from_dict(d.get("rule", {"kind": "sms"}))
        sweep = d.get("sweep")
        if sweep is not None:
            _only(sweep, {"axis", "values"}, "sweep")
            sweep = Sweep(_require(sweep, "axis", "sweep"), tuple(_require(sweep, "values", "sweep")))
        opts = d.get("estimator_options", {})
        if not isinstance(opts, dict) or not all(isinstance(v, dict) for v in opts.values()):
            raise InputError("estimator_options must map estimator names to JSON objects")
        return ExperimentConfig(
            model=model,
            theta_true=tuple(_require(d, "theta_true", "config")),
            rule=rule,
            estimators=tuple(d.get("estimators", ("ml",))),
            replications=d.get("replications", DEFAULT_REPLICATIONS),
            seed=int(d.get("seed", 0)),
            sweep=sweep,
            batches=int(d.get("batches", 32)),
            estimator_options={k: dict(v) for k, v in opts.items()},
        )
    except InputError:
        raise
    except (TypeError, ValueError) as exc:
        raise InputError(f"invalid config: {exc}") from None


def config_to_dict(cfg: ExperimentConfig) -> dict:
    m = cfg.model
    model = {"family": m.family.value, "M": m.M, "N": m.N}
    if m.noise_variances is not None:
        model["noise_variances"] = list(m.noise_variances)
    rule = {"kind": cfg.rule.kind.value}
    if cfg.rule.kind is RuleKind.RANDOMIZED:
        rule["weights"] = list(cfg.rule.weights)
    out = {
        "model": model,
        "theta_true": list(cfg.theta_true),
        "rule": rule,
        "estimators": list(cfg.estimators),
        "estimator_options": {k: dict(v) for k, v in cfg.estimator_options.items()},
        "replications": cfg.replications,
        "seed": cfg.seed,
        "sweep": None,
        "batches": cfg.batches,
    }
    if cfg.sweep is not None:
        vals = [int(v) for v in cfg.sweep.values] if cfg.sweep.axis == "N" else list(cfg.sweep.values)
        out["sweep"] = {"axis": cfg.sweep.axis, "values": vals}
    return out


def load_json(path) -> dict:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc.strerror}") from None
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise InputError(f"{path} is not valid JSON: {exc}") from None
    if not isinstance(d, dict):
        raise InputError(f"{path} must hold a JSON object")
    return d


def dump_config(cfg: ExperimentConfig) -> str:
    return json.dumps(config_to_dict(cfg), indent=2, sort_keys=True) + "\n"

