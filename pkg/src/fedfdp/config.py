"""Run configuration: JSON schema, validation and construction of run inputs."""

from __future__ import annotations

import copy
import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Optional

import jsonschema
import numpy as np

from . import data as D
from .errors import ConfigurationError
from .federation import HyperParams
from .model import ModelSpec

_num = {"type": "number"}
_pos = {"type": "number", "exclusiveMinimum": 0}
_nonneg = {"type": "number", "minimum": 0}

SCHEMA: dict = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "fedfdp run config",
    "type": "object",
    "additionalProperties": False,
    "required": ["dataset", "model", "algorithm", "hyper"],
    "properties": {
        "dataset": {
            "type": "object",
            "additionalProperties": False,
            "required": ["kind"],
            "properties": {
                "kind": {"enum": ["mnist", "fashion-idx", "synthetic"]},
                "images": {"type": "string"},
                "labels": {"type": "string"},
                "n": {"type": "integer", "minimum": 1},
                "dim": {"type": "integer", "minimum": 1},
                "classes": {"type": "integer", "minimum": 2},
                "scale": _pos,
                "limit": {"type": "integer", "minimum": 1},
            },
            "allOf": [
                {"if": {"properties": {"kind": {"const": "synthetic"}}},
                 "then": {"required": ["n", "dim", "classes"]},
                 "else": {"required": ["images", "labels"]}},
            ],
        },
        "model": {
            "type": "object",
            "additionalProperties": False,
            "required": ["kind"],
            "properties": {
                "kind": {"enum": ["multinomial-logistic", "mlp-1-hidden"]},
                "hidden": {"type": "integer", "minimum": 1},
                "l2": _nonneg,
            },
        },
        "N": {"type": "integer", "minimum": 1},
        "beta": _pos,
        "eval_fraction": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        "algorithm": {"enum": ["fedavg", "fedfair", "fedfdp"]},
        "hyper": {
            "type": "object",
            "additionalProperties": False,
            "required": ["eta"],
            "properties": {
                "eta": _pos,
                "lambda": _nonneg,
                "q": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                "C": _pos,
                "sigma": _pos,
                "C_l": _pos,
                "sigma_l": _pos,
                "T": {"type": "integer", "minimum": 0},
                "epsilon": _pos,
                "delta": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "lr_schedule": {"enum": ["fixed", "inverse-t"]},
                "batch_size": {"type": "integer", "minimum": 1},
                "allow_negative_coef": {"type": "boolean"},
                "reuse_loss_release": {"type": "boolean"},
            },
            "oneOf": [{"required": ["T"]}, {"required": ["epsilon"]}],
        },
        "seed": {"type": "integer", "minimum": 0},
        "output": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"csv": {"type": "string"}, "jsonl": {"type": "string"},
                           "summary": {"type": "string"}},
        },
    },
    "allOf": [
        {"if": {"properties": {"algorithm": {"const": "fedfdp"}}},
         "then": {"properties": {"hyper": {"required": ["q", "C", "sigma", "C_l", "sigma_l", "delta"]}}},
         "else": {"properties": {"hyper": {
             "required": ["T"],
             "not": {"anyOf": [{"required": [k]} for k in ("epsilon", "sigma", "sigma_l", "C", "C_l", "delta")]},
         }}}},
    ],
}

DEFAULTS = {"N": 10, "beta": 0.1, "eval_fraction": 0.2, "seed": 0}


def _error_path(err: jsonschema.ValidationError) -> str:
    parts = [str(p) for p in err.absolute_path]
    if err.validator == "required":
        missing = [k for k in err.validator_value if k not in err.instance]
        if missing:
            parts.append(missing[0])
    elif err.validator == "additionalProperties":
        extra = [k for k in err.instance if k not in err.schema.get("properties", {})]
        if extra:
            parts.append(extra[0])
    return ".".join(parts) or "<root>"


def _deepest(err: jsonschema.ValidationError) -> jsonschema.ValidationError:
    # descend into if/then and allOf branches to report the concrete field
    while err.context:
        err = max(err.context, key=lambda e: len(e.absolute_path))
    return err


def validate(cfg: Any) -> None:
    validator = jsonschema.Draft202012Validator(SCHEMA)
    errors = sorted(validator.iter_errors(cfg), key=lambda e: -len(e.absolute_path))
    if not errors:
        return
    err = errors[0]
    if err.validator != "oneOf":
        err = _deepest(err)
    if err.validator == "oneOf" and list(err.absolute_path) == ["hyper"]:
        raise ConfigurationError("hyper: set exactly one of T and epsilon", "hyper.T")
    if err.validator == "not" and list(err.absolute_path) == ["hyper"]:
        bad = [k for k in ("epsilon", "sigma", "sigma_l", "C", "C_l", "delta") if k in err.instance]
        raise ConfigurationError(f"hyper.{bad[0]} only applies to fedfdp", f"hyper.{bad[0]}")
    path = _error_path(err)
    raise ConfigurationError(f"{path}: {err.message}", path)


@dataclass
class RunConfig:
    raw: dict

    @classmethod
    def from_dict(cls, cfg: dict, env: Optional[dict] = None) -> "RunConfig":
        validate(cfg)
        merged = {**DEFAULTS, **copy.deepcopy(cfg)}
        env = os.environ if env is None else env
        if env.get("FEDFDP_SEED"):
            try:
                merged["seed"] = int(env["FEDFDP_SEED"])
            except ValueError:
                raise ConfigurationError("FEDFDP_SEED must be an integer", "seed")
        return cls(merged)

    @classmethod
    def load(cls, path, env: Optional[dict] = None) -> "RunConfig":
        with open(path, encoding="utf-8") as fh:
            try:
                cfg = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigurationError(f"invalid JSON: {exc}", "<root>")
        cfg_dir = Path(path).resolve().parent
        ds = cfg.get("dataset") if isinstance(cfg, dict) else None
        if isinstance(ds, dict):
            for key in ("images", "labels"):
                if isinstance(ds.get(key), str) and not os.path.isabs(ds[key]):
                    ds[key] = str(cfg_dir / ds[key])
        return cls.from_dict(cfg, env)

    def to_json(self) -> str:
        return json.dumps(self.raw, indent=2, sort_keys=True)

    @property
    def algorithm(self) -> str:
        return self.raw["algorithm"]

    @property
    def seed(self) -> int:
        return int(self.raw["seed"])

    def epsilon_budget(self) -> Optional[float]:
        return self.raw["hyper"].get("epsilon")

    def hyper(self) -> HyperParams:
        h = self.raw["hyper"]
        kw = dict(eta=h["eta"], lam=h.get("lambda", 0.0), seed=self.seed)
        for src, dst in [("q", "q"), ("C", "C"), ("sigma", "sigma"), ("C_l", "C_l"),
                         ("sigma_l", "sigma_l"), ("T", "T"), ("delta", "delta"),
                         ("lr_schedule", "lr_schedule"), ("batch_size", "batch_size"),
                         ("allow_negative_coef", "allow_negative_coef"),
                         ("reuse_loss_release", "reuse_loss_release")]:
            if src in h:
                kw[dst] = h[src]
        if self.algorithm == "fedavg":
            kw["lam"] = 0.0
        return HyperParams(**kw)

    def load_data(self) -> tuple[np.ndarray, np.ndarray, int]:
        ds = self.raw["dataset"]
        if ds["kind"] == "synthetic":
            X, y, _ = D.synthetic_classification(ds["n"], ds["dim"], ds["classes"], self.seed,
                                                 scale=ds.get("scale", 4.0))
            return X, y, ds["classes"]
        X, y = D.load_idx(ds["images"], ds["labels"])
        if "limit" in ds:
            X, y = X[: ds["limit"]], y[: ds["limit"]]
        return X, y, max(int(y.max()) + 1, 2)

    def model_spec(self, input_dim: int, classes: int) -> ModelSpec:
        m = self.raw["model"]
        return ModelSpec(m["kind"], input_dim, classes, m.get("hidden"), m.get("l2", 0.0))

    def build(self):
        """Load data, partition, hold out eval shards. Returns (train, evals, spec)."""
        X, y, K = self.load_data()
        parts = D.dirichlet_partition(y, D.PartitionSpec(self.raw["N"], self.raw["beta"], self.seed))
        clients = D.make_clients(X, y, parts)
        train, evals = D.holdout_split(clients, self.raw["eval_fraction"], self.seed)
        return train, evals, self.model_spec(X.shape[1], K)
