"""Experiment configuration: a JSON document with defaults for every field.

Unknown keys are rejected so a typo in a sweep definition fails loudly.
Seeds missing from the document are derived from ``seeds.master``.
"""

from __future__ import annotations

import copy
import json
from pathlib import Path

import numpy as np

from .integrators import COMPATIBLE, STEPPERS
from .systems import FIRST_INTEGRALS, SYSTEMS, get_system


class ConfigError(ValueError):
    pass


SEED_NAMES = ("data", "noise", "init", "shuffle", "test")
DEFAULT_INTEGRATOR = {"separable": "sv", "chain": "cf4"}
SWEEP_INTEGRATORS = {"separable": ("ee", "sv", "rk4"), "chain": ("ee", "le", "rk4", "cf4")}

DEFAULTS = {
    "system": "pendulum-k1",
    "k": None,
    "N": 500,
    "M": 5,
    "dt": None,
    "t_final": 0.1,
    "eps": 0.0,
    "reproject": False,
    "rtol": 1e-10,
    "atol": 1e-12,
    "model": {"hidden": [100, 100, 100], "ridge": 0.0},
    "train": {
        "integrator": None,
        "epochs": 200,
        "batch_size": 32,
        "lr": 1e-3,
        "beta1": 0.9,
        "beta2": 0.999,
        "eps_adam": 1e-8,
        "mu": 0.0,
        "first_integral": None,
        "reg_indices": None,
    },
    "eval": {"n_test": 100, "m_test": 20, "t_test": 1.0, "metrics": ["e1", "e2", "drift"]},
    "sweep": {
        "N": [50, 500, 1000, 1500],
        "M": [2, 3, 5],
        "eps": [0.0, 0.001, 0.01, 0.1],
        "integrators": None,
        "repeats": 5,
    },
    "seeds": {"master": 0, **{k: None for k in SEED_NAMES}},
    "output": {"dir": None},
}


def _merge(base: dict, over: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, val in over.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict):
            if not isinstance(val, dict):
                raise ConfigError(f"config key {where!r} must be a table")
            out[key] = _merge(base[key], val, where + ".")
        else:
            out[key] = val
    return out


def derive_seeds(master: int) -> dict:
    ss = np.random.SeedSequence(int(master))
    return {k: int(s.generate_state(1)[0]) for k, s in zip(SEED_NAMES, ss.spawn(len(SEED_NAMES)))}


def resolve(doc: dict | None = None, explicit_time: str | None = None, check_batch: bool = True) -> dict:
    """Merge ``doc`` over the defaults, validate, fill seeds and the time step.

    ``explicit_time`` names which of dt / t_final the user set when the
    document came from command-line flags; otherwise it is inferred.
    ``check_batch=False`` skips the batch size vs N check, for commands that
    do not train on this N (generate) or clip the batch per run (sweep).
    """
    doc = doc or {}
    if not isinstance(doc, dict):
        raise ConfigError("configuration must be a JSON object")
    cfg = _merge(DEFAULTS, doc)
    given_dt = doc.get("dt") is not None
    given_t = doc.get("t_final") is not None
    if explicit_time == "dt" or (given_dt and not given_t):
        cfg["t_final"] = None
    elif explicit_time == "t_final" or given_t:
        if given_dt and explicit_time is None:
            raise ConfigError("give exactly one of 'dt' and 't_final'")
        cfg["dt"] = None
    if cfg["system"] not in SYSTEMS:
        raise ConfigError(f"unknown system {cfg['system']!r}; known: {sorted(SYSTEMS)}")
    variant = variant_for(get_system(cfg["system"]))
    if cfg["train"]["integrator"] is None:
        cfg["train"]["integrator"] = DEFAULT_INTEGRATOR[variant]
    if cfg["sweep"]["integrators"] is None:
        cfg["sweep"]["integrators"] = list(SWEEP_INTEGRATORS[variant])
    _validate(cfg, check_batch)
    M = cfg["M"]
    if cfg["dt"] is None:
        cfg["dt"] = cfg["t_final"] / (M - 1)
    else:
        cfg["t_final"] = cfg["dt"] * (M - 1)
    seeds = cfg["seeds"]
    derived = derive_seeds(seeds["master"])
    for k in SEED_NAMES:
        if seeds[k] is None:
            seeds[k] = derived[k]
    return cfg


def _validate(cfg: dict, check_batch: bool = True):
    if cfg["system"] not in SYSTEMS:
        raise ConfigError(f"unknown system {cfg['system']!r}; known: {sorted(SYSTEMS)}")
    system = get_system(cfg["system"])
    if cfg["k"] is not None and getattr(system, "k", None) != cfg["k"]:
        raise ConfigError(f"k={cfg['k']} does not match system {cfg['system']!r}")
    if not isinstance(cfg["N"], int) or cfg["N"] < 1:
        raise ConfigError(f"N must be a positive integer (got {cfg['N']!r})")
    if not isinstance(cfg["M"], int) or cfg["M"] < 2:
        raise ConfigError(f"M must be an integer >= 2 (got {cfg['M']!r})")
    if (cfg["dt"] is None) == (cfg["t_final"] is None):
        raise ConfigError("give exactly one of 'dt' and 't_final'")
    step = cfg["dt"] if cfg["dt"] is not None else cfg["t_final"]
    if not (isinstance(step, (int, float)) and step > 0):
        raise ConfigError("dt / t_final must be positive")
    if cfg["eps"] < 0:
        raise ConfigError("eps must be non-negative")
    if cfg["rtol"] <= 0 or cfg["atol"] <= 0:
        raise ConfigError("tolerances must be positive")
    tr = cfg["train"]
    if tr["integrator"] not in STEPPERS:
        raise ConfigError(f"unknown integrator {tr['integrator']!r}; known: {sorted(STEPPERS)}")
    variant = variant_for(system)
    if tr["integrator"] not in COMPATIBLE[variant]:
        raise ConfigError(f"integrator {tr['integrator']!r} is incompatible with a {variant} model "
                          f"(allowed: {', '.join(COMPATIBLE[variant])})")
    if tr["epochs"] < 0 or tr["batch_size"] < 1:
        raise ConfigError("epochs must be >= 0 and batch_size >= 1")
    if check_batch and tr["batch_size"] > cfg["N"]:
        raise ConfigError(f"batch_size {tr['batch_size']} exceeds N={cfg['N']}")
    if tr["lr"] <= 0:
        raise ConfigError("lr must be positive")
    if tr["mu"] < 0:
        raise ConfigError("mu must be non-negative")
    if tr["mu"] > 0 and tr["first_integral"] is None:
        raise ConfigError("mu > 0 needs a first_integral id")
    if tr["first_integral"] is not None and tr["first_integral"] not in FIRST_INTEGRALS:
        raise ConfigError(f"unknown first integral {tr['first_integral']!r}")
    ev = cfg["eval"]
    if ev["n_test"] < 2 or ev["m_test"] < 1 or ev["t_test"] <= 0:
        raise ConfigError("eval needs n_test >= 2, m_test >= 1 and t_test > 0")
    if set(ev["metrics"]) - {"e1", "e2", "drift"}:
        raise ConfigError(f"unknown metrics in {ev['metrics']!r}")
    sw = cfg["sweep"]
    for key in ("N", "M", "eps", "integrators"):
        if not sw[key]:
            raise ConfigError(f"sweep.{key} is empty")
    bad = [i for i in sw["integrators"] if i not in COMPATIBLE[variant]]
    if bad:
        raise ConfigError(f"sweep integrators {bad} are incompatible with a {variant} model")
    if any(m < 2 for m in sw["M"]) or any(n < 1 for n in sw["N"]) or any(e < 0 for e in sw["eps"]):
        raise ConfigError("sweep grid needs N >= 1, M >= 2 and eps >= 0")
    if sw["repeats"] < 1:
        raise ConfigError("sweep.repeats must be >= 1")
    if not isinstance(cfg["seeds"]["master"], int):
        raise ConfigError("seeds.master must be an integer")


def variant_for(system) -> str:
    return "chain" if system.manifold == "sphere" else "separable"


def load(path) -> dict:
    """Parse a JSON configuration file (not yet resolved)."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise ConfigError("configuration must be a JSON object")
    return doc


def dumps(cfg: dict) -> str:
    """Canonical one-line rendering used in reproducibility headers."""
    return json.dumps(cfg, sort_keys=True, separators=(",", ":"))
