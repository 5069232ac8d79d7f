"""Run configuration: JSON-backed, schema-validated, echoed fully resolved.

Unknown keys are rejected anywhere in the tree; every omitted key is filled
with its default so the echoed resolved config reproduces the run bit-exactly
under the same seed.
"""

import json
import math

__all__ = ["ConfigError", "load_config", "resolve_config", "MODES"]

MODES = ("simulate", "fit", "fit-st", "predict", "diagnose")


class ConfigError(Exception):
    """Invalid configuration; maps to CLI exit code 1."""


def _real(x, path, positive=False):
    if isinstance(x, bool) or not isinstance(x, (int, float)) or not math.isfinite(x):
        raise ConfigError(f"{path}: expected a finite number, got {x!r}")
    if positive and x <= 0:
        raise ConfigError(f"{path}: must be positive, got {x!r}")
    return float(x)


def _int(x, path, minimum=None):
    if isinstance(x, bool) or not isinstance(x, int):
        raise ConfigError(f"{path}: expected an integer, got {x!r}")
    if minimum is not None and x < minimum:
        raise ConfigError(f"{path}: must be >= {minimum}, got {x}")
    return x


def _bool(x, path):
    if not isinstance(x, bool):
        raise ConfigError(f"{path}: expected true/false, got {x!r}")
    return x


def _str(x, path, choices=None):
    if not isinstance(x, str):
        raise ConfigError(f"{path}: expected a string, got {x!r}")
    if choices and x not in choices:
        raise ConfigError(f"{path}: expected one of {choices}, got {x!r}")
    return x


def _num_list(x, path, positive=False):
    if not isinstance(x, list) or not x:
        raise ConfigError(f"{path}: expected a non-empty list of numbers")
    return [_real(v, f"{path}[{i}]", positive=positive) for i, v in enumerate(x)]


def _opt(inner):
    def check(x, path):
        return None if x is None else inner(x, path)

    return check


def _window(x, path):
    if not isinstance(x, dict):
        raise ConfigError(f"{path}: expected an object with x_min/x_max/y_min/y_max")
    keys = {"x_min", "x_max", "y_min", "y_max"}
    unknown = set(x) - keys
    if unknown:
        raise ConfigError(f"{path}: unknown keys {sorted(unknown)}")
    missing = keys - set(x)
    if missing:
        raise ConfigError(f"{path}: missing keys {sorted(missing)}")
    out = {k: _real(x[k], f"{path}.{k}") for k in sorted(keys)}
    if not (out["x_min"] < out["x_max"] and out["y_min"] < out["y_max"]):
        raise ConfigError(f"{path}: window must have positive extent")
    return out


def _num_or_matrix(x, path):
    if isinstance(x, list) and x and isinstance(x[0], list):
        rows = [_num_list(r, f"{path}[{i}]", positive=True) for i, r in enumerate(x)]
        if len({len(r) for r in rows}) != 1:
            raise ConfigError(f"{path}: ragged rate matrix")
        return rows
    return _num_list(x, path, positive=True)


def _num_or_list(x, path, low=None, high=None):
    vals = _num_list(x, path) if isinstance(x, list) else [_real(x, path)]
    for v in vals:
        if (low is not None and v <= low) or (high is not None and v >= high):
            raise ConfigError(f"{path}: values must lie in ({low}, {high})")
    return x if isinstance(x, list) else float(x)


_DEFAULT_WINDOW = {"x_min": 0.0, "x_max": 1.0, "y_min": 0.0, "y_max": 1.0}

# each leaf: (default, checker); sections are nested dicts
_SCHEMA = {
    "mode": (None, _opt(lambda x, p: _str(x, p, MODES))),
    "seed": (0, lambda x, p: _int(x, p, minimum=0)),
    "k": (1, lambda x, p: _int(x, p, minimum=1)),
    "window": (dict(_DEFAULT_WINDOW), _window),
    "covariance": {
        "tau2": (1.0, lambda x, p: _real(x, p, positive=True)),
        "gamma": (1.95, lambda x, p: _real(x, p, positive=True)),
    },
    "prior": {
        "alpha": (1.2, lambda x, p: _real(x, p, positive=True)),
        "eta": (0.04, lambda x, p: _real(x, p, positive=True)),
        "rho": (1.0, lambda x, p: _real(x, p, positive=True)),
        "nu": (3.0, lambda x, p: _real(x, p, positive=True)),
        "truncation": (None, _opt(lambda x, p: _real(x, p, positive=True))),
    },
    "grid": {
        "r": (2500, lambda x, p: _int(x, p, minimum=4)),
        "m": (16, lambda x, p: _int(x, p, minimum=1)),
    },
    "sampler": {
        "iterations": (50_000, lambda x, p: _int(x, p, minimum=1)),
        "burn_in": (10_000, lambda x, p: _int(x, p, minimum=0)),
        "thin": (10, lambda x, p: _int(x, p, minimum=1)),
        "l_squares": (None, _opt(lambda x, p: _int(x, p, minimum=1))),
        "delta": (None, _opt(lambda x, p: _real(x, p))),
        "target_n": (6000.0, lambda x, p: _real(x, p, positive=True)),
        "varsigma0": (0.2, lambda x, p: _real(x, p, positive=True)),
        "lambda_step0": (0.1, lambda x, p: _real(x, p, positive=True)),
        "c_halfwidth0": (0.1, lambda x, p: _real(x, p, positive=True)),
        "adapt_horizon": (None, _opt(lambda x, p: _int(x, p, minimum=0))),
        "fixed_ordering": (None, _opt(_bool)),
        "log_walk": (True, _bool),
        "snapshot_every": (10, lambda x, p: _int(x, p, minimum=1)),
        "audit": (False, _bool),
        "pilot_batch": (200, lambda x, p: _int(x, p, minimum=10)),
    },
    "temporal": {
        "xi2": (1.0, lambda x, p: _real(x, p, positive=True)),
        "varrho2": (0.5, lambda x, p: _real(x, p, positive=True)),
        "coupling": ("independent",
                     lambda x, p: _str(x, p, ("independent", "ngar1"))),
        "w": (0.5, lambda x, p: _num_or_list(x, p, low=0.0, high=1.0)),
        "a": (5.0, lambda x, p: _num_or_list(x, p, low=0.0)),
    },
    "input": {
        "pattern": (None, _opt(_str)),
        "source_window": (None, _opt(_window)),
    },
    "simulate": {
        "lambda": (None, _opt(_num_or_matrix)),
        "c": (None, _opt(lambda x, p: _num_list(x, p))),
        "t": (0, lambda x, p: _int(x, p, minimum=0)),
    },
    "predict": {
        "run_dir": (None, _opt(_str)),
        "kind": ("integrated_intensity",
                 lambda x, p: _str(x, p, ("integrated_intensity",
                                          "replicate_pattern", "future"))),
        "region": (None, _opt(_window)),
        "horizons": (1, lambda x, p: _int(x, p, minimum=1)),
        "replicates": (0, lambda x, p: _int(x, p, minimum=0)),
        "reference": (None, _opt(lambda x, p: _real(x, p))),
        "with_patterns": (False, _bool),
    },
    "diagnose": {
        "run_dir": (None, _opt(_str)),
        "mc_area_points": (10_000, lambda x, p: _int(x, p, minimum=1)),
        "grid_resolution": (50, lambda x, p: _int(x, p, minimum=2)),
    },
    "io": {
        "binary_snapshots": (False, _bool),
    },
}


def _resolve_section(raw, schema, path):
    if not isinstance(raw, dict):
        raise ConfigError(f"{path or 'config'}: expected an object")
    out = {}
    for key in raw:
        if key not in schema:
            raise ConfigError(f"unknown key '{path + key}'")
    for key, spec in schema.items():
        child_path = path + key
        if isinstance(spec, dict):
            out[key] = _resolve_section(raw.get(key, {}), spec, child_path + ".")
        else:
            default, checker = spec
            if key in raw:
                out[key] = checker(raw[key], child_path)
            else:
                out[key] = default
    return out


def resolve_config(raw, mode=None):
    """Validate a raw config dict and fill every default.

    ``mode`` (from the CLI subcommand) must agree with an explicit mode key.
    """
    out = _resolve_section(raw, _SCHEMA, "")
    if mode is not None:
        if out["mode"] is not None and out["mode"] != mode:
            raise ConfigError(
                f"config mode {out['mode']!r} does not match subcommand {mode!r}")
        out["mode"] = mode
    s = out["sampler"]
    if s["iterations"] <= s["burn_in"]:
        raise ConfigError("sampler.iterations must exceed sampler.burn_in")
    if s["delta"] is not None and s["delta"] <= 1:
        raise ConfigError("sampler.delta must exceed 1")
    if out["grid"]["m"] >= out["grid"]["r"]:
        raise ConfigError("grid.m must be smaller than grid.r")
    return out


def load_config(path, mode=None):
    """Read and resolve a JSON config file."""
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    return resolve_config(raw, mode=mode)
