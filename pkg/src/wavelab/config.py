"""Run configuration: a TOML file of flat tables, parsed strictly.

Every key has a default; unknown tables or keys, wrong types and values
that violate module preconditions are all reported as :class:`ConfigError`
before any computation starts.
"""

import copy
import hashlib
from dataclasses import dataclass, field

import tomli
import tomli_w

from .dynamics import WaveParams
from .errors import ConfigError
from .noise import NoiseModel
from .ssm import MIN_MODES, SsmParams

MODELS = ("wave", "averaged", "fast-frozen", "ssm")

# table -> key -> default; None means "list, optional"
SCHEMA = {
    "run": {
        "model": "wave",
        "seed": 0,
        "ensemble": 1,
        "record_every": 1,
        "outputs": "out",
        "path_files": 16,
    },
    "wave": {
        "nu": 0.01,
        "K": 8,
        "dt": 1e-3,
        "T": 0.5,
        "beta": 1.0,
        "alpha": 0.5,
        "scheme": "stiff-exact",
        "cubic_coeff": 1.0,
        "u0": [1.0],
        "u1": [],
    },
    "noise": {
        "r": 4.0,
        "scale": 1.0,
        "b": [],
    },
    "weak_error": {
        "nu_grid": [0.04, 0.02, 0.01, 0.005],
        "coupling": "common-noise",
        "full_model": "wave",
        "functionals": ["proj:1"],
    },
    "fast_ou": {
        "frozen": [[], [1.0]],
        "paths": 64,
        "burn_in_nu": 50.0,
        "horizon_nu": 500.0,
        "dt_nu": 0.1,
        "mean_se": 3.0,
        "var_rtol": 0.05,
    },
    "martingale": {
        "mode": 1,
        "slope_rtol": 0.1,
        "r2_min": 0.99,
    },
    "ssm": {
        "nu": 0.01,
        "gamma": 1.0,
        "beta_prime": 0.0,
        "sigma": 0.0,
        "amps": [1.0, 0.5, 0.25, 0.125, 0.0625],
        "K_ssm": 5,
        "radius": 0.5,
        "a0": 0.1,
        "h": 1e-3,
        "T": 1.0,
    },
    "residual": {
        "mode": "deterministic",
        "values": [0.2, 0.1, 0.05],
        "slope_min": 4.7,
        "slope_max": 5.3,
        "window": 1.0,
        "n_windows": 32,
        "h_nu": 0.05,
    },
    "compare": {
        "samples": 10000,
    },
}


def _type_ok(value, default):
    if isinstance(default, bool):
        return isinstance(value, bool)
    if isinstance(default, int):
        return isinstance(value, int) and not isinstance(value, bool)
    if isinstance(default, float):
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if isinstance(default, str):
        return isinstance(value, str)
    if isinstance(default, list):
        return isinstance(value, list)
    return True


def _normalize(value, default):
    if isinstance(default, float) and not isinstance(value, bool):
        return float(value)
    return value


@dataclass
class RunConfig:
    """Fully populated configuration plus the source text it came from."""

    tables: dict
    source: str = ""
    path: str = None
    overrides: dict = field(default_factory=dict)

    def __getitem__(self, table):
        return self.tables[table]

    @property
    def model(self):
        return self.tables["run"]["model"]

    @property
    def seed(self):
        return self.tables["run"]["seed"]

    def emit(self):
        return tomli_w.dumps(self.tables)

    def hash(self):
        return hashlib.sha256(self.emit().encode("utf-8")).hexdigest()

    def wave_params(self, **changes):
        w = dict(self.tables["wave"], **changes)
        n = self.tables["noise"]
        try:
            if n["b"]:
                noise = NoiseModel(tuple(n["b"]), alpha=w["alpha"])
            else:
                noise = NoiseModel.power_law(w["K"], r=n["r"], alpha=w["alpha"], scale=n["scale"])
            return WaveParams(nu=w["nu"], noise=noise, K=w["K"], dt=w["dt"], T=w["T"],
                              beta=w["beta"], alpha=w["alpha"], scheme=w["scheme"],
                              cubic_coeff=w["cubic_coeff"])
        except ValueError as exc:
            raise ConfigError(f"[wave]/[noise]: {exc}") from None

    def ssm_params(self, **changes):
        s = dict(self.tables["ssm"], **changes)
        try:
            return SsmParams(nu=s["nu"], gamma=s["gamma"], beta_prime=s["beta_prime"],
                             sigma=s["sigma"], amps=tuple(s["amps"]), K_ssm=s["K_ssm"],
                             radius=s["radius"])
        except ValueError as exc:
            raise ConfigError(f"[ssm]: {exc}") from None


def parse_config(text, overrides=None, path=None):
    """Parse TOML text against the schema; ``overrides`` maps (table, key) -> value."""
    try:
        raw = tomli.loads(text) if text else {}
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    tables = copy.deepcopy(SCHEMA)
    for name, body in raw.items():
        if name not in SCHEMA:
            raise ConfigError(f"unknown table [{name}]")
        if not isinstance(body, dict):
            raise ConfigError(f"[{name}] must be a table")
        for key, value in body.items():
            if key not in SCHEMA[name]:
                raise ConfigError(f"unknown key {name}.{key}")
            default = SCHEMA[name][key]
            if not _type_ok(value, default):
                raise ConfigError(f"{name}.{key}: expected {type(default).__name__}, got {value!r}")
            tables[name][key] = _normalize(value, default)
    for (name, key), value in (overrides or {}).items():
        tables[name][key] = _normalize(value, SCHEMA[name][key])
    cfg = RunConfig(tables, text, path, dict(overrides or {}))
    validate(cfg)
    return cfg


def load_config(path, overrides=None):
    if path is None:
        return parse_config("", overrides)
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    return parse_config(text, overrides, path)


def validate(cfg):
    run = cfg["run"]
    if run["model"] not in MODELS:
        raise ConfigError(f"run.model must be one of {MODELS}, got {run['model']!r}")
    if not 0 <= run["seed"] < 2**64:
        raise ConfigError("run.seed must be a 64-bit unsigned integer")
    if run["ensemble"] < 1:
        raise ConfigError("run.ensemble must be at least 1")
    if run["record_every"] < 1:
        raise ConfigError("run.record_every must be at least 1")
    if run["path_files"] < 0:
        raise ConfigError("run.path_files must be nonnegative")
    params = cfg.wave_params()
    for key in ("u0", "u1"):
        if len(cfg["wave"][key]) > params.K:
            raise ConfigError(f"wave.{key} has more than K={params.K} coefficients")
    we = cfg["weak_error"]
    if we["coupling"] not in ("common-noise", "independent"):
        raise ConfigError(f"weak_error.coupling: unknown value {we['coupling']!r}")
    if we["full_model"] not in ("wave", "averaged"):
        raise ConfigError(f"weak_error.full_model: unknown value {we['full_model']!r}")
    if len(we["nu_grid"]) < 3:
        raise ConfigError("weak_error.nu_grid needs at least 3 values")
    if any(not 0 < x <= 1 for x in we["nu_grid"]):
        raise ConfigError("weak_error.nu_grid entries must lie in (0, 1]")
    for spec in we["functionals"]:
        parse_functional(spec, params.K)
    fo = cfg["fast_ou"]
    if fo["paths"] < 1 or fo["burn_in_nu"] < 10 or fo["horizon_nu"] <= 0 or fo["dt_nu"] <= 0:
        raise ConfigError("fast_ou: need paths >= 1, burn_in_nu >= 10, horizon_nu > 0, dt_nu > 0")
    if any(len(u) > params.K for u in fo["frozen"]):
        raise ConfigError("fast_ou.frozen entries must have at most K coefficients")
    if not 1 <= cfg["martingale"]["mode"] <= params.K:
        raise ConfigError("martingale.mode must lie in 1..K")
    sp = cfg.ssm_params()
    if sp.K_ssm < MIN_MODES:
        raise ConfigError(f"ssm.K_ssm must be at least {MIN_MODES}")
    s = cfg["ssm"]
    if abs(s["a0"]) > s["radius"]:
        raise ConfigError("ssm.a0 lies outside the expansion radius")
    if s["h"] <= 0 or s["T"] < 0:
        raise ConfigError("ssm.h must be positive and ssm.T nonnegative")
    res = cfg["residual"]
    if res["mode"] not in ("deterministic", "linear-noise"):
        raise ConfigError(f"residual.mode: unknown value {res['mode']!r}")
    if len(res["values"]) < 2 or any(x <= 0 for x in res["values"]):
        raise ConfigError("residual.values needs at least two positive entries")
    if cfg["compare"]["samples"] < 1:
        raise ConfigError("compare.samples must be positive")


def parse_functional(spec, K):
    """'proj:k', 'square:k' or 'l2sq' -> (kind, k)."""
    name, _, arg = spec.partition(":")
    kinds = {"proj": "projection", "square": "squared-projection", "l2sq": "squared-norm"}
    if name not in kinds:
        raise ConfigError(f"unknown functional {spec!r}")
    if name == "l2sq":
        return kinds[name], None
    try:
        k = int(arg)
    except ValueError:
        raise ConfigError(f"functional {spec!r} needs a mode index") from None
    if not 1 <= k <= K:
        raise ConfigError(f"functional {spec!r}: mode outside 1..{K}")
    return kinds[name], k
