"""Run configuration: a flat ``key = value`` text file with ``schema = 1``.

Example::

    schema = 1
    model = crowding
    Lambda = 2.0
    d = 1
    n_max = 3
    h = 0.25
    h_plan = 3:0.5
    levels = 3
    mode = collar
    seed = 0

Every key is validated before anything is computed and unknown keys are
rejected by name.  :func:`dump_config` writes every field in a fixed order,
so ``parse -> dump -> parse`` is the identity and the dump is a stable
input for :func:`config_hash`.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

from .coefficients import CoefficientModel, constant_model, crowding_model, radial_count_model
from .sectorsolver import Context, Discretization

__all__ = ["SCHEMA", "ConfigError", "RunConfig", "parse_config", "load_config", "dump_config", "config_hash"]

SCHEMA = 1
MODEL_KINDS = ("constant", "crowding", "radial-count")
_SECTION = "run"


class ConfigError(ValueError):
    """Invalid run configuration; the message names the offending key."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass(frozen=True)
class RunConfig:
    """Validated run parameters.

    ``h_plan`` overrides ``h`` on individual levels; ``band`` is either a
    number or ``None`` (calibrate from the constant model at the same
    discretization).  ``out`` and ``workers`` do not influence results and
    are left out of the configuration hash.
    """

    model: str
    schema: int = SCHEMA
    d: int = 1
    rho: float = 1.0
    c: float = 1.0
    Lambda: float = 2.0
    thresholds: tuple[int, ...] = ()
    values: tuple[float, ...] = ()
    n_max: int = 3
    h: float = 0.25
    h_plan: tuple[tuple[int, float], ...] = ()
    levels: int = 2
    mode: str = "collar"
    tol: float = 1e-10
    max_iter: int = 50_000
    memory_budget: int = 2_000_000
    mass_floor: float = 0.99
    allow_low_mass: bool = True
    identity_tol: float = 1e-8
    band: Optional[float] = None
    beta: float = 2.0
    mc_samples: int = 10_000
    mc_inner: int = 16
    shell_budget: int = 4096
    check_sides: tuple[float, ...] = (1.0, 3.0)
    seed: int = 0
    out: str = "hmglab-out"
    workers: int = 1

    # -- derived objects --------------------------------------------------

    def coefficient_model(self) -> CoefficientModel:
        if self.model == "constant":
            return constant_model(self.c, self.d)
        if self.model == "crowding":
            return crowding_model(self.Lambda, self.d)
        return radial_count_model(self.thresholds, self.values, self.d)

    def discretization(self, h: Optional[float] = None) -> Discretization:
        return Discretization(
            h=self.h if h is None else h,
            n_max=self.n_max,
            rho=self.rho,
            tol=self.tol,
            max_iter=self.max_iter,
            memory_budget=self.memory_budget,
            mass_floor=self.mass_floor,
            allow_low_mass=self.allow_low_mass,
        )

    def context(self, h: Optional[float] = None) -> Context:
        return Context(self.coefficient_model(), self.discretization(h), self.mode)

    def h_for(self, m: int) -> float:
        return dict(self.h_plan).get(m, self.h)

    def plan(self) -> dict[int, float]:
        return {m: self.h_for(m) for m in range(self.levels + 1)}

    def replace(self, **changes) -> "RunConfig":
        return _validate(dataclasses.replace(self, **changes))


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}
_ORDER = [f.name for f in dataclasses.fields(RunConfig)]
_ORDER.remove("schema")
_ORDER.insert(0, "schema")
_UNHASHED = ("out", "workers")


# ---------------------------------------------------------------------------
# value codecs
# ---------------------------------------------------------------------------


def _parse_bool(text: str) -> bool:
    low = text.lower()
    if low in ("true", "yes", "1"):
        return True
    if low in ("false", "no", "0"):
        return False
    raise ValueError(f"expected true/false, got {text!r}")


def _parse_list(text: str, conv) -> tuple:
    return tuple(conv(x.strip()) for x in text.split(",") if x.strip())


def _parse_plan(text: str) -> tuple[tuple[int, float], ...]:
    out = {}
    for item in _parse_list(text, str):
        m, sep, h = item.partition(":")
        if not sep:
            raise ValueError(f"plan entries look like 'level:h', got {item!r}")
        out[int(m)] = float(h)
    return tuple(sorted(out.items()))


def _decode(key: str, text: str):
    if key == "h_plan":
        return _parse_plan(text)
    if key == "band":
        return None if text.lower() == "auto" else float(text)
    if key == "thresholds":
        return _parse_list(text, int)
    if key in ("values", "check_sides"):
        return _parse_list(text, float)
    default = _FIELDS[key].default
    if isinstance(default, bool):
        return _parse_bool(text)
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    return text


def _encode(key: str, value) -> str:
    if key == "h_plan":
        return ", ".join(f"{m}:{h!r}" for m, h in value)
    if key == "band" and value is None:
        return "auto"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(repr(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


# ---------------------------------------------------------------------------
# validation
# ---------------------------------------------------------------------------


def _require(ok: bool, key: str, message: str) -> None:
    if not ok:
        raise ConfigError(key, message)


def _validate(cfg: RunConfig) -> RunConfig:
    _require(cfg.schema == SCHEMA, "schema", f"unsupported schema {cfg.schema} (this build reads {SCHEMA})")
    _require(cfg.model in MODEL_KINDS, "model", f"unknown model kind {cfg.model!r}; expected one of {MODEL_KINDS}")
    _require(cfg.d >= 1, "d", "dimension must be at least 1")
    _require(cfg.rho > 0, "rho", "density must be positive")
    _require(cfg.Lambda >= 1, "Lambda", "ellipticity bound must be at least 1")
    if cfg.model == "radial-count":
        _require(len(cfg.thresholds) >= 1, "thresholds", "radial-count needs at least one threshold")
        _require(len(cfg.values) == len(cfg.thresholds) + 1, "values", "radial-count needs one more value than thresholds")
    _require(cfg.n_max >= 1, "n_max", "n_max must be at least 1")
    _require(cfg.h > 0, "h", "grid spacing must be positive")
    _require(all(m >= 0 and h > 0 for m, h in cfg.h_plan), "h_plan", "levels must be >= 0 and spacings positive")
    _require(cfg.levels >= 0, "levels", "number of levels must be non-negative")
    _require(cfg.mode in ("interior", "collar"), "mode", f"unknown mode {cfg.mode!r}")
    _require(0 < cfg.tol < 1, "tol", "solver tolerance must lie in (0, 1)")
    _require(cfg.max_iter >= 1, "max_iter", "iteration cap must be positive")
    _require(cfg.memory_budget >= 1, "memory_budget", "memory budget must be positive")
    _require(0 < cfg.mass_floor <= 1, "mass_floor", "mass floor must lie in (0, 1]")
    _require(cfg.identity_tol > 0, "identity_tol", "identity tolerance must be positive")
    _require(cfg.band is None or cfg.band >= 0, "band", "band must be non-negative or 'auto'")
    _require(cfg.beta > 0, "beta", "Step-4 weight exponent must be positive")
    _require(cfg.mc_samples >= 2, "mc_samples", "need at least 2 Monte Carlo samples")
    _require(cfg.mc_inner >= 1, "mc_inner", "inner draws must be positive")
    _require(cfg.shell_budget >= 1, "shell_budget", "shell budget must be positive")
    _require(len(cfg.check_sides) >= 1 and all(s > 0 for s in cfg.check_sides), "check_sides", "need positive cube sides")
    _require(cfg.seed >= 0, "seed", "seed must be non-negative")
    _require(bool(cfg.out), "out", "output directory must be non-empty")
    _require(cfg.workers >= 1, "workers", "worker count must be positive")
    return cfg


# ---------------------------------------------------------------------------
# entry points
# ---------------------------------------------------------------------------


def parse_config(text: str) -> RunConfig:
    """Parse configuration text; raise :class:`ConfigError` naming the bad key."""
    parser = configparser.ConfigParser(
        interpolation=None, inline_comment_prefixes=("#",), comment_prefixes=("#",), delimiters=("=",)
    )
    parser.optionxform = str  # keys are case sensitive (``Lambda``)
    try:
        parser.read_string(f"[{_SECTION}]\n" + text)
    except configparser.DuplicateOptionError as exc:
        raise ConfigError(exc.option, "given more than once") from exc
    except configparser.Error as exc:
        raise ConfigError("<syntax>", " ".join(str(exc).split())) from exc
    raw = dict(parser[_SECTION])
    for key in raw:
        if key not in _FIELDS:
            raise ConfigError(key, "unknown key")
    for key in ("schema", "model"):
        if key not in raw:
            raise ConfigError(key, "required key missing")
    kwargs = {}
    for key, text_value in raw.items():
        try:
            kwargs[key] = _decode(key, text_value.strip())
        except ValueError as exc:
            raise ConfigError(key, str(exc)) from exc
    return _validate(RunConfig(**kwargs))


def load_config(path: Union[str, Path]) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError("--config", f"cannot read {path}: {exc.strerror}") from exc
    return parse_config(text)


def dump_config(cfg: RunConfig, include_unhashed: bool = True) -> str:
    """Serialize every field in a fixed order (one ``key = value`` per line)."""
    lines = []
    for key in _ORDER:
        if not include_unhashed and key in _UNHASHED:
            continue
        lines.append(f"{key} = {_encode(key, getattr(cfg, key))}")
    return "\n".join(lines) + "\n"


def config_hash(cfg: RunConfig) -> str:
    """SHA-256 of the result-relevant part of the configuration."""
    return hashlib.sha256(dump_config(cfg, include_unhashed=False).encode()).hexdigest()[:16]
