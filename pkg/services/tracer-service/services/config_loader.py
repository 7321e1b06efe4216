"""
Experiment configuration: TOML parsing, validation and hashing.

A configuration has five tables: model, tracer, run, output and checks.
Unknown keys anywhere are rejected so typos never pass silently.
"""

from dataclasses import dataclass, field
import copy
import hashlib
import json
import logging
from pathlib import Path
import re
import sys
from typing import Any, Optional

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from config import DEFAULT_DT, DEFAULT_WORKERS, PILOT_HORIZON, TV_PATHS_PER_START
from errors import ConfigError, TracerError
from models import (
    Atoms,
    ConstantField,
    DrivingModel,
    EmpiricalDrift,
    FiniteDensity,
    GaussianMixtureLaw,
    NormalDrift,
    NormalStart,
    PointDrift,
    PointStart,
    SymmetricStable,
    TracerModel,
    TrigField,
    UniformBoxLaw,
    UniformStart,
)
from services.torus import PeriodicFunction, constant, cosine, from_terms, sine

logger = logging.getLogger(__name__)

SECTIONS = {"name", "model", "tracer", "run", "output", "checks"}
MODEL_KEYS = {"name", "dimension", "period", "drift", "diffusion", "jumps"}
JUMP_KEYS = {
    "none": {"kind"},
    "atoms": {"kind", "atoms"},
    "density": {"kind", "rate", "law"},
    "stable": {"kind", "alpha", "gamma"},
}
LAW_KEYS = {"normal": {"kind", "means", "scales", "weights"}, "uniform": {"kind", "low", "high"}}
FIELD_KEYS = {"constant": {"kind", "value"}, "trig": {"kind", "base", "amplitude", "frequency", "phase"}}
TRACER_KEYS = {"functions", "period", "sigma", "x0", "drift", "initial"}
FUNCTION_KEYS = {
    "sin": {"kind", "axis", "mode", "amplitude", "label"},
    "cos": {"kind", "axis", "mode", "amplitude", "label"},
    "const": {"kind", "value", "label"},
    "terms": {"kind", "terms", "label"},
}
DRIFT_KEYS = {"point": {"kind", "value"}, "normal": {"kind", "mean", "cov"}, "empirical": {"kind", "values"}}
INITIAL_KEYS = {"point": {"kind", "value"}, "normal": {"kind", "mean", "cov"}, "uniform": {"kind"}}
RUN_KEYS = {
    "n_paths", "dt", "horizon", "ladder", "n", "times", "t", "seed", "workers", "paths_per_rung", "method",
}
OUTPUT_KEYS = {"dir", "formats", "paths"}
CHECK_KEYS = {
    "k_max", "convention", "heat_kernel_t", "heat_kernel_cutoff", "tv_times", "tv_paths",
    "pilot_horizon", "pilot_bins", "dynkin_paths", "dynkin_horizon", "quadrature_grid",
}
FORMATS = {"json", "csv", "text"}
# results do not depend on these, so they stay out of the hash
UNHASHED_KEYS = {"run": ("workers",), "output": ("dir",)}

_PI_PATTERN = re.compile(r"^\s*([0-9.eE+-]*)\s*\*?\s*pi\s*$")


@dataclass
class RunConfig:
    seed: int
    n_paths: int = 400
    dt: float = DEFAULT_DT
    horizon: float = 1.0
    ladder: list = field(default_factory=lambda: [250, 1000, 4000])
    n: int = 2000
    times: list = field(default_factory=lambda: [1.0])
    t: float = 1.0
    paths_per_rung: int = 200
    workers: int = DEFAULT_WORKERS
    method: str = "auto"


@dataclass
class OutputConfig:
    dir: str = "out"
    formats: list = field(default_factory=lambda: ["json", "csv", "text"])
    paths: int = 0


@dataclass
class ChecksConfig:
    k_max: int = 50
    convention: str = "per_axis"
    heat_kernel_t: float = 1.0
    heat_kernel_cutoff: Optional[float] = None
    tv_times: list = field(default_factory=lambda: [0.0, 1.0, 5.0, 10.0])
    tv_paths: int = TV_PATHS_PER_START
    pilot_horizon: float = PILOT_HORIZON
    pilot_bins: Optional[int] = None
    dynkin_paths: int = 10_000
    dynkin_horizon: float = 1.0
    quadrature_grid: Optional[int] = None


@dataclass
class ExperimentConfig:
    name: str
    model: DrivingModel
    tracer: Optional[TracerModel]
    run: RunConfig
    output: OutputConfig
    checks: ChecksConfig
    raw: dict
    config_hash: str
    source: Optional[str] = None

    @property
    def functions(self) -> list:
        return [] if self.tracer is None else self.tracer.functions


# ----------------------------------------------------------------------
# canonical form and hashing
# ----------------------------------------------------------------------
def canonical(obj: Any) -> Any:
    """Plain JSON-ready structure with sorted keys and numpy values unwrapped"""
    if isinstance(obj, dict):
        return {str(k): canonical(obj[k]) for k in sorted(obj)}
    if isinstance(obj, (list, tuple)):
        return [canonical(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return canonical(obj.tolist())
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    return obj


def config_hash(raw: dict) -> str:
    """SHA-256 of the canonical JSON of the configuration"""
    hashed = copy.deepcopy(raw)
    for section, keys in UNHASHED_KEYS.items():
        for key in keys:
            hashed.get(section, {}).pop(key, None)
        if section in hashed and not hashed[section]:
            del hashed[section]
    payload = json.dumps(canonical(hashed), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


# ----------------------------------------------------------------------
# primitive parsers
# ----------------------------------------------------------------------
def _check_keys(table: Any, allowed: set, where: str) -> dict:
    if not isinstance(table, dict):
        raise ConfigError(f"{where} must be a table")
    unknown = sorted(set(table) - allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")
    return table


def _kind(table: dict, allowed: dict, where: str, default: Optional[str] = None) -> str:
    kind = table.get("kind", default)
    if kind not in allowed:
        raise ConfigError(f"{where}.kind must be one of {sorted(allowed)}, got {kind!r}")
    _check_keys(table, allowed[kind], where)
    return kind


def parse_number(value: Any, where: str = "value") -> float:
    """Numbers or multiples of pi written as '2pi', '0.5*pi', 'pi'"""
    if isinstance(value, bool):
        raise ConfigError(f"{where}: expected a number, got {value!r}")
    if isinstance(value, (int, float)):
        return float(value)
    if isinstance(value, str):
        match = _PI_PATTERN.match(value)
        if match:
            factor = match.group(1)
            if factor in ("", "+", "-"):
                factor += "1"
            try:
                return float(factor) * np.pi
            except ValueError:
                pass
        try:
            return float(value)
        except ValueError:
            pass
    raise ConfigError(f"{where}: cannot read {value!r} as a number")


def _vector(value: Any, dim: int, where: str) -> np.ndarray:
    values = value if isinstance(value, list) else [value]
    out = np.array([parse_number(v, where) for v in values], dtype=float)
    if out.size == 1 and dim > 1:
        out = np.full(dim, out[0])
    if out.shape != (dim,):
        raise ConfigError(f"{where} must have {dim} entries, got {len(values)}")
    return out


def _matrix(value: Any, dim: int, where: str) -> np.ndarray:
    if not isinstance(value, list):
        return parse_number(value, where) * np.eye(dim)
    if value and not isinstance(value[0], list):
        return np.diag(_vector(value, dim, where))
    rows = [[parse_number(v, where) for v in row] for row in value]
    out = np.array(rows, dtype=float)
    if out.shape != (dim, dim):
        raise ConfigError(f"{where} must be {dim}x{dim}, got {out.shape}")
    return out


def _field(value: Any, shape: tuple, where: str):
    """Constant values, or a table {kind = "trig" | "constant", ...}"""
    dim = shape[0] if shape else 1
    if not isinstance(value, dict):
        if shape == ():
            return ConstantField(parse_number(value, where))
        return ConstantField(_matrix(value, dim, where) if len(shape) == 2 else _vector(value, dim, where))
    kind = _kind(value, FIELD_KEYS, where)
    if kind == "constant":
        return _field(value.get("value", 0.0), shape, where)
    if "frequency" not in value:
        raise ConfigError(f"{where}: trig field needs a frequency")
    parse = (
        (lambda v, w: np.array(parse_number(v, w)))
        if shape == ()
        else (lambda v, w: _matrix(v, dim, w) if len(shape) == 2 else _vector(v, dim, w))
    )
    frequency = value["frequency"] if isinstance(value["frequency"], list) else [value["frequency"]]
    return TrigField(
        base=parse(value.get("base", 0.0), f"{where}.base"),
        amplitude=parse(value.get("amplitude", 0.0), f"{where}.amplitude"),
        frequency=[parse_number(f, f"{where}.frequency") for f in frequency],
        phase=parse_number(value.get("phase", 0.0), f"{where}.phase"),
    )


# ----------------------------------------------------------------------
# sections
# ----------------------------------------------------------------------
def parse_jumps(table: Optional[dict], dim: int):
    if table is None:
        return None
    kind = _kind(table, JUMP_KEYS, "model.jumps", default="none")
    if kind == "none":
        return None
    if kind == "atoms":
        rows = table.get("atoms")
        if not rows:
            raise ConfigError("model.jumps.atoms needs at least one [location..., rate] row")
        data = np.array([[parse_number(v, "model.jumps.atoms") for v in row] for row in rows], dtype=float)
        if data.ndim != 2 or data.shape[1] != dim + 1:
            raise ConfigError(f"each atom row must hold {dim} coordinates and a rate")
        return Atoms(data[:, :dim], data[:, dim])
    if kind == "density":
        law_table = _check_keys(table.get("law", {}), set().union(*LAW_KEYS.values()), "model.jumps.law")
        law_kind = _kind(law_table, LAW_KEYS, "model.jumps.law", default="normal")
        if law_kind == "normal":
            means = [[parse_number(v, "law.means") for v in np.atleast_1d(m)] for m in law_table.get("means", [[0.0] * dim])]
            law = GaussianMixtureLaw(
                means, [parse_number(s, "law.scales") for s in law_table.get("scales", [1.0])], law_table.get("weights")
            )
        else:
            law = UniformBoxLaw(
                _vector(law_table.get("low", -1.0), dim, "law.low"),
                _vector(law_table.get("high", 1.0), dim, "law.high"),
            )
        if law.dim != dim:
            raise ConfigError(f"jump law lives in dimension {law.dim}, model in {dim}")
        return FiniteDensity(_field(table.get("rate", 1.0), (), "model.jumps.rate"), law)
    if "alpha" not in table:
        raise ConfigError("model.jumps.alpha is required for stable jumps")
    return SymmetricStable(
        _field(table["alpha"], (), "model.jumps.alpha"),
        _field(table.get("gamma", 1.0), (), "model.jumps.gamma"),
        dim=dim,
    )


def parse_model(table: dict) -> DrivingModel:
    _check_keys(table, MODEL_KEYS, "model")
    if "dimension" not in table:
        raise ConfigError("model.dimension is required")
    dim = int(table["dimension"])
    if dim < 1:
        raise ConfigError(f"model.dimension must be at least 1, got {dim}")
    period = _vector(table["period"], dim, "model.period") if "period" in table else None
    if period is not None and np.any(period <= 0):
        raise ConfigError(f"model.period must be positive, got {period.tolist()}")
    return DrivingModel(
        dim=dim,
        drift=_field(table.get("drift", 0.0), (dim,), "model.drift"),
        diffusion=_field(table.get("diffusion", 0.0), (dim, dim), "model.diffusion"),
        jumps=parse_jumps(table.get("jumps"), dim),
        period=period,
        name=str(table.get("name", "model")),
    )


def parse_function(table: dict, period: np.ndarray, index: int) -> PeriodicFunction:
    where = f"tracer.functions[{index}]"
    kind = _kind(table, FUNCTION_KEYS, where)
    label = None if table.get("label") is None else str(table["label"])
    if kind in ("sin", "cos"):
        build = sine if kind == "sin" else cosine
        fn = build(period, axis=int(table.get("axis", 0)), mode=int(table.get("mode", 1)),
                   amplitude=parse_number(table.get("amplitude", 1.0), f"{where}.amplitude"))
    elif kind == "const":
        fn = constant(parse_number(table.get("value", 0.0), f"{where}.value"), period)
    else:
        terms = table.get("terms")
        if not terms:
            raise ConfigError(f"{where}.terms needs [k..., re, im] rows")
        return from_terms(period, [[parse_number(v, f"{where}.terms") for v in row] for row in terms], label=label or "terms")
    return fn if label is None else fn.with_values(fn.values, label=label)


def _drift_law(table: Optional[dict], dim: int):
    if table is None:
        return None
    kind = _kind(table, DRIFT_KEYS, "tracer.drift", default="point")
    if kind == "point":
        return PointDrift(_vector(table.get("value", 0.0), dim, "tracer.drift.value"))
    if kind == "normal":
        return NormalDrift(
            _vector(table.get("mean", 0.0), dim, "tracer.drift.mean"),
            _matrix(table.get("cov", 0.0), dim, "tracer.drift.cov"),
        )
    values = table.get("values")
    if not values:
        raise ConfigError("tracer.drift.values must list at least one drift vector")
    return EmpiricalDrift([_vector(v, dim, "tracer.drift.values") for v in values])


def _initial_law(table: Optional[dict], dim: int, period):
    if table is None:
        return None
    kind = _kind(table, INITIAL_KEYS, "tracer.initial", default="point")
    if kind == "point":
        return PointStart(_vector(table.get("value", 0.0), dim, "tracer.initial.value"))
    if kind == "normal":
        return NormalStart(
            _vector(table.get("mean", 0.0), dim, "tracer.initial.mean"),
            _matrix(table.get("cov", 0.0), dim, "tracer.initial.cov"),
        )
    if period is None:
        raise ConfigError("a uniform initial law needs a period")
    return UniformStart(period)


def parse_tracer(table: Optional[dict], model: DrivingModel) -> Optional[TracerModel]:
    if table is None:
        return None
    _check_keys(table, TRACER_KEYS, "tracer")
    if "period" in table:
        period = _vector(table["period"], model.dim, "tracer.period")
    elif model.period is not None:
        period = np.array(model.period)
    else:
        raise ConfigError("tracer.period is required when the model has no period")
    functions = table.get("functions")
    if not functions:
        raise ConfigError("tracer.functions must list at least one test function")
    functions = [parse_function(f, period, i) for i, f in enumerate(functions)]
    d = len(functions)
    return TracerModel(
        driving=model,
        functions=functions,
        noise_cov=_matrix(table.get("sigma", 0.0), d, "tracer.sigma"),
        drift_law=_drift_law(table.get("drift"), d),
        initial_law=_initial_law(table.get("initial"), model.dim, model.period),
        x0=_vector(table.get("x0", 0.0), d, "tracer.x0"),
    )


def parse_run(table: dict, workers: Optional[int] = None) -> RunConfig:
    _check_keys(table, RUN_KEYS, "run")
    seed = table.get("seed")
    if seed is None:
        raise ConfigError("run.seed is required (or pass --seed)")
    run = RunConfig(seed=int(seed))
    for key in RUN_KEYS - {"seed"}:
        if key in table:
            setattr(run, key, table[key])
    if workers is not None:
        run.workers = int(workers)
    run.dt = parse_number(run.dt, "run.dt")
    run.horizon = parse_number(run.horizon, "run.horizon")
    run.t = parse_number(run.t, "run.t")
    run.times = [parse_number(t, "run.times") for t in run.times]
    run.ladder = [int(n) for n in run.ladder]
    if run.dt <= 0 or run.horizon <= 0 or run.t <= 0:
        raise ConfigError("run.dt, run.horizon and run.t must be positive")
    if int(run.n_paths) < 1 or int(run.paths_per_rung) < 1 or int(run.n) < 1:
        raise ConfigError("path counts and n must be at least 1")
    if run.method not in ("auto", "levy", "euler"):
        raise ConfigError(f"run.method must be auto, levy or euler, got {run.method!r}")
    run.workers = max(1, int(run.workers))
    return run


def parse_output(table: dict) -> OutputConfig:
    _check_keys(table, OUTPUT_KEYS, "output")
    out = OutputConfig(**table)
    unknown = sorted(set(out.formats) - FORMATS)
    if unknown:
        raise ConfigError(f"unknown output format(s): {', '.join(unknown)}")
    return out


def parse_checks(table: dict) -> ChecksConfig:
    _check_keys(table, CHECK_KEYS, "checks")
    checks = ChecksConfig(**table)
    if checks.convention not in ("per_axis", "scalar"):
        raise ConfigError(f"checks.convention must be per_axis or scalar, got {checks.convention!r}")
    checks.tv_times = [parse_number(t, "checks.tv_times") for t in checks.tv_times]
    return checks


# ----------------------------------------------------------------------
# entry points
# ----------------------------------------------------------------------
def build_experiment(
    raw: dict,
    seed: Optional[int] = None,
    workers: Optional[int] = None,
    out_dir: Optional[str] = None,
    source: Optional[str] = None,
) -> ExperimentConfig:
    """Validate a parsed configuration; a --seed override enters the hash, --out does not"""
    raw = copy.deepcopy(raw)
    _check_keys(raw, SECTIONS, "configuration")
    if "model" not in raw:
        raise ConfigError("configuration needs a [model] table")
    raw.setdefault("run", {})
    if seed is not None:
        raw["run"]["seed"] = int(seed)
    if out_dir is not None:
        raw.setdefault("output", {})["dir"] = str(out_dir)
    try:
        model = parse_model(raw["model"])
        tracer = parse_tracer(raw.get("tracer"), model)
        run = parse_run(raw["run"], workers)
        output = parse_output(raw.get("output", {}))
        checks = parse_checks(raw.get("checks", {}))
    except TracerError:
        raise
    except (TypeError, ValueError, KeyError) as e:
        raise ConfigError(f"invalid configuration: {e}") from e
    return ExperimentConfig(
        name=str(raw.get("name", model.name)),
        model=model,
        tracer=tracer,
        run=run,
        output=output,
        checks=checks,
        raw=raw,
        config_hash=config_hash(raw),
        source=source,
    )


def load_experiment(
    path,
    seed: Optional[int] = None,
    workers: Optional[int] = None,
    out_dir: Optional[str] = None,
) -> ExperimentConfig:
    """Read and validate a TOML experiment file"""
    path = Path(path)
    try:
        with path.open("rb") as f:
            raw = tomllib.load(f)
    except FileNotFoundError as e:
        raise ConfigError(f"configuration file not found: {path}") from e
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"cannot parse {path}: {e}") from e
    experiment = build_experiment(raw, seed=seed, workers=workers, out_dir=out_dir, source=str(path))
    logger.info(f"loaded configuration {experiment.name}", extra={"config_hash": experiment.config_hash})
    return experiment
