"""Problem files (TOML) and run configuration.

A problem file has sections [grid], [dynamics], [cost] and zero or more
[[constraint]] tables.  Matrix-valued entries are either a scalar (times
identity), an explicit row-major matrix, or a named parametric family;
vector fields carry a base vector plus a scalar expression in (t, B) with an
optional declared dB derivative.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .errors import ConfigError, ExpressionParseError
from .model import (
    Constraint,
    EQUALITY,
    INEQUALITY,
    MatrixPath,
    RandomField,
    SlqProblem,
    TimeGrid,
)


def _matrix_from_value(value, rows: int, cols: int, where: str) -> np.ndarray:
    if isinstance(value, (int, float)):
        if rows != cols:
            raise ConfigError(f"{where}: scalar shorthand needs a square matrix")
        return float(value) * np.eye(rows)
    try:
        mat = np.asarray(value, dtype=float)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: not a matrix: {exc}") from exc
    if mat.shape != (rows, cols):
        raise ConfigError(f"{where}: shape {mat.shape}, expected {(rows, cols)}")
    return mat


def _matrix_path(entry, grid: TimeGrid, rows: int, cols: int, where: str) -> MatrixPath:
    if entry is None:
        return MatrixPath.constant(grid, np.zeros((rows, cols)))
    if isinstance(entry, dict):
        family = entry.get("family", "constant")
        value = _matrix_from_value(entry.get("value"), rows, cols, where)
        params = {}
        if family == "exponential":
            if "rate" not in entry:
                raise ConfigError(f"{where}: exponential family needs 'rate'")
            params["rate"] = entry["rate"]
        elif family == "rational":
            if "pole" not in entry:
                raise ConfigError(f"{where}: rational family needs 'pole'")
            params["pole"] = entry["pole"]
        elif family != "constant":
            raise ConfigError(f"{where}: unknown family {family!r}")
        try:
            return MatrixPath.from_family(grid, value, family, **params)
        except ValueError as exc:
            raise ConfigError(f"{where}: {exc}") from exc
    return MatrixPath.constant(grid, _matrix_from_value(entry, rows, cols, where))


def _random_field(entry, grid: TimeGrid, dim: int, where: str, terminal: bool) -> RandomField:
    if entry is None:
        return RandomField.zero(grid, dim)
    if not isinstance(entry, dict):
        raise ConfigError(f"{where}: expected a table with 'vector' (and optional 'expr')")
    vector = entry.get("vector")
    if vector is None:
        raise ConfigError(f"{where}: missing 'vector'")
    vec = np.atleast_1d(np.asarray(vector, dtype=float))
    if vec.shape != (dim,):
        raise ConfigError(f"{where}: vector has shape {vec.shape}, expected ({dim},)")
    expr = entry.get("expr", "1")
    db = entry.get("dB")
    try:
        return RandomField.of(grid, vec, expr, db=db, terminal=terminal)
    except ExpressionParseError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def load_problem(path: Union[str, Path], steps: Optional[int] = None) -> SlqProblem:
    """Parse a problem file; malformed content raises ConfigError."""
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"problem file not found: {path}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc

    for section in ("grid", "dynamics", "cost"):
        if section not in raw:
            raise ConfigError(f"{path}: missing [{section}] section")

    g = raw["grid"]
    try:
        grid = TimeGrid(
            s=float(g.get("s", 0.0)),
            T=float(g["T"]),
            N=int(steps if steps is not None else g.get("steps", 200)),
        )
    except (KeyError, ValueError, TypeError) as exc:
        raise ConfigError(f"{path}: [grid]: {exc}") from exc

    dyn = raw["dynamics"]
    try:
        xi = np.atleast_1d(np.asarray(dyn["xi"], dtype=float))
        n = int(dyn.get("n", xi.shape[0]))
        m = int(dyn["m"])
    except (KeyError, ValueError, TypeError) as exc:
        raise ConfigError(f"{path}: [dynamics]: {exc}") from exc
    if xi.shape != (n,):
        raise ConfigError(f"{path}: xi has shape {xi.shape}, expected ({n},)")

    cost = raw["cost"]
    problem = SlqProblem(
        grid=grid,
        xi=xi,
        A=_matrix_path(dyn.get("A"), grid, n, n, "[dynamics].A"),
        B=_matrix_path(dyn.get("B"), grid, n, m, "[dynamics].B"),
        C=_matrix_path(dyn.get("C"), grid, n, n, "[dynamics].C"),
        D=_matrix_path(dyn.get("D"), grid, n, m, "[dynamics].D"),
        E=_matrix_path(cost.get("E"), grid, n, n, "[cost].E"),
        F=_matrix_path(cost.get("F"), grid, n, m, "[cost].F"),
        I=_matrix_path(cost.get("I"), grid, m, m, "[cost].I"),
        M=_matrix_from_value(cost.get("M", 0.0), n, n, "[cost].M"),
        G=_random_field(cost.get("G"), grid, n, "[cost].G", terminal=False),
        K=_random_field(cost.get("K"), grid, m, "[cost].K", terminal=False),
        N=_random_field(cost.get("N"), grid, n, "[cost].N", terminal=True),
        constraints=tuple(
            _constraint(entry, grid, n, m, f"[[constraint]] #{i + 1}")
            for i, entry in enumerate(raw.get("constraint", []))
        ),
    )
    return problem


def _constraint(entry, grid: TimeGrid, n: int, m: int, where: str) -> Constraint:
    if not isinstance(entry, dict):
        raise ConfigError(f"{where}: expected a table")
    kind = entry.get("kind", INEQUALITY)
    if kind not in (INEQUALITY, EQUALITY):
        raise ConfigError(f"{where}: kind must be 'inequality' or 'equality', got {kind!r}")
    if "a" not in entry:
        raise ConfigError(f"{where}: missing budget 'a'")
    return Constraint(
        alpha=_random_field(entry.get("alpha"), grid, n, f"{where}.alpha", terminal=False),
        beta=_random_field(entry.get("beta"), grid, m, f"{where}.beta", terminal=False),
        gamma=_random_field(entry.get("gamma"), grid, n, f"{where}.gamma", terminal=True),
        a=float(entry["a"]),
        kind=kind,
    )


SOLVE = "solve"
VERIFY = "verify"
SWEEP = "sweep"

# Offset added to the user seed to derive the out-of-sample verification
# ensemble; any fixed nonzero offset works.
VERIFY_SEED_OFFSET = 1000003

MIN_VERIFY_PATHS = 1000


@dataclass(frozen=True)
class RunConfig:
    """One CLI invocation."""

    problem_path: Path
    command: str
    paths: int = 100000
    steps: Optional[int] = None
    seed: int = 12345
    sweep_spec: dict[int, list[float]] = field(default_factory=dict)
    output_dir: Path = Path("slq_out")
    basis: Optional[str] = None
    dump_riccati: bool = False
    dump_paths: int = 0
    figures: bool = True

    def __post_init__(self):
        if self.command not in (SOLVE, VERIFY, SWEEP):
            raise ConfigError(f"unknown command {self.command!r}")
        if self.paths < 1:
            raise ConfigError("paths must be positive")
        if self.command == VERIFY and self.paths < MIN_VERIFY_PATHS:
            raise ConfigError(
                f"verify needs at least {MIN_VERIFY_PATHS} paths, got {self.paths}"
            )
        if self.command == SWEEP and not self.sweep_spec:
            raise ConfigError("sweep requires --sweep axis specifications")


def parse_sweep_spec(text: str) -> dict[int, list[float]]:
    """Parse 'a1=lo:hi:step,a2=lo:hi:step' into {constraint index: values}."""
    out: dict[int, list[float]] = {}
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        try:
            name, rng = part.split("=")
            if not name.strip().startswith("a"):
                raise ValueError(f"axis {name!r} must look like a1, a2, ...")
            index = int(name.strip()[1:])
            lo_s, hi_s, step_s = rng.split(":")
            lo, hi, step = float(lo_s), float(hi_s), float(step_s)
        except ValueError as exc:
            raise ConfigError(f"bad sweep axis {part!r}: {exc}") from exc
        if step <= 0 or hi < lo:
            raise ConfigError(f"bad sweep range in {part!r}")
        values = []
        v = lo
        while v <= hi + 1e-12:
            values.append(round(v, 12))
            v += step
        out[index] = values
    if not out:
        raise ConfigError(f"no sweep axes in {text!r}")
    return out
