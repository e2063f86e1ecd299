"""Problem description, standing-assumption validation, constraint generators."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import (
    DimensionMismatch,
    NonPositiveBudget,
    NonSymmetric,
    NotPositiveDefinite,
    ZeroAnchor,
)
from .expressions import Expression, parse_expression

INEQUALITY = "inequality"
EQUALITY = "equality"

# Strict positive definiteness floor for the control weight.
EPS_I = 1e-10
_SYM_TOL = 1e-9
_PSD_TOL = 1e-10


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid on [s, T] with N steps; non-uniform grids are rejected."""

    s: float
    T: float
    N: int

    def __post_init__(self):
        if not (self.T > self.s >= 0.0):
            raise ValueError(f"need T > s >= 0, got s={self.s}, T={self.T}")
        if self.N < 1:
            raise ValueError("need at least one step")

    @property
    def dt(self) -> float:
        return (self.T - self.s) / self.N

    @cached_property
    def nodes(self) -> np.ndarray:
        return np.linspace(self.s, self.T, self.N + 1)

    def variance_at(self, k: int) -> float:
        """Variance of the driving Brownian value at node k (started at s)."""
        return self.nodes[k] - self.s


@dataclass(frozen=True)
class MatrixPath:
    """Deterministic matrix-valued coefficient sampled on the grid.

    An optional sampler (exact time function) is kept so integrators can
    evaluate between nodes at full accuracy; without it, midpoints fall back
    to linear interpolation.
    """

    grid: TimeGrid
    values: np.ndarray  # (N+1, rows, cols)
    sampler: Optional[Callable[[float], np.ndarray]] = field(default=None, compare=False)

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.ndim != 3 or values.shape[0] != self.grid.N + 1:
            raise DimensionMismatch(
                f"matrix path needs shape (N+1, r, c), got {values.shape}"
            )
        if not np.isfinite(values).all():
            raise ValueError("matrix path contains non-finite entries")
        values.flags.writeable = False
        object.__setattr__(self, "values", values)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape[1], self.values.shape[2]

    def at(self, t: float) -> np.ndarray:
        if self.sampler is not None:
            return np.asarray(self.sampler(t), dtype=float)
        nodes = self.grid.nodes
        if t <= nodes[0]:
            return self.values[0]
        if t >= nodes[-1]:
            return self.values[-1]
        k = int(np.searchsorted(nodes, t) - 1)
        w = (t - nodes[k]) / (nodes[k + 1] - nodes[k])
        return (1.0 - w) * self.values[k] + w * self.values[k + 1]

    @staticmethod
    def constant(grid: TimeGrid, matrix) -> "MatrixPath":
        matrix = np.atleast_2d(np.asarray(matrix, dtype=float))
        values = np.repeat(matrix[None, :, :], grid.N + 1, axis=0)
        return MatrixPath(grid, values, sampler=lambda t, m=matrix: m)

    @staticmethod
    def from_family(grid: TimeGrid, matrix, family: str, **params) -> "MatrixPath":
        """Parametric families: constant, exponential exp(k(T-t)), rational 1/(c-t)."""
        matrix = np.atleast_2d(np.asarray(matrix, dtype=float))
        if family == "constant":
            return MatrixPath.constant(grid, matrix)
        if family == "exponential":
            k = float(params["rate"])
            sampler = lambda t: matrix * math.exp(k * (grid.T - t))  # noqa: E731
        elif family == "rational":
            c = float(params["pole"])
            if grid.s <= c <= grid.T:
                raise ValueError(f"rational pole {c} lies inside [{grid.s}, {grid.T}]")
            sampler = lambda t: matrix / (c - t)  # noqa: E731
        else:
            raise ValueError(f"unknown matrix family {family!r}")
        values = np.stack([sampler(t) for t in grid.nodes])
        return MatrixPath(grid, values, sampler=sampler)

    @staticmethod
    def from_values(grid: TimeGrid, values) -> "MatrixPath":
        return MatrixPath(grid, np.asarray(values, dtype=float))


@dataclass(frozen=True)
class RandomField:
    """Vector quantity (deterministic base path) x (scalar expression in t, B).

    Carries the affine-constraint data and the random cost offsets.  A
    terminal field is an F_T datum evaluated at t = T only.
    """

    grid: TimeGrid
    base: np.ndarray  # (N+1, dim)
    expr: Expression
    terminal: bool = False
    db_expr: Optional[Expression] = None  # declared d/dB of expr

    def __post_init__(self):
        base = np.asarray(self.base, dtype=float)
        if base.ndim != 2 or base.shape[0] != self.grid.N + 1:
            raise DimensionMismatch(f"field base needs shape (N+1, d), got {base.shape}")
        base.flags.writeable = False
        object.__setattr__(self, "base", base)

    @property
    def dim(self) -> int:
        return self.base.shape[1]

    @property
    def deterministic(self) -> bool:
        return not self.expr.depends_on_b

    def derivative_expr(self) -> Expression:
        """d expr / dB: declared annotation, or zero for B-free expressions."""
        if self.db_expr is not None:
            return self.db_expr
        if self.deterministic:
            return Expression.constant(0.0)
        raise ValueError(
            f"expression {self.expr.source!r} depends on B but declares no dB"
        )

    def evaluate_node(self, k: int, b) -> np.ndarray:
        """Field value at node k for Brownian values b: shape (len(b), dim)."""
        t = self.grid.nodes[k]
        scal = np.asarray(self.expr(t, b), dtype=float)
        return scal[..., None] * self.base[k]

    def evaluate_terminal(self, b) -> np.ndarray:
        return self.evaluate_node(self.grid.N, b)

    def derivative_node(self, k: int, b) -> np.ndarray:
        t = self.grid.nodes[k]
        scal = np.asarray(self.derivative_expr()(t, b), dtype=float)
        return scal[..., None] * self.base[k]

    def deterministic_path(self) -> np.ndarray:
        """Node values for B-free fields, shape (N+1, dim)."""
        if not self.deterministic:
            raise ValueError("field depends on B")
        scal = self.expr(self.grid.nodes, np.zeros(self.grid.N + 1))
        return scal[:, None] * self.base

    def mean_node(self, k: int) -> np.ndarray:
        """E[field(t_k)] under the Gaussian law of B(t_k)."""
        m = self.expr.gaussian_moment(self.grid.nodes[k], self.grid.variance_at(k))
        return m * self.base[k]

    def is_zero(self) -> bool:
        return bool(np.all(self.base == 0.0)) or self.expr.coeff == 0.0

    @staticmethod
    def zero(grid: TimeGrid, dim: int) -> "RandomField":
        return RandomField(grid, np.zeros((grid.N + 1, dim)), Expression.constant(0.0))

    @staticmethod
    def constant(grid: TimeGrid, vector, terminal: bool = False) -> "RandomField":
        vector = np.atleast_1d(np.asarray(vector, dtype=float))
        base = np.repeat(vector[None, :], grid.N + 1, axis=0)
        return RandomField(grid, base, Expression.constant(1.0), terminal=terminal)

    @staticmethod
    def of(
        grid: TimeGrid,
        vector,
        expr: str,
        db: Optional[str] = None,
        terminal: bool = False,
    ) -> "RandomField":
        vector = np.atleast_1d(np.asarray(vector, dtype=float))
        base = np.repeat(vector[None, :], grid.N + 1, axis=0)
        return RandomField(
            grid,
            base,
            parse_expression(expr),
            terminal=terminal,
            db_expr=parse_expression(db) if db is not None else None,
        )

    def with_base(self, base: np.ndarray) -> "RandomField":
        return RandomField(self.grid, base, self.expr, self.terminal, self.db_expr)

    def left_multiplied(self, weight: MatrixPath) -> "RandomField":
        """Pointwise W(t) @ base(t), keeping the scalar expression."""
        new_base = np.einsum("kij,kj->ki", weight.values, self.base)
        return self.with_base(new_base)

    def scaled(self, factor: float) -> "RandomField":
        return RandomField(
            self.grid,
            self.base,
            self.expr.scaled(factor),
            self.terminal,
            self.db_expr.scaled(factor) if self.db_expr is not None else None,
        )


@dataclass(frozen=True)
class Constraint:
    """One affine constraint <X,alpha> + <u,beta> + <X(T),gamma> (<= or =) a."""

    alpha: RandomField
    beta: RandomField
    gamma: RandomField
    a: float
    kind: str = INEQUALITY

    def __post_init__(self):
        if self.kind not in (INEQUALITY, EQUALITY):
            raise ValueError(f"unknown constraint kind {self.kind!r}")


@dataclass(frozen=True)
class SlqProblem:
    """Full problem description.

    Dynamics dX = (A X + B u) dt + (C X + D u) dB with X(s) = xi; running cost
    quadratic in (X, u) with weights E, F, I and affine terms G, K; terminal
    weight M and affine term N.  Constraints are normalized at construction so
    inequalities precede equalities.
    """

    grid: TimeGrid
    xi: np.ndarray
    A: MatrixPath
    B: MatrixPath
    C: MatrixPath
    D: MatrixPath
    E: MatrixPath
    F: MatrixPath
    I: MatrixPath
    M: np.ndarray
    G: RandomField
    K: RandomField
    N: RandomField
    constraints: tuple[Constraint, ...] = ()

    def __post_init__(self):
        xi = np.atleast_1d(np.asarray(self.xi, dtype=float))
        xi.flags.writeable = False
        object.__setattr__(self, "xi", xi)
        M = np.atleast_2d(np.asarray(self.M, dtype=float))
        M.flags.writeable = False
        object.__setattr__(self, "M", M)
        ordered = tuple(c for c in self.constraints if c.kind == INEQUALITY) + tuple(
            c for c in self.constraints if c.kind == EQUALITY
        )
        object.__setattr__(self, "constraints", ordered)

    @property
    def n(self) -> int:
        return self.xi.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[1]

    @property
    def l(self) -> int:
        return len(self.constraints)

    @property
    def l_prime(self) -> int:
        return sum(1 for c in self.constraints if c.kind == INEQUALITY)

    @property
    def budgets(self) -> np.ndarray:
        return np.array([c.a for c in self.constraints])

    def is_deterministic(self) -> bool:
        fields = [self.G, self.K, self.N]
        for c in self.constraints:
            fields += [c.alpha, c.beta, c.gamma]
        return all(f.deterministic for f in fields)


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    witness: Optional[float]
    detail: str


@dataclass(frozen=True)
class ValidationReport:
    checks: tuple[CheckResult, ...]

    @property
    def ok(self) -> bool:
        return all(c.passed for c in self.checks)

    def failed(self) -> list[CheckResult]:
        return [c for c in self.checks if not c.passed]

    def first_error(self) -> Optional[Exception]:
        for c in self.checks:
            if c.passed:
                continue
            if c.name == "dimensions":
                return DimensionMismatch(c.detail)
            if c.name.startswith("symmetry"):
                return NonSymmetric(c.detail)
            return NotPositiveDefinite(c.name.split(":", 1)[-1], c.witness or 0.0)
        return None

    def raise_if_failed(self):
        err = self.first_error()
        if err is not None:
            raise err


def _sym_defect(path_values: np.ndarray) -> float:
    return float(np.max(np.abs(path_values - np.swapaxes(path_values, -1, -2))))


def _min_eig_path(path_values: np.ndarray) -> float:
    sym = 0.5 * (path_values + np.swapaxes(path_values, -1, -2))
    return float(np.min(np.linalg.eigvalsh(sym)))


def validate_problem(p: SlqProblem) -> ValidationReport:
    """Check dimensions, symmetry, definiteness, and the block-PSD condition.

    Convexity of the cost is certified through the pointwise sufficient
    condition: E, M PSD, I strictly PD, and the Schur complement
    E - F I^{-1} F^T PSD at every node.
    """
    checks: list[CheckResult] = []
    n, m = p.n, p.m

    dim_problems = []
    for name, path, shape in [
        ("A", p.A, (n, n)),
        ("B", p.B, (n, m)),
        ("C", p.C, (n, n)),
        ("D", p.D, (n, m)),
        ("E", p.E, (n, n)),
        ("F", p.F, (n, m)),
        ("I", p.I, (m, m)),
    ]:
        if path.shape != shape:
            dim_problems.append(f"{name} has shape {path.shape}, expected {shape}")
    if p.M.shape != (n, n):
        dim_problems.append(f"M has shape {p.M.shape}, expected {(n, n)}")
    for name, fld, dim in [("G", p.G, n), ("K", p.K, m), ("N", p.N, n)]:
        if fld.dim != dim:
            dim_problems.append(f"{name} has dim {fld.dim}, expected {dim}")
    for i, c in enumerate(p.constraints):
        for name, fld, dim in [("alpha", c.alpha, n), ("beta", c.beta, m), ("gamma", c.gamma, n)]:
            if fld.dim != dim:
                dim_problems.append(f"constraint {i} {name} has dim {fld.dim}, expected {dim}")
    dims_ok = not dim_problems
    checks.append(
        CheckResult("dimensions", dims_ok, None, "; ".join(dim_problems) or "consistent")
    )
    if not dims_ok:
        return ValidationReport(tuple(checks))

    for name, values in [("E", p.E.values), ("I", p.I.values), ("M", p.M[None])]:
        defect = _sym_defect(values)
        tol = _SYM_TOL * (1.0 + float(np.max(np.abs(values))))
        checks.append(
            CheckResult(
                f"symmetry:{name}",
                defect <= tol,
                defect,
                f"max asymmetry {defect:.3e}",
            )
        )

    for name, values in [("E", p.E.values), ("M", p.M[None])]:
        eig = _min_eig_path(values)
        checks.append(
            CheckResult(f"psd:{name}", eig >= -_PSD_TOL, eig, f"min eigenvalue {eig:.3e}")
        )

    eig_i = _min_eig_path(p.I.values)
    checks.append(
        CheckResult("pd:I", eig_i > EPS_I, eig_i, f"min eigenvalue {eig_i:.3e}")
    )

    if eig_i > EPS_I:
        Ivals = 0.5 * (p.I.values + np.swapaxes(p.I.values, -1, -2))
        FI = np.linalg.solve(Ivals, np.swapaxes(p.F.values, -1, -2))
        schur = p.E.values - p.F.values @ FI
        eig_s = _min_eig_path(schur)
        checks.append(
            CheckResult(
                "schur",
                eig_s >= -_PSD_TOL,
                eig_s,
                f"min eigenvalue of E - F I^-1 F^T is {eig_s:.3e}",
            )
        )
    else:
        checks.append(CheckResult("schur", False, None, "skipped: I not positive definite"))

    return ValidationReport(tuple(checks))


# Odd monomials of B(T) have mean zero and a double-factorial variance, so a
# unit-variance dictionary is available in closed form at any order.
_MAX_ODD_POWER = 41


def build_variance_constraints(
    grid: TimeGrid,
    p_count: int,
    a0: float,
    seed: int,
    state_dim: int = 1,
    control_dim: int = 1,
) -> list[Constraint]:
    """Affine surrogates for a terminal-variance budget Var(X(T)) <= a0.

    Each constraint is <X(T), gamma_i> <= a0 with gamma_i = c * g(B_T) * w,
    g drawn without replacement from the signed odd-monomial dictionary and c
    calibrated so Var(c * g(B_T)) = a0 exactly under B_T ~ N(0, T - s).
    """
    if a0 <= 0.0:
        raise NonPositiveBudget(f"variance budget must be positive, got {a0}")
    if p_count < 1:
        raise ValueError("p_count must be at least 1")

    entries = [(power, sign) for power in range(1, _MAX_ODD_POWER + 1, 2) for sign in (1.0, -1.0)]
    if p_count > len(entries):
        raise ValueError(f"dictionary supports at most {len(entries)} distinct constraints")
    rng = np.random.default_rng(seed)
    picks = rng.permutation(len(entries))[:p_count]

    sigma2 = grid.T - grid.s
    out = []
    for idx in picks:
        power, sign = entries[idx]
        # Var(B^p) = E[B^(2p)] = (2p-1)!! sigma^(2p) for odd p.
        var = math.prod(range(1, 2 * power, 2)) * sigma2**power
        c = sign * math.sqrt(a0 / var)
        expr_text = " * ".join([repr(c)] + ["B"] * power)
        if power == 1:
            db_text = repr(c)
        else:
            db_text = " * ".join([repr(c * power)] + ["B"] * (power - 1))
        if state_dim == 1:
            direction = np.array([1.0])
        else:
            direction = rng.standard_normal(state_dim)
            direction /= np.linalg.norm(direction)
        base = np.repeat(direction[None, :], grid.N + 1, axis=0)
        gamma = RandomField(
            grid,
            base,
            parse_expression(expr_text),
            terminal=True,
            db_expr=parse_expression(db_text),
        )
        out.append(
            Constraint(
                alpha=RandomField.zero(grid, state_dim),
                beta=RandomField.zero(grid, control_dim),
                gamma=gamma,
                a=a0,
                kind=INEQUALITY,
            )
        )
    return out


def quadratic_level(
    weights: tuple[MatrixPath, MatrixPath, np.ndarray],
    anchor: tuple[RandomField, RandomField, RandomField],
) -> float:
    """Theta(anchor) = <a, E~ a> + <b, I~ b> + <g, M~ g> with exact B-moments."""
    E_t, I_t, M_t = weights
    al, be, ga = anchor
    grid = al.grid
    nodes = grid.nodes

    def running(fld: RandomField, weight: MatrixPath) -> float:
        quad = np.einsum("ki,kij,kj->k", fld.base, weight.values, fld.base)
        moments = np.array(
            [
                fld.expr.gaussian_moment(nodes[k], grid.variance_at(k), power=2)
                for k in range(grid.N + 1)
            ]
        )
        return float(np.trapezoid(quad * moments, nodes))

    total = running(al, E_t) + running(be, I_t)
    g_term = float(ga.base[-1] @ np.atleast_2d(M_t) @ ga.base[-1])
    total += g_term * ga.expr.gaussian_moment(nodes[-1], grid.variance_at(grid.N), power=2)
    return total


def build_quadratic_constraints(
    weights: tuple[MatrixPath, MatrixPath, np.ndarray],
    anchors: Sequence[tuple[RandomField, RandomField, RandomField]],
    a0: float,
) -> list[Constraint]:
    """Affine outer approximations of a quadratic budget, one per anchor.

    Each anchor (a~, b~, g~) is rescaled onto the level set Theta = a0 and
    emitted as <X, E~ a~> + <u, I~ b~> + <X(T), M~ g~> <= a0.
    """
    if a0 <= 0.0:
        raise NonPositiveBudget(f"level a0 must be positive, got {a0}")
    E_t, I_t, M_t = weights
    out = []
    for anchor in anchors:
        theta = quadratic_level(weights, anchor)
        if theta <= 1e-14 * a0:
            raise ZeroAnchor("anchor has zero quadratic level; cannot rescale")
        scale = math.sqrt(a0 / theta)
        al, be, ga = (f.scaled(scale) for f in anchor)
        level = quadratic_level(weights, (al, be, ga))
        if abs(level - a0) > 1e-8 * a0:
            raise ZeroAnchor(f"anchor rescale missed the level set: {level} vs {a0}")
        M_grid = MatrixPath.constant(al.grid, M_t)
        out.append(
            Constraint(
                alpha=al.left_multiplied(E_t),
                beta=be.left_multiplied(I_t),
                gamma=ga.left_multiplied(M_grid),
                a=a0,
                kind=INEQUALITY,
            )
        )
    return out
