"""Lagrangian dual quadratic and its KKT solver.

The dual functional is a concave quadratic in the multiplier vector; its
gradient components are exactly twice the constraint-value residuals, so
maximizing over the sign cone while keeping equality rows stationary is
equivalent to the complementarity system.  Two independent routes compute
the maximizer: direct active-set enumeration on the stationarity system, and
projection in coordinates rescaled by the Gram square root.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .bsde import BsdeSolution
from .errors import EqualityInfeasible, GramSingular, NoConvergence
from .model import SlqProblem
from .riccati import RiccatiSolution

_ENUM_LIMIT = 12
_KKT_TOL = 1e-8
_PGA_TOL = 1e-10
_PGA_CAP = 10**6
_RANK_TOL = 1e-8


@dataclass(frozen=True)
class DualQuadratic:
    """value(lam) = const_term + <lin, lam> - <gram lam, lam>."""

    const_term: float
    lin: np.ndarray  # 2 (R0 xi - a) - 2 cross
    gram: np.ndarray
    l_prime: int
    a: np.ndarray

    def __post_init__(self):
        for name in ("lin", "gram", "a"):
            arr = np.asarray(getattr(self, name), dtype=float)
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)

    @property
    def l(self) -> int:
        return self.lin.shape[0]

    @property
    def scale(self) -> float:
        if self.l == 0:
            return 1.0
        return 1.0 + float(np.max(np.abs(self.a))) + float(np.trace(self.gram)) / self.l

    @property
    def b(self) -> np.ndarray:
        """Half-gradient at the origin: delta(0) - a."""
        return self.lin / 2.0


def build_dual_quadratic(p: SlqProblem, ric: RiccatiSolution, bsde: BsdeSolution) -> DualQuadratic:
    const = float(p.xi @ (ric.P[0] @ p.xi + 2.0 * bsde.Q0)) - bsde.psi_sq
    lin = 2.0 * (bsde.R0 @ p.xi - p.budgets) - 2.0 * bsde.cross
    return DualQuadratic(
        const_term=const, lin=lin, gram=bsde.gram, l_prime=p.l_prime, a=p.budgets
    )


def delta(dq: DualQuadratic, lam: np.ndarray) -> np.ndarray:
    """Constraint values of the relaxed optimal control at multiplier lam."""
    lam = np.asarray(lam, dtype=float)
    return dq.b + dq.a - dq.gram @ lam


def dual_value(dq: DualQuadratic, lam) -> float:
    lam = np.asarray(lam, dtype=float)
    return float(dq.const_term + dq.lin @ lam - lam @ dq.gram @ lam)


@dataclass(frozen=True)
class KktResiduals:
    """Per-condition residuals of the complementarity system."""

    negativity: np.ndarray  # violation of lam_i >= 0, inequality rows
    feasibility: np.ndarray  # max(delta - a, 0) on inequalities, |delta - a| on equalities
    complementarity: np.ndarray  # |lam_i (delta_i - a_i)|, inequality rows

    @property
    def max_residual(self) -> float:
        parts = [self.negativity, self.feasibility, self.complementarity]
        return max((float(np.max(p)) for p in parts if p.size), default=0.0)

    def as_dict(self) -> dict:
        return {
            "negativity": self.negativity.tolist(),
            "feasibility": self.feasibility.tolist(),
            "complementarity": self.complementarity.tolist(),
            "max": self.max_residual,
        }


def kkt_residuals(dq: DualQuadratic, lam) -> KktResiduals:
    lam = np.asarray(lam, dtype=float)
    lp = dq.l_prime
    gap = delta(dq, lam) - dq.a
    feas = np.concatenate([np.maximum(gap[:lp], 0.0), np.abs(gap[lp:])])
    return KktResiduals(
        negativity=np.maximum(-lam[:lp], 0.0),
        feasibility=feas,
        complementarity=np.abs(lam[:lp] * gap[:lp]),
    )


@dataclass(frozen=True)
class DualSolution:
    """Maximizer of the dual quadratic with its optimality certificates.

    active_set holds 1-based indices of inequality constraints with a
    nonzero multiplier.
    """

    lambda_star: np.ndarray
    active_set: tuple[int, ...]
    dual_value: float
    residuals: KktResiduals
    unique: bool

    def __post_init__(self):
        lam = np.asarray(self.lambda_star, dtype=float)
        lam.flags.writeable = False
        object.__setattr__(self, "lambda_star", lam)


def _uniqueness(gram: np.ndarray) -> bool:
    if gram.shape[0] == 0:
        return True
    eig = np.linalg.eigvalsh(0.5 * (gram + gram.T))
    return float(eig[0]) > _RANK_TOL * float(np.trace(gram)) / gram.shape[0]


def _package(dq: DualQuadratic, lam: np.ndarray, active_tol: float) -> DualSolution:
    active = tuple(i + 1 for i in range(dq.l_prime) if lam[i] > active_tol)
    return DualSolution(
        lambda_star=lam,
        active_set=active,
        dual_value=dual_value(dq, lam),
        residuals=kkt_residuals(dq, lam),
        unique=_uniqueness(dq.gram),
    )


def _check_equality_rows(dq: DualQuadratic, tol: float):
    eq = slice(dq.l_prime, dq.l)
    if dq.l == dq.l_prime:
        return
    rows = dq.gram[eq, :]
    sol, *_ = np.linalg.lstsq(rows, dq.b[eq], rcond=None)
    res = float(np.max(np.abs(rows @ sol - dq.b[eq])))
    if res > tol:
        raise EqualityInfeasible(
            f"equality stationarity rows admit no solution (residual {res:.3e})"
        )


def solve_dual(dq: DualQuadratic) -> DualSolution:
    """Maximize the dual quadratic over the multiplier cone.

    Inequality multipliers are constrained nonnegative; equality multipliers
    are free, so their rows are always stationary.  For few inequalities the
    2^{l'} activity patterns are enumerated (each reduces to one linear
    solve, pseudo-inverse on rank-deficient systems); otherwise accelerated
    projected gradient ascent runs until the KKT residual passes tolerance.
    """
    l, lp = dq.l, dq.l_prime
    tol = _KKT_TOL * dq.scale
    if l == 0:
        return DualSolution(np.zeros(0), (), dq.const_term, kkt_residuals(dq, np.zeros(0)), True)
    _check_equality_rows(dq, tol)

    if lp <= _ENUM_LIMIT:
        eq_idx = list(range(lp, l))
        best: Optional[np.ndarray] = None
        best_res = math.inf
        for mask in range(2**lp):
            support = [i for i in range(lp) if (mask >> i) & 1] + eq_idx
            lam = np.zeros(l)
            if support:
                sub = dq.gram[np.ix_(support, support)]
                sol, *_ = np.linalg.lstsq(sub, dq.b[support], rcond=None)
                lam[support] = sol
            res = kkt_residuals(dq, lam).max_residual
            if res <= tol:
                return _package(dq, lam, active_tol=tol)
            if res < best_res:
                best, best_res = lam, res
        raise NoConvergence(
            f"no activity pattern satisfies the KKT system (best residual {best_res:.3e})"
        )

    return _projected_gradient(dq)


def _projected_gradient(dq: DualQuadratic) -> DualSolution:
    eigmax = float(np.max(np.linalg.eigvalsh(0.5 * (dq.gram + dq.gram.T))))
    step = 1.0 / (2.0 * max(eigmax, 1e-300))
    tol = _PGA_TOL * dq.scale

    def project(v: np.ndarray) -> np.ndarray:
        out = v.copy()
        out[: dq.l_prime] = np.maximum(out[: dq.l_prime], 0.0)
        return out

    x = np.zeros(dq.l)
    y = x
    t = 1.0
    for _ in range(_PGA_CAP):
        grad = 2.0 * (dq.b - dq.gram @ y)
        x_new = project(y + step * grad)
        if kkt_residuals(dq, x_new).max_residual <= tol:
            return _package(dq, x_new, active_tol=tol)
        t_new = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * t * t))
        y = x_new + ((t - 1.0) / t_new) * (x_new - x)
        x, t = x_new, t_new
    raise NoConvergence(f"projected gradient hit the {_PGA_CAP} iteration cap")


def project_solve(dq: DualQuadratic) -> DualSolution:
    """Cross-check solve through the Gram square-root geometry.

    The multiplier cone maps through rho_S = gram^{1/2} to a set on which the
    dual maximization is a Euclidean projection of rho_S^{-1} b.  Each
    complementarity pattern pins, per inequality row, either the multiplier
    (rho_S^{-1} row) or the stationarity value (rho_S row), giving a square
    mixed system; the dual KKT residuals certify the accepted pattern.
    """
    l, lp = dq.l, dq.l_prime
    if l == 0:
        return solve_dual(dq)
    sym = 0.5 * (dq.gram + dq.gram.T)
    w, U = np.linalg.eigh(sym)
    if w[0] <= _RANK_TOL * max(float(np.trace(sym)) / l, 1e-300):
        raise GramSingular(f"gram matrix not invertible (eigmin {w[0]:.3e})")
    root = (U * np.sqrt(w)) @ U.T
    root_inv = (U / np.sqrt(w)) @ U.T
    tol = _KKT_TOL * dq.scale

    best_res = math.inf
    for mask in range(2**lp):
        rows = np.empty((l, l))
        rhs = np.empty(l)
        for i in range(l):
            if i >= lp or (mask >> i) & 1:
                rows[i] = root[i]  # stationarity: (gram lam)_i = b_i in mu-coordinates
                rhs[i] = dq.b[i]
            else:
                rows[i] = root_inv[i]  # multiplier pinned at zero
                rhs[i] = 0.0
        try:
            mu = np.linalg.solve(rows, rhs)
        except np.linalg.LinAlgError:
            continue
        lam = root_inv @ mu
        res = kkt_residuals(dq, lam).max_residual
        if res <= tol:
            return _package(dq, lam, active_tol=tol)
        best_res = min(best_res, res)
    raise NoConvergence(
        f"projection found no admissible pattern (best residual {best_res:.3e})"
    )
