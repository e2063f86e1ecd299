"""Closed-loop simulation under the optimal feedback law and verification.

The candidate control is evaluated along Euler-Maruyama trajectories through
the regression surrogates of the adapted offset processes; realized cost and
constraint functionals are then compared against the dual optimum.  Strong
duality makes the gap a statistical zero, up to a discretization allowance
proportional to the step size.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .bsde import BrownianEnsemble, BsdeSolution
from .dual import DualQuadratic, DualSolution, dual_value
from .errors import NonFiniteState, SeedCollision
from .model import SlqProblem
from .riccati import RiccatiSolution

ACTIVE = "active"
SLACK = "slack"
VIOLATED = "violated"

_ACTIVE_MULTIPLIER = 1e-6


@dataclass(frozen=True)
class ClosedLoopRun:
    """State/control trajectories of one verification ensemble."""

    ensemble: BrownianEnsemble
    X_paths: np.ndarray  # (paths, N+1, n)
    u_paths: np.ndarray  # (paths, N+1, m)


@dataclass(frozen=True)
class Estimate:
    mean: float
    se: float

    def as_dict(self) -> dict:
        return {"mean": self.mean, "se": self.se}


def simulate_closed_loop(
    p: SlqProblem,
    ric: RiccatiSolution,
    bsde: BsdeSolution,
    lam: DualSolution,
    ens: BrownianEnsemble,
) -> ClosedLoopRun:
    """Euler-Maruyama forward run under u = -S^-1 (L X + psi + sum lam_i rho_i).

    The ensemble must be fresh: reusing the regression training seed would
    bias the verification in favor of the surrogates.
    """
    if bsde.training_seed is not None and ens.seed == bsde.training_seed:
        raise SeedCollision(
            f"verification seed {ens.seed} equals the regression training seed"
        )
    if ens.grid != p.grid:
        raise ValueError("ensemble grid does not match the problem grid")
    grid = p.grid
    lam_vec = np.asarray(lam.lambda_star, dtype=float)

    # Feedback offset psi + sum_i lam_i rho_i shares the solve's basis, so it
    # collapses to one coefficient table.
    offset_coeffs = bsde.psi.coeffs.copy()
    for i, rho in enumerate(bsde.rho):
        if rho.basis.names != bsde.psi.basis.names:
            raise ValueError("offset surrogates use mismatched bases")
        offset_coeffs = offset_coeffs + lam_vec[i] * rho.coeffs
    basis = bsde.psi.basis

    B = ens.values
    dt = grid.dt
    n_paths = ens.n_paths
    X = np.empty((n_paths, grid.N + 1, p.n))
    u = np.empty((n_paths, grid.N + 1, p.m))
    X[:, 0] = p.xi

    for k in range(grid.N + 1):
        design = basis.design(B[:, k])
        offset = design @ offset_coeffs[k]
        u[:, k] = -(X[:, k] @ ric.L[k].T + offset) @ ric.Sinv[k].T
        if k == grid.N:
            break
        drift = X[:, k] @ p.A.values[k].T + u[:, k] @ p.B.values[k].T
        vol = X[:, k] @ p.C.values[k].T + u[:, k] @ p.D.values[k].T
        X[:, k + 1] = X[:, k] + drift * dt + vol * ens.increments[:, k][:, None]
        if not np.isfinite(X[:, k + 1]).all():
            raise NonFiniteState(f"state exploded at step {k + 1}")
    return ClosedLoopRun(ensemble=ens, X_paths=X, u_paths=u)


def _trapezoid_weights(grid) -> np.ndarray:
    w = np.full(grid.N + 1, grid.dt)
    w[0] *= 0.5
    w[-1] *= 0.5
    return w


def cost_samples(run: ClosedLoopRun, p: SlqProblem) -> np.ndarray:
    """Per-path realized cost: quadrature of the running quadratic + terminal."""
    grid = p.grid
    X, u = run.X_paths, run.u_paths
    B = run.ensemble.values
    w = _trapezoid_weights(grid)
    J = np.zeros(X.shape[0])
    for k in range(grid.N + 1):
        xk, uk = X[:, k], u[:, k]
        running = (
            np.einsum("pi,ij,pj->p", xk, p.E.values[k], xk)
            + 2.0 * np.einsum("pi,ij,pj->p", xk, p.F.values[k], uk)
            + np.einsum("pi,ij,pj->p", uk, p.I.values[k], uk)
            + 2.0 * np.einsum("pi,pi->p", p.G.evaluate_node(k, B[:, k]), xk)
            + 2.0 * np.einsum("pi,pi->p", p.K.evaluate_node(k, B[:, k]), uk)
        )
        J += w[k] * running
    xT = X[:, -1]
    J += np.einsum("pi,ij,pj->p", xT, p.M, xT)
    J += 2.0 * np.einsum("pi,pi->p", p.N.evaluate_terminal(B[:, -1]), xT)
    return J


def estimate_cost(run: ClosedLoopRun, p: SlqProblem) -> Estimate:
    J = cost_samples(run, p)
    return Estimate(float(J.mean()), float(J.std(ddof=1) / math.sqrt(J.shape[0])))


def constraint_samples(run: ClosedLoopRun, p: SlqProblem) -> np.ndarray:
    """Per-path realized constraint functionals, shape (paths, l)."""
    grid = p.grid
    X, u = run.X_paths, run.u_paths
    B = run.ensemble.values
    w = _trapezoid_weights(grid)
    out = np.zeros((X.shape[0], p.l))
    for i, c in enumerate(p.constraints):
        acc = np.zeros(X.shape[0])
        for k in range(grid.N + 1):
            acc += w[k] * (
                np.einsum("pi,pi->p", c.alpha.evaluate_node(k, B[:, k]), X[:, k])
                + np.einsum("pi,pi->p", c.beta.evaluate_node(k, B[:, k]), u[:, k])
            )
        acc += np.einsum("pi,pi->p", c.gamma.evaluate_terminal(B[:, -1]), X[:, -1])
        out[:, i] = acc
    return out


@dataclass(frozen=True)
class ConstraintEstimate:
    mean: float
    se: float
    budget: float
    kind: str
    classification: str  # active / slack / violated

    def as_dict(self) -> dict:
        return {
            "mean": self.mean,
            "se": self.se,
            "budget": self.budget,
            "kind": self.kind,
            "classification": self.classification,
        }


def estimate_constraints(run: ClosedLoopRun, p: SlqProblem) -> list[ConstraintEstimate]:
    samples = constraint_samples(run, p)
    n_paths = samples.shape[0]
    out = []
    for i, c in enumerate(p.constraints):
        mean = float(samples[:, i].mean())
        se = float(samples[:, i].std(ddof=1) / math.sqrt(n_paths))
        if abs(mean - c.a) <= 3.0 * se:
            cls = ACTIVE
        elif mean < c.a:
            cls = SLACK
        else:
            cls = VIOLATED
        out.append(ConstraintEstimate(mean, se, c.a, c.kind, cls))
    return out


@dataclass(frozen=True)
class VerificationReport:
    """Cost estimate, constraint estimates, and the duality-gap verdict."""

    J_hat: Estimate
    constraints: tuple[ConstraintEstimate, ...]
    dual_value: float
    dual_value_se: float
    gap: float
    gap_se: float
    allowance: float
    gap_ok: bool
    feasibility_ok: bool
    slack_check: tuple[bool, ...]
    n_paths: int
    dt: float

    @property
    def passed(self) -> bool:
        return self.gap_ok and self.feasibility_ok and all(self.slack_check)

    def as_dict(self) -> dict:
        return {
            "J_hat": self.J_hat.as_dict(),
            "constraints": [c.as_dict() for c in self.constraints],
            "dual_value": self.dual_value,
            "dual_value_se": self.dual_value_se,
            "gap": self.gap,
            "gap_se": self.gap_se,
            "allowance": self.allowance,
            "gap_ok": self.gap_ok,
            "feasibility_ok": self.feasibility_ok,
            "slack_check": list(self.slack_check),
            "passed": self.passed,
            "n_paths": self.n_paths,
            "dt": self.dt,
        }


def dual_value_se(dq: DualQuadratic, bsde: BsdeSolution, lam: np.ndarray, xi: np.ndarray) -> float:
    """First-order standard error of the dual value from the solve statistics.

    Correlations between the estimated pieces are ignored; the verification
    gap is dominated by the simulation error, so this only guards against a
    grossly noisy dual value.
    """
    lam = np.asarray(lam, dtype=float)
    var = bsde.psi_sq_se**2 + float((2.0 * xi @ bsde.q0_se) ** 2)
    if lam.size:
        var += float(((2.0 * lam) ** 2) @ ((bsde.r0_se @ np.abs(xi)) ** 2))
        var += float(((2.0 * lam) ** 2) @ (bsde.cross_se**2))
        var += float(np.abs(lam) @ (bsde.gram_se**2) @ np.abs(lam))
    return math.sqrt(var)


def duality_gap(
    run: ClosedLoopRun,
    p: SlqProblem,
    dq: DualQuadratic,
    sol: DualSolution,
    bsde: BsdeSolution,
    allowance_coef: float = 2.0,
) -> VerificationReport:
    """Verify strong duality: |J_hat - dual value| <= 3 SE + allowance * dt.

    The allowance covers the weak discretization bias of the Euler scheme and
    the trapezoid quadrature; the coefficient default was calibrated on the
    unconstrained case, where the dual value is a closed form.
    """
    J = estimate_cost(run, p)
    cons = estimate_constraints(run, p)
    dv = dual_value(dq, sol.lambda_star)
    dv_se = dual_value_se(dq, bsde, sol.lambda_star, p.xi)
    gap = J.mean - dv
    gap_se = math.hypot(J.se, dv_se)
    allowance = allowance_coef * p.grid.dt
    gap_ok = abs(gap) <= 3.0 * gap_se + allowance

    feas = True
    for est in cons:
        slackness = 3.0 * est.se + allowance
        if est.kind == "inequality":
            feas = feas and est.mean <= est.budget + slackness
        else:
            feas = feas and abs(est.mean - est.budget) <= slackness
    slack_flags = tuple(
        sol.lambda_star[i] <= _ACTIVE_MULTIPLIER or cons[i].classification == ACTIVE
        for i in range(p.l_prime)
    )
    return VerificationReport(
        J_hat=J,
        constraints=tuple(cons),
        dual_value=dv,
        dual_value_se=dv_se,
        gap=gap,
        gap_se=gap_se,
        allowance=allowance,
        gap_ok=gap_ok,
        feasibility_ok=feas,
        slack_check=slack_flags,
        n_paths=run.ensemble.n_paths,
        dt=p.grid.dt,
    )
