"""Offset BSDE solvers, constraint reduction, and the dual Gram matrix.

Two backends produce the same artifacts:

* an analytic backend for fully deterministic data, where the martingale
  integrands vanish and the equations collapse to backward linear ODEs;
* a least-squares Monte Carlo backend (backward induction, per-node
  regression on basis functions of the Brownian value) for random data.

A third, independent estimator represents the same solutions through the
forward fundamental flow and its inverse and recovers the martingale
integrand from declared dB-derivatives; it exists purely to cross-validate
the regression backend.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np
from scipy.optimize import linprog

from .errors import (
    BasisTooSmall,
    GramSingularEquality,
    NotDeterministic,
    RegressionSingular,
    VInversionDrift,
)
from .expressions import _b_factor_moment
from .model import RandomField, SlqProblem, TimeGrid
from .riccati import RiccatiSolution, gain_matrices, riccati_rhs

_COND_LIMIT = 1e12
_RCOND = 1e-12

DEFAULT_BASIS_NAMES = ("1", "B", "B^2", "exp(B)", "exp(-B)")


@dataclass(frozen=True)
class BrownianEnsemble:
    """Reproducible bundle of Brownian paths on a grid."""

    seed: int
    n_paths: int
    grid: TimeGrid
    increments: np.ndarray  # (n_paths, N), already scaled by sqrt(dt)

    def __post_init__(self):
        inc = np.asarray(self.increments, dtype=float)
        if inc.shape != (self.n_paths, self.grid.N):
            raise ValueError(f"increments shape {inc.shape} != {(self.n_paths, self.grid.N)}")
        inc.flags.writeable = False
        object.__setattr__(self, "increments", inc)

    @staticmethod
    def generate(grid: TimeGrid, n_paths: int, seed: int) -> "BrownianEnsemble":
        rng = np.random.default_rng(seed)
        inc = rng.standard_normal((n_paths, grid.N)) * math.sqrt(grid.dt)
        return BrownianEnsemble(seed=seed, n_paths=n_paths, grid=grid, increments=inc)

    @property
    def values(self) -> np.ndarray:
        """Brownian values at the nodes, B(s) = 0: shape (n_paths, N+1)."""
        out = np.empty((self.n_paths, self.grid.N + 1))
        out[:, 0] = 0.0
        np.cumsum(self.increments, axis=1, out=out[:, 1:])
        return out

    def coarsen(self, factor: int) -> "BrownianEnsemble":
        """Same Brownian paths on a grid with N/factor steps."""
        if self.grid.N % factor:
            raise ValueError(f"cannot coarsen {self.grid.N} steps by {factor}")
        coarse = TimeGrid(self.grid.s, self.grid.T, self.grid.N // factor)
        inc = self.increments.reshape(self.n_paths, coarse.N, factor).sum(axis=2)
        return BrownianEnsemble(seed=self.seed, n_paths=self.n_paths, grid=coarse, increments=inc)


def _parse_basis_name(name: str) -> tuple[int, float]:
    """Basis functions are monomial-exponential: B^p * exp(kappa B)."""
    name = name.strip()
    if name == "1":
        return 0, 0.0
    if name == "B":
        return 1, 0.0
    if name.startswith("B^"):
        return int(name[2:]), 0.0
    if name.startswith("exp(") and name.endswith("B)"):
        inner = name[4:-2]
        if inner in ("", "+"):
            return 0, 1.0
        if inner == "-":
            return 0, -1.0
        return 0, float(inner)
    raise ValueError(f"unknown basis function {name!r}")


@dataclass(frozen=True)
class BasisSpec:
    """Regression basis over the Brownian value at a node."""

    names: tuple[str, ...] = DEFAULT_BASIS_NAMES

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "_parsed", tuple(_parse_basis_name(n) for n in self.names))

    @property
    def size(self) -> int:
        return len(self.names)

    def design(self, b: np.ndarray) -> np.ndarray:
        b = np.asarray(b, dtype=float)
        cols = []
        for p, kappa in self._parsed:
            col = np.ones_like(b)
            if p:
                col = b**p
            if kappa:
                col = col * np.exp(kappa * b)
            cols.append(col)
        return np.stack(cols, axis=-1)

    def means(self, sigma2: float) -> np.ndarray:
        return np.array([_b_factor_moment(p, k, sigma2) for p, k in self._parsed])

    def moment_matrix(self, sigma2: float) -> np.ndarray:
        """E[phi_a(B) phi_b(B)] for B ~ N(0, sigma2), exact."""
        K = self.size
        out = np.empty((K, K))
        for a in range(K):
            pa, ka = self._parsed[a]
            for b in range(a, K):
                pb, kb = self._parsed[b]
                out[a, b] = out[b, a] = _b_factor_moment(pa + pb, ka + kb, sigma2)
        return out

    @staticmethod
    def parse(spec: str) -> "BasisSpec":
        return BasisSpec(tuple(s.strip() for s in spec.split(",") if s.strip()))


@dataclass(frozen=True)
class SurrogatePath:
    """Per-node regression coefficients: value(t_k, b) = design(b) @ coeffs[k]."""

    grid: TimeGrid
    basis: BasisSpec
    coeffs: np.ndarray  # (N+1, K, dim)

    def __post_init__(self):
        coeffs = np.asarray(self.coeffs, dtype=float)
        coeffs.flags.writeable = False
        object.__setattr__(self, "coeffs", coeffs)

    @property
    def dim(self) -> int:
        return self.coeffs.shape[2]

    def evaluate_node(self, k: int, b) -> np.ndarray:
        b = np.atleast_1d(np.asarray(b, dtype=float))
        return self.basis.design(b) @ self.coeffs[k]

    def node_means(self) -> np.ndarray:
        """E[value(t_k, B_k)] per node, exact under the Gaussian law."""
        out = np.empty((self.grid.N + 1, self.dim))
        for k in range(self.grid.N + 1):
            out[k] = self.basis.means(self.grid.variance_at(k)) @ self.coeffs[k]
        return out

    @staticmethod
    def deterministic(grid: TimeGrid, values: np.ndarray) -> "SurrogatePath":
        values = np.asarray(values, dtype=float)
        if values.ndim == 1:
            values = values[:, None]
        return SurrogatePath(grid, BasisSpec(("1",)), values[:, None, :])


@dataclass(frozen=True)
class BsdeSolution:
    """Surrogates for the offset equations plus the dual-quadratic statistics."""

    grid: TimeGrid
    Q: SurrogatePath
    pi: SurrogatePath
    R: tuple[SurrogatePath, ...]
    r: tuple[SurrogatePath, ...]
    psi: SurrogatePath
    rho: tuple[SurrogatePath, ...]
    R0: np.ndarray  # (l, n), rows E[R_i(s)]
    Q0: np.ndarray  # (n,)
    gram: np.ndarray  # (l, l)
    cross: np.ndarray  # (l,)
    psi_sq: float  # E[int psi^T S^-1 psi dt]
    gram_se: np.ndarray
    cross_se: np.ndarray
    psi_sq_se: float
    r0_se: np.ndarray
    q0_se: np.ndarray
    rho_mean: np.ndarray  # (l, N+1, m): E[rho_i(t_k)]
    rho_mean_se: np.ndarray  # standard errors, from pre-smoothing samples
    rho_sq_mean: np.ndarray  # (l, N+1): E[|rho_i(t_k)|^2]
    rho_sq_se: np.ndarray
    deterministic: bool
    training_seed: Optional[int]
    n_paths: int

    @property
    def l(self) -> int:
        return len(self.R)


def gram_and_invertibility(sol: BsdeSolution) -> tuple[np.ndarray, float, bool]:
    """Gram matrix with its smallest eigenvalue and a relative rank verdict."""
    gram = 0.5 * (sol.gram + sol.gram.T)
    if gram.shape[0] == 0:
        return gram, math.inf, True
    eigmin = float(np.min(np.linalg.eigvalsh(gram)))
    tol_rank = 1e-8
    independent = eigmin > tol_rank * np.trace(gram) / gram.shape[0]
    return gram, eigmin, independent


# ---------------------------------------------------------------------------
# deterministic backend
# ---------------------------------------------------------------------------


def _det_field_value(fld: RandomField, t: float) -> np.ndarray:
    """Value of a B-free field at an off-node time (base linearly interpolated)."""
    nodes = fld.grid.nodes
    if t <= nodes[0]:
        base = fld.base[0]
    elif t >= nodes[-1]:
        base = fld.base[-1]
    else:
        k = int(np.searchsorted(nodes, t) - 1)
        w = (t - nodes[k]) / (nodes[k + 1] - nodes[k])
        base = (1.0 - w) * fld.base[k] + w * fld.base[k + 1]
    return float(fld.expr.deterministic_part(t)) * base


def solve_bsde_analytic(p: SlqProblem, ric: RiccatiSolution) -> BsdeSolution:
    """Backward ODE backend for problems whose random fields are B-free.

    The state weight is re-integrated jointly with the offsets so that RK4
    stages see gain matrices consistent with the stage value of P.
    """
    fields = [p.G, p.K, p.N] + [f for c in p.constraints for f in (c.alpha, c.beta, c.gamma)]
    random_fields = [f.expr.source for f in fields if not f.deterministic]
    if random_fields:
        raise NotDeterministic(f"fields depend on B: {random_fields}")

    grid = p.grid
    n, l = p.n, p.l
    alphas = [c.alpha for c in p.constraints]
    betas = [c.beta for c in p.constraints]

    def rhs(t: float, state: tuple) -> tuple:
        P, Q, R = state
        S, L = gain_matrices(p, t, P)
        SL = np.linalg.solve(S, L)  # S^-1 L, (m, n)
        LS = SL.T  # L^T S^-1, (n, m)
        drift = p.A.at(t).T - LS @ p.B.at(t).T
        dP = riccati_rhs(p, t, P)
        dQ = -(drift @ Q + _det_field_value(p.G, t) - LS @ _det_field_value(p.K, t))
        dR = np.empty_like(R)
        for i in range(l):
            h = _det_field_value(alphas[i], t) - LS @ _det_field_value(betas[i], t)
            dR[i] = -(drift @ R[i] + h)
        return dP, dQ, dR

    P = 0.5 * (p.M + p.M.T)
    Q = _det_field_value(p.N, grid.T)
    R = np.stack([_det_field_value(c.gamma, grid.T) for c in p.constraints]) if l else np.zeros((0, n))

    Q_path = np.empty((grid.N + 1, n))
    R_path = np.empty((grid.N + 1, l, n))
    Q_path[-1], R_path[-1] = Q, R
    h = -grid.dt
    for k in range(grid.N, 0, -1):
        t = grid.nodes[k]
        state = (P, Q, R)
        k1 = rhs(t, state)
        k2 = rhs(t + 0.5 * h, tuple(s + 0.5 * h * d for s, d in zip(state, k1)))
        k3 = rhs(t + 0.5 * h, tuple(s + 0.5 * h * d for s, d in zip(state, k2)))
        k4 = rhs(t + h, tuple(s + h * d for s, d in zip(state, k3)))
        P, Q, R = tuple(
            s + (h / 6.0) * (d1 + 2 * d2 + 2 * d3 + d4)
            for s, d1, d2, d3, d4 in zip(state, k1, k2, k3, k4)
        )
        P = 0.5 * (P + P.T)
        Q_path[k - 1], R_path[k - 1] = Q, R

    K_det = p.K.deterministic_path()
    psi_path = K_det + np.einsum("knm,kn->km", p.B.values, Q_path)
    rho_path = np.stack(
        [
            betas[i].deterministic_path() + np.einsum("knm,kn->km", p.B.values, R_path[:, i])
            for i in range(l)
        ],
        axis=1,
    ) if l else np.zeros((grid.N + 1, 0, p.m))

    nodes = grid.nodes
    Sinv = ric.Sinv
    psi_sq = float(np.trapezoid(np.einsum("ka,kab,kb->k", psi_path, Sinv, psi_path), nodes))
    cross = np.array(
        [
            np.trapezoid(np.einsum("ka,kab,kb->k", rho_path[:, i], Sinv, psi_path), nodes)
            for i in range(l)
        ]
    )
    gram = np.empty((l, l))
    for i in range(l):
        for j in range(i, l):
            gram[i, j] = gram[j, i] = np.trapezoid(
                np.einsum("ka,kab,kb->k", rho_path[:, i], Sinv, rho_path[:, j]), nodes
            )

    zeros_n = np.zeros((grid.N + 1, n))
    return BsdeSolution(
        grid=grid,
        Q=SurrogatePath.deterministic(grid, Q_path),
        pi=SurrogatePath.deterministic(grid, zeros_n),
        R=tuple(SurrogatePath.deterministic(grid, R_path[:, i]) for i in range(l)),
        r=tuple(SurrogatePath.deterministic(grid, zeros_n) for _ in range(l)),
        psi=SurrogatePath.deterministic(grid, psi_path),
        rho=tuple(SurrogatePath.deterministic(grid, rho_path[:, i]) for i in range(l)),
        R0=R_path[0].copy(),
        Q0=Q_path[0].copy(),
        gram=gram,
        cross=cross,
        psi_sq=psi_sq,
        gram_se=np.zeros((l, l)),
        cross_se=np.zeros(l),
        psi_sq_se=0.0,
        r0_se=np.zeros((l, n)),
        q0_se=np.zeros(n),
        rho_mean=np.swapaxes(rho_path, 0, 1).copy(),
        rho_mean_se=np.zeros((l, grid.N + 1, p.m)),
        rho_sq_mean=np.einsum("kim,kim->ik", rho_path, rho_path),
        rho_sq_se=np.zeros((l, grid.N + 1)),
        deterministic=True,
        training_seed=None,
        n_paths=0,
    )


# ---------------------------------------------------------------------------
# regression backend
# ---------------------------------------------------------------------------


class _NodeRegression:
    """Least-squares projection onto the basis at one node.

    Columns are standardized before forming normal equations; a pseudo-inverse
    with a relative cutoff handles the near-collinearity of smooth bases at
    nodes where the Brownian spread is still small.
    """

    def __init__(self, basis: BasisSpec, b: np.ndarray):
        phi = basis.design(b)
        scale = np.sqrt(np.mean(phi**2, axis=0))
        scale[scale < 1e-300] = 1.0
        self.design = phi
        self._phi = phi / scale
        self._scale = scale
        gram = self._phi.T @ self._phi / b.shape[0]
        w = np.linalg.eigvalsh(gram)
        self.cond = float(w[-1] / w[0]) if w[0] > 0 else math.inf
        self._pinv = np.linalg.pinv(gram, rcond=_RCOND, hermitian=True)
        self._n = b.shape[0]

    def fit(self, target: np.ndarray) -> np.ndarray:
        """Coefficients (K, d) of the projection of target (paths, d)."""
        rhs = self._phi.T @ target / self._n
        return (self._pinv @ rhs) / self._scale[:, None]

    def fitted(self, target: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Coefficients and fitted values of the projection."""
        coeffs = self.fit(target)
        return coeffs, self._phi @ (coeffs * self._scale[:, None])


@dataclass
class _BsdeSystem:
    """One linear BSDE: terminal data plus the affine driver term."""

    terminal: np.ndarray  # (paths, d) pathwise terminal values
    h_eval: Callable[[int, np.ndarray], np.ndarray]  # (k, B_k) -> (paths, d)
    # dB-derivative of the terminal data when declared: the integrand of the
    # martingale representation at t = T, which no increment regression can
    # reach.  None falls back to extrapolating the last interior surrogate.
    terminal_z: Optional[np.ndarray] = None


def _sweep_linear_bsdes(
    grid: TimeGrid,
    ens: BrownianEnsemble,
    basis: BasisSpec,
    drift: np.ndarray,  # (N+1, d, d) coefficient of Y in the driver
    diffusion: np.ndarray,  # (N+1, d, d) coefficient of Z in the driver
    systems: Sequence[_BsdeSystem],
    node_hook: Optional[Callable] = None,
):
    """Backward induction for linear BSDE systems sharing coefficients.

    One Picard substitution per step: Z explicit from the increment
    regression, Y implicit through a linear solve.  The first backward step
    is implicit Euler; later steps average the driver over the step
    (trapezoidal in time), which keeps the weak bias at second order.

    The conditional-mean target is variance-reduced with the martingale
    control variate Z_hat(B_k) dB built from the previous step's Z surrogate;
    it has exactly zero conditional mean for any F_k-measurable coefficient,
    so the estimator stays unbiased while the target fluctuation drops from
    O(sqrt(dt)) to O(dt).  Without it, regression noise accumulates through
    the value cascade and the increment regressions amplify it.  The
    increment target deliberately carries no (dB^2 - dt) control variate:
    coefficients fitted on the same paths correlate with the increments and
    such a variate trades variance for an O(N K / n) systematic bias.

    Returns per-node (Y, Z) coefficients and the deterministic initial
    values with their standard errors.
    """
    if "1" not in basis.names:
        raise BasisTooSmall("regression basis must include the constant function '1'")
    B = ens.values
    dt = grid.dt
    n_sys = len(systems)
    K = basis.size

    Y_coeffs = [np.zeros((grid.N + 1, K, s.terminal.shape[1])) for s in systems]
    Z_coeffs = [np.zeros((grid.N + 1, K, s.terminal.shape[1])) for s in systems]
    Y0 = [None] * n_sys
    Y0_se = [None] * n_sys

    reg_T = _NodeRegression(basis, B[:, -1])
    if reg_T.cond > _COND_LIMIT:
        raise RegressionSingular(
            f"basis Gram condition {reg_T.cond:.3e} at t=T exceeds {_COND_LIMIT:.0e}"
        )
    Y = [s.terminal for s in systems]
    for j in range(n_sys):
        Y_coeffs[j][-1] = reg_T.fit(Y[j])
        if systems[j].terminal_z is not None:
            Z_coeffs[j][-1] = reg_T.fit(systems[j].terminal_z)

    f_prev: list[Optional[np.ndarray]] = [None] * n_sys  # driver values at node k+1
    z_prev: list[Optional[np.ndarray]] = [None] * n_sys  # Z coefficients at node k+1
    for k in range(grid.N - 1, -1, -1):
        reg = _NodeRegression(basis, B[:, k])
        db = ens.increments[:, k][:, None]
        Ysol = [None] * n_sys
        Zsol = [None] * n_sys
        Zraw = [None] * n_sys
        for j, sys in enumerate(systems):
            if z_prev[j] is None:
                mart_cv = 0.0
            else:
                mart_cv = (reg.design @ z_prev[j]) * db
            _, ey = reg.fitted(Y[j] - mart_cv)
            z_raw = (Y[j] - ey) * db / dt
            z_c, z = reg.fitted(z_raw)
            h = sys.h_eval(k, B[:, k])
            cz_h = z @ diffusion[k].T + h
            if f_prev[j] is None:
                target = Y[j]
                step, lhs = dt, np.eye(drift.shape[1]) - dt * drift[k]
            else:
                target = Y[j] + (0.5 * dt) * f_prev[j]
                step, lhs = 0.5 * dt, np.eye(drift.shape[1]) - (0.5 * dt) * drift[k]
            _, ef = reg.fitted(target - mart_cv)
            y = np.linalg.solve(lhs, (ef + step * cz_h).T).T
            f_prev[j] = y @ drift[k].T + cz_h
            z_prev[j] = z_c
            Ysol[j], Zsol[j], Zraw[j] = y, z, z_raw
            Y_coeffs[j][k] = reg.fit(y)
            Z_coeffs[j][k] = z_c
            if k == grid.N - 1 and sys.terminal_z is None:
                Z_coeffs[j][grid.N] = z_c  # terminal Z extrapolated from the last step
            if k == 0:
                # Standard error of the initial value from the pre-projection
                # path samples (the fitted values at node 0 are already means).
                y_raw = np.linalg.solve(
                    lhs, (target - mart_cv + step * (z_raw @ diffusion[k].T + h)).T
                ).T
                Y0[j] = y.mean(axis=0)
                Y0_se[j] = y_raw.std(axis=0, ddof=1) / math.sqrt(ens.n_paths)
        if k == grid.N - 1 and node_hook is not None:
            # Node-N hook runs once the terminal Z surrogate exists.
            ZT = [
                s.terminal_z
                if s.terminal_z is not None
                else basis.design(B[:, -1]) @ Z_coeffs[j][grid.N]
                for j, s in enumerate(systems)
            ]
            node_hook(grid.N, [s.terminal for s in systems], ZT, ZT, reg_T)
        if node_hook is not None:
            node_hook(k, Ysol, Zsol, Zraw, reg)
        Y = Ysol
    return Y_coeffs, Z_coeffs, np.array(Y0), np.array(Y0_se)


def _moment_quadrature(
    grid: TimeGrid,
    basis: BasisSpec,
    Sinv: np.ndarray,
    psi_coeffs: np.ndarray,
    rho_coeffs: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, float]:
    """Trapezoid-in-t of E[rho^T S^-1 rho], E[rho^T S^-1 psi], E[psi^T S^-1 psi]
    with the B-expectations of the fitted surrogates taken exactly."""
    l = rho_coeffs.shape[0]
    gram_k = np.zeros((grid.N + 1, l, l))
    cross_k = np.zeros((grid.N + 1, l))
    psisq_k = np.zeros(grid.N + 1)
    for k in range(grid.N + 1):
        M = basis.moment_matrix(grid.variance_at(k))
        Cp = psi_coeffs[k]
        psisq_k[k] = np.einsum("am,ab,bn,mn->", Cp, M, Cp, Sinv[k])
        for i in range(l):
            Ci = rho_coeffs[i, k]
            cross_k[k, i] = np.einsum("am,ab,bn,mn->", Ci, M, Cp, Sinv[k])
            for j in range(i, l):
                val = np.einsum("am,ab,bn,mn->", Ci, M, rho_coeffs[j, k], Sinv[k])
                gram_k[k, i, j] = gram_k[k, j, i] = val
    w = np.full(grid.N + 1, grid.dt)
    w[0] *= 0.5
    w[-1] *= 0.5
    gram = (gram_k * w[:, None, None]).sum(axis=0)
    return 0.5 * (gram + gram.T), (cross_k * w[:, None]).sum(axis=0), float(psisq_k @ w)


def _lsmc_coefficients(p: SlqProblem, ric: RiccatiSolution) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Driver matrices A^T - L^T S^-1 B^T, C^T - L^T S^-1 D^T and L^T S^-1 per node."""
    LS = np.einsum("kmi,kmj->kij", ric.L, ric.Sinv)  # L^T S^-1, (N+1, n, m)
    At = np.swapaxes(p.A.values, 1, 2)
    Ct = np.swapaxes(p.C.values, 1, 2)
    Bt = np.swapaxes(p.B.values, 1, 2)
    Dt = np.swapaxes(p.D.values, 1, 2)
    drift = At - LS @ Bt
    diffusion = Ct - LS @ Dt
    return drift, diffusion, LS


def solve_bsde_lsmc(
    p: SlqProblem,
    ric: RiccatiSolution,
    ens: BrownianEnsemble,
    basis: Optional[BasisSpec] = None,
) -> BsdeSolution:
    """Least-squares Monte Carlo solve of the offset equations.

    At each backward step the one-step conditional expectation is regressed
    on basis functions of B(t_k); the martingale integrand is recovered by
    regressing the centered increment product Y(t_{k+1}) dB_k / dt.

    The Gram matrix, cross terms, and control-energy integral are evaluated
    by trapezoid over nodes with the B-expectation of the fitted surrogates
    taken in closed form (exact Gaussian moments of the basis).  A plain
    sample mean over paths shares the heavy lognormal tails of the data and
    fluctuates by a few percent even at 1e5 paths; the closed-form moments
    remove that sampling layer, leaving only coefficient noise.  Per-path
    trapezoid samples are still accumulated and provide the (conservative)
    standard errors.
    """
    if basis is None:
        basis = BasisSpec()
    if ens.grid != p.grid:
        raise ValueError("ensemble grid does not match the problem grid")
    grid = p.grid
    l, n, m = p.l, p.n, p.m
    drift, diffusion, LS = _lsmc_coefficients(p, ric)
    B_paths = ens.values

    def terminal_z(fld: RandomField) -> Optional[np.ndarray]:
        if fld.deterministic or fld.db_expr is not None:
            return fld.derivative_node(grid.N, B_paths[:, -1])
        return None

    def offset_h(g_field: RandomField, k_field: RandomField):
        def h(k: int, b: np.ndarray) -> np.ndarray:
            return g_field.evaluate_node(k, b) - k_field.evaluate_node(k, b) @ LS[k].T

        return h

    systems = [
        _BsdeSystem(p.N.evaluate_terminal(B_paths[:, -1]), offset_h(p.G, p.K), terminal_z(p.N))
    ]
    for c in p.constraints:
        systems.append(
            _BsdeSystem(
                c.gamma.evaluate_terminal(B_paths[:, -1]),
                offset_h(c.alpha, c.beta),
                terminal_z(c.gamma),
            )
        )

    K_basis = basis.size
    sqrt_n = math.sqrt(ens.n_paths)
    psi_coeffs = np.zeros((grid.N + 1, K_basis, m))
    rho_coeffs = np.zeros((l, grid.N + 1, K_basis, m))
    gram_pp = np.zeros((ens.n_paths, l, l))
    cross_pp = np.zeros((ens.n_paths, l))
    psisq_pp = np.zeros(ens.n_paths)
    rho_mean = np.zeros((l, grid.N + 1, m))
    rho_mean_se = np.zeros((l, grid.N + 1, m))
    rho_sq_mean = np.zeros((l, grid.N + 1))
    rho_sq_se = np.zeros((l, grid.N + 1))
    Bt = np.swapaxes(p.B.values, 1, 2)
    Dt = np.swapaxes(p.D.values, 1, 2)

    def hook(k: int, Ys, Zs, Zraws, reg: _NodeRegression):
        w = grid.dt * (0.5 if k in (0, grid.N) else 1.0)
        psi = p.K.evaluate_node(k, B_paths[:, k]) + Ys[0] @ Bt[k].T + Zs[0] @ Dt[k].T
        psi_coeffs[k] = reg.fit(psi)
        sinv = ric.Sinv[k]
        psisq_pp[:] += w * np.einsum("pa,ab,pb->p", psi, sinv, psi)
        rhos = []
        for i, c in enumerate(p.constraints):
            beta_k = c.beta.evaluate_node(k, B_paths[:, k])
            rho = beta_k + Ys[i + 1] @ Bt[k].T + Zs[i + 1] @ Dt[k].T
            rho_coeffs[i, k] = reg.fit(rho)
            cross_pp[:, i] += w * np.einsum("pa,ab,pb->p", rho, sinv, psi)
            rhos.append(rho)
            rho_raw = beta_k + Ys[i + 1] @ Bt[k].T + Zraws[i + 1] @ Dt[k].T
            rho_mean[i, k] = rho_raw.mean(axis=0)
            rho_mean_se[i, k] = rho_raw.std(axis=0, ddof=1) / sqrt_n
            sq = np.einsum("pa,pa->p", rho, rho)
            rho_sq_mean[i, k] = sq.mean()
            rho_sq_se[i, k] = sq.std(ddof=1) / sqrt_n
        for i in range(l):
            for j in range(i, l):
                q = w * np.einsum("pa,ab,pb->p", rhos[i], sinv, rhos[j])
                gram_pp[:, i, j] += q
                if j > i:
                    gram_pp[:, j, i] += q

    Y_coeffs, Z_coeffs, Y0, Y0_se = _sweep_linear_bsdes(
        grid, ens, basis, drift, diffusion, systems, node_hook=hook
    )

    gram, cross, psi_sq = _moment_quadrature(grid, basis, ric.Sinv, psi_coeffs, rho_coeffs)
    return BsdeSolution(
        grid=grid,
        Q=SurrogatePath(grid, basis, Y_coeffs[0]),
        pi=SurrogatePath(grid, basis, Z_coeffs[0]),
        R=tuple(SurrogatePath(grid, basis, Y_coeffs[i + 1]) for i in range(l)),
        r=tuple(SurrogatePath(grid, basis, Z_coeffs[i + 1]) for i in range(l)),
        psi=SurrogatePath(grid, basis, psi_coeffs),
        rho=tuple(SurrogatePath(grid, basis, rho_coeffs[i]) for i in range(l)),
        R0=Y0[1:].copy() if l else np.zeros((0, n)),
        Q0=Y0[0].copy(),
        gram=gram,
        cross=cross,
        psi_sq=psi_sq,
        gram_se=gram_pp.std(axis=0, ddof=1) / sqrt_n,
        cross_se=cross_pp.std(axis=0, ddof=1) / sqrt_n,
        psi_sq_se=float(psisq_pp.std(ddof=1) / sqrt_n),
        r0_se=Y0_se[1:].copy() if l else np.zeros((0, n)),
        q0_se=Y0_se[0].copy(),
        rho_mean=rho_mean,
        rho_mean_se=rho_mean_se,
        rho_sq_mean=rho_sq_mean,
        rho_sq_se=rho_sq_se,
        deterministic=False,
        training_seed=ens.seed,
        n_paths=ens.n_paths,
    )


# ---------------------------------------------------------------------------
# control-only constraint reduction and the Slater check
# ---------------------------------------------------------------------------


def reduce_constraints(
    p: SlqProblem,
    ens: Optional[BrownianEnsemble] = None,
    basis: Optional[BasisSpec] = None,
) -> list[tuple[SurrogatePath, float]]:
    """Rewrite each affine constraint as <u, rho~_i> (<=, =) a~_i.

    The reduction solves the plain adjoint equations (driver A^T R~ + C^T r~
    + alpha, no gain correction), sets rho~ = beta + B^T R~ + D^T r~ and
    a~_i = a_i - <xi, E[R~_i(s)]>; the result does not depend on the cost
    weights.
    """
    if basis is None:
        basis = BasisSpec()
    grid = p.grid
    l, m = p.l, p.m
    if l == 0:
        return []
    Bt = np.swapaxes(p.B.values, 1, 2)
    Dt = np.swapaxes(p.D.values, 1, 2)

    if p.is_deterministic():
        out = []
        for c in p.constraints:

            def rhs(t, R, alpha=c.alpha):
                return -(p.A.at(t).T @ R + _det_field_value(alpha, t))

            R_path = _rk4_vector_backward(grid, _det_field_value(c.gamma, grid.T), rhs)
            rho = c.beta.deterministic_path() + np.einsum("knm,kn->km", p.B.values, R_path)
            a_tilde = c.a - float(p.xi @ R_path[0])
            out.append((SurrogatePath.deterministic(grid, rho), a_tilde))
        return out

    if ens is None:
        raise ValueError("random constraint data require a Brownian ensemble")
    drift = np.swapaxes(p.A.values, 1, 2)
    diffusion = np.swapaxes(p.C.values, 1, 2)
    B_paths = ens.values
    systems = [
        _BsdeSystem(
            c.gamma.evaluate_terminal(B_paths[:, -1]),
            lambda k, b, alpha=c.alpha: alpha.evaluate_node(k, b),
            c.gamma.derivative_node(grid.N, B_paths[:, -1])
            if (c.gamma.deterministic or c.gamma.db_expr is not None)
            else None,
        )
        for c in p.constraints
    ]
    rho_coeffs = np.zeros((l, grid.N + 1, basis.size, m))

    def hook(k: int, Ys, Zs, Zraws, reg: _NodeRegression):
        for i, c in enumerate(p.constraints):
            rho = c.beta.evaluate_node(k, B_paths[:, k]) + Ys[i] @ Bt[k].T + Zs[i] @ Dt[k].T
            rho_coeffs[i, k] = reg.fit(rho)

    _, _, Y0, _ = _sweep_linear_bsdes(grid, ens, basis, drift, diffusion, systems, node_hook=hook)
    return [
        (SurrogatePath(grid, basis, rho_coeffs[i]), p.constraints[i].a - float(p.xi @ Y0[i]))
        for i in range(l)
    ]


def _rk4_vector_backward(grid: TimeGrid, terminal: np.ndarray, rhs) -> np.ndarray:
    out = np.empty((grid.N + 1,) + terminal.shape)
    out[-1] = terminal
    y = terminal
    h = -grid.dt
    for k in range(grid.N, 0, -1):
        t = grid.nodes[k]
        k1 = rhs(t, y)
        k2 = rhs(t + 0.5 * h, y + 0.5 * h * k1)
        k3 = rhs(t + 0.5 * h, y + 0.5 * h * k2)
        k4 = rhs(t + h, y + h * k3)
        y = y + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        out[k - 1] = y
    return out


def reduced_gram(reduced: Sequence[tuple[SurrogatePath, float]]) -> np.ndarray:
    """<rho~_i, rho~_j> in L2, exact in B through the basis moment matrices."""
    l = len(reduced)
    grid = reduced[0][0].grid
    nodes = grid.nodes
    vals = np.zeros((grid.N + 1, l, l))
    for k in range(grid.N + 1):
        mom = {}
        for i in range(l):
            pi_ = reduced[i][0]
            key_i = id(pi_.basis)
            if key_i not in mom:
                mom[key_i] = pi_.basis.moment_matrix(grid.variance_at(k))
        for i in range(l):
            ci = reduced[i][0].coeffs[k]
            for j in range(i, l):
                cj = reduced[j][0].coeffs[k]
                if reduced[i][0].basis.names == reduced[j][0].basis.names:
                    M = mom[id(reduced[i][0].basis)]
                else:
                    M = _cross_moment_matrix(
                        reduced[i][0].basis, reduced[j][0].basis, grid.variance_at(k)
                    )
                vals[k, i, j] = vals[k, j, i] = float(np.einsum("ad,ab,bd->", ci, M, cj))
    return np.trapezoid(vals, nodes, axis=0)


def _cross_moment_matrix(b1: BasisSpec, b2: BasisSpec, sigma2: float) -> np.ndarray:
    out = np.empty((b1.size, b2.size))
    for a, (pa, ka) in enumerate(b1._parsed):
        for b, (pb, kb) in enumerate(b2._parsed):
            out[a, b] = _b_factor_moment(pa + pb, ka + kb, sigma2)
    return out


@dataclass(frozen=True)
class SlaterWitness:
    """Span coefficients of a strictly admissible control."""

    coefficients: np.ndarray
    margins: np.ndarray  # slack on inequality rows
    gram: np.ndarray

    @property
    def margin(self) -> float:
        return float(self.margins.min()) if self.margins.size else math.inf


@dataclass(frozen=True)
class Infeasible:
    reason: str
    certificate: dict = field(default_factory=dict)


_SLATER_MARGIN = 1e-6


def slater_check(
    reduced: Sequence[tuple[SurrogatePath, float]], l_prime: int
) -> Union[SlaterWitness, Infeasible]:
    """Search the span of the reduced directions for a strictly feasible control.

    Any admissible control decomposes into span + orthogonal part and the
    orthogonal part does not move the constraint values, so feasibility is
    decided by a small linear program over span coordinates.
    """
    if not reduced:
        raise ValueError("no constraints to check")
    l = len(reduced)
    G = reduced_gram(reduced)
    a_t = np.array([a for _, a in reduced])
    scale = 1.0 + float(np.max(np.abs(a_t))) + float(np.trace(G)) / l

    eq = slice(l_prime, l)
    n_eq = l - l_prime
    if n_eq:
        G_eq = G[eq, eq]
        w = np.linalg.eigvalsh(0.5 * (G_eq + G_eq.T))
        if w[0] <= 1e-10 * scale:
            sol, residual, *_ = np.linalg.lstsq(G[eq, :], a_t[eq], rcond=None)
            res = float(np.linalg.norm(G[eq, :] @ sol - a_t[eq]))
            if res > 1e-8 * scale:
                return Infeasible(
                    "equality constraints are contradictory",
                    {"residual": res, "eigmin_equality_gram": float(w[0])},
                )
            raise GramSingularEquality(
                f"equality directions linearly dependent (eigmin {w[0]:.3e})"
            )

    if l_prime == 0:
        c = np.linalg.solve(G[eq, :][:, eq], a_t[eq])
        full = np.zeros(l)
        full[eq] = c
        return SlaterWitness(coefficients=full, margins=np.array([]), gram=G)

    # Variables (c_1..c_l, margin); maximize the margin subject to
    # G c + scale*margin <= a~ on inequality rows, G c = a~ on equality rows.
    cost = np.zeros(l + 1)
    cost[-1] = -1.0
    A_ub = np.hstack([G[:l_prime, :], np.full((l_prime, 1), scale)])
    b_ub = a_t[:l_prime]
    A_eq = np.hstack([G[eq, :], np.zeros((n_eq, 1))]) if n_eq else None
    b_eq = a_t[eq] if n_eq else None
    bounds = [(None, None)] * l + [(None, 1.0)]
    res = linprog(cost, A_ub=A_ub, b_ub=b_ub, A_eq=A_eq, b_eq=b_eq, bounds=bounds, method="highs")
    if not res.success:
        return Infeasible(f"no admissible control in the constraint span: {res.message}")
    margin = float(res.x[-1])
    if margin <= _SLATER_MARGIN:
        return Infeasible(
            "no strictly feasible control: best margin "
            f"{margin * scale:.3e} (scale {scale:.3e})",
            {"margin": margin, "coefficients": res.x[:l]},
        )
    c = res.x[:l]
    margins = a_t[:l_prime] - G[:l_prime, :] @ c
    return SlaterWitness(coefficients=c, margins=margins, gram=G)


# ---------------------------------------------------------------------------
# forward-flow cross-estimator
# ---------------------------------------------------------------------------

_DRIFT_TOL = 1e-6


def feynman_kac_estimate(
    p: SlqProblem,
    ric: RiccatiSolution,
    ens: BrownianEnsemble,
    index: int,
    basis: Optional[BasisSpec] = None,
    chunk_size: int = 5000,
) -> tuple[SurrogatePath, Optional[SurrogatePath]]:
    """Independent estimate of (R_i, rho_i) through the forward flow.

    Simulates the fundamental flow V and its inverse (propagated through
    exact one-step inverses so V V0 = I holds to rounding), accumulates the
    terminal-plus-driver functional backward, and regresses the product
    V0 x functional on the basis.  When the data declare dB-derivatives the
    martingale part is recovered as well and mapped to rho_i.
    """
    if basis is None:
        basis = BasisSpec()
    if ens.grid != p.grid:
        raise ValueError("ensemble grid does not match the problem grid")
    grid = p.grid
    n, m = p.n, p.m
    c = p.constraints[index]
    drift, diffusion, LS = _lsmc_coefficients(p, ric)
    dt = grid.dt
    N = grid.N
    eye = np.eye(n)

    want_rho = c.gamma.deterministic or c.gamma.db_expr is not None
    for fld in (c.alpha, c.beta):
        want_rho = want_rho and (fld.deterministic or fld.db_expr is not None)

    # (B^T - D^T C^T + D^T L^T S^-1 D^T) per node, for the rho recovery.
    Bt = np.swapaxes(p.B.values, 1, 2)
    Ct = np.swapaxes(p.C.values, 1, 2)
    Dt = np.swapaxes(p.D.values, 1, 2)
    rho_weight = Bt - Dt @ Ct + Dt @ LS @ Dt

    K = basis.size
    scales = np.empty((N + 1, K))
    for k in range(N + 1):
        mm = basis.moment_matrix(grid.variance_at(k))
        scales[k] = np.sqrt(np.maximum(np.diag(mm), 1e-30))
    G_sum = np.zeros((N + 1, K, K))
    bR_sum = np.zeros((N + 1, K, n))
    brho_sum = np.zeros((N + 1, K, m))

    n_chunks = (ens.n_paths + chunk_size - 1) // chunk_size
    for ci in range(n_chunks):
        sl = slice(ci * chunk_size, min((ci + 1) * chunk_size, ens.n_paths))
        inc = ens.increments[sl]
        B = np.concatenate([np.zeros((inc.shape[0], 1)), np.cumsum(inc, axis=1)], axis=1)
        npth = inc.shape[0]

        V = np.empty((N + 1, npth, n, n))
        V0 = np.empty_like(V)
        V[0] = eye
        V0[0] = eye
        for k in range(N):
            step = eye + drift[k] * dt + diffusion[k][None] * inc[:, k, None, None]
            V[k + 1] = V[k] @ step
            try:
                V0[k + 1] = np.linalg.inv(step) @ V0[k]
            except np.linalg.LinAlgError as exc:
                raise VInversionDrift("one-step flow map singular; step size too coarse") from exc
            drift_err = np.max(np.abs(V[k + 1] @ V0[k + 1] - eye))
            if drift_err > _DRIFT_TOL:
                raise VInversionDrift(
                    f"flow identity violated by {drift_err:.3e}; step size too coarse"
                )

        def h_val(k):
            return c.alpha.evaluate_node(k, B[:, k]) - c.beta.evaluate_node(k, B[:, k]) @ LS[k].T

        def h_db(k):
            return c.alpha.derivative_node(k, B[:, k]) - c.beta.derivative_node(k, B[:, k]) @ LS[k].T

        gamma_T = c.gamma.evaluate_terminal(B[:, -1])
        L_func = np.einsum("pij,pj->pi", V[N], gamma_T)
        Vh_next = np.einsum("pij,pj->pi", V[N], h_val(N))
        if want_rho:
            gamma_db = c.gamma.derivative_node(N, B[:, -1])
            VT_gamma_db = np.einsum("pij,pj->pi", V[N], gamma_db)
            D_int = np.zeros((npth, n))
            Vhdb_next = np.einsum("pij,pj->pi", V[N], h_db(N))

        for k in range(N, -1, -1):
            if k < N:
                Vh_k = np.einsum("pij,pj->pi", V[k], h_val(k))
                L_func = L_func + 0.5 * dt * (Vh_k + Vh_next)
                Vh_next = Vh_k
                if want_rho:
                    Vhdb_k = np.einsum("pij,pj->pi", V[k], h_db(k))
                    D_int = D_int + 0.5 * dt * (Vhdb_k + Vhdb_next)
                    Vhdb_next = Vhdb_k
            target_R = np.einsum("pij,pj->pi", V0[k], L_func)
            phi = basis.design(B[:, k]) / scales[k]
            G_sum[k] += phi.T @ phi
            bR_sum[k] += phi.T @ target_R
            if want_rho:
                mart = target_R @ diffusion[k].T + np.einsum(
                    "pij,pj->pi", V0[k], VT_gamma_db + D_int
                )
                rho_val = (
                    c.beta.evaluate_node(k, B[:, k]) + mart @ Dt[k].T + target_R @ rho_weight[k].T
                )
                brho_sum[k] += phi.T @ rho_val

    R_coeffs = np.empty((N + 1, K, n))
    rho_coeffs = np.empty((N + 1, K, m)) if want_rho else None
    for k in range(N + 1):
        pinv = np.linalg.pinv(G_sum[k] / ens.n_paths, rcond=_RCOND, hermitian=True)
        R_coeffs[k] = (pinv @ bR_sum[k] / ens.n_paths) / scales[k][:, None]
        if want_rho:
            rho_coeffs[k] = (pinv @ brho_sum[k] / ens.n_paths) / scales[k][:, None]
    R_path = SurrogatePath(grid, basis, R_coeffs)
    rho_path = SurrogatePath(grid, basis, rho_coeffs) if want_rho else None
    return R_path, rho_path
