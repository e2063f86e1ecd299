"""Backward integration of the matrix Riccati equation and derived gains.

With deterministic system matrices the Riccati equation loses its martingale
term and reduces to the matrix ODE

    -dP/dt = E + P A + A^T P + C^T P C - L^T S^{-1} L,   P(T) = M,

with S = I + D^T P D and L = F^T + B^T P + D^T P C.  Integration is a
fixed-step RK4 sweep on the problem grid with symmetrization after each step;
S is factorized by symmetric eigendecomposition at every node, which yields
the uniform-positivity certificate as a by-product.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import PositivityLost, StepUnstable
from .model import SlqProblem, TimeGrid

_S_FLOOR = 1e-10
_BLOWUP = 1e12


def gain_matrices(p: SlqProblem, t: float, P: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Control weight S and gain numerator L for the state weight P at time t."""
    B = p.B.at(t)
    C = p.C.at(t)
    D = p.D.at(t)
    F = p.F.at(t)
    Iw = p.I.at(t)
    S = Iw + D.T @ P @ D
    L = F.T + B.T @ P + D.T @ P @ C
    return S, L


def riccati_rhs(p: SlqProblem, t: float, P: np.ndarray) -> np.ndarray:
    A = p.A.at(t)
    C = p.C.at(t)
    E = p.E.at(t)
    S, L = gain_matrices(p, t, P)
    try:
        SL = np.linalg.solve(S, L)
    except np.linalg.LinAlgError as exc:
        raise PositivityLost(f"S singular during integration at t={t:.6g}") from exc
    return -(E + P @ A + A.T @ P + C.T @ P @ C - L.T @ SL)


@dataclass(frozen=True)
class RiccatiSolution:
    """Node-sampled P, S, L, S^{-1} and S^{-1}L with a positivity certificate."""

    grid: TimeGrid
    P: np.ndarray  # (N+1, n, n)
    S: np.ndarray  # (N+1, m, m)
    L: np.ndarray  # (N+1, m, n)
    Sinv: np.ndarray  # (N+1, m, m)
    Sinv_L: np.ndarray  # (N+1, m, n)
    eps_S: float  # certified min eigenvalue of S over the grid

    def __post_init__(self):
        for name in ("P", "S", "L", "Sinv", "Sinv_L"):
            arr = np.asarray(getattr(self, name), dtype=float)
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)


def _rk4_backward(p: SlqProblem, terminal: np.ndarray, rhs) -> np.ndarray:
    """One RK4 sweep from t = T down to t = s, values stored at every node."""
    grid = p.grid
    h = -grid.dt
    out = np.empty((grid.N + 1,) + terminal.shape)
    out[-1] = terminal
    y = terminal
    for k in range(grid.N, 0, -1):
        t = grid.nodes[k]
        k1 = rhs(t, y)
        k2 = rhs(t + 0.5 * h, y + 0.5 * h * k1)
        k3 = rhs(t + 0.5 * h, y + 0.5 * h * k2)
        k4 = rhs(t + h, y + h * k3)
        y = y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if y.ndim == 2 and y.shape[0] == y.shape[1]:
            y = 0.5 * (y + y.T)
        if not np.isfinite(y).all() or np.max(np.abs(y)) > _BLOWUP:
            raise StepUnstable(f"backward integration blew up at t={t + h:.6g}")
        out[k - 1] = y
    return out


def solve_riccati(p: SlqProblem) -> RiccatiSolution:
    """Integrate the Riccati ODE backward and certify S >= eps over the grid."""
    grid = p.grid
    P = _rk4_backward(p, 0.5 * (p.M + p.M.T), lambda t, y: riccati_rhs(p, t, y))

    m = p.m
    S = np.empty((grid.N + 1, m, m))
    L = np.empty((grid.N + 1, m, p.n))
    Sinv = np.empty_like(S)
    Sinv_L = np.empty_like(L)
    eps_S = np.inf
    for k, t in enumerate(grid.nodes):
        S_k, L_k = gain_matrices(p, t, P[k])
        S_k = 0.5 * (S_k + S_k.T)
        w, U = np.linalg.eigh(S_k)
        if w[0] < _S_FLOOR:
            raise PositivityLost(
                f"min eigenvalue of S is {w[0]:.3e} at t={t:.6g} (tolerance {_S_FLOOR})"
            )
        eps_S = min(eps_S, float(w[0]))
        Sinv_k = (U / w) @ U.T
        S[k], L[k], Sinv[k] = S_k, L_k, Sinv_k
        Sinv_L[k] = Sinv_k @ L_k
    return RiccatiSolution(grid=grid, P=P, S=S, L=L, Sinv=Sinv, Sinv_L=Sinv_L, eps_S=float(eps_S))


def check_uniform_positivity(sol: RiccatiSolution, eps: float) -> bool:
    """True iff the certified minimum eigenvalue of S meets the requested floor."""
    return sol.eps_S >= eps
