"""Report writers: JSON for machines, aligned text for humans, CSV surfaces,
and matplotlib figures rendered next to the delimited output."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .bsde import BsdeSolution
from .dual import DualQuadratic, DualSolution
from .model import SlqProblem, ValidationReport
from .montecarlo import VerificationReport
from .riccati import RiccatiSolution


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def solution_payload(
    p: SlqProblem,
    ric: RiccatiSolution,
    bsde: BsdeSolution,
    dq: DualQuadratic,
    sol: DualSolution,
    slater_margin: Optional[float],
) -> dict:
    """Machine-readable solve report; top-level keys are fixed."""
    gram = bsde.gram
    eig = np.linalg.eigvalsh(0.5 * (gram + gram.T)) if gram.size else np.array([])
    return {
        "lambda": sol.lambda_star.tolist(),
        "active": list(sol.active_set),
        "value": sol.dual_value,
        "residuals": sol.residuals.as_dict(),
        "unique": sol.unique,
        "diagnostics": {
            "n": p.n,
            "m": p.m,
            "l": p.l,
            "l_prime": p.l_prime,
            "budgets": p.budgets.tolist(),
            "riccati": {
                "eps_S": ric.eps_S,
                "P_initial": ric.P[0].tolist(),
                "P_terminal": ric.P[-1].tolist(),
            },
            "gram": gram.tolist(),
            "gram_eigmin": float(eig[0]) if eig.size else None,
            "cross": bsde.cross.tolist(),
            "R0": bsde.R0.tolist(),
            "const_term": dq.const_term,
            "slater_margin": slater_margin,
            "bsde_backend": "analytic" if bsde.deterministic else "lsmc",
            "training_paths": bsde.n_paths,
        },
    }


def write_json(path: Path, payload: dict):
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def write_text_report(
    path: Path,
    p: SlqProblem,
    validation: ValidationReport,
    ric: RiccatiSolution,
    bsde: BsdeSolution,
    sol: DualSolution,
    slater_margin: Optional[float],
):
    lines = []
    add = lines.append
    add("constrained stochastic LQ solve")
    add("=" * 34)
    add(f"state dim n={p.n}  control dim m={p.m}  constraints l={p.l} (l'={p.l_prime})")
    add(f"grid [{p.grid.s}, {p.grid.T}] with {p.grid.N} steps (dt={p.grid.dt:.6g})")
    add("")
    add("validation")
    for c in validation.checks:
        witness = "" if c.witness is None else f"  witness={c.witness:.3e}"
        add(f"  {'PASS' if c.passed else 'FAIL'}  {c.name:<12}{witness}")
    add("")
    add(f"control weight floor: eigmin S = {ric.eps_S:.6g}")
    if slater_margin is not None:
        add(f"slater margin: {slater_margin:.6g}")
    add(f"bsde backend: {'analytic' if bsde.deterministic else 'lsmc'}")
    add("")
    add("dual solution")
    add(f"  lambda* = {np.array2string(sol.lambda_star, precision=8)}")
    add(f"  active inequality rows: {list(sol.active_set) or 'none'}")
    add(f"  dual value = {sol.dual_value:.10g}")
    add(f"  max KKT residual = {sol.residuals.max_residual:.3e}")
    add(f"  unique maximizer: {sol.unique}")
    add("")
    add("feedback law")
    add("  u*(t) = -S(t)^-1 [ L(t) X(t) + psi(t, B_t) + sum_i lambda*_i rho_i(t, B_t) ]")
    mid = p.grid.N // 2
    for k, tag in [(0, "t=s"), (mid, "t=mid"), (p.grid.N, "t=T")]:
        gain = ric.Sinv_L[k]
        add(f"  {tag:<6} |S^-1 L| = {np.linalg.norm(gain):.6g}")
    path.write_text("\n".join(lines) + "\n")


def write_riccati_csv(path: Path, ric: RiccatiSolution):
    """Per-node dump of (t, vec(P), eigmin(S))."""
    n = ric.P.shape[1]
    header = ["t"] + [f"P{i + 1}{j + 1}" for i in range(n) for j in range(n)] + ["eigmin_S"]
    rows = [",".join(header)]
    eigs = np.linalg.eigvalsh(ric.S)
    for k, t in enumerate(ric.grid.nodes):
        cells = [_fmt(t)] + [_fmt(v) for v in ric.P[k].ravel()] + [_fmt(eigs[k][0])]
        rows.append(",".join(cells))
    path.write_text("\n".join(rows) + "\n")


def write_paths_csv(path: Path, run, count: int):
    """Trajectory dump (t, X components, u components, B) for the first paths."""
    count = min(count, run.X_paths.shape[0])
    n = run.X_paths.shape[2]
    m = run.u_paths.shape[2]
    header = (
        ["path", "t"]
        + [f"X{i + 1}" for i in range(n)]
        + [f"u{j + 1}" for j in range(m)]
        + ["B"]
    )
    rows = [",".join(header)]
    B = run.ensemble.values
    for pth in range(count):
        for k, t in enumerate(run.ensemble.grid.nodes):
            cells = (
                [str(pth), _fmt(t)]
                + [_fmt(v) for v in run.X_paths[pth, k]]
                + [_fmt(v) for v in run.u_paths[pth, k]]
                + [_fmt(B[pth, k])]
            )
            rows.append(",".join(cells))
    path.write_text("\n".join(rows) + "\n")


def write_verification_csv(path: Path, report: VerificationReport):
    rows = ["index,kind,mean,se,budget,classification"]
    for i, c in enumerate(report.constraints):
        rows.append(
            f"{i + 1},{c.kind},{_fmt(c.mean)},{_fmt(c.se)},{_fmt(c.budget)},{c.classification}"
        )
    path.write_text("\n".join(rows) + "\n")


def write_sweep_csv(path: Path, axes: Sequence[int], rows: list[dict], summary: str):
    l = len(rows[0]["lambda"]) if rows else 0
    header = (
        [f"a{i}" for i in axes]
        + ["dual_value"]
        + [f"lambda{j + 1}" for j in range(l)]
        + ["active_set"]
    )
    lines = [",".join(header)]
    for row in rows:
        cells = [_fmt(row["a"][i]) for i in axes]
        cells.append(_fmt(row["value"]))
        cells += [_fmt(v) for v in row["lambda"]]
        cells.append(";".join(str(i) for i in row["active"]) or "-")
        lines.append(",".join(cells))
    lines.append(f"# {summary}")
    path.write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# figures
# ---------------------------------------------------------------------------


def render_solution_figure(path: Path, p: SlqProblem, ric: RiccatiSolution, bsde: BsdeSolution):
    t = p.grid.nodes
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 4))
    eigs = np.linalg.eigvalsh(ric.P)
    ax1.plot(t, eigs[:, 0], label="eigmin P")
    ax1.plot(t, eigs[:, -1], label="eigmax P")
    ax1.plot(t, np.linalg.eigvalsh(ric.S)[:, 0], label="eigmin S", ls="--")
    ax1.set_xlabel("t")
    ax1.set_title("state weight and control weight")
    ax1.legend()
    psi_mean = bsde.psi.node_means()
    for j in range(psi_mean.shape[1]):
        ax2.plot(t, psi_mean[:, j], label=f"E[psi_{j + 1}]")
    for i, rho in enumerate(bsde.rho):
        mean = rho.node_means()
        ax2.plot(t, np.linalg.norm(mean, axis=1), ls="--", label=f"|E[rho_{i + 1}]|")
    ax2.set_xlabel("t")
    ax2.set_title("offset processes (node means)")
    ax2.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def render_verification_figure(path: Path, J_samples: np.ndarray, report: VerificationReport):
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.hist(J_samples, bins=80, density=True, alpha=0.75, label="realized cost")
    ax.axvline(report.dual_value, color="k", lw=1.5, label="dual value")
    ax.axvline(report.J_hat.mean, color="C3", lw=1.2, ls="--", label="mean cost")
    ax.set_title(
        f"gap = {report.gap:.4g} (SE {report.gap_se:.2g}, allowance {report.allowance:.2g})"
    )
    ax.set_xlabel("per-path cost")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def render_sweep_figure(path: Path, axes: Sequence[int], rows: list[dict]):
    fig, ax = plt.subplots(figsize=(7, 5))
    if len(axes) == 2:
        xs = sorted({row["a"][axes[0]] for row in rows})
        ys = sorted({row["a"][axes[1]] for row in rows})
        grid = np.full((len(ys), len(xs)), np.nan)
        for row in rows:
            ix = xs.index(row["a"][axes[0]])
            iy = ys.index(row["a"][axes[1]])
            grid[iy, ix] = row["value"]
        mesh = ax.pcolormesh(xs, ys, grid, shading="nearest")
        fig.colorbar(mesh, ax=ax, label="dual value")
        ax.set_xlabel(f"a{axes[0]}")
        ax.set_ylabel(f"a{axes[1]}")
        ax.set_title("optimal cost over budgets")
    else:
        axis = axes[0]
        pts = sorted((row["a"][axis], row["value"]) for row in rows)
        ax.plot([x for x, _ in pts], [v for _, v in pts], marker="o")
        ax.set_xlabel(f"a{axis}")
        ax.set_ylabel("dual value")
        ax.set_title("optimal cost along the budget axis")
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)
