"""Command-line front end: slq solve | verify | sweep <problem-file>.

Exit codes: 0 success, 1 verification checks failed, 2 invalid input,
3 infeasible constraints, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import sys
from itertools import product
from pathlib import Path
from typing import Optional

import numpy as np

from . import reporting
from .bsde import (
    BasisSpec,
    BrownianEnsemble,
    BsdeSolution,
    Infeasible,
    SlaterWitness,
    reduce_constraints,
    slater_check,
    solve_bsde_analytic,
    solve_bsde_lsmc,
)
from .config import (
    MIN_VERIFY_PATHS,
    RunConfig,
    SOLVE,
    SWEEP,
    VERIFY,
    VERIFY_SEED_OFFSET,
    load_problem,
    parse_sweep_spec,
)
from .dual import DualQuadratic, DualSolution, build_dual_quadratic, solve_dual
from .errors import (
    BasisTooSmall,
    ConfigError,
    DimensionMismatch,
    EqualityInfeasible,
    GramSingular,
    GramSingularEquality,
    NoConvergence,
    NonFiniteState,
    NonSymmetric,
    NotPositiveDefinite,
    PositivityLost,
    RegressionSingular,
    SeedCollision,
    SlqError,
    StepUnstable,
    VInversionDrift,
)
from .model import SlqProblem, validate_problem
from .montecarlo import cost_samples, duality_gap, simulate_closed_loop
from .riccati import solve_riccati

_INVALID_INPUT = {ConfigError, DimensionMismatch, NonSymmetric, NotPositiveDefinite, SeedCollision}
_INFEASIBLE = {GramSingularEquality, EqualityInfeasible}
_NUMERICAL = {
    PositivityLost,
    StepUnstable,
    RegressionSingular,
    BasisTooSmall,
    NoConvergence,
    GramSingular,
    NonFiniteState,
    VInversionDrift,
}

_MODULE_TAGS = {
    ConfigError: "config",
    DimensionMismatch: "model",
    NonSymmetric: "model",
    NotPositiveDefinite: "model",
    PositivityLost: "riccati",
    StepUnstable: "riccati",
    RegressionSingular: "bsde",
    BasisTooSmall: "bsde",
    GramSingularEquality: "bsde",
    VInversionDrift: "bsde",
    EqualityInfeasible: "dual",
    NoConvergence: "dual",
    GramSingular: "dual",
    SeedCollision: "montecarlo",
    NonFiniteState: "montecarlo",
}


class _Pipeline:
    """Shared artifacts of one solve: problem, gains, offsets, dual."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.problem = load_problem(cfg.problem_path, steps=cfg.steps)
        self.validation = validate_problem(self.problem)
        self.ric = None
        self.bsde: Optional[BsdeSolution] = None
        self.slater = None
        self.dq: Optional[DualQuadratic] = None
        self.sol: Optional[DualSolution] = None

    def run(self):
        p = self.problem
        self.ric = solve_riccati(p)
        basis = BasisSpec.parse(self.cfg.basis) if self.cfg.basis else BasisSpec()
        if p.is_deterministic():
            self.bsde = solve_bsde_analytic(p, self.ric)
            ens = None
        else:
            ens = BrownianEnsemble.generate(p.grid, self.cfg.paths, self.cfg.seed)
            self.bsde = solve_bsde_lsmc(p, self.ric, ens, basis)
        if p.l:
            reduced = reduce_constraints(p, ens, basis)
            self.slater = slater_check(reduced, p.l_prime)
            if isinstance(self.slater, Infeasible):
                return
        self.dq = build_dual_quadratic(p, self.ric, self.bsde)
        self.sol = solve_dual(self.dq)

    @property
    def slater_margin(self) -> Optional[float]:
        if isinstance(self.slater, SlaterWitness):
            return self.slater.margin
        return None


def _write_solution(pipe: _Pipeline, out: Path):
    cfg = pipe.cfg
    payload = reporting.solution_payload(
        pipe.problem, pipe.ric, pipe.bsde, pipe.dq, pipe.sol, pipe.slater_margin
    )
    reporting.write_json(out / "solution.json", payload)
    reporting.write_text_report(
        out / "report.txt",
        pipe.problem,
        pipe.validation,
        pipe.ric,
        pipe.bsde,
        pipe.sol,
        pipe.slater_margin,
    )
    if cfg.dump_riccati:
        reporting.write_riccati_csv(out / "riccati.csv", pipe.ric)
    if cfg.figures:
        reporting.render_solution_figure(out / "solution.png", pipe.problem, pipe.ric, pipe.bsde)


def _start(cfg: RunConfig) -> tuple[Optional[_Pipeline], int]:
    pipe = _Pipeline(cfg)
    if not pipe.validation.ok:
        for check in pipe.validation.failed():
            print(f"[model] validation failed: {check.name}: {check.detail}", file=sys.stderr)
        return None, 2
    pipe.run()
    if isinstance(pipe.slater, Infeasible):
        print(f"[bsde] infeasible: {pipe.slater.reason}", file=sys.stderr)
        return None, 3
    return pipe, 0


def run_solve(cfg: RunConfig) -> int:
    pipe, code = _start(cfg)
    if pipe is None:
        return code
    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    _write_solution(pipe, out)
    sol = pipe.sol
    print(f"lambda* = {np.array2string(sol.lambda_star, precision=8)}")
    print(f"dual value = {sol.dual_value:.10g}")
    print(f"active set = {list(sol.active_set) or 'none'}")
    print(f"reports written to {out}")
    return 0


def run_verify(cfg: RunConfig) -> int:
    pipe, code = _start(cfg)
    if pipe is None:
        return code
    p = pipe.problem
    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    _write_solution(pipe, out)

    verify_seed = cfg.seed + VERIFY_SEED_OFFSET
    ens = BrownianEnsemble.generate(p.grid, cfg.paths, verify_seed)
    run = simulate_closed_loop(p, pipe.ric, pipe.bsde, pipe.sol, ens)
    report = duality_gap(run, p, pipe.dq, pipe.sol, pipe.bsde)
    reporting.write_json(out / "verification.json", report.as_dict())
    reporting.write_verification_csv(out / "verification.csv", report)
    if cfg.dump_paths:
        reporting.write_paths_csv(out / "paths.csv", run, cfg.dump_paths)
    if cfg.figures:
        reporting.render_verification_figure(
            out / "verification.png", cost_samples(run, p), report
        )
    print(f"J_hat = {report.J_hat.mean:.8g} +- {report.J_hat.se:.3g}")
    print(f"dual value = {report.dual_value:.8g}")
    print(
        f"gap = {report.gap:.4g} (3 SE = {3 * report.gap_se:.4g}, "
        f"allowance = {report.allowance:.4g})"
    )
    print(f"verification {'PASS' if report.passed else 'FAIL'}")
    return 0 if report.passed else 1


def run_sweep(cfg: RunConfig) -> int:
    pipe, code = _start(cfg)
    if pipe is None:
        return code
    p = pipe.problem
    for axis in cfg.sweep_spec:
        if not 1 <= axis <= p.l:
            raise ConfigError(f"sweep axis a{axis} out of range (l={p.l})")
    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)

    # Gains and offsets do not depend on the budgets, so only the dual
    # quadratic is rebuilt per cell.
    bsde, ric = pipe.bsde, pipe.ric
    axes = sorted(cfg.sweep_spec)
    rows = []
    for combo in product(*(cfg.sweep_spec[a] for a in axes)):
        budgets = p.budgets.copy()
        for a_idx, value in zip(axes, combo):
            budgets[a_idx - 1] = value
        dq = DualQuadratic(
            const_term=pipe.dq.const_term,
            lin=2.0 * (bsde.R0 @ p.xi - budgets) - 2.0 * bsde.cross,
            gram=bsde.gram,
            l_prime=p.l_prime,
            a=budgets,
        )
        sol = solve_dual(dq)
        rows.append(
            {
                "a": {a: budgets[a - 1] for a in axes},
                "value": sol.dual_value,
                "lambda": sol.lambda_star.tolist(),
                "active": list(sol.active_set),
            }
        )

    summary = _monotonicity_summary(axes, cfg.sweep_spec, rows)
    reporting.write_sweep_csv(out / "sweep.csv", axes, rows, summary)
    if cfg.figures:
        reporting.render_sweep_figure(out / "sweep.png", axes, rows)
    print(summary)
    print(f"sweep written to {out / 'sweep.csv'} ({len(rows)} cells)")
    return 0


def _monotonicity_summary(axes, spec, rows) -> str:
    by_key = {tuple(row["a"][a] for a in axes): row for row in rows}
    notes = []
    for pos, axis in enumerate(axes):
        non_increasing = True
        flat_when_inactive = True
        values = spec[axis]
        other_axes = [a for a in axes if a != axis]
        other_values = [spec[a] for a in other_axes]
        for other_combo in product(*other_values) if other_axes else [()]:
            prev = None
            for v in values:
                key = [None] * len(axes)
                for i, a in enumerate(axes):
                    key[i] = v if a == axis else other_combo[other_axes.index(a)]
                row = by_key[tuple(key)]
                if prev is not None:
                    if row["value"] > prev["value"] + 1e-9:
                        non_increasing = False
                    both_inactive = (
                        prev["lambda"][axis - 1] == 0.0 and row["lambda"][axis - 1] == 0.0
                    )
                    if both_inactive and abs(row["value"] - prev["value"]) > 1e-12:
                        flat_when_inactive = False
                prev = row
        notes.append(
            f"a{axis}: non-increasing={non_increasing}, flat-once-inactive={flat_when_inactive}"
        )
    return "monotonicity: " + "; ".join(notes)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="slq",
        description="stochastic LQ control with affine constraints: solve, verify, sweep",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, blurb in [
        (SOLVE, "solve the dual problem and report the feedback law"),
        (VERIFY, "solve, then verify optimality by out-of-sample Monte Carlo"),
        (SWEEP, "re-solve the dual over a grid of constraint budgets"),
    ]:
        cmd = sub.add_parser(name, help=blurb)
        cmd.add_argument("problem", type=Path, help="problem file (TOML)")
        cmd.add_argument("--paths", type=int, default=100000, help="Monte Carlo paths")
        cmd.add_argument("--steps", type=int, default=None, help="override grid steps")
        cmd.add_argument("--seed", type=int, default=12345, help="training seed")
        cmd.add_argument("--basis", type=str, default=None, help="regression basis, e.g. '1,B,B^2,exp(B)'")
        cmd.add_argument("--out", type=Path, default=Path("slq_out"), help="output directory")
        cmd.add_argument("--dump-riccati", action="store_true", help="write riccati.csv")
        cmd.add_argument("--dump-paths", type=int, default=0, metavar="K", help="dump K trajectories")
        cmd.add_argument("--no-figures", action="store_true", help="skip figure rendering")
        if name == SWEEP:
            cmd.add_argument(
                "--sweep",
                type=str,
                required=True,
                help="axes like a1=-3:1:1,a2=-3:1:1 (1-based constraint indices)",
            )
    return parser


def _config_from_args(args) -> RunConfig:
    return RunConfig(
        problem_path=args.problem,
        command=args.command,
        paths=args.paths,
        steps=args.steps,
        seed=args.seed,
        sweep_spec=parse_sweep_spec(args.sweep) if getattr(args, "sweep", None) else {},
        output_dir=args.out,
        basis=args.basis,
        dump_riccati=args.dump_riccati,
        dump_paths=args.dump_paths,
        figures=not args.no_figures,
    )


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _config_from_args(args)
        if cfg.command == SOLVE:
            return run_solve(cfg)
        if cfg.command == VERIFY:
            return run_verify(cfg)
        return run_sweep(cfg)
    except SlqError as exc:
        tag = _MODULE_TAGS.get(type(exc), "slq")
        print(f"[{tag}] {type(exc).__name__}: {exc}", file=sys.stderr)
        if type(exc) in _INVALID_INPUT:
            return 2
        if type(exc) in _INFEASIBLE:
            return 3
        if type(exc) in _NUMERICAL:
            return 4
        return 4


if __name__ == "__main__":
    sys.exit(main())
