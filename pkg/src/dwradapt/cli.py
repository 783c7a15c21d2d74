"""Batch driver: configuration, experiment execution, file emission.

``dwr-adapt run --config cfg.json [overrides]`` executes one adaptation
run (variational, eigenvalue or control pipeline, chosen by the problem)
and writes ``table.csv`` plus optional legacy-VTK snapshots per level;
``dwr-adapt list`` prints the problem registry.

Exit codes: 0 tolerance reached, 2 dof budget reached, 1 solver failure,
64 usage errors.  Runs are fully deterministic; the wall-time column is
the single measured quantity and can be zeroed via ``timing=false`` for
byte-identical repeat runs.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import dwr, eigen, fem, optctrl, problems
from .errors import SolverError, UsageError
from .mesh import refine_with_closure

EXIT_OK = 0
EXIT_SOLVER = 1
EXIT_BUDGET = 2
EXIT_USAGE = 64


@dataclass
class RunConfig:
    problem: str
    strategy: str = "error_balancing"
    theta: float = 1.0
    fraction: float = 0.3
    tol: float = 1e-4
    max_dofs: int = 20000
    max_levels: int = 40
    output_dir: str = "."
    emit_vtk: bool = False
    timing: bool = True
    reference: bool = True

    @classmethod
    def from_json(cls, path):
        data = json.loads(Path(path).read_text())
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        if "problem" not in data:
            raise UsageError("config must name a problem")
        return cls(**data)

    def validate(self):
        if self.tol <= 0:
            raise UsageError("tol must be positive")
        if self.max_dofs < 1:
            raise UsageError("max_dofs must be positive")
        problems.get_problem(self.problem)  # raises with the registry listing

    def marking(self):
        kinds = {
            "error_balancing": lambda: dwr.MarkingStrategy.error_balancing(self.theta),
            "fixed_fraction": lambda: dwr.MarkingStrategy.fixed_fraction(self.fraction),
            "uniform": dwr.MarkingStrategy.uniform,
            "adhoc_gradient_jump": dwr.MarkingStrategy.adhoc_gradient_jump,
        }
        if self.strategy not in kinds:
            raise UsageError(f"unknown strategy {self.strategy!r}; "
                             f"choose from {sorted(kinds)}")
        return kinds[self.strategy]()


CSV_HEADER = "level,n_dofs,n_cells,j_h,eta,signed_estimate,i_eff,wall_time_s"


def write_table_csv(path, table, timing=True):
    lines = [CSV_HEADER]
    for r in table.rows:
        i_eff = "" if r.i_eff is None else "%.10e" % r.i_eff
        wall = r.wall_time_s if timing else 0.0
        lines.append(",".join(["%d" % r.level, "%d" % r.n_dofs,
                               "%d" % r.n_cells, "%.10e" % r.j_h,
                               "%.10e" % r.eta, "%.10e" % r.signed_estimate,
                               i_eff, "%.10e" % wall]))
    Path(path).write_text("\n".join(lines) + "\n")


def write_vtk(path, mesh, point_fields=None, eta_cells=None):
    """Legacy ASCII VTK unstructured grid of the active cells.

    ``point_fields`` maps names to Q1 functions (or per-vertex arrays);
    ``eta_cells`` adds a per-cell scalar named eta_k.  Output is
    byte-reproducible.
    """
    point_fields = point_fields or {}
    used = sorted({v for cid in mesh.active_ids
                   for v in mesh.cells[cid].vertex_ids})
    renum = {v: i for i, v in enumerate(used)}

    def fmt(x):
        return "%.16e" % x

    lines = ["# vtk DataFile Version 3.0", "dwradapt mesh", "ASCII",
             "DATASET UNSTRUCTURED_GRID", f"POINTS {len(used)} double"]
    for v in used:
        x, y = mesh.coords(v)
        lines.append(f"{fmt(x)} {fmt(y)} {fmt(0.0)}")
    n = len(mesh.active_ids)
    lines.append(f"CELLS {n} {5 * n}")
    for cid in mesh.active_ids:
        vs = mesh.cells[cid].vertex_ids
        lines.append("4 " + " ".join(str(renum[v]) for v in vs))
    lines.append(f"CELL_TYPES {n}")
    lines.extend(["9"] * n)

    if point_fields:
        lines.append(f"POINT_DATA {len(used)}")
        for name in sorted(point_fields):
            fh = point_fields[name]
            if isinstance(fh, fem.FeFunction):
                if fh.space.mesh is not mesh:
                    raise UsageError(f"field {name!r} lives on another mesh")
                if fh.space.degree != 1 or not fh.space.continuous:
                    raise UsageError("vtk point data expects Q1 fields")
                vals = [fh.coefficients[fh.space.entity_dofs[("v", v)]]
                        for v in used]
            else:
                arr = np.asarray(fh, dtype=float)
                if arr.shape != (len(used),):
                    raise UsageError(f"field {name!r} has wrong length")
                vals = arr
            lines.append(f"SCALARS {name} double 1")
            lines.append("LOOKUP_TABLE default")
            lines.extend(fmt(v) for v in vals)
    if eta_cells is not None:
        if len(eta_cells) != n:
            raise UsageError("eta_cells length must match the active cells")
        lines.append(f"CELL_DATA {n}")
        lines.append("SCALARS eta_k double 1")
        lines.append("LOOKUP_TABLE default")
        lines.extend(fmt(v) for v in eta_cells)
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# pipelines


def _run_variational(problem, config, strategy, reference, outdir):
    table = dwr.adapt_loop(problem, tol=config.tol, strategy=strategy,
                           max_dofs=config.max_dofs, reference=reference,
                           max_levels=config.max_levels)
    if config.emit_vtk:
        _revisit_vtk_variational(problem, config, strategy, outdir)
    return table


def _revisit_vtk_variational(problem, config, strategy, outdir):
    # re-run the level meshes to dump fields; keeps adapt_loop itself lean
    mesh = problem.base_mesh()
    for level in range(config.max_levels):
        space = fem.build_space(mesh, 1)
        bound = problem.goal.bind(mesh)
        u_h, rep = dwr.solve_primal(problem, space)
        z_h, _ = dwr.solve_dual(problem, bound, space, u_h=u_h)
        est = dwr.localize_indicators(problem, bound, u_h, z_h,
                                      fem.patch_recover(z_h),
                                      fem.patch_recover(u_h))
        write_vtk(outdir / f"level_{level}.vtk", mesh,
                  {"u_h": u_h, "z_h": z_h}, est.eta_cells)
        if est.eta_global <= config.tol or space.dof_count > config.max_dofs:
            break
        marked = dwr.mark_cells(est, strategy)
        if not marked:
            break
        mesh = refine_with_closure(mesh, marked)


def _run_eigen(problem, config, strategy, reference, outdir):
    mesh = problem.base_mesh()
    table = dwr.ConvergenceTable(problem=problem.name)
    prev = None
    for level in range(config.max_levels):
        t0 = time.perf_counter()
        try:
            sol = eigen.solve_eigen_pair(problem, mesh, start_from=prev)
        except SolverError:
            table.status = "failed"
            break
        prev = sol
        rec_u = fem.patch_recover(sol.u_h)
        rec_z = fem.patch_recover(sol.z_h)
        est = eigen.eigen_error_estimate(problem, sol, rec_u, rec_z)
        n_dofs = sol.u_h.space.dof_count
        i_eff = None
        if reference is not None and est.eta_global > 0:
            i_eff = dwr.effectivity_index(reference, sol.lambda_h,
                                          est.eta_global)
        table.rows.append(dwr.TableRow(level, n_dofs,
                                       len(sol.u_h.space.active_ids),
                                       sol.lambda_h, est.eta_global,
                                       est.signed_estimate, i_eff,
                                       time.perf_counter() - t0))
        if config.emit_vtk:
            write_vtk(outdir / f"level_{level}.vtk", mesh,
                      {"u_h": sol.u_h, "z_h": sol.z_h}, est.eta_cells)
        if est.eta_global <= config.tol:
            table.status = "tol_reached"
            break
        if n_dofs > config.max_dofs:
            table.status = "max_dofs"
            break
        marked = dwr.mark_cells(est, strategy)
        if not marked:
            marked = {sol.u_h.space.active_ids[int(np.argmax(est.eta_cells))]}
        mesh = refine_with_closure(mesh, marked)
    return table


def _run_control(problem, config, strategy, reference, outdir):
    cp = problem.control
    mesh = problem.base_mesh()
    table = dwr.ConvergenceTable(problem=problem.name)
    for level in range(config.max_levels):
        t0 = time.perf_counter()
        try:
            sol = optctrl.solve_kkt(cp, mesh)
        except SolverError:
            table.status = "failed"
            break
        rec_u = fem.patch_recover(sol.u_h)
        rec_z = fem.patch_recover(sol.z_h)
        rec_q = optctrl.recover_control(sol.q_h)
        est = optctrl.control_error_estimate(cp, sol, rec_u, rec_q, rec_z)
        n_dofs = sol.u_h.space.dof_count
        i_eff = None
        if reference is not None and est.eta_global > 0:
            i_eff = dwr.effectivity_index(reference, sol.cost, est.eta_global)
        table.rows.append(dwr.TableRow(level, n_dofs,
                                       len(sol.u_h.space.active_ids),
                                       sol.cost, est.eta_global,
                                       est.signed_estimate, i_eff,
                                       time.perf_counter() - t0))
        if config.emit_vtk:
            write_vtk(outdir / f"level_{level}.vtk", mesh,
                      {"u_h": sol.u_h, "z_h": sol.z_h}, est.eta_cells)
        if est.eta_global <= config.tol:
            table.status = "tol_reached"
            break
        if n_dofs > config.max_dofs:
            table.status = "max_dofs"
            break
        marked = dwr.mark_cells(est, strategy)
        if not marked:
            marked = {sol.u_h.space.active_ids[int(np.argmax(est.eta_cells))]}
        mesh = refine_with_closure(mesh, marked)
    return table


def run(config):
    """Execute one configured run; returns the process exit status."""
    config.validate()
    problem = problems.get_problem(config.problem)
    strategy = config.marking()
    outdir = Path(config.output_dir)
    outdir.mkdir(parents=True, exist_ok=True)
    reference = problems.reference_value(problem) if config.reference else None

    runner = {"variational": _run_variational, "eigen": _run_eigen,
              "control": _run_control}[problem.kind]
    table = runner(problem, config, strategy, reference, outdir)
    write_table_csv(outdir / "table.csv", table, timing=config.timing)
    if table.status == "failed":
        return EXIT_SOLVER
    if table.status in ("max_dofs", "max_levels"):
        return EXIT_BUDGET
    return EXIT_OK


# ---------------------------------------------------------------------------
# command line


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="dwr-adapt",
        description="goal-oriented adaptive FEM driver (dual-weighted residuals)")
    sub = parser.add_subparsers(dest="command", required=True)
    runp = sub.add_parser("run", help="execute a configured adaptation run")
    runp.add_argument("--config", help="JSON run configuration")
    runp.add_argument("--problem", help="problem name (overrides config)")
    runp.add_argument("--tol", type=float, help="target estimator value")
    runp.add_argument("--strategy", help="marking strategy")
    runp.add_argument("--theta", type=float, help="error-balancing factor")
    runp.add_argument("--max-dofs", type=int, dest="max_dofs")
    runp.add_argument("--out", dest="output_dir", help="output directory")
    runp.add_argument("--vtk", action="store_true", dest="emit_vtk",
                      default=None, help="write level_<k>.vtk files")
    runp.add_argument("--no-timing", action="store_true",
                      help="zero the wall-time column (byte-reproducible csv)")
    runp.add_argument("--no-reference", action="store_true",
                      help="skip the reference value (blank i_eff column)")
    sub.add_parser("list", help="print the problem registry")
    return parser


def main(argv=None):
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else 0

    if args.command == "list":
        for p in problems.registry():
            print(f"{p.name:6s} {p.kind:12s} {p.title}")
        return EXIT_OK

    try:
        if args.config:
            config = RunConfig.from_json(args.config)
        else:
            if not args.problem:
                raise UsageError("either --config or --problem is required")
            config = RunConfig(problem=args.problem)
        for name in ("problem", "tol", "strategy", "theta", "max_dofs",
                     "output_dir", "emit_vtk"):
            value = getattr(args, name, None)
            if value is not None:
                setattr(config, name, value)
        if args.no_timing:
            config.timing = False
        if args.no_reference:
            config.reference = False
        return run(config)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SolverError as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
