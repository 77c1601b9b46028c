"""Command-line driver.

Subcommands: info, coarsen, homogenize, errors, sweep, isotropy. Exit codes:
0 success, 1 configuration error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .coarsening import adaptive_coarsen, coarsen_resolution_majority, \
    coarsen_resolution_mixture
from .errors import actual_error, estimated_error, relative_error_field
from .fem import ElasticityTensor, MacroLoad, SolverError, SolverOptions, \
    assemble, solve_micro, voigt_dim
from .homog import homogenize, identify_isotropy_2d, identify_isotropy_3d
from .mesh import build_uniform_mesh, count_ndof
from .microstructure import centered_subvolume, phase_fractions
from .naming import parse_case_name
from .sweep import ConfigError, build_input_grid, load_config, run_sweep
from .vtkio import write_vtk


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse default exits 2; config errors are 1
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def _build_parser() -> _Parser:
    p = _Parser(prog="srdhomog",
                description="Voxel-image computational homogenization in the "
                            "size/resolution/discretization parameter space")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, case=False, bc=False, ref=False):
        sp.add_argument("--config", required=True, help="INI configuration file")
        sp.add_argument("--out", default=None, help="output directory override")
        sp.add_argument("--threads", type=int, default=None)
        sp.add_argument("--seed", type=int, default=None,
                        help="override the synthetic-input seed")
        if case:
            sp.add_argument("--case", required=True,
                            help="SRD case name, e.g. S64-RD32adap1")
        if bc:
            sp.add_argument("--bc", choices=("kubc", "pbc", "subc"), default="pbc")
        if ref:
            sp.add_argument("--ref-factor", type=int, choices=(2, 4), default=None)

    common(sub.add_parser("info", help="grid statistics and phase fractions"))
    sp = sub.add_parser("coarsen", help="apply R/D coarsening for one case, export VTK")
    common(sp, case=True)
    sp = sub.add_parser("homogenize", help="homogenized stiffness of one case")
    common(sp, case=True, bc=True)
    sp = sub.add_parser("errors", help="error estimation (and actual error) for one case")
    common(sp, case=True, bc=True, ref=True)
    sp = sub.add_parser("sweep", help="run the full configured study")
    common(sp)
    sp = sub.add_parser("isotropy", help="isotropy identification from a stored tensor")
    sp.add_argument("--tensor", required=True,
                    help="JSON file with a 'voigt' or 'C' matrix entry")
    sp.add_argument("--out", default=None)
    return p


def _load_cfg(args):
    cfg = load_config(args.config)
    if args.out is not None:
        cfg.out_dir = args.out
    if getattr(args, "threads", None) is not None:
        cfg.threads = args.threads
    if getattr(args, "seed", None) is not None:
        cfg.synthetic_seed = args.seed
    return cfg


def _case_pipeline(cfg, case):
    """Subvolume -> resolution coarsening -> mesh (+ adaptive) for one case."""
    grid = build_input_grid(cfg)
    base_fractions = phase_fractions(grid)
    spacing_units = cfg.spacing / 0.1
    size_vox = int(round(case.S / spacing_units))
    if size_vox > max(grid.extents):
        raise ConfigError(
            f"case size S{case.S} exceeds the input grid extent {grid.extents}")
    sub = centered_subvolume(grid, size_vox)

    if size_vox % case.R != 0 or (size_vox // case.R) & (size_vox // case.R - 1):
        raise ConfigError(
            f"resolution R{case.R} must divide S ({size_vox} voxels) by a power of two")
    table = cfg.table
    grid_r = sub
    while grid_r.extents[0] > case.R:
        if cfg.rule == "mixture":
            grid_r, table = coarsen_resolution_mixture(grid_r, table)
        else:
            grid_r = coarsen_resolution_majority(grid_r, base_fractions)

    if case.D % case.R != 0:
        raise ConfigError(f"D{case.D} must be an integer multiple of R{case.R}")
    k = case.D // case.R
    mesh = build_uniform_mesh(grid_r, table, k)
    report = None
    if case.adap:
        mesh, report = adaptive_coarsen(mesh, case.adap,
                                        preserve_boundary="pbc" in cfg.bcs)
    return grid_r, table, mesh, report


def _cmd_info(args) -> int:
    cfg = _load_cfg(args)
    grid = build_input_grid(cfg)
    fr = phase_fractions(grid)
    print(f"grid: {grid.extents} voxels, spacing {grid.spacing} mm "
          f"({grid.provenance})")
    print(f"domain: {tuple(round(s, 6) for s in grid.size_mm)} mm")
    for pid in sorted(fr.fractions):
        ph = cfg.table.phase(pid) if pid in cfg.table.ids() else None
        desc = f"E={ph.E} MPa, nu={ph.nu}" if ph and ph.kind == "solid" else "pore"
        print(f"  phase {pid}: fraction {fr[pid]:.6f} ({desc})")
    return 0


def _cmd_coarsen(args) -> int:
    cfg = _load_cfg(args)
    case = parse_case_name(args.case)
    grid_r, table, mesh, report = _case_pipeline(cfg, case)
    ndof, deact = count_ndof(mesh)
    print(f"{args.case}: {mesh.n_elements} elements, ndof {ndof}, "
          f"deactivated {deact}")
    if report is not None:
        print(f"  reduction factor {report.reduction_factor:.4f} "
              f"({report.ndof_before} -> {report.ndof_after})")
    os.makedirs(cfg.out_dir, exist_ok=True)
    out = os.path.join(cfg.out_dir, f"{args.case}.vtk")
    write_vtk(out, mesh)
    print(f"  mesh written to {out}")
    return 0


def _solver_options(cfg) -> SolverOptions:
    return SolverOptions(method=cfg.solver_method, rtol=cfg.solver_rtol)


def _cmd_homogenize(args) -> int:
    cfg = _load_cfg(args)
    case = parse_case_name(args.case)
    grid_r, table, mesh, _ = _case_pipeline(cfg, case)
    res = homogenize(mesh, table, args.bc, _solver_options(cfg), case_name=args.case)
    np.set_printoptions(precision=6, suppress=False)
    print(f"{args.case} [{args.bc}]: ndof {res.ndof}, asymmetry {res.asymmetry:.2e}, "
          f"worst Hill-Mandel residual {res.hill_mandel:.2e}")
    print(res.C.voigt)
    os.makedirs(cfg.out_dir, exist_ok=True)
    out = os.path.join(cfg.out_dir, f"{args.case}_{args.bc}.json")
    with open(out, "w") as f:
        json.dump({
            "case": args.case,
            "bc": args.bc,
            "C": res.C.voigt.tolist(),
            "ndof": res.ndof,
            "deactivated_ndof": res.deactivated_ndof,
            "asymmetry": res.asymmetry,
            "hill_mandel": res.hill_mandel,
            "phase_fractions": {str(k): v
                                for k, v in res.phase_fractions.fractions.items()},
        }, f, indent=2, sort_keys=True)
        f.write("\n")
    print(f"written to {out}")
    return 0


def _cmd_errors(args) -> int:
    cfg = _load_cfg(args)
    if args.ref_factor is not None:
        cfg.ref_factor = args.ref_factor
    case = parse_case_name(args.case)
    grid_r, table, mesh, _ = _case_pipeline(cfg, case)
    opts = _solver_options(cfg)

    dim = mesh.dim
    strain = np.asarray(cfg.strain) if cfg.strain is not None \
        else np.eye(voigt_dim(dim))[0]
    if args.bc == "subc":
        base = homogenize(mesh, table, "subc", opts)
        load = MacroLoad("stress", base.C.voigt @ strain, "subc")
    else:
        load = MacroLoad("strain", strain, args.bc)

    sol = solve_micro(assemble(mesh), mesh, load, opts)
    report = estimated_error(mesh, sol)

    k = case.D // case.R
    ref_mesh = build_uniform_mesh(grid_r, table, k * cfg.ref_factor)
    ndof_ref, _ = count_ndof(ref_mesh)
    if ndof_ref > cfg.dof_budget:
        print(f"reference mesh over budget ({ndof_ref} > {cfg.dof_budget}); "
              f"estimated error only")
    else:
        ref_sol = solve_micro(assemble(ref_mesh), ref_mesh, load, opts)
        report = actual_error(mesh, sol, ref_mesh, ref_sol, report=report)
    relative_error_field(report, mesh, sol)

    print(f"{args.case} [{args.bc}]: |u|_A = {report.solution_norm:.6g}")
    print(f"  estimated error e_bar = {report.e_bar_mic:.6g}")
    if report.e_mic is not None:
        print(f"  actual error (ref h/{cfg.ref_factor}) e = {report.e_mic:.6g}")
        print(f"  effectivity theta = {report.theta:.4f}")
    os.makedirs(cfg.out_dir, exist_ok=True)
    out = os.path.join(cfg.out_dir, f"{args.case}_{args.bc}_errors.json")
    with open(out, "w") as f:
        json.dump({
            "case": args.case, "bc": args.bc,
            "solution_norm": report.solution_norm,
            "e_bar_mic": report.e_bar_mic,
            "e_mic": report.e_mic,
            "theta": report.theta,
        }, f, indent=2, sort_keys=True)
        f.write("\n")
    out_vtk = os.path.join(cfg.out_dir, f"{args.case}_{args.bc}_errors.vtk")
    cell = {k: v for k, v in report.per_element_relative.items() if k != "vanishing"}
    write_vtk(out_vtk, mesh, cell_data=cell, point_data={"u": sol.displacements})
    print(f"written to {out} and {out_vtk}")
    return 0


def _cmd_sweep(args) -> int:
    cfg = _load_cfg(args)
    records, files = run_sweep(cfg)
    n_ok = sum(1 for r in records if r.status.startswith("ok"))
    print(f"sweep finished: {n_ok}/{len(records)} cases ok")
    for r in records:
        if not r.status.startswith("ok"):
            print(f"  {r.case_name} [{r.bc}]: {r.status}")
    for f in files:
        print(f"written {f}")
    failed = [r for r in records if r.status.startswith(("numerical", "failed"))]
    return 2 if failed else 0


def _cmd_isotropy(args) -> int:
    with open(args.tensor) as f:
        payload = json.load(f)
    matrix = payload.get("voigt", payload.get("C"))
    if matrix is None:
        raise ConfigError(f"{args.tensor} carries neither 'voigt' nor 'C'")
    C = ElasticityTensor(np.asarray(matrix, dtype=np.float64))
    report = identify_isotropy_2d(C) if C.dim == 2 else identify_isotropy_3d(C)
    print(f"identified E = {report.E_ident:.6g} MPa, nu = {report.nu_ident:.6g}, "
          f"G = {report.G_ident:.6g} MPa"
          + ("" if report.physical else "  [non-physical nu]"))
    for name, dev in report.deviations.items():
        print(f"  {name}: {100.0 * dev:.4f} %")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        out = os.path.join(args.out, "isotropy.json")
        with open(out, "w") as f:
            json.dump({
                "E": report.E_ident, "nu": report.nu_ident, "G": report.G_ident,
                "physical": report.physical, "deviations": report.deviations,
            }, f, indent=2, sort_keys=True)
            f.write("\n")
        print(f"written to {out}")
    return 0


_COMMANDS = {
    "info": _cmd_info,
    "coarsen": _cmd_coarsen,
    "homogenize": _cmd_homogenize,
    "errors": _cmd_errors,
    "sweep": _cmd_sweep,
    "isotropy": _cmd_isotropy,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 1
    except (FileNotFoundError, ValueError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 1
    except SolverError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
