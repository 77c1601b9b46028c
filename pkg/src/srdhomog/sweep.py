"""Batch driver for size / resolution / discretization studies.

A sweep walks the configured (S, R-step, adaptive-step, BC) grid: subvolume
extraction, resolution coarsening, meshing, adaptive coarsening,
homogenization and the optional error stage, emitting one CSV/JSON row per
case. Output bytes are a pure function of the configuration file, so
identical reruns diff clean.
"""

from __future__ import annotations

import configparser
import json
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field as dataclass_field

import numpy as np

from .coarsening import adaptive_coarsen, coarsen_resolution_majority, \
    coarsen_resolution_mixture
from .errors import ErrorReport, actual_error, estimated_error, relative_error_field
from .fem import MacroLoad, SolverError, SolverOptions, assemble, solve_micro, \
    voigt_dim
from .homog import HomogenizationResult, homogenize
from .mesh import Mesh, build_uniform_mesh, count_ndof
from .microstructure import PhaseFractions, PhaseTable, VoxelGrid, \
    centered_subvolume, generate_synthetic, load_voxel_grid, phase_fractions
from .naming import format_case_name

__all__ = ["ConfigError", "SweepConfig", "CaseRecord", "load_config",
           "run_sweep", "emit_tables"]

# S labels count in units of 0.1 mm, the native voxel pitch of the naming scheme
NAME_UNIT_MM = 0.1


class ConfigError(ValueError):
    """Invalid sweep configuration."""


@dataclass
class SweepConfig:
    # input
    input_kind: str  # "synthetic" | "raw-u8" | "csv-slices"
    extents: tuple[int, ...]
    spacing: float
    path: str | None = None
    synthetic: str = "blob"
    synthetic_p: float = 0.5
    synthetic_seed: int = 0
    synthetic_smooth: float = 2.0
    synthetic_axis: int = 0
    synthetic_period: int = 2
    # phases
    table: PhaseTable | None = None
    # sweep axes
    sizes: list[int] = dataclass_field(default_factory=list)
    resolution_steps: list[int] = dataclass_field(default_factory=lambda: [0])
    rule: str = "majority"
    subdivision: int = 1
    adaptive_steps: list[int] = dataclass_field(default_factory=lambda: [0])
    bcs: list[str] = dataclass_field(default_factory=lambda: ["pbc"])
    origin: str = "centered"
    # load and errors
    strain: list[float] | None = None
    error_stage: str = "off"  # off | estimate | actual
    ref_factor: int = 4
    # solver / execution
    solver_method: str = "auto"
    solver_rtol: float = 1e-10
    threads: int = 1
    dof_budget: int = 2_000_000
    # output
    out_dir: str = "out"
    write_vtk: bool = False
    include_seconds: bool = False

    def validate(self):
        if self.input_kind not in ("synthetic", "raw-u8", "csv-slices"):
            raise ConfigError(f"unknown input kind {self.input_kind!r}")
        if self.input_kind != "synthetic" and not self.path:
            raise ConfigError("file inputs need a path")
        if self.table is None:
            raise ConfigError("phase table missing")
        if not self.sizes:
            raise ConfigError("no sizes configured")
        if self.rule not in ("majority", "mixture"):
            raise ConfigError(f"unknown coarsening rule {self.rule!r}")
        if self.ref_factor not in (2, 4):
            raise ConfigError("ref_factor must be 2 or 4")
        if self.error_stage not in ("off", "estimate", "actual"):
            raise ConfigError(f"unknown error stage {self.error_stage!r}")
        if self.subdivision < 1:
            raise ConfigError("subdivision must be >= 1")
        for bc in self.bcs:
            if bc not in ("kubc", "pbc", "subc"):
                raise ConfigError(f"unknown bc {bc!r}")
        for size in self.sizes:
            for step in self.resolution_steps:
                if step < 0 or size % (1 << step) != 0:
                    raise ConfigError(
                        f"size {size} is not divisible by 2**{step} for the "
                        f"resolution axis"
                    )
        if any(n < 0 for n in self.adaptive_steps):
            raise ConfigError("adaptive steps must be >= 0")


def _parse_phase_section(section) -> PhaseTable:
    entries = []
    ratio = 1e-6
    for key, value in section.items():
        if key == "pore_stiffness_ratio":
            ratio = float(value)
            continue
        try:
            pid = int(key)
        except ValueError:
            raise ConfigError(f"unexpected key {key!r} in [phases]")
        tokens = value.split()
        if tokens == ["pore"]:
            entries.append((pid, None, None, "pore"))
        elif len(tokens) in (2, 3):
            entries.append((pid, float(tokens[0]), float(tokens[1])))
        else:
            raise ConfigError(f"phase {pid}: expected 'E nu [solid]' or 'pore'")
    if not entries:
        raise ConfigError("[phases] section is empty")
    try:
        return PhaseTable.from_entries(entries, ratio)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path) -> SweepConfig:
    """Read the INI-style sweep configuration."""
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    cp.read(path)

    def get(section, key, default=None):
        if cp.has_option(section, key):
            return cp.get(section, key)
        return default

    try:
        inp = cp["input"]
    except KeyError:
        raise ConfigError("missing [input] section")
    extents = tuple(int(t) for t in inp.get("extents", "").split())
    if len(extents) not in (2, 3):
        raise ConfigError("input extents must list 2 or 3 integers")

    cfg = SweepConfig(
        input_kind=inp.get("kind", "synthetic"),
        extents=extents,
        spacing=float(inp.get("spacing", "0.1")),
        path=inp.get("path", None),
        synthetic=inp.get("synthetic", "blob"),
        synthetic_p=float(inp.get("p", "0.5")),
        synthetic_seed=int(inp.get("seed", "0")),
        synthetic_smooth=float(inp.get("smooth", "2.0")),
        synthetic_axis=int(inp.get("axis", "0")),
        synthetic_period=int(inp.get("period", "2")),
        table=_parse_phase_section(cp["phases"]) if cp.has_section("phases") else None,
    )
    if cp.has_section("sweep"):
        sw = cp["sweep"]
        cfg.sizes = [int(t) for t in sw.get("sizes", "").split()]
        cfg.resolution_steps = [int(t) for t in sw.get("resolution_steps", "0").split()]
        cfg.rule = sw.get("rule", "majority")
        cfg.subdivision = int(sw.get("subdivision", "1"))
        cfg.adaptive_steps = [int(t) for t in sw.get("adaptive_steps", "0").split()]
        cfg.bcs = sw.get("bcs", "pbc").split()
        cfg.origin = sw.get("origin", "centered")
    if cp.has_section("load"):
        strain = get("load", "strain")
        if strain:
            cfg.strain = [float(t) for t in strain.split()]
    if cp.has_section("errors"):
        cfg.error_stage = get("errors", "stage", "off")
        cfg.ref_factor = int(get("errors", "ref_factor", "4"))
    if cp.has_section("solver"):
        cfg.solver_method = get("solver", "method", "auto")
        cfg.solver_rtol = float(get("solver", "rtol", "1e-10"))
        cfg.threads = int(get("solver", "threads", "1"))
        cfg.dof_budget = int(get("solver", "dof_budget", "2000000"))
    if cp.has_section("output"):
        cfg.out_dir = get("output", "dir", "out")
        cfg.write_vtk = cp.getboolean("output", "vtk", fallback=False)
        cfg.include_seconds = cp.getboolean("output", "seconds", fallback=False)
    cfg.validate()
    return cfg


def build_input_grid(cfg: SweepConfig) -> VoxelGrid:
    if cfg.input_kind == "synthetic":
        return generate_synthetic(
            cfg.synthetic, cfg.extents, cfg.spacing,
            p=cfg.synthetic_p, seed=cfg.synthetic_seed, smooth=cfg.synthetic_smooth,
            axis=cfg.synthetic_axis, period=cfg.synthetic_period,
        )
    return load_voxel_grid(cfg.path, cfg.input_kind, cfg.extents, cfg.spacing,
                           cfg.table)


@dataclass
class CaseRecord:
    index: int
    case_name: str
    bc: str
    status: str = "ok"
    homog: HomogenizationResult | None = None
    errors: ErrorReport | None = None
    fractions: PhaseFractions | None = None
    ndof: int | None = None
    deactivated_ndof: int | None = None
    reduction_factor: float | None = None
    seconds: float = 0.0


@dataclass
class _CaseSpec:
    index: int
    size: int
    rstep: int
    adap: int
    bc: str


def _default_strain(dim: int) -> np.ndarray:
    e = np.zeros(voigt_dim(dim))
    e[0] = 1.0
    return e


def run_sweep(cfg: SweepConfig):
    """Execute all configured cases; returns (records, written file paths)."""
    cfg.validate()
    base_grid = build_input_grid(cfg)
    base_grid.validate_phases(cfg.table)
    base_fractions = phase_fractions(base_grid)

    specs = []
    idx = 0
    for size in cfg.sizes:
        for rstep in cfg.resolution_steps:
            for adap in cfg.adaptive_steps:
                for bc in cfg.bcs:
                    specs.append(_CaseSpec(idx, size, rstep, adap, bc))
                    idx += 1

    groups: dict[tuple[int, int], list[_CaseSpec]] = {}
    for s in specs:
        groups.setdefault((s.size, s.rstep), []).append(s)

    records: dict[int, CaseRecord] = {}

    def run_group(key):
        size, rstep = key
        return _run_group(cfg, base_grid, base_fractions, size, rstep, groups[key])

    keys = sorted(groups)
    if cfg.threads > 1:
        with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
            for recs in pool.map(run_group, keys):
                for r in recs:
                    records[r.index] = r
    else:
        for key in keys:
            for r in run_group(key):
                records[r.index] = r

    ordered = [records[i] for i in sorted(records)]
    files = emit_tables(ordered, cfg)
    return ordered, files


def _case_label(cfg: SweepConfig, grid: VoxelGrid, size: int, rstep: int,
                adap: int) -> str:
    s_label = int(round(size * cfg.spacing / NAME_UNIT_MM))
    r_label = size >> rstep
    d_label = r_label * cfg.subdivision
    return format_case_name(s_label, r_label, d_label, adap)


def _run_group(cfg: SweepConfig, base_grid, base_fractions, size, rstep, specs):
    opts = SolverOptions(method=cfg.solver_method, rtol=cfg.solver_rtol)
    table = cfg.table
    recs = []

    try:
        if cfg.origin == "centered":
            sub = centered_subvolume(base_grid, size)
        else:
            origin = tuple(int(t) for t in cfg.origin.split())
            from .microstructure import extract_subvolume

            sub = extract_subvolume(base_grid, origin, (size,) * base_grid.dim)
        grid_r = sub
        for _ in range(rstep):
            if cfg.rule == "mixture":
                grid_r, table = coarsen_resolution_mixture(grid_r, table)
            else:
                grid_r = coarsen_resolution_majority(grid_r, base_fractions)
    except Exception as exc:
        for s in specs:
            recs.append(CaseRecord(s.index, _case_label(cfg, base_grid, size, rstep, s.adap),
                                   s.bc, status=f"input: {exc}"))
        return recs

    preserve = "pbc" in cfg.bcs
    dim = grid_r.dim
    strain = np.asarray(cfg.strain if cfg.strain is not None else _default_strain(dim))

    mesh_cache: dict[int, tuple[Mesh, float]] = {}
    homog_cache: dict[tuple[int, str], HomogenizationResult] = {}
    ref_cache: dict[str, tuple[Mesh, object]] = {}
    uniform_mesh = build_uniform_mesh(grid_r, table, cfg.subdivision)
    ndof_uniform, _ = count_ndof(uniform_mesh)

    def get_mesh(adap):
        if adap not in mesh_cache:
            if adap == 0:
                mesh_cache[0] = (uniform_mesh, 1.0)
            else:
                mesh, rep = adaptive_coarsen(uniform_mesh, adap,
                                             preserve_boundary=preserve)
                mesh_cache[adap] = (mesh, rep.ndof_after / ndof_uniform)
        return mesh_cache[adap]

    def get_homog(adap, bc, name):
        k = (adap, bc)
        if k not in homog_cache:
            mesh, _ = get_mesh(adap)
            homog_cache[k] = homogenize(mesh, table, bc, opts, case_name=name)
        return homog_cache[k]

    def get_reference(bc, load):
        if bc not in ref_cache:
            ref_mesh = build_uniform_mesh(grid_r, table, cfg.subdivision * cfg.ref_factor)
            ndof_ref, _ = count_ndof(ref_mesh)
            if ndof_ref > cfg.dof_budget:
                ref_cache[bc] = None
            else:
                ref_sys = assemble(ref_mesh)
                ref_sol = solve_micro(ref_sys, ref_mesh, load, opts)
                ref_cache[bc] = (ref_mesh, ref_sol)
        return ref_cache[bc]

    for s in specs:
        name = _case_label(cfg, base_grid, size, rstep, s.adap)
        t0 = time.perf_counter()
        rec = CaseRecord(s.index, name, s.bc)
        try:
            mesh, factor = get_mesh(s.adap)
            ndof, deact = count_ndof(mesh)
            rec.ndof, rec.deactivated_ndof, rec.reduction_factor = ndof, deact, factor
            if ndof > cfg.dof_budget:
                rec.status = "over-budget"
                recs.append(rec)
                continue
            res = get_homog(s.adap, s.bc, name)
            rec.homog = res
            rec.fractions = res.phase_fractions

            if cfg.error_stage != "off":
                if s.bc == "subc":
                    base = get_homog(0, "subc", name)
                    sigma = base.C.voigt @ strain
                    load = MacroLoad("stress", sigma, "subc")
                else:
                    load = MacroLoad("strain", strain, s.bc)
                system = assemble(mesh)
                sol = solve_micro(system, mesh, load, opts)
                report = estimated_error(mesh, sol)
                if cfg.error_stage == "actual":
                    ref = get_reference(s.bc, load)
                    if ref is None:
                        rec.status = "ok;ref-over-budget"
                    else:
                        report = actual_error(mesh, sol, ref[0], ref[1], report=report)
                relative_error_field(report, mesh, sol)
                rec.errors = report
                if cfg.write_vtk:
                    _write_case_vtk(cfg, name, s.bc, mesh, sol, report)
        except SolverError as exc:
            rec.status = f"numerical: {exc}"
        except Exception as exc:
            rec.status = f"failed: {exc}"
        rec.seconds = time.perf_counter() - t0
        recs.append(rec)
    return recs


def _write_case_vtk(cfg, name, bc, mesh, sol, report):
    from .vtkio import write_vtk

    os.makedirs(cfg.out_dir, exist_ok=True)
    cell = {}
    if report.per_element_relative:
        for key in ("estimated", "actual"):
            if key in report.per_element_relative:
                cell[f"rel_err_{key}_pct"] = report.per_element_relative[key]
    write_vtk(
        os.path.join(cfg.out_dir, f"{name}_{bc}.vtk"), mesh,
        cell_data=cell, point_data={"u": sol.displacements},
    )


# ---------------------------------------------------------------------------
# emission
# ---------------------------------------------------------------------------

def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return f"{x:.6g}"


def _upper_triangle_labels(nv: int):
    return [(i, j) for i in range(nv) for j in range(i, nv)]


def emit_tables(records: list[CaseRecord], cfg: SweepConfig):
    """Write sweep.csv and sweep.json; floats carry 6 significant digits."""
    if not records:
        raise ValueError("no case records to emit")
    os.makedirs(cfg.out_dir, exist_ok=True)

    nv = None
    pf_ids: set[int] = set()
    for r in records:
        if r.homog is not None and nv is None:
            nv = r.homog.C.voigt.shape[0]
        if r.fractions is not None:
            pf_ids.update(r.fractions.fractions)
    if nv is None:
        nv = voigt_dim(len(cfg.extents))
    pf_cols = sorted(pf_ids)
    tri = _upper_triangle_labels(nv)

    header = ["case", "bc", "status", "ndof", "deactivated_ndof", "reduction_factor"]
    header += [f"C{i+1}{j+1}" for i, j in tri]
    header += ["e_mic", "e_bar_mic", "theta"]
    header += [f"pf_{p}" for p in pf_cols]
    header += ["seconds"]

    lines = [",".join(header)]
    json_records = []
    for r in records:
        row = [r.case_name, r.bc, r.status, _fmt(r.ndof), _fmt(r.deactivated_ndof),
               _fmt(r.reduction_factor)]
        C = r.homog.C.voigt if r.homog is not None else None
        for i, j in tri:
            row.append(_fmt(C[i, j]) if C is not None else "")
        err = r.errors
        row.append(_fmt(err.e_mic) if err else "")
        row.append(_fmt(err.e_bar_mic) if err else "")
        row.append(_fmt(err.theta) if err and err.theta is not None else "")
        for p in pf_cols:
            row.append(_fmt(r.fractions[p]) if r.fractions is not None else "")
        row.append(_fmt(r.seconds) if cfg.include_seconds else "")
        lines.append(",".join(row))

        jrec = {
            "case": r.case_name,
            "bc": r.bc,
            "status": r.status,
            "ndof": r.ndof,
            "deactivated_ndof": r.deactivated_ndof,
            "reduction_factor": r.reduction_factor,
            "C": C.tolist() if C is not None else None,
            "e_mic": err.e_mic if err else None,
            "e_bar_mic": err.e_bar_mic if err else None,
            "theta": err.theta if err else None,
            "phase_fractions": {str(k): v for k, v in r.fractions.fractions.items()}
            if r.fractions is not None else None,
        }
        if cfg.include_seconds:
            jrec["seconds"] = r.seconds
        json_records.append(jrec)

    csv_path = os.path.join(cfg.out_dir, "sweep.csv")
    with open(csv_path, "w", newline="\n") as f:
        f.write("\n".join(lines) + "\n")
    json_path = os.path.join(cfg.out_dir, "sweep.json")
    with open(json_path, "w", newline="\n") as f:
        json.dump({"records": json_records}, f, indent=2, sort_keys=True)
        f.write("\n")
    return [csv_path, json_path]
