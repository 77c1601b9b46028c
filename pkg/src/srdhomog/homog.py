"""Homogenized elasticity tensors, BC-family comparison, isotropy checks.

The homogenized stiffness is built column by column from unit macro load
states (engineering-shear convention). Kinematic and periodic BCs prescribe
unit mean strains and average the stress; the static BC prescribes unit
mean stresses, averages the strain into a compliance, and inverts.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dataclass_field

import numpy as np

from .fem import (
    ElasticityTensor,
    MacroLoad,
    SolverOptions,
    assemble,
    hill_mandel_residual,
    phase_stiffness,
    solve_micro,
    unit_strain_states,
    voigt_dim,
)
from .mesh import Mesh, build_uniform_mesh, count_ndof
from .microstructure import PhaseFractions, PhaseTable, VoxelGrid, phase_fractions

__all__ = [
    "HomogenizationResult",
    "IsotropyReport",
    "BcComparison",
    "homogenize",
    "bc_comparison",
    "identify_isotropy_2d",
    "identify_isotropy_3d",
    "voigt_reuss_bounds",
    "TRACKED_COMPONENTS",
]

# Voigt component labels tracked in BC comparisons, 1-based (i, j)
TRACKED_COMPONENTS = {2: ((1, 1), (2, 2), (3, 3), (1, 2)), 3: ((1, 1), (4, 4), (1, 2))}

ASYMMETRY_WARN = 1e-6


@dataclass
class HomogenizationResult:
    C: ElasticityTensor
    bc: str
    case_name: str
    phase_fractions: PhaseFractions
    ndof: int
    deactivated_ndof: int
    asymmetry: float  # relative asymmetry of the raw tensor before symmetrization
    hill_mandel: float  # worst relative Hill-Mandel residual over the load states
    solver_info: list = dataclass_field(default_factory=list)


@dataclass
class IsotropyReport:
    E_ident: float  # MPa
    nu_ident: float
    G_ident: float  # MPa
    deviations: dict[str, float]
    physical: bool  # identified nu inside (-1, 0.5)


@dataclass
class BcComparison:
    reference: tuple[str, int]  # (bc, size)
    components: tuple[tuple[int, int], ...]
    # (size, bc) -> {"Cij": percentage deviation from the reference case}
    deviations: dict[tuple[int, str], dict[str, float]]
    tensors: dict[tuple[int, str], ElasticityTensor]


def _mesh_fractions(mesh: Mesh) -> PhaseFractions:
    # count finest lattice cells per phase: exact integer ratios
    cell_phase = mesh.phase[mesh.cell_elem]
    ids, counts = np.unique(cell_phase, return_counts=True)
    total = cell_phase.size
    return PhaseFractions({int(i): int(c) / total for i, c in zip(ids, counts)})


def homogenize(target, table: PhaseTable, bc: str,
               options: SolverOptions | None = None,
               case_name: str = "") -> HomogenizationResult:
    """Homogenized stiffness of a grid or mesh under one BC family."""
    if isinstance(target, VoxelGrid):
        mesh = build_uniform_mesh(target, table, 1)
        fractions = phase_fractions(target)
    elif isinstance(target, Mesh):
        mesh = target
        fractions = _mesh_fractions(mesh)
    else:
        raise TypeError("homogenize expects a VoxelGrid or Mesh")

    dim = mesh.dim
    nv = voigt_dim(dim)
    system = assemble(mesh)
    states = unit_strain_states(dim)

    columns = np.empty((nv, nv))
    hm_worst = 0.0
    infos = []
    for k in range(nv):
        kind = "strain" if bc in ("kubc", "pbc") else "stress"
        load = MacroLoad(kind, states[k], bc)
        try:
            sol = solve_micro(system, mesh, load, options)
        except Exception as exc:
            raise type(exc)(f"load state {k}: {exc}") from exc
        columns[:, k] = sol.mean_stress() if kind == "strain" else sol.mean_strain()
        hm = hill_mandel_residual(sol, mesh)
        hm_worst = max(hm_worst, hm.value)
        infos.append(sol.info)

    norm = np.abs(columns).max()
    asymmetry = float(np.abs(columns - columns.T).max() / norm) if norm > 0 else 0.0
    sym = 0.5 * (columns + columns.T)
    if bc == "subc":
        C = np.linalg.inv(sym)
        C = 0.5 * (C + C.T)
    else:
        C = sym

    ndof, deact = count_ndof(mesh)
    return HomogenizationResult(
        C=ElasticityTensor(C),
        bc=bc,
        case_name=case_name or mesh.provenance,
        phase_fractions=fractions,
        ndof=ndof,
        deactivated_ndof=deact,
        asymmetry=asymmetry,
        hill_mandel=hm_worst,
        solver_info=infos,
    )


def bc_comparison(grid: VoxelGrid, table: PhaseTable, sizes, reference,
                  bcs=("kubc", "pbc", "subc"),
                  options: SolverOptions | None = None,
                  origin="centered") -> BcComparison:
    """Percentage deviations of tracked stiffness components per size and BC.

    Subvolumes are centered by default; ``origin`` may also be a voxel index
    tuple anchoring every subvolume.
    """
    from .microstructure import centered_subvolume, extract_subvolume

    ref_bc, ref_size = reference
    sizes = [int(s) for s in sizes]
    if ref_size not in sizes:
        sizes = sizes + [ref_size]
    if ref_bc not in bcs:
        raise ValueError(f"reference bc {ref_bc!r} not among computed bcs {bcs}")

    comps = TRACKED_COMPONENTS[grid.dim]
    tensors = {}
    for size in sorted(set(sizes)):
        if origin == "centered":
            sub = centered_subvolume(grid, size)
        else:
            sub = extract_subvolume(grid, origin, (size,) * grid.dim)
        for bc in bcs:
            res = homogenize(sub, table, bc, options, case_name=f"S{size}")
            tensors[(size, bc)] = res.C

    ref_C = tensors[(ref_size, ref_bc)].voigt
    deviations = {}
    for key, tensor in tensors.items():
        devs = {}
        for i, j in comps:
            ref_val = ref_C[i - 1, j - 1]
            devs[f"C{i}{j}"] = float(
                100.0 * (tensor.voigt[i - 1, j - 1] - ref_val) / ref_val
            )
        deviations[key] = devs
    return BcComparison(
        reference=(ref_bc, ref_size),
        components=comps,
        deviations=deviations,
        tensors=tensors,
    )


# ---------------------------------------------------------------------------
# isotropy identification
# ---------------------------------------------------------------------------

def identify_isotropy_2d(C: ElasticityTensor) -> IsotropyReport:
    """Identify (E, nu) from the plane-strain compliance; check isotropy.

    The compliance entries S11 = (1-nu^2)/E and S12 = -nu(1+nu)/E determine
    the constants; the remaining coefficients quantify the deviation from
    isotropy: C11 vs C22, C33 vs G, and the coupling terms C13, C23.
    """
    if C.dim != 2:
        raise ValueError("identify_isotropy_2d expects a 3x3 plane-strain tensor")
    S = C.inverse().voigt
    r = S[0, 1] / S[0, 0]  # = -nu/(1-nu)
    nu = r / (r - 1.0)
    E = (1.0 - nu * nu) / S[0, 0]
    G = E / (2.0 * (1.0 + nu))
    v = C.voigt
    deviations = {
        "C11_vs_C22": abs(v[0, 0] - v[1, 1]) / v[0, 0],
        "C33_vs_G": abs(v[2, 2] - G) / G,
        "C13": abs(v[0, 2]) / v[0, 0],
        "C23": abs(v[1, 2]) / v[0, 0],
    }
    return IsotropyReport(
        E_ident=float(E), nu_ident=float(nu), G_ident=float(G),
        deviations={k: float(x) for k, x in deviations.items()},
        physical=bool(-1.0 < nu < 0.5),
    )


def identify_isotropy_3d(C: ElasticityTensor) -> IsotropyReport:
    """Identify (E, nu, G) from the 3d compliance; eight isotropy checks."""
    if C.dim != 3:
        raise ValueError("identify_isotropy_3d expects a 6x6 tensor")
    S = C.inverse().voigt
    E = 1.0 / S[0, 0]
    nu = -S[0, 1] * E
    G = E / (2.0 * (1.0 + nu))
    v = C.voigt
    deviations = {
        "C11_vs_C22": abs(v[0, 0] - v[1, 1]) / v[0, 0],
        "C11_vs_C33": abs(v[0, 0] - v[2, 2]) / v[0, 0],
        "C44_vs_G": abs(v[3, 3] - G) / G,
        "C55_vs_G": abs(v[4, 4] - G) / G,
        "C66_vs_G": abs(v[5, 5] - G) / G,
        "C14": abs(v[0, 3]) / v[0, 0],
        "C24": abs(v[1, 3]) / v[0, 0],
        "C34": abs(v[2, 3]) / v[0, 0],
    }
    return IsotropyReport(
        E_ident=float(E), nu_ident=float(nu), G_ident=float(G),
        deviations={k: float(x) for k, x in deviations.items()},
        physical=bool(-1.0 < nu < 0.5),
    )


def voigt_reuss_bounds(table: PhaseTable, fractions: PhaseFractions, dim: int):
    """(Voigt arithmetic bound, Reuss harmonic bound) as Voigt matrices."""
    nv = voigt_dim(dim)
    Cv = np.zeros((nv, nv))
    Sr = np.zeros((nv, nv))
    for pid, f in fractions.fractions.items():
        E, nu = table.effective(pid)
        Cp = phase_stiffness(E, nu, dim).voigt
        Cv += f * Cp
        Sr += f * np.linalg.inv(Cp)
    return ElasticityTensor(Cv), ElasticityTensor(np.linalg.inv(Sr))
