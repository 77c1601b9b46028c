"""Energy-norm error computation and reconstruction-based estimation.

The estimator compares the raw quadrature-point fields against improved
nodal fields obtained by extrapolating Gauss values to element corners and
averaging over adjacent elements, with a per-phase distinction at material
interfaces so stress jumps are not smeared. The actual error integrates the
difference against a nested reference solution on a uniformly subdivided
mesh. The effectivity index is the ratio of both.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .fem import (
    MicroSolution,
    _resolve_hanging,
    _unit_voigt,
    element_energies,
    gauss_points,
    shape_functions,
    shape_gradients,
    voigt_dim,
)
from .mesh import Mesh

__all__ = [
    "RecoveredField",
    "ErrorReport",
    "recover_stresses",
    "estimated_error",
    "actual_error",
    "effectivity",
    "relative_error_field",
]

_CHUNK = 100_000  # reference elements per embedding chunk


@dataclass
class RecoveredField:
    """Per-node, per-phase improved stresses and strains.

    Rows are (node, phase) pairs; ``corner_slot[e, c]`` indexes the row
    holding element e's own-phase entry at its corner c.
    """

    node_ids: np.ndarray  # (nk,)
    phase_ids: np.ndarray  # (nk,)
    sigma: np.ndarray  # (nk, nvoigt)
    eps: np.ndarray  # (nk, nvoigt)
    corner_slot: np.ndarray  # (nelem, 2**dim)

    def entries(self, node: int) -> dict[int, tuple[np.ndarray, np.ndarray]]:
        sel = np.flatnonzero(self.node_ids == node)
        return {int(self.phase_ids[i]): (self.sigma[i], self.eps[i]) for i in sel}


@dataclass
class ErrorReport:
    solution_norm: float
    e_mic: float | None = None  # actual energy-norm error
    e_bar_mic: float | None = None  # estimated energy-norm error
    theta: float | None = None  # effectivity index
    per_element_actual: np.ndarray | None = None  # element-wise error norms
    per_element_estimated: np.ndarray | None = None
    per_element_relative: dict[str, np.ndarray] | None = None

    def update_theta(self):
        if self.e_mic is not None and self.e_bar_mic is not None and self.e_mic > 0:
            self.theta = self.e_bar_mic / self.e_mic


def _extrapolation_matrix(dim: int) -> np.ndarray:
    """Gauss-point values -> corner values, exact for multilinear fields."""
    qp = gauss_points(dim)
    corners = 2.0 * np.array(np.meshgrid(*[[0, 1]] * dim, indexing="ij")).reshape(dim, -1).T - 1.0
    # monomial basis over the Gauss lattice
    from itertools import product

    powers = list(product((0, 1), repeat=dim))
    V_qp = np.stack([np.prod(qp**np.array(p), axis=1) for p in powers], axis=1)
    from .mesh import CORNER_OFFSETS

    xi_c = 2.0 * CORNER_OFFSETS[dim].astype(np.float64) - 1.0
    V_c = np.stack([np.prod(xi_c**np.array(p), axis=1) for p in powers], axis=1)
    return V_c @ np.linalg.inv(V_qp)


def recover_stresses(mesh: Mesh, sol: MicroSolution) -> RecoveredField:
    """Phase-distinguished improved nodal fields.

    Quadrature stresses/strains are extrapolated to the element corners and
    averaged per (node, phase) over the adjacent elements of that phase.
    Hanging nodes carry no independent average; their entries are
    interpolated from their masters.
    """
    dim = mesh.dim
    nnod = 2**dim
    ne = mesh.n_elements
    nv = voigt_dim(dim)

    Extr = _extrapolation_matrix(dim)  # (nnod, nq)
    corner_sig = np.einsum("cq,eqv->ecv", Extr, sol.qp_stress)
    corner_eps = np.einsum("cq,eqv->ecv", Extr, sol.qp_strain)

    phase_list, pindex = np.unique(mesh.phase, return_inverse=True)
    P = phase_list.size
    keys = (mesh.conn * P + pindex[:, None]).ravel()  # (ne*nnod,)
    uniq_keys, slots = np.unique(keys, return_inverse=True)
    nk = uniq_keys.size

    sig_sum = np.zeros((nk, nv))
    eps_sum = np.zeros((nk, nv))
    kernels.scatter_add_pairs(
        np.ascontiguousarray(corner_sig.reshape(-1, nv)),
        np.ascontiguousarray(slots.astype(np.int64)), sig_sum)
    kernels.scatter_add_pairs(
        np.ascontiguousarray(corner_eps.reshape(-1, nv)),
        np.ascontiguousarray(slots.astype(np.int64)), eps_sum)
    counts = np.bincount(slots, minlength=nk).astype(np.float64)

    sigma = sig_sum / counts[:, None]
    eps = eps_sum / counts[:, None]
    node_ids = uniq_keys // P
    phase_ids = phase_list[uniq_keys % P]

    # hanging nodes: replace averages by master interpolation
    if mesh.hanging:
        resolved = _resolve_hanging(mesh)
        row_of = {}
        for i, (n, p) in enumerate(zip(node_ids, phase_ids)):
            row_of[(int(n), int(p))] = i
        master_rows = {}  # node -> fallback mean over its phase entries
        for s, masters in sorted(resolved.items()):
            srows = np.flatnonzero(node_ids == s)
            for i in srows:
                p = int(phase_ids[i])
                acc_s = np.zeros(nv)
                acc_e = np.zeros(nv)
                for m, w in sorted(masters.items()):
                    row = row_of.get((m, p))
                    if row is not None:
                        acc_s += w * sigma[row]
                        acc_e += w * eps[row]
                    else:
                        if m not in master_rows:
                            mrows = np.flatnonzero(node_ids == m)
                            master_rows[m] = (
                                sigma[mrows].mean(axis=0),
                                eps[mrows].mean(axis=0),
                            )
                        ms, me = master_rows[m]
                        acc_s += w * ms
                        acc_e += w * me
                sigma[i] = acc_s
                eps[i] = acc_e

    own_keys = mesh.conn * P + pindex[:, None]
    corner_slot = np.searchsorted(uniq_keys, own_keys)
    return RecoveredField(node_ids, phase_ids, sigma, eps, corner_slot)


def estimated_error(mesh: Mesh, sol: MicroSolution,
                    recovered: RecoveredField | None = None,
                    report: ErrorReport | None = None) -> ErrorReport:
    """Reconstruction-based error: integrate (sig*-sig_h):(eps*-eps_h).

    The improved fields are interpolated from the element's own-phase nodal
    entries, never across phases.
    """
    if recovered is None:
        recovered = recover_stresses(mesh, sol)
    dim = mesh.dim
    qp = gauss_points(dim)
    N = shape_functions(dim, qp)  # (nq, nnod)

    sig_star = np.einsum("qc,ecv->eqv", N, recovered.sigma[recovered.corner_slot])
    eps_star = np.einsum("qc,ecv->eqv", N, recovered.eps[recovered.corner_slot])
    dsig = sig_star - sol.qp_stress
    deps = eps_star - sol.qp_strain

    per_elem_sq = np.einsum("eqv,eqv,eq->e", dsig, deps, sol.qp_weights)
    per_elem_sq = np.maximum(per_elem_sq, 0.0)
    e_bar = float(np.sqrt(per_elem_sq.sum()))

    if report is None:
        from .fem import solution_energy_norm

        report = ErrorReport(solution_norm=solution_energy_norm(sol))
    report.e_bar_mic = e_bar
    report.per_element_estimated = np.sqrt(per_elem_sq)
    report.update_theta()
    return report


def _check_nested(mesh: Mesh, ref_mesh: Mesh) -> int:
    if ref_mesh.dim != mesh.dim:
        raise ValueError("reference mesh dimensionality differs")
    ratios = [r / m for r, m in zip(ref_mesh.lattice, mesh.lattice)]
    factor = ratios[0]
    if any(abs(r - factor) > 0 for r in ratios) or factor != int(factor) or factor < 1:
        raise ValueError(
            f"reference lattice {ref_mesh.lattice} is not a uniform integer "
            f"refinement of {mesh.lattice}"
        )
    dom_ref = np.array(ref_mesh.domain_size())
    dom = np.array(mesh.domain_size())
    if np.abs(dom_ref - dom).max() > 1e-9 * dom.max():
        raise ValueError("reference mesh covers a different domain")
    return int(factor)


def actual_error(mesh: Mesh, sol: MicroSolution, ref_mesh: Mesh,
                 ref_sol: MicroSolution,
                 report: ErrorReport | None = None) -> ErrorReport:
    """Energy-norm error against a nested reference discretization.

    Every reference quadrature point is embedded into its containing coarse
    element; the integrand (sig_ref-sig_h):(eps_ref-eps_h) is accumulated
    with the reference weights, and per coarse element.
    """
    _check_nested(mesh, ref_mesh)
    dim = mesh.dim
    nv = voigt_dim(dim)
    qp = gauss_points(dim)
    N_ref = shape_functions(dim, qp)  # (nq, nnod) for ref-element geometry
    nq = qp.shape[0]

    ne_ref = ref_mesh.n_elements
    total_sq = 0.0
    per_coarse_sq = np.zeros(mesh.n_elements)

    ref_sizes = ref_mesh.element_size()
    coarse_sizes = mesh.element_size()

    nu_vals = {float(nu): _unit_voigt(float(nu), dim) for nu in np.unique(mesh.nu)}

    for lo in range(0, ne_ref, _CHUNK):
        hi = min(lo + _CHUNK, ne_ref)
        m = hi - lo
        # physical positions of the reference quadrature points
        orig = ref_mesh.origin_cell[lo:hi] * ref_mesh.h0  # (m, dim)
        half = 0.5 * ref_sizes[lo:hi]
        pts = orig[:, None, :] + half[:, None, None] * (qp[None, :, :] + 1.0)

        # containing coarse elements via the finest-cell map
        cells = np.floor(pts / mesh.h0).astype(np.int64)
        for a in range(dim):
            np.clip(cells[..., a], 0, mesh.lattice[a] - 1, out=cells[..., a])
        elems = mesh.cell_elem[tuple(cells[..., a] for a in range(dim))]  # (m, nq)

        # local coordinates inside the coarse elements
        c_orig = mesh.origin_cell[elems] * mesh.h0  # (m, nq, dim)
        c_size = coarse_sizes[elems]  # (m, nq)
        xi = 2.0 * (pts - c_orig) / c_size[..., None] - 1.0

        # coarse strain at the embedded points
        flat_xi = xi.reshape(-1, dim)
        grads = shape_gradients(dim, flat_xi)  # (m*nq, nnod, dim)
        grads *= (2.0 / c_size.reshape(-1))[:, None, None]
        dofs = sol.displacements[mesh.conn[elems.reshape(-1)]]  # (m*nq, nnod, dim)
        eps_h = kernels.strain_at_points(
            np.ascontiguousarray(dofs), np.ascontiguousarray(grads)
        )  # (m*nq, nv)

        sig_h = np.empty_like(eps_h)
        flat_elems = elems.reshape(-1)
        nus = mesh.nu[flat_elems]
        for nu, C1 in nu_vals.items():
            sel = nus == nu
            sig_h[sel] = (eps_h[sel] @ C1.T) * mesh.E[flat_elems[sel], None]

        dsig = ref_sol.qp_stress[lo:hi].reshape(-1, nv) - sig_h
        deps = ref_sol.qp_strain[lo:hi].reshape(-1, nv) - eps_h
        w = ref_sol.qp_weights[lo:hi].reshape(-1)
        contrib = w * np.einsum("pv,pv->p", dsig, deps)
        total_sq += contrib.sum()
        per_coarse_sq += np.bincount(flat_elems, weights=contrib,
                                     minlength=mesh.n_elements)

    total_sq = max(float(total_sq), 0.0)
    per_coarse_sq = np.maximum(per_coarse_sq, 0.0)

    if report is None:
        from .fem import solution_energy_norm

        report = ErrorReport(solution_norm=solution_energy_norm(sol))
    report.e_mic = float(np.sqrt(total_sq))
    report.per_element_actual = np.sqrt(per_coarse_sq)
    report.update_theta()
    return report


def effectivity(e_bar: float, e: float) -> float:
    """Effectivity index: estimated over actual error."""
    if e <= 0.0:
        raise ValueError("effectivity is undefined for vanishing actual error")
    return e_bar / e


def relative_error_field(report: ErrorReport, mesh: Mesh, sol: MicroSolution,
                         vanish_tol: float = 1e-300) -> dict[str, np.ndarray]:
    """Element-wise error as a percentage of the element energy norm.

    Elements with vanishing energy are flagged in the 'vanishing' mask and
    their ratio set to 0.
    """
    energies = np.sqrt(np.maximum(
        element_energies(sol.qp_stress, sol.qp_strain, sol.qp_weights), 0.0))
    vanishing = energies <= vanish_tol
    safe = np.where(vanishing, 1.0, energies)

    fields: dict[str, np.ndarray] = {"vanishing": vanishing}
    if report.per_element_estimated is not None:
        fields["estimated"] = np.where(
            vanishing, 0.0, 100.0 * report.per_element_estimated / safe)
    if report.per_element_actual is not None:
        fields["actual"] = np.where(
            vanishing, 0.0, 100.0 * report.per_element_actual / safe)
    report.per_element_relative = fields
    return fields
