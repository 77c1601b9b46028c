"""Linear-elastic micro problem on voxel meshes.

Bilinear quad / trilinear hex elements with 2**dim Gauss quadrature,
hanging-node elimination by constraint transformation, and the three macro
boundary conditions (kinematically uniform, periodic, statically uniform)
applied in their energetically consistent forms. Homogenized quantities are
volume averages of the quadrature-point fields.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field as dataclass_field
from typing import NamedTuple

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import kernels
from .mesh import CORNER_OFFSETS, Mesh, count_ndof
from .microstructure import PhaseTable

__all__ = [
    "ElasticityTensor",
    "MacroLoad",
    "MicroSolution",
    "MicroSystem",
    "SolverOptions",
    "SolverError",
    "HillMandelResidual",
    "phase_stiffness",
    "element_stiffness",
    "assemble",
    "solve_micro",
    "energy_norm",
    "element_energies",
    "hill_mandel_residual",
    "voigt_dim",
    "voigt_to_tensor",
    "tensor_to_voigt",
    "unit_strain_states",
]

GAUSS_COORD = 1.0 / np.sqrt(3.0)

_QP_CHUNK = 50_000  # elements per chunk when evaluating quadrature fields


class SolverError(RuntimeError):
    """Linear solve failed or did not reach the requested tolerance."""


# ---------------------------------------------------------------------------
# Voigt conventions: 2d (11, 22, 12), 3d (11, 22, 33, 12, 23, 13),
# strain vectors carry engineering shears (2*eps_ij).
# ---------------------------------------------------------------------------

_VOIGT_PAIRS = {
    2: ((0, 0), (1, 1), (0, 1)),
    3: ((0, 0), (1, 1), (2, 2), (0, 1), (1, 2), (0, 2)),
}


def voigt_dim(dim: int) -> int:
    return 3 if dim == 2 else 6


def voigt_to_tensor(vec, dim: int, kind: str = "strain") -> np.ndarray:
    """Voigt vector -> symmetric tensor; strain vectors use engineering shears."""
    vec = np.asarray(vec, dtype=np.float64)
    t = np.zeros((dim, dim))
    half = 0.5 if kind == "strain" else 1.0
    for k, (i, j) in enumerate(_VOIGT_PAIRS[dim]):
        if i == j:
            t[i, i] = vec[k]
        else:
            t[i, j] = t[j, i] = half * vec[k]
    return t


def tensor_to_voigt(t, dim: int, kind: str = "strain") -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    fac = 2.0 if kind == "strain" else 1.0
    out = np.empty(voigt_dim(dim))
    for k, (i, j) in enumerate(_VOIGT_PAIRS[dim]):
        out[k] = t[i, i] if i == j else fac * 0.5 * (t[i, j] + t[j, i])
    return out


def unit_strain_states(dim: int) -> np.ndarray:
    """Unit macro load states in Voigt form (engineering-shear convention)."""
    return np.eye(voigt_dim(dim))


@dataclass(frozen=True)
class ElasticityTensor:
    """Symmetric Voigt stiffness/compliance matrix, MPa."""

    voigt: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.voigt, dtype=np.float64)
        if v.shape not in ((3, 3), (6, 6)):
            raise ValueError(f"Voigt matrix must be 3x3 or 6x6, got {v.shape}")
        scale = np.abs(v).max()
        if scale > 0 and np.abs(v - v.T).max() > 1e-10 * scale:
            raise ValueError("Voigt matrix is not symmetric")
        object.__setattr__(self, "voigt", 0.5 * (v + v.T))

    @property
    def dim(self) -> int:
        return 2 if self.voigt.shape[0] == 3 else 3

    def inverse(self) -> "ElasticityTensor":
        return ElasticityTensor(np.linalg.inv(self.voigt))

    def is_positive_definite(self) -> bool:
        return bool(np.linalg.eigvalsh(self.voigt).min() > 0.0)


def phase_stiffness(E: float, nu: float, dim: int = 3) -> ElasticityTensor:
    """Isotropic Voigt stiffness; 2d is the plane-strain restriction."""
    if E <= 0.0:
        raise ValueError("E must be positive")
    if not (-1.0 < nu < 0.5):
        raise ValueError(f"nu must lie in (-1, 0.5), got {nu}")
    lam = E * nu / ((1.0 + nu) * (1.0 - 2.0 * nu))
    mu = E / (2.0 * (1.0 + nu))
    if dim == 2:
        C = np.array(
            [
                [lam + 2 * mu, lam, 0.0],
                [lam, lam + 2 * mu, 0.0],
                [0.0, 0.0, mu],
            ]
        )
    elif dim == 3:
        A = np.full((3, 3), lam) + 2 * mu * np.eye(3)
        C = np.block([[A, np.zeros((3, 3))], [np.zeros((3, 3)), np.diag([mu] * 3)]])
    else:
        raise ValueError("dim must be 2 or 3")
    return ElasticityTensor(C)


# ---------------------------------------------------------------------------
# reference element
# ---------------------------------------------------------------------------

def _corner_xi(dim: int) -> np.ndarray:
    return 2.0 * CORNER_OFFSETS[dim].astype(np.float64) - 1.0


def shape_functions(dim: int, pts: np.ndarray) -> np.ndarray:
    """Multilinear shape functions at reference points: (npts, 2**dim)."""
    xi_c = _corner_xi(dim)
    pts = np.atleast_2d(pts)
    vals = np.ones((pts.shape[0], xi_c.shape[0]))
    for a in range(dim):
        vals *= 0.5 * (1.0 + xi_c[None, :, a] * pts[:, None, a])
    return vals


def shape_gradients(dim: int, pts: np.ndarray) -> np.ndarray:
    """Reference gradients dN/dxi: (npts, 2**dim, dim)."""
    xi_c = _corner_xi(dim)
    pts = np.atleast_2d(pts)
    npts, nnod = pts.shape[0], xi_c.shape[0]
    grads = np.empty((npts, nnod, dim))
    for d in range(dim):
        g = np.broadcast_to(0.5 * xi_c[None, :, d], (npts, nnod)).copy()
        for a in range(dim):
            if a == d:
                continue
            g *= 0.5 * (1.0 + xi_c[None, :, a] * pts[:, None, a])
        grads[:, :, d] = g
    return grads


def gauss_points(dim: int) -> np.ndarray:
    """2**dim Gauss points, x fastest; reference weights are all 1."""
    g = (-GAUSS_COORD, GAUSS_COORD)
    pts = np.array(list(itertools.product(g, repeat=dim)), dtype=np.float64)
    return pts[:, ::-1].copy()  # itertools.product iterates the last axis fastest

def b_matrices(dim: int, grads_phys: np.ndarray) -> np.ndarray:
    """Strain-displacement matrices (npts, nvoigt, nnod*dim), engineering shear."""
    npts, nnod, _ = grads_phys.shape
    nv = voigt_dim(dim)
    B = np.zeros((npts, nv, nnod * dim))
    gx = grads_phys[:, :, 0]
    gy = grads_phys[:, :, 1]
    if dim == 2:
        B[:, 0, 0::2] = gx
        B[:, 1, 1::2] = gy
        B[:, 2, 0::2] = gy
        B[:, 2, 1::2] = gx
    else:
        gz = grads_phys[:, :, 2]
        B[:, 0, 0::3] = gx
        B[:, 1, 1::3] = gy
        B[:, 2, 2::3] = gz
        B[:, 3, 0::3] = gy
        B[:, 3, 1::3] = gx
        B[:, 4, 1::3] = gz
        B[:, 4, 2::3] = gy
        B[:, 5, 0::3] = gz
        B[:, 5, 2::3] = gx
    return B


def element_stiffness(h: float, C: ElasticityTensor) -> np.ndarray:
    """Stiffness of an axis-aligned square/cube element with edge length h."""
    if h <= 0.0:
        raise ValueError("element edge length must be positive")
    dim = C.dim
    qp = gauss_points(dim)
    grads = shape_gradients(dim, qp) * (2.0 / h)
    B = b_matrices(dim, grads)
    w = (h / 2.0) ** dim
    K = np.einsum("qvi,vw,qwj->ij", B, C.voigt, B) * w
    return 0.5 * (K + K.T)


_UNIT_K_CACHE: dict = {}


def _unit_stiffness(nu: float, h: float, dim: int) -> np.ndarray:
    key = (float(nu), float(h), dim)
    if key not in _UNIT_K_CACHE:
        _UNIT_K_CACHE[key] = element_stiffness(h, phase_stiffness(1.0, nu, dim))
    return _UNIT_K_CACHE[key]


def _unit_voigt(nu: float, dim: int) -> np.ndarray:
    return phase_stiffness(1.0, nu, dim).voigt


# ---------------------------------------------------------------------------
# loads, assembled systems, solutions
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MacroLoad:
    """Macroscopic load: prescribed mean strain or mean stress, plus BC kind."""

    kind: str  # "strain" | "stress"
    voigt: np.ndarray  # (nvoigt,), engineering shear for strain
    bc: str  # "kubc" | "pbc" | "subc"

    def __post_init__(self):
        if self.kind not in ("strain", "stress"):
            raise ValueError("load kind must be 'strain' or 'stress'")
        if self.bc not in ("kubc", "pbc", "subc"):
            raise ValueError("bc must be kubc|pbc|subc")
        if self.bc in ("kubc", "pbc") and self.kind != "strain":
            raise ValueError(f"{self.bc} requires a strain-driven load")
        if self.bc == "subc" and self.kind != "stress":
            raise ValueError("subc requires a stress-driven load")
        object.__setattr__(self, "voigt", np.asarray(self.voigt, dtype=np.float64))

    def tensor(self, dim: int) -> np.ndarray:
        return voigt_to_tensor(self.voigt, dim, self.kind)


@dataclass
class MicroSystem:
    """Assembled, hanging-eliminated stiffness with supporting maps.

    Per-BC solver state (factorizations, multigrid hierarchies, periodic
    pairing) is cached on first use so the unit load states of a
    homogenization run share one operator setup.
    """

    mesh: Mesh
    K_red: sp.csr_matrix  # reduced (free-node) stiffness
    T: sp.csr_matrix  # full dofs <- reduced dofs interpolation
    free_nodes: np.ndarray  # node ids carried by the reduced system
    red_index: np.ndarray  # node id -> reduced node index (-1 for slaves)
    _bc_cache: dict = dataclass_field(default_factory=dict, repr=False)

    @property
    def ndof(self) -> int:
        return self.K_red.shape[0]


@dataclass
class SolverOptions:
    method: str = "auto"  # auto | direct | cg
    rtol: float = 1e-10
    maxiter: int = 50_000
    direct_max_2d: int = 400_000
    direct_max_3d: int = 60_000

    def use_direct(self, n: int, dim: int) -> bool:
        if self.method == "direct":
            return True
        if self.method == "cg":
            return False
        limit = self.direct_max_2d if dim == 2 else self.direct_max_3d
        return n <= limit


class HillMandelResidual(NamedTuple):
    value: float
    absolute: bool  # True when the macro work vanished and no ratio exists


@dataclass
class MicroSolution:
    """Solved micro BVP: nodal displacements and quadrature-point fields."""

    displacements: np.ndarray  # (nnodes, dim), mm
    qp_strain: np.ndarray  # (nelem, nqp, nvoigt), engineering shear
    qp_stress: np.ndarray  # (nelem, nqp, nvoigt), MPa
    qp_weights: np.ndarray  # (nelem, nqp) integration weights, mm**dim
    load: MacroLoad
    lagrange_multipliers: np.ndarray | None = None
    info: dict = dataclass_field(default_factory=dict)

    def mean_strain(self) -> np.ndarray:
        vol = self.qp_weights.sum()
        return np.einsum("eq,eqv->v", self.qp_weights, self.qp_strain) / vol

    def mean_stress(self) -> np.ndarray:
        vol = self.qp_weights.sum()
        return np.einsum("eq,eqv->v", self.qp_weights, self.qp_stress) / vol


# ---------------------------------------------------------------------------
# assembly
# ---------------------------------------------------------------------------

def _resolve_hanging(mesh: Mesh) -> dict[int, dict[int, float]]:
    """Slave node -> {free master node: weight}, constraint chains substituted."""
    raw = {c.slave: dict(zip(c.masters, c.weights)) for c in mesh.hanging}
    resolved: dict[int, dict[int, float]] = {}

    def resolve(s, guard=()):
        if s in resolved:
            return resolved[s]
        if s in guard:
            raise ValueError("cyclic hanging-node constraints")
        out: dict[int, float] = {}
        for m, w in raw[s].items():
            if m in raw:
                for mm, ww in resolve(m, guard + (s,)).items():
                    out[mm] = out.get(mm, 0.0) + w * ww
            else:
                out[m] = out.get(m, 0.0) + w
        resolved[s] = out
        return out

    for s in raw:
        resolve(s)
    return resolved


def assemble(mesh: Mesh, table: PhaseTable | None = None) -> MicroSystem:
    """Assemble the global stiffness and fold in hanging-node constraints.

    The returned system acts on the free (non-hanging) nodes only; its
    dimension equals the reported ndof. Passing a phase table refreshes the
    per-element moduli from the element phases first.
    """
    dim = mesh.dim
    if table is not None:
        eff = {pid: table.effective(pid) for pid in table.ids()}
        mesh.E = np.array([eff[int(p)][0] for p in mesh.phase])
        mesh.nu = np.array([eff[int(p)][1] for p in mesh.phase])

    nnod = 2**dim
    edof = (mesh.conn[:, :, None] * dim + np.arange(dim)[None, None, :]).reshape(
        mesh.n_elements, nnod * dim
    )

    sizes = mesh.element_size()
    rows_all, cols_all, vals_all = [], [], []
    group_key = np.stack([mesh.nu, sizes], axis=1)
    uniq, inv = np.unique(group_key, axis=0, return_inverse=True)
    for g in range(uniq.shape[0]):
        els = np.flatnonzero(inv == g)
        K1 = _unit_stiffness(uniq[g, 0], uniq[g, 1], dim)
        vals = (mesh.E[els][:, None, None] * K1[None, :, :]).ravel()
        ed = edof[els]
        rows_all.append(np.repeat(ed, nnod * dim, axis=1).ravel())
        cols_all.append(np.tile(ed, (1, nnod * dim)).ravel())
        vals_all.append(vals)

    ndof_full = mesh.n_nodes * dim
    K_full = sp.coo_matrix(
        (np.concatenate(vals_all), (np.concatenate(rows_all), np.concatenate(cols_all))),
        shape=(ndof_full, ndof_full),
    ).tocsr()

    resolved = _resolve_hanging(mesh)
    slave_set = set(resolved)
    free_nodes = np.array(
        [n for n in range(mesh.n_nodes) if n not in slave_set], dtype=np.int64
    )
    red_index = np.full(mesh.n_nodes, -1, dtype=np.int64)
    red_index[free_nodes] = np.arange(free_nodes.size)

    ndof_red = free_nodes.size * dim
    t_rows, t_cols, t_vals = [], [], []
    for n in free_nodes:
        for c in range(dim):
            t_rows.append(n * dim + c)
            t_cols.append(red_index[n] * dim + c)
            t_vals.append(1.0)
    for s, masters in sorted(resolved.items()):
        for m, w in sorted(masters.items()):
            for c in range(dim):
                t_rows.append(s * dim + c)
                t_cols.append(red_index[m] * dim + c)
                t_vals.append(w)
    T = sp.coo_matrix((t_vals, (t_rows, t_cols)), shape=(ndof_full, ndof_red)).tocsr()

    K_red = (T.T @ K_full @ T).tocsr()
    K_red = (0.5 * (K_red + K_red.T)).tocsr()

    expected, _ = count_ndof(mesh)
    if K_red.shape[0] != expected:
        raise AssertionError("reduced system dimension disagrees with count_ndof")

    return MicroSystem(mesh=mesh, K_red=K_red, T=T, free_nodes=free_nodes,
                       red_index=red_index)


# ---------------------------------------------------------------------------
# linear solvers
# ---------------------------------------------------------------------------

def _rigid_basis(coords: np.ndarray) -> np.ndarray:
    """Translations + infinitesimal rotations on the given nodes: (n*dim, m)."""
    n, dim = coords.shape
    vecs = []
    for c in range(dim):
        v = np.zeros((n, dim))
        v[:, c] = 1.0
        vecs.append(v.ravel())
    pairs = [(0, 1)] if dim == 2 else [(0, 1), (1, 2), (0, 2)]
    for i, j in pairs:
        v = np.zeros((n, dim))
        v[:, i] = coords[:, j]
        v[:, j] = -coords[:, i]
        vecs.append(v.ravel())
    return np.stack(vecs, axis=1)


class _DirectSolve:
    """Reusable sparse LU of one operator."""

    def __init__(self, A: sp.spmatrix, label: str):
        self.label = label
        try:
            self.lu = spla.splu(A.tocsc())
        except RuntimeError as exc:
            raise SolverError(f"factorization failed: {exc}") from exc

    def __call__(self, b: np.ndarray):
        x = self.lu.solve(b)
        if not np.all(np.isfinite(x)):
            raise SolverError("direct solve produced non-finite values")
        return x, {"solver": self.label}


class _CgSolve:
    """Preconditioned CG on a reusable operator; optional kernel deflation."""

    def __init__(self, A: sp.csr_matrix, opts: SolverOptions,
                 coords: np.ndarray | None, kernel: np.ndarray | None = None):
        self.A = A.tocsr()
        self.opts = opts
        self.M, self.label = self._preconditioner(coords)
        self.Q = None
        if kernel is not None:
            self.Q, _ = np.linalg.qr(kernel)
            self.label += "-deflated"

    def _preconditioner(self, coords):
        try:
            import pyamg

            B = _rigid_basis(coords) if coords is not None else None
            ml = pyamg.smoothed_aggregation_solver(self.A, B=B, max_coarse=500)
            return ml.aspreconditioner(cycle="V"), "cg+amg"
        except Exception:
            d = self.A.diagonal().copy()
            d[d == 0.0] = 1.0
            return sp.diags(1.0 / d), "cg+jacobi"

    def __call__(self, b: np.ndarray):
        project = (lambda v: v - self.Q @ (self.Q.T @ v)) if self.Q is not None \
            else (lambda v: v)
        b = project(b)
        bnorm = np.linalg.norm(b)
        if bnorm == 0.0:
            return np.zeros_like(b), {"solver": self.label, "iterations": 0}
        n = self.A.shape[0]
        A = self.A
        if self.Q is not None:
            Aop = spla.LinearOperator((n, n), matvec=lambda v: project(A @ project(v)))
            Mop = spla.LinearOperator((n, n), matvec=lambda v: project(self.M @ v))
        else:
            Aop, Mop = A, self.M
        it = [0]

        def cb(_):
            it[0] += 1

        x, info = spla.cg(Aop, b, rtol=self.opts.rtol, atol=0.0,
                          maxiter=self.opts.maxiter, M=Mop, callback=cb)
        x = project(x)
        res = float(np.linalg.norm(project(b - A @ x)) / bnorm)
        if info != 0 and res > 100 * self.opts.rtol:
            raise SolverError(f"CG failed: info={info}, relative residual {res:.3e}")
        return x, {"solver": self.label, "iterations": it[0], "residual": res}


def _make_solver(A: sp.spmatrix, dim: int, opts: SolverOptions,
                 coords: np.ndarray | None, kernel: np.ndarray | None = None,
                 saddle: bool = False):
    if saddle or opts.use_direct(A.shape[0], dim):
        if saddle and not opts.use_direct(A.shape[0], dim):
            raise SolverError("saddle system above the direct-solver budget")
        return _DirectSolve(A, "direct-saddle" if saddle else "direct")
    return _CgSolve(A, opts, coords, kernel)


# ---------------------------------------------------------------------------
# boundary conditions: per-BC contexts shared across load states
# ---------------------------------------------------------------------------

class _KubcContext:
    def __init__(self, system: MicroSystem, opts: SolverOptions):
        mesh = system.mesh
        dim = mesh.dim
        K = system.K_red
        rlat = mesh.node_lattice[system.free_nodes]
        ext = np.array(mesh.lattice)
        on_boundary = (rlat == 0).any(axis=1) | (rlat == ext[None, :]).any(axis=1)
        self.pres_nodes = np.flatnonzero(on_boundary)
        dof_mask = np.repeat(on_boundary, dim)
        self.pres_dofs = np.flatnonzero(dof_mask)
        self.free_dofs = np.flatnonzero(~dof_mask)
        self.coords = mesh.nodes[system.free_nodes]
        self.ndof = K.shape[0]
        Kcsc = K.tocsc()
        self.Kfp = Kcsc[:, self.pres_dofs].tocsr()[self.free_dofs]
        Kff = Kcsc[:, self.free_dofs].tocsr()[self.free_dofs]
        self.solver = _make_solver(Kff, dim, opts, self.coords[~on_boundary])

    def solve(self, strain_tensor: np.ndarray):
        values = self.coords[self.pres_nodes] @ strain_tensor.T
        u = np.zeros(self.ndof)
        u[self.pres_dofs] = values.ravel()
        x, info = self.solver(-(self.Kfp @ u[self.pres_dofs]))
        u[self.free_dofs] = x
        return u, None, info


class _PbcContext:
    """Periodic pairing u(x+) = u(x-) + eps.(x+ - x-) with a pinned corner."""

    def __init__(self, system: MicroSystem, opts: SolverOptions):
        mesh = system.mesh
        dim = mesh.dim
        free = system.free_nodes
        rlat = mesh.node_lattice[free]
        ext = np.array(mesh.lattice)

        on_max = rlat == ext[None, :]
        is_image = on_max.any(axis=1)
        wrapped = rlat.copy()
        wrapped[on_max] = 0

        def encode(lat):
            key = lat[:, 0].astype(np.int64).copy()
            stride = ext[0] + 1
            for a in range(1, dim):
                key = key + stride * lat[:, a]
                stride *= ext[a] + 1
            return key

        own_key = encode(rlat)
        order = np.argsort(own_key)
        pos = np.searchsorted(own_key[order], encode(wrapped))
        pos = np.clip(pos, 0, own_key.size - 1)
        found = own_key[order][pos] == encode(wrapped)
        master = np.where(found, order[pos], -1)

        missing = np.flatnonzero(is_image & (master < 0))
        if missing.size:
            pts = mesh.nodes[free[missing]][:8].tolist()
            raise ValueError(
                f"periodic faces do not match: {missing.size} boundary nodes lack "
                f"a wrap partner; first offenders at {pts}"
            )
        for a in range(dim):
            n_min = int((rlat[:, a] == 0).sum())
            n_max = int((rlat[:, a] == ext[a]).sum())
            if n_min != n_max:
                raise ValueError(
                    f"periodic faces do not match on axis {'xyz'[a]}: {n_min} "
                    f"min-face vs {n_max} max-face nodes"
                )

        corner = np.flatnonzero((rlat == 0).all(axis=1))
        if corner.size != 1:
            raise ValueError("mesh lacks the origin corner node required for pinning")
        self.corner = int(corner[0])

        keep = ~is_image
        keep[self.corner] = False
        kept = np.flatnonzero(keep)
        idx2 = np.full(free.size, -1, dtype=np.int64)
        idx2[kept] = np.arange(kept.size)

        self.dim = dim
        self.coords = mesh.nodes[free]
        self.kept = kept
        self.images = np.flatnonzero(is_image)
        self.image_master = master[self.images]
        # affine offsets: images relative to masters, corner to the origin
        self.image_delta = self.coords[self.images] - self.coords[self.image_master]
        self.master_is_corner = ~keep[self.image_master]

        nred = free.size * dim
        rows = (kept[:, None] * dim + np.arange(dim)[None, :]).ravel()
        cols = np.arange(kept.size * dim)
        img_keepable = self.images[~self.master_is_corner]
        img_masters = self.image_master[~self.master_is_corner]
        rows2 = (img_keepable[:, None] * dim + np.arange(dim)[None, :]).ravel()
        cols2 = (idx2[img_masters][:, None] * dim + np.arange(dim)[None, :]).ravel()
        T2 = sp.coo_matrix(
            (np.ones(rows.size + rows2.size),
             (np.concatenate([rows, rows2]), np.concatenate([cols, cols2]))),
            shape=(nred, kept.size * dim),
        ).tocsr()
        self.T2 = T2
        K = system.K_red
        A = (T2.T @ K @ T2).tocsr()
        self.A = (0.5 * (A + A.T)).tocsr()
        self.K = K
        self.solver = _make_solver(self.A, dim, opts, self.coords[kept])

    def affine_shift(self, strain_tensor: np.ndarray) -> np.ndarray:
        dim = self.dim
        g = np.zeros(self.K.shape[0])
        g[self.corner * dim: (self.corner + 1) * dim] = \
            strain_tensor @ self.coords[self.corner]
        offs = self.image_delta @ strain_tensor.T
        offs[self.master_is_corner] += \
            self.coords[self.image_master[self.master_is_corner]] @ strain_tensor.T
        idx = (self.images[:, None] * dim + np.arange(dim)[None, :]).ravel()
        g[idx] = offs.ravel()
        return g

    def solve(self, strain_tensor: np.ndarray):
        g = self.affine_shift(strain_tensor)
        x, info = self.solver(-(self.T2.T @ (self.K @ g)))
        return self.T2 @ x + g, None, info


class _SubcContext:
    def __init__(self, system: MicroSystem, opts: SolverOptions):
        mesh = system.mesh
        dim = mesh.dim
        K = system.K_red
        self.system = system
        self.G = _integral_constraint_rows(mesh) @ system.T  # (m, nred)
        self.m = self.G.shape[0]
        n = K.shape[0]
        self.coords = mesh.nodes[system.free_nodes]
        self.direct = opts.use_direct(n + self.m, dim)
        if self.direct:
            Gs = sp.csr_matrix(self.G)
            saddle = sp.bmat([[K, Gs.T], [Gs, None]], format="csc")
            self.solver = _DirectSolve(saddle, "direct-saddle")
        else:
            self.Z = _rigid_basis(self.coords)
            self.solver = _CgSolve(K, opts, self.coords, kernel=self.Z)
            self.K = K

    def solve(self, f_red: np.ndarray):
        if self.direct:
            rhs = np.concatenate([f_red, np.zeros(self.m)])
            sol, info = self.solver(rhs)
            n = f_red.size
            return sol[:n], sol[n:], info
        u, info = self.solver(f_red)
        # rigid-mode shift so the integral constraints hold exactly
        GZ = self.G @ self.Z
        alpha = np.linalg.solve(GZ, -(self.G @ u))
        u = u + self.Z @ alpha
        resid = f_red - self.K @ u
        lam, *_ = np.linalg.lstsq(self.G.T, resid, rcond=None)
        return u, lam, info


_BC_CONTEXTS = {"kubc": _KubcContext, "pbc": _PbcContext, "subc": _SubcContext}


def _bc_context(system: MicroSystem, bc: str, opts: SolverOptions):
    key = (bc, opts.method, opts.rtol, opts.direct_max_2d, opts.direct_max_3d)
    if key not in system._bc_cache:
        system._bc_cache[key] = _BC_CONTEXTS[bc](system, opts)
    return system._bc_cache[key]


_FACE_CORNERS = {
    2: {"xmin": (0, 3), "xmax": (1, 2), "ymin": (0, 1), "ymax": (3, 2)},
    3: {
        "xmin": (0, 3, 7, 4), "xmax": (1, 2, 6, 5),
        "ymin": (0, 1, 5, 4), "ymax": (3, 2, 6, 7),
        "zmin": (0, 1, 2, 3), "zmax": (4, 5, 6, 7),
    },
}


def _consistent_subc_loads(mesh: Mesh, stress_tensor: np.ndarray) -> np.ndarray:
    """Consistent nodal loads of the uniform traction sigma.n on outer faces."""
    dim = mesh.dim
    f = np.zeros(mesh.n_nodes * dim)
    sizes = mesh.element_size()
    lat_sizes = 1 << mesh.level.astype(np.int64)
    for ax, name in enumerate(("x", "y", "z")[:dim]):
        for side in (0, 1):
            if side == 0:
                sel = mesh.origin_cell[:, ax] == 0
                sign = -1.0
            else:
                sel = mesh.origin_cell[:, ax] + lat_sizes == mesh.lattice[ax]
                sign = 1.0
            els = np.flatnonzero(sel)
            if els.size == 0:
                continue
            normal = np.zeros(dim)
            normal[ax] = sign
            traction = stress_tensor @ normal
            corners = _FACE_CORNERS[dim][f"{name}{'min' if side == 0 else 'max'}"]
            share = sizes[els] ** (dim - 1) / len(corners)
            for ci in corners:
                nds = mesh.conn[els, ci]
                for c in range(dim):
                    np.add.at(f, nds * dim + c, share * traction[c])
    return f


def _integral_constraint_rows(mesh: Mesh) -> np.ndarray:
    """Consistent rows of int(u) dV = 0 and int(skew grad u) dV = 0."""
    dim = mesh.dim
    n = mesh.n_nodes * dim
    vol = mesh.element_volume()
    nnod = 2**dim

    rows = []
    share = vol / nnod  # int(N_a) dV over a box element
    for c in range(dim):
        r = np.zeros(n)
        for a in range(nnod):
            np.add.at(r, mesh.conn[:, a] * dim + c, share)
        rows.append(r)

    # int dN_a/dx_j dV = base[a, j] * 2**(1-dim) * h**(dim-1)
    qp = gauss_points(dim)
    base = shape_gradients(dim, qp).sum(axis=0)  # (nnod, dim)
    sizes = mesh.element_size()
    fac = 2.0 ** (1 - dim) * sizes ** (dim - 1)
    pairs = [(0, 1)] if dim == 2 else [(0, 1), (1, 2), (0, 2)]
    for i, j in pairs:
        r = np.zeros(n)
        for a in range(nnod):
            np.add.at(r, mesh.conn[:, a] * dim + i, base[a, j] * fac)
            np.add.at(r, mesh.conn[:, a] * dim + j, -base[a, i] * fac)
        rows.append(r)
    return np.stack(rows, axis=0)


# ---------------------------------------------------------------------------
# micro solve and derived fields
# ---------------------------------------------------------------------------

def solve_micro(system: MicroSystem, mesh: Mesh, load: MacroLoad,
                options: SolverOptions | None = None) -> MicroSolution:
    """Solve the micro BVP for one macro load state.

    The BC-specific operator setup (factorization, AMG hierarchy, periodic
    pairing) is cached on the system and shared across load states.
    """
    if system.mesh is not mesh:
        raise ValueError("system was assembled for a different mesh")
    opts = options or SolverOptions()
    dim = mesh.dim
    ctx = _bc_context(system, load.bc, opts)
    multipliers = None

    if load.bc in ("kubc", "pbc"):
        u_red, multipliers, info = ctx.solve(load.tensor(dim))
    else:
        f_full = _consistent_subc_loads(mesh, load.tensor(dim))
        u_red, multipliers, info = ctx.solve(system.T.T @ f_full)

    u_full = (system.T @ u_red).reshape(mesh.n_nodes, dim)
    qp_strain, qp_stress, qp_weights = compute_qp_fields(mesh, u_full)
    return MicroSolution(
        displacements=u_full,
        qp_strain=qp_strain,
        qp_stress=qp_stress,
        qp_weights=qp_weights,
        load=load,
        lagrange_multipliers=multipliers,
        info=info,
    )


def compute_qp_fields(mesh: Mesh, u_full: np.ndarray):
    """Strain/stress at the 2**dim Gauss points of every element."""
    dim = mesh.dim
    qp = gauss_points(dim)
    ref_grads = shape_gradients(dim, qp)  # (nq, nnod, dim)
    nq = qp.shape[0]
    ne = mesh.n_elements
    nv = voigt_dim(dim)
    sizes = mesh.element_size()

    qp_strain = np.empty((ne, nq, nv))
    for lo in range(0, ne, _QP_CHUNK):
        hi = min(lo + _QP_CHUNK, ne)
        u_e = u_full[mesh.conn[lo:hi]]  # (m, nnod, dim)
        G = np.einsum("eai,qaj->eqij", u_e, ref_grads)
        G *= (2.0 / sizes[lo:hi])[:, None, None, None]
        qp_strain[lo:hi, :, 0] = G[:, :, 0, 0]
        qp_strain[lo:hi, :, 1] = G[:, :, 1, 1]
        if dim == 2:
            qp_strain[lo:hi, :, 2] = G[:, :, 0, 1] + G[:, :, 1, 0]
        else:
            qp_strain[lo:hi, :, 2] = G[:, :, 2, 2]
            qp_strain[lo:hi, :, 3] = G[:, :, 0, 1] + G[:, :, 1, 0]
            qp_strain[lo:hi, :, 4] = G[:, :, 1, 2] + G[:, :, 2, 1]
            qp_strain[lo:hi, :, 5] = G[:, :, 0, 2] + G[:, :, 2, 0]

    qp_stress = np.empty_like(qp_strain)
    for nu in np.unique(mesh.nu):
        els = np.flatnonzero(mesh.nu == nu)
        C1 = _unit_voigt(float(nu), dim)
        qp_stress[els] = np.einsum(
            "eqv,wv->eqw", qp_strain[els], C1
        ) * mesh.E[els][:, None, None]

    qp_weights = np.broadcast_to(
        ((sizes / 2.0) ** dim)[:, None], (ne, nq)
    ).copy()
    return qp_strain, qp_stress, qp_weights


def energy_norm(qp_stress, qp_strain, qp_weights) -> float:
    """Energy norm sqrt(sum_e sum_q w * sigma:eps) of a quadrature field."""
    total = kernels.energy_dot(
        np.ascontiguousarray(qp_stress),
        np.ascontiguousarray(qp_strain),
        np.ascontiguousarray(qp_weights),
    )
    return float(np.sqrt(max(total, 0.0)))


def solution_energy_norm(sol: MicroSolution) -> float:
    return energy_norm(sol.qp_stress, sol.qp_strain, sol.qp_weights)


def element_energies(qp_stress, qp_strain, qp_weights) -> np.ndarray:
    """Per-element squared energy contributions sum_q w * sigma:eps."""
    return np.einsum("eqv,eqv,eq->e", qp_stress, qp_strain, qp_weights)


def hill_mandel_residual(sol: MicroSolution, mesh: Mesh) -> HillMandelResidual:
    """Relative gap between <sigma:eps> and <sigma>:<eps>."""
    vol = sol.qp_weights.sum()
    micro = kernels.energy_dot(
        np.ascontiguousarray(sol.qp_stress),
        np.ascontiguousarray(sol.qp_strain),
        np.ascontiguousarray(sol.qp_weights),
    ) / vol
    macro = float(sol.mean_stress() @ sol.mean_strain())
    gap = abs(micro - macro)
    if abs(macro) < 1e-300:
        return HillMandelResidual(gap, True)
    return HillMandelResidual(gap / abs(macro), False)
