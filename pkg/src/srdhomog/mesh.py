"""Nonconforming quad/hex meshes on the voxel lattice.

Every element is an axis-aligned square/cube covering ``2**level`` cells of
the finest lattice per edge. Nodes live on lattice points; hanging nodes at
level transitions are recorded as interpolation constraints (mid-edge slaves
with two masters, 3d face-center slaves with four masters).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .microstructure import PhaseTable, VoxelGrid

__all__ = ["HangingConstraint", "Mesh", "build_uniform_mesh", "count_ndof"]

CORNER_OFFSETS = {
    2: np.array([(0, 0), (1, 0), (1, 1), (0, 1)], dtype=np.int64),
    3: np.array(
        [
            (0, 0, 0), (1, 0, 0), (1, 1, 0), (0, 1, 0),
            (0, 0, 1), (1, 0, 1), (1, 1, 1), (0, 1, 1),
        ],
        dtype=np.int64,
    ),
}

# corner-index pairs forming element edges
EDGES = {
    2: ((0, 1), (1, 2), (3, 2), (0, 3)),
    3: (
        (0, 1), (1, 2), (3, 2), (0, 3),
        (4, 5), (5, 6), (7, 6), (4, 7),
        (0, 4), (1, 5), (2, 6), (3, 7),
    ),
}

# corner-index quadruples forming hex faces
HEX_FACES = (
    (0, 1, 2, 3), (4, 5, 6, 7),
    (0, 1, 5, 4), (3, 2, 6, 7),
    (0, 3, 7, 4), (1, 2, 6, 5),
)


@dataclass(frozen=True)
class HangingConstraint:
    slave: int
    masters: tuple[int, ...]
    weights: tuple[float, ...]

    def __post_init__(self):
        if abs(sum(self.weights) - 1.0) > 1e-12:
            raise ValueError("hanging-node weights must sum to 1")
        if any(not (0.0 < w < 1.0) for w in self.weights):
            raise ValueError("hanging-node weights must lie in (0,1)")


@dataclass
class Mesh:
    """Axis-aligned voxel-lattice mesh with per-element material state."""

    dim: int
    h0: float  # finest element edge length, mm
    lattice: tuple[int, ...]  # finest cells per axis
    nodes: np.ndarray  # (nnodes, dim) coordinates, mm
    node_lattice: np.ndarray  # (nnodes, dim) integer lattice coordinates
    conn: np.ndarray  # (nelem, 2**dim) node ids, fixed local corner order
    phase: np.ndarray  # (nelem,) phase id
    level: np.ndarray  # (nelem,) refinement depth (0 = finest)
    E: np.ndarray  # (nelem,) effective Young's modulus, MPa
    nu: np.ndarray  # (nelem,) effective Poisson ratio
    origin_cell: np.ndarray  # (nelem, dim) min-corner cell on finest lattice
    cell_elem: np.ndarray  # finest-cell -> element id
    hanging: tuple[HangingConstraint, ...] = ()
    provenance: str = ""
    boundary_tags: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if not self.boundary_tags:
            self.boundary_tags = self._compute_boundary_tags()

    def _compute_boundary_tags(self):
        tags = {}
        names = ("x", "y", "z")[: self.dim]
        for ax, name in enumerate(names):
            lat = self.node_lattice[:, ax]
            tags[f"{name}min"] = np.flatnonzero(lat == 0)
            tags[f"{name}max"] = np.flatnonzero(lat == self.lattice[ax])
        return tags

    # -- derived quantities -------------------------------------------------

    @property
    def n_nodes(self) -> int:
        return self.nodes.shape[0]

    @property
    def n_elements(self) -> int:
        return self.conn.shape[0]

    @property
    def slave_ids(self) -> np.ndarray:
        return np.array(sorted(c.slave for c in self.hanging), dtype=np.int64)

    def element_size(self) -> np.ndarray:
        """Edge length per element, mm."""
        return self.h0 * (2.0 ** self.level.astype(np.float64))

    def element_volume(self) -> np.ndarray:
        return self.element_size() ** self.dim

    def domain_volume(self) -> float:
        return float(np.prod([n * self.h0 for n in self.lattice]))

    def domain_size(self) -> tuple[float, ...]:
        return tuple(n * self.h0 for n in self.lattice)

    def boundary_node_ids(self) -> np.ndarray:
        ids = np.concatenate(list(self.boundary_tags.values()))
        return np.unique(ids)


def _node_key(lat: np.ndarray, dims: tuple[int, ...]) -> np.ndarray:
    """Encode integer lattice coordinates into one int64 key, x fastest."""
    key = lat[..., 0].astype(np.int64)
    stride = dims[0] + 1
    for ax in range(1, len(dims)):
        key = key + stride * lat[..., ax].astype(np.int64)
        stride *= dims[ax] + 1
    return key


def build_mesh_from_blocks(dim, h0, lattice, origins, levels, phase, E, nu,
                           provenance=""):
    """Assemble a Mesh from block descriptions on the finest lattice.

    origins (nelem, dim) int, levels (nelem,) int; blocks must tile the
    lattice. Nodes, hanging constraints and the cell->element map are
    derived here.
    """
    origins = np.asarray(origins, dtype=np.int64)
    levels = np.asarray(levels, dtype=np.int64)
    nelem = origins.shape[0]
    sizes = (1 << levels).astype(np.int64)
    offsets = CORNER_OFFSETS[dim]

    corner_lat = origins[:, None, :] + offsets[None, :, :] * sizes[:, None, None]
    keys = _node_key(corner_lat, lattice)
    uniq, inverse = np.unique(keys.ravel(), return_inverse=True)
    conn = inverse.reshape(nelem, 2**dim).astype(np.int64)

    # decode unique keys back into lattice coordinates
    node_lat = np.empty((uniq.size, dim), dtype=np.int64)
    rem = uniq.copy()
    for ax in range(dim):
        node_lat[:, ax] = rem % (lattice[ax] + 1)
        rem //= lattice[ax] + 1
    nodes = node_lat.astype(np.float64) * h0

    cell_elem = np.full(lattice, -1, dtype=np.int64)
    fine = np.flatnonzero(sizes == 1)
    cell_elem[tuple(origins[fine].T)] = fine
    for e in np.flatnonzero(sizes > 1):
        sl = tuple(slice(origins[e, a], origins[e, a] + sizes[e]) for a in range(dim))
        cell_elem[sl] = e
    if (cell_elem < 0).any():
        raise ValueError("element blocks do not tile the lattice")

    hanging = _detect_hanging(dim, lattice, node_lat, conn, origins, sizes, uniq)

    return Mesh(
        dim=dim,
        h0=float(h0),
        lattice=tuple(int(n) for n in lattice),
        nodes=nodes,
        node_lattice=node_lat,
        conn=conn,
        phase=np.asarray(phase, dtype=np.int64),
        level=levels,
        E=np.asarray(E, dtype=np.float64),
        nu=np.asarray(nu, dtype=np.float64),
        origin_cell=origins,
        cell_elem=cell_elem,
        hanging=hanging,
        provenance=provenance,
    )


def _detect_hanging(dim, lattice, node_lat, conn, origins, sizes, keys_sorted):
    """Mid-edge / face-center nodes of coarse elements are slaves.

    Completeness relies on vertex 2:1 balance: neighbors of a coarse element
    are at most one level finer, so foreign nodes can only sit at edge
    midpoints and (3d) face centers.
    """
    coarse = np.flatnonzero(sizes >= 2)
    if coarse.size == 0:
        return ()

    def lookup(lat_pts):
        """lattice points -> node id or -1."""
        key = _node_key(lat_pts, lattice)
        pos = np.searchsorted(keys_sorted, key)
        pos = np.clip(pos, 0, keys_sorted.size - 1)
        found = keys_sorted[pos] == key
        return np.where(found, pos, -1)

    cl = node_lat[conn[coarse]]  # (nc, 2**dim, dim)
    cn = conn[coarse]
    constraints: dict[int, HangingConstraint] = {}

    edges = np.array(EDGES[dim], dtype=np.int64)
    mids = (cl[:, edges[:, 0], :] + cl[:, edges[:, 1], :]) // 2
    slave = lookup(mids.reshape(-1, dim)).reshape(mids.shape[:2])
    m_a = cn[:, edges[:, 0]]
    m_b = cn[:, edges[:, 1]]
    for s, a, b in zip(slave.ravel(), m_a.ravel(), m_b.ravel()):
        if s >= 0 and s not in constraints:
            constraints[int(s)] = HangingConstraint(int(s), (int(a), int(b)), (0.5, 0.5))

    if dim == 3:
        quads = np.array(HEX_FACES, dtype=np.int64)
        centers = cl[:, quads, :].sum(axis=2) // 4  # (nc, 6, 3)
        slave = lookup(centers.reshape(-1, dim)).reshape(centers.shape[:2])
        masters = cn[:, quads]  # (nc, 6, 4)
        for s, quad in zip(slave.ravel(), masters.reshape(-1, 4)):
            if s >= 0 and s not in constraints:
                constraints[int(s)] = HangingConstraint(
                    int(s), tuple(int(q) for q in quad), (0.25, 0.25, 0.25, 0.25)
                )
    return tuple(constraints[s] for s in sorted(constraints))


def build_uniform_mesh(grid: VoxelGrid, table: PhaseTable, k: int = 1) -> Mesh:
    """Uniform mesh with k**dim elements per voxel; elements inherit phases."""
    if k < 1:
        raise ValueError("subdivision k must be >= 1")
    grid.validate_phases(table)
    dim = grid.dim
    lattice = tuple(n * k for n in grid.extents)
    h0 = grid.spacing / k

    # element raster order: x fastest, matching grid/file conventions
    ids = np.arange(int(np.prod(lattice)), dtype=np.int64)
    origins = np.empty((ids.size, dim), dtype=np.int64)
    rem = ids
    for ax in range(dim):
        origins[:, ax] = rem % lattice[ax]
        rem = rem // lattice[ax]
    levels = np.zeros(len(origins), dtype=np.int64)
    vox = tuple(origins[:, a] // k for a in range(dim))
    phase = grid.data[vox].astype(np.int64)
    eff = {pid: table.effective(pid) for pid in table.ids()}
    E = np.array([eff[p][0] for p in phase])
    nu = np.array([eff[p][1] for p in phase])

    return build_mesh_from_blocks(
        dim, h0, lattice, origins, levels, phase, E, nu,
        provenance=f"{grid.provenance}|D{lattice[0]}",
    )


def count_ndof(mesh: Mesh) -> tuple[int, int]:
    """(reported ndof, deactivated ndof): hanging nodes are deactivated."""
    n_slaves = len(mesh.hanging)
    ndof = mesh.dim * (mesh.n_nodes - n_slaves)
    return ndof, mesh.dim * n_slaves
