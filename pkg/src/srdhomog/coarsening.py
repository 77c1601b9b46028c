"""Resolution and discretization coarsening.

Resolution coarsening halves every grid axis. Two rules are provided: the
mixture rule averages child elastic constants (new mixed phases appear at
interfaces, the volume average of E is preserved), the majority rule keeps
the original phase set and assigns the modal child phase, breaking ties so
the running global fractions track the original ones.

Adaptive mesh coarsening merges same-phase sibling groups away from
interfaces into quadtree/octree parents; interfaces keep the fine layer and
hanging-node constraints are regenerated after every step.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .mesh import Mesh, build_mesh_from_blocks, count_ndof
from .microstructure import Phase, PhaseFractions, PhaseTable, VoxelGrid

__all__ = [
    "CoarseningReport",
    "coarsen_resolution_mixture",
    "coarsen_resolution_majority",
    "adaptive_coarsen",
]


@dataclass(frozen=True)
class CoarseningReport:
    ndof_before: int
    ndof_after: int
    deactivated_ndof: int

    @property
    def reduction_factor(self) -> float:
        return self.ndof_after / self.ndof_before


def _require_even_extents(grid: VoxelGrid) -> None:
    for ax, n in enumerate(grid.extents):
        if n % 2 != 0:
            raise ValueError(f"extent on axis {'xyz'[ax]} is odd ({n}), cannot halve")


def _child_blocks(data: np.ndarray):
    """Stack the 2**d children of every coarse voxel: (2**d, *coarse_shape)."""
    dim = data.ndim
    shifts = list(itertools.product((0, 1), repeat=dim))
    views = []
    for sh in shifts:
        sl = tuple(slice(o, None, 2) for o in sh)
        views.append(data[sl])
    return np.stack(views, axis=0)


def coarsen_resolution_mixture(grid: VoxelGrid, table: PhaseTable):
    """Halve the resolution, averaging child properties into mixed phases.

    Returns the coarse grid together with a phase table extended by one
    entry per distinct mixed (E, nu) combination. The volume average of E
    over the domain is preserved.
    """
    _require_even_extents(grid)
    grid.validate_phases(table)

    eff = {pid: table.effective(pid) for pid in table.ids()}
    Emap = np.zeros(max(eff) + 1)
    numap = np.zeros(max(eff) + 1)
    for pid, (E, nu) in eff.items():
        Emap[pid], numap[pid] = E, nu

    kids = _child_blocks(grid.data.astype(np.int64))
    n_kids = kids.shape[0]
    E_mean = Emap[kids].sum(axis=0) / n_kids
    nu_mean = numap[kids].sum(axis=0) / n_kids
    uniform = np.all(kids == kids[0], axis=0)

    out = np.where(uniform, kids[0], -1)
    new_table = table
    if not uniform.all():
        mixed_idx = np.nonzero(~uniform)
        pairs = np.stack([E_mean[mixed_idx], nu_mean[mixed_idx]], axis=1)
        uniq, inv = np.unique(pairs, axis=0, return_inverse=True)
        base_id = table.next_free_id()
        for j, (E, nu) in enumerate(uniq):
            new_table = new_table.with_phase(Phase(base_id + j, float(E), float(nu), "solid"))
        out[mixed_idx] = base_id + inv

    coarse = VoxelGrid(
        out.astype(np.int64),
        spacing=2.0 * grid.spacing,
        provenance=f"{grid.provenance}|mix->R{out.shape[0]}",
    )
    return coarse, new_table


def coarsen_resolution_majority(grid: VoxelGrid, original_fractions: PhaseFractions,
                                tie_break: str = "greedy"):
    """Halve the resolution keeping the phase set ("the majority wins").

    Ties are resolved greedily in raster order: the tied phase whose choice
    moves the running global fractions closest (L1) to ``original_fractions``
    wins; equal distances fall back to the lowest phase id. The naive
    ``tie_break="lowest-id"`` variant always picks the lowest tied id and
    serves as a comparison baseline.
    """
    if tie_break not in ("greedy", "lowest-id"):
        raise ValueError("tie_break must be 'greedy' or 'lowest-id'")
    _require_even_extents(grid)

    kids = _child_blocks(grid.data.astype(np.int64))  # (2**d, *coarse)
    n_kids = kids.shape[0]
    phases = np.unique(grid.data).astype(np.int64)
    P = phases.size
    coarse_shape = kids.shape[1:]

    counts = np.zeros((P,) + coarse_shape, dtype=np.int16)
    for j, p in enumerate(phases):
        counts[j] = (kids == p).sum(axis=0)
    maxc = counts.max(axis=0)
    modal_idx = counts.argmax(axis=0)  # lowest tied index; refined below
    n_modal = (counts == maxc).sum(axis=0)
    tie = n_modal > 1

    # raster (x fastest) flattening
    flat_order = "F"
    modal_flat = modal_idx.flatten(order=flat_order)
    tie_flat = tie.flatten(order=flat_order)
    counts_flat = counts.reshape(P, -1, order=flat_order)
    maxc_flat = maxc.flatten(order=flat_order)

    target = original_fractions.as_vector(phases)
    n_total = modal_flat.size
    choice = modal_flat.copy()

    tie_pos = np.flatnonzero(tie_flat)
    if tie_pos.size and tie_break == "greedy":
        # prefix counts of the non-tie assignments ahead of each position
        onehot = np.zeros((n_total, P), dtype=np.int64)
        nontie = ~tie_flat
        onehot[np.flatnonzero(nontie), modal_flat[nontie]] = 1
        prefix = np.cumsum(onehot, axis=0)

        tie_counts = np.zeros(P, dtype=np.int64)
        for pos in tie_pos:
            assigned = prefix[pos] + tie_counts  # includes nothing at pos yet
            n_assigned = int(assigned.sum()) + 1
            cands = np.flatnonzero(counts_flat[:, pos] == maxc_flat[pos])
            best_j, best_d = -1, np.inf
            for j in cands:
                trial = assigned.astype(np.float64)
                trial[j] += 1.0
                d = np.abs(trial / n_assigned - target).sum()
                if d < best_d - 1e-15:
                    best_j, best_d = j, d
            choice[pos] = best_j
            tie_counts[best_j] += 1

    out = phases[choice].reshape(coarse_shape, order=flat_order)
    return VoxelGrid(
        out.astype(grid.data.dtype),
        spacing=2.0 * grid.spacing,
        provenance=f"{grid.provenance}|maj->R{coarse_shape[0]}",
    )


# ---------------------------------------------------------------------------
# adaptive (quadtree/octree) mesh coarsening
# ---------------------------------------------------------------------------

def adaptive_coarsen(mesh: Mesh, steps: int, preserve_boundary: bool = False,
                     require_neighbor_phase: bool = True):
    """Merge same-phase sibling groups into parents, ``steps`` times.

    A 2**d sibling group merges when all siblings share one phase and sit at
    the current finest-mergeable level; with ``require_neighbor_phase`` the
    face neighbors of the parent block must share that phase too, which
    keeps one full fine layer at interfaces. Vertex 2:1 balance is enforced
    by splitting offending merges back (vertex balance, slightly stronger
    than face balance, keeps every hanging node a plain mid-edge/mid-face
    slave). With ``preserve_boundary`` parent blocks touching the outer
    boundary never merge, keeping boundary traces uniform for periodic
    pairing.
    """
    if steps < 0:
        raise ValueError("steps must be >= 0")

    dim = mesh.dim
    lattice = mesh.lattice
    ndof_before, _ = count_ndof(mesh)

    origins = mesh.origin_cell.copy()
    levels = mesh.level.copy()
    phase = mesh.phase.copy()
    E = mesh.E.copy()
    nu = mesh.nu.copy()

    cell_phase = phase[mesh.cell_elem]
    cell_level = levels[mesh.cell_elem].astype(np.int64)

    start = int(levels.max()) + 1
    for s in range(start, start + steps):
        size_child = 1 << (s - 1)
        size_parent = 1 << s
        cand = np.flatnonzero(levels == s - 1)
        if cand.size == 0:
            break

        parent_of = origins[cand] // size_parent
        key = parent_of[:, 0].copy()
        stride = lattice[0]
        for ax in range(1, dim):
            key = key + stride * parent_of[:, ax]
            stride *= lattice[ax]
        order = np.argsort(key, kind="stable")
        key_sorted = key[order]
        uniq, first, cnt = np.unique(key_sorted, return_index=True, return_counts=True)

        merges = []  # (parent_origin, phase)
        merged_children = np.zeros(len(levels), dtype=bool)
        for u in range(uniq.size):
            if cnt[u] != 2**dim:
                continue
            members = cand[order[first[u]: first[u] + cnt[u]]]
            ph = phase[members[0]]
            if not (phase[members] == ph).all():
                continue
            po = origins[members].min(axis=0)
            if preserve_boundary and _touches_boundary(po, size_parent, lattice):
                continue
            if require_neighbor_phase and not _neighbors_share_phase(
                cell_phase, po, size_parent, ph
            ):
                continue
            merges.append((po, members))

        if not merges:
            break

        # apply merges, then split back vertex-balance violations
        accepted = []
        for po, members in merges:
            sl = tuple(slice(po[a], po[a] + size_parent) for a in range(dim))
            cell_level[sl] = s
            accepted.append((po, members))

        changed = True
        while changed:
            changed = False
            kept = []
            for po, members in accepted:
                if _shell_min_level(cell_level, po, size_parent, lattice) < s - 1:
                    sl = tuple(slice(po[a], po[a] + size_parent) for a in range(dim))
                    cell_level[sl] = s - 1
                    changed = True
                else:
                    kept.append((po, members))
            accepted = kept

        if not accepted:
            continue
        drop = np.zeros(len(levels), dtype=bool)
        new_origins, new_levels, new_phase, new_E, new_nu = [], [], [], [], []
        for po, members in accepted:
            drop[members] = True
            new_origins.append(po)
            new_levels.append(s)
            new_phase.append(phase[members[0]])
            new_E.append(E[members[0]])
            new_nu.append(nu[members[0]])

        origins = np.concatenate([origins[~drop], np.array(new_origins)])
        levels = np.concatenate([levels[~drop], np.array(new_levels)])
        phase = np.concatenate([phase[~drop], np.array(new_phase)])
        E = np.concatenate([E[~drop], np.array(new_E)])
        nu = np.concatenate([nu[~drop], np.array(new_nu)])

    # canonical raster order by origin
    key = origins[:, 0].copy()
    stride = lattice[0]
    for ax in range(1, dim):
        key = key + stride * origins[:, ax]
        stride *= lattice[ax]
    order = np.argsort(key, kind="stable")

    out = build_mesh_from_blocks(
        dim, mesh.h0, lattice,
        origins[order], levels[order], phase[order], E[order], nu[order],
        provenance=f"{mesh.provenance}|adap{steps}",
    )
    ndof_after, deactivated = count_ndof(out)
    report = CoarseningReport(ndof_before, ndof_after, deactivated)
    return out, report


def _touches_boundary(po, size, lattice) -> bool:
    return any(po[a] == 0 or po[a] + size == lattice[a] for a in range(len(lattice)))


def _neighbors_share_phase(cell_phase, po, size, ph) -> bool:
    """Phases of the face-adjacent cell slabs around block [po, po+size)."""
    dim = cell_phase.ndim
    for ax in range(dim):
        for side, coord in ((0, po[ax] - 1), (1, po[ax] + size)):
            if coord < 0 or coord >= cell_phase.shape[ax]:
                continue
            sl = [slice(po[a], po[a] + size) for a in range(dim)]
            sl[ax] = coord
            if not (cell_phase[tuple(sl)] == ph).all():
                return False
    return True


def _shell_min_level(cell_level, po, size, lattice) -> int:
    """Min level over the 1-cell shell (incl. diagonals) around the block."""
    dim = len(lattice)
    lo = [max(po[a] - 1, 0) for a in range(dim)]
    hi = [min(po[a] + size + 1, lattice[a]) for a in range(dim)]
    region = cell_level[tuple(slice(lo[a], hi[a]) for a in range(dim))]
    inner = cell_level[tuple(slice(po[a], po[a] + size) for a in range(dim))]
    # min over shell = min(region) unless the block itself is the min
    rmin = int(region.min())
    if rmin < int(inner.min()):
        return rmin
    # block interior shares the minimum: recompute excluding the block
    mask = np.ones(region.shape, dtype=bool)
    msl = tuple(
        slice(po[a] - lo[a], po[a] - lo[a] + size) for a in range(dim)
    )
    mask[msl] = False
    if not mask.any():
        return inner.min()
    return int(region[mask].min())
