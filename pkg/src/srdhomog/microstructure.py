"""Multiphase voxel images: phase tables, ingestion, synthetic generators.

A voxel grid stores one small-integer phase id per voxel on a regular
raster with physical spacing; the phase table maps ids to isotropic
elastic constants. Pores carry no user modulus, their effective stiffness
is a configurable fraction of the softest solid phase.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

__all__ = [
    "Phase",
    "PhaseTable",
    "PhaseFractions",
    "VoxelGrid",
    "load_voxel_grid",
    "save_voxel_grid",
    "phase_fractions",
    "extract_subvolume",
    "extract_slice",
    "generate_synthetic",
]

DEFAULT_PORE_STIFFNESS_RATIO = 1e-6
PORE_POISSON = 0.3


@dataclass(frozen=True)
class Phase:
    phase_id: int
    E: float | None  # MPa; None for pores
    nu: float | None
    kind: str = "solid"  # "solid" | "pore"


@dataclass(frozen=True)
class PhaseTable:
    """Phase id -> elastic constants, with derived pore stiffness."""

    phases: tuple[Phase, ...]
    pore_stiffness_ratio: float = DEFAULT_PORE_STIFFNESS_RATIO

    def __post_init__(self):
        ids = [p.phase_id for p in self.phases]
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate phase ids in table: {sorted(ids)}")
        if not self.phases:
            raise ValueError("phase table must contain at least one phase")
        solids = [p for p in self.phases if p.kind == "solid"]
        if not solids:
            raise ValueError("phase table needs at least one solid phase")
        for p in solids:
            if p.E is None or p.E <= 0.0:
                raise ValueError(f"solid phase {p.phase_id} must have E > 0")
            if p.nu is None or not (-1.0 < p.nu < 0.5):
                raise ValueError(f"solid phase {p.phase_id} needs -1 < nu < 0.5")
        for p in self.phases:
            if p.kind == "pore" and (p.E is not None or p.nu is not None):
                raise ValueError(f"pore phase {p.phase_id} must not carry E/nu")
        if self.pore_stiffness_ratio <= 0.0:
            raise ValueError("pore_stiffness_ratio must be positive")

    @classmethod
    def from_entries(cls, entries, pore_stiffness_ratio=DEFAULT_PORE_STIFFNESS_RATIO):
        """entries: iterable of (phase_id, E, nu) for solids or (phase_id, None, None, 'pore')."""
        phases = []
        for e in entries:
            if len(e) == 3:
                pid, E, nu = e
                phases.append(Phase(int(pid), float(E), float(nu), "solid"))
            else:
                pid, E, nu, kind = e
                if kind == "pore":
                    phases.append(Phase(int(pid), None, None, "pore"))
                else:
                    phases.append(Phase(int(pid), float(E), float(nu), kind))
        return cls(tuple(phases), pore_stiffness_ratio)

    def ids(self) -> list[int]:
        return sorted(p.phase_id for p in self.phases)

    def phase(self, phase_id: int) -> Phase:
        for p in self.phases:
            if p.phase_id == phase_id:
                return p
        raise KeyError(f"unknown phase id {phase_id}")

    def min_solid_E(self) -> float:
        return min(p.E for p in self.phases if p.kind == "solid")

    def effective(self, phase_id: int) -> tuple[float, float]:
        """(E, nu) used in the stiffness law; pores get the compliant filler."""
        p = self.phase(phase_id)
        if p.kind == "pore":
            return self.pore_stiffness_ratio * self.min_solid_E(), PORE_POISSON
        return p.E, p.nu

    def with_phase(self, phase: Phase) -> "PhaseTable":
        return PhaseTable(self.phases + (phase,), self.pore_stiffness_ratio)

    def next_free_id(self) -> int:
        return max(p.phase_id for p in self.phases) + 1


@dataclass(frozen=True)
class PhaseFractions:
    fractions: dict[int, float]

    def __post_init__(self):
        total = sum(self.fractions.values())
        if abs(total - 1.0) > 1e-12:
            raise ValueError(f"phase fractions sum to {total!r}, expected 1")
        for pid, f in self.fractions.items():
            if not (0.0 <= f <= 1.0):
                raise ValueError(f"fraction of phase {pid} out of [0,1]: {f}")

    def __getitem__(self, pid: int) -> float:
        return self.fractions.get(pid, 0.0)

    def as_vector(self, ids) -> np.ndarray:
        return np.array([self[i] for i in ids])

    def l1_distance(self, other: "PhaseFractions") -> float:
        ids = set(self.fractions) | set(other.fractions)
        return sum(abs(self[i] - other[i]) for i in ids)


@dataclass
class VoxelGrid:
    """d-dimensional raster of phase ids; indexed data[x, y(, z)].

    ``data`` is stored x-fastest (Fortran layout over (nx, ny[, nz])), which
    matches the raw-u8 file order. ``spacing`` is the voxel edge length in mm.
    """

    data: np.ndarray
    spacing: float
    provenance: str = ""

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim not in (2, 3):
            raise ValueError(f"grid must be 2d or 3d, got {self.data.ndim}d")
        if self.spacing <= 0.0:
            raise ValueError("spacing must be positive")
        if self.data.size == 0:
            raise ValueError("grid must be non-empty")

    @property
    def dim(self) -> int:
        return self.data.ndim

    @property
    def extents(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size_mm(self) -> tuple[float, ...]:
        return tuple(n * self.spacing for n in self.extents)

    def validate_phases(self, table: PhaseTable) -> None:
        present = np.unique(self.data)
        known = set(table.ids())
        unknown = [int(p) for p in present if int(p) not in known]
        if unknown:
            raise ValueError(f"grid contains phase ids not in table: {unknown}")


# ---------------------------------------------------------------------------
# ingestion
# ---------------------------------------------------------------------------

def load_voxel_grid(path, fmt, extents, spacing, table: PhaseTable | None = None):
    """Read a voxel grid from disk.

    fmt "raw-u8": one unsigned byte per voxel, x-fastest, no header.
    fmt "csv-slices": ``path`` is a directory of one CSV per z-slice
    (slice_0000.csv, ...), integer ids, row = y.
    """
    extents = tuple(int(n) for n in extents)
    if fmt == "raw-u8":
        expected = int(np.prod(extents))
        actual = os.path.getsize(path)
        if actual != expected:
            raise ValueError(f"size mismatch for {path}: expected {expected} bytes, got {actual}")
        raw = np.fromfile(path, dtype=np.uint8)
        data = raw.reshape(extents, order="F")
    elif fmt == "csv-slices":
        if len(extents) != 3:
            raise ValueError("csv-slices format requires 3d extents")
        nx, ny, nz = extents
        slices = []
        for iz in range(nz):
            fname = os.path.join(path, f"slice_{iz:04d}.csv")
            if not os.path.exists(fname):
                raise ValueError(f"missing slice file {fname}")
            sl = np.loadtxt(fname, delimiter=",", dtype=np.int64, ndmin=2)
            if sl.shape != (ny, nx):
                raise ValueError(
                    f"slice {iz} has shape {sl.shape}, expected (ny={ny}, nx={nx})"
                )
            slices.append(sl.T)  # -> [x, y]
        data = np.stack(slices, axis=-1).astype(np.uint8)
    else:
        raise ValueError(f"unknown voxel format {fmt!r}")

    grid = VoxelGrid(data, float(spacing), provenance=os.path.basename(str(path)))
    if table is not None:
        grid.validate_phases(table)
    return grid


def save_voxel_grid(grid: VoxelGrid, path, fmt="raw-u8") -> None:
    if fmt == "raw-u8":
        grid.data.astype(np.uint8).flatten(order="F").tofile(path)
    elif fmt == "csv-slices":
        if grid.dim != 3:
            raise ValueError("csv-slices format requires a 3d grid")
        os.makedirs(path, exist_ok=True)
        for iz in range(grid.extents[2]):
            np.savetxt(
                os.path.join(path, f"slice_{iz:04d}.csv"),
                grid.data[:, :, iz].T,
                fmt="%d",
                delimiter=",",
            )
    else:
        raise ValueError(f"unknown voxel format {fmt!r}")


# ---------------------------------------------------------------------------
# observables and subsampling
# ---------------------------------------------------------------------------

def phase_fractions(grid: VoxelGrid) -> PhaseFractions:
    """Exact voxel-count ratios per phase."""
    ids, counts = np.unique(grid.data, return_counts=True)
    total = grid.data.size
    return PhaseFractions({int(i): int(c) / total for i, c in zip(ids, counts)})


def extract_subvolume(grid: VoxelGrid, origin, size) -> VoxelGrid:
    """Axis-aligned subvolume of ``size`` voxels per edge, anchored at ``origin``."""
    origin = tuple(int(o) for o in origin)
    if np.isscalar(size):
        size = (int(size),) * grid.dim
    size = tuple(int(s) for s in size)
    if len(origin) != grid.dim or len(size) != grid.dim:
        raise ValueError("origin/size dimensionality does not match grid")
    axes = "xyz"
    for ax in range(grid.dim):
        if origin[ax] < 0 or size[ax] < 1 or origin[ax] + size[ax] > grid.extents[ax]:
            raise ValueError(
                f"subvolume out of bounds on {axes[ax]}: origin {origin[ax]} + size "
                f"{size[ax]} exceeds extent {grid.extents[ax]}"
            )
    sl = tuple(slice(o, o + s) for o, s in zip(origin, size))
    sub = grid.data[sl].copy()
    prov = f"{grid.provenance}|sub@{origin}S{size[0]}"
    return VoxelGrid(sub, grid.spacing, provenance=prov)


def centered_subvolume(grid: VoxelGrid, size) -> VoxelGrid:
    """Subvolume centered in the grid (default anchoring for size sweeps)."""
    if np.isscalar(size):
        size = (int(size),) * grid.dim
    origin = tuple((n - s) // 2 for n, s in zip(grid.extents, size))
    return extract_subvolume(grid, origin, size)


_AXES = {"X": 0, "Y": 1, "Z": 2}


def extract_slice(grid: VoxelGrid, axis, index: int) -> VoxelGrid:
    """2d slice of a 3d grid normal to ``axis`` at voxel ``index``."""
    if grid.dim != 3:
        raise ValueError("extract_slice requires a 3d grid")
    ax = _AXES[axis.upper()] if isinstance(axis, str) else int(axis)
    index = int(index)
    if not (0 <= index < grid.extents[ax]):
        raise ValueError(
            f"slice index {index} out of range [0, {grid.extents[ax]}) on axis {axis}"
        )
    data = np.take(grid.data, index, axis=ax).copy()
    prov = f"{grid.provenance}|slice{axis}{index}"
    return VoxelGrid(data, grid.spacing, provenance=prov)


# ---------------------------------------------------------------------------
# synthetic generators (deterministic oracles for tests and sweeps)
# ---------------------------------------------------------------------------

def generate_synthetic(kind, extents, spacing, *, axis=0, p=0.5, seed=0,
                       radius=None, period=2, smooth=0.0) -> VoxelGrid:
    """Deterministic synthetic two-phase microstructures.

    kinds: "laminate" (layers normal to ``axis``, alternating every
    ``period``/2 voxels), "sphere-inclusion" (centered ball of phase 1,
    ``radius`` in voxels), "checkerboard", "random" (Bernoulli(p) per voxel),
    "blob" (Gaussian-smoothed noise with correlation length ``smooth`` voxels,
    thresholded so the phase-1 fraction is close to p).
    """
    extents = tuple(int(n) for n in extents)
    dim = len(extents)
    if dim not in (2, 3):
        raise ValueError("extents must be 2d or 3d")
    if not (0.0 <= p <= 1.0):
        raise ValueError("p must lie in [0, 1]")

    idx = np.indices(extents)
    if kind == "laminate":
        half = max(1, int(period) // 2)
        data = (idx[axis] // half) % 2
    elif kind == "checkerboard":
        data = sum(idx) % 2
    elif kind == "sphere-inclusion":
        r = radius if radius is not None else min(extents) / 4.0
        center = [(n - 1) / 2.0 for n in extents]
        dist2 = sum((idx[a] - center[a]) ** 2 for a in range(dim))
        data = (dist2 <= r * r).astype(np.uint8)
    elif kind == "random":
        rng = np.random.default_rng(seed)
        data = (rng.random(extents) < p).astype(np.uint8)
    elif kind == "blob":
        rng = np.random.default_rng(seed)
        fieldv = rng.standard_normal(extents)
        if smooth > 0:
            fieldv = ndimage.gaussian_filter(fieldv, sigma=smooth, mode="wrap")
        thresh = np.quantile(fieldv, 1.0 - p)
        data = (fieldv > thresh).astype(np.uint8)
    else:
        raise ValueError(f"unknown synthetic kind {kind!r}")

    name = f"synthetic:{kind}"
    if kind in ("random", "blob"):
        name += f"(p={p},seed={seed}" + (f",smooth={smooth})" if kind == "blob" else ")")
    return VoxelGrid(data.astype(np.uint8), float(spacing), provenance=name)
