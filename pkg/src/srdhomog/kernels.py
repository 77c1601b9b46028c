"""Hot numeric kernels with a numba fast path and a pure-numpy fallback.

The active backend is chosen once at import time:

* ``SRDHOMOG_KERNELS=numba``  force the jitted kernels (raises if numba is
  missing),
* ``SRDHOMOG_KERNELS=numpy``  force the vectorized numpy versions,
* unset / ``auto``            use numba when importable, else numpy.

Both paths produce identical results; ``benchmarks/bench_kernels.py``
compares their throughput.
"""

from __future__ import annotations

import os

import numpy as np

_MODE = os.environ.get("SRDHOMOG_KERNELS", "auto").lower()
if _MODE not in ("auto", "numba", "numpy"):
    raise ValueError(f"SRDHOMOG_KERNELS must be auto|numba|numpy, got {_MODE!r}")

if _MODE in ("auto", "numba"):
    try:
        from numba import njit

        NUMBA_ENABLED = True
    except ImportError:
        if _MODE == "numba":
            raise
        NUMBA_ENABLED = False
else:
    NUMBA_ENABLED = False


# ---------------------------------------------------------------------------
# numpy reference implementations
# ---------------------------------------------------------------------------

def _strain_at_points_np(dofs, basis_grads):
    """Small-strain Voigt vectors of per-element nodal displacement patches.

    dofs        (npts, nnod, dim)  displacements of the containing element
    basis_grads (npts, nnod, dim)  shape-function gradients at each point
    returns     (npts, nvoigt)     engineering-shear Voigt strains
    """
    npts, nnod, dim = dofs.shape
    grad = np.einsum("pni,pnj->pij", dofs, basis_grads)
    if dim == 2:
        out = np.empty((npts, 3))
        out[:, 0] = grad[:, 0, 0]
        out[:, 1] = grad[:, 1, 1]
        out[:, 2] = grad[:, 0, 1] + grad[:, 1, 0]
    else:
        out = np.empty((npts, 6))
        out[:, 0] = grad[:, 0, 0]
        out[:, 1] = grad[:, 1, 1]
        out[:, 2] = grad[:, 2, 2]
        out[:, 3] = grad[:, 0, 1] + grad[:, 1, 0]
        out[:, 4] = grad[:, 1, 2] + grad[:, 2, 1]
        out[:, 5] = grad[:, 0, 2] + grad[:, 2, 0]
    return out


def _scatter_add_pairs_np(values, slots, out):
    """out[slots[i], :] += values[i, :] with duplicate slots accumulated."""
    np.add.at(out, slots, values)
    return out


def _energy_dot_np(sig, eps, weights):
    """sum_e sum_q w_eq * sig_eq . eps_eq  (Voigt engineering convention)."""
    return float(np.einsum("eqv,eqv,eq->", sig, eps, weights))


# ---------------------------------------------------------------------------
# numba fast paths
# ---------------------------------------------------------------------------

if NUMBA_ENABLED:

    @njit(cache=True)
    def _strain_at_points_nb(dofs, basis_grads):  # pragma: no cover - jitted
        npts, nnod, dim = dofs.shape
        nv = 3 if dim == 2 else 6
        out = np.zeros((npts, nv))
        for p in range(npts):
            for n in range(nnod):
                if dim == 2:
                    ux, uy = dofs[p, n, 0], dofs[p, n, 1]
                    gx, gy = basis_grads[p, n, 0], basis_grads[p, n, 1]
                    out[p, 0] += ux * gx
                    out[p, 1] += uy * gy
                    out[p, 2] += ux * gy + uy * gx
                else:
                    ux, uy, uz = dofs[p, n, 0], dofs[p, n, 1], dofs[p, n, 2]
                    gx, gy, gz = (
                        basis_grads[p, n, 0],
                        basis_grads[p, n, 1],
                        basis_grads[p, n, 2],
                    )
                    out[p, 0] += ux * gx
                    out[p, 1] += uy * gy
                    out[p, 2] += uz * gz
                    out[p, 3] += ux * gy + uy * gx
                    out[p, 4] += uy * gz + uz * gy
                    out[p, 5] += ux * gz + uz * gx
        return out

    @njit(cache=True)
    def _scatter_add_pairs_nb(values, slots, out):  # pragma: no cover - jitted
        for i in range(slots.shape[0]):
            s = slots[i]
            for j in range(values.shape[1]):
                out[s, j] += values[i, j]
        return out

    @njit(cache=True)
    def _energy_dot_nb(sig, eps, weights):  # pragma: no cover - jitted
        ne, nq, nv = sig.shape
        total = 0.0
        for e in range(ne):
            for q in range(nq):
                s = 0.0
                for v in range(nv):
                    s += sig[e, q, v] * eps[e, q, v]
                total += weights[e, q] * s
        return total

    strain_at_points = _strain_at_points_nb
    scatter_add_pairs = _scatter_add_pairs_nb
    energy_dot = _energy_dot_nb
else:
    strain_at_points = _strain_at_points_np
    scatter_add_pairs = _scatter_add_pairs_np
    energy_dot = _energy_dot_np


def backend() -> str:
    """Name of the active kernel backend."""
    return "numba" if NUMBA_ENABLED else "numpy"
