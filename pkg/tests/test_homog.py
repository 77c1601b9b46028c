import numpy as np
import pytest

from srdhomog.fem import ElasticityTensor, SolverOptions, phase_stiffness
from srdhomog.homog import (
    bc_comparison,
    homogenize,
    identify_isotropy_2d,
    identify_isotropy_3d,
    voigt_reuss_bounds,
)
from srdhomog.microstructure import (
    PhaseTable,
    VoxelGrid,
    generate_synthetic,
    phase_fractions,
)


from oracles import laminate_tensor


class TestHomogenize:
    def test_single_phase_equals_phase_tensor(self, direct_opts):
        table = PhaseTable.from_entries([(0, 34000.0, 0.27)])
        grid = VoxelGrid(np.zeros((4, 4, 4), dtype=np.uint8), 0.1)
        C_ph = phase_stiffness(34000.0, 0.27, 3).voigt
        for bc in ("kubc", "pbc", "subc"):
            res = homogenize(grid, table, bc, direct_opts)
            err = np.linalg.norm(res.C.voigt - C_ph) / np.linalg.norm(C_ph)
            assert err <= 1e-8

    @pytest.mark.parametrize("dim", [2, 3])
    def test_laminate_matches_closed_form(self, dim, concrete_table, direct_opts):
        ext = (8,) * dim
        grid = generate_synthetic("laminate", ext, 0.1, axis=0, period=2)
        res = homogenize(grid, concrete_table, "pbc", direct_opts)
        C0 = phase_stiffness(50000.0, 0.3, dim).voigt
        C1 = phase_stiffness(20000.0, 0.3, dim).voigt
        C_exact = laminate_tensor([C0, C1], [0.5, 0.5], dim)
        np.testing.assert_allclose(res.C.voigt, C_exact, rtol=1e-7,
                                   atol=1e-7 * np.abs(C_exact).max())

    def test_bc_ordering_quadratic_forms(self, concrete_table, direct_opts):
        grid = generate_synthetic("blob", (8, 8, 8), 0.1, p=0.5, seed=12, smooth=1.0)
        res = {bc: homogenize(grid, concrete_table, bc, direct_opts)
               for bc in ("kubc", "pbc", "subc")}
        Ck, Cp, Cs = (res[b].C.voigt for b in ("kubc", "pbc", "subc"))
        tol = -1e-8 * np.linalg.norm(Cp)
        assert np.linalg.eigvalsh(Ck - Cp).min() >= tol
        assert np.linalg.eigvalsh(Cp - Cs).min() >= tol

    def test_voigt_reuss_bounds(self, concrete_table, direct_opts):
        grid = generate_synthetic("blob", (8, 8), 0.1, p=0.5, seed=3, smooth=1.0)
        res = homogenize(grid, concrete_table, "pbc", direct_opts)
        fr = phase_fractions(grid)
        Cv, Cr = voigt_reuss_bounds(concrete_table, fr, 2)
        tol = -1e-8 * np.linalg.norm(res.C.voigt)
        assert np.linalg.eigvalsh(Cv.voigt - res.C.voigt).min() >= tol
        assert np.linalg.eigvalsh(res.C.voigt - Cr.voigt).min() >= tol

    def test_scaling_linearity(self, concrete_table, direct_opts):
        grid = generate_synthetic("random", (6, 6), 0.1, p=0.5, seed=5)
        scaled = PhaseTable.from_entries([(0, 100000.0, 0.3), (1, 40000.0, 0.3)])
        C1 = homogenize(grid, concrete_table, "pbc", direct_opts).C.voigt
        C2 = homogenize(grid, scaled, "pbc", direct_opts).C.voigt
        np.testing.assert_allclose(C2, 2.0 * C1, rtol=1e-12)

    def test_axis_permutation(self, concrete_table, direct_opts):
        gx = generate_synthetic("laminate", (8, 8), 0.1, axis=0, period=2)
        gy = generate_synthetic("laminate", (8, 8), 0.1, axis=1, period=2)
        Cx = homogenize(gx, concrete_table, "pbc", direct_opts).C.voigt
        Cy = homogenize(gy, concrete_table, "pbc", direct_opts).C.voigt
        perm = [1, 0, 2]  # swap the 11 and 22 slots
        np.testing.assert_allclose(Cy, Cx[np.ix_(perm, perm)], rtol=1e-9,
                                   atol=1e-9 * np.abs(Cx).max())

    def test_asymmetry_recorded_small(self, concrete_table, direct_opts):
        grid = generate_synthetic("blob", (8, 8), 0.1, p=0.5, seed=9, smooth=1.0)
        res = homogenize(grid, concrete_table, "kubc", direct_opts)
        assert res.asymmetry < 1e-6

    def test_metadata(self, concrete_table, direct_opts):
        grid = generate_synthetic("random", (4, 4), 0.1, p=0.5, seed=2)
        res = homogenize(grid, concrete_table, "pbc", direct_opts, case_name="S4")
        assert res.case_name == "S4"
        assert res.ndof == 2 * 25
        assert res.deactivated_ndof == 0
        assert abs(sum(res.phase_fractions.fractions.values()) - 1) < 1e-12


class TestIsotropy2d:
    def test_round_trip_identified_constants(self):
        C = phase_stiffness(32111.77, 0.203, 2)
        rep = identify_isotropy_2d(C)
        assert rep.E_ident == pytest.approx(32111.77, rel=1e-10)
        assert rep.nu_ident == pytest.approx(0.203, rel=1e-10)
        assert rep.G_ident == pytest.approx(32111.77 / (2 * 1.203), rel=1e-10)
        assert all(v < 1e-12 for v in rep.deviations.values())
        assert rep.physical

    def test_perturbed_c11(self):
        C = phase_stiffness(32000.0, 0.2, 2).voigt.copy()
        C[0, 0] *= 1.01
        rep = identify_isotropy_2d(ElasticityTensor(C))
        assert rep.deviations["C11_vs_C22"] == pytest.approx(0.01 / 1.01, rel=1e-3)
        assert rep.deviations["C11_vs_C22"] == pytest.approx(0.00990, abs=1e-5)

    def test_zero_couplings(self):
        rep = identify_isotropy_2d(phase_stiffness(1000.0, 0.3, 2))
        assert rep.deviations["C13"] == 0.0
        assert rep.deviations["C23"] == 0.0


class TestIsotropy3d:
    def test_round_trip_identified_constants(self):
        C = phase_stiffness(32374.7, 0.29, 3)
        rep = identify_isotropy_3d(C)
        assert rep.E_ident == pytest.approx(32374.7, rel=1e-10)
        assert rep.nu_ident == pytest.approx(0.29, rel=1e-10)
        assert all(v < 1e-12 for v in rep.deviations.values())

    def test_cubic_shear_excess(self):
        E, nu = 30000.0, 0.25
        C = phase_stiffness(E, nu, 3).voigt.copy()
        G = E / (2 * (1 + nu))
        C[3, 3] = 1.2 * G
        rep = identify_isotropy_3d(ElasticityTensor(C))
        assert rep.deviations["C44_vs_G"] == pytest.approx(0.2, rel=1e-10)
        assert rep.deviations["C55_vs_G"] < 1e-12

    def test_zero_couplings(self):
        rep = identify_isotropy_3d(phase_stiffness(1000.0, 0.3, 3))
        for k in ("C14", "C24", "C34"):
            assert rep.deviations[k] == 0.0

    def test_g_consistency_invariant(self):
        rep = identify_isotropy_3d(phase_stiffness(5000.0, 0.1, 3))
        assert rep.G_ident == rep.E_ident / (2 * (1 + rep.nu_ident))


class TestBcComparison:
    def test_reference_deviation_zero(self, concrete_table, direct_opts):
        grid = generate_synthetic("blob", (16, 16), 0.1, p=0.5, seed=4, smooth=1.5)
        cmp = bc_comparison(grid, concrete_table, [8, 16], ("pbc", 16),
                            bcs=("kubc", "pbc"), options=direct_opts)
        ref_devs = cmp.deviations[(16, "pbc")]
        assert all(v == 0.0 for v in ref_devs.values())
        assert set(ref_devs) == {"C11", "C22", "C33", "C12"}

    def test_missing_reference_bc_rejected(self, concrete_table, direct_opts):
        grid = generate_synthetic("random", (8, 8), 0.1, p=0.5, seed=1)
        with pytest.raises(ValueError, match="reference"):
            bc_comparison(grid, concrete_table, [8], ("subc", 8), bcs=("pbc",),
                          options=direct_opts)


class TestVoigtReussBounds:
    def test_single_phase_bounds_coincide(self, direct_opts):
        table = PhaseTable.from_entries([(0, 1000.0, 0.3)])
        from srdhomog.microstructure import PhaseFractions

        fr = PhaseFractions({0: 1.0})
        Cv, Cr = voigt_reuss_bounds(table, fr, 2)
        np.testing.assert_allclose(Cv.voigt, Cr.voigt, rtol=1e-12)

    def test_voigt_dominates_reuss(self, concrete_table):
        from srdhomog.microstructure import PhaseFractions

        fr = PhaseFractions({0: 0.3, 1: 0.7})
        Cv, Cr = voigt_reuss_bounds(concrete_table, fr, 3)
        assert np.linalg.eigvalsh(Cv.voigt - Cr.voigt).min() >= -1e-10
