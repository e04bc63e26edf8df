"""Array-batched stress updates must reproduce the scalar reference loops.

Populations are built to exercise every return branch at once (elastic,
plane, both edges, apex for Mohr-Coulomb; elastic, regular return, nose
consolidation and gas phase for Nor-Sand) so the agreement checks cover the
same code paths the solver will hit mid-collapse.
"""

import math

import numpy as np
import pytest

from poromp.constitutive import (
    GAS_PHASE_BE,
    ConstitutiveState,
    ElasticParams,
    MaterialModel,
    MohrCoulombParams,
    NorSandParams,
    elastic_update_many,
    hencky_elastic_update,
    initial_state,
    material_update_arrays,
    mohr_coulomb_update,
    mohr_coulomb_update_many,
    norsand_update,
    norsand_update_many,
)

EL = ElasticParams(E=10e6, nu=0.3)
MC = MohrCoulombParams(E=10e6, nu=0.0, c=20e3, phi=math.radians(30.0))
NS = NorSandParams(
    G_shear=40e6, kappa=0.002, v_c0=1.892, lambda_c=0.02,
    M_cs=1.0, N_yield=0.1, N_bar=0.1, h_hard=100.0, alpha_dil=-2.0)


def random_rotations(rng, n):
    q, _ = np.linalg.qr(rng.standard_normal((n, 3, 3)))
    dets = np.linalg.det(q)
    q[:, :, 0] *= dets[:, None]
    return q


def random_Be(rng, n, spread=0.05):
    R = random_rotations(rng, n)
    lam = 1.0 + spread * rng.uniform(-1.0, 1.0, (n, 3))
    return np.einsum("pij,pj,pkj->pik", R, lam, R)


def random_dF(rng, n, spread=0.01):
    dF = np.eye(3) + spread * rng.uniform(-1.0, 1.0, (n, 3, 3))
    assert np.all(np.linalg.det(dF) > 0.0)
    return dF


class TestElasticBatch:
    def test_matches_scalar_loop(self):
        rng = np.random.default_rng(11)
        n = 40
        B_e = random_Be(rng, n)
        dF = random_dF(rng, n)
        tau, B_new = elastic_update_many(B_e, dF, EL)
        state = initial_state(MaterialModel("elastic", EL))
        for p in range(n):
            tau_s, B_s = hencky_elastic_update(state, dF[p], B_e[p], EL)
            assert np.allclose(tau[p], tau_s, rtol=1e-12, atol=1e-3), \
                f"batched Kirchhoff stress diverged at row {p}"
            assert np.allclose(B_new[p], B_s, rtol=1e-12, atol=1e-14), \
                f"batched elastic tensor diverged at row {p}"

    def test_inverted_increment_names_the_particle(self):
        B_e = np.broadcast_to(np.eye(3), (3, 3, 3)).copy()
        dF = np.broadcast_to(np.eye(3), (3, 3, 3)).copy()
        dF[1] = -np.eye(3)
        with pytest.raises(ValueError, match=r"\[1\]"):
            elastic_update_many(B_e, dF, EL)


def mc_branch_population():
    """Increments that drive an unstressed state to each return branch."""
    shear = np.eye(3)
    shear[0, 1] = 0.008
    return np.stack([
        np.diag([1.0 - 1e-5, 1.0, 1.0]),       # elastic
        shear,                                  # main-plane return
        np.diag([0.97, 1.0, 1.0]),              # edge with s2 = s3
        np.diag([1.015, 1.015, 0.999]),         # edge with s1 = s2
        np.diag([1.02, 1.02, 1.02]),            # apex
    ])


class TestMohrCoulombBatch:
    def test_branch_population_matches_scalar(self):
        dF = mc_branch_population()
        n = dF.shape[0]
        B_e = np.broadcast_to(np.eye(3), (n, 3, 3)).copy()
        Ep = np.zeros(n)
        tau, B_new, ep_new = mohr_coulomb_update_many(B_e, dF, Ep, MC)
        state = initial_state(MaterialModel("mohr_coulomb", MC), p0=0.0)
        for p in range(n):
            tau_s, B_s, ep_s = mohr_coulomb_update(state, dF[p], B_e[p], MC)
            assert np.allclose(tau[p], tau_s, rtol=1e-12, atol=1e-4), \
                f"stress mismatch on branch row {p}"
            assert np.allclose(B_new[p], B_s, rtol=1e-12, atol=1e-14)
            assert ep_new[p] == pytest.approx(ep_s, abs=1e-15), \
                f"plastic strain measure mismatch on branch row {p}"
        assert ep_new[0] == 0.0, "the elastic row may not accumulate Ep_d"
        assert (ep_new[1:4] > 0.0).all(), "rows 1..3 were built to shear"
        assert ep_new[4] == 0.0, \
            "the hydrostatic apex return carries no deviatoric plastic flow"
        c_f, phi_f = MC.reduced
        apex = c_f * math.cos(phi_f) / math.sin(phi_f)
        assert np.allclose(tau[4], apex * np.eye(3), rtol=1e-9), \
            "row 4 must land on the apex"

    def test_random_walk_population_matches_scalar(self):
        # several substeps so the batch carries plastic history forward
        rng = np.random.default_rng(23)
        n = 30
        B_e = np.broadcast_to(np.eye(3), (n, 3, 3)).copy()
        Ep = np.zeros(n)
        state = initial_state(MaterialModel("mohr_coulomb", MC), p0=0.0)
        B_ref = B_e.copy()
        ep_ref = Ep.copy()
        for _ in range(5):
            dF = random_dF(rng, n, spread=0.004)
            tau, B_e, Ep = mohr_coulomb_update_many(B_e, dF, Ep, MC)
            for p in range(n):
                tau_s, B_ref[p], ep_ref[p] = mohr_coulomb_update(
                    ConstitutiveState(B_e=np.eye(3), Ep_d_acc=float(ep_ref[p])),
                    dF[p], B_ref[p], MC)
                assert np.allclose(tau[p], tau_s, rtol=1e-11, atol=1e-2), \
                    f"stress history diverged at row {p}"
            assert np.allclose(B_e, B_ref, rtol=1e-11, atol=1e-13)
            assert np.allclose(Ep, ep_ref, rtol=1e-11, atol=1e-15)
        assert (Ep > 0.0).any(), "the walk spread was chosen to cross yield"
        _ = state


def ns_population():
    """States and increments covering elastic, plastic, nose and gas rows."""
    n = 6
    B_e = np.broadcast_to(np.eye(3), (n, 3, 3)).copy()
    dF = np.broadcast_to(np.eye(3), (n, 3, 3)).copy()
    # the NC state sits on the yield nose, so only shear-free swelling
    # moves inward elastically
    dF[0] = (1.0 + 1e-5) * np.eye(3)
    dF[1] = np.diag([1.0 - 2e-4, 1.0, 1.0])        # shear-driven yield
    dF[2] = (1.0 - 1e-4) * np.eye(3)               # isotropic: nose return
    dF[3] = np.diag([1.0 - 3e-4, 1.0 + 1e-4, 1.0])  # yield, different path
    dF[4] = np.diag([1.0 - 1e-4, 1.0, 1.0])
    J_bar = np.linalg.det(dF)
    J_bar[5] = 1.7                                  # gas phase via v > v_crit
    p0 = np.full(n, -100e3)
    states = [initial_state(MaterialModel("norsand", NS), p0=-100e3, v0=1.70)
              for _ in range(n)]
    return B_e, dF, J_bar, p0, states


class TestNorSandBatch:
    def test_population_matches_scalar(self):
        B_e, dF, J_bar, p0, states = ns_population()
        n = len(states)
        Ep = np.zeros(n)
        p_i = np.array([s.p_i for s in states])
        v = np.full(n, 1.70)
        v0 = np.full(n, 1.70)
        ev0 = np.zeros(n)
        tau, B_new, ep_new, pi_new, v_new = norsand_update_many(
            B_e, dF, J_bar, Ep, p_i, v, v0, p0, ev0, NS)
        for p in range(n):
            tau_s, B_s, st = norsand_update(
                states[p], dF[p], B_e[p], float(J_bar[p]), NS)
            assert np.allclose(tau[p], tau_s, rtol=1e-7, atol=1e-2), \
                f"stress mismatch at row {p}"
            assert np.allclose(B_new[p], B_s, rtol=1e-7, atol=1e-12), \
                f"elastic tensor mismatch at row {p}"
            assert ep_new[p] == pytest.approx(st.Ep_d_acc, abs=1e-9)
            assert pi_new[p] == pytest.approx(st.p_i, rel=1e-7)
            assert v_new[p] == pytest.approx(st.v, rel=1e-14)
        assert ep_new[0] == 0.0, "row 0 unloads elastically"
        assert ep_new[1] > 0.0 and ep_new[2] > 0.0
        assert np.allclose(B_new[5], GAS_PHASE_BE), \
            "row 5 exceeds v_crit and must flip to the gas phase"
        assert np.all(tau[5] == 0.0), "gas rows are stress free"

    def test_nose_row_rides_the_apex(self):
        # isotropic loading has no regular return; the nose stage must land
        # the batch row on pbar = nose_ratio * pi_bar
        B_e, dF, J_bar, p0, states = ns_population()
        n = len(states)
        tau, _, ep, pi_new, _ = norsand_update_many(
            B_e, dF, J_bar, np.zeros(n),
            np.array([s.p_i for s in states]),
            np.full(n, 1.70), np.full(n, 1.70), p0, np.zeros(n), NS)
        nose = (1.0 / 0.9) ** 9.0
        pbar = -np.trace(tau[2]) / 3.0
        assert pbar / -pi_new[2] == pytest.approx(nose, rel=1e-7), \
            "the isotropic row must consolidate on the yield nose"
        assert -pi_new[2] > 38742.0, "consolidation hardens the image pressure"

    def test_yield_disabled_returns_the_trial(self):
        # the gravity-ramp phase runs the hyperelastic law only, with the
        # image pressure still unset
        n = 3
        B_e = np.broadcast_to(np.eye(3), (n, 3, 3)).copy()
        dF = np.stack([np.diag([1.0 - 5e-4, 1.0, 1.0])] * n)
        tau, B_new, ep, pi, v_new = norsand_update_many(
            B_e, dF, np.linalg.det(dF), np.zeros(n), np.zeros(n),
            np.full(n, 1.55), np.full(n, 1.55), np.full(n, -2000.0),
            np.zeros(n), NS, yield_enabled=False)
        assert np.all(ep == 0.0), "no plastic flow while the yield is off"
        assert np.all(pi == 0.0), "the image pressure must stay untouched"
        expect = dF[0] @ B_e[0] @ dF[0].T
        assert np.allclose(B_new[0], expect, rtol=1e-12), \
            "the elastic tensor must be the plain push-forward"
        # same increment through the yield-enabled path with a set image
        # pressure returns a different (plastically relaxed) stress
        st = initial_state(MaterialModel("norsand", NS), p0=-2000.0, v0=1.55)
        tau_on, _, ep_on, _, _ = norsand_update_many(
            B_e, dF, np.linalg.det(dF), np.zeros(n),
            np.full(n, st.p_i), np.full(n, 1.55), np.full(n, 1.55),
            np.full(n, -2000.0), np.zeros(n), NS)
        assert ep_on[0] > 0.0
        assert not np.allclose(tau_on[0], tau[0], rtol=1e-3)

    def test_unset_image_pressure_is_reported(self):
        n = 2
        B_e = np.broadcast_to(np.eye(3), (n, 3, 3)).copy()
        dF = np.broadcast_to(np.eye(3), (n, 3, 3)).copy()
        with pytest.raises(ValueError, match="initialization"):
            norsand_update_many(
                B_e, dF, np.ones(n), np.zeros(n), np.zeros(n),
                np.full(n, 1.7), np.full(n, 1.7), np.full(n, -100e3),
                np.zeros(n), NS)

    def test_permutation_independence(self):
        B_e, dF, J_bar, p0, states = ns_population()
        n = len(states)
        p_i = np.array([s.p_i for s in states])
        args = (np.zeros(n), p_i, np.full(n, 1.70), np.full(n, 1.70),
                p0, np.zeros(n))
        tau, B_new, ep, pi, v = norsand_update_many(B_e, dF, J_bar, *args, NS)
        perm = np.array([3, 5, 0, 2, 4, 1])
        tau_p, B_p, ep_p, pi_p, v_p = norsand_update_many(
            B_e[perm], dF[perm], J_bar[perm],
            *(a[perm] for a in args), NS)
        assert np.array_equal(tau_p, tau[perm]), \
            "row results may not depend on batch membership"
        assert np.array_equal(B_p, B_new[perm])
        assert np.array_equal(pi_p, pi[perm])


class TestArrayDispatcher:
    def make_soil(self, n, model):
        from poromp.grid import build_grid
        from poromp.particles import MixtureConstants, seed_region

        grid = build_grid((0.5, 0.5), 0.5,
                          {e: "free" for e in
                           ("left", "right", "bottom", "top")})
        ppc = {4: 2, 9: 3, 16: 4}.get(n)
        soil = seed_region([(0, 0), (0.5, 0), (0.5, 0.5), (0, 0.5)], grid,
                           ppc, "soil", MixtureConstants(), n0=0.4, k0=1e-3)
        assert len(soil) == n
        if model.name == "norsand":
            soil.p0[:] = -100e3
            soil.p_i[:] = model.params.initial_image_pressure(-100e3)
            soil.v[:] = soil.v0[:] = 1.70
        return soil

    def test_mohr_coulomb_population_advances_in_place(self):
        model = MaterialModel("mohr_coulomb", MC)
        soil = self.make_soil(4, model)
        dF = mc_branch_population()[1:]
        dF = np.concatenate([dF, dF])[:4]
        tau = material_update_arrays(model, soil, dF)
        assert tau.shape == (4, 3, 3)
        assert (soil.Ep_d[:3] > 0.0).all(), "the shear rows must yield"
        assert np.abs(np.trace(tau[3], axis1=0, axis2=1)) > 0.0, \
            "the apex row still carries the capped hydrostatic stress"
        assert np.allclose(soil.tau, tau)

    def test_plasticity_flag_reroutes_mohr_coulomb_to_elastic(self):
        model = MaterialModel("mohr_coulomb", MC)
        soil = self.make_soil(4, model)
        dF = np.stack([np.diag([0.97, 1.0, 1.0])] * 4)
        material_update_arrays(model, soil, dF, plasticity_on=False)
        assert np.all(soil.Ep_d == 0.0), \
            "the elastic ramp phase may not accumulate plastic strain"
        lam_l, mu = MC.lame
        assert soil.tau[0, 0, 0] == pytest.approx(
            (lam_l + 2 * mu) * math.log(0.97), rel=1e-9)

    def test_norsand_uses_accumulated_default_jbar(self):
        model = MaterialModel("norsand", NS)
        soil = self.make_soil(4, model)
        dF = np.stack([np.diag([1.0 - 2e-4, 1.0, 1.0])] * 4)
        material_update_arrays(model, soil, dF)
        st = initial_state(model, p0=-100e3, v0=1.70)
        tau_s, _, st_new = norsand_update(
            st, dF[0], np.eye(3), float(np.linalg.det(dF[0])), NS)
        assert np.allclose(soil.tau[0], tau_s, rtol=1e-7, atol=1e-2)
        assert soil.v[0] == pytest.approx(st_new.v, rel=1e-13), \
            "specific volume must advance with J_bar"
        assert soil.p_i[0] == pytest.approx(st_new.p_i, rel=1e-7)
