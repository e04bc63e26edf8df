"""Consolidation series oracles: frozen values and structural properties.

The frozen constants were cross-checked against a 40-digit mpmath
summation of the same series before being pinned here.
"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from poromp.oracles import (
    ConsolidationParams,
    terzaghi_pressure,
    xie_pressure,
    xie_settlement,
)

TERZAGHI_COLUMN = ConsolidationParams.from_elastic(
    H=1.0, q=10e3, E=10e6, nu=0.0, k=1e-3)
XIE_COLUMN = ConsolidationParams.from_elastic(
    H=1.0, q=200e3, E=1e6, nu=0.0, k=1e-3)


class TestConsolidationParams:
    def test_constrained_compliance_from_elastic(self):
        p = ConsolidationParams.from_elastic(H=1.0, q=1.0, E=10e6, nu=0.0, k=1e-3)
        assert p.m_v == pytest.approx(1e-7), "nu=0 compliance must be 1/E"
        p3 = ConsolidationParams.from_elastic(H=1.0, q=1.0, E=10e6, nu=0.3, k=1e-3)
        expected = (1.3 * 0.4) / (0.7 * 10e6)
        assert p3.m_v == pytest.approx(expected, rel=1e-12)

    def test_consolidation_coefficient(self):
        # c_v = k / (rho_w g m_v) with g = 9.81 by convention
        assert TERZAGHI_COLUMN.c_v == pytest.approx(1.0193679918, rel=1e-9)
        assert XIE_COLUMN.c_v == pytest.approx(0.10193679918, rel=1e-9)

    def test_final_settlement_value(self):
        # H (1 - exp(-m_v q)) with m_v q = 0.2
        assert XIE_COLUMN.final_settlement == pytest.approx(0.18126924692, rel=1e-9)

    @pytest.mark.parametrize("bad", [
        dict(H=-1.0, q=1.0, m_v=1e-7, k=1e-3),
        dict(H=1.0, q=0.0, m_v=1e-7, k=1e-3),
        dict(H=1.0, q=1.0, m_v=1e-7, k=1e-3, series_terms=50),
    ])
    def test_invalid_parameters_rejected(self, bad):
        with pytest.raises(ValueError):
            ConsolidationParams(**bad)


class TestTerzaghiPressure:
    def test_drainage_surface_is_zero(self):
        for Tv in (0.0, 0.01, 0.5, 3.0):
            assert terzaghi_pressure(Tv, 0.0) == 0.0, \
                "pressure at the drained surface must vanish"

    def test_long_time_decays_to_zero(self):
        z = np.linspace(0.0, 1.0, 11)
        assert np.all(np.abs(terzaghi_pressure(50.0, z)) < 1e-15)

    def test_frozen_value_tv_half_base(self):
        val = terzaghi_pressure(0.5, 1.0, terms=200)
        assert val == pytest.approx(0.37077742979952391, rel=1e-13), \
            "200-term series at Tv=0.5, z=H drifted from the pinned value"
        # the same number at coarse (4-decimal) precision
        assert abs(val - 0.3709) < 2e-4

    def test_initial_profile_is_unity_inside(self):
        # at Tv=0 the series reproduces the step load everywhere below the
        # drainage surface (Gibbs oscillation shrinks with the term count)
        val = terzaghi_pressure(0.0, 0.5, terms=400_0)
        assert val == pytest.approx(1.0, abs=1e-3)

    def test_monotone_decay_in_time(self):
        Tv = np.linspace(0.01, 2.0, 40)
        vals = terzaghi_pressure(Tv, 0.7)
        assert np.all(np.diff(vals) < 0.0), \
            "pore pressure at fixed depth must decay monotonically"

    def test_term_doubling_converged(self):
        for Tv in (0.01, 0.1, 1.0):
            a = terzaghi_pressure(Tv, 0.9, terms=200)
            b = terzaghi_pressure(Tv, 0.9, terms=400)
            assert abs(a - b) < 1e-12

    def test_broadcasting(self):
        out = terzaghi_pressure(np.linspace(0.0, 1.0, 5)[:, None],
                                np.linspace(0.0, 1.0, 7)[None, :])
        assert out.shape == (5, 7)

    def test_domain_validation(self):
        with pytest.raises(ValueError):
            terzaghi_pressure(-0.1, 0.5)
        with pytest.raises(ValueError):
            terzaghi_pressure(0.1, 1.5)

    @given(Tv=st.floats(0.01, 5.0), zeta=st.floats(0.0, 1.0))
    @settings(max_examples=60, deadline=None)
    def test_bounded_between_zero_and_one(self, Tv, zeta):
        val = terzaghi_pressure(Tv, zeta)
        assert -1e-12 <= val <= 1.0 + 1e-12


class TestXieSettlement:
    def test_zero_time_zero_settlement(self):
        S, U = xie_settlement(0.0, XIE_COLUMN)
        assert abs(S) < 1e-12 and abs(U) < 1e-12, \
            "series must sum to one at Tv=0"

    def test_frozen_degree_of_consolidation(self):
        S, U = xie_settlement(1.0, XIE_COLUMN)
        assert U == pytest.approx(0.9312596784633337, rel=1e-13), \
            "degree of consolidation at Tv=1 drifted from the pinned value"
        assert abs(U - 0.9313) < 1e-4
        assert S == pytest.approx(U * XIE_COLUMN.final_settlement, rel=1e-14)

    def test_limit_settlement(self):
        S, U = xie_settlement(50.0, XIE_COLUMN)
        assert U == pytest.approx(1.0, abs=1e-15)
        assert S == pytest.approx(0.18126924692201812, rel=1e-12)

    def test_monotone_in_time(self):
        Tv = np.linspace(0.0, 3.0, 50)
        S, U = xie_settlement(Tv, XIE_COLUMN)
        assert np.all(np.diff(S) > 0.0), "settlement must grow monotonically"

    def test_term_doubling_converged(self):
        import dataclasses
        double = dataclasses.replace(XIE_COLUMN, series_terms=400)
        for Tv in (0.01, 0.5, 2.0):
            assert abs(xie_settlement(Tv, XIE_COLUMN)[1]
                       - xie_settlement(Tv, double)[1]) < 1e-12


class TestXiePressure:
    def test_long_time_vanishes(self):
        z = np.linspace(0.0, 1.0, 5)
        assert np.all(np.abs(xie_pressure(60.0, z, XIE_COLUMN)) < 1e-10)

    def test_small_time_base_pressure_reaches_load(self):
        p = xie_pressure(1e-4, 1.0, XIE_COLUMN)
        assert p == pytest.approx(XIE_COLUMN.q, rel=1e-6), \
            "undissipated base pressure must equal the surface load"

    def test_small_load_limit_recovers_terzaghi(self):
        """With m_v q -> 0 the log solution linearizes onto Terzaghi."""
        tiny = ConsolidationParams(H=1.0, q=1.0, m_v=1e-6, k=1e-3,
                                   series_terms=400)
        z = np.linspace(0.0, 1.0, 9)
        for Tv in (0.05, 0.2, 1.0):
            linear = terzaghi_pressure(Tv, z, terms=400) * tiny.q
            full = xie_pressure(Tv, z, tiny)
            assert np.max(np.abs(full - linear)) < 1e-6 * tiny.q

    def test_nonlinear_profile_sits_above_terzaghi(self):
        """The log map g(S) = ln(1 + (e^a - 1) S)/a is concave with
        g(0) = 0 and g(1) = 1, so the normalized finite-strain pressure
        must sit above the linear profile at equal Tv."""
        z = np.linspace(0.05, 1.0, 8)
        lin = terzaghi_pressure(0.3, z) * XIE_COLUMN.q
        nl = xie_pressure(0.3, z, XIE_COLUMN)
        assert np.all(nl > lin), "log-wrapped series must sit above Terzaghi"

    def test_auto_term_growth_keeps_log_defined(self):
        # tiny Tv with a short series: the log argument must be kept
        # positive by the automatic term doubling; Gibbs overshoot may
        # push p marginally past q
        p = xie_pressure(1e-9, 0.37, ConsolidationParams(
            H=1.0, q=200e3, m_v=1e-6, k=1e-3, series_terms=100))
        assert np.isfinite(p) and 0.0 <= p <= 200e3 * 1.02

    def test_domain_validation(self):
        with pytest.raises(ValueError):
            xie_pressure(0.1, 1.5, XIE_COLUMN)
        with pytest.raises(ValueError):
            xie_pressure(-0.1, 0.5, XIE_COLUMN)
