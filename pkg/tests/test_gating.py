import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from maspolab.gating import (
    ConfigError,
    DomainError,
    GateMethod,
    GateParams,
    TokenStep,
    clamp_log_ratio,
    dac_bounds,
    maspo_gate,
    sapo_gate,
    sigma_neg,
    sigma_pos,
    surrogate_terms,
    token_surrogate,
)

# Reference values below were evaluated with mpmath at 30 digits.
SIGMA_POS_QUARTER = 2.06
SIGMA_NEG_UNIT = 0.970873786407766990291262135922
MASPO_GATE_REF = 0.970973480925140331942180914796
SAPO_GATE_REF = 0.940014848806377956277210780084
DAC_UPPER_HALF = 1.30622577482985496523666132303
DAC_UNIT = (0.723606797749978969640917366873, 1.17082039324993690892275210062)


def step(ratio, adv, pi=1.0):
    return TokenStep.from_ratio(ratio, adv, pi)


class TestParams:
    def test_defaults_valid(self):
        p = GateParams()
        assert (p.sigma_base, p.alpha, p.beta_low, p.beta_high) == (1.0, 0.3, 0.03, 0.03)
        assert (p.sigma_cap, p.risk_floor, p.risk_cap) == (10.0, 0.1, 10.0)

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"sigma_base": 0.0},
            {"sigma_base": 20.0},  # above sigma_cap
            {"alpha": 1.5},
            {"eps_low": -0.1},
            {"risk_floor": 1.0},
            {"risk_cap": 0.9},
            {"tau_neg": 0.0},
            {"beta_high": float("nan")},
        ],
    )
    def test_invalid(self, kwargs):
        with pytest.raises(ConfigError):
            GateParams(**kwargs)

    def test_token_step_validation(self):
        with pytest.raises(DomainError):
            TokenStep.from_ratio(1.0, 1.0, 0.0)
        with pytest.raises(DomainError):
            TokenStep(ratio=2.0, advantage=1.0, pi_old=0.5, log_ratio=0.0)
        s = TokenStep.from_log_ratio(0.3, 1.0, 0.5)
        assert abs(s.ratio - math.exp(s.log_ratio)) <= 1e-12 * s.ratio

    def test_log_ratio_clamped(self):
        assert clamp_log_ratio(100.0) == 20.0
        assert TokenStep.from_log_ratio(-1e4, 1.0, 0.5).log_ratio == -20.0


class TestSigma:
    def test_unit(self):
        p = GateParams(sigma_base=1.0)
        assert sigma_pos(1.0, 1e-12, p) == pytest.approx(1.0, abs=1e-12)
        assert sigma_neg(1.0, -1e-12, p) == pytest.approx(1.0, abs=1e-12)

    def test_cap_binds(self):
        p = GateParams(sigma_base=1.0, alpha=0.5)
        assert sigma_pos(1e-4, 1e-12, p) == pytest.approx(10.0, rel=1e-12)

    def test_mass_and_risk(self):
        p = GateParams(sigma_base=1.0, alpha=0.5, beta_high=0.03)
        assert sigma_pos(0.25, 1.0, p) == pytest.approx(SIGMA_POS_QUARTER, rel=1e-14)

    def test_negative_risk(self):
        p = GateParams(sigma_base=1.0, beta_low=0.03)
        assert sigma_neg(1.0, -1.0, p) == pytest.approx(SIGMA_NEG_UNIT, rel=1e-14)

    def test_negative_floor(self):
        p = GateParams(sigma_base=1.0, beta_low=0.03)
        assert sigma_neg(1.0, -1000.0, p) == pytest.approx(0.1, rel=1e-14)

    @pytest.mark.parametrize("fn", [sigma_pos, sigma_neg])
    def test_domain(self, fn):
        with pytest.raises(DomainError):
            fn(0.0, 1.0, GateParams())
        with pytest.raises(DomainError):
            fn(-0.5, 1.0, GateParams())

    def test_adversarial_bounds(self):
        p = GateParams()
        for pi in (1e-12, 1.0):
            for a in (1e6, 1e-6):
                for s in (sigma_pos(pi, a, p), sigma_neg(pi, -a, p)):
                    assert p.sigma_base * p.risk_floor <= s <= p.sigma_cap * p.risk_cap


class TestMaspoGate:
    def test_identity_at_one(self):
        for a in (-3.0, 0.0, 0.5):
            assert maspo_gate(step(1.0, a), GateParams()) == 1.0

    def test_lagging_positive_token(self):
        assert maspo_gate(step(0.8, 2.0), GateParams()) == 1.0

    def test_reference_value(self):
        p = GateParams(sigma_base=1.0, alpha=0.5, beta_high=0.03)
        assert maspo_gate(step(1.5, 1.0, 0.25), p) == pytest.approx(MASPO_GATE_REF, rel=1e-14)

    def test_zero_advantage_is_otherwise_branch(self):
        assert maspo_gate(step(3.0, 0.0), GateParams()) == 1.0

    def test_array_matches_scalar(self):
        rng = np.random.default_rng(0)
        p = GateParams()
        rho = np.exp(rng.uniform(-1, 1, 50))
        adv = rng.normal(0, 2, 50)
        pi = rng.uniform(0.01, 1, 50)
        vec = maspo_gate(rho, adv, pi, p)
        for k in range(50):
            assert vec[k] == maspo_gate(TokenStep(rho[k], adv[k], pi[k], math.log(rho[k])), p)

    def test_strictly_positive_under_underflow(self):
        assert maspo_gate(step(1e8, 5.0), GateParams()) > 0

    @settings(max_examples=300, deadline=None)
    @given(
        rho=st.floats(1e-6, 1e6),
        adv=st.floats(-100, 100),
        pi=st.floats(1e-9, 1.0),
    )
    def test_range_and_unilateral(self, rho, adv, pi):
        p = GateParams()
        g = maspo_gate(rho, adv, pi, p)
        assert 0 < g <= 1
        if math.copysign(1.0, adv) * (rho - 1) <= 0 or adv == 0:
            assert g == 1.0

    @settings(max_examples=200, deadline=None)
    @given(d1=st.floats(1e-3, 2.0), d2=st.floats(1e-3, 2.0), adv=st.floats(0.01, 5), pi=st.floats(1e-4, 1))
    def test_decreasing_in_distance(self, d1, d2, adv, pi):
        p = GateParams()
        lo, hi = sorted((d1, d2))
        if hi - lo < 1e-6:
            return
        assert maspo_gate(1 + hi, adv, pi, p) < maspo_gate(1 + lo, adv, pi, p)
        if hi < 0.999:
            assert maspo_gate(1 - hi, -adv, pi, p) < maspo_gate(1 - lo, -adv, pi, p)

    def test_deterministic(self):
        p = GateParams()
        s = step(1.37, 0.9, 0.123)
        assert len({maspo_gate(s, p) for _ in range(10)}) == 1


class TestSapoGate:
    def test_identity(self):
        assert sapo_gate(step(1.0, 1.0), GateParams()) == 1.0

    def test_reference_value(self):
        p = GateParams(tau_pos=1.0)
        assert sapo_gate(step(1.5, 1.0), p) == pytest.approx(SAPO_GATE_REF, rel=1e-14)

    def test_saturates(self):
        p = GateParams(tau_pos=1.0)
        assert sapo_gate(1e4, 1.0, None, p) < 1e-300
        assert sapo_gate(1e4, 1.0, None, p) > 0

    def test_temperature_by_sign(self):
        p = GateParams(tau_pos=1.0, tau_neg=3.0)
        # bilateral: the same ratio gets a sharper gate on the negative branch
        assert sapo_gate(1.5, -1.0, None, p) < sapo_gate(1.5, 1.0, None, p)
        # 4 s (1 - s) with the negative temperature
        s = 1 / (1 + math.exp(-3.0 * 0.5))
        assert sapo_gate(1.5, -1.0, None, p) == pytest.approx(4 * s * (1 - s), rel=1e-13)

    def test_unilateral(self):
        p = GateParams()
        assert sapo_gate(step(0.5, 1.0), p, unilateral=True) == 1.0
        assert sapo_gate(step(1.5, -1.0), p, unilateral=True) == 1.0
        assert sapo_gate(step(1.5, 1.0), p, unilateral=True) == sapo_gate(step(1.5, 1.0), p)
        assert sapo_gate(step(0.5, 1.0), p) < 1.0


class TestDac:
    def test_zero_eps(self):
        lo, hi = dac_bounds(1.0, GateParams(eps_low=0.0, eps_high=0.0))
        assert lo == 1.0 and hi == 1.0

    def test_radicand_zeroed(self):
        lo, hi = dac_bounds(0.5, GateParams(eps_low=0.2, eps_high=0.2))
        assert lo == 0.5
        assert hi == pytest.approx(DAC_UPPER_HALF, rel=1e-14)

    def test_unit_probability(self):
        lo, hi = dac_bounds(1.0, GateParams(eps_low=0.2, eps_high=0.2))
        assert (lo, hi) == pytest.approx(DAC_UNIT, rel=1e-14)

    def test_monotone_in_pi(self):
        pi = np.geomspace(1.0, 1e-6, 200)
        lo, hi = dac_bounds(pi, GateParams())
        assert np.all(lo <= 1) and np.all(hi >= 1)
        assert np.all(np.diff(lo) <= 0)
        assert np.all(np.diff(hi) > 0)

    def test_domain(self):
        with pytest.raises(DomainError):
            dac_bounds(0.0, GateParams())


class TestTokenSurrogate:
    def test_grpo_clipped(self):
        obj, coef = token_surrogate("grpo", step(1.3, 1.0), GateParams())
        assert coef == 0.0
        assert obj == pytest.approx(1.2)

    def test_grpo_negative_above_bound(self):
        # branches: ratio*A = -1.3, clip(ratio)*A = -1.2; min takes the unclipped one
        obj, coef = token_surrogate("grpo", step(1.3, -1.0), GateParams())
        assert obj == pytest.approx(-1.3)
        assert coef == pytest.approx(-1.3)

    def test_maspo_on_policy(self):
        assert token_surrogate("maspo", step(1.0, 0.7), GateParams()) == (0.7, 0.7)

    def test_grpo_uses_symmetric_eps_low(self):
        p = GateParams(eps_low=0.2, eps_high=0.5)
        assert token_surrogate("grpo", step(1.3, 1.0), p)[1] == 0.0
        assert token_surrogate("clip_higher", step(1.3, 1.0), p)[1] == pytest.approx(1.3)

    def test_dac_uses_probability(self):
        p = GateParams(eps_low=0.2, eps_high=0.2)
        # at pi=0.05 the upper bound is far above 1.5
        assert token_surrogate("dac", step(1.5, 1.0, 0.05), p)[1] == pytest.approx(1.5)
        assert token_surrogate("dac", step(1.5, 1.0, 1.0), p)[1] == 0.0

    def test_gate_coefficient_is_frozen_weight(self):
        p = GateParams()
        s = step(1.4, 2.0, 0.3)
        obj, coef = token_surrogate("maspo", s, p)
        assert obj == coef == maspo_gate(s, p) * s.ratio * s.advantage

    def test_unknown_method(self):
        with pytest.raises(ConfigError):
            token_surrogate("ppo", step(1.0, 1.0), GateParams())

    @pytest.mark.parametrize("method", [GateMethod.GRPO, GateMethod.CLIP_HIGHER, GateMethod.DAC])
    def test_zero_iff_harmful_direction(self, method):
        p = GateParams(eps_high=0.265)
        rho = np.linspace(0.5, 1.6, 221)[:, None]
        adv = np.linspace(-2, 2, 41)[None, :]
        adv = adv[adv != 0][None, :]
        terms = surrogate_terms(method, rho, adv, 0.4, p)
        from maspolab.gating import clip_bounds

        lo, hi = clip_bounds(method, 0.4, p)
        expect = ((adv > 0) & (rho > hi)) | ((adv < 0) & (rho < lo))
        assert np.array_equal(terms.coefficient == 0, expect)
        assert np.array_equal(terms.clipped, expect)
