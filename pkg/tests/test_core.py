import numpy as np
import pytest

import msde
from msde.core import (ConstantInitial, DiffusionMap, GateError, GateRegime,
                       GrowthParams, LipschitzMap, ProblemSpec, validate_step_size)
from msde.fem import Mesh1D, PLaplaceModel


def make_spec(lb=0.0, d=1):
    return ProblemSpec(d=d, m=1, drift=msde.ZeroDrift(d),
                       b=LipschitzMap.linear(lb, d) if lb else LipschitzMap.zero(d),
                       g=DiffusionMap.zero(d, 1),
                       initial=ConstantInitial(np.zeros(d)), T=1.0)


class TestGrowthParams:
    def test_conjugate_exponent(self):
        assert GrowthParams(p=2.0, mu=1.0).q == 2.0
        assert GrowthParams(p=1.5, mu=1.0).q == 3.0
        assert GrowthParams(p=1.0, mu=1.0).q == np.inf

    @pytest.mark.parametrize("kwargs", [
        dict(p=0.5, mu=1.0), dict(p=2.0, mu=0.0), dict(p=2.0, mu=-1.0),
        dict(p=2.0, mu=1.0, lam=-0.1), dict(p=2.0, mu=1.0, beta=-0.1),
    ])
    def test_invalid_rejected(self, kwargs):
        with pytest.raises(ValueError):
            GrowthParams(**kwargs)


class TestStepGate:
    def test_factors_are_exactly_1_5_8(self):
        assert {r.factor for r in GateRegime} == {1, 5, 8}

    def test_apriori_pass_with_slack(self):
        res = validate_step_size(make_spec(lb=1.0), 0.1, GateRegime.APRIORI)
        assert res.passed
        assert res.slack == pytest.approx(0.5)

    def test_convergence_fail_carries_product(self):
        res = validate_step_size(make_spec(lb=1.0), 0.2, GateRegime.CONVERGENCE)
        assert not res.passed
        assert res.product == pytest.approx(1.6)
        with pytest.raises(GateError, match="CONVERGENCE"):
            res.raise_if_failed()

    def test_no_perturbation_passes_any_regime(self):
        for regime in GateRegime:
            res = validate_step_size(make_spec(lb=0.0), 10.0, regime)
            assert res.passed
            assert res.slack == 1.0

    def test_nonpositive_step_rejected(self):
        with pytest.raises(ValueError):
            validate_step_size(make_spec(), 0.0, GateRegime.SOLVABILITY)


def builtin_drifts():
    return [
        ("abs", msde.AbsSubdifferential(), 1),
        ("power15", msde.PowerPotentialGrad(1.5), 1),
        ("power3", msde.PowerPotentialGrad(3.0), 1),
        ("linear", msde.MonotoneLinearDrift(np.array([[2.0, 0.5], [0.5, 1.0]])), 2),
        ("zero", msde.ZeroDrift(3), 3),
        ("plaplace", PLaplaceModel(Mesh1D(1.0, 6), 3.0, newton_tol=1e-13), 5),
    ]


@pytest.mark.parametrize("name,drift,d", builtin_drifts())
def test_resolvent_nonexpansive_and_selection_monotone(name, drift, d):
    # nonexpansiveness and the monotonicity pairing of the implied
    # selections, on 1000 random (w1, w2, k) triples each
    rng = np.random.default_rng(hash(name) % 2**32)
    n = 1000
    w1 = rng.uniform(-3.0, 3.0, size=(n, d))
    w2 = rng.uniform(-3.0, 3.0, size=(n, d))
    ks = rng.uniform(1e-3, 2.0, size=n)
    for i in range(n):
        k = float(ks[i])
        x1 = drift.resolvent(w1[i], k)
        x2 = drift.resolvent(w2[i], k)
        assert np.linalg.norm(x1 - x2) <= np.linalg.norm(w1[i] - w2[i]) + 1e-12
        e1 = (w1[i] - x1) / k
        e2 = (w2[i] - x2) / k
        assert float(np.dot(e1 - e2, x1 - x2)) >= -1e-12


class TestProblemSpec:
    def test_dimension_mismatch_rejected(self):
        with pytest.raises(ValueError, match="b has dim"):
            ProblemSpec(d=2, m=1, drift=msde.ZeroDrift(2), b=LipschitzMap.zero(1),
                        g=DiffusionMap.zero(2, 1), initial=ConstantInitial([0., 0.]), T=1.0)
        with pytest.raises(ValueError, match="g maps"):
            ProblemSpec(d=2, m=1, drift=msde.ZeroDrift(2), b=LipschitzMap.zero(2),
                        g=DiffusionMap.zero(2, 3), initial=ConstantInitial([0., 0.]), T=1.0)
        with pytest.raises(ValueError, match="horizon"):
            ProblemSpec(d=1, m=1, drift=msde.ZeroDrift(1), b=LipschitzMap.zero(1),
                        g=DiffusionMap.zero(1, 1), initial=ConstantInitial([0.]), T=0.0)


class TestMaps:
    def test_lipschitz_spot_check(self):
        b = LipschitzMap.linear(0.5, 3)
        rng = np.random.default_rng(0)
        for _ in range(200):
            x, y = rng.normal(size=3), rng.normal(size=3)
            assert np.linalg.norm(b(x) - b(y)) <= b.constant * np.linalg.norm(x - y) + 1e-14

    def test_constant_diffusion_growth_bound(self):
        g = DiffusionMap.constant(np.array([[1.0, 0.5]]))
        rng = np.random.default_rng(1)
        for _ in range(200):
            x = rng.normal(size=1) * 10
            assert (np.linalg.norm(g(x)) <=
                    g.growth_constant * (1.0 + np.linalg.norm(x)) + 1e-14)

    def test_constant_diffusion_batch_increment(self):
        g0 = np.array([[1.0, -2.0], [0.5, 0.0]])
        g = DiffusionMap.constant(g0)
        dw = np.random.default_rng(2).normal(size=(7, 2))
        x = np.zeros((7, 2))
        assert np.allclose(g.apply_increment(x, dw), dw @ g0.T)
