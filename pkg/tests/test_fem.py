import math

import numpy as np
import pytest
import scipy.linalg

from msde import fem
from msde.core import DiffusionMap
from msde.stepper import StepSolverConfig, run_backward_euler
from msde.wiener import BrownianPath, Grid

# 3-point Gauss on [0, 1], written out independently of the module under test
G_NODES = np.array([0.5 - math.sqrt(3 / 5) / 2, 0.5, 0.5 + math.sqrt(3 / 5) / 2])
G_WTS = np.array([5 / 18, 8 / 18, 5 / 18])


def hat(j, xi, mesh):
    """Interior hat function j (1-based node index) at coordinate xi."""
    return max(0.0, 1.0 - abs(xi - j * mesh.h) / mesh.h)


def oracle_mass(mesh):
    """Assemble the Gram matrix of hat functions by per-element quadrature."""
    d = mesh.d
    M = np.zeros((d, d))
    for e in range(mesh.E):
        xs = (e + G_NODES) * mesh.h
        for i in range(1, d + 1):
            for j in range(1, d + 1):
                vals = [hat(i, x, mesh) * hat(j, x, mesh) for x in xs]
                M[i - 1, j - 1] += mesh.h * float(np.dot(G_WTS, vals))
    return M


def linear_stiffness(mesh):
    d = mesh.d
    K = np.zeros((d, d))
    idx = np.arange(d)
    K[idx, idx] = 2.0 / mesh.h
    K[idx[:-1], idx[:-1] + 1] = -1.0 / mesh.h
    K[idx[:-1] + 1, idx[:-1]] = -1.0 / mesh.h
    return K


class TestMassMatrix:
    def test_single_interior_node(self):
        mesh = fem.Mesh1D(1.0, 2)
        M = fem.assemble_mass(mesh)
        assert M.shape == (1, 1)
        assert M[0, 0] == pytest.approx(2 * mesh.h / 3, rel=1e-14)
        assert M[0, 0] == pytest.approx(oracle_mass(mesh)[0, 0], rel=1e-13)

    def test_values_against_quadrature_oracle(self):
        mesh = fem.Mesh1D(1.0, 4)  # h = 0.25, d = 3
        M = fem.assemble_mass(mesh)
        assert M[0, 0] == pytest.approx(1 / 6, rel=1e-12)
        assert M[0, 1] == pytest.approx(1 / 24, rel=1e-12)
        assert np.allclose(M, oracle_mass(mesh), rtol=1e-12)

    @pytest.mark.parametrize("E", [2, 3, 5, 13, 27, 51])
    def test_symmetric_positive_definite_up_to_d50(self, E):
        M = fem.assemble_mass(fem.Mesh1D(1.0, E))
        assert np.array_equal(M, M.T)
        scipy.linalg.cho_factor(M)  # raises if not PD


class TestStiffness:
    def test_zero_maps_to_zero(self):
        model = fem.PLaplaceModel(fem.Mesh1D(1.0, 8), 3.0)
        assert np.all(fem.apply_stiffness(np.zeros(model.d), model) == 0.0)

    def test_p2_matches_linear_stiffness_matrix(self):
        mesh = fem.Mesh1D(1.0, 8)
        model = fem.PLaplaceModel(mesh, 2.0)
        K = linear_stiffness(mesh)
        rng = np.random.default_rng(0)
        for _ in range(20):
            x = rng.normal(size=model.d)
            assert np.allclose(fem.apply_stiffness(x, model), K @ x, rtol=1e-12)

    def test_positive_homogeneity(self):
        model = fem.PLaplaceModel(fem.Mesh1D(2.0, 6), 3.5)
        rng = np.random.default_rng(1)
        x = rng.normal(size=model.d)
        for lam in (0.5, 2.0, 7.0):
            assert np.allclose(fem.apply_stiffness(lam * x, model),
                               lam ** (model.p_lap - 1.0) * fem.apply_stiffness(x, model),
                               rtol=1e-12)

    def test_quadrature_oracle_general_p(self):
        # S(x)_j = integral of |v'|^(p-2) v' phi_j' via per-element Gauss
        mesh = fem.Mesh1D(1.0, 5)
        model = fem.PLaplaceModel(mesh, 3.0)
        rng = np.random.default_rng(2)
        x = rng.normal(size=mesh.d)
        pad = np.concatenate([[0.0], x, [0.0]])
        S_oracle = np.zeros(mesh.d)
        for e in range(mesh.E):
            c = (pad[e + 1] - pad[e]) / mesh.h
            flux = abs(c) ** (model.p_lap - 2.0) * c
            # dphi of node e is +1/h on element e+1... (1-based nodes)
            for j in range(1, mesh.d + 1):
                if j == e + 1:
                    dphi = 1.0 / mesh.h
                elif j == e:
                    dphi = -1.0 / mesh.h
                else:
                    continue
                S_oracle[j - 1] += mesh.h * float(np.dot(G_WTS, [flux * dphi] * 3))
        assert np.allclose(fem.apply_stiffness(x, model), S_oracle, rtol=1e-12)

    def test_monotone_pairing(self):
        model = fem.PLaplaceModel(fem.Mesh1D(1.0, 9), 4.0)
        rng = np.random.default_rng(3)
        for _ in range(300):
            x, y = rng.normal(size=(2, model.d))
            gap = float((fem.apply_stiffness(x, model) - fem.apply_stiffness(y, model))
                        @ (x - y))
            assert gap >= -1e-10

    def test_four_point_inequality(self):
        model = fem.PLaplaceModel(fem.Mesh1D(1.0, 7), 3.0)
        rng = np.random.default_rng(4)
        for _ in range(300):
            v, w, z = rng.normal(size=(3, model.d))
            Sv, Sw, Sz = (fem.apply_stiffness(u, model) for u in (v, w, z))
            assert float((Sv - Sz) @ (z - w)) <= float((Sv - Sw) @ (v - w)) + 1e-10


class TestEnergy:
    def test_zero_and_homogeneity(self):
        model = fem.PLaplaceModel(fem.Mesh1D(1.0, 6), 3.0)
        assert fem.energy(np.zeros(model.d), model) == 0.0
        rng = np.random.default_rng(5)
        x = rng.normal(size=model.d)
        assert fem.energy(2.0 * x, model) == pytest.approx(
            2.0**3 * fem.energy(x, model), rel=1e-12)

    def test_gradient_matches_stiffness_by_finite_differences(self):
        model = fem.PLaplaceModel(fem.Mesh1D(1.0, 9), 3.0)  # d = 8
        rng = np.random.default_rng(6)
        eps = 1e-6
        eye = np.eye(model.d)
        for _ in range(100):
            x = rng.normal(size=model.d)
            S = fem.apply_stiffness(x, model)
            fd = np.array([(fem.energy(x + eps * eye[i], model)
                            - fem.energy(x - eps * eye[i], model)) / (2 * eps)
                           for i in range(model.d)])
            denom = max(1.0, float(np.linalg.norm(S)))
            assert np.linalg.norm(fd - S) / denom <= 1e-6

    def test_coercivity_identity_exact(self):
        # <S(x), x> equals p * Phi_h(x); both sides are sums over the same
        # element gradients, so agreement is to rounding
        for E, p in [(8, 2.0), (16, 3.0), (51, 2.5)]:
            model = fem.PLaplaceModel(fem.Mesh1D(1.0, E), p)
            rng = np.random.default_rng(E)
            for _ in range(50):
                x = rng.normal(size=model.d)
                lhs = float(fem.apply_stiffness(x, model) @ x)
                rhs = p * float(fem.energy(x, model))
                assert abs(lhs - rhs) <= 1e-12 * max(1.0, abs(lhs))

    def test_declared_growth_bounds(self):
        model = fem.PLaplaceModel(fem.Mesh1D(1.0, 8), 3.0)
        g = model.growth
        rng = np.random.default_rng(7)
        for _ in range(300):
            x = rng.normal(size=model.d) * rng.uniform(0.1, 4.0)
            S = fem.apply_stiffness(x, model)
            nx = np.linalg.norm(x)
            assert float(S @ x) >= g.mu * nx**g.p - 1e-10
            assert np.linalg.norm(S) <= g.beta * (1.0 + nx ** (g.p - 1.0)) + 1e-10


class TestResolvent:
    def test_zero_input(self):
        model = fem.PLaplaceModel(fem.Mesh1D(1.0, 8), 3.0)
        x, eta = fem.plaplace_resolvent(np.zeros(model.d), 0.3, model)
        assert np.all(x == 0.0)

    def test_p2_matches_direct_linear_solve(self):
        mesh = fem.Mesh1D(1.0, 10)
        model = fem.PLaplaceModel(mesh, 2.0)
        K = linear_stiffness(mesh)
        rng = np.random.default_rng(8)
        for k in (0.01, 0.2, 1.0):
            w = rng.normal(size=model.d)
            x, _ = fem.plaplace_resolvent(w, k, model)
            x_direct = np.linalg.solve(np.eye(model.d) + k * K, w)
            assert np.allclose(x, x_direct, rtol=1e-10, atol=1e-12)

    def test_stationarity_residual(self):
        model = fem.PLaplaceModel(fem.Mesh1D(1.0, 8), 3.5)
        rng = np.random.default_rng(9)
        for _ in range(30):
            w = rng.normal(size=model.d) * 2
            k = rng.uniform(0.01, 1.0)
            x, eta = fem.plaplace_resolvent(w, k, model)
            res = np.linalg.norm(x + k * fem.apply_stiffness(x, model) - w)
            assert res <= 1e-10 * (1.0 + np.linalg.norm(w))
            assert np.allclose(eta, (w - x) / k)

    def test_local_minimality_probe(self):
        # objective at the returned point beats 1000 random perturbations
        model = fem.PLaplaceModel(fem.Mesh1D(1.0, 5), 3.0)  # d = 4
        rng = np.random.default_rng(10)
        w = rng.normal(size=model.d)
        k = 0.2
        x, _ = fem.plaplace_resolvent(w, k, model)

        def objective(z):
            return 0.5 * np.sum((z - w) ** 2) + k * fem.energy(z, model)

        fx = objective(x)
        for _ in range(1000):
            delta = rng.normal(size=model.d)
            delta *= 1e-3 / np.linalg.norm(delta)
            assert fx <= objective(x + delta) + 1e-15


class TestProjection:
    def test_zero_function(self):
        model = fem.PLaplaceModel(fem.Mesh1D(1.0, 8), 2.0)
        assert np.allclose(fem.project_initial(lambda xi: 0.0, model), 0.0)

    def test_projection_is_identity_on_hat_functions(self):
        mesh = fem.Mesh1D(1.0, 8)
        model = fem.PLaplaceModel(mesh, 2.0)
        for j in (1, 4, 7):
            x = fem.project_initial(lambda xi, j=j: hat(j, xi, mesh), model)
            expected = np.zeros(mesh.d)
            expected[j - 1] = 1.0
            assert np.max(np.abs(x - expected)) <= 1e-12

    def test_sine_projection_vs_interpolation_h2_decay(self):
        # || P_h u - I_h u || in the L2 norm decays like h^2
        errs = []
        for E in (8, 16, 32, 64):
            mesh = fem.Mesh1D(1.0, E)
            model = fem.PLaplaceModel(mesh, 2.0)
            u0 = lambda xi: math.sin(math.pi * xi)
            proj = fem.project_initial(u0, model)
            interp = np.array([u0(xi) for xi in mesh.interior_nodes()])
            diff = proj - interp
            errs.append(math.sqrt(float(diff @ (model.mass @ diff))))
        slopes = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
        assert np.all(slopes >= 1.7) and np.all(slopes <= 2.3)

    def test_nonfinite_rejected(self):
        model = fem.PLaplaceModel(fem.Mesh1D(1.0, 4), 2.0)
        with pytest.raises(ValueError, match="finite"):
            fem.project_initial(lambda xi: float("nan"), model)


class TestDiffusion:
    def test_zero_spec(self):
        model = fem.PLaplaceModel(fem.Mesh1D(1.0, 6), 3.0)
        g = fem.build_diffusion(model)
        assert np.all(g(np.ones(model.d)) == 0.0)

    def test_constant_shape_two_sided_norm_identity(self):
        # |g(x)|_F^2 computed from the built map equals the independently
        # assembled sum_j <M gtilde_j, gtilde_j>; for a constant pointwise
        # map the load of every interior hat is h * c (the hats integrate
        # to h), so gtilde = solve(M, h * ones) * c per column
        model = fem.PLaplaceModel(fem.Mesh1D(1.0, 6), 3.0)
        c = 0.8
        psi = lambda u: c * np.ones(np.shape(u) + (2,)) / math.sqrt(2)
        g = fem.build_diffusion(model, psi=psi, m=2)
        rng = np.random.default_rng(11)
        h = model.mesh.h
        col = np.linalg.solve(model.mass, h * np.ones(model.d)) * (c / math.sqrt(2))
        via_mass = 2.0 * float(col @ (model.mass @ col))
        for _ in range(10):
            x = rng.normal(size=model.d)
            gx = g(x)
            direct = float(np.sum(gx * gx))
            assert direct == pytest.approx(via_mass, rel=1e-10)

    def test_lipschitz_ratio_stable_under_resampling(self):
        model = fem.PLaplaceModel(fem.Mesh1D(1.0, 6), 3.0)
        g = fem.build_diffusion(model, lipschitz=0.5, shape="sin", m=1)
        rng = np.random.default_rng(12)

        def max_ratio():
            best = 0.0
            for _ in range(1000):
                x, y = rng.normal(size=(2, model.d))
                r = float(np.linalg.norm(g(x) - g(y)) / np.linalg.norm(x - y))
                best = max(best, r)
            return best

        r1, r2 = max_ratio(), max_ratio()
        assert r1 <= g.constant + 1e-12
        assert r2 <= g.constant + 1e-12
        assert abs(r1 - r2) <= 0.5 * max(r1, r2)


class TestGradientFlow:
    def test_energy_nonincreasing_without_noise(self):
        spec = fem.build_problem({"elements": 16, "p": 3.0, "diffusion": "zero",
                                  "initial": "sine"}, T=1.0)
        grid = Grid(1.0, 200)
        path = BrownianPath(grid, np.zeros((201, 1)))
        x0 = spec.initial.sample(None)
        traj = run_backward_euler(spec, path, StepSolverConfig(), x0,
                                  spec.drift.selection(x0))
        energies = fem.energy(traj.states, spec.drift)
        assert np.all(np.diff(energies) <= 1e-12)

    def test_noisy_problem_runs(self):
        spec = fem.build_problem({"elements": 8, "p": 3.0,
                                  "diffusion": "scalar-lipschitz:0.5",
                                  "shape": "sin", "initial": "sine"}, T=0.25)
        from msde.wiener import sample_path
        path = sample_path(2, 0, Grid(0.25, 8), 1)
        x0 = spec.initial.sample(None)
        traj = run_backward_euler(spec, path, StepSolverConfig(), x0,
                                  spec.drift.selection(x0))
        assert np.all(np.isfinite(traj.states))


class TestConfigBuilders:
    def test_named_pieces_validate(self):
        with pytest.raises(KeyError):
            fem.named_shape("nope", 1.0)
        with pytest.raises(KeyError):
            fem.named_initial_data("nope", fem.Mesh1D(1.0, 4))
        with pytest.raises(ValueError):
            fem.build_problem({"elements": 8, "p": 3.0, "diffusion": "what"}, T=1.0)
        with pytest.raises(ValueError):
            fem.PLaplaceModel(fem.Mesh1D(1.0, 4), 1.5)
