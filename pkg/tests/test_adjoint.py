import math
from dataclasses import replace

import numpy as np
import pytest

from spde_control import adjoint as adj
from spde_control import function_space as fs
from spde_control import lq_oracle as lq
from spde_control import model as mdl
from spde_control import simulate as sim


GRID = fs.Grid(1.0, 32)
TIMES = np.linspace(0.0, 0.5, 201)
PROBE = [20, 45, 70, 95, 120, 145, 160, 180]


def lq_setup(beta=0.5, cu=0.5, amp=0.05, gamma=None, n_paths=400, seed=101):
    """Controlled LQ benchmark driven by its own optimal feedback."""
    kw = dict(a=0.5, beta=(beta,), cost_x=1.0, cost_u=cu, cost_terminal=1.0)
    if gamma is None:
        m = mdl.lq_model(sigma_additive=(amp,), **kw)
    else:
        m = mdl.lq_model(sigma_additive=(0.0,), sigma_state=(gamma,), **kw)
    spec = lq.lq_spec_from_model(m, GRID, a=0.5, beta=(beta,), cost_x=1.0,
                                 cost_u=cu, cost_terminal=1.0)
    rpath = lq.riccati_solve(spec, TIMES)
    noise = mdl.NoiseModel(seed=seed, m=1)
    x0 = 0.8 * np.sin(np.pi * GRID.nodes) + 0.3 * np.sin(2 * np.pi * GRID.nodes)
    traj = sim.simulate_state(m, GRID, noise, x0, lq.RiccatiFeedback(rpath),
                              TIMES, n_paths=n_paths)
    return m, spec, rpath, traj


@pytest.fixture(scope="module")
def lq_additive():
    return lq_setup()


@pytest.fixture(scope="module")
def first_additive(lq_additive):
    m, _, _, traj = lq_additive
    return adj.solve_first_adjoint(m, traj)


class TestFirstAdjoint:
    def test_terminal_condition_exact(self, lq_additive, first_additive):
        m, _, _, traj = lq_additive
        expected = m.h_x(traj.state(traj.n_steps))
        assert np.array_equal(first_additive.p[-1], expected)

    def test_zero_costs_give_zero_adjoint(self):
        m = mdl.lq_model(a=0.3, beta=(1.0,), sigma_additive=(0.1,),
                         cost_x=0.0, cost_u=0.1, cost_terminal=0.0)
        noise = mdl.NoiseModel(seed=3, m=1)
        traj = sim.simulate_state(m, GRID, noise, np.sin(np.pi * GRID.nodes),
                                  mdl.ConstantControl([0.2]), TIMES[:41],
                                  n_paths=16)
        first = adj.solve_first_adjoint(m, traj)
        assert np.max(np.abs(first.p)) == 0.0
        assert np.max(np.abs(first.q)) == 0.0

    def test_deterministic_matches_dense_backward_oracle(self):
        # sigma = 0: q vanishes identically and p solves the deterministic
        # backward equation; compare against a dense matrix recursion
        m = mdl.lq_model(a=0.4, beta=(1.0,), sigma_additive=(0.0,))
        noise = mdl.NoiseModel(seed=5, m=1)
        times = TIMES[:61]
        traj = sim.simulate_state(m, GRID, noise, np.sin(np.pi * GRID.nodes),
                                  mdl.ConstantControl([0.3]), times, n_paths=2)
        first = adj.solve_first_adjoint(m, traj)
        assert np.max(np.abs(first.q)) == 0.0

        n = GRID.n
        dt = traj.dt
        lap = lq.dirichlet_laplacian_matrix(GRID)
        m_inv = np.linalg.inv(np.eye(n) - dt * lap)
        p_ref = m.h_x(traj.state(traj.n_steps)[0])
        for k in range(traj.n_steps - 1, -1, -1):
            x = traj.state(k)[0]
            core = m_inv @ p_ref
            p_ref = (1.0 + dt * 0.4) * core + dt * m.l_x(x, traj.control(k)[0])
            if k in (0, 30):
                got = first.p[k][0]
                assert np.linalg.norm(got - p_ref) <= 1e-6 * np.linalg.norm(p_ref)

    def test_lq_gradient_identity(self, lq_additive, first_additive):
        # p tracks the value-function gradient 2 R x along the optimal pair
        m, _, rpath, traj = lq_additive
        worst = 0.0
        for i in PROBE:
            x = traj.state(i)
            p_ref = 2.0 * (x @ rpath.matrices[i].T)
            num = np.sqrt(GRID.h * np.sum((first_additive.p_at(i) - p_ref) ** 2,
                                          axis=-1))
            den = 1.0 + np.sqrt(GRID.h * np.sum(x**2, axis=-1))
            worst = max(worst, float(np.max(num / den)))
        assert worst <= 0.02

    def test_lq_martingale_density(self, lq_additive, first_additive):
        # additive noise: q is the deterministic field 2 R (amp 1)
        m, spec, rpath, traj = lq_additive
        amp = float(spec.additive[0])
        for i in (50, 150):
            q_ref = 2.0 * (rpath.matrices[i] @ (amp * np.ones(GRID.n)))
            got = first_additive.q_at(i)[:, :, 0]
            err = math.sqrt(GRID.h) * np.linalg.norm(got.mean(axis=0) - q_ref)
            assert err <= 0.3 * math.sqrt(GRID.h) * np.linalg.norm(q_ref) + 1e-3

    def test_condition_abort_without_truncation(self, lq_additive):
        m, _, _, traj = lq_additive
        config = adj.RegressionConfig(truncate_degenerate=False)
        with pytest.raises(adj.RegressionIllConditionedError) as err:
            adj.solve_first_adjoint(m, traj, config)
        assert err.value.cond > config.cond_threshold


class TestMollifiedTerminal:
    def test_diagonal_value_constant_curvature(self):
        eta = 4e-3
        m = mdl.lq_model(cost_terminal=1.5)  # h_xx = 3
        x_t = np.zeros(GRID.n)
        kern = adj.build_mollified_terminal(m, x_t, GRID, eta)
        assert kern[0, 0] == pytest.approx(3.0 / math.sqrt(4 * math.pi * eta),
                                           rel=1e-12)

    def test_symmetry_exact(self):
        m = mdl.cubic_trig_model()
        rng = np.random.default_rng(7)
        x_t = rng.normal(size=GRID.n)
        kern = adj.mollified_terminal_field(m, fs.Field(x_t, GRID), 3e-3)
        assert kern.symmetric

    def test_rejects_nonpositive_width(self):
        with pytest.raises(ValueError):
            adj.gaussian_kernel_values(GRID, 0.0)

    def test_quadratic_form_converges_to_diagonal_quadrature(self):
        # <h_eta z, z> approaches the quadrature of h_xx z^2 as eta -> 0
        grid = fs.Grid(1.0, 255)
        m = mdl.lq_model(cost_terminal=1.0)
        x_t = np.sin(np.pi * grid.nodes)
        z = np.sin(2 * np.pi * grid.nodes) + 0.5 * np.sin(3 * np.pi * grid.nodes)
        target = grid.h * float(np.sum(m.h_xx(x_t) * z * z))
        errs = []
        for eta in (1e-2, 5e-3, 2.5e-3):
            kern = adj.build_mollified_terminal(m, x_t, grid, eta)
            got = grid.h**2 * float(z @ kern @ z)
            errs.append(abs(got - target))
        assert errs[0] > errs[1] > errs[2]

    def test_row_sums_approach_pointwise_curvature(self):
        grid = fs.Grid(1.0, 255)
        m = mdl.lq_model(cost_terminal=1.0)
        x_t = np.sin(np.pi * grid.nodes)
        interior = slice(grid.n // 4, 3 * grid.n // 4)
        errs = []
        for eta in (4e-3, 1e-3, 2.5e-4):
            kern = adj.build_mollified_terminal(m, x_t, grid, eta)
            sums = grid.h * kern.sum(axis=1)
            errs.append(float(np.max(np.abs(sums - m.h_xx(x_t))[interior])))
        assert errs[0] > errs[1] > errs[2]


class TestSecondAdjoint:
    def test_zero_curvature_gives_zero_kernel(self):
        m = mdl.lq_model(a=0.3, beta=(1.0,), sigma_additive=(0.1,),
                         cost_x=0.0, cost_u=0.1, cost_terminal=0.0)
        noise = mdl.NoiseModel(seed=11, m=1)
        traj = sim.simulate_state(m, GRID, noise, np.sin(np.pi * GRID.nodes),
                                  mdl.ConstantControl([0.1]), TIMES[:41],
                                  n_paths=8)
        first = adj.solve_first_adjoint(m, traj)
        second = adj.solve_second_adjoint(m, traj, first, eta=2.5e-3,
                                          snapshot_indices=[0, 20])
        assert np.max(np.abs(second.kernels[0])) == 0.0

    def test_pure_heat_matches_discrete_spectral_propagator(self):
        # all coefficients and sources off: the kernel evolves by the exact
        # tensor square of the one-step implicit solve, diagonal in the
        # discrete eigenbasis
        m = mdl.lq_model(a=0.0, beta=(0.0,), sigma_additive=(0.05,),
                         cost_x=0.0, cost_u=0.1, cost_terminal=1.0)
        noise = mdl.NoiseModel(seed=13, m=1)
        times = TIMES[:41]
        traj = sim.simulate_state(m, GRID, noise, np.sin(np.pi * GRID.nodes),
                                  mdl.ConstantControl([0.0]), times, n_paths=4)
        first = adj.solve_first_adjoint(m, traj)
        eta = 5e-3
        second = adj.solve_second_adjoint(m, traj, first, eta,
                                          snapshot_indices=[0, 20])
        terminal = adj.build_mollified_terminal(m, traj.state(40), GRID, eta)[0]
        basis = fs.spectral_basis(GRID)
        e_vec = basis.vectors
        hat = GRID.h**2 * (e_vec.T @ terminal @ e_vec)
        dt = traj.dt
        damp = 1.0 / (1.0 + dt * basis.eigenvalues)
        for idx, steps in ((20, 20), (0, 40)):
            scaled = hat * np.outer(damp, damp) ** steps
            expected = e_vec @ scaled @ e_vec.T
            got = second.kernels[idx][0]
            assert np.linalg.norm(got - expected) <= 1e-9 * np.linalg.norm(expected)

    def test_symmetry_preserved_every_snapshot(self, lq_additive, first_additive):
        m, _, _, traj = lq_additive
        second = adj.solve_second_adjoint(m, traj, first_additive, eta=5e-3,
                                          snapshot_indices=PROBE)
        for i in PROBE:
            k = second.kernels[i]
            assert np.array_equal(k, k.transpose(0, 2, 1))

    def test_lq_hessian_identity_with_eta_improvement(self):
        # the kernel tracks the value Hessian 2R; the gap shrinks as the
        # terminal mollification is refined (n = 32, eta halvings)
        m, spec, rpath, traj = lq_setup(n_paths=16)
        first = adj.solve_first_adjoint(m, traj)
        max_errs = []
        for eta in (1e-2, 5e-3, 2.5e-3):
            second = adj.solve_second_adjoint(m, traj, first, eta,
                                              snapshot_indices=PROBE,
                                              substeps=16)
            errs = []
            for i in PROBE:
                ref = 2.0 * rpath.matrices[i] / GRID.h
                errs.append(GRID.h * np.linalg.norm(second.kernels[i][0] - ref)
                            / (GRID.h * np.linalg.norm(ref)))
            max_errs.append(max(errs))
        assert max_errs[0] > max_errs[1] > max_errs[2]
        assert max_errs[2] <= 0.05

    def test_matches_frozen_control_hessian_at_full_authority(self):
        # the kernel equation is linear in the state curvature: along a
        # strongly controlled pair it reproduces the frozen-control cost
        # Hessian, which dominates the re-optimized value Hessian
        m, spec, rpath, traj = lq_setup(beta=1.0, cu=0.1, n_paths=16)
        first = adj.solve_first_adjoint(m, traj)
        frozen = lq.riccati_solve(
            replace(spec, control_matrix=np.zeros_like(spec.control_matrix)),
            TIMES)
        second = adj.solve_second_adjoint(m, traj, first, eta=2.5e-3,
                                          snapshot_indices=PROBE, substeps=16)
        for i in PROBE:
            ref = 2.0 * frozen.matrices[i] / GRID.h
            err = (GRID.h * np.linalg.norm(second.kernels[i][0] - ref)
                   / (GRID.h * np.linalg.norm(ref)))
            assert err <= 0.05
        # and the gap to the value Hessian is visibly larger somewhere
        gaps = [np.linalg.norm(frozen.matrices[i] - rpath.matrices[i])
                / np.linalg.norm(rpath.matrices[i]) for i in PROBE]
        assert max(gaps) > 0.1

    def test_positive_semidefinite_for_convex_costs(self, lq_additive,
                                                    first_additive):
        m, _, _, traj = lq_additive
        second = adj.solve_second_adjoint(m, traj, first_additive, eta=5e-3,
                                          snapshot_indices=PROBE)
        for i in PROBE:
            operator = GRID.h * second.kernels[i][0]
            assert np.min(np.linalg.eigvalsh(operator)) >= -1e-8

    def test_eta_stability_cauchy(self, lq_additive, first_additive):
        m, _, _, traj = lq_additive
        etas = [8e-3, 4e-3, 2e-3, 1e-3]
        kernels = []
        for eta in etas:
            second = adj.solve_second_adjoint(m, traj, first_additive, eta,
                                              snapshot_indices=[100])
            kernels.append(second.kernels[100][0])
        diffs = [GRID.h * np.linalg.norm(kernels[i] - kernels[i + 1])
                 for i in range(3)]
        assert diffs[0] > diffs[1] > diffs[2]


class TestKernelAlgebra:
    def test_projector_action(self):
        basis = fs.spectral_basis(GRID)
        e1 = basis.mode(0)
        e2 = basis.mode(1)
        proj = fs.KernelField(np.outer(e1.values, e1.values), GRID, symmetric=True)
        assert (adj.kernel_apply(proj, e1) - e1).norm() <= 1e-12
        assert adj.kernel_apply(proj, e2).norm() <= 1e-12

    def test_operator_norm_bound(self):
        rng = np.random.default_rng(17)
        kern = fs.KernelField(rng.normal(size=(GRID.n, GRID.n)), GRID)
        for seed in range(4):
            f = fs.Field(np.random.default_rng(seed).normal(size=GRID.n), GRID)
            assert adj.kernel_apply(kern, f).norm() <= kern.hs_norm() * f.norm() * (1 + 1e-12)

    def test_trace_form_projector(self):
        basis = fs.spectral_basis(GRID)
        e1 = basis.mode(0).values
        proj = fs.KernelField(np.outer(e1, e1), GRID, symmetric=True)
        sigma = e1[:, None]
        assert adj.trace_form(sigma, proj) == pytest.approx(1.0, rel=1e-10)

    def test_trace_form_psd_nonnegative(self):
        rng = np.random.default_rng(19)
        a = rng.normal(size=(GRID.n, GRID.n))
        psd = fs.KernelField(a @ a.T, GRID, symmetric=True)
        for seed in range(4):
            sigma = np.random.default_rng(100 + seed).normal(size=(GRID.n, 3))
            assert adj.trace_form(sigma, psd) >= 0.0

    def test_trace_form_matches_eigen_expansion(self):
        rng = np.random.default_rng(23)
        a = rng.normal(size=(GRID.n, GRID.n))
        sym = fs.KernelField(0.5 * (a + a.T), GRID, symmetric=True)
        sigma = rng.normal(size=(GRID.n, 2))
        # eigen oracle: eigendecompose the operator h K in the weighted space
        evals, evecs = np.linalg.eigh(GRID.h * sym.values)
        expected = 0.0
        for k in range(GRID.n):
            for j in range(2):
                expected += evals[k] * (GRID.h * float(evecs[:, k] @ sigma[:, j])) ** 2 / GRID.h
        got = adj.trace_form(sigma, sym)
        assert got == pytest.approx(expected, rel=1e-10)

    def test_batched_trace_matches_single(self):
        rng = np.random.default_rng(29)
        kerns = rng.normal(size=(3, GRID.n, GRID.n))
        sigs = rng.normal(size=(3, GRID.n, 2))
        batch = adj.trace_form_array(sigs, kerns, GRID.h)
        for p in range(3):
            single = adj.trace_form(sigs[p], fs.KernelField(kerns[p], GRID))
            assert batch[p] == pytest.approx(single, rel=1e-12)
