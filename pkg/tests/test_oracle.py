import csv
import math

import numpy as np
import pytest

from sva import DiffusionModel, ObservableSpec, make_lq_case, make_ou_quartic
from sva.oracle import (OracleError, PdeGrid, default_pde_grid, gaussian_terminal_free_energy, lq_solution,
                        pde_free_energy, pde_self_convergence, solve_feynman_kac_1d)

# free energies from Gaussian quadrature against the exact law of X_T (OU drift, x0 = -1, T = 5)
OU_QUARTIC_Z = {0.5: -1.4447143, 0.25: -1.3079039, 0.125: -1.2384328, 0.0625: -1.2034175}


def _obs(f, x0=-1.0, T=5.0, eps=0.5):
    return ObservableSpec(f=f, grad_f=lambda x: np.zeros(np.shape(x)), hess_f=lambda x: np.zeros(np.shape(x) + (1,)),
                          x0=[x0], horizon_T=T, epsilon=eps, check=False)


def test_constant_observable():
    model, _ = make_ou_quartic()
    obs = _obs(lambda x: np.full(np.shape(x)[:-1], 1.75))
    assert solve_feynman_kac_1d(model, obs, PdeGrid(-5, 5, 401, 0.01)).Z == pytest.approx(1.75, abs=1e-12)


@pytest.mark.parametrize("eps", [0.5, 0.25, 0.125, 0.0625])
def test_quadrature_reference_values(eps):
    _, obs = make_ou_quartic(eps)
    assert gaussian_terminal_free_energy(1.0, obs) == pytest.approx(OU_QUARTIC_Z[eps], abs=1e-7)


@pytest.mark.parametrize("a,q,eps", [(1.0, 1.0, 0.1), (0.5, 2.0, 0.3), (0.0, 1.0, 0.2)])
def test_lq_closed_form_matches_quadrature(a, q, eps):
    _, obs = make_lq_case(a, q, eps)
    assert lq_solution(a, q, 2.0, 5.0, eps).z0 == pytest.approx(gaussian_terminal_free_energy(a, obs), abs=1e-9)


def test_lq_closed_form_solves_hjb():
    a, q, eps = 1.0, 1.0, 0.1
    sol = lq_solution(a, q, 2.0, 5.0, eps)
    h = 1e-4
    for t in (0.5, 2.0, 4.5):
        for x in (-1.0, 0.3, 2.0):
            gt = (sol.g(t + h, x) - sol.g(t - h, x)) / (2 * h)
            gx = (sol.g(t, x + h) - sol.g(t, x - h)) / (2 * h)
            gxx = (sol.g(t, x + h) - 2 * sol.g(t, x) + sol.g(t, x - h)) / h ** 2
            assert gt - a * x * gx + 0.5 * eps * gxx + 0.5 * gx ** 2 == pytest.approx(0.0, abs=1e-5)
    assert sol.g(5.0, 0.5) == pytest.approx(-q * 1.5 ** 2 / 2)


def test_lq_degenerate_cases():
    sol = lq_solution(1.0, 0.0, 2.0, 5.0, 0.1)
    assert sol.z0 == 0.0 and sol.K(1.0) == 0.0
    with pytest.raises(ValueError):
        lq_solution(1.0, -1.0, 2.0, 5.0, 0.1)


def test_pde_matches_lq_closed_form():
    model, obs = make_lq_case(1.0, 1.0, 0.2)
    z = solve_feynman_kac_1d(model, obs, PdeGrid(-6.0, 6.0, 2001, 5.0 / 2000)).Z
    assert z == pytest.approx(lq_solution(1.0, 1.0, 2.0, 5.0, 0.2).z0, abs=1e-4)


@pytest.mark.parametrize("eps", [0.5, 0.125])
def test_pde_matches_quadrature_for_quartic(eps):
    model, obs = make_ou_quartic(eps)
    z, err = pde_free_energy(model, obs, anchors=[0.8])
    assert abs(z - OU_QUARTIC_Z[eps]) < 1e-5
    assert err < 1e-4


def test_self_convergence_under_halving():
    model, obs = make_ou_quartic(0.5)
    grid = default_pde_grid(model, obs, anchors=[0.8])
    _, diff = pde_self_convergence(model, obs, grid)
    assert diff < 1e-3


def test_boundary_influence_is_negligible():
    model, obs = make_ou_quartic(0.25)
    grid = default_pde_grid(model, obs, anchors=[0.8], dx=5e-3)
    z1 = solve_feynman_kac_1d(model, obs, grid).Z
    z2 = solve_feynman_kac_1d(model, obs, grid.widened(1.5)).Z
    z3 = solve_feynman_kac_1d(model, obs, PdeGrid(grid.x_min, grid.x_max, grid.n_x, grid.dt_pde, "zero-flux")).Z
    assert abs(z1 - z2) < 1e-6 and abs(z1 - z3) < 1e-6


def test_monotone_in_observable():
    model, obs = make_ou_quartic(0.25)
    bump = lambda x: obs.f(x) + 0.3 * np.exp(-4 * (np.asarray(x)[..., 0] - 0.5) ** 2)  # noqa: E731
    grid = PdeGrid(-6, 6, 1201, 5 / 1000)
    z0 = solve_feynman_kac_1d(model, obs, grid).Z
    z1 = solve_feynman_kac_1d(model, _obs(bump, eps=0.25), grid).Z
    assert z1 > z0
    shifted = solve_feynman_kac_1d(model, _obs(lambda x: obs.f(x) + 0.1, eps=0.25), grid).Z
    assert shifted == pytest.approx(z0 + 0.1, abs=1e-10)


def test_euler_chain_law_converges_to_diffusion_law():
    _, obs = make_ou_quartic(0.5)
    exact = gaussian_terminal_free_energy(1.0, obs)
    gaps = [abs(gaussian_terminal_free_energy(1.0, obs, dt=dt) - exact) for dt in (1e-2, 5e-3)]
    assert gaps[0] / gaps[1] == pytest.approx(2.0, rel=0.05)


def test_rejects_unsupported_inputs():
    A = np.array([[-1.0, 0.0], [0.0, -1.0]])
    model2 = DiffusionModel(drift=lambda x: np.asarray(x) @ A.T,
                            drift_jacobian=lambda x: np.broadcast_to(A, np.shape(x)[:-1] + (2, 2)).copy(),
                            drift_hessian_contract=lambda x, th: np.zeros(np.shape(x)[:-1] + (2, 2)),
                            sigma=np.eye(2))
    obs2 = ObservableSpec(f=lambda x: np.zeros(np.shape(x)[:-1]), grad_f=lambda x: np.zeros(np.shape(x)),
                          hess_f=lambda x: np.zeros(np.shape(x) + (2,)), x0=[0.0, 0.0], horizon_T=1.0)
    with pytest.raises(OracleError, match="one-dimensional"):
        solve_feynman_kac_1d(model2, obs2, PdeGrid(-1, 1, 11, 0.1))
    model, obs = make_ou_quartic(0.5)
    with pytest.raises(OracleError, match="stability"):
        solve_feynman_kac_1d(model, obs, PdeGrid(-5, 5, 1001, 0.01, theta=0.0))
    with pytest.raises(OracleError, match="inside"):
        solve_feynman_kac_1d(model, obs, PdeGrid(0, 5, 101, 0.01))
    with pytest.raises(ValueError):
        PdeGrid(1, 0, 11, 0.1)
    with pytest.raises(ValueError):
        PdeGrid(0, 1, 11, 0.1, boundary="periodic")


def test_explicit_scheme_agrees_when_stable():
    model, obs = make_ou_quartic(0.5)
    z_cn = solve_feynman_kac_1d(model, obs, PdeGrid(-5, 5, 401, 5 / 2000)).Z
    z_ex = solve_feynman_kac_1d(model, obs, PdeGrid(-5, 5, 401, 5 / 5000, theta=0.0)).Z
    assert abs(z_cn - z_ex) < 1e-3


def test_profile_dump(tmp_path):
    model, obs = make_ou_quartic(0.5)
    sol = solve_feynman_kac_1d(model, obs, PdeGrid(-5, 5, 101, 0.05))
    z, h0 = sol
    assert z == sol.Z and len(h0) == 101
    sol.to_csv(tmp_path / "h.csv")
    rows = list(csv.reader((tmp_path / "h.csv").open()))
    assert rows[0] == ["x", "h0"] and len(rows) == 102
    # h(0, x0) interpolates the profile
    assert np.interp(-1.0, sol.x, sol.h0) == pytest.approx(z, abs=1e-3)
