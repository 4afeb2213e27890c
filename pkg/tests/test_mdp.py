import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, stats

from fbcontrol.channel import FadingProcess
from fbcontrol.mdp import (Policy, ReducibleChainError, StateGrid, TransitionKernel, ValueFunction,
                           average_rate, bellman_backup, build_grid, closed_loop_matrix, cost_per_stage,
                           cost_table, decision_indices, enforce_dominance, estimate_kernel,
                           evaluate_policy, fb_error_distribution, policy_iteration, solve_budgeted,
                           stationary_distribution, toy_problem, value_iteration)
from fbcontrol.quantizer import QuantizerModel


def all_policies(grid):
    A = len(grid.B_set)
    for combo in itertools.product(range(A), repeat=grid.M * grid.N):
        yield np.array(combo).reshape(grid.M, grid.N)


def average_cost(idx, kernel, grid, lam):
    P = closed_loop_matrix(idx, kernel)
    c = np.take_along_axis(cost_table(grid, lam), idx[None], 0)[0].ravel()
    return stationary_distribution(P) @ c


# ---------------------------------------------------------------- grid


def test_grid_equal_probability(std_grid):
    mass = np.diff(stats.gamma(4).cdf(std_grid.g_edges))
    assert np.allclose(mass, 1 / 16, atol=1e-12)
    assert std_grid.N == 16
    assert std_grid.d_points.max() == pytest.approx(0.75)
    assert np.all(np.diff(std_grid.g_edges) > 0) and np.all(np.diff(std_grid.d_edges) > 0)
    assert std_grid.g_edges[0] == 0 and np.isinf(std_grid.g_edges[-1])
    assert std_grid.d_edges[0] == 0 and std_grid.d_edges[-1] <= 1
    assert np.all((std_grid.g_points > std_grid.g_edges[:-1]) & (std_grid.g_points < std_grid.g_edges[1:]))
    assert np.all((std_grid.d_points > std_grid.d_edges[:-1]) & (std_grid.d_points < std_grid.d_edges[1:]))


def test_grid_points_are_conditional_means(std_grid):
    dist = stats.gamma(4)
    for m in (0, 7, 15):
        a, b = std_grid.g_edges[m], std_grid.g_edges[m + 1]
        assert std_grid.g_points[m] == pytest.approx(dist.expect(lambda x: x, lb=a, ub=b, conditional=True),
                                                     rel=1e-7)


def test_grid_two_bins_split_at_median():
    g = build_grid(4, (0, 2), 2)
    assert g.g_edges[1] == pytest.approx(stats.gamma(4).median())


def test_grid_rejects_bad_input():
    with pytest.raises(ValueError):
        build_grid(4, (0, 2), 1)
    with pytest.raises(ValueError):
        build_grid(4, (2, 4), 4)


# ---------------------------------------------------------------- kernel


def test_kernel_rows_stochastic(std_kernel):
    for P in (std_kernel.g_kernel, std_kernel.d_kernel_nofb, std_kernel.d_dist_fb[1:]):
        assert np.allclose(P.sum(axis=1), 1.0, atol=1e-9)
        assert np.all(P > 0)


def test_fb_rows_ordered_by_dominance(std_kernel):
    # more bits: stochastically smaller next error
    cdf = np.cumsum(std_kernel.d_dist_fb[1:], axis=1)
    assert np.all(np.diff(cdf, axis=0) >= -1e-9)


def test_no_feedback_rows_ordered_by_dominance(std_kernel):
    for P in (std_kernel.g_kernel, std_kernel.d_kernel_nofb):
        tails = np.cumsum(P[:, ::-1], axis=1)
        assert np.all(np.diff(tails, axis=0) >= -1e-9)


def test_block_iid_gain_rows_are_marginal(std_grid):
    proc = FadingProcess(L=4, mode="block_iid")
    k = estimate_kernel(std_grid, proc, 4 * 10 ** 5, np.random.default_rng(1))
    assert np.allclose(k.g_kernel, 1 / 16, atol=0.01)


def exact_gain_row(grid, m, rho, L=4):
    """Row m of the gain kernel from the noncentral chi-square transition law.

    Given g, 2 g' / (1 - rho^2) is noncentral chi-square with 2L degrees of
    freedom and noncentrality 2 rho^2 g / (1 - rho^2).
    """
    e, s = grid.g_edges, (1 - rho ** 2) / 2

    def mass(x, k):
        nc = rho ** 2 * x / s
        hi = 1.0 if np.isinf(e[k + 1]) else stats.ncx2.cdf(e[k + 1] / s, 2 * L, nc)
        return stats.gamma(L).pdf(x) * (hi - stats.ncx2.cdf(e[k] / s, 2 * L, nc))

    return np.array([integrate.quad(mass, e[m], e[m + 1], args=(k,))[0] * grid.M for k in range(grid.M)])


@pytest.mark.parametrize("rho", [0.9, 0.999, 0.99999])
def test_gain_kernel_matches_noncentral_chi2(std_grid, rho):
    n = 2 * 10 ** 5
    k = estimate_kernel(std_grid, FadingProcess(L=4, rho_c=rho), n, np.random.default_rng(2))
    for m in (0, 7, 15):
        p = exact_gain_row(std_grid, m, rho)
        band = 4 * np.sqrt(p * (1 - p) / (n / std_grid.M)) + 1e-3     # 4 sigma per entry
        assert np.all(np.abs(k.g_kernel[m] - p) <= band)


def test_gain_kernel_tends_to_identity(std_grid):
    diag = [np.diag(estimate_kernel(std_grid, FadingProcess(L=4, rho_c=r), 10 ** 5,
                                    np.random.default_rng(3)).g_kernel) for r in (0.99, 0.999, 0.99999)]
    assert np.all(diag[1] > diag[0]) and np.all(diag[2] > diag[1])
    assert np.all(diag[2] >= 0.95)


def test_quantizer_mode_rows_are_cdf_bin_masses(std_grid):
    k = estimate_kernel(std_grid, FadingProcess.from_doppler(4, 1e-2), 10 ** 4, np.random.default_rng(3),
                        post_feedback="quantizer")
    i = std_grid.B_set.index(4)
    cdf = std_grid.quantizer.cdf(np.clip(std_grid.d_edges, 0, 1), 4)
    assert np.allclose(k.d_dist_fb[i], np.diff(cdf), atol=0.01)
    # mass concentrates on the bin holding the mean error of 4 bits
    assert np.argmax(k.d_dist_fb[i]) == std_grid.d_index(std_grid.quantizer.mean_error(4))


def test_evolved_rows_match_frozen_channel_when_static(std_grid):
    k = estimate_kernel(std_grid, FadingProcess(L=4, rho_c=1.0), 2 * 10 ** 5, np.random.default_rng(4))
    assert np.allclose(k.d_dist_fb[1:], fb_error_distribution(std_grid)[1:], atol=0.01)


def test_fb_error_distribution_sums_to_one(std_grid):
    rows = fb_error_distribution(std_grid)
    assert np.all(rows[0] == 0)
    assert np.allclose(rows[1:].sum(axis=1), 1.0)


@settings(max_examples=50)
@given(seed=st.integers(0, 2 ** 32 - 1), n=st.integers(2, 6))
def test_enforce_dominance_projection(seed, n):
    rng = np.random.default_rng(seed)
    P = rng.dirichlet(np.ones(n), size=n)
    Q = enforce_dominance(P)
    assert np.allclose(Q.sum(axis=1), 1.0) and np.all(Q >= 0)
    tails = np.cumsum(Q[:, ::-1], axis=1)
    assert np.all(np.diff(tails, axis=0) >= -1e-12)
    # already ordered rows are left alone
    assert np.allclose(enforce_dominance(Q), Q, atol=1e-12)


# ---------------------------------------------------------------- cost and backup


def test_cost_per_stage_example():
    g = StateGrid(np.array([0, 1, np.inf]), np.array([2.0, 3.0]), np.array([0, 0.5, 1]),
                  np.array([0.375, 0.75]), (0, 3), QuantizerModel(L=4))
    assert cost_per_stage((0, 1), 3, 0.1, g) == pytest.approx(1.05)
    assert cost_per_stage((0, 1), 0, 0.1, g) == pytest.approx(1.5)


def test_cost_table_matches_cost_per_stage(std_grid):
    G = cost_table(std_grid, 0.3)
    for b, B in enumerate(std_grid.B_set):
        for m, n in [(0, 0), (5, 9), (15, 15)]:
            assert G[b, m, n] == pytest.approx(cost_per_stage((m, n), B, 0.3, std_grid))


def test_free_feedback_prefers_max_bits(std_grid):
    G = cost_table(std_grid, 0.0)
    fb_max = std_grid.quantizer.mean_error(30)
    for n in np.flatnonzero(std_grid.d_points > fb_max):
        assert np.all(np.argmin(G[:, :, n], axis=0) == len(std_grid.B_set) - 1)


def test_backup_without_future_is_myopic(std_grid, std_kernel):
    V = ValueFunction(values=np.random.default_rng(0).random((16, 16)), kind="discounted", rho=0.0)
    _, pol = bellman_backup(V, std_kernel, std_grid, 0.01)
    G = cost_table(std_grid, 0.01)
    assert np.array_equal(pol.table, np.asarray(std_grid.B_set)[np.argmin(G, axis=0)])


def test_backup_constant_value_is_myopic(std_grid, std_kernel):
    V = ValueFunction(values=np.full((16, 16), 7.0), kind="discounted", rho=0.9)
    newV, pol = bellman_backup(V, std_kernel, std_grid, 0.02)
    G = cost_table(std_grid, 0.02)
    assert np.array_equal(pol.table, np.asarray(std_grid.B_set)[np.argmin(G, axis=0)])
    assert np.allclose(newV.values, G.min(axis=0) + 0.9 * 7.0)


def test_backup_rejects_bad_discount(std_grid, std_kernel):
    with pytest.raises(ValueError):
        bellman_backup(ValueFunction(np.zeros((16, 16)), "discounted", rho=1.0), std_kernel, std_grid, 0.0)


# ---------------------------------------------------------------- brute-force oracles


def test_two_by_two_backup_matches_enumeration():
    grid, kernel = toy_problem(seed=5, M=2, N=2)
    rho, lam = 0.9, 0.05

    def discounted(idx):
        P = closed_loop_matrix(idx, kernel)
        c = np.take_along_axis(cost_table(grid, lam), idx[None], 0)[0].ravel()
        return np.linalg.solve(np.eye(4) - rho * P, c)

    values = np.array([discounted(idx) for idx in all_policies(grid)])
    best = values.min(axis=0)            # the optimal policy attains every minimum at once
    assert np.any(np.all(values <= best + 1e-12, axis=1))
    vf, pol = value_iteration(kernel, grid, lam, rho, tol=1e-12)
    assert np.allclose(vf.values.ravel(), best, atol=1e-9)
    assert np.allclose(discounted(decision_indices(pol.table, grid)), best, atol=1e-9)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_policy_iteration_matches_enumeration(seed):
    grid, kernel = toy_problem(seed=seed)
    lam = 0.1
    costs = {tuple(idx.ravel()): average_cost(idx, kernel, grid, lam) for idx in all_policies(grid)}
    best = min(costs.values())
    pol, vf = policy_iteration(kernel, grid, lam)
    assert vf.avg_cost == pytest.approx(best, rel=1e-9)
    assert costs[tuple(decision_indices(pol.table, grid).ravel())] == pytest.approx(best, rel=1e-9)


def test_value_iteration_discounted_values_match_matrix_solve():
    grid, kernel = toy_problem(seed=3)
    rho, lam = 0.95, 0.1
    vf, pol = value_iteration(kernel, grid, lam, rho, tol=1e-11)
    idx = decision_indices(pol.table, grid)
    P = closed_loop_matrix(idx, kernel)
    c = np.take_along_axis(cost_table(grid, lam), idx[None], 0)[0].ravel()
    assert np.allclose(np.linalg.solve(np.eye(9) - rho * P, c), vf.values.ravel(), atol=1e-8)


# ---------------------------------------------------------------- solvers at standard scale


def test_policy_evaluation_residual_and_normalization(std_grid, std_kernel):
    rng = np.random.default_rng(0)
    idx = rng.integers(0, 16, (16, 16))
    avg, U, P, c = evaluate_policy(idx, std_kernel, std_grid, 0.01)
    assert U[0, 0] == 0.0
    resid = avg + U.ravel() - c - P @ U.ravel()
    assert np.max(np.abs(resid)) < 1e-8


def test_policy_iteration_monotone_and_fast(std_grid, std_kernel):
    for lam in (0.0, 0.002, 0.02):
        pol, vf = policy_iteration(std_kernel, std_grid, lam)
        assert pol.iterations <= 20
        assert np.all(np.diff(vf.history) <= 1e-12)
        assert set(np.unique(pol.table)) <= set(std_grid.B_set)


def test_discounted_limit_matches_average_cost(std_grid, std_kernel):
    pol, vf = policy_iteration(std_kernel, std_grid, 0.002)
    dv, _ = value_iteration(std_kernel, std_grid, 0.002, 0.999)
    assert dv.converged
    assert (1 - 0.999) * dv.values.mean() == pytest.approx(vf.avg_cost, rel=0.01)


def test_huge_price_gives_zero_policy_under_block_fading(std_grid):
    k = estimate_kernel(std_grid, FadingProcess(L=4, mode="block_iid"), 2 * 10 ** 5, np.random.default_rng(6))
    lam = float(std_grid.g_points.max() * std_grid.d_points.max())
    pol, _ = policy_iteration(k, std_grid, lam)
    assert np.all(pol.table == 0)
    _, vpol = value_iteration(k, std_grid, lam, 0.99)
    assert np.all(vpol.table == 0)


def test_memory_makes_feedback_pay_beyond_one_slot(std_grid, std_kernel):
    # with slow fading one report serves many slots, so a price that rules out
    # feedback for a single slot still leaves feedback at the largest errors
    lam = float(std_grid.g_points.max() * std_grid.d_points.max())
    pol, _ = policy_iteration(std_kernel, std_grid, lam)
    assert np.any(pol.table > 0)
    assert np.all(policy_iteration(std_kernel, std_grid, 100 * lam)[0].table == 0)


def test_free_feedback_under_block_fading(std_grid):
    k = estimate_kernel(std_grid, FadingProcess(L=4, mode="block_iid"), 2 * 10 ** 5, np.random.default_rng(5))
    pol, _ = policy_iteration(k, std_grid, 0.0)
    want = std_grid.d_points > std_grid.quantizer.mean_error(30)
    assert np.array_equal(pol.table == 30, np.broadcast_to(want, pol.table.shape))


def test_value_iteration_flags_nonconvergence(std_grid, std_kernel):
    vf, _ = value_iteration(std_kernel, std_grid, 0.01, 0.999, max_iter=5)
    assert not vf.converged and vf.iterations == 5
    with pytest.raises(ValueError):
        value_iteration(std_kernel, std_grid, 0.01, 0.9, tol=0)


def test_reducible_chain_reported():
    grid, kernel = toy_problem()
    stuck = TransitionKernel(g_kernel=np.eye(3), d_kernel_nofb=np.eye(3), d_dist_fb=kernel.d_dist_fb)
    with pytest.raises(ReducibleChainError):
        evaluate_policy(np.zeros((3, 3), dtype=int), stuck, grid, 0.0)


# ---------------------------------------------------------------- budget


def test_zero_budget_gives_zero_policy(std_grid, std_kernel):
    pol = solve_budgeted(std_kernel, std_grid, 0.0)
    assert np.all(pol.table == 0) and pol.avg_rate == 0.0


def test_slack_budget_is_saturated(std_grid, std_kernel):
    pol = solve_budgeted(std_kernel, std_grid, 30.0)
    assert pol.saturated and pol.lam == 0.0


@pytest.mark.parametrize("target", [1.0, 3.0, 6.0, 12.0])
def test_budget_met(std_grid, std_kernel, target):
    pol = solve_budgeted(std_kernel, std_grid, target)
    assert pol.avg_rate <= target + 1e-9
    assert pol.avg_rate == pytest.approx(average_rate(pol, std_kernel), abs=1e-9)


def test_rate_nonincreasing_in_price(std_grid, std_kernel):
    rates = [policy_iteration(std_kernel, std_grid, lam)[0].avg_rate for lam in np.geomspace(1e-5, 1.0, 12)]
    assert np.all(np.diff(rates) <= 1e-9)


@pytest.mark.parametrize("target", [0.3, 0.7, 1.2])
def test_toy_budget_matches_fine_price_grid(target):
    grid, kernel = toy_problem(seed=4)
    lam_max = float(grid.g_points.max() * grid.d_points.max())
    rates = np.array([policy_iteration(kernel, grid, lam)[0].avg_rate
                      for lam in np.arange(0.0, lam_max + 1e-4, 1e-4)])
    feasible = rates[rates <= target + 1e-12]
    pol = solve_budgeted(kernel, grid, target, rate_tol=1e-12, lam_tol=1e-12)
    assert pol.avg_rate == pytest.approx(feasible.max(), abs=1e-9)


def test_policy_bits_lookup(std_grid):
    table = np.arange(256).reshape(16, 16) % 31
    pol = Policy(table=table, grid=std_grid)
    g = std_grid.g_points[[0, 5]]
    d = std_grid.d_points[[3, 9]]
    assert np.array_equal(pol.bits(g, d), table[[0, 5], [3, 9]])
