import copy

import numpy as np
import pytest

from conftest import ONE_STEP
from mfelattice.distribution_analyzer import forward_joint_law
from mfelattice.equilibrium_solver import backward_solve
from mfelattice.errors import InputError
from mfelattice.finite_agent_sim import (
    convergence_study,
    excess_demand,
    excess_demand_mse,
    sample_population,
)
from mfelattice.market_model import validate_scenario


def test_single_agent_population(one_step):
    agents = sample_population(one_step, 1, seed=3)
    assert len(agents) == 1
    assert agents.z_paths.shape == (1, 2)


def test_sampling_is_seeded(small):
    a = sample_population(small, 40, seed=11, replication=2)
    b = sample_population(small, 40, seed=11, replication=2)
    c = sample_population(small, 40, seed=11, replication=3)
    np.testing.assert_array_equal(a.type_index, b.type_index)
    np.testing.assert_array_equal(a.z_paths, b.z_paths)
    assert not (np.array_equal(a.type_index, c.type_index) and np.array_equal(a.z_paths, c.z_paths))


def test_sampling_rejects_empty_population(small):
    with pytest.raises(InputError):
        sample_population(small, 0, seed=1)


def test_cell_frequencies_sum_to_one(small):
    agents = sample_population(small, 25, seed=5)
    n_types = len(small.populations[0].grid)
    assert n_types == 3
    freq = agents.cell_frequencies(3, 0, 4, n_types)
    assert freq.shape == (4, n_types)
    assert freq.sum() == pytest.approx(1.0)


def test_single_atom_has_no_excess_demand(one_step):
    solution = backward_solve(one_step)
    agents = sample_population(one_step, 17, seed=2)
    assert excess_demand_mse(solution, agents, 0) == 0.0


def test_single_atom_study_is_degenerate(one_step):
    report = convergence_study(one_step, [10, 100], replications=3, seed=1)
    assert report.degenerate
    assert report.passed is None
    assert report.slope is None
    assert report.summary()["slope_ci95"] is None


def test_two_type_excess_demand_is_sampling_error(two_types):
    # excess demand equals the type-0 share minus 1/2
    solution = backward_solve(two_types)
    agents = sample_population(two_types, 20, seed=8)
    share = np.mean(agents.type_index == 0)
    assert excess_demand_mse(solution, agents, 0) == pytest.approx((share - 0.5) ** 2, abs=1e-12)


def test_two_type_mse_scales_like_inverse_population(two_types):
    report = convergence_study(two_types, [1000, 10, 100, 100], replications=200, seed=20240601)
    assert report.np_values == (10, 100, 1000)
    for n_agents, mse, err in zip(report.np_values, report.mse, report.mse_stderr):
        assert abs(mse - 0.25 / n_agents) < 5 * err
    assert report.passed
    lo, hi = report.slope_ci
    assert lo <= report.slope <= hi
    assert len(report.samples) == 600


def test_two_point_fit_has_zero_width_interval(two_types):
    report = convergence_study(two_types, [10, 1000], replications=50, seed=4)
    assert report.slope_ci == (report.slope, report.slope)


def test_study_is_deterministic_across_thread_counts(two_types):
    a = convergence_study(two_types, [10, 50], replications=20, seed=6)
    b = convergence_study(two_types, [10, 50], replications=20, seed=6, threads=4)
    assert a.mse == b.mse


def test_study_needs_two_sizes(two_types):
    with pytest.raises(InputError):
        convergence_study(two_types, [100, 100], replications=5, seed=0)
    with pytest.raises(InputError):
        convergence_study(two_types, [10, 100], replications=0, seed=0)


def test_agents_must_match_solution(small, one_step):
    agents = sample_population(small, 5, seed=0)
    with pytest.raises(InputError):
        excess_demand_mse(backward_solve(one_step), agents, 0)


@pytest.fixture
def two_populations():
    """The two-type market at the root, with each type as its own half-weight population."""
    config = copy.deepcopy(ONE_STEP)
    base = config["populations"][0]
    base["F"] = {"family": "zero"}
    config["populations"] = [
        dict(copy.deepcopy(base), weight=0.5, agent_grid={"types": [{"gamma": 0.5}]}),
        dict(copy.deepcopy(base), weight=0.5, agent_grid={"types": [{"gamma": 1.5}]}),
    ]
    config["order_flow"] = {"family": "custom", "params": {"table": {"0,0,0": 1.0}}}
    return validate_scenario(config)


def test_population_counts_follow_weights(small_config):
    config = copy.deepcopy(small_config)
    pop = config["populations"][0]
    config["populations"] = [dict(copy.deepcopy(pop), weight=0.4), dict(copy.deepcopy(pop), weight=0.6)]
    agents = sample_population(validate_scenario(config), 7, seed=3)
    np.testing.assert_array_equal(np.bincount(agents.population), [3, 4])


def test_stratified_populations_remove_sampling_error(two_populations):
    solution = backward_solve(two_populations)
    np.testing.assert_allclose([solution.phi_table(0, 0)[0, 0, 0, 0], solution.phi_table(0, 1)[0, 0, 0, 0]],
                               [1.5, 0.5], atol=1e-12)
    even = sample_population(two_populations, 10, seed=1)
    assert excess_demand_mse(solution, even, 0) == 0.0
    # 7 agents split 4/3, so the shares miss 1/2 by 1/14 each
    odd = sample_population(two_populations, 7, seed=1)
    assert excess_demand_mse(solution, odd, 0) == pytest.approx(1.0 / 196.0, abs=1e-15)


def test_excess_demand_has_zero_mean(small):
    solution = backward_solve(small)
    n = 2
    draws = np.array([
        excess_demand(solution, sample_population(small, 40, seed=17, replication=rep), n)
        for rep in range(400)
    ])
    mean = draws.mean(axis=0)
    stderr = draws.std(axis=0, ddof=1) / np.sqrt(len(draws))
    assert np.all(stderr > 0)
    assert np.all(np.abs(mean) < 4 * stderr)
    weights = forward_joint_law(solution).native[n]
    pooled = draws.reshape(len(draws), -1) @ weights.ravel()
    assert abs(pooled.mean()) < 3 * pooled.std(ddof=1) / np.sqrt(len(pooled))


def test_mse_matches_cross_sectional_variance_over_population_size(small):
    # for one population, E[MSE] is the law-weighted variance of phi* over N_p
    solution = backward_solve(small)
    law = forward_joint_law(solution)
    spread = np.mean([
        np.sum(law.native[n] * (solution.phi_sq[n] - solution.phi_mean[n] ** 2))
        for n in range(small.lattice.N)
    ])
    report = convergence_study(small, [20, 200], replications=300, seed=5, solution=solution)
    for n_agents, mse, err in zip(report.np_values, report.mse, report.mse_stderr):
        assert abs(mse - spread / n_agents) < 4 * err
        assert mse < 1.5 * spread / n_agents
