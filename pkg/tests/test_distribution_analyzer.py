import copy
import math

import numpy as np
import pytest
from scipy import stats

from conftest import SMALL, config_with
from mfelattice.errors import ConditioningError, InputError
from mfelattice.distribution_analyzer import (
    PercentileConvention,
    annualized_excess_return,
    build_report,
    conditional_price_distribution,
    excess_return_series,
    expected_price_path,
    forward_joint_law,
    marginal_price_distribution,
    percentile_y_node,
    risk_neutral_law,
    simulate_agent_paths,
    trading_volume,
)
from mfelattice.equilibrium_solver import backward_solve, path_dependent_solve
from mfelattice.lattice import FiniteMarkovChainSpec, LatticeSpec
from mfelattice.market_model import validate_scenario

BASE_LATTICE = LatticeSpec.from_volatility(48, 3.0, 0.033, 1.0, 0.15)
Y48 = FiniteMarkovChainSpec.additive_binomial(48, BASE_LATTICE.dt, 1.0, 0.12, 0.5)


def test_forward_law_starts_at_root():
    law = risk_neutral_law(BASE_LATTICE, Y48)
    assert law.nodes[0].shape == (1, 1)
    assert law.nodes[0][0, 0] == 1.0


def test_forward_law_fair_coins():
    lat = LatticeSpec(N=2, T=2.0, r=0.0, s0=1.0, u_tilde=1.1, d_tilde=0.9)
    y = FiniteMarkovChainSpec.additive_binomial(2, 1.0, 1.0, 0.1, 0.5)
    law = risk_neutral_law(lat, y)
    np.testing.assert_allclose(law.nodes[1], 0.25, atol=1e-15)


def test_forward_law_middle_node():
    law = risk_neutral_law(BASE_LATTICE, Y48)
    p = BASE_LATTICE.p_q
    mid = marginal_price_distribution(law, 2).probs[1]
    assert mid == pytest.approx(2 * p * (1 - p), abs=1e-14)
    assert mid == pytest.approx(0.49934, abs=1e-4)


def test_risk_neutral_marginal_is_binomial():
    law = risk_neutral_law(BASE_LATTICE, Y48)
    dist = marginal_price_distribution(law, 48)
    np.testing.assert_allclose(dist.probs, stats.binom.pmf(np.arange(49), 48, BASE_LATTICE.p_q), atol=1e-12)


def test_risk_neutral_excess_return_is_zero():
    law = risk_neutral_law(BASE_LATTICE, Y48)
    np.testing.assert_allclose(excess_return_series(expected_price_path(law), BASE_LATTICE), 0.0, atol=1e-12)
    simple = excess_return_series(expected_price_path(law), BASE_LATTICE, "simple")
    np.testing.assert_allclose(simple, 0.0, atol=1e-12)


def test_excess_return_conventions():
    lat = LatticeSpec.from_volatility(4, 1.0, 0.05, 1.0, 0.2)
    assert annualized_excess_return(math.exp(0.13), 1.0, lat) == pytest.approx(0.08)
    assert annualized_excess_return(1.1, 1.0, lat, "simple") == pytest.approx(1.1 - math.exp(0.05))
    assert annualized_excess_return(1.3, 2.0, lat, "simple") == pytest.approx((1.3 - math.exp(0.1)) / 2)
    with pytest.raises(InputError):
        annualized_excess_return(1.0, 0.0, lat)


def test_percentile_nodes():
    assert percentile_y_node(Y48, 48, 0.75) == 36
    assert percentile_y_node(Y48, 48, 0.25) == 12
    assert percentile_y_node(Y48, 48, 0.75, PercentileConvention.PROBABILITY) == 26
    with pytest.raises(InputError):
        percentile_y_node(Y48, 48, 1.0)


def test_conditioning_on_null_event():
    y = FiniteMarkovChainSpec.from_matrices([[1.0], [0.0, 1.0]], [[[1.0, 0.0]]])
    lat = LatticeSpec(N=1, T=1.0, r=0.0, s0=1.0, u_tilde=1.1, d_tilde=0.9)
    law = risk_neutral_law(lat, y)
    assert conditional_price_distribution(law, 1, 0).mean == pytest.approx(1.0)
    with pytest.raises(ConditioningError):
        conditional_price_distribution(law, 1, 1)


def test_price_distribution_helpers():
    law = risk_neutral_law(BASE_LATTICE, Y48)
    dist = marginal_price_distribution(law, 16)
    assert dist.probs.sum() == pytest.approx(1.0)
    assert dist.cdf()[-1] == pytest.approx(1.0)
    assert dist.mean == pytest.approx(BASE_LATTICE.beta ** 16, rel=1e-12)
    below, above = dist.tail_mass(dist.quantile(0.05), None)
    assert above == 0.0
    assert below < 0.05


def test_single_atom_volume_is_zero(one_step):
    solution = backward_solve(one_step)
    law = forward_joint_law(solution)
    assert trading_volume(solution, law, 0) == pytest.approx(0.0, abs=1e-14)


def test_two_type_volume(two_types):
    solution = backward_solve(two_types)
    law = forward_joint_law(solution)
    assert trading_volume(solution, law, 0) == pytest.approx(math.sqrt(1.25), abs=1e-12)
    with pytest.raises(IndexError):
        trading_volume(solution, law, 1)


def test_equilibrium_law_conserves_mass(small):
    law = forward_joint_law(backward_solve(small))
    for table in law.nodes:
        assert table.sum() == pytest.approx(1.0, abs=1e-12)


def test_countercyclical_liability_dominates_risk_neutral(small):
    law = forward_joint_law(backward_solve(small))
    q_law = risk_neutral_law(small.lattice, small.y_chain)
    p_cdf = marginal_price_distribution(law, 6).cdf()
    q_cdf = marginal_price_distribution(q_law, 6).cdf()
    assert np.all(p_cdf[:-1] < q_cdf[:-1])
    assert np.all(excess_return_series(expected_price_path(law), small.lattice) > 0)


def test_path_law_matches_node_law(small):
    node = forward_joint_law(backward_solve(small))
    path = forward_joint_law(path_dependent_solve(small))
    for a, b in zip(node.nodes, path.nodes):
        np.testing.assert_allclose(a, b, atol=1e-12)


def test_build_report_tables(small):
    report = build_report(backward_solve(small, phi_steps=()))
    frames = report.to_frames()
    assert set(frames) == {"distributions", "expected_path", "excess_return", "volume"}
    dist = frames["distributions"]
    assert set(dist["measure"]) == {"P", "Q", "P|Ytop", "P|Ybottom"}
    assert sorted(set(dist["n"])) == [4, 6]
    sums = dist.groupby(["n", "measure"])["prob"].sum()
    np.testing.assert_allclose(sums.to_numpy(), 1.0, atol=1e-12)
    q_excess = frames["excess_return"].query("measure == 'Q'")["excess_return"]
    np.testing.assert_allclose(q_excess, 0.0, atol=1e-12)
    assert report.metadata["percentile_convention"] == "node-index"
    assert set(frames["volume"]["measure"]) == {"P", "P|Ytop", "P|Ybottom"}


def test_simulation_zero_liability_grows_at_risk_free_rate():
    config = config_with(SMALL, F={"family": "zero"},
                         agent_grid={"types": [{"gamma": 1.0, "xi": 1.0}]})
    scenario = validate_scenario(config)
    solution = backward_solve(scenario)
    paths = simulate_agent_paths(solution, scenario, n_agents=5, n_paths=3, seed=4, consumption=False)
    np.testing.assert_allclose(paths.position, 0.0, atol=1e-14)
    beta = scenario.lattice.beta
    np.testing.assert_allclose(paths.wealth, np.broadcast_to(beta ** np.arange(7), (3, 5, 7)), rtol=1e-12)


def test_simulation_is_deterministic(small):
    solution = backward_solve(small)
    a = simulate_agent_paths(solution, small, 10, 4, seed=9, consumption=False)
    b = simulate_agent_paths(solution, small, 10, 4, seed=9, consumption=False)
    np.testing.assert_array_equal(a.prices, b.prices)
    np.testing.assert_array_equal(a.wealth, b.wealth)
    np.testing.assert_array_equal(a.position, b.position)


def test_endowment_shift_moves_wealth_not_positions(small_config):
    base = validate_scenario(small_config)
    shifted_config = copy.deepcopy(small_config)
    shifted_config["populations"][0]["g"] = {"family": "affine_product", "params": {"a": 3.0, "b": 0.0}}
    shifted = validate_scenario(shifted_config)
    a = simulate_agent_paths(backward_solve(base), base, 6, 2, seed=1, consumption=False)
    b = simulate_agent_paths(backward_solve(shifted), shifted, 6, 2, seed=1, consumption=False)
    np.testing.assert_allclose(a.position, b.position, atol=1e-10)
    assert np.all(b.wealth[..., -1] > a.wealth[..., -1] + 3.0)


def test_simulation_rejects_foreign_solution(small, one_step):
    with pytest.raises(InputError):
        simulate_agent_paths(backward_solve(one_step), small, 2, 1, seed=0)
