import math

import numpy as np
import pytest
from hypothesis import given, settings
import hypothesis.strategies as st

from mfelattice.errors import CapacityError, InvalidLatticeError
from mfelattice.lattice import (
    FiniteMarkovChainSpec,
    LatticeSpec,
    PathIndex,
    chain_marginal,
    chain_violations,
    enumerate_stock_paths,
    lattice_violations,
    node_price,
    node_prices,
    path_price_history,
    path_up_counts,
    risk_neutral_prob,
    rng_stream,
    sample_chain_paths,
)

BASE_LATTICE = LatticeSpec.from_volatility(48, 3.0, 0.033, 1.0, 0.15)


def test_node_price_root():
    assert node_price(BASE_LATTICE, 0, 0) == 1.0


def test_node_price_recombines():
    spec = LatticeSpec(N=2, T=1.0, r=0.0, s0=1.0, u_tilde=1.25, d_tilde=0.8)
    assert node_price(spec, 2, 1) == pytest.approx(1.0, abs=1e-15)


def test_node_price_one_up_move():
    assert BASE_LATTICE.dt == 0.0625
    assert node_price(BASE_LATTICE, 1, 1) == pytest.approx(1.038212, abs=1e-6)


def test_node_price_out_of_range():
    with pytest.raises(IndexError):
        node_price(BASE_LATTICE, 2, 3)
    with pytest.raises(IndexError):
        node_prices(BASE_LATTICE, 49)


def test_risk_neutral_prob_symmetric():
    spec = LatticeSpec(N=1, T=1.0, r=0.0, s0=1.0, u_tilde=1.1, d_tilde=0.9)
    assert risk_neutral_prob(spec) == pytest.approx(0.5, abs=1e-15)


def test_risk_neutral_prob_three_year_lattice():
    assert BASE_LATTICE.beta == pytest.approx(math.exp(0.0020625))
    assert BASE_LATTICE.p_q == pytest.approx(0.51816, abs=1e-4)


def test_risk_neutral_prob_rejects_bad_ordering():
    spec = LatticeSpec(N=1, T=1.0, r=0.0, s0=1.0, u_tilde=1.0, d_tilde=0.9)
    with pytest.raises(InvalidLatticeError):
        risk_neutral_prob(spec)
    assert [v.code for v in lattice_violations(spec)] == ["lattice.ordering"]


@given(st.floats(0.01, 0.8), st.floats(-0.05, 0.1), st.integers(1, 100))
@settings(max_examples=200)
def test_discounted_price_is_q_martingale(sigma, r, N):
    spec = LatticeSpec.from_volatility(N, 1.0, r, 1.0, sigma)
    if lattice_violations(spec):
        return
    p = spec.p_q
    assert 0 < p < 1
    assert p * spec.u_tilde + (1 - p) * spec.d_tilde == pytest.approx(spec.beta, rel=1e-12)
    assert p * spec.u + (1 - p) * spec.d == pytest.approx(0.0, abs=1e-12)


@given(st.integers(0, 29), st.floats(1.01, 1.5))
def test_recombination(n, u_tilde):
    spec = LatticeSpec(N=30, T=1.0, r=0.0, s0=1.0, u_tilde=u_tilde, d_tilde=1.0 / u_tilde)
    prices = node_prices(spec, n)
    assert np.all(np.diff(prices) > 0)
    np.testing.assert_allclose(prices * u_tilde, node_prices(spec, n + 1)[1:], rtol=1e-12)
    np.testing.assert_allclose(prices / u_tilde, node_prices(spec, n + 1)[:-1], rtol=1e-12)


def test_chain_marginal_fair_coin():
    chain = FiniteMarkovChainSpec.multiplicative_binomial(4, 0.25, 1.0, 0.12, 0.5)
    np.testing.assert_allclose(chain_marginal(chain, 0), [1.0])
    np.testing.assert_allclose(chain_marginal(chain, 2), [0.25, 0.5, 0.25], atol=1e-15)


def test_chain_marginal_biased_coin():
    chain = FiniteMarkovChainSpec.multiplicative_binomial(4, 0.25, 1.0, 0.12, 0.3)
    np.testing.assert_allclose(chain_marginal(chain, 2), [0.49, 0.42, 0.09], atol=1e-14)


def test_chain_states():
    chain = FiniteMarkovChainSpec.additive_binomial(2, 0.25, 1.0, 0.2, 0.5)
    np.testing.assert_allclose(chain.states[2], [0.8, 1.0, 1.2])
    assert chain.initial_state == 1.0
    assert chain_violations(chain, "y_chain", 2) == []


def test_chain_violations_reports_non_stochastic_rows():
    chain = FiniteMarkovChainSpec.from_matrices([[1.0], [0.0, 1.0]], [[[0.5, 0.6]]])
    assert [v.code for v in chain_violations(chain, "y_chain", 1)] == ["y_chain.stochastic"]
    assert [v.code for v in chain_violations(chain, "y_chain", 2)][0] == "y_chain.steps"


def test_enumerate_paths():
    assert [str(p) for p in enumerate_stock_paths(BASE_LATTICE, 0)] == ["<root>"]
    assert [p.moves for p in enumerate_stock_paths(BASE_LATTICE, 2)] == ["dd", "du", "ud", "uu"]
    with pytest.raises(CapacityError):
        list(enumerate_stock_paths(BASE_LATTICE, 17, path_cap=16))


def test_path_index_children():
    root = PathIndex(0, 0)
    assert root.child(True).child(False) == PathIndex(2, 2)
    assert PathIndex(3, 5).moves == "udu"
    assert PathIndex(3, 5).up_count == 2


def test_path_up_counts_and_history():
    np.testing.assert_array_equal(path_up_counts(3), [0, 1, 1, 2, 1, 2, 2, 3])
    spec = LatticeSpec(N=3, T=1.0, r=0.0, s0=1.0, u_tilde=1.1, d_tilde=0.9)
    hist = path_price_history(spec, 2)
    np.testing.assert_allclose(hist[2], [1.0, 1.1, 0.99])
    np.testing.assert_allclose(hist[:, -1], node_prices(spec, 2)[path_up_counts(2)])


def test_rng_streams_are_reproducible_and_distinct():
    a = rng_stream(11, 1, 3).random(5)
    b = rng_stream(11, 1, 3).random(5)
    c = rng_stream(11, 1, 4).random(5)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)


def test_sample_chain_paths_follow_transitions():
    chain = FiniteMarkovChainSpec.multiplicative_binomial(5, 0.2, 1.0, 0.1, 0.5)
    paths = sample_chain_paths(chain, 200, rng_stream(3, 0))
    assert paths.shape == (200, 6)
    steps = np.diff(paths, axis=1)
    assert np.all((steps == 0) | (steps == 1))
