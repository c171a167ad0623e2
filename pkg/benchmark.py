"""
Benchmark script for the mfelattice solver
"""

import time
import os
import argparse
import pandas as pd
import numpy as np
import matplotlib.pyplot as plt
from mfelattice import LatticeSpec, FiniteMarkovChainSpec, AgentTypeGrid, PayoffField, PopulationSpec, Scenario
from mfelattice.market_model import PayoffFamily, UtilityMode
from mfelattice.equilibrium_solver import backward_solve


def make_scenario(N, n_gamma, mode=UtilityMode.EXPONENTIAL_TERMINAL, T=3.0):
    """Terminal-liability scenario on an N-step lattice with n_gamma+1 risk aversions"""
    lattice = LatticeSpec.from_volatility(N, T, 0.033, 1.0, 0.15)
    y_chain = FiniteMarkovChainSpec.additive_binomial(N, lattice.dt, 1.0, 0.12, 0.5)
    z_chain = FiniteMarkovChainSpec.multiplicative_binomial(N, lattice.dt, 1.0, 0.12, 0.5)
    grid = AgentTypeGrid.uniform(0.5, 1.5, n_gamma, 0.5, 1.5, 2, 1.0, 0.05, lattice.dt)
    population = PopulationSpec(
        weight=1.0,
        grid=grid,
        z_chain=z_chain,
        F=PayoffField(PayoffFamily.AFFINE_PRODUCT, 0.0, -3.0),
        mode=mode,
    )
    config = {"benchmark": {"N": N, "n_gamma": n_gamma, "mode": mode.value}}
    return Scenario(lattice=lattice, y_chain=y_chain, populations=(population,), config=config)


def benchmark_solver(rounds=3, steps=(12, 24, 36, 48), type_sizes=(2, 4, 8)):
    """
    Time backward_solve over lattice sizes and type-grid sizes

    Args:
        rounds (int): Number of solves per configuration
        steps (tuple): Lattice step counts to test
        type_sizes (tuple): Values of n_gamma to test

    Returns:
        list: Timing results
    """
    print(f"Benchmarking backward_solve with {rounds} rounds...")

    results = []
    for mode in UtilityMode:
        for n_gamma in type_sizes:
            for N in steps:
                print(f"  Testing {mode.value}, N={N}, n_gamma={n_gamma}...")
                scenario = make_scenario(N, n_gamma, mode)
                times = []
                for _ in range(rounds):
                    start_time = time.time()
                    solution = backward_solve(scenario, phi_steps=())
                    times.append((time.time() - start_time) * 1000)  # ms
                results.append({
                    'mode': mode.value,
                    'N': N,
                    'n_types': len(scenario.populations[0].grid),
                    'solve_ms': np.mean(times),
                    'solve_std': np.std(times),
                    'max_residual': solution.max_residual,
                })
    return results


def plot_results(results, output_dir='.'):
    """Plot benchmark results"""
    os.makedirs(output_dir, exist_ok=True)
    df = pd.DataFrame(results)

    plt.figure(figsize=(12, 6))
    modes = sorted(df['mode'].unique())
    for i, mode in enumerate(modes):
        plt.subplot(1, len(modes), i + 1)
        mode_data = df[df['mode'] == mode]
        for n_types in sorted(mode_data['n_types'].unique()):
            rows = mode_data[mode_data['n_types'] == n_types].sort_values('N')
            plt.errorbar(rows['N'], rows['solve_ms'], yerr=rows['solve_std'], marker='o', label=f'{n_types} types')
        plt.xlabel('Steps N')
        plt.ylabel('Time (ms)')
        plt.title(f'backward_solve ({mode})')
        plt.legend()
        plt.grid(linestyle='--', alpha=0.7)

    plt.tight_layout()
    plt.savefig(os.path.join(output_dir, 'solve_time.png'))

    df.to_csv(os.path.join(output_dir, 'performance_report.csv'), index=False)

    print(f"Results saved to {output_dir}")


def main():
    parser = argparse.ArgumentParser(description='Benchmark the mfelattice solver')
    parser.add_argument('--rounds', type=int, default=3, help='Solves per configuration')
    parser.add_argument('--steps', default='12,24,36,48', help='Comma separated lattice sizes')
    parser.add_argument('--types', default='2,4,8', help='Comma separated n_gamma values')
    parser.add_argument('--output', default='benchmark_results', help='Output directory for results')

    args = parser.parse_args()

    steps = tuple(int(v) for v in args.steps.split(','))
    type_sizes = tuple(int(v) for v in args.types.split(','))
    results = benchmark_solver(args.rounds, steps, type_sizes)
    plot_results(results, args.output)


if __name__ == "__main__":
    main()
