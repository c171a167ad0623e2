import os

import mfelattice
from mfelattice.distribution_analyzer import build_report

SCENARIO = os.path.join(os.path.dirname(os.path.abspath(__file__)), "scenarios", "liability_countercyclical.json")


def run_example():
    scenario = mfelattice.load_scenario(SCENARIO)
    solution = mfelattice.solve(scenario, phi_steps=())
    report = build_report(solution)

    print("=== Equilibrium Solve ===")
    print(f"Steps: {scenario.lattice.N}, dt = {scenario.lattice.dt:.4f}")
    print(f"Risk-neutral up probability: {scenario.lattice.p_q:.6f}")
    print(f"Equilibrium up probability at the root: {solution.p[0][0, 0]:.6f}")
    print(f"Max clearing residual: {solution.max_residual:.3e}")
    print()

    print("=== Annualized Excess Returns ===")
    excess = report.excess_returns
    for n in report.metadata["report_steps"]:
        row = excess[excess["n"] == n].set_index("measure")["excess_return"]
        print(f"t = {n * scenario.lattice.dt:.2f}y: " +
              ", ".join(f"{name} {value:+.4f}" for name, value in row.items()))
    print()

    print("=== Trading Volume ===")
    volume = report.volume[report.volume["measure"] == "P"]
    for _, row in volume.iloc[::8].iterrows():
        print(f"t = {row['t']:.2f}y: {row['volume']:.6f}")


if __name__ == "__main__":
    run_example()
