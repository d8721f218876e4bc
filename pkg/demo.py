#!/usr/bin/env python3
"""
Quick demo of the homogenization workbench.
Computes the effective coefficient of the 1D harmonic-mean model in all three
time-scale regimes and compares it with the closed form sqrt(3).
"""

import os
import sys
import math

# Add src to path
sys.path.append(os.path.join(os.path.dirname(__file__), 'src'))


def demo_harmonic_mean():
    """b(1) of c(y) = 2 + sin(2 pi y) for mu = 1, 2, 3."""
    print("Homogenization workbench - Quick Demo")
    print("=" * 40)

    try:
        from cell_problems import CellGrid, effective_flux, energy_identity_check, regime_for
        from flux_models import builtin_models, check_structure

        model = builtin_models()['harmonic_mean_1d']
        report = check_structure(model, 10000, seed=0)
        print(f"Structure check: {'passed' if report.passed else 'FAILED'}")

        grid = CellGrid(dim=1, n_space=1024, n_time=8)
        exact = math.sqrt(3.0)
        print(f"\nEffective coefficient (exact harmonic mean {exact:.6f}):")
        print("-" * 40)
        for mu in (1.0, 2.0, 3.0):
            b, (solution,) = effective_flux(model, mu, [1.0], grid)
            identity = energy_identity_check(solution, model)
            print(f"  mu={mu:g} ({regime_for(mu)}): b(1) = {b[0]:.6f}, "
                  f"error {abs(b[0] - exact):.2e}, energy identity {identity:.1e}")

        print("\nDemo completed successfully!")
        return True

    except ImportError as e:
        print(f"Import error: {e}")
        print("Install dependencies with: pip install -r requirements.txt")
        return False


def demo_heat_oracle():
    """Backward Euler against exp(-pi^2 t) sin(pi x)."""
    from flux_models import FluxModel, FourierSeries, StructureConstants
    from multiscale_fields import SpaceTimeGrid
    from parabolic_solver import FieldSpec, ProblemSpec, energy_balance, solve_fine
    import numpy as np

    heat = FluxModel(family='linear', coefficients={'space': FourierSeries(mean=1.0)},
                     constants=StructureConstants(p=2.0, alpha=1.0, c0=1.0, c1=1.05, c2=0.95))
    spec = ProblemSpec(dim=1, horizon=0.1, source=FieldSpec(kind='constant', value=0.0),
                       initial=FieldSpec(kind='sine', amplitude=1.0, modes=(1,)), model=heat)
    grid = SpaceTimeGrid(dim=1, T=0.1, n_x=256, n_t=1024, epsilon=1.0, mu=2.0)
    result = solve_fine(spec, grid)
    nodes = grid.mesh().node_coordinates()[:, 0]
    exact = math.exp(-math.pi ** 2 * 0.1) * np.sin(math.pi * nodes)
    print("\nHeat equation oracle:")
    print("-" * 40)
    print(f"  max nodal error at T=0.1: {np.max(np.abs(result.trajectory[-1] - exact)):.2e}")
    print(f"  energy balance residual:  {energy_balance(result):.2e}")


def main():
    """Run the demo."""
    print("Starting homogenization workbench demo...\n")

    success = demo_harmonic_mean()

    if success:
        demo_heat_oracle()

        print("\nNext Steps:")
        print("-" * 40)
        print("1. Run full setup: ./setup.sh")
        print("2. Run the convergence study: ./homog study --config configs/oscillating_mu2.json")
        print("3. Read the config reference: docs/CONFIG.md")
    else:
        print("\nSetup Required:")
        print("Run ./setup.sh to install dependencies and try again!")


if __name__ == "__main__":
    main()
