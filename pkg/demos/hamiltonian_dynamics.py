"""Leapfrog trajectories and HMC chains on the three-bump 2-D target.

Prints the energy drift of one trajectory, the acceptance rate of a batch
of chains for a few step sizes, and writes CSV dumps that can be plotted
with any tool.

    python demos/hamiltonian_dynamics.py
"""
import numpy as np

from hmcvi.hmc import ChainNoise, HmcConfig, run_chain_batch, simulate_ensemble, write_ensemble_csv
from hmcvi.leapfrog import LeapfrogConfig, PhaseState, trajectory, write_trajectory_csv
from hmcvi.potential import make_target

pot = make_target("mixture3")
rng = np.random.default_rng(0)

# A single trajectory: H should wobble but not drift.
start = PhaseState(np.array([1.0, 0.5]), np.array([0.3, -1.2]))
rows = trajectory(pot, start, LeapfrogConfig(step_size=0.1, n_steps=100))
write_trajectory_csv("trajectory.csv", rows)
energies = np.array([r["H"] for r in rows])
print(f"trajectory: {len(rows)} states, max |H - H0| = {np.max(np.abs(energies - energies[0])):.3e}")

# Bigger steps cost acceptance.
z0 = rng.uniform(-3, 3, (500, 2))
for eps in (0.05, 0.2, 0.6):
    trace = run_chain_batch(pot, z0, 20, eps, 10, 0.0, np.zeros(2), True, ChainNoise.draw(rng, 500, 2, 20))
    print(f"step size {eps:4.2f}: mean acceptance {np.mean(trace.accept_rates()):.3f}")

# Particles spread from a uniform box towards the three bumps.
cfg = HmcConfig(n_hmc=20, leapfrog=LeapfrogConfig(0.2, 10), alpha=0.5, with_acceptance=True)
snaps = simulate_ensemble(pot, lambda n, r: r.uniform(-3, 3, (n, 2)), 500, cfg, None, rng)
write_ensemble_csv("ensemble.csv", snaps)
print("wrote trajectory.csv and ensemble.csv")
