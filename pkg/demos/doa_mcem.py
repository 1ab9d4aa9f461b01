"""Monte Carlo EM on a small direction-of-arrival problem.

Runs a shortened MCEM fit, then compares the Monte Carlo information at the
estimate with the exact information of the 256-bin grid surrogate.

    python3 demos/doa_mcem.py
"""
import math

import numpy as np

from regimeml import doa, grid, inference_exact, mcem

theta_star = doa.DoaParams(0.25, 0.64, 0.36)
data = doa.simulate_doa(theta_star, 100, 4, w0=math.pi, seed=5)
y = data.snapshots

config = mcem.McemConfig(iterations=20, mh_samples=20_000, burn_in=10_000, eta_thin=200)
traj = mcem.mcem_fit(y, math.pi, doa.DoaParams(0.6, 0.3, 0.8), config, rng=7)
tilde = traj.tail_mean(10)
print("iterates (sigma_eta^2, sigma_s^2, sigma_eps^2):")
for i in (0, 1, 2, 5, 10, 20):
    print(f"  {i:3d}", np.round(traj.params[i].as_array(), 4), f"accept={traj.accept_rate[i]:.3f}")
print("tail mean:", np.round(tilde.as_array(), 4))

mc = mcem.mc_observed_information(tilde, y, math.pi, rng=np.random.default_rng(3))
exact = grid.grid_louis_information(grid.GridDoaModel(tilde, 256), y)
rel = np.linalg.norm(mc.info.matrix - exact.matrix) / np.linalg.norm(exact.matrix)
print("Monte Carlo information:\n", np.round(mc.info.matrix, 1))
print(f"relative Frobenius distance to the grid information: {rel:.3f}")

chi = inference_exact.chi_square_test(tilde.as_array(), theta_star.as_array(), mc.info)
print(f"chi-square at the true parameters: {chi.statistic:.3f} on {chi.df} df, p={chi.p_value:.3f}")
