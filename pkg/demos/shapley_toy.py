"""Exact and sampled Shapley values on a toy function, plus the axioms they satisfy.

Run: python3 demos/shapley_toy.py
"""

import numpy as np

from srw.shap import attributions_to_maps, partition_grid, shapley_exact, shapley_sampled

# four 1x1 "pixels"; f = 2*x0 + 3*x1 + x2*x3 (x2 and x3 interact)
part = partition_grid((1, 4, 1), 1, 1)


def f(batch):
    z = batch.reshape(len(batch), -1)
    return (2 * z[:, 0] + 3 * z[:, 1] + z[:, 2] * z[:, 3])[:, None]


x = np.ones((1, 4, 1))
bg = np.zeros((1, 4, 1))
exact = shapley_exact(f, x, [0], part, bg)
print("exact phi:", exact.values[0], " base", exact.base_values[0])
print("efficiency gap:", exact.efficiency_gap()[0])     # phi0 + sum(phi) - f(x)

rng = np.random.default_rng(0)
for n in (10, 100, 1000):
    est = shapley_sampled(f, x, [0], part, bg, n, rng)
    print(f"{n:5d} permutations: phi {np.round(est.values[0], 3)}  stderr {np.round(est.stderr[0], 3)}")

# block attributions spread back onto pixels
part2 = partition_grid((4, 4, 1), 2, 2)
g = lambda b: b.reshape(len(b), -1).sum(axis=1, keepdims=True)
res = shapley_exact(g, np.ones((4, 4, 1)), [0], part2, np.zeros((4, 4, 1)))
print("\n2x2 block values:", res.values[0])
print("per-pixel map:\n", attributions_to_maps(res, part2)[0, 0])
