"""Pick expert neurons that rank high at every relevant step.

A neuron joins a level's expert set only if its attribution score is in the
top k at each chosen step. Here we plant a handful of neurons that matter at
every step among many that spike strongly but only now and then. Any single
step's top k is crowded by the spiky ones; the intersection keeps only
neurons that are consistently important.

    python3 demos/select_experts.py
"""
import logging

import numpy as np

from neuromon.mon import AttributionMatrix, select_mon, top_k_sets

logging.basicConfig(level=logging.WARNING, format="  (%(message)s)")

# The smallest case: n1 leads step 0, n2 leads step 1, only n2 is in both top-2 lists.
worked = AttributionMatrix.from_names(["n1", "n2", "n3"], [[5, 1], [3, 4], [2, 2]])
print("worked example, k=2:", sorted(select_mon(worked, 2, "intra").neurons))

rng = np.random.default_rng(3)
n_neurons, n_steps = 400, 6
names = [f"L{12 + i % 8}.ffn.{i}" for i in range(n_neurons)]
scores = rng.exponential(1.0, (n_neurons, n_steps))
scores[rng.random((n_neurons, n_steps)) < 0.05] += 6.0  # occasional strong spikes
experts = rng.choice(n_neurons, 8, replace=False)
scores[experts] += 4.0  # consistently important at every step
matrix = AttributionMatrix.from_names(names, scores)
planted = {names[i] for i in experts}

print(f"\n{'k':>4}  {'step-0 top k':>22}  {'intersection':>22}")
for k in (10, 20, 40, 80):
    first = top_k_sets(matrix, k)[0]
    chosen = select_mon(matrix, k, "inter").neurons
    print(f"{k:4d}  {len(first & planted)} experts + {len(first - planted):2d} others"
          f"  {len(chosen & planted):>8} experts + {len(chosen - planted):2d} others")
