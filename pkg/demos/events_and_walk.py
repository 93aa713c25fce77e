"""Evaluate a few of the multiscale events and run the oscillating walk that
ties the two measures together.

    python demos/events_and_walk.py
"""

import numpy as np

from gmcweld.event_stats import EventSpec, World, event_frequency, lebesgue_shape
from gmcweld.gmc_measures import build_measure
from gmcweld.oscillating_walk import WalkParams, occupation_stats, run_walk
from gmcweld.whitenoise_fields import sample_field_stack

# exact arithmetic: the Shape predicate for Lebesgue measure at rho = 2^-e
for e in (2, 140):
    ok, detail = lebesgue_shape(e, 1, detail=True)
    print(f"Shape for Lebesgue at rho=2^-{e}: {ok}  parts {detail['parts']}")


def worlds(R, gamma, M=256, rho=1 / 16, depth=5):
    for r in range(R):
        stacks = tuple(sample_field_stack(M, rho, depth, 0, substeps=4, first_replica=2 * r + j) for j in (0, 1))
        yield World(tuple(build_measure(s, gamma) for s in stacks), stacks, gamma, rho)


for gamma in (0.0, 0.05, 0.1, 0.2):
    table = event_frequency([EventSpec("Frac", {"n": 1}), EventSpec("Upp", {"n": 1})], worlds(100, gamma))
    print(f"gamma={gamma}: " + ", ".join(f"{row['event']} {row['rate']:.2f}" for row in table))

p = WalkParams(0.1, np.exp(-1), 200)
batch = run_walk(p, steps=400, n_traces=1000, seed=0)
s = occupation_stats(batch)
print(f"walk: d={p.d:.3f}, occupation of [-d, d] over [N, 3N] {s['occupation_mean']:.3f}, "
      f"P(at least {s['n_stop']} visits by 3N) = {s['p_stop']:.3f}")
tr = batch.trace(0)
print("first selections (t, s):", [(round(float(a), 3), round(float(b), 3)) for a, b in tr.ts[:4]])
