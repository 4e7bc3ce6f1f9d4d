"""
Bucking
=======

Optimal cutting of one stem, then the same stem planned from sampled
predictions.
"""

# %%
from stembuck.bucking import (brute_force_buck, buck_deterministic, buck_stochastic,
                              evaluate_plan_on_true, standard_price_matrix)
from stembuck.stems import Species, StemProfile

pm = standard_price_matrix()
for p in pm.products:
    print(p)

# %%
stem = StemProfile(Species.PiceaGlauca, "demo", [0, 130, 600, 1200, 1500], [35, 30, 22, 12, 5])
plan = buck_deterministic(stem, pm)
for start, end, p in plan.segments(pm):
    print(f"{start:6.0f} - {end:6.0f} cm  length {pm[p].length}")
print("value", plan.total_planned_value, "brute force", brute_force_buck(stem, pm))

# %%
# Three guesses of the same stem.  A log earns its price times the share of
# guesses on which it fits.
guesses = [
    StemProfile(Species.PiceaGlauca, "g1", [0, 1500], [35, 5]),
    StemProfile(Species.PiceaGlauca, "g2", [0, 1100], [33, 6]),
    StemProfile(Species.PiceaGlauca, "g3", [0, 1700], [36, 7]),
]
robust = buck_stochastic(guesses, pm)
print("planned", robust.total_planned_value, "on the real stem", evaluate_plan_on_true(stem, robust, pm))
