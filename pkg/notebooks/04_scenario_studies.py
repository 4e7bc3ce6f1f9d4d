"""
Scenario studies
================

A small version of the minimum-diameter and price studies.  The command line
(`stembuck study-diameter`, `stembuck study-price`) runs them at full size.
"""

# %%
from stembuck import experiments as ex
from stembuck.stems import Species

data = [ex.prepare_species(sp, 100, seed=5) for sp in (Species.PiceaGlauca, Species.PinusBanksiana)]
trained = [ex.TrainedModels.fit(d, seed=5, epochs=40) for d in data]

# %%
print(ex.format_report_table(ex.run_baseline_study(trained, seed=5)))

# %%
print(ex.format_report_table(ex.run_min_diameter_study(trained, seed=5, scenarios=(1, 3, 5))))

# %%
print(ex.format_report_table(ex.run_price_study(trained, seed=5, scenarios=(1, 5, 9))))

# %%
# A slice of the lambda by sample-size grid on the validation split.
reports = ex.run_hyperparameter_grid(data[:1], lambdas=(0.2, 0.3), sample_sizes=(1, 10), seed=5, epochs=40)
print(ex.format_report_table(reports))
