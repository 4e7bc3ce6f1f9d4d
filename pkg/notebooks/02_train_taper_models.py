"""
Taper models
============

Fit the polynomial, deterministic LSTM and stochastic LSTM on one species
and compare their continuation of a partly measured stem.
"""

# %%
import numpy as np

from stembuck import experiments as ex
from stembuck.models import ModelKind, first_step_distribution, known_grid_prefix, \
    rollout_deterministic, rollout_stochastic_sample
from stembuck.stems import Species, resample_grid

data = ex.prepare_species(Species.PiceaMariana, 200, seed=4)
print({k: len(v) for k, v in zip(("train", "validation", "test"), data.split.sets())})

# %%
# 60 epochs keeps this demo short; the studies use 200.
trained = ex.TrainedModels.fit(data, seed=4, epochs=60)
models = trained.models

# %%
case = ex.evaluation_cases(data.subset("test")[:1])[1]  # first 5 m known
prefix = known_grid_prefix(case)
_, truth = resample_grid(case)
print("known:", np.round(prefix, 1))
print("truth:", np.round(truth[prefix.size:], 1))
for kind in (ModelKind.POLYNOMIAL, ModelKind.DETERMINISTIC, ModelKind.STOCHASTIC):
    print(f"{kind.value:>13}:", np.round(rollout_deterministic(models[kind], prefix), 1))

# %%
# The stochastic model gives a distribution for the next diameter ...
mu, s2 = first_step_distribution(models[ModelKind.STOCHASTIC], prefix)
print(f"next diameter ~ N({mu:.2f}, {s2:.3f})")

# %%
# ... and whole sampled stems when its draws are fed back in.
for path in rollout_stochastic_sample(models[ModelKind.STOCHASTIC], prefix, 5, seed=0):
    print(np.round(path, 1))

# %%
# Bias of the point predictions by known height and prediction height.
cells = ex.bias_variance_table(models[ModelKind.DETERMINISTIC], ex.evaluation_cases(data.subset("test")))
for c in cells[:8]:
    print(f"known {c.known_height:5.0f}  at {c.prediction_height:5.0f}  bias {c.bias:+.2f} cm  var {c.variance:.2f}")
