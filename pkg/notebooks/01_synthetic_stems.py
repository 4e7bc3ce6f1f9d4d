"""
Synthetic stems
===============

Generate a few stems per species, look at their taper and write them to CSV.
"""

# %%
import numpy as np

from stembuck.stems import (SPECIES_PARAMS, Species, diameters_at, parse_stem_csv,
                            resample_grid, synthesize_species, write_stem_csv)

stems = {sp: synthesize_species(sp, 200, seed=1) for sp in Species}
for sp, group in stems.items():
    dbh = np.array([s.diameters[1] for s in group])  # second point is breast height
    tops = np.array([s.top_height for s in group]) / 100
    print(f"{sp.code}: DBH {dbh.mean():5.1f} cm (range {dbh.min():.1f}-{dbh.max():.1f}), "
          f"height {tops.mean():4.1f} m, target DBH mean {SPECIES_PARAMS[sp].dbh_mean}")

# %%
# One stem on the 2-m grid the taper models work with.
stem = stems[Species.PiceaGlauca][0]
gh, gd = resample_grid(stem)
for h, d in zip(gh, gd):
    print(f"{h / 100:5.1f} m  {d:5.1f} cm  " + "#" * int(d))

# %%
# Diameters anywhere along the stem come from linear interpolation.
print(diameters_at(stem, [50.0, 130.0, 777.0]))

# %%
write_stem_csv("stems_demo.csv", stems[Species.PiceaGlauca])
back = parse_stem_csv("stems_demo.csv")
print(len(back), "stems read back;", back[0].stem_id, back[0].heights[:4])
