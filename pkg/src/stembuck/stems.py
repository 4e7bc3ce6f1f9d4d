"""Stem profiles: CSV ingestion, synthetic generation, resampling, splitting
and prefix augmentation.

Heights and diameters are in centimetres throughout.  Height 0 is the stump.
"""
from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

GRID_STEP_CM = 200.0
BREAST_HEIGHT_CM = 130.0


class StemDataError(ValueError):
    pass


class Species(enum.Enum):
    PiceaMariana = "PIM"
    PiceaGlauca = "PIG"
    AbiesBalsamea = "ABB"
    PinusBanksiana = "PIB"

    @property
    def code(self) -> str:
        return self.value

    @classmethod
    def from_code(cls, code: str) -> "Species":
        try:
            return cls(code.strip().upper())
        except ValueError:
            raise StemDataError(f"unknown species code {code!r}") from None


def _frozen(a) -> np.ndarray:
    arr = np.array(a, dtype=float)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class StemProfile:
    """One stem: ordered (height, diameter) measurements.

    ``known_prefix_end`` marks where the measured part stops; everything
    above it is what a model has to predict.  It defaults to the last
    measurement height (fully known stem).
    """

    species: Species
    stem_id: str
    heights: np.ndarray
    diameters: np.ndarray
    known_prefix_end: float = field(default=math.nan)

    def __post_init__(self):
        h = _frozen(self.heights)
        d = _frozen(self.diameters)
        object.__setattr__(self, "heights", h)
        object.__setattr__(self, "diameters", d)
        if h.ndim != 1 or h.shape != d.shape:
            raise StemDataError(f"stem {self.stem_id}: heights/diameters shape mismatch")
        if h.size < 2:
            raise StemDataError(f"stem {self.stem_id}: at least 2 measurements required")
        if not np.all(np.isfinite(h)) or not np.all(np.isfinite(d)):
            raise StemDataError(f"stem {self.stem_id}: non-finite measurement")
        if np.any(np.diff(h) <= 0):
            raise StemDataError(f"stem {self.stem_id}: non-increasing heights")
        if h[0] < 0:
            raise StemDataError(f"stem {self.stem_id}: negative height")
        if np.any(d <= 0):
            raise StemDataError(f"stem {self.stem_id}: diameters must be positive")
        k = self.known_prefix_end
        if math.isnan(k):
            object.__setattr__(self, "known_prefix_end", float(h[-1]))
        elif not (h[0] <= k <= h[-1]):
            raise StemDataError(
                f"stem {self.stem_id}: known_prefix_end {k} outside [{h[0]}, {h[-1]}]"
            )

    @property
    def key(self) -> tuple[str, str]:
        return (self.species.code, self.stem_id)

    @property
    def top_height(self) -> float:
        return float(self.heights[-1])

    def __len__(self) -> int:
        return int(self.heights.size)


def diameters_at(profile: StemProfile, hs) -> np.ndarray:
    """Vectorised :func:`interpolate_diameter`; heights must be in range.

    Uses the same arithmetic as the scalar version so results agree bitwise.
    """
    x = np.asarray(hs, dtype=float)
    knots = profile.heights
    if x.size and (x.min() < knots[0] or x.max() > knots[-1]):
        raise StemDataError(
            f"heights outside measured range [{knots[0]}, {knots[-1]}] of stem {profile.stem_id}"
        )
    i = np.clip(np.searchsorted(knots, x, side="right") - 1, 0, knots.size - 2)
    h0, h1 = knots[i], knots[i + 1]
    d0, d1 = profile.diameters[i], profile.diameters[i + 1]
    t = (x - h0) / (h1 - h0)
    return np.where(x == h0, d0, np.where(x == h1, d1, d0 + t * (d1 - d0)))


def interpolate_diameter(profile: StemProfile, h: float) -> float:
    """Diameter at height ``h`` by linear interpolation between measurements."""
    hs = profile.heights
    if not (hs[0] <= h <= hs[-1]):
        raise StemDataError(
            f"height {h} outside measured range [{hs[0]}, {hs[-1]}] of stem {profile.stem_id}"
        )
    i = min(int(np.searchsorted(hs, h, side="right")) - 1, hs.size - 2)
    h0, h1 = float(hs[i]), float(hs[i + 1])
    d0, d1 = float(profile.diameters[i]), float(profile.diameters[i + 1])
    if h == h0:
        return d0
    if h == h1:
        return d1
    t = (h - h0) / (h1 - h0)
    return d0 + t * (d1 - d0)


def grid_heights(top: float, step: float = GRID_STEP_CM, start: float = 0.0) -> np.ndarray:
    n = int(math.floor((top - start) / step + 1e-9)) + 1
    return start + step * np.arange(n, dtype=float)


def resample_grid(profile: StemProfile, step: float = GRID_STEP_CM) -> tuple[np.ndarray, np.ndarray]:
    """Resample a stem onto the regular grid ``0, step, 2*step, ...``.

    Grid points below the first measurement take the first diameter.
    """
    hs = grid_heights(profile.top_height, step)
    ds = np.interp(hs, profile.heights, profile.diameters)
    return hs, ds


# --------------------------------------------------------------------------
# CSV

CSV_HEADER = ("species", "stem_id", "height_cm", "diameter_cm")


def parse_stem_csv(path: str | Path) -> list[StemProfile]:
    """Read stems from ``species,stem_id,height_cm,diameter_cm`` rows.

    Rows of one stem may appear in any order; they are sorted by height.
    Duplicate heights within one stem are rejected.
    """
    rows: dict[tuple[Species, str], list[tuple[float, float]]] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return []
        if tuple(c.strip() for c in header) != CSV_HEADER:
            raise StemDataError(f"{path}: line 1: expected header {','.join(CSV_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 4:
                raise StemDataError(f"{path}: line {lineno}: expected 4 fields, got {len(row)}")
            try:
                species = Species.from_code(row[0])
            except StemDataError as exc:
                raise StemDataError(f"{path}: line {lineno}: {exc}") from None
            try:
                h = float(row[2])
                d = float(row[3])
            except ValueError:
                raise StemDataError(f"{path}: line {lineno}: malformed number") from None
            if not (math.isfinite(h) and math.isfinite(d)) or d <= 0 or h < 0:
                raise StemDataError(f"{path}: line {lineno}: invalid measurement ({h}, {d})")
            rows.setdefault((species, row[1].strip()), []).append((h, d))

    profiles = []
    for (species, stem_id), pts in rows.items():
        pts.sort()
        hs = np.array([p[0] for p in pts])
        if np.any(np.diff(hs) <= 0):
            raise StemDataError(f"{path}: stem {species.code}/{stem_id}: non-increasing heights")
        if len(pts) < 2:
            raise StemDataError(f"{path}: stem {species.code}/{stem_id}: fewer than 2 measurements")
        profiles.append(StemProfile(species, stem_id, hs, [p[1] for p in pts]))
    return profiles


def write_stem_csv(path: str | Path, profiles: Iterable[StemProfile]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for p in profiles:
            for h, d in zip(p.heights, p.diameters):
                w.writerow([p.species.code, p.stem_id, repr(float(h)), repr(float(d))])


# --------------------------------------------------------------------------
# Splitting and augmentation


@dataclass(frozen=True)
class DataSplit:
    train: list
    validation: list
    test: list

    def sets(self):
        return set(self.train), set(self.validation), set(self.test)


def _split_sizes(n: int) -> tuple[int, int, int]:
    n_train = int(math.floor(0.6 * n + 0.5))
    n_val = int(math.floor(0.2 * n + 0.5))
    return n_train, n_val, n - n_train - n_val


def split_dataset(profiles: Sequence[StemProfile], seed: int) -> DataSplit:
    """Random 60/20/20 split, drawn independently for each species.

    Entries are stem keys ``(species_code, stem_id)``.
    """
    by_species: dict[Species, list] = {}
    for p in profiles:
        by_species.setdefault(p.species, []).append(p.key)
    train, val, test = [], [], []
    for species in Species:
        keys = sorted(set(by_species.get(species, [])))
        if not keys:
            continue
        if len(keys) < 5:
            raise StemDataError(f"species {species.code}: need at least 5 stems, got {len(keys)}")
        rng = np.random.default_rng([seed, list(Species).index(species)])
        order = rng.permutation(len(keys))
        n_train, n_val, _ = _split_sizes(len(keys))
        shuffled = [keys[i] for i in order]
        train += shuffled[:n_train]
        val += shuffled[n_train:n_train + n_val]
        test += shuffled[n_train + n_val:]
    return DataSplit(train, val, test)


def default_prefix_heights(top: float, first: float = 300.0, step: float = 200.0,
                           margin: float = 200.0) -> list[float]:
    """Prefix heights 300, 500, 700, ... cm up to ``margin`` below the top."""
    out = []
    h = first
    while h <= top - margin + 1e-9:
        out.append(h)
        h += step
    return out


def augment_prefixes(profile: StemProfile, prefix_heights: Sequence[float]) -> list[StemProfile]:
    """Copies of ``profile`` whose measured part ends at each prefix height.

    Heights leaving no known or no unknown measurement are dropped.
    """
    if len(prefix_heights) == 0:
        raise StemDataError("prefix_heights must be non-empty")
    hs = profile.heights
    out = []
    for h in prefix_heights:
        n_known = int(np.count_nonzero(hs <= h))
        if n_known >= 1 and n_known < hs.size:
            out.append(replace(profile, known_prefix_end=float(h)))
    return out


# --------------------------------------------------------------------------
# Synthetic stems


@dataclass(frozen=True)
class SyntheticSpeciesParams:
    """Generator settings for one species.

    Height follows a Naslund curve ``H = 1.3 + (dbh / (a + b*dbh))**2`` (m),
    ``height_coefficients = (a, b)``.  ``shape_range`` bounds the per-stem
    linear share of the quadratic taper; lower values give fuller stems.
    """

    dbh_min: float
    dbh_mean: float
    dbh_max: float
    height_coefficients: tuple[float, float]
    taper_noise_sd: float
    shape_range: tuple[float, float] = (0.3, 0.9)
    butt_swell: float = 0.25
    butt_swell_scale_cm: float = 60.0

    def validate(self):
        if not (0 < self.dbh_min < self.dbh_mean < self.dbh_max):
            raise StemDataError("need 0 < dbh_min < dbh_mean < dbh_max")
        if self.taper_noise_sd < 0:
            raise StemDataError("taper_noise_sd must be >= 0")
        lo, hi = self.shape_range
        if not (0 <= lo <= hi <= 1):
            raise StemDataError("shape_range must lie in [0, 1]")
        a, b = self.height_coefficients
        if a <= 0 or b < 0:
            raise StemDataError("invalid height coefficients")
        if self.butt_swell < 0 or self.butt_swell_scale_cm <= 0:
            raise StemDataError("invalid butt swell settings")

    def total_height_cm(self, dbh: float) -> float:
        a, b = self.height_coefficients
        return 100.0 * (1.3 + (dbh / (a + b * dbh)) ** 2)


# DBH ranges from the inventory description (min/avg/max, cm); the rest is
# hand-tuned to give plausible 10-23 m stems.
SPECIES_PARAMS: dict[Species, SyntheticSpeciesParams] = {
    Species.AbiesBalsamea: SyntheticSpeciesParams(10.8, 22.2, 40.0, (1.2, 0.22), 0.4),
    Species.PiceaMariana: SyntheticSpeciesParams(9.3, 19.3, 42.3, (1.3, 0.21), 0.4),
    Species.PiceaGlauca: SyntheticSpeciesParams(11.4, 28.9, 56.8, (1.5, 0.19), 0.8),
    Species.PinusBanksiana: SyntheticSpeciesParams(9.0, 21.0, 47.4, (1.1, 0.20), 0.6),
}


def taper_curve(h, total_height: float, dbh: float, shape: float,
                butt_swell: float = 0.25, swell_scale: float = 60.0):
    """Noiseless diameter at height ``h``: concave quadratic in relative
    height plus a decaying butt swell, scaled so that d(1.3 m) = dbh.
    Reaches 0 at ``total_height``."""

    def g(x):
        z = np.asarray(x, dtype=float) / total_height
        core = 1.0 - shape * z - (1.0 - shape) * z * z
        return core + butt_swell * (1.0 - z) * np.exp(-np.asarray(x, dtype=float) / swell_scale)

    return dbh * g(h) / g(BREAST_HEIGHT_CM)


def generate_synthetic_stems(params: SyntheticSpeciesParams, n: int, seed: int,
                             species: Species = Species.PiceaGlauca,
                             id_prefix: str | None = None) -> list[StemProfile]:
    """Draw ``n`` synthetic stems measured at the stump, breast height and
    every 2 m below the top."""
    params.validate()
    if n < 1:
        raise StemDataError("n must be >= 1")
    rng = np.random.default_rng(seed)
    prefix = id_prefix if id_prefix is not None else species.code
    width = max(4, len(str(n)))
    stems = []
    for i in range(n):
        dbh = rng.uniform(params.dbh_min, params.dbh_max)
        shape = rng.uniform(*params.shape_range)
        top = params.total_height_cm(dbh)
        grid = grid_heights(top - 1e-6)[1:]
        grid = grid[grid < top]
        hs = np.concatenate([[0.0, BREAST_HEIGHT_CM], grid])
        ds = taper_curve(hs, top, dbh, shape, params.butt_swell, params.butt_swell_scale_cm)
        noise = rng.normal(0.0, params.taper_noise_sd, size=hs.size) if params.taper_noise_sd > 0 \
            else np.zeros(hs.size)
        ds = ds + noise
        above = hs >= BREAST_HEIGHT_CM
        ds[above] = np.minimum.accumulate(ds[above])
        keep = ds > 0.1
        keep[:2] = True
        hs, ds = hs[keep], np.maximum(ds[keep], 0.1)
        stems.append(StemProfile(species, f"{prefix}-{i:0{width}d}", hs, ds))
    return stems


def synthesize_species(species: Species, n: int, seed: int) -> list[StemProfile]:
    return generate_synthetic_stems(SPECIES_PARAMS[species], n, seed, species=species)
