"""Price-matrix bucking as a longest path over 1-cm cut positions.

A node is a cut height; an arc cuts one product starting there.  With a
sample of predicted stems the arc value is the product price times the share
of samples on which the product is feasible, so a single stem reduces to the
classic deterministic problem.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numba
import numpy as np

from .stems import StemProfile, diameters_at, interpolate_diameter


class BuckingError(ValueError):
    pass


@dataclass(frozen=True)
class Product:
    length: int
    min_diameter: float = 0.0
    max_diameter: float = math.inf
    price: float = 0.0

    def __post_init__(self):
        length = float(self.length)
        if length <= 0 or length != round(length):
            raise BuckingError(f"product length must be a positive whole number of cm, got {self.length}")
        object.__setattr__(self, "length", int(round(length)))
        if not (0 <= self.min_diameter <= self.max_diameter):
            raise BuckingError("need 0 <= min_diameter <= max_diameter")
        if not (self.price >= 0 and math.isfinite(self.price)):
            raise BuckingError("price must be finite and >= 0")


@dataclass(frozen=True)
class PriceMatrix:
    products: tuple[Product, ...]

    def __post_init__(self):
        products = tuple(self.products)
        object.__setattr__(self, "products", products)
        if not products:
            raise BuckingError("price matrix needs at least one product")
        if len(set(products)) != len(products):
            raise BuckingError("duplicate products in price matrix")

    def __len__(self):
        return len(self.products)

    def __getitem__(self, i) -> Product:
        return self.products[i]

    @property
    def lengths(self) -> np.ndarray:
        return np.array([p.length for p in self.products], dtype=np.int64)

    @property
    def prices(self) -> np.ndarray:
        return np.array([p.price for p in self.products], dtype=float)

    def with_products(self, extra: Sequence[Product]) -> "PriceMatrix":
        return PriceMatrix(self.products + tuple(extra))


LOG_LENGTHS_CM = (251, 312, 373, 434, 495)
DISCARD = Product(30, 0.0, math.inf, 0.0)


def standard_price_matrix(prices: Sequence[float] | None = None,
                          min_diameters: Sequence[float] | None = None,
                          max_diameter: float = 100.0) -> PriceMatrix:
    """Five logs (251-495 cm) plus the 30-cm zero-price discard piece.

    Prices default to the log lengths, minimum diameters to 9 cm.
    """
    prices = LOG_LENGTHS_CM if prices is None else prices
    mins = (9.0,) * len(LOG_LENGTHS_CM) if min_diameters is None else min_diameters
    if len(prices) != len(LOG_LENGTHS_CM) or len(mins) != len(LOG_LENGTHS_CM):
        raise BuckingError("need one price and one minimum diameter per log length")
    logs = [Product(L, float(m), max_diameter, float(p))
            for L, m, p in zip(LOG_LENGTHS_CM, mins, prices)]
    return PriceMatrix(tuple(logs) + (DISCARD,))


@dataclass(frozen=True)
class CutPlan:
    """Contiguous logs from the stump: ``cuts[i] = (start_cm, product_index)``.

    ``values[i]`` is the planned value of log i (mean over the sample for
    stochastic plans).
    """

    cuts: tuple[tuple[float, int], ...]
    values: tuple[float, ...]
    total_planned_value: float

    @classmethod
    def empty(cls) -> "CutPlan":
        return cls((), (), 0.0)

    def __len__(self):
        return len(self.cuts)

    def segments(self, pm: PriceMatrix) -> list[tuple[float, float, int]]:
        return [(s, s + pm[p].length, p) for s, p in self.cuts]


# --------------------------------------------------------------------------
# Dynamic program


@numba.njit(cache=True)
def _longest_path(gains, allowed, lengths, order):
    P, N1 = gains.shape
    value = np.zeros(N1)
    choice = np.full(N1, -1, dtype=np.int64)
    for h in range(N1 - 1, -1, -1):
        best = 0.0
        bc = -1
        for k in range(order.shape[0]):
            p = order[k]
            if allowed[p, h]:
                v = gains[p, h] + value[h + lengths[p]]
                if bc < 0 or v > best:
                    best = v
                    bc = p
        value[h] = best
        choice[h] = bc
    return value, choice


def _profile_diameters(profile: StemProfile, base: float, n_points: int) -> np.ndarray:
    """Diameters at base + 0, 1, ..., n_points-1 cm; NaN above the top."""
    offsets = np.arange(n_points, dtype=float)
    hs = base + offsets
    inside = hs <= profile.top_height
    out = np.full(n_points, np.nan)
    out[inside] = diameters_at(profile, hs[inside])
    return out


def _feasibility_counts(samples: Sequence[StemProfile], pm: PriceMatrix):
    base = float(samples[0].heights[0])
    tops = [int(math.floor(s.top_height - base + 1e-9)) for s in samples]
    N = max(tops)
    if N < 0:
        return base, np.zeros((len(pm), 1), dtype=np.int64)
    D = np.vstack([_profile_diameters(s, base, N + 1) for s in samples])
    counts = np.zeros((len(pm), N + 1), dtype=np.int64)
    for p, prod in enumerate(pm.products):
        L = prod.length
        if L > N:
            continue
        small = D[:, L:]
        large = D[:, :N + 1 - L]
        ok = (small >= prod.min_diameter) & (large <= prod.max_diameter)
        counts[p, :N + 1 - L] = ok.sum(axis=0)
    return base, counts


def _solve(samples: Sequence[StemProfile], pm: PriceMatrix) -> CutPlan:
    if len(samples) == 0:
        raise BuckingError("empty sample")
    bases = {float(s.heights[0]) for s in samples}
    if len(bases) != 1:
        raise BuckingError("samples must share the same stump height")
    n = len(samples)
    base, counts = _feasibility_counts(samples, pm)
    gains = pm.prices[:, None] * (counts / n)
    allowed = counts > 0
    lengths = pm.lengths
    order = np.array(sorted(range(len(pm)), key=lambda i: (lengths[i], i)), dtype=np.int64)
    value, choice = _longest_path(gains, allowed, lengths, order)
    cuts, values = [], []
    h = 0
    while h < value.size and choice[h] >= 0 and value[h] > 0:
        p = int(choice[h])
        cuts.append((base + h, p))
        values.append(float(gains[p, h]))
        h += int(lengths[p])
    return CutPlan(tuple(cuts), tuple(values), float(value[0]) if cuts else 0.0)


def buck_deterministic(profile: StemProfile, pm: PriceMatrix) -> CutPlan:
    """Value-maximising cut plan for one stem profile.

    Ties go to the shorter product, then to the lower product index.  A
    product is feasible at h when it ends below the top, its small-end
    diameter is at least ``min_diameter`` and its large-end diameter at
    most ``max_diameter``.  Trailing zero-value pieces are not reported.
    """
    return _solve([profile], pm)


def buck_stochastic(samples: Sequence[StemProfile], pm: PriceMatrix) -> CutPlan:
    """Cut plan maximising the mean value over a sample of stem profiles.

    A cut worth ``price`` is valued ``price * k / n`` when it is feasible on
    k of the n samples; cuts feasible on no sample are not allowed, so the
    plan continues while at least one sample can still host a product.
    """
    return _solve(list(samples), pm)


# --------------------------------------------------------------------------
# Evaluation and oracle


def _feasible_on(profile: StemProfile, start: float, prod: Product) -> bool:
    end = start + prod.length
    if start < profile.heights[0] or end > profile.top_height:
        return False
    return (interpolate_diameter(profile, end) >= prod.min_diameter
            and interpolate_diameter(profile, start) <= prod.max_diameter)


def evaluate_plan_on_true(true_profile: StemProfile, plan: CutPlan, pm: PriceMatrix) -> float:
    """Value realised when ``plan`` is cut from the real stem.

    Logs infeasible on the real stem, or running past its top, are worth 0.
    Summed from the top log down, the same order the planner uses.
    """
    total = 0.0
    for start, p in reversed(plan.cuts):
        prod = pm[p]
        if _feasible_on(true_profile, start, prod):
            total = prod.price + total
    return total


def realized_values(true_profile: StemProfile, plan: CutPlan, pm: PriceMatrix) -> list[float]:
    return [pm[p].price if _feasible_on(true_profile, s, pm[p]) else 0.0 for s, p in plan.cuts]


def brute_force_buck(profile: StemProfile, pm: PriceMatrix, max_cuts: int = 64,
                     max_sequences: int = 2_000_000) -> float:
    """Best plan value by enumerating every product sequence from the stump.

    Exponential; meant as a test oracle on short stems.
    """
    base = float(profile.heights[0])
    top = int(math.floor(profile.top_height - base + 1e-9))
    products = pm.products
    feasible_cache: dict[tuple[int, int], bool] = {}

    def feasible(h: int, p: int) -> bool:
        key = (h, p)
        if key not in feasible_cache:
            prod = products[p]
            feasible_cache[key] = h + prod.length <= top and _feasible_on(profile, base + h, prod)
        return feasible_cache[key]

    best = 0.0
    visited = 0
    stack: list[tuple[int, tuple[int, ...]]] = [(0, ())]
    while stack:
        h, seq = stack.pop()
        visited += 1
        if visited > max_sequences:
            raise BuckingError(f"search space exceeds {max_sequences} sequences")
        value = 0.0
        for p in reversed(seq):
            value = products[p].price + value
        if value > best:
            best = value
        if len(seq) >= max_cuts:
            continue
        for p in range(len(products)):
            if feasible(h, p):
                stack.append((h + products[p].length, seq + (p,)))
    return best


# --------------------------------------------------------------------------
# CSV interfaces

PRICE_HEADER = ("length_cm", "min_diam_cm", "max_diam_cm", "price")
PLAN_HEADER = ("stem_id", "cut_start_cm", "product_length_cm", "planned_value", "realized_value")


def read_price_matrix(path: str | Path) -> PriceMatrix:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(c.strip() for c in header) != PRICE_HEADER:
            raise BuckingError(f"{path}: expected header {','.join(PRICE_HEADER)}")
        products = []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 4:
                raise BuckingError(f"{path}: line {lineno}: expected 4 fields")
            try:
                L, lo, hi, price = (float(c) for c in row)
            except ValueError:
                raise BuckingError(f"{path}: line {lineno}: malformed number") from None
            products.append(Product(L, lo, hi, price))
    return PriceMatrix(tuple(products))


def write_price_matrix(path: str | Path, pm: PriceMatrix) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PRICE_HEADER)
        for p in pm.products:
            w.writerow([p.length, repr(p.min_diameter), repr(p.max_diameter), repr(p.price)])


def plan_rows(stem_id: str, plan: CutPlan, pm: PriceMatrix,
              true_profile: StemProfile | None = None) -> list[list]:
    realized = realized_values(true_profile, plan, pm) if true_profile is not None else None
    rows = []
    for k, ((start, p), planned) in enumerate(zip(plan.cuts, plan.values)):
        rows.append([stem_id, f"{start:.1f}", pm[p].length, f"{planned:.6f}",
                     "" if realized is None else f"{realized[k]:.6f}"])
    return rows


def write_plans(path: str | Path, rows: Sequence[Sequence]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PLAN_HEADER)
        w.writerows(rows)
