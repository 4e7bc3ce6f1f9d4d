"""Scenario studies: value deviation from the true-stem optimum under the
hyper-parameter grid, the minimum-diameter scenarios and the price scenarios,
plus bias/variance tables of the taper predictions.
"""
from __future__ import annotations

import csv
import logging
import math
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .bucking import (CutPlan, PriceMatrix, buck_deterministic, buck_stochastic,
                      evaluate_plan_on_true, standard_price_matrix)
from .models import (ModelKind, TaperModel, fit_polynomial, grid_profile, known_grid_prefix,
                     rollout_deterministic_batch, rollout_stochastic_batch)
from .nn import TrainConfig, TrainingError, train
from .stems import (DataSplit, Species, StemProfile, augment_prefixes, default_prefix_heights,
                    resample_grid, split_dataset, synthesize_species)

log = logging.getLogger(__name__)

DEFAULT_LAMBDA = 0.3
DEFAULT_SAMPLE_SIZE = 10
DEFAULT_MAX_ORDER = 1
LAMBDA_GRID = tuple(round(0.1 * k, 1) for k in range(1, 10))
SAMPLE_SIZE_GRID = (1, 2, 5, 10, 20)

# Minimum small-end diameter (cm) per log length, scenarios 1..5.
MIN_DIAMETER_SCENARIOS = {
    251: (9.00, 9.00, 9.00, 9.00, 9.00),
    312: (9.00, 10.22, 11.44, 12.66, 13.88),
    373: (9.00, 11.44, 13.88, 16.32, 18.76),
    434: (9.00, 12.66, 16.32, 19.98, 23.64),
    495: (9.00, 13.88, 18.76, 23.64, 28.52),
}

# Price per log length, scenarios 1..9 (scenario 5 = length).
PRICE_SCENARIOS = {
    251: (580.76, 437.17, 350.51, 292.52, 251.00, 219.80, 195.50, 176.03, 160.10),
    312: (545.76, 443.97, 382.54, 341.44, 312.00, 289.88, 272.66, 258.86, 247.56),
    373: (441.88, 411.89, 393.78, 381.67, 373.00, 366.48, 361.41, 357.34, 354.01),
    434: (269.12, 340.91, 384.24, 413.24, 434.00, 449.60, 461.75, 471.48, 479.45),
    495: (27.49, 231.06, 353.92, 436.13, 495.00, 539.23, 573.69, 601.28, 623.88),
}


def min_diameter_matrix(scenario: int) -> PriceMatrix:
    if not 1 <= scenario <= 5:
        raise ValueError("minimum-diameter scenarios are numbered 1..5")
    mins = [MIN_DIAMETER_SCENARIOS[L][scenario - 1] for L in sorted(MIN_DIAMETER_SCENARIOS)]
    return standard_price_matrix(min_diameters=mins)


def price_matrix(scenario: int) -> PriceMatrix:
    if not 1 <= scenario <= 9:
        raise ValueError("price scenarios are numbered 1..9")
    prices = [PRICE_SCENARIOS[L][scenario - 1] for L in sorted(PRICE_SCENARIOS)]
    return standard_price_matrix(prices=prices)


def derive_seed(root: int, *names) -> int:
    """Independent, reproducible sub-seed for a named random stream."""
    words = [int(root)] + [zlib.crc32(str(n).encode()) for n in names]
    return int(np.random.SeedSequence(words).generate_state(1)[0])


# --------------------------------------------------------------------------
# Data


@dataclass
class SpeciesData:
    species: Species
    stems: dict
    split: DataSplit

    def subset(self, which: str) -> list[StemProfile]:
        keys = {"train": self.split.train, "validation": self.split.validation,
                "test": self.split.test}[which]
        return [self.stems[k] for k in keys]


def prepare_species(species: Species, n_stems: int, seed: int,
                    profiles: Sequence[StemProfile] | None = None) -> SpeciesData:
    """Synthesize (or take) the stems of one species and split them 60/20/20."""
    if profiles is None:
        profiles = synthesize_species(species, n_stems, derive_seed(seed, "synth", species.code))
    profiles = [p for p in profiles if p.species is species]
    split = split_dataset(profiles, derive_seed(seed, "split"))
    return SpeciesData(species, {p.key: p for p in profiles}, split)


def evaluation_cases(stems: Iterable[StemProfile]) -> list[StemProfile]:
    """Prefix copies of every stem (300, 500, ... cm up to 2 m below the top)."""
    cases = []
    for stem in stems:
        heights = default_prefix_heights(stem.top_height)
        if heights:
            cases.extend(augment_prefixes(stem, heights))
    return cases


def training_sequences(stems: Iterable[StemProfile]) -> list[np.ndarray]:
    """Grid diameter sequences, one per prefix copy of each stem."""
    out = []
    for stem in stems:
        _, gd = resample_grid(stem)
        if gd.size < 2:
            continue
        copies = max(1, len(default_prefix_heights(stem.top_height)))
        out.extend([gd] * copies)
    return out


def train_model(kind: ModelKind | str, data: SpeciesData, seed: int, lam: float = DEFAULT_LAMBDA,
                max_order: int = DEFAULT_MAX_ORDER, epochs: int = 200) -> tuple[TaperModel, list[float]]:
    kind = ModelKind(kind)
    stems = data.subset("train")
    if kind is ModelKind.POLYNOMIAL:
        coeffs = fit_polynomial(stems, max_order)
        return TaperModel(kind, data.species, coeffs), []
    cfg = TrainConfig(epochs=epochs, lam=lam,
                      seed=derive_seed(seed, "init", data.species.code, kind.value, lam))
    params, history = train(kind.value, training_sequences(stems), cfg)
    return TaperModel(kind, data.species, params, lam if kind is ModelKind.STOCHASTIC else None), history


# --------------------------------------------------------------------------
# Metrics


def ci95(values) -> tuple[float, float]:
    """Mean and normal-approximation 95% half-width (1.96 sd / sqrt(n))."""
    x = np.asarray(values, dtype=float)
    if x.size < 2:
        raise ValueError("need at least 2 values")
    return float(x.mean()), float(1.96 * x.std(ddof=1) / math.sqrt(x.size))


def value_deviation(true_profile: StemProfile, plan: CutPlan, pm: PriceMatrix,
                    optimum: float | None = None) -> float:
    """Optimal value on the real stem minus the value realised by ``plan``.

    Rounded to 1e-9 so float summation noise cannot show up as a negative.
    """
    if optimum is None:
        optimum = buck_deterministic(true_profile, pm).total_planned_value
    return round(optimum - evaluate_plan_on_true(true_profile, plan, pm), 9)


def predict_samples(model: TaperModel, cases: Sequence[StemProfile], sample_size: int,
                    seed: int) -> list[list[StemProfile]]:
    """Predicted grid profiles (known prefix ++ continuation) for each case.

    Stochastic models return ``sample_size`` sampled profiles per case, the
    others a single point prediction.
    """
    prefixes = [known_grid_prefix(c) for c in cases]
    if model.kind is ModelKind.STOCHASTIC:
        full = rollout_stochastic_batch(model, prefixes, sample_size, seed)
    else:
        conts = rollout_deterministic_batch(model, prefixes)
        full = [[np.concatenate([p, c])] for p, c in zip(prefixes, conts)]
    out = []
    for case, paths in zip(cases, full):
        profiles = [grid_profile(case, d, f"s{j}") for j, d in enumerate(paths)]
        out.append([p for p in profiles if p is not None])
    return out


def plan_from_samples(samples: Sequence[StemProfile], pm: PriceMatrix) -> CutPlan:
    if not samples:
        return CutPlan.empty()
    if len(samples) == 1:
        return buck_deterministic(samples[0], pm)
    return buck_stochastic(samples, pm)


class OptimumCache:
    """Optimal true-stem values keyed by (stem key, price matrix)."""

    def __init__(self):
        self._values: dict = {}

    def __call__(self, stem: StemProfile, pm: PriceMatrix) -> float:
        key = (stem.key, pm)
        if key not in self._values:
            self._values[key] = buck_deterministic(stem, pm).total_planned_value
        return self._values[key]


def deviations(cases: Sequence[StemProfile], samples: Sequence[Sequence[StemProfile]],
               pm: PriceMatrix, optimum: OptimumCache | None = None) -> np.ndarray:
    optimum = optimum or OptimumCache()
    out = np.empty(len(cases))
    for k, (case, sample) in enumerate(zip(cases, samples)):
        plan = plan_from_samples(sample, pm)
        out[k] = value_deviation(case, plan, pm, optimum(case, pm))
    return out


# --------------------------------------------------------------------------
# Reports


@dataclass(frozen=True)
class ScenarioReport:
    scenario: str
    model: str
    species: str
    n: int
    mean_deviation: float
    ci95_halfwidth: float
    min_deviation: float = 0.0
    error: str = ""

    @classmethod
    def from_deviations(cls, scenario: str, model: str, species: str, devs) -> "ScenarioReport":
        devs = np.asarray(devs, dtype=float)
        if devs.size >= 2:
            mean, half = ci95(devs)
        else:
            mean, half = float(devs.mean()), 0.0
        return cls(scenario, model, species, int(devs.size), mean, half, float(devs.min()))

    @classmethod
    def failed(cls, scenario: str, model: str, species: str, error: str) -> "ScenarioReport":
        return cls(scenario, model, species, 0, math.nan, math.nan, math.nan, error)


REPORT_HEADER = ("scenario", "model", "species", "n", "mean_deviation", "ci95")


def write_reports_csv(path: str | Path, reports: Sequence[ScenarioReport]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_HEADER)
        for r in reports:
            w.writerow([r.scenario, r.model, r.species, r.n,
                        f"{r.mean_deviation:.6f}", f"{r.ci95_halfwidth:.6f}"])


def read_reports_csv(path: str | Path) -> list[ScenarioReport]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    return [ScenarioReport(r["scenario"], r["model"], r["species"], int(r["n"]),
                           float(r["mean_deviation"]), float(r["ci95"])) for r in rows]


def format_report_table(reports: Sequence[ScenarioReport]) -> str:
    lines = [f"{'scenario':<22} {'model':<14} {'species':<8} {'n':>6} {'mean dev':>12}  ci95"]
    for r in reports:
        if r.error:
            lines.append(f"{r.scenario:<22} {r.model:<14} {r.species:<8} {'-':>6} {'failed':>12}  {r.error}")
        else:
            lines.append(f"{r.scenario:<22} {r.model:<14} {r.species:<8} {r.n:>6} "
                         f"{r.mean_deviation:>12.2f}  ±{r.ci95_halfwidth:.2f}")
    return "\n".join(lines)


# --------------------------------------------------------------------------
# Studies


def _grid_cell(args) -> list[ScenarioReport]:
    data, lam, sizes, seed, epochs = args
    species = data.species.code
    try:
        model, _ = train_model(ModelKind.STOCHASTIC, data, seed, lam=lam, epochs=epochs)
    except (TrainingError, ValueError) as exc:
        log.warning("grid cell %s lambda=%s failed: %s", species, lam, exc)
        return [ScenarioReport.failed(f"lambda={lam:g};n={n}", "stochastic", species, str(exc))
                for n in sizes]
    pm = standard_price_matrix()
    cases = evaluation_cases(data.subset("validation"))
    optimum = OptimumCache()
    reports = []
    for n in sizes:
        samples = predict_samples(model, cases, n, derive_seed(seed, "sample", species, lam, n))
        devs = deviations(cases, samples, pm, optimum)
        reports.append(ScenarioReport.from_deviations(f"lambda={lam:g};n={n}", "stochastic",
                                                      species, devs))
    return reports


def _map(fn, jobs, workers: int):
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, jobs))
    return [fn(j) for j in jobs]


def run_hyperparameter_grid(species_data: Sequence[SpeciesData], lambdas: Sequence[float] = LAMBDA_GRID,
                            sample_sizes: Sequence[int] = SAMPLE_SIZE_GRID, seed: int = 0,
                            epochs: int = 200, workers: int = 1) -> list[ScenarioReport]:
    """One stochastic model per (species, lambda); stochastic bucking of the
    validation prefixes for every sample size under the length-price matrix."""
    if not species_data or not lambdas or not sample_sizes:
        raise ValueError("grids must be non-empty")
    jobs = [(d, float(lam), tuple(sample_sizes), seed, epochs) for d in species_data for lam in lambdas]
    return [r for cell in _map(_grid_cell, jobs, workers) for r in cell]


@dataclass
class TrainedModels:
    """The three model kinds for one species."""

    data: SpeciesData
    models: dict = field(default_factory=dict)

    @classmethod
    def fit(cls, data: SpeciesData, seed: int, lam: float = DEFAULT_LAMBDA,
            max_order: int = DEFAULT_MAX_ORDER, epochs: int = 200,
            kinds: Sequence[ModelKind] = tuple(ModelKind)) -> "TrainedModels":
        out = cls(data)
        for kind in kinds:
            out.models[ModelKind(kind)], _ = train_model(kind, data, seed, lam, max_order, epochs)
        return out


def _scenario_study(trained: TrainedModels, scenarios: Sequence[tuple[str, PriceMatrix]],
                    seed: int, sample_size: int, split: str = "test") -> list[ScenarioReport]:
    data = trained.data
    species = data.species.code
    cases = evaluation_cases(data.subset(split))
    optimum = OptimumCache()
    reports = []
    for kind, model in trained.models.items():
        samples = predict_samples(model, cases, sample_size,
                                  derive_seed(seed, "sample", species, kind.value))
        for name, pm in scenarios:
            devs = deviations(cases, samples, pm, optimum)
            reports.append(ScenarioReport.from_deviations(name, kind.value, species, devs))
    return reports


def run_min_diameter_study(trained: Sequence[TrainedModels], seed: int,
                           sample_size: int = DEFAULT_SAMPLE_SIZE,
                           scenarios: Sequence[int] = (1, 2, 3, 4, 5)) -> list[ScenarioReport]:
    pms = [(f"min_diameter_{s}", min_diameter_matrix(s)) for s in scenarios]
    return [r for t in trained for r in _scenario_study(t, pms, seed, sample_size)]


def run_price_study(trained: Sequence[TrainedModels], seed: int,
                    sample_size: int = DEFAULT_SAMPLE_SIZE,
                    scenarios: Sequence[int] = tuple(range(1, 10))) -> list[ScenarioReport]:
    pms = [(f"price_{s}", price_matrix(s)) for s in scenarios]
    return [r for t in trained for r in _scenario_study(t, pms, seed, sample_size)]


def run_baseline_study(trained: Sequence[TrainedModels], seed: int,
                       sample_size: int = DEFAULT_SAMPLE_SIZE) -> list[ScenarioReport]:
    """All model kinds under the length-price matrix on the test split."""
    pms = [("length_price", standard_price_matrix())]
    return [r for t in trained for r in _scenario_study(t, pms, seed, sample_size)]


# --------------------------------------------------------------------------
# Bias and variance


@dataclass(frozen=True)
class BiasVarianceCell:
    known_height: float
    prediction_height: float
    n: int
    bias: float
    bias_ci95: float
    variance: float
    variance_ci95: float


def _cells_from_errors(groups: dict) -> list[BiasVarianceCell]:
    cells = []
    for (known, pred_h), errs in sorted(groups.items()):
        e = np.asarray(errs, dtype=float)
        if e.size < 2:
            continue
        bias = float(e.mean())
        var = float(e.var(ddof=1))
        bias_ci = float(1.96 * e.std(ddof=1) / math.sqrt(e.size))
        sq = (e - bias) ** 2
        var_ci = float(1.96 * sq.std(ddof=1) / math.sqrt(e.size))
        cells.append(BiasVarianceCell(known, pred_h, int(e.size), bias, bias_ci, var, var_ci))
    return cells


def bias_variance_from_predictions(cases: Sequence[StemProfile],
                                   continuations: Sequence[np.ndarray]) -> list[BiasVarianceCell]:
    """Bucket prediction errors (predicted - true, cm) by known height and
    prediction height.  ``continuations[k]`` holds grid diameters above the
    known prefix of ``cases[k]``."""
    groups: dict = {}
    for case, cont in zip(cases, continuations):
        gh, gd = resample_grid(case)
        start = int(np.count_nonzero(gh <= case.known_prefix_end + 1e-9))
        m = min(len(cont), gh.size - start)
        for j in range(m):
            key = (float(case.known_prefix_end), float(gh[start + j]))
            groups.setdefault(key, []).append(float(cont[j]) - float(gd[start + j]))
    return _cells_from_errors(groups)


def bias_variance_table(model: TaperModel, cases: Sequence[StemProfile]) -> list[BiasVarianceCell]:
    """Bias/variance cells of the point rollout (the mean rollout for
    stochastic models)."""
    prefixes = [known_grid_prefix(c) for c in cases]
    conts = rollout_deterministic_batch(model, prefixes)
    return bias_variance_from_predictions(cases, conts)


BIAS_VARIANCE_HEADER = ("model", "species", "known_height_cm", "prediction_height_cm", "n",
                        "bias_cm", "bias_ci95", "variance_cm2", "variance_ci95")


def bias_variance_rows(model: str, species: str, cells: Sequence[BiasVarianceCell]) -> list[list]:
    return [[model, species, f"{c.known_height:.0f}", f"{c.prediction_height:.0f}", c.n,
             f"{c.bias:.6f}", f"{c.bias_ci95:.6f}", f"{c.variance:.6f}", f"{c.variance_ci95:.6f}"]
            for c in cells]


def write_bias_variance_csv(path: str | Path, rows: Sequence[Sequence]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(BIAS_VARIANCE_HEADER)
        w.writerows(rows)


def bias_monotonicity_share(cells: Sequence[BiasVarianceCell]) -> float:
    """Share of (prediction height, consecutive known heights) pairs where
    knowing more of the stem does not increase |bias|."""
    by_pred: dict = {}
    for c in cells:
        by_pred.setdefault(c.prediction_height, []).append(c)
    ok = total = 0
    for group in by_pred.values():
        group.sort(key=lambda c: c.known_height)
        for a, b in zip(group, group[1:]):
            total += 1
            ok += abs(b.bias) <= abs(a.bias)
    return ok / total if total else math.nan
