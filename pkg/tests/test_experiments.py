import math
import time

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from stembuck import experiments as ex
from stembuck.bucking import CutPlan, buck_deterministic, standard_price_matrix
from stembuck.models import ModelKind, known_grid_prefix
from stembuck.stems import Species, StemProfile, resample_grid


def test_ci95_examples():
    mean, half = ex.ci95([1, 2, 3])
    assert mean == 2.0
    assert half == pytest.approx(1.96 / math.sqrt(3), rel=1e-12)
    assert ex.ci95([4.5] * 7) == (4.5, 0.0)
    with pytest.raises(ValueError):
        ex.ci95([1.0])


@given(st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=30), st.floats(-10, 10))
def test_ci95_scales_linearly(values, c):
    m, h = ex.ci95(values)
    m2, h2 = ex.ci95([c * v for v in values])
    assert m2 == pytest.approx(c * m, rel=1e-9, abs=1e-6)
    assert h2 == pytest.approx(abs(c) * h, rel=1e-9, abs=1e-6)


def test_ci95_shrinks_with_root_n():
    rng = np.random.default_rng(8)
    pool = rng.gamma(2.0, 30.0, size=50_000)
    ratios = []
    for n in (1000, 2000, 4000):
        a = np.mean([ex.ci95(rng.choice(pool, n))[1] for _ in range(20)])
        b = np.mean([ex.ci95(rng.choice(pool, 2 * n))[1] for _ in range(20)])
        ratios.append(a / b)
    for r in ratios:
        assert abs(r - math.sqrt(2)) / math.sqrt(2) < 0.10


def _stem():
    return StemProfile(Species.PiceaGlauca, "s", [0, 130, 600, 1200, 1500], [35, 30, 22, 12, 5])


def test_value_deviation_examples():
    s = _stem()
    pm = standard_price_matrix()
    plan = buck_deterministic(s, pm)
    assert ex.value_deviation(s, plan, pm) == 0.0
    assert ex.value_deviation(s, CutPlan.empty(), pm) == plan.total_planned_value


def test_scenario_tables():
    assert ex.min_diameter_matrix(3)[4].min_diameter == 18.76
    assert ex.min_diameter_matrix(3)[4].length == 495
    assert [p.min_diameter for p in ex.min_diameter_matrix(1)][:5] == [9.0] * 5
    assert ex.min_diameter_matrix(1) == standard_price_matrix()
    assert ex.price_matrix(1)[4].price == 27.49
    assert ex.price_matrix(9)[4].price == 623.88
    assert [p.price for p in ex.price_matrix(5)][:5] == [251.0, 312.0, 373.0, 434.0, 495.0]
    assert ex.price_matrix(5) == standard_price_matrix()
    for s in range(1, 10):
        pm = ex.price_matrix(s)
        assert pm[-1].length == 30 and pm[-1].price == 0.0
    with pytest.raises(ValueError):
        ex.price_matrix(10)
    with pytest.raises(ValueError):
        ex.min_diameter_matrix(0)


def test_derive_seed_streams():
    assert ex.derive_seed(1, "a") == ex.derive_seed(1, "a")
    assert len({ex.derive_seed(1, "a"), ex.derive_seed(1, "b"), ex.derive_seed(2, "a")}) == 3


def _cases_and_truth():
    hs = 200.0 * np.arange(9)
    out = []
    for k, d0 in enumerate([30, 34, 28, 40, 25]):
        base = StemProfile(Species.PiceaGlauca, f"t{k}", hs, d0 * (1 - hs / 2000))
        for known in (300, 500, 900):
            from dataclasses import replace
            out.append(replace(base, known_prefix_end=float(known)))
    return out


def _true_continuation(case):
    gh, gd = resample_grid(case)
    return gd[gh > case.known_prefix_end + 1e-9]


def test_bias_variance_perfect_predictor():
    cases = _cases_and_truth()
    cells = ex.bias_variance_from_predictions(cases, [_true_continuation(c) for c in cases])
    assert cells
    for c in cells:
        assert c.bias == 0.0 and c.variance == 0.0
        assert c.prediction_height > c.known_height


def test_bias_variance_offset_predictor():
    cases = _cases_and_truth()
    cells = ex.bias_variance_from_predictions(cases, [_true_continuation(c) + 1.0 for c in cases])
    for c in cells:
        assert c.bias == pytest.approx(1.0, abs=1e-12)
        assert c.variance == pytest.approx(0.0, abs=1e-20)


def test_bias_variance_alternating_predictor():
    cases = _cases_and_truth()
    preds = []
    for k, c in enumerate(cases):
        sign = 1.0 if (k // 3) % 2 == 0 else -1.0
        preds.append(_true_continuation(c) + sign)
    # 5 stems: +1, -1, +1, -1, +1 in every cell
    for cell in ex.bias_variance_from_predictions(cases, preds):
        assert cell.n == 5
        e = np.array([1, -1, 1, -1, 1.0])
        assert cell.bias == pytest.approx(e.mean())
        assert cell.variance == pytest.approx(e.var(ddof=1))
    even = cases[:12]
    for cell in ex.bias_variance_from_predictions(even, preds[:12]):
        assert cell.bias == pytest.approx(0.0, abs=1e-12)
        assert cell.variance == pytest.approx(4 / 3)  # n/(n-1) with n = 4


def test_bias_variance_table_shape(deterministic_model, small_data):
    cases = ex.evaluation_cases(small_data.subset("test"))
    cells = ex.bias_variance_table(deterministic_model, cases)
    assert cells
    for c in cells:
        assert c.n >= 2 and c.variance >= 0 and c.prediction_height > c.known_height
    rows = ex.bias_variance_rows("deterministic", "PIM", cells)
    assert len(rows) == len(cells) and len(rows[0]) == len(ex.BIAS_VARIANCE_HEADER)


def test_monotonicity_share_examples():
    C = ex.BiasVarianceCell
    shrinking = [C(k, 2100, 5, 3.0 - 0.5 * i, 0, 1, 0) for i, k in enumerate((300, 500, 700))]
    assert ex.bias_monotonicity_share(shrinking) == 1.0
    growing = [C(k, 2100, 5, 1.0 + i, 0, 1, 0) for i, k in enumerate((300, 500, 700))]
    assert ex.bias_monotonicity_share(growing) == 0.0
    assert math.isnan(ex.bias_monotonicity_share([]))


def test_evaluation_cases_prefix_heights(small_data):
    stem = small_data.subset("test")[0]
    cases = ex.evaluation_cases([stem])
    ends = [c.known_prefix_end for c in cases]
    assert ends[0] == 300 and all(b - a == 200 for a, b in zip(ends, ends[1:]))
    assert ends[-1] <= stem.top_height - 200
    for c in cases:
        assert known_grid_prefix(c).size >= 2


def test_training_sequences_copy_per_prefix(small_data):
    stems = small_data.subset("train")[:3]
    seqs = ex.training_sequences(stems)
    assert len(seqs) == len(ex.evaluation_cases(stems))


def test_prepare_species_split(small_data):
    sizes = [len(small_data.split.train), len(small_data.split.validation), len(small_data.split.test)]
    assert sizes == [24, 8, 8]
    again = ex.prepare_species(Species.PiceaMariana, 40, seed=3)
    assert again.split == small_data.split


def test_grid_single_cell():
    data = ex.prepare_species(Species.PiceaGlauca, 10, seed=1)
    reports = ex.run_hyperparameter_grid([data], [0.3], [2], seed=1, epochs=1)
    assert len(reports) == 1
    r = reports[0]
    assert (r.scenario, r.model, r.species) == ("lambda=0.3;n=2", "stochastic", "PIG")
    assert r.n >= 1 and r.ci95_halfwidth >= 0 and r.min_deviation >= 0


def test_default_grid_cardinality():
    data = [ex.prepare_species(sp, 10, seed=2) for sp in Species]
    t0 = time.perf_counter()
    reports = ex.run_hyperparameter_grid(data, seed=2, epochs=1)
    assert len(reports) == 180
    assert len({(r.scenario, r.species) for r in reports}) == 180
    assert time.perf_counter() - t0 < 600


def test_grid_failure_does_not_abort(monkeypatch):
    from stembuck.nn import TrainingError

    def boom(*args, **kwargs):
        raise TrainingError("diverged")

    monkeypatch.setattr(ex, "train_model", boom)
    data = ex.prepare_species(Species.PiceaGlauca, 10, seed=1)
    reports = ex.run_hyperparameter_grid([data], [0.2, 0.4], [1, 5], seed=1, epochs=1)
    assert len(reports) == 4 and all(r.error == "diverged" for r in reports)
    assert "failed" in ex.format_report_table(reports)


def test_studies_reproducible_and_nonnegative(small_models, tmp_path):
    runs = []
    for k in range(2):
        reports = ex.run_min_diameter_study([small_models], seed=5, sample_size=3, scenarios=(1, 5))
        reports += ex.run_price_study([small_models], seed=5, sample_size=3, scenarios=(1, 9))
        path = tmp_path / f"r{k}.csv"
        ex.write_reports_csv(path, reports)
        runs.append(path.read_bytes())
        assert len(reports) == 3 * 4
        assert all(r.min_deviation >= 0 for r in reports)
    assert runs[0] == runs[1]
    back = ex.read_reports_csv(tmp_path / "r0.csv")
    assert [r.scenario for r in back] == [r.scenario for r in reports]


def test_min_diameter_scenario_one_matches_grid_cell(small_models):
    a = ex.run_min_diameter_study([small_models], seed=5, sample_size=1, scenarios=(1,))
    b = ex.run_baseline_study([small_models], seed=5, sample_size=1)
    assert [(r.model, r.mean_deviation, r.n) for r in a] == [(r.model, r.mean_deviation, r.n) for r in b]


def test_deviations_nonnegative_on_samples(stochastic_model, small_data):
    cases = ex.evaluation_cases(small_data.subset("validation"))
    pm = standard_price_matrix()
    samples = ex.predict_samples(stochastic_model, cases, 4, seed=3)
    devs = ex.deviations(cases, samples, pm)
    assert devs.shape == (len(cases),) and devs.min() >= 0


def test_bias_monotonicity_full_scale(full_scale):
    """With more of the stem measured, the deterministic LSTM's |bias|
    should not grow in at least 70% of the comparable cells."""
    shares, inside_ci = [], []
    for trained in full_scale.trained:
        cases = ex.evaluation_cases(trained.data.subset("test"))
        cells = ex.bias_variance_table(trained.models[ModelKind.DETERMINISTIC], cases)
        shares.append(ex.bias_monotonicity_share(cells))
        inside_ci.append(np.mean([abs(c.bias) <= c.bias_ci95 for c in cells]))
    pooled = float(np.nanmean(shares))
    assert pooled >= 0.70, (
        f"share {pooled:.2f} (per species {np.round(shares, 2).tolist()}); "
        f"{np.mean(inside_ci):.0%} of the cell biases lie within their own 95% CI of zero")
