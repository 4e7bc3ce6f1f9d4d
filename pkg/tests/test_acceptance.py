"""End-to-end acceptance checks, one test per criterion.

Each test records a PASS/FAIL line that is printed in the terminal summary.
Criteria 5-9 share the session-wide ``full_scale`` fixture (500 stems per
species, 200 epochs), which takes several minutes.
"""
import math
import time

import numpy as np

from conftest import record_acceptance
from test_nn import finite_difference_check
from stembuck import experiments as ex
from stembuck.bucking import brute_force_buck, buck_deterministic, buck_stochastic, standard_price_matrix
from stembuck.models import (ModelKind, first_step_distribution, known_grid_prefix,
                             rollout_stochastic_sample)
from stembuck.nn import (LstmParams, _masked_loss_and_grad, exact_gaussian_nll, gaussian_lambda_loss,
                         lstm_backward, lstm_forward)
from stembuck.stems import (SPECIES_PARAMS, Species, StemProfile, generate_synthetic_stems,
                            interpolate_diameter)


def test_1_loss_identity():
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(1000):
        mu, x = rng.normal(0.25, 0.1, size=2)
        s2 = math.exp(rng.uniform(-8, 2))
        half = gaussian_lambda_loss(mu, s2, x, 0.5)
        exact = exact_gaussian_nll(mu, s2, x) - 0.5 * math.log(2 * math.pi)
        worst = max(worst, abs(half - exact))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-9 and elapsed < 1.0
    record_acceptance(1, ok, f"max |difference| {worst:.2e} (tol 1e-9), {elapsed:.3f} s (< 1 s)")
    assert ok


def _loss_fd_check(p, X, Y, M, kind, lam, eps=1e-6):
    y, cache = lstm_forward(p, X)
    _, dy = _masked_loss_and_grad(y, Y, M, kind, lam)
    grads = lstm_backward(p, cache, dy)
    worst = 0.0
    for name, a in p.arrays.items():
        for idx in np.ndindex(a.shape):
            orig = a[idx]
            a[idx] = orig + eps
            fp = _masked_loss_and_grad(lstm_forward(p, X)[0], Y, M, kind, lam)[0]
            a[idx] = orig - eps
            fm = _masked_loss_and_grad(lstm_forward(p, X)[0], Y, M, kind, lam)[0]
            a[idx] = orig
            fd = (fp - fm) / (2 * eps)
            an = grads[name][idx]
            scale = max(abs(fd), abs(an))
            if scale > 1e-6:
                worst = max(worst, abs(fd - an) / scale)
    return worst


def test_2_gradients():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    worst = 0.0
    for k in range(20):
        kind = "stochastic" if k % 2 == 0 else "deterministic"
        hidden, head = int(rng.integers(2, 6)), int(rng.integers(2, 6))
        B, T = int(rng.integers(1, 4)), int(rng.integers(2, 7))
        p = LstmParams.init(rng, output_size=2 if kind == "stochastic" else 1,
                            hidden_size=hidden, head_size=head)
        X = rng.uniform(0.05, 0.5, size=(B, T))
        Y = X * rng.uniform(0.8, 1.0, size=(B, T))
        M = np.ones((B, T), dtype=bool)
        M[0, T - 1] = B == 1  # one padded step when there is room for it
        worst = max(worst, _loss_fd_check(p, X, Y, M, kind, float(rng.uniform(0.1, 0.9))))
        # plus a random linear functional of every head output
        worst = max(worst, finite_difference_check(p, X, rng.normal(size=(B, T, p.output_size))))
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-4 and elapsed < 30
    record_acceptance(2, ok, f"max relative error {worst:.2e} (< 1e-4), {elapsed:.1f} s (< 30 s)")
    assert ok


def _short_stems(n, seed):
    """Synthetic stems of every species, cut to at most 12 m."""
    stems = []
    rng = np.random.default_rng(seed)
    for sp in Species:
        for s in generate_synthetic_stems(SPECIES_PARAMS[sp], n // 4, int(rng.integers(2**31)), sp):
            top = min(s.top_height, float(rng.uniform(300, 1200)))
            keep = s.heights < top
            hs = np.append(s.heights[keep], top)
            ds = np.append(s.diameters[keep], interpolate_diameter(s, top))
            stems.append(StemProfile(sp, s.stem_id, hs, ds))
    return stems


def test_3_dp_matches_brute_force():
    stems = _short_stems(200, 3)
    pm = standard_price_matrix()
    t0 = time.perf_counter()
    mismatches = sum(buck_deterministic(s, pm).total_planned_value != brute_force_buck(s, pm)
                     for s in stems)
    elapsed = time.perf_counter() - t0
    ok = len(stems) == 200 and mismatches == 0 and elapsed < 60
    record_acceptance(3, ok, f"{mismatches} mismatches on {len(stems)} stems <= 12 m, {elapsed:.1f} s (< 60 s)")
    assert ok


def test_4_stochastic_generalizes_deterministic():
    pm = standard_price_matrix()
    stems = []
    for k, sp in enumerate(Species):
        stems += generate_synthetic_stems(SPECIES_PARAMS[sp], 25, 40 + k, sp)
    bad = 0
    for s in stems:
        det = buck_deterministic(s, pm)
        for sample in ([s], [s] * 5):
            sto = buck_stochastic(sample, pm)
            bad += (sto.cuts != det.cuts or sto.values != det.values
                    or sto.total_planned_value != det.total_planned_value)
    ok = bad == 0 and len(stems) == 100
    record_acceptance(4, ok, f"{bad} differing plans over {len(stems)} stems (n=1 and 5 copies)")
    assert ok


def test_5_optimality_bound(full_scale):
    # every (model, scenario, stem) of the three test-split studies plus the
    # selected grid cell on the validation split
    grid = ex.run_hyperparameter_grid([t.data for t in full_scale.trained], [ex.DEFAULT_LAMBDA],
                                      ex.SAMPLE_SIZE_GRID, full_scale.seed)
    reports = full_scale.reports + grid
    evaluated = sum(r.n for r in reports)
    violations = sum(r.min_deviation < 0 for r in reports)
    failed = [r for r in reports if r.error]
    ok = violations == 0 and not failed and evaluated > 0
    record_acceptance(5, ok, f"{violations} reports with a negative deviation over {evaluated} "
                             f"(model, scenario, stem) evaluations")
    assert ok


def test_6_model_ordering(full_scale):
    by = {(r.species, r.model): r.mean_deviation for r in full_scale.baseline}
    holds = []
    for sp in Species:
        s, d, p = (by[(sp.code, k)] for k in ("stochastic", "deterministic", "polynomial"))
        holds.append(s <= d <= p)
    table = ", ".join(f"{sp.code} {by[(sp.code, 'stochastic')]:.1f}/{by[(sp.code, 'deterministic')]:.1f}/"
                      f"{by[(sp.code, 'polynomial')]:.1f}" for sp in Species)
    n_stems = min(len(t.data.stems) for t in full_scale.trained)
    ok = sum(holds) >= 3 and n_stems >= 500 and full_scale.seconds < 1800
    record_acceptance(6, ok, f"ordering holds in {sum(holds)}/4 species (sto/det/poly: {table}); "
                             f"{n_stems} stems per species; pipeline {full_scale.seconds / 60:.1f} min")
    assert ok


def _pooled(reports, scenario):
    rows = [r for r in reports if r.model == "stochastic" and r.scenario == scenario]
    return sum(r.mean_deviation * r.n for r in rows) / sum(r.n for r in rows)


def test_7_scenario_trends(full_scale):
    d1, d5 = _pooled(full_scale.min_diameter, "min_diameter_1"), _pooled(full_scale.min_diameter, "min_diameter_5")
    p1, p9 = _pooled(full_scale.price, "price_1"), _pooled(full_scale.price, "price_9")
    ok = d5 < d1 and p1 < p9
    record_acceptance(7, ok, f"stochastic, all species pooled: min-diameter 1 -> 5: {d1:.2f} -> {d5:.2f}; "
                             f"price 1 vs 9: {p1:.2f} vs {p9:.2f}")
    assert ok


def _small_pipeline(tmp, tag):
    data = [ex.prepare_species(sp, 30, 11) for sp in (Species.PiceaGlauca, Species.AbiesBalsamea)]
    trained = [ex.TrainedModels.fit(d, 11, epochs=5) for d in data]
    paths = []
    for name, reports in (("grid", ex.run_hyperparameter_grid(data, [0.3], [1, 5], 11, epochs=5)),
                          ("diameter", ex.run_min_diameter_study(trained, 11)),
                          ("price", ex.run_price_study(trained, 11))):
        path = tmp / f"{tag}_{name}.csv"
        ex.write_reports_csv(path, reports)
        paths.append(path)
    return [p.read_bytes() for p in paths]


def test_8_reproducibility(full_scale, tmp_path):
    first = tmp_path / "first.csv"
    ex.write_reports_csv(first, full_scale.min_diameter + full_scale.price)
    again = ex.run_min_diameter_study(full_scale.trained, full_scale.seed)
    again += ex.run_price_study(full_scale.trained, full_scale.seed)
    second = tmp_path / "second.csv"
    ex.write_reports_csv(second, again)
    same_full = first.read_bytes() == second.read_bytes()
    same_small = _small_pipeline(tmp_path, "a") == _small_pipeline(tmp_path, "b")
    ok = same_full and same_small
    record_acceptance(8, ok, f"full-scale study CSVs identical: {same_full}; "
                             f"synthesize-train-study rerun identical: {same_small}")
    assert ok


def test_9_sampler_statistics(full_scale):
    """First draws of the trained stochastic models against their (mu, sigma2).

    Prefixes are chosen where mu sits at least 6 sd above the 4-cm stop rule,
    so neither truncation nor stopping affects the first draw.
    """
    worst = 0.0
    checked = 0
    for trained in full_scale.trained:
        model = trained.models[ModelKind.STOCHASTIC]
        for case in ex.evaluation_cases(trained.data.subset("test")[:20]):
            prefix = known_grid_prefix(case)
            mu, s2 = first_step_distribution(model, prefix)
            if mu - 6 * math.sqrt(s2) < 4.0:
                continue
            n = 10_000
            draws = np.array([p[prefix.size] for p in rollout_stochastic_sample(model, prefix, n, seed=checked)])
            z_mean = abs(draws.mean() - mu) / math.sqrt(s2 / n)
            z_var = abs(draws.var(ddof=1) - s2) / (s2 * math.sqrt(2 / (n - 1)))
            worst = max(worst, z_mean, z_var)
            checked += 1
            break
    ok = checked == 4 and worst < 4
    record_acceptance(9, ok, f"{checked} models, 1e4 draws each, worst deviation {worst:.2f} SE (< 4)")
    assert ok
