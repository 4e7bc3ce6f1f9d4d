"""Taper models behind one prediction interface.

* ``stochastic``: LSTM predicting N(mu, sigma2) of the next grid diameter;
  continuations are sampled by feeding each draw back in.
* ``deterministic``: same LSTM with a point head, rolled out on its own
  predictions.
* ``polynomial``: least squares on monomials of height and the first known
  diameter; ignores everything else in the prefix.

All rollouts work on the 2-m grid starting at the stump and stop once a
predicted diameter falls below 4 cm or the next grid height passes 40 m.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import checkpoint
from .nn import DIAMETER_SCALE, LstmParams, PARAM_NAMES, lstm_step, split_gaussian
from .stems import GRID_STEP_CM, Species, StemProfile, resample_grid

MIN_DIAMETER_CM = 4.0
MAX_HEIGHT_CM = 4000.0
MAX_REJECTION_TRIES = 100
POLY_SCALE = 100.0


class ModelKind(str, enum.Enum):
    STOCHASTIC = "stochastic"
    DETERMINISTIC = "deterministic"
    POLYNOMIAL = "polynomial"


@dataclass(frozen=True)
class PolynomialCoeffs:
    max_order: int
    coefficients: np.ndarray

    def __post_init__(self):
        expected = (self.max_order + 1) * (self.max_order + 2) // 2
        if self.coefficients.shape != (expected,):
            raise ValueError(f"order {self.max_order} needs {expected} coefficients")

    @property
    def exponents(self) -> list[tuple[int, int]]:
        return monomial_exponents(self.max_order)


def monomial_exponents(max_order: int) -> list[tuple[int, int]]:
    """(a, b) pairs for h**a * d0**b, ordered by total degree then falling a."""
    if max_order < 0:
        raise ValueError("max_order must be >= 0")
    return [(a, deg - a) for deg in range(max_order + 1) for a in range(deg, -1, -1)]


def _design(h, d0, max_order: int) -> np.ndarray:
    hs = np.asarray(h, dtype=float) / POLY_SCALE
    ds = np.broadcast_to(np.asarray(d0, dtype=float) / POLY_SCALE, hs.shape)
    return np.stack([hs ** a * ds ** b for a, b in monomial_exponents(max_order)], axis=-1)


def fit_polynomial(stems: Sequence[StemProfile], max_order: int) -> PolynomialCoeffs:
    """Ordinary least squares of grid diameters on h**a * d0**b, a+b <= P."""
    hs, d0s, ds = [], [], []
    for stem in stems:
        gh, gd = resample_grid(stem)
        hs.append(gh)
        ds.append(gd)
        d0s.append(np.full(gh.size, gd[0]))
    if not hs:
        raise ValueError("no training stems")
    h = np.concatenate(hs)
    A = _design(h, np.concatenate(d0s), max_order)
    y = np.concatenate(ds) / POLY_SCALE
    if A.shape[0] < A.shape[1]:
        raise ValueError(f"{A.shape[0]} points cannot fit {A.shape[1]} coefficients")
    rank = np.linalg.matrix_rank(A)
    if rank < A.shape[1]:
        raise ValueError(f"rank-deficient design matrix (rank {rank} < {A.shape[1]})")
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    return PolynomialCoeffs(max_order, coef)


def predict_polynomial(coeffs: PolynomialCoeffs, d0: float, heights) -> np.ndarray:
    """Predicted diameters (cm) at ``heights``, clamped at zero."""
    A = _design(np.asarray(heights, dtype=float), d0, coeffs.max_order)
    return np.maximum(A @ coeffs.coefficients * POLY_SCALE, 0.0)


@dataclass(frozen=True)
class TaperModel:
    kind: ModelKind
    species: Species
    params: LstmParams | PolynomialCoeffs
    lam: float | None = None

    def __post_init__(self):
        kind = ModelKind(self.kind)
        object.__setattr__(self, "kind", kind)
        if kind is ModelKind.POLYNOMIAL:
            if not isinstance(self.params, PolynomialCoeffs):
                raise ValueError("polynomial model needs PolynomialCoeffs")
        else:
            if not isinstance(self.params, LstmParams):
                raise ValueError(f"{kind.value} model needs LstmParams")
            k = 2 if kind is ModelKind.STOCHASTIC else 1
            if self.params.output_size != k:
                raise ValueError(f"{kind.value} model needs a head of size {k}")
        if kind is ModelKind.STOCHASTIC and self.lam is not None and not (0 < self.lam < 1):
            raise ValueError("lambda must lie in (0, 1)")

    # -- persistence ------------------------------------------------------

    def save(self, path: str | Path) -> None:
        meta = {"kind": self.kind.value, "species": self.species.code}
        if self.lam is not None:
            meta["lambda"] = float(self.lam).hex()
        if isinstance(self.params, PolynomialCoeffs):
            meta["max_order"] = str(self.params.max_order)
            arrays = {"coefficients": self.params.coefficients}
        else:
            p = self.params
            meta.update(input_size=str(p.input_size), hidden_size=str(p.hidden_size),
                        head_size=str(p.head_size), output_size=str(p.output_size))
            arrays = {name: p[name] for name in PARAM_NAMES}
        checkpoint.save_arrays(path, arrays, meta)

    @classmethod
    def load(cls, path: str | Path) -> "TaperModel":
        arrays, meta = checkpoint.load_arrays(path)
        try:
            kind = ModelKind(meta["kind"])
            species = Species.from_code(meta["species"])
            lam = float.fromhex(meta["lambda"]) if "lambda" in meta else None
            if kind is ModelKind.POLYNOMIAL:
                params = PolynomialCoeffs(int(meta["max_order"]), arrays["coefficients"])
            else:
                params = LstmParams(arrays, int(meta["input_size"]), int(meta["hidden_size"]),
                                    int(meta["head_size"]), int(meta["output_size"]))
        except (KeyError, ValueError) as exc:
            raise checkpoint.CheckpointError(f"{path}: invalid model checkpoint ({exc})") from None
        return cls(kind, species, params, lam)


# --------------------------------------------------------------------------
# Rollouts


def _max_points() -> int:
    return int(MAX_HEIGHT_CM // GRID_STEP_CM) + 1


def _truncated_normal(rng: np.random.Generator, mu: np.ndarray, sd: np.ndarray) -> np.ndarray:
    """N(mu, sd**2) draws rejected below zero; clamped to 0 after 100 tries."""
    out = mu + sd * rng.standard_normal(mu.shape)
    bad = out < 0
    tries = 1
    while bad.any() and tries < MAX_REJECTION_TRIES:
        out[bad] = mu[bad] + sd[bad] * rng.standard_normal(int(bad.sum()))
        bad = out < 0
        tries += 1
    out[bad] = 0.0
    return out


def _lstm_rollout(model: TaperModel, prefixes: Sequence[np.ndarray], n: int,
                  rng: np.random.Generator | None) -> list[list[np.ndarray]]:
    """Roll ``n`` paths per prefix through the LSTM.  With ``rng`` None the
    next input is the predicted mean, otherwise a truncated-normal draw."""
    params: LstmParams = model.params
    stochastic = model.kind is ModelKind.STOCHASTIC
    cap = _max_points()
    pre = [np.asarray(p, dtype=float)[:cap] for p in prefixes]
    lengths = np.repeat([p.size for p in pre], n)
    P = lengths.size
    known = np.zeros((P, cap))
    for k, p in enumerate(pre):
        known[k * n:(k + 1) * n, :p.size] = p
    last_known = known[np.arange(P), lengths - 1]
    active = (last_known >= MIN_DIAMETER_CM) & (lengths < cap)
    generated = np.zeros((P, cap))
    n_gen = np.zeros(P, dtype=int)
    h = np.zeros((P, params.hidden_size))
    c = np.zeros((P, params.hidden_size))
    x = known[:, 0].copy()
    for t in range(cap - 1):
        if not active.any():
            break
        y, h, c, _, _ = lstm_step(params, (x / DIAMETER_SCALE)[:, None], h, c)
        if stochastic:
            mu, s2 = split_gaussian(y)
            if rng is not None:
                value = _truncated_normal(rng, mu, np.sqrt(s2)) * DIAMETER_SCALE
            else:
                value = np.maximum(mu, 0.0) * DIAMETER_SCALE
        else:
            value = np.maximum(y[:, 0], 0.0) * DIAMETER_SCALE
        predicting = active & (t + 1 >= lengths)
        stop = predicting & (value < MIN_DIAMETER_CM)
        active &= ~stop
        take = predicting & ~stop
        generated[take, t + 1] = value[take]
        n_gen[take] += 1
        if t + 2 >= cap:
            break
        feed_known = t + 1 < lengths
        x = np.where(feed_known, known[:, min(t + 1, cap - 1)], value)
    out = []
    for k, p in enumerate(pre):
        paths = []
        for j in range(k * n, (k + 1) * n):
            L = lengths[j]
            paths.append(generated[j, L:L + n_gen[j]].copy())
        out.append(paths)
    return out


def rollout_deterministic_batch(model: TaperModel, prefixes: Sequence[np.ndarray]) -> list[np.ndarray]:
    """Point continuation of every prefix (grid diameters above the prefix).

    The stochastic model is rolled out on its predicted means.
    """
    for p in prefixes:
        if len(p) < 1:
            raise ValueError("prefix must contain at least one grid point")
    if model.kind is ModelKind.POLYNOMIAL:
        return [_polynomial_continuation(model.params, np.asarray(p, dtype=float)) for p in prefixes]
    return [paths[0] for paths in _lstm_rollout(model, prefixes, 1, None)]


def rollout_deterministic(model: TaperModel, prefix) -> np.ndarray:
    return rollout_deterministic_batch(model, [prefix])[0]


def _polynomial_continuation(coeffs: PolynomialCoeffs, prefix: np.ndarray) -> np.ndarray:
    cap = _max_points()
    if prefix[-1] < MIN_DIAMETER_CM or prefix.size >= cap:
        return np.zeros(0)
    heights = GRID_STEP_CM * np.arange(prefix.size, cap)
    pred = predict_polynomial(coeffs, prefix[0], heights)
    below = np.nonzero(pred < MIN_DIAMETER_CM)[0]
    return pred[:below[0]] if below.size else pred


def rollout_stochastic_batch(model: TaperModel, prefixes: Sequence[np.ndarray], n: int,
                             seed: int) -> list[list[np.ndarray]]:
    """``n`` sampled full grid profiles (prefix ++ continuation) per prefix."""
    if n < 1:
        raise ValueError("sample size must be >= 1")
    if model.kind is not ModelKind.STOCHASTIC:
        raise ValueError("sampling needs a stochastic model")
    for p in prefixes:
        if len(p) < 1:
            raise ValueError("prefix must contain at least one grid point")
    rng = np.random.default_rng(seed)
    conts = _lstm_rollout(model, prefixes, n, rng)
    return [[np.concatenate([np.asarray(p, dtype=float), c]) for c in paths]
            for p, paths in zip(prefixes, conts)]


def rollout_stochastic_sample(model: TaperModel, prefix, n: int, seed: int) -> list[np.ndarray]:
    return rollout_stochastic_batch(model, [prefix], n, seed)[0]


def first_step_distribution(model: TaperModel, prefix) -> tuple[float, float]:
    """(mu, sigma2) in cm / cm**2 for the first grid point above ``prefix``."""
    if model.kind is not ModelKind.STOCHASTIC:
        raise ValueError("needs a stochastic model")
    params: LstmParams = model.params
    h = np.zeros((1, params.hidden_size))
    c = np.zeros((1, params.hidden_size))
    y = None
    for v in np.asarray(prefix, dtype=float):
        y, h, c, _, _ = lstm_step(params, np.array([[v / DIAMETER_SCALE]]), h, c)
    mu, s2 = split_gaussian(y)
    return float(mu[0] * DIAMETER_SCALE), float(s2[0] * DIAMETER_SCALE ** 2)


# --------------------------------------------------------------------------
# Helpers shared by experiments and the CLI


def known_grid_prefix(stem: StemProfile) -> np.ndarray:
    """True grid diameters at heights up to the stem's known_prefix_end."""
    gh, gd = resample_grid(stem)
    return gd[gh <= stem.known_prefix_end + 1e-9]


def grid_profile(stem: StemProfile, diameters: np.ndarray, suffix: str = "pred") -> StemProfile | None:
    """Wrap grid diameters into a StemProfile (None if fewer than 2 points)."""
    d = np.asarray(diameters, dtype=float)
    if d.size < 2 or np.any(d <= 0):
        keep = np.nonzero(d <= 0)[0]
        d = d[:keep[0]] if keep.size else d
        if d.size < 2:
            return None
    h = GRID_STEP_CM * np.arange(d.size)
    known = min(stem.known_prefix_end, float(h[-1]))
    return StemProfile(stem.species, f"{stem.stem_id}:{suffix}", h, d, known)
