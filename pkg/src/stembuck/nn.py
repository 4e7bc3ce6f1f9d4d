"""Small numpy LSTM with a two-layer head, its exact backward pass, the
Gaussian and squared losses, and an Adam training loop.

Sequences are batched as ``(batch, time)`` arrays of scalar inputs.  Padded
steps are excluded from the loss through a boolean mask; because the network
is causal, trailing padding never influences the valid outputs.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

log = logging.getLogger(__name__)

PARAM_NAMES = ("Wx", "Wh", "b", "W1", "b1", "W2", "b2")
SIGMA2_FLOOR = 1e-6
DIAMETER_SCALE = 100.0
_RAW_CLIP = 60.0


class TrainingError(RuntimeError):
    pass


class GaussianParams(NamedTuple):
    mu: float
    sigma2: float


@dataclass
class LstmParams:
    """Weights of the recurrent cell and the dense head.

    Gate blocks in ``Wx``, ``Wh`` and ``b`` are ordered input, forget,
    cell candidate, output.
    """

    arrays: dict[str, np.ndarray]
    input_size: int = 1
    hidden_size: int = 10
    head_size: int = 10
    output_size: int = 2

    def __post_init__(self):
        H, I, F, K = self.hidden_size, self.input_size, self.head_size, self.output_size
        expected = {
            "Wx": (4 * H, I), "Wh": (4 * H, H), "b": (4 * H,),
            "W1": (H, F), "b1": (F,), "W2": (F, K), "b2": (K,),
        }
        if set(self.arrays) != set(expected):
            raise ValueError(f"parameter names {sorted(self.arrays)} != {sorted(expected)}")
        for name, shape in expected.items():
            if self.arrays[name].shape != shape:
                raise ValueError(f"{name}: shape {self.arrays[name].shape}, expected {shape}")

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    def copy(self) -> "LstmParams":
        return LstmParams({k: v.copy() for k, v in self.arrays.items()},
                          self.input_size, self.hidden_size, self.head_size, self.output_size)

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.arrays.values())

    @classmethod
    def init(cls, rng: np.random.Generator, output_size: int = 2, hidden_size: int = 10,
             head_size: int = 10, input_size: int = 1) -> "LstmParams":
        """Uniform(-1/sqrt(H), 1/sqrt(H)) for every weight and bias."""
        H, F, K = hidden_size, head_size, output_size
        k_rec = 1.0 / math.sqrt(H)
        k_head2 = 1.0 / math.sqrt(F)
        shapes = [
            ("Wx", (4 * H, input_size), k_rec), ("Wh", (4 * H, H), k_rec), ("b", (4 * H,), k_rec),
            ("W1", (H, F), k_rec), ("b1", (F,), k_rec),
            ("W2", (F, K), k_head2), ("b2", (K,), k_head2),
        ]
        arrays = {name: rng.uniform(-k, k, size=shape) for name, shape, k in shapes}
        return cls(arrays, input_size, H, F, K)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


@dataclass
class LstmCache:
    x: np.ndarray        # (B, T, I)
    gates: np.ndarray    # (B, T, 4H) post-activation i, f, g, o
    c: np.ndarray        # (B, T+1, H), c[:, 0] = 0
    h: np.ndarray        # (B, T+1, H), h[:, 0] = 0
    a1: np.ndarray       # (B, T, F) head pre-activation
    squeeze: bool


def _as_batch(inputs) -> tuple[np.ndarray, bool]:
    x = np.asarray(inputs, dtype=float)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None, :]
    if x.ndim == 2:
        x = x[:, :, None]
    if x.ndim != 3 or x.shape[1] == 0:
        raise ValueError("inputs must be a non-empty sequence")
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite input")
    return x, squeeze


def lstm_step(params: LstmParams, x_t: np.ndarray, h: np.ndarray, c: np.ndarray):
    """One recurrence step for a batch.  Returns (head output, h, c, gates, a1)."""
    H = params.hidden_size
    z = x_t @ params["Wx"].T + h @ params["Wh"].T + params["b"]
    i = _sigmoid(z[:, :H])
    f = _sigmoid(z[:, H:2 * H])
    g = np.tanh(z[:, 2 * H:3 * H])
    o = _sigmoid(z[:, 3 * H:])
    c = f * c + i * g
    h = o * np.tanh(c)
    a1 = h @ params["W1"] + params["b1"]
    y = np.maximum(a1, 0.0) @ params["W2"] + params["b2"]
    return y, h, c, np.concatenate([i, f, g, o], axis=1), a1


def lstm_forward(params: LstmParams, inputs) -> tuple[np.ndarray, LstmCache]:
    """Run the network over ``inputs`` of shape (T,) or (B, T).

    Returns head outputs of shape (T, K) or (B, T, K) and the cache needed
    by :func:`lstm_backward`.  Hidden and cell states start at zero.
    """
    x, squeeze = _as_batch(inputs)
    B, T, _ = x.shape
    H, F = params.hidden_size, params.head_size
    hs = np.zeros((B, T + 1, H))
    cs = np.zeros((B, T + 1, H))
    gates = np.empty((B, T, 4 * H))
    a1s = np.empty((B, T, F))
    ys = np.empty((B, T, params.output_size))
    for t in range(T):
        ys[:, t], hs[:, t + 1], cs[:, t + 1], gates[:, t], a1s[:, t] = lstm_step(
            params, x[:, t], hs[:, t], cs[:, t])
    cache = LstmCache(x, gates, cs, hs, a1s, squeeze)
    return (ys[0] if squeeze else ys), cache


def lstm_backward(params: LstmParams, cache: LstmCache, dy) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss w.r.t. every parameter, given the loss
    gradient ``dy`` at the head outputs (same shape as the forward output)."""
    dy = np.asarray(dy, dtype=float)
    if cache.squeeze:
        dy = dy[None]
    B, T, _ = cache.x.shape
    H = params.hidden_size
    if dy.shape != (B, T, params.output_size):
        raise ValueError(f"gradient shape {dy.shape} does not match cache {(B, T, params.output_size)}")

    h_out = cache.h[:, 1:]
    relu = np.maximum(cache.a1, 0.0)
    grads = {
        "W2": np.einsum("btf,btk->fk", relu, dy),
        "b2": dy.sum(axis=(0, 1)),
    }
    da1 = (dy @ params["W2"].T) * (cache.a1 > 0)
    grads["W1"] = np.einsum("bth,btf->hf", h_out, da1)
    grads["b1"] = da1.sum(axis=(0, 1))
    dh_head = da1 @ params["W1"].T

    Wh = params["Wh"]
    dz_all = np.empty((B, T, 4 * H))
    dh_next = np.zeros((B, H))
    dc_next = np.zeros((B, H))
    for t in range(T - 1, -1, -1):
        g_all = cache.gates[:, t]
        i, f, g, o = (g_all[:, k * H:(k + 1) * H] for k in range(4))
        c = cache.c[:, t + 1]
        tc = np.tanh(c)
        dh = dh_head[:, t] + dh_next
        dc = dh * o * (1.0 - tc * tc) + dc_next
        dz = dz_all[:, t]
        dz[:, :H] = dc * g * i * (1.0 - i)
        dz[:, H:2 * H] = dc * cache.c[:, t] * f * (1.0 - f)
        dz[:, 2 * H:3 * H] = dc * i * (1.0 - g * g)
        dz[:, 3 * H:] = dh * tc * o * (1.0 - o)
        dc_next = dc * f
        dh_next = dz @ Wh
    grads["Wx"] = np.einsum("btz,bti->zi", dz_all, cache.x)
    grads["Wh"] = np.einsum("btz,bth->zh", dz_all, cache.h[:, :-1])
    grads["b"] = dz_all.sum(axis=(0, 1))
    return grads


# --------------------------------------------------------------------------
# Output transform and losses


def sigma2_from_raw(raw):
    return np.exp(np.minimum(raw, _RAW_CLIP)) + SIGMA2_FLOOR


def split_gaussian(y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Head output (..., 2) -> (mu, sigma2)."""
    return y[..., 0], sigma2_from_raw(y[..., 1])


def _check_pair(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape} vs {b.shape}")
    if a.size == 0:
        raise ValueError("empty input")
    return a, b


def gaussian_lambda_loss(mu, sigma2, targets, lam: float) -> float:
    """mean_k [ lam*ln(s_k) + (1-lam)*(mu_k - x_k)**2 / s_k ]"""
    mu, x = _check_pair(mu, targets)
    s = np.asarray(sigma2, dtype=float)
    if s.shape != mu.shape:
        raise ValueError("length mismatch between mu and sigma2")
    if np.any(s <= 0):
        raise ValueError("sigma2 must be positive")
    if not (0.0 < lam < 1.0):
        raise ValueError("lambda must lie in (0, 1)")
    return float(np.mean(lam * np.log(s) + (1.0 - lam) * (mu - x) ** 2 / s))


def exact_gaussian_nll(mu, sigma2, targets) -> float:
    """Mean per-observation negative log density of N(mu, sigma2)."""
    mu, x = _check_pair(mu, targets)
    s = np.asarray(sigma2, dtype=float)
    if s.shape != mu.shape:
        raise ValueError("length mismatch between mu and sigma2")
    if np.any(s <= 0):
        raise ValueError("sigma2 must be positive")
    return float(np.mean(0.5 * math.log(2 * math.pi) + 0.5 * np.log(s) + (mu - x) ** 2 / (2 * s)))


def squared_loss(preds, targets) -> float:
    p, x = _check_pair(preds, targets)
    return float(np.mean((p - x) ** 2))


def _masked_loss_and_grad(y, targets, mask, kind: str, lam: float):
    """Loss averaged over masked-in steps and its gradient w.r.t. head outputs."""
    n = int(mask.sum())
    dy = np.zeros_like(y)
    if kind == "stochastic":
        mu, s = split_gaussian(y)
        err = np.where(mask, mu - targets, 0.0)
        s_safe = np.where(mask, s, 1.0)
        terms = lam * np.log(s_safe) + (1.0 - lam) * err ** 2 / s_safe
        loss = float(terms[mask].sum() / n)
        dmu = (1.0 - lam) * 2.0 * err / s_safe
        ds = lam / s_safe - (1.0 - lam) * err ** 2 / s_safe ** 2
        raw = y[..., 1]
        dsraw = np.where(raw < _RAW_CLIP, np.exp(np.minimum(raw, _RAW_CLIP)), 0.0)
        dy[..., 0] = np.where(mask, dmu, 0.0) / n
        dy[..., 1] = np.where(mask, ds * dsraw, 0.0) / n
    else:
        err = np.where(mask, y[..., 0] - targets, 0.0)
        loss = float((err ** 2)[mask].sum() / n)
        dy[..., 0] = 2.0 * err / n
    return loss, dy


# --------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state: AdamState, params: LstmParams | dict, grads: dict) -> tuple:
    """Bias-corrected Adam update, applied in place.  Returns (params, state)."""
    arrays = params.arrays if isinstance(params, LstmParams) else params
    if set(grads) != set(arrays):
        raise ValueError("gradient names do not match parameters")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, p in arrays.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        if m.shape != p.shape:
            raise ValueError(f"{name}: optimizer state shape mismatch")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


def clip_global_norm(grads: dict, max_norm: float) -> float:
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm


# --------------------------------------------------------------------------
# Training


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 64
    lr: float = 1e-3
    lam: float = 0.3
    clip_norm: float = 5.0
    hidden_size: int = 10
    head_size: int = 10
    seed: int = 0


def sequences_to_batch(sequences: Sequence[np.ndarray], scale: float = DIAMETER_SCALE):
    """Pad diameter sequences into (inputs, targets, mask) arrays.

    Step t reads the diameter at grid point t and targets grid point t+1.
    """
    seqs = [np.asarray(s, dtype=float) for s in sequences]
    if any(s.size < 2 for s in seqs):
        raise ValueError("every sequence needs at least 2 points")
    T = max(s.size for s in seqs) - 1
    X = np.zeros((len(seqs), T))
    Y = np.zeros((len(seqs), T))
    M = np.zeros((len(seqs), T), dtype=bool)
    for k, s in enumerate(seqs):
        n = s.size - 1
        X[k, :n] = s[:-1] / scale
        Y[k, :n] = s[1:] / scale
        M[k, :n] = True
    return X, Y, M


def train(kind: str, sequences: Sequence[np.ndarray], config: TrainConfig = TrainConfig(),
          init: LstmParams | None = None) -> tuple[LstmParams, list[float]]:
    """Fit a stochastic (Gaussian head) or deterministic (point head) LSTM.

    ``sequences`` are diameter sequences in cm on the 2-m grid.  Returns the
    trained parameters and the mean training loss of every epoch.
    """
    if kind not in ("stochastic", "deterministic"):
        raise ValueError(f"unknown model kind {kind!r}")
    if len(sequences) == 0:
        raise ValueError("empty training set")
    if kind == "stochastic" and not (0.0 < config.lam < 1.0):
        raise ValueError("lambda must lie in (0, 1)")
    X, Y, M = sequences_to_batch(sequences)
    rng_init = np.random.default_rng([config.seed, 1])
    rng_shuffle = np.random.default_rng([config.seed, 2])
    K = 2 if kind == "stochastic" else 1
    params = init.copy() if init is not None else LstmParams.init(
        rng_init, output_size=K, hidden_size=config.hidden_size, head_size=config.head_size)
    if params.output_size != K:
        raise ValueError("initial parameters do not match model kind")
    state = AdamState(lr=config.lr)
    history = []
    N = X.shape[0]
    for epoch in range(config.epochs):
        order = rng_shuffle.permutation(N)
        total, count = 0.0, 0
        for start in range(0, N, config.batch_size):
            idx = order[start:start + config.batch_size]
            m = M[idx]
            T = int(np.max(np.nonzero(m.any(axis=0))[0])) + 1
            xb, yb, mb = X[idx, :T], Y[idx, :T], m[:, :T]
            out, cache = lstm_forward(params, xb)
            with np.errstate(over="ignore", invalid="ignore"):
                loss, dy = _masked_loss_and_grad(out, yb, mb, kind, config.lam)
            if not math.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch + 1}, batch starting {start}")
            grads = lstm_backward(params, cache, dy)
            clip_global_norm(grads, config.clip_norm)
            adam_step(state, params, grads)
            n = int(mb.sum())
            total += loss * n
            count += n
        if not params.is_finite():
            raise TrainingError(f"non-finite parameters after epoch {epoch + 1}")
        history.append(total / count)
        if (epoch + 1) % 50 == 0:
            log.debug("%s epoch %d loss %.6f", kind, epoch + 1, history[-1])
    return params, history
