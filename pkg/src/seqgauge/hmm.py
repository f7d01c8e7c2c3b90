"""Discrete hidden Markov models: scoring, decoding, Baum-Welch training, sampling.

A model is the triple (A, B, pi) over ``n_states`` hidden states and
``n_symbols`` observation symbols. All likelihood work uses per-step scaling:
the forward column at time t is divided by its sum ``c_t`` so that
``log P(O | model) = sum_t log c_t`` never underflows, and the backward pass
reuses the same constants.

The inner loops are compiled with numba; everything else is plain numpy.
"""

from __future__ import annotations

import enum
import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Any, Iterable, Sequence

import numba
import numpy as np

ROW_TOL = 1e-9


class Channel(str, enum.Enum):
    STATIC = "static"
    DYNAMIC = "dynamic"


BENIGN = "benign"


class HmmError(ValueError):
    """Invalid model, sequence, or training request."""


@dataclass(frozen=True)
class HmmModel:
    initial: np.ndarray
    transition: np.ndarray
    emission: np.ndarray

    def __post_init__(self):
        pi = np.array(self.initial, dtype=np.float64)
        a = np.array(self.transition, dtype=np.float64)
        b = np.array(self.emission, dtype=np.float64)
        if pi.ndim != 1 or pi.size < 1:
            raise HmmError("initial must be a non-empty vector")
        n = pi.size
        if a.shape != (n, n):
            raise HmmError(f"transition must be {n}x{n}, got {a.shape}")
        if b.ndim != 2 or b.shape[0] != n or b.shape[1] < 1:
            raise HmmError(f"emission must be {n}xM with M >= 1, got {b.shape}")
        for name, arr in (("initial", pi), ("transition", a), ("emission", b)):
            if not np.all(np.isfinite(arr)) or arr.min() < 0.0 or arr.max() > 1.0:
                raise HmmError(f"{name} entries must lie in [0, 1]")
            sums = arr.sum(axis=-1)
            if np.any(np.abs(sums - 1.0) > ROW_TOL):
                raise HmmError(f"{name} rows must sum to 1 (got {sums})")
        for arr in (pi, a, b):
            arr.setflags(write=False)
        object.__setattr__(self, "initial", pi)
        object.__setattr__(self, "transition", a)
        object.__setattr__(self, "emission", b)

    @property
    def n_states(self) -> int:
        return self.initial.size

    @property
    def n_symbols(self) -> int:
        return self.emission.shape[1]

    def __eq__(self, other):
        if not isinstance(other, HmmModel):
            return NotImplemented
        return (
            np.array_equal(self.initial, other.initial)
            and np.array_equal(self.transition, other.transition)
            and np.array_equal(self.emission, other.emission)
        )

    __hash__ = None


@dataclass(frozen=True)
class SymbolSequence:
    """Vocabulary-encoded observation sequence with provenance."""

    symbols: np.ndarray
    channel: Channel = Channel.DYNAMIC
    sample_id: str = ""
    label: str = BENIGN

    def __post_init__(self):
        arr = np.asarray(self.symbols, dtype=np.int64).reshape(-1)
        arr.setflags(write=False)
        object.__setattr__(self, "symbols", arr)
        object.__setattr__(self, "channel", Channel(self.channel))

    def __len__(self) -> int:
        return self.symbols.size


@dataclass
class TrainingOutcome:
    model: HmmModel
    log_likelihood_trace: list[float]
    iterations: int
    converged: bool
    seed: int
    restart_seeds: list[int] = field(default_factory=list)

    @property
    def final_log_likelihood(self) -> float:
        return self.log_likelihood_trace[-1]


@dataclass(frozen=True)
class TrainingConfig:
    max_iters: int = 200
    tol: float = 1e-4
    seed: int = 0
    restarts: int = 1


def _obs(model: HmmModel, seq) -> np.ndarray:
    symbols = seq.symbols if isinstance(seq, SymbolSequence) else np.asarray(seq, dtype=np.int64)
    symbols = np.ascontiguousarray(symbols, dtype=np.int64).reshape(-1)
    if symbols.size == 0:
        raise HmmError("empty observation sequence")
    bad = np.flatnonzero((symbols < 0) | (symbols >= model.n_symbols))
    if bad.size:
        pos = int(bad[0])
        raise HmmError(
            f"symbol {int(symbols[pos])} at position {pos} is outside [0, {model.n_symbols})"
        )
    return symbols


# -- compiled kernels -------------------------------------------------------


@numba.njit(cache=True, nogil=True)
def _forward_kernel(pi, a, b, obs):
    t_len = obs.shape[0]
    n = pi.shape[0]
    alpha = np.zeros((t_len, n))
    scales = np.zeros(t_len)
    c = 0.0
    for i in range(n):
        alpha[0, i] = pi[i] * b[i, obs[0]]
        c += alpha[0, i]
    scales[0] = c
    if c > 0.0:
        for i in range(n):
            alpha[0, i] /= c
    for t in range(1, t_len):
        c = 0.0
        for j in range(n):
            s = 0.0
            for i in range(n):
                s += alpha[t - 1, i] * a[i, j]
            alpha[t, j] = s * b[j, obs[t]]
            c += alpha[t, j]
        scales[t] = c
        if c > 0.0:
            for j in range(n):
                alpha[t, j] /= c
    return alpha, scales


@numba.njit(cache=True, nogil=True)
def _backward_kernel(a, b, obs, scales):
    t_len = obs.shape[0]
    n = a.shape[0]
    beta = np.zeros((t_len, n))
    for i in range(n):
        beta[t_len - 1, i] = 1.0
    for t in range(t_len - 2, -1, -1):
        c = scales[t + 1]
        for i in range(n):
            s = 0.0
            for j in range(n):
                s += a[i, j] * b[j, obs[t + 1]] * beta[t + 1, j]
            beta[t, i] = s / c if c > 0.0 else 0.0
    return beta


@numba.njit(cache=True, nogil=True)
def _accumulate_kernel(pi, a, b, obs, pi_num, a_num, a_den, b_num, b_den):
    """Add one sequence's expected counts; returns its log-likelihood."""
    alpha, scales = _forward_kernel(pi, a, b, obs)
    t_len = obs.shape[0]
    n = pi.shape[0]
    loglik = 0.0
    for t in range(t_len):
        if scales[t] <= 0.0:
            return -np.inf
        loglik += np.log(scales[t])
    beta = _backward_kernel(a, b, obs, scales)
    for t in range(t_len):
        for i in range(n):
            g = alpha[t, i] * beta[t, i]
            if t == 0:
                pi_num[i] += g
            b_num[i, obs[t]] += g
            b_den[i] += g
            if t < t_len - 1:
                a_den[i] += g
    for t in range(t_len - 1):
        c = scales[t + 1]
        o = obs[t + 1]
        for i in range(n):
            for j in range(n):
                a_num[i, j] += alpha[t, i] * a[i, j] * b[j, o] * beta[t + 1, j] / c
    return loglik


# -- problem 1 / 2 ----------------------------------------------------------


def forward_pass(model: HmmModel, seq) -> tuple[np.ndarray, np.ndarray]:
    """Scaled forward variables (T x N, each row sums to 1) and the scale constants."""
    obs = _obs(model, seq)
    return _forward_kernel(model.initial, model.transition, model.emission, obs)


def forward_log_likelihood(model: HmmModel, seq) -> float:
    """Natural log of P(O | model); ``-inf`` when the sequence is impossible."""
    _, scales = forward_pass(model, seq)
    if np.any(scales <= 0.0):
        return -math.inf
    return float(np.log(scales).sum())


def score(model: HmmModel, seq) -> float:
    """Log-likelihood per observation (higher means closer to the training family)."""
    obs = _obs(model, seq)
    return forward_log_likelihood(model, obs) / obs.size


def backward_pass(model: HmmModel, seq) -> np.ndarray:
    """Backward variables scaled by the forward pass constants.

    With ``alpha, c = forward_pass(...)`` and ``beta = backward_pass(...)``,
    ``sum(log c) + log(sum(alpha[t] * beta[t]))`` equals the total
    log-likelihood at every t.
    """
    obs = _obs(model, seq)
    _, scales = _forward_kernel(model.initial, model.transition, model.emission, obs)
    return _backward_kernel(model.transition, model.emission, obs, scales)


def posterior_decode(model: HmmModel, seq) -> list[int]:
    """Per-step most probable state; ties go to the lower state index."""
    obs = _obs(model, seq)
    alpha, scales = _forward_kernel(model.initial, model.transition, model.emission, obs)
    if np.any(scales <= 0.0):
        raise HmmError("sequence has zero probability under the model")
    beta = _backward_kernel(model.transition, model.emission, obs, scales)
    gamma = alpha * beta
    # argmax returns the first maximum
    return [int(i) for i in np.argmax(gamma, axis=1)]


# -- problem 3 --------------------------------------------------------------


def _perturbed_rows(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    # +/-0.05 around uniform, shrunk for wide rows so entries stay positive
    amp = min(0.05, 0.5 / cols)
    m = 1.0 / cols + rng.uniform(-amp, amp, size=(rows, cols))
    return m / m.sum(axis=1, keepdims=True)


def random_init(n_states: int, n_symbols: int, seed: int) -> HmmModel:
    rng = np.random.default_rng(seed)
    pi = _perturbed_rows(rng, 1, n_states)[0]
    a = _perturbed_rows(rng, n_states, n_states)
    b = _perturbed_rows(rng, n_states, n_symbols)
    return HmmModel(pi, a, b)


def _normalize(num: np.ndarray, den: np.ndarray, old: np.ndarray) -> np.ndarray:
    out = old.copy()
    ok = den > 0.0
    out[ok] = num[ok] / den[ok, None]
    return out / out.sum(axis=1, keepdims=True)


def _check_training(sequences, n_states: int, n_symbols: int) -> list[np.ndarray]:
    if n_states < 1 or n_symbols < 1:
        raise HmmError("n_states and n_symbols must be >= 1")
    seqs = list(sequences)
    if not seqs:
        raise HmmError("empty training set")
    shape = HmmModel(np.ones(1), np.ones((1, 1)), np.full((1, n_symbols), 1.0 / n_symbols))
    return [_obs(shape, s) for s in seqs]


def em_step(model: HmmModel, observations: Sequence[np.ndarray]) -> tuple[HmmModel, float]:
    """One Baum-Welch update; returns (new model, log-likelihood of ``model``)."""
    n, m = model.n_states, model.n_symbols
    pi_num = np.zeros(n)
    a_num = np.zeros((n, n))
    a_den = np.zeros(n)
    b_num = np.zeros((n, m))
    b_den = np.zeros(n)
    total = 0.0
    for obs in observations:
        total += _accumulate_kernel(
            model.initial, model.transition, model.emission, obs,
            pi_num, a_num, a_den, b_num, b_den,
        )
    if not np.isfinite(total):
        raise HmmError("training data has zero probability under the current model")
    pi = pi_num / pi_num.sum()
    a = _normalize(a_num, a_den, model.transition)
    b = _normalize(b_num, b_den, model.emission)
    return HmmModel(pi, a, b), total


def baum_welch_train(
    sequences: Iterable,
    n_states: int,
    n_symbols: int,
    max_iters: int = 200,
    tol: float = 1e-4,
    seed: int = 0,
) -> TrainingOutcome:
    """Fit a model to several sequences, accumulating expected counts per sequence.

    Stops once the total log-likelihood improves by less than ``tol`` or after
    ``max_iters`` updates. The returned model is the last one evaluated, so
    ``log_likelihood_trace[-1]`` is its log-likelihood.
    """
    observations = _check_training(sequences, n_states, n_symbols)
    model = random_init(n_states, n_symbols, seed)
    trace: list[float] = []
    converged = False
    iterations = 0
    while True:
        new_model, loglik = em_step(model, observations)
        trace.append(loglik)
        if len(trace) > 1 and trace[-1] - trace[-2] < tol:
            converged = True
            break
        if iterations >= max_iters:
            break
        model = new_model
        iterations += 1
    return TrainingOutcome(model, trace, iterations, converged, seed, [seed])


def train_with_restarts(
    sequences: Iterable,
    n_states: int,
    n_symbols: int,
    restarts: int = 1,
    max_iters: int = 200,
    tol: float = 1e-4,
    seed: int = 0,
) -> TrainingOutcome:
    """Run Baum-Welch from seeds ``seed .. seed+restarts-1`` and keep the best fit."""
    if restarts < 1:
        raise HmmError("restarts must be >= 1")
    seqs = list(sequences)
    best = None
    for r in range(restarts):
        out = baum_welch_train(seqs, n_states, n_symbols, max_iters, tol, seed + r)
        if best is None or out.final_log_likelihood > best.final_log_likelihood:
            best = out
    best.restart_seeds = [seed + r for r in range(restarts)]
    return best


def train(sequences: Iterable, n_states: int, n_symbols: int, config: TrainingConfig) -> TrainingOutcome:
    return train_with_restarts(
        sequences, n_states, n_symbols,
        restarts=config.restarts, max_iters=config.max_iters, tol=config.tol, seed=config.seed,
    )


# -- generation -------------------------------------------------------------


def _draw(cdf: np.ndarray, u: float) -> int:
    return min(int(np.searchsorted(cdf, u, side="right")), cdf.size - 1)


def sample_sequence(model: HmmModel, length: int, seed: int, **meta) -> SymbolSequence:
    """Simulate the chain for ``length`` steps; deterministic for a given seed."""
    if length < 1:
        raise HmmError("length must be >= 1")
    rng = np.random.default_rng(seed)
    u = rng.random((length, 2))
    pi_cdf = np.cumsum(model.initial)
    a_cdf = np.cumsum(model.transition, axis=1)
    b_cdf = np.cumsum(model.emission, axis=1)
    out = np.empty(length, dtype=np.int64)
    state = _draw(pi_cdf, u[0, 0])
    for t in range(length):
        if t:
            state = _draw(a_cdf[state], u[t, 0])
        out[t] = _draw(b_cdf[state], u[t, 1])
    return SymbolSequence(out, **meta)


def random_model(n_states: int, n_symbols: int, seed: int, concentration: float = 1.0) -> HmmModel:
    """Dirichlet-distributed model; small ``concentration`` gives peaky rows."""
    rng = np.random.default_rng(seed)

    def rows(k, width):
        m = rng.dirichlet(np.full(width, concentration), size=k)
        return m / m.sum(axis=1, keepdims=True)

    return HmmModel(rows(1, n_states)[0], rows(n_states, n_states), rows(n_states, n_symbols))


def mix_models(base: HmmModel, other: HmmModel, weight: float) -> HmmModel:
    """Entrywise ``(1 - weight) * base + weight * other``; rows stay stochastic."""
    if base.initial.shape != other.initial.shape or base.emission.shape != other.emission.shape:
        raise HmmError("models must share dimensions to be mixed")
    if not 0.0 <= weight <= 1.0:
        raise HmmError("mixing weight must lie in [0, 1]")
    w = weight
    return HmmModel(
        (1 - w) * base.initial + w * other.initial,
        (1 - w) * base.transition + w * other.transition,
        (1 - w) * base.emission + w * other.emission,
    )


# -- serialization ----------------------------------------------------------


def model_to_dict(model: HmmModel, **meta: Any) -> dict:
    doc = {
        "n_states": model.n_states,
        "n_symbols": model.n_symbols,
        "initial": model.initial.tolist(),
        "transition": model.transition.tolist(),
        "emission": model.emission.tolist(),
        "vocabulary_digest": meta.pop("vocabulary_digest", None),
        "channel": meta.pop("channel", None),
        "family": meta.pop("family", None),
        "seed": meta.pop("seed", None),
    }
    if meta:
        raise TypeError(f"unexpected model metadata: {sorted(meta)}")
    if isinstance(doc["channel"], Channel):
        doc["channel"] = doc["channel"].value
    return doc


def model_to_json(model: HmmModel, **meta: Any) -> str:
    return json.dumps(model_to_dict(model, **meta), sort_keys=True)


def model_from_dict(doc: dict) -> tuple[HmmModel, dict]:
    model = HmmModel(doc["initial"], doc["transition"], doc["emission"])
    if model.n_states != doc["n_states"] or model.n_symbols != doc["n_symbols"]:
        raise HmmError("declared dimensions do not match the matrices")
    meta = {k: doc.get(k) for k in ("vocabulary_digest", "channel", "family", "seed")}
    return model, meta


def model_from_json(text: str) -> tuple[HmmModel, dict]:
    return model_from_dict(json.loads(text))


def model_digest(model: HmmModel) -> str:
    h = hashlib.sha256()
    for arr in (model.initial, model.transition, model.emission):
        h.update(arr.tobytes())
    return h.hexdigest()[:16]
