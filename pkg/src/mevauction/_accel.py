"""Hot numeric kernels.

Each kernel exists twice: a plain numpy implementation (``*_numpy``) and a
numba ``@njit`` compilation of a loop implementation (``*_loop``).  The public
name points at the numba version unless numba is missing or the environment
variable ``MEVAUCTION_DISABLE_NUMBA`` is set to a truthy value before import.
"""
from __future__ import annotations

import os

import numpy as np

_DISABLE = os.environ.get("MEVAUCTION_DISABLE_NUMBA", "").strip().lower() in {"1", "true", "yes", "on"}

try:
    from numba import njit as _njit

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAS_NUMBA = False

USE_NUMBA = HAS_NUMBA and not _DISABLE


# ---------------------------------------------------------------------------
# Generalized advantage estimation
# ---------------------------------------------------------------------------

def gae_loop(rewards, values, dones, last_value, gamma, lam):
    n = rewards.shape[0]
    adv = np.zeros(n, dtype=np.float64)
    running = 0.0
    for t in range(n - 1, -1, -1):
        if t == n - 1:
            next_value = last_value
        else:
            next_value = values[t + 1]
        nonterminal = 1.0 - dones[t]
        delta = rewards[t] + gamma * next_value * nonterminal - values[t]
        running = delta + gamma * lam * nonterminal * running
        adv[t] = running
    return adv


def gae_numpy(rewards, values, dones, last_value, gamma, lam):
    n = rewards.shape[0]
    nonterminal = 1.0 - dones
    next_values = np.empty(n, dtype=np.float64)
    next_values[:-1] = values[1:]
    if n:
        next_values[-1] = last_value
    deltas = rewards + gamma * next_values * nonterminal - values
    decay = gamma * lam * nonterminal
    adv = np.empty(n, dtype=np.float64)
    running = 0.0
    # the recursion is inherently sequential; only the deltas vectorize
    for t in range(n - 1, -1, -1):
        running = deltas[t] + decay[t] * running
        adv[t] = running
    return adv


# ---------------------------------------------------------------------------
# Per-auction tallies: win indicator, realized profit, counterfactual maximum
# ---------------------------------------------------------------------------

def tally_loop(fractions, thresholds, values, eps):
    n = fractions.shape[0]
    wins = np.zeros(n, dtype=np.int64)
    profits = np.zeros(n, dtype=np.float64)
    best = np.zeros(n, dtype=np.float64)
    for i in range(n):
        if fractions[i] > thresholds[i]:
            wins[i] = 1
            profits[i] = (1.0 - fractions[i]) * values[i]
        cf = (1.0 - (thresholds[i] + eps)) * values[i]
        if cf > 0.0:
            best[i] = cf
    return wins, profits, best


def tally_numpy(fractions, thresholds, values, eps):
    won = fractions > thresholds
    wins = won.astype(np.int64)
    profits = np.where(won, (1.0 - fractions) * values, 0.0)
    best = np.maximum((1.0 - (thresholds + eps)) * values, 0.0)
    return wins, profits, best


# ---------------------------------------------------------------------------
# Ragged per-auction threshold: max on-time fraction, optionally masking bids
# ---------------------------------------------------------------------------

def segment_max_loop(indptr, fractions, latencies, keep, window_ms):
    n = indptr.shape[0] - 1
    out = np.zeros(n, dtype=np.float64)
    for i in range(n):
        m = 0.0
        for j in range(indptr[i], indptr[i + 1]):
            if keep[j] and latencies[j] <= window_ms and fractions[j] > m:
                m = fractions[j]
        out[i] = m
    return out


def segment_max_numpy(indptr, fractions, latencies, keep, window_ms):
    n = indptr.shape[0] - 1
    out = np.zeros(n, dtype=np.float64)
    if fractions.shape[0] == 0:
        return out
    masked = np.where(keep & (latencies <= window_ms), fractions, 0.0)
    starts = indptr[:-1]
    nonempty = indptr[1:] > starts
    if nonempty.any():
        # reduceat on empty segments returns the element at the start, so skip them
        out[nonempty] = np.maximum.reduceat(masked, starts[nonempty])
    return np.maximum(out, 0.0)


if HAS_NUMBA:
    gae_numba = _njit(cache=False)(gae_loop)
    tally_numba = _njit(cache=False)(tally_loop)
    segment_max_numba = _njit(cache=False)(segment_max_loop)
else:  # pragma: no cover
    gae_numba = gae_loop
    tally_numba = tally_loop
    segment_max_numba = segment_max_loop


def _as_f64(x):
    return np.ascontiguousarray(x, dtype=np.float64)


def gae(rewards, values, dones, last_value, gamma, lam):
    """Return GAE advantages for one contiguous batch of steps."""
    args = (_as_f64(rewards), _as_f64(values), _as_f64(dones), float(last_value), float(gamma), float(lam))
    return gae_numba(*args) if USE_NUMBA else gae_numpy(*args)


def tally(fractions, thresholds, values, eps):
    """Return ``(wins, profits, counterfactual_max)`` arrays for a stream of auctions."""
    args = (_as_f64(fractions), _as_f64(thresholds), _as_f64(values), float(eps))
    return tally_numba(*args) if USE_NUMBA else tally_numpy(*args)


def segment_max(indptr, fractions, latencies, keep, window_ms):
    """Max on-time kept fraction per CSR segment (0 for empty segments)."""
    args = (
        np.ascontiguousarray(indptr, dtype=np.int64),
        _as_f64(fractions),
        _as_f64(latencies),
        np.ascontiguousarray(keep, dtype=np.bool_),
        float(window_ms),
    )
    return segment_max_numba(*args) if USE_NUMBA else segment_max_numpy(*args)
