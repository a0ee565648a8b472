from __future__ import annotations

from typing import NamedTuple

import numpy as np

from truvar import gp
from truvar.environments import Environment
from truvar.util import argmax_first
from truvar.util import ConfigError
from truvar.util import mask_to_indices


class EpsAccuracyReport(NamedTuple):
    mode: str
    eps: float
    holds: bool
    witnesses: tuple[int, ...]
    # largest violation of any condition; <= 0 when the report holds
    margin: float


def eps_accuracy(
        values: np.ndarray,
        mode: str,
        eps: float,
        m: np.ndarray,
        high: np.ndarray | None = None,
        low: np.ndarray | None = None,
        threshold: float | None = None,
) -> EpsAccuracyReport:
    """Check the unresolved / classified sets against the true ``values``.

    BO: ``M`` keeps every maximizer and only holds points within ``eps``
    of the maximum.  LSE: ``H`` lies strictly above the threshold, ``L``
    strictly below, and ``M`` within ``eps / 2`` of it.
    """
    if eps < 0:
        raise ConfigError('eps', 'must be >= 0')
    values = np.asarray(values, dtype=float)
    m = np.asarray(m, dtype=bool)
    witnesses: set[int] = set()
    margins = [-np.inf]

    if mode == 'bo':
        best = values.max()
        maxima = values == best
        missing = mask_to_indices(maxima & ~m)
        witnesses.update(int(i) for i in missing)
        if missing.size:
            margins.append(np.inf)
        gap = best - values[m] - eps
        witnesses.update(int(i) for i in mask_to_indices(m)[gap > 0])
        margins.extend(gap.tolist())
    elif mode == 'lse':
        if threshold is None:
            raise ConfigError('threshold', 'lse needs a threshold')
        high = np.zeros_like(m) if high is None else np.asarray(high, dtype=bool)
        low = np.zeros_like(m) if low is None else np.asarray(low, dtype=bool)
        for mask, excess in (
                (high, threshold - values),
                (low, values - threshold),
        ):
            idx = mask_to_indices(mask)
            # strict inequality: a point exactly at the threshold is wrong
            bad = excess[idx] >= 0
            witnesses.update(int(i) for i in idx[bad])
            margins.extend(excess[idx].tolist())
        idx = mask_to_indices(m)
        gap = np.abs(values[idx] - threshold) - eps / 2
        witnesses.update(int(i) for i in idx[gap > 0])
        margins.extend(gap.tolist())
    else:
        raise ConfigError('mode', f'expected bo or lse, got {mode!r}')

    return EpsAccuracyReport(
        mode=mode,
        eps=float(eps),
        holds=not witnesses,
        witnesses=tuple(sorted(witnesses)),
        margin=float(max(margins)),
    )


def f1_score(mean: np.ndarray, values: np.ndarray, threshold: float) -> float:
    """F1 of the predicted superlevel set ``mean >= h`` against ``f > h``."""
    truth = np.asarray(values) > threshold
    if not truth.any():
        raise ConfigError('threshold', 'true superlevel set is empty')
    predicted = np.asarray(mean) >= threshold
    tp = int(np.sum(predicted & truth))
    if tp == 0:
        return 0.0
    precision = tp / int(predicted.sum())
    recall = tp / int(truth.sum())
    return 2 * precision * recall / (precision + recall)


def posterior_f1(posterior: gp.GpPosterior, env: Environment, threshold: float) -> float:
    return f1_score(posterior.mean, env.values, threshold)


def reported_regret(posterior: gp.GpPosterior, env: Environment) -> float:
    """Regret of the point with the highest posterior mean."""
    reported = argmax_first(posterior.mean)
    return float(env.values.max() - env.values[reported])
