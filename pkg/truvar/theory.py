"""Evaluable quantities from the sample-complexity analysis.

Confidence schedules, greedy information-gain estimates, greedy covering
costs and the horizon bounds they feed into.  Everything here is a pure
function of its inputs; randomized checkers take an explicit seed.
"""
from __future__ import annotations

import itertools
import logging
import math
from typing import Callable
from typing import NamedTuple
from typing import Sequence

import numpy as np

from truvar import gp
from truvar.kernels import Kernel
from truvar.util import argmax_first
from truvar.util import ConfigError
from truvar.util import InfeasibleError
from truvar.util import make_stream
from truvar.util import NumericalError
from truvar.util import PROBE_STREAM

logger = logging.getLogger(__name__)

DEFAULT_CAP = 10 ** 9
MIN_PROGRESS = 1e-14
SUBMODULAR_TOL = 1e-9


def beta_union_bound(delta: float, domain_size: int, t: int) -> float:
    """``2 log(|D| t^2 pi^2 / 6 delta)``, valid at every step ``t >= 1``."""
    return 2.0 * math.log(domain_size * float(t) ** 2 * math.pi ** 2 / (6.0 * delta))


def beta_epochs(
        delta: float,
        domain_size: int,
        epoch_costs: Sequence[float],
        c_min: float,
) -> float:
    """Epoch confidence scale from the cumulative epoch cost bounds so far."""
    total = float(sum(epoch_costs))
    return 2.0 * math.log(
        domain_size * total ** 2 * math.pi ** 2 / (6.0 * delta * c_min ** 2),
    )


def beta_multi_noise(
        delta: float,
        domain_size: int,
        t: int,
        c_max: float,
        c_min: float,
) -> float:
    return 2.0 * math.log(
        domain_size * float(t) ** 2 * c_max ** 2 * math.pi ** 2 /
        (6.0 * delta * c_min ** 2),
    )


def noise_constant(noise_var: float) -> float:
    """``C1 = 1 / log(1 + sigma^-2)``."""
    return 1.0 / math.log1p(1.0 / noise_var)


def _canonical(domain: np.ndarray) -> np.ndarray:
    domain = np.atleast_2d(np.asarray(domain, dtype=float))
    return domain[np.lexsort(domain.T[::-1])]


def gamma_greedy_curve(
        kernel: Kernel,
        domain: np.ndarray,
        noise_var: float,
        horizon: int,
) -> np.ndarray:
    """Greedy information gains ``gamma_1 .. gamma_horizon``.

    Each step observes the point of largest posterior variance, which is
    the greedy step for ``1/2 log det(I + sigma^-2 K)``; repeats are
    allowed.  Being greedy this is a lower estimate of the true maximum.
    """
    if horizon < 1:
        raise ConfigError('gamma.horizon', 'must be >= 1')
    if not noise_var > 0:
        raise ConfigError('noise_var', 'must be > 0')
    points = _canonical(domain)
    posterior = gp.fit(kernel, points)
    gains = np.empty(horizon)
    for step in range(horizon):
        index = argmax_first(posterior.variance)
        gains[step] = 0.5 * math.log1p(posterior.variance[index] / noise_var)
        posterior = posterior.extend(index, 0.0, noise_var)
    return np.cumsum(gains)


def gamma_greedy(
        kernel: Kernel,
        domain: np.ndarray,
        noise_var: float,
        t: int,
) -> float:
    return float(gamma_greedy_curve(kernel, domain, noise_var, t)[-1])


class Covering(NamedTuple):
    picks: list[tuple[int, int]]
    cost: float
    max_variance: float

    @property
    def size(self) -> int:
        return len(self.picks)


def _level_table(values: np.ndarray | float, n: int) -> np.ndarray:
    arr = np.asarray(values, dtype=float)
    if arr.ndim == 0:
        return np.full((n, 1), float(arr))
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.shape[0] != n:
        raise ConfigError('noise_vars', f'expected {n} rows, got {arr.shape[0]}')
    return arr


def covering_cost(
        kernel: Kernel,
        domain: np.ndarray,
        noise_vars: np.ndarray | float,
        costs: np.ndarray | float,
        xi: float,
        targets: Sequence[int] | np.ndarray | None = None,
        max_picks: int = 100_000,
) -> Covering:
    """Greedy multiset ``S`` with ``max_{targets} sigma_{0|S} <= xi``.

    ``noise_vars`` and ``costs`` are per ``(point, level)``.  With a single
    level and uniform costs this is the max-variance greedy over
    ``targets``; otherwise each step takes the query with the largest
    reduction of ``sum max{sigma^2, xi^2}`` per unit cost.
    """
    if not xi > 0:
        raise ConfigError('xi', 'must be > 0')
    domain = np.atleast_2d(np.asarray(domain, dtype=float))
    n = len(domain)
    noise = _level_table(noise_vars, n)
    cost = np.broadcast_to(_level_table(costs, n), noise.shape)
    if np.any(cost <= 0):
        raise ConfigError('cost', 'costs must be positive')
    if targets is None:
        targets = np.arange(n)
    targets = np.asarray(targets, dtype=int)
    unit = noise.shape[1] == 1 and np.all(cost == cost.flat[0])

    target_var = xi ** 2
    posterior = gp.fit(kernel, domain)
    picks: list[tuple[int, int]] = []
    total = 0.0
    while True:
        var = posterior.variance[targets]
        excess = np.maximum(var - target_var, 0.0).sum()
        if var.size == 0 or var.max() <= target_var:
            break
        if len(picks) >= max_picks:
            raise InfeasibleError(
                f'covering needs more than {max_picks} samples for xi={xi:g}',
            )
        if unit:
            index, level = int(targets[argmax_first(var)]), 0
        else:
            per_cost = np.empty(noise.shape)
            for k in range(noise.shape[1]):
                per_cost[:, k] = posterior.truncated_reductions(
                    np.arange(n), targets, noise[:, k], floor=target_var,
                ) / cost[:, k]
            index, level = divmod(argmax_first(per_cost), noise.shape[1])
        posterior = posterior.extend(index, 0.0, noise[index, level])
        progress = excess - np.maximum(
            posterior.variance[targets] - target_var, 0.0,
        ).sum()
        if progress < MIN_PROGRESS:
            raise InfeasibleError(
                f'covering stalled at max variance {var.max():.6g} > {target_var:.6g}',
            )
        picks.append((int(index), int(level)))
        total += float(cost[index, level])

    prior = gp.fit(kernel, domain)
    check = prior.batch_lookahead_variances(
        [(i, noise[i, k]) for i, k in picks], targets,
    ) if picks else prior.variance[targets]
    max_var = float(check.max()) if check.size else 0.0
    if max_var > target_var + 1e-9:
        raise NumericalError(
            f'covering check failed: {max_var:.12g} > {target_var:.12g}',
        )
    return Covering(picks, total, max_var)


def covering_size_bound(
        gamma_curve: Sequence[float] | np.ndarray,
        noise_var: float,
        xi: float,
) -> int:
    """Smallest ``T`` with ``T >= 2 C1 gamma_T / xi^2``."""
    c1 = noise_constant(noise_var)
    for t, gamma in enumerate(gamma_curve, start=1):
        if t >= 2.0 * c1 * gamma / xi ** 2:
            return t
    raise InfeasibleError(
        f'no covering size bound within a horizon of {len(gamma_curve)}',
    )


class LevelBound(NamedTuple):
    noise_var: float
    cost: float
    t_star: int

    @property
    def total_cost(self) -> float:
        return self.cost * self.t_star


class BoundInputs(NamedTuple):
    domain_size: int
    noise_var: float
    epsilon: float
    delta: float
    delta_bar: float
    # a constant, or greedy gains gamma_1..gamma_H (held at gamma_H beyond H)
    gamma: float | tuple[float, ...]
    eta1: float = 1.0
    r: float = 0.1
    noise_levels: tuple[tuple[float, float], ...] = ()
    cap: int = DEFAULT_CAP


class BoundReport(NamedTuple):
    c1: float
    t_simplified: int
    t_improved: int
    levels: tuple[LevelBound, ...]
    best_level: int | None
    c_multi_noise: float | None


def validate_bound_inputs(inputs: BoundInputs) -> BoundInputs:
    if inputs.domain_size < 1:
        raise ConfigError('domain_size', 'must be >= 1')
    if not inputs.noise_var > 0:
        raise ConfigError('noise_var', 'must be > 0')
    if not inputs.epsilon > 0:
        raise ConfigError('epsilon', 'must be > 0')
    if not 0 < inputs.delta < 1:
        raise ConfigError('delta', 'must lie in (0, 1)')
    if not inputs.delta_bar > 0:
        raise ConfigError('delta_bar', 'bounds need delta_bar > 0')
    if not 0 < inputs.r < 1:
        raise ConfigError('r', 'must lie in (0, 1)')
    if not inputs.eta1 > 0:
        raise ConfigError('eta1', 'must be > 0')
    if inputs.cap < 1:
        raise ConfigError('cap', 'must be >= 1')
    gammas = np.atleast_1d(np.asarray(inputs.gamma, dtype=float))
    if gammas.size == 0 or np.any(gammas < 0) or not np.all(np.isfinite(gammas)):
        raise ConfigError('gamma', 'must be finite and >= 0')
    for i, (var, cost) in enumerate(inputs.noise_levels):
        if not var > 0 or not cost > 0:
            raise ConfigError(f'noise_levels[{i}]', 'variance and cost must be > 0')
    return inputs


def _gamma_at(gamma: float | tuple[float, ...], t: int) -> float:
    if isinstance(gamma, tuple):
        return float(gamma[min(t, len(gamma)) - 1])
    return float(gamma)


def _log_factor(inputs: BoundInputs, beta: float) -> float:
    d = 1.0 + inputs.delta_bar
    return math.log(
        16.0 * d ** 2 * inputs.domain_size * beta /
        (inputs.delta_bar ** 2 * inputs.epsilon ** 2),
    )


def simplified_rhs(inputs: BoundInputs, t: int) -> float:
    d = 1.0 + inputs.delta_bar
    beta = beta_union_bound(inputs.delta, inputs.domain_size, t)
    gb = noise_constant(inputs.noise_var) * _gamma_at(inputs.gamma, t) * beta
    rounds = max(math.ceil(math.log2(8.0 * d / inputs.epsilon)), 0)
    return (gb * 96.0 * d ** 2 / inputs.epsilon ** 2 + 2 * rounds) * _log_factor(inputs, beta)


def improved_rhs(
        inputs: BoundInputs,
        t: int,
        noise_var: float | None = None,
        beta_fn: Callable[[int], float] | None = None,
) -> float:
    d = 1.0 + inputs.delta_bar
    var = inputs.noise_var if noise_var is None else noise_var
    if beta_fn is None:
        beta = beta_union_bound(inputs.delta, inputs.domain_size, t)
    else:
        beta = beta_fn(t)
    gb = _gamma_at(inputs.gamma, t) * beta
    eps = inputs.epsilon
    rounds = max(math.ceil(math.log2(32.0 * d ** 2 / (eps * math.sqrt(var)))), 0)
    main = (
        2.0 * var * gb * 96.0 * d ** 2 / eps ** 2 +
        noise_constant(var) * gb * 6.0 * d ** 2 / var +
        2 * rounds
    )
    return main * _log_factor(inputs, beta)


def smallest_fixed_point(rhs: Callable[[int], float], cap: int) -> int:
    """Smallest ``T`` found with ``T >= rhs(T)`` by doubling then bisecting."""
    hi = 1
    while hi < rhs(hi):
        if hi >= cap:
            raise InfeasibleError(f'no horizon satisfies the bound below {cap}')
        hi = min(hi * 2, cap)
    lo = hi // 2
    # invariant: lo fails (or is 0), hi holds
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if mid >= rhs(mid):
            hi = mid
        else:
            lo = mid
    return hi


def corollary_bounds(inputs: BoundInputs) -> BoundReport:
    inputs = validate_bound_inputs(inputs)
    t_simplified = smallest_fixed_point(
        lambda t: simplified_rhs(inputs, t), inputs.cap,
    )
    t_improved = smallest_fixed_point(
        lambda t: improved_rhs(inputs, t), inputs.cap,
    )

    levels: list[LevelBound] = []
    if inputs.noise_levels:
        level_costs = [cost for _, cost in inputs.noise_levels]
        c_max, c_min = max(level_costs), min(level_costs)

        def beta_fn(t: int) -> float:
            return beta_multi_noise(inputs.delta, inputs.domain_size, t, c_max, c_min)

        for var, cost in inputs.noise_levels:
            t_star = smallest_fixed_point(
                lambda t: improved_rhs(inputs, t, var, beta_fn), inputs.cap,
            )
            levels.append(LevelBound(var, cost, t_star))

    best_level = None
    c_multi = None
    if levels:
        totals = [lb.total_cost for lb in levels]
        best_level = int(np.argmin(totals))
        c_multi = float(totals[best_level])
    logger.info(
        'bounds: simplified=%d improved=%d multi-noise=%s',
        t_simplified, t_improved, c_multi,
    )
    return BoundReport(
        c1=noise_constant(inputs.noise_var),
        t_simplified=t_simplified,
        t_improved=t_improved,
        levels=tuple(levels),
        best_level=best_level,
        c_multi_noise=c_multi,
    )


def epoch_cost_bound(
        c_star: float,
        m_size: int,
        beta: float,
        eta: float,
        delta_bar: float,
        c_max: float,
) -> float:
    """Cost allowance of one epoch given its covering cost ``c_star``."""
    if not delta_bar > 0:
        raise ConfigError('delta_bar', 'bounds need delta_bar > 0')
    log_term = math.log(m_size * beta / (delta_bar ** 2 * eta ** 2))
    return c_star * max(log_term, 0.0) + c_max


def cost_to_accuracy(
        epoch_costs: Sequence[float],
        eta1: float,
        r: float,
        delta_bar: float,
        epsilon: float,
) -> float:
    """Sum of epoch cost allowances over epochs with
    ``4 (1 + delta_bar) eta_{i-1} > epsilon``, where ``eta_0 = eta1 / r``.
    """
    total = 0.0
    epoch = 1
    while 4.0 * (1.0 + delta_bar) * eta1 * r ** (epoch - 2) > epsilon:
        if epoch > len(epoch_costs):
            raise ConfigError(
                'epoch_costs',
                f'epoch {epoch} is needed but only {len(epoch_costs)} are given',
            )
        total += epoch_costs[epoch - 1]
        epoch += 1
    return total


class SubmodularityReport(NamedTuple):
    trials: int
    violations: int
    max_violation: float
    oracle_error: float


class _Probe(NamedTuple):
    history: tuple[int, ...]
    target: int
    small: tuple[int, ...]
    large: tuple[int, ...]
    extra: int


def _exhaustive_probes(n: int) -> list[_Probe]:
    probes = []
    subsets = [
        combo
        for size in range(n + 1)
        for combo in itertools.combinations(range(n), size)
    ]
    for history in subsets:
        for target in range(n):
            for large in subsets:
                for small in subsets:
                    if not set(small) <= set(large):
                        continue
                    for extra in range(n):
                        probes.append(_Probe(history, target, small, large, extra))
    return probes


def _random_probes(
        n: int,
        trials: int,
        seed: int,
        history_size: int,
        set_size: int,
) -> list[_Probe]:
    stream = make_stream(seed, PROBE_STREAM)
    probes = []
    for _ in range(trials):
        history = tuple(int(i) for i in stream.integers(n, size=stream.integers(history_size + 1)))
        large = tuple(int(i) for i in stream.integers(n, size=stream.integers(set_size + 1)))
        keep = stream.random(len(large)) < 0.5
        small = tuple(i for i, k in zip(large, keep) if k)
        probes.append(
            _Probe(history, int(stream.integers(n)), small, large, int(stream.integers(n))),
        )
    return probes


def submodularity_check(
        kernel: Kernel,
        domain: np.ndarray,
        noise_vars: np.ndarray | float,
        trials: int = 100,
        seed: int = 0,
        exhaustive: bool = False,
        history_size: int = 3,
        set_size: int = 3,
) -> SubmodularityReport:
    """Probe diminishing returns of ``psi(S) = sigma_t^2(x) - sigma_{t|S}^2(x)``.

    A violation is ``psi(S + v) - psi(S) < psi(S' + v) - psi(S') - 1e-9``
    for ``S`` contained in ``S'``.  Every ``psi`` is also recomputed with a
    dense solve and the largest disagreement reported.
    """
    domain = np.atleast_2d(np.asarray(domain, dtype=float))
    n = len(domain)
    noise = np.broadcast_to(np.asarray(noise_vars, dtype=float), (n,))
    if exhaustive:
        probes = _exhaustive_probes(n)
    else:
        if trials < 1:
            raise ConfigError('trials', 'must be >= 1')
        probes = _random_probes(n, trials, seed, history_size, set_size)

    violations = 0
    max_violation = 0.0
    oracle_error = 0.0
    for probe in probes:
        history = list(probe.history)
        posterior = gp.fit(
            kernel, domain, history, np.zeros(len(history)), noise[history],
        )
        base = posterior.variance[probe.target]

        def psi(extra: Sequence[int]) -> float:
            nonlocal oracle_error
            picks = [(i, float(noise[i])) for i in extra]
            var = posterior.batch_lookahead_variances(picks, [probe.target])[0] if picks else base
            all_idx = history + list(extra)
            dense = gp.dense_variances(
                kernel, domain, all_idx, noise[all_idx], [probe.target],
            )[0]
            oracle_error = max(oracle_error, abs(float(var) - float(dense)))
            return float(base - var)

        small_gain = psi(probe.small + (probe.extra,)) - psi(probe.small)
        large_gain = psi(probe.large + (probe.extra,)) - psi(probe.large)
        if small_gain < large_gain - SUBMODULAR_TOL:
            violations += 1
            max_violation = max(max_violation, large_gain - small_gain)

    if violations:
        logger.info('%d of %d probes violate diminishing returns', violations, len(probes))
    return SubmodularityReport(len(probes), violations, max_violation, oracle_error)
