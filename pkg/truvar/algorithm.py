"""Truncated variance reduction (TruVaR) for BO and level-set estimation.

The algorithm runs in epochs.  Within epoch ``i`` it greedily picks the
query that most reduces the sum of truncated variances
``max{beta_i sigma^2(x), eta_i^2}`` over the unresolved set ``M`` per unit
cost.  Once every point of ``M`` is known to within ``(1 + delta_bar) eta_i``
the target shrinks to ``eta_{i+1} = r eta_i``.
"""
from __future__ import annotations

import logging
from typing import NamedTuple

import numpy as np

from truvar import gp
from truvar.environments import Environment
from truvar.kernels import Kernel
from truvar.runner import Choice
from truvar.runner import Observer
from truvar.runner import PolicyStatus
from truvar.runner import run_policy
from truvar.runner import RunTrace
from truvar.theory import beta_epochs
from truvar.theory import beta_union_bound
from truvar.util import argmax_first
from truvar.util import ConfigError
from truvar.util import mask_to_indices

logger = logging.getLogger(__name__)

MODES = ('bo', 'lse')
BETA_RULES = ('practical', 'theoretical')


class BetaRule(NamedTuple):
    kind: str = 'practical'
    a: float = 1.0
    delta: float = 0.1
    # cumulative cost bound per epoch; empty means per-step union bound
    epoch_costs: tuple[float, ...] = ()


class TruVarConfig(NamedTuple):
    mode: str
    threshold: float | None = None
    eta1: float = 1.0
    r: float = 0.1
    delta_bar: float = 0.0
    beta_rule: BetaRule = BetaRule()
    restrict_to_m: bool = False
    monotone_m: bool = True
    batch_size: int = 1
    pure_variance_reduction: bool = False
    eta_floor: float = 1e-8


class TruVarState(NamedTuple):
    epoch: int
    eta: float
    beta: float
    m: np.ndarray
    high: np.ndarray
    low: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    t: int
    epoch_start: int
    finished: bool = False

    def status(self) -> PolicyStatus:
        return PolicyStatus(
            m_size=int(self.m.sum()),
            h_size=int(self.high.sum()),
            l_size=int(self.low.sum()),
            epoch=self.epoch,
            eta=self.eta,
            beta=self.beta,
        )


def validate_config(config: TruVarConfig, prefix: str = 'truvar') -> TruVarConfig:
    if config.mode not in MODES:
        raise ConfigError(f'{prefix}.mode', f'expected bo or lse, got {config.mode!r}')
    if config.mode == 'lse':
        if config.threshold is None or not np.isfinite(config.threshold):
            raise ConfigError(f'{prefix}.threshold', 'lse needs a finite threshold')
    if config.delta_bar < 0:
        raise ConfigError(f'{prefix}.delta_bar', 'must be >= 0')
    if not config.pure_variance_reduction:
        if not config.eta1 > 0:
            raise ConfigError(f'{prefix}.eta1', 'must be > 0')
        if not 0 < config.r < 1:
            raise ConfigError(f'{prefix}.r', 'must lie in (0, 1)')
    if config.batch_size < 1:
        raise ConfigError(f'{prefix}.batch_size', 'must be >= 1')
    if not config.eta_floor > 0:
        raise ConfigError(f'{prefix}.eta_floor', 'must be > 0')

    rule = config.beta_rule
    if rule.kind not in BETA_RULES:
        raise ConfigError(f'{prefix}.beta.kind', f'unknown rule {rule.kind!r}')
    if rule.kind == 'practical' and not rule.a > 0:
        raise ConfigError(f'{prefix}.beta.a', 'must be > 0')
    if rule.kind == 'theoretical':
        if not 0 < rule.delta < 1:
            raise ConfigError(f'{prefix}.beta.delta', 'must lie in (0, 1)')
        if any(not c > 0 for c in rule.epoch_costs):
            raise ConfigError(f'{prefix}.beta.epoch_costs', 'must be positive')
    return config


def beta_practical(a: float, domain_size: int, epoch_start: int) -> float:
    """``a log(|D| t_i^2)`` with ``t_i`` the first step of the epoch."""
    return float(a * np.log(domain_size * float(epoch_start) ** 2))


def epoch_beta(
        rule: BetaRule,
        domain_size: int,
        epoch: int,
        epoch_start: int,
        t: int,
        c_min: float,
) -> float:
    if rule.kind == 'practical':
        return beta_practical(rule.a, domain_size, epoch_start)
    elif rule.epoch_costs:
        costs = list(rule.epoch_costs[:epoch])
        costs += [rule.epoch_costs[-1]] * (epoch - len(costs))
        return beta_epochs(rule.delta, domain_size, costs, c_min)
    else:
        return beta_union_bound(rule.delta, domain_size, max(t, 1))


def eta_for(config: TruVarConfig, epoch: int) -> float:
    if config.pure_variance_reduction:
        return 0.0
    return float(config.eta1 * config.r ** (epoch - 1))


def initial_state(
        config: TruVarConfig,
        n: int,
        domain_size: int,
        c_min: float,
) -> TruVarState:
    beta = epoch_beta(config.beta_rule, domain_size, 1, 1, 1, c_min)
    return TruVarState(
        epoch=1,
        eta=eta_for(config, 1),
        beta=beta,
        m=np.ones(n, dtype=bool),
        high=np.zeros(n, dtype=bool),
        low=np.zeros(n, dtype=bool),
        lower=np.full(n, -np.inf),
        upper=np.full(n, np.inf),
        t=0,
        epoch_start=1,
    )


def confidence_bounds(
        posterior: gp.GpPosterior,
        beta: float,
) -> tuple[np.ndarray, np.ndarray]:
    width = np.sqrt(beta) * posterior.std
    return posterior.mean - width, posterior.mean + width


def classify(
        mode: str,
        threshold: float | None,
        lower: np.ndarray,
        upper: np.ndarray,
        m: np.ndarray,
        high: np.ndarray,
        low: np.ndarray,
        monotone: bool = True,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """New ``(M, H, L)`` masks from confidence bounds.

    With ``monotone`` only points still in ``M`` are reconsidered and ``H``,
    ``L`` only grow; otherwise all three are rebuilt from the whole domain.
    """
    if monotone:
        pool = m
    else:
        pool = np.ones_like(m)
        high = np.zeros_like(high)
        low = np.zeros_like(low)

    if mode == 'bo':
        if not pool.any():
            return pool.copy(), high, low
        best_lower = lower[pool].max()
        return pool & (upper >= best_lower), high, low

    assert threshold is not None
    new_m = pool & (upper >= threshold) & (lower <= threshold)
    new_high = high | (pool & (lower > threshold))
    new_low = low | (pool & (upper < threshold))
    return new_m, new_high, new_low


def update_sets(
        posterior: gp.GpPosterior,
        state: TruVarState,
        config: TruVarConfig,
) -> TruVarState:
    lower, upper = confidence_bounds(posterior, state.beta)
    m, high, low = classify(
        config.mode, config.threshold, lower, upper,
        state.m, state.high, state.low, config.monotone_m,
    )
    return state._replace(
        m=m, high=high, low=low, lower=lower, upper=upper, t=posterior.t,
    )


def max_confidence(posterior: gp.GpPosterior, state: TruVarState) -> float:
    """``max over M of beta^1/2 sigma``; zero for an empty ``M``."""
    if not state.m.any():
        return 0.0
    return float(np.sqrt(state.beta) * posterior.std[state.m].max())


def maybe_advance_epoch(
        posterior: gp.GpPosterior,
        state: TruVarState,
        config: TruVarConfig,
        domain_size: int,
        c_min: float = 1.0,
) -> TruVarState:
    while not state.finished:
        confidence = max_confidence(posterior, state)
        if config.pure_variance_reduction:
            if confidence <= 0:
                state = state._replace(finished=True)
            break
        if confidence > (1 + config.delta_bar) * state.eta:
            break

        epoch = state.epoch + 1
        epoch_start = posterior.t + 1
        state = state._replace(
            epoch=epoch,
            eta=eta_for(config, epoch),
            epoch_start=epoch_start,
            beta=epoch_beta(
                config.beta_rule, domain_size, epoch, epoch_start,
                epoch_start, c_min,
            ),
        )
        logger.debug(
            'epoch %d at t=%d: eta=%g beta=%g |M|=%d',
            epoch, posterior.t, state.eta, state.beta, int(state.m.sum()),
        )
        if not state.m.any() or state.eta < config.eta_floor:
            state = state._replace(finished=True)
    return state


def acquisition_scores(
        posterior: gp.GpPosterior,
        state: TruVarState,
        costs: np.ndarray,
        noise_vars: np.ndarray,
        candidates: np.ndarray,
) -> np.ndarray:
    """Truncated variance reduction per unit cost.

    Returns a ``(len(candidates), levels)`` array; ``costs`` and
    ``noise_vars`` are ``(size, levels)`` tables over the whole domain.
    """
    candidates = np.asarray(candidates, dtype=int)
    cand_costs = costs[candidates]
    if np.any(cand_costs <= 0):
        raise ConfigError('cost', 'query costs must be positive')

    targets = mask_to_indices(state.m)
    scores = np.zeros(cand_costs.shape)
    for level in range(cand_costs.shape[1]):
        scores[:, level] = posterior.truncated_reductions(
            candidates, targets, noise_vars[candidates, level],
            scale=state.beta, floor=state.eta ** 2,
        )
    return scores / cand_costs


def acquisition(
        posterior: gp.GpPosterior,
        state: TruVarState,
        env: Environment,
        previous: int | None,
        index: int,
        level: int = 0,
) -> float:
    scores = acquisition_scores(
        posterior, state, env.cost_matrix(previous), env.noise_vars,
        np.array([index]),
    )
    return float(scores[0, level])


def select(
        posterior: gp.GpPosterior,
        state: TruVarState,
        config: TruVarConfig,
        env: Environment,
        previous: int | None,
) -> list[Choice]:
    """Greedy argmax of the acquisition, lowest index first on ties.

    A batch is built by repeating the greedy step on a virtual posterior
    that treats earlier picks as observed; variances do not depend on the
    observed values, so zeros stand in for them.
    """
    if config.restrict_to_m:
        candidates = mask_to_indices(state.m)
    else:
        candidates = np.arange(env.size)
    if candidates.size == 0:
        return []

    picks: list[Choice] = []
    virtual = posterior
    for _ in range(config.batch_size):
        scores = acquisition_scores(
            virtual, state, env.cost_matrix(previous), env.noise_vars,
            candidates,
        )
        row, level = divmod(argmax_first(scores), scores.shape[1])
        index = int(candidates[row])
        picks.append(Choice(index, level, float(scores[row, level])))
        if len(picks) < config.batch_size:
            virtual = virtual.extend(index, 0.0, env.noise_vars[index, level])
            previous = index
    return picks


class TruVarPolicy:
    def __init__(
            self,
            env: Environment,
            config: TruVarConfig,
            name: str = 'truvar',
    ) -> None:
        self.name = name
        self.env = env
        self.config = validate_config(config)
        self.domain_size = env.sampling_size
        self.c_min = env.min_cost()
        self.state = initial_state(
            self.config, env.size, self.domain_size, self.c_min,
        )

    @property
    def finished(self) -> bool:
        return self.state.finished

    def update(self, posterior: gp.GpPosterior) -> None:
        rule = self.config.beta_rule
        if rule.kind == 'theoretical' and not rule.epoch_costs:
            self.state = self.state._replace(
                beta=beta_union_bound(rule.delta, self.domain_size, posterior.t + 1),
            )
        self.state = update_sets(posterior, self.state, self.config)
        self.state = maybe_advance_epoch(
            posterior, self.state, self.config, self.domain_size, self.c_min,
        )

    def select(
            self,
            posterior: gp.GpPosterior,
            previous: int,
    ) -> list[Choice]:
        return select(posterior, self.state, self.config, self.env, previous)

    def status(self) -> PolicyStatus:
        return self.state.status()

    def sets(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return self.state.m, self.state.high, self.state.low


def run(
        env: Environment,
        config: TruVarConfig,
        kernel: Kernel,
        budget: float,
        seed: int,
        observer: Observer | None = None,
        initial_observation: bool = False,
) -> RunTrace:
    if not budget > 0:
        raise ConfigError('budget', 'must be > 0')
    policy = TruVarPolicy(env, config)
    return run_policy(
        env, kernel, policy, budget, seed,
        observer=observer, initial_observation=initial_observation,
    )
