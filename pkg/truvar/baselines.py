from __future__ import annotations

from typing import NamedTuple

import numpy as np
from scipy.stats import norm

from truvar import gp
from truvar.algorithm import classify
from truvar.environments import Environment
from truvar.runner import Choice
from truvar.runner import PolicyStatus
from truvar.theory import beta_union_bound
from truvar.util import argmax_first
from truvar.util import ConfigError
from truvar.util import mask_to_indices

RULES = ('gp_ucb', 'ei', 'straddle', 'var', 'gchk')
RULE_MODES = {
    'gp_ucb': ('bo',),
    'ei': ('bo',),
    'straddle': ('lse',),
    'var': ('bo', 'lse'),
    'gchk': ('lse',),
}
EI_REFERENCES = ('observed', 'mean')
STRADDLE_WIDTH = 1.96


class BaselineConfig(NamedTuple):
    rule: str
    mode: str = 'bo'
    threshold: float | None = None
    beta_sqrt: float = 3.0
    delta: float = 0.1
    divisor: float = 5.0
    noise_level: int = 0
    ei_reference: str = 'observed'


def validate_config(config: BaselineConfig, prefix: str = 'baseline') -> BaselineConfig:
    if config.rule not in RULES:
        raise ConfigError(f'{prefix}.rule', f'unknown rule {config.rule!r}')
    if config.mode not in RULE_MODES[config.rule]:
        raise ConfigError(
            f'{prefix}.rule',
            f'{config.rule} does not support {config.mode} mode',
        )
    if config.mode == 'lse':
        if config.threshold is None or not np.isfinite(config.threshold):
            raise ConfigError(f'{prefix}.threshold', 'lse needs a finite threshold')
    if not config.beta_sqrt > 0:
        raise ConfigError(f'{prefix}.beta_sqrt', 'must be > 0')
    if not 0 < config.delta < 1:
        raise ConfigError(f'{prefix}.delta', 'must lie in (0, 1)')
    if not config.divisor > 0:
        raise ConfigError(f'{prefix}.divisor', 'must be > 0')
    if config.noise_level < 0:
        raise ConfigError(f'{prefix}.noise_level', 'must be >= 0')
    if config.ei_reference not in EI_REFERENCES:
        raise ConfigError(
            f'{prefix}.ei_reference', f'expected observed or mean, got {config.ei_reference!r}',
        )
    return config


def gp_ucb_beta(delta: float, domain_size: int, t: int, divisor: float = 5.0) -> float:
    return beta_union_bound(delta, domain_size, t) / divisor


def gp_ucb_scores(posterior: gp.GpPosterior, beta: float) -> np.ndarray:
    return posterior.mean + np.sqrt(beta) * posterior.std


def gp_ucb_select(posterior: gp.GpPosterior, beta: float) -> int:
    return argmax_first(gp_ucb_scores(posterior, beta))


def expected_improvement(
        mean: np.ndarray,
        std: np.ndarray,
        best: float,
) -> np.ndarray:
    improvement = np.asarray(mean, dtype=float) - best
    std = np.asarray(std, dtype=float)
    safe = np.where(std > 0, std, 1.0)
    z = improvement / safe
    ei = improvement * norm.cdf(z) + safe * norm.pdf(z)
    return np.where(std > 0, np.maximum(ei, 0.0), np.maximum(improvement, 0.0))


def ei_select(posterior: gp.GpPosterior, best: float) -> int:
    return argmax_first(expected_improvement(posterior.mean, posterior.std, best))


def straddle_scores(posterior: gp.GpPosterior, threshold: float) -> np.ndarray:
    return STRADDLE_WIDTH * posterior.std - np.abs(posterior.mean - threshold)


def straddle_select(posterior: gp.GpPosterior, threshold: float) -> int:
    return argmax_first(straddle_scores(posterior, threshold))


def var_select(posterior: gp.GpPosterior) -> int:
    return argmax_first(posterior.variance)


def ambiguity(
        posterior: gp.GpPosterior,
        threshold: float,
        beta_sqrt: float,
) -> np.ndarray:
    width = beta_sqrt * posterior.std
    upper = posterior.mean + width
    lower = posterior.mean - width
    return np.minimum(upper - threshold, threshold - lower)


def gchk_select(
        posterior: gp.GpPosterior,
        m: np.ndarray,
        threshold: float,
        beta_sqrt: float,
) -> int | None:
    """Most ambiguous unclassified point, or None once all are classified."""
    candidates = mask_to_indices(m)
    if candidates.size == 0:
        return None
    scores = ambiguity(posterior, threshold, beta_sqrt)[candidates]
    return int(candidates[argmax_first(scores)])


class BaselinePolicy:
    def __init__(
            self,
            env: Environment,
            config: BaselineConfig,
            name: str | None = None,
    ) -> None:
        self.config = validate_config(config)
        if config.noise_level >= env.levels:
            raise ConfigError(
                'baseline.noise_level',
                f'environment has {env.levels} noise levels',
            )
        self.name = name or config.rule
        self.env = env
        n = env.size
        self.m = np.ones(n, dtype=bool)
        self.high = np.zeros(n, dtype=bool)
        self.low = np.zeros(n, dtype=bool)
        self.best = 0.0
        self.t = 0
        self._finished = False

    @property
    def finished(self) -> bool:
        return self._finished

    def update(self, posterior: gp.GpPosterior) -> None:
        self.t = posterior.t
        if self.config.rule == 'ei':
            self.best = self._ei_reference(posterior)
        if self.config.rule == 'gchk':
            width = self.config.beta_sqrt * posterior.std
            self.m, self.high, self.low = classify(
                'lse', self.config.threshold,
                posterior.mean - width, posterior.mean + width,
                self.m, self.high, self.low,
            )
            if not self.m.any():
                self._finished = True

    def _ei_reference(self, posterior: gp.GpPosterior) -> float:
        if posterior.t == 0:
            return float(posterior.mean.max())
        if self.config.ei_reference == 'observed':
            return float(posterior.observations.max())
        return float(posterior.mean[posterior.indices].max())

    def scores(self, posterior: gp.GpPosterior) -> np.ndarray:
        cfg = self.config
        if cfg.rule == 'gp_ucb':
            beta = gp_ucb_beta(cfg.delta, self.env.sampling_size, self.t + 1, cfg.divisor)
            return gp_ucb_scores(posterior, beta)
        elif cfg.rule == 'ei':
            return expected_improvement(posterior.mean, posterior.std, self.best)
        elif cfg.rule == 'straddle':
            assert cfg.threshold is not None
            return straddle_scores(posterior, cfg.threshold)
        elif cfg.rule == 'var':
            return posterior.variance
        else:
            assert cfg.threshold is not None
            scores = ambiguity(posterior, cfg.threshold, cfg.beta_sqrt)
            return np.where(self.m, scores, -np.inf)

    def select(self, posterior: gp.GpPosterior, previous: int) -> list[Choice]:
        if self.config.rule == 'gchk' and not self.m.any():
            return []
        scores = self.scores(posterior)
        index = argmax_first(scores)
        return [Choice(index, self.config.noise_level, float(scores[index]))]

    def status(self) -> PolicyStatus:
        if self.config.rule != 'gchk':
            return PolicyStatus()
        return PolicyStatus(
            m_size=int(self.m.sum()),
            h_size=int(self.high.sum()),
            l_size=int(self.low.sum()),
        )

    def sets(self) -> tuple[np.ndarray, np.ndarray, np.ndarray] | None:
        if self.config.rule != 'gchk':
            return None
        return self.m, self.high, self.low
