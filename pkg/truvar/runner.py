from __future__ import annotations

import logging
from typing import Callable
from typing import NamedTuple
from typing import Protocol

import numpy as np

from truvar import gp
from truvar.environments import Environment
from truvar.environments import observe
from truvar.kernels import Kernel
from truvar.util import make_stream
from truvar.util import NumericalError
from truvar.util import OBSERVATION_STREAM
from truvar.util import START_STREAM

logger = logging.getLogger(__name__)

STATUS_COMPLETE = 'complete'
STATUS_BUDGET = 'budget'


class Choice(NamedTuple):
    index: int
    level: int
    score: float


class PolicyStatus(NamedTuple):
    m_size: int | None = None
    h_size: int | None = None
    l_size: int | None = None
    epoch: int | None = None
    eta: float | None = None
    beta: float | None = None


class StepRecord(NamedTuple):
    t: int
    index: int
    point: tuple[float, ...]
    level: int
    cost: float
    cumulative_cost: float
    y: float
    m_size: int | None
    h_size: int | None
    l_size: int | None
    epoch: int | None
    eta: float | None
    beta: float | None
    score: float | None


class RunTrace(NamedTuple):
    algorithm: str
    seed: int
    start: int
    steps: list[StepRecord]
    status: str

    @property
    def total_cost(self) -> float:
        return self.steps[-1].cumulative_cost if self.steps else 0.0


class Policy(Protocol):
    name: str

    @property
    def finished(self) -> bool: ...

    def update(self, posterior: gp.GpPosterior) -> None:
        """Absorb the posterior after the latest observation."""

    def select(
            self,
            posterior: gp.GpPosterior,
            previous: int,
    ) -> list[Choice]:
        """Next queries; an empty list ends the run."""

    def status(self) -> PolicyStatus: ...

    def sets(self) -> tuple[np.ndarray, np.ndarray, np.ndarray] | None:
        """Current ``(M, H, L)`` masks, for policies that keep them."""


Observer = Callable[[gp.GpPosterior, Policy, float], None]


def start_index(env: Environment, seed: int) -> int:
    """Uniformly random start location in ``D0``, fixed by the run seed."""
    return int(make_stream(seed, START_STREAM).integers(env.size))


def run_policy(
        env: Environment,
        kernel: Kernel,
        policy: Policy,
        budget: float,
        seed: int,
        observer: Observer | None = None,
        initial_observation: bool = False,
) -> RunTrace:
    """Run ``policy`` until the next query would exceed ``budget``.

    The run also ends when the policy reports it has finished or has no
    candidate left.  A numerical failure ends the run with a ``failed``
    status and keeps every step taken so far.
    """
    start = start_index(env, seed)
    stream = make_stream(seed, OBSERVATION_STREAM)
    previous = start
    cumulative = 0.0
    steps: list[StepRecord] = []
    status = STATUS_COMPLETE

    try:
        posterior = gp.fit(kernel, env.points)
        policy.update(posterior)
        if observer is not None:
            observer(posterior, policy, 0.0)

        pending: list[Choice] = []
        if initial_observation:
            pending = [Choice(start, env.cheapest_level(start), np.nan)]

        while pending or not policy.finished:
            choices = pending or policy.select(posterior, previous)
            pending = []
            if not choices:
                break
            for choice in choices:
                cost = env.cost(previous, choice.index, choice.level)
                if cumulative + cost > budget:
                    status = STATUS_BUDGET
                    break
                y = observe(env, choice.index, choice.level, stream)
                posterior = posterior.extend(
                    choice.index, y, env.noise_vars[choice.index, choice.level],
                )
                cumulative += cost
                previous = choice.index
                policy.update(posterior)
                steps.append(
                    _record(env, posterior, policy, choice, cost, cumulative, y),
                )
                if observer is not None:
                    observer(posterior, policy, cumulative)
                if policy.finished:
                    break
            if status == STATUS_BUDGET:
                break
    except NumericalError as exc:
        logger.warning('%s seed %d failed at t=%d: %s', policy.name, seed, len(steps), exc)
        status = f'failed: {exc}'

    logger.info(
        '%s seed %d: %d steps, cost %g, %s',
        policy.name, seed, len(steps), cumulative, status,
    )
    return RunTrace(policy.name, seed, start, steps, status)


def _record(
        env: Environment,
        posterior: gp.GpPosterior,
        policy: Policy,
        choice: Choice,
        cost: float,
        cumulative: float,
        y: float,
) -> StepRecord:
    s = policy.status()
    return StepRecord(
        t=posterior.t,
        index=choice.index,
        point=tuple(float(v) for v in env.points[choice.index]),
        level=choice.level,
        cost=cost,
        cumulative_cost=cumulative,
        y=y,
        m_size=s.m_size,
        h_size=s.h_size,
        l_size=s.l_size,
        epoch=s.epoch,
        eta=s.eta,
        beta=s.beta,
        score=None if np.isnan(choice.score) else float(choice.score),
    )
