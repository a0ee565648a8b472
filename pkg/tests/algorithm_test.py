from __future__ import annotations

import math

import numpy as np
import pytest

from testing.util import posterior_with
from testing.util import SE
from truvar import algorithm
from truvar import gp
from truvar import runner
from truvar.algorithm import BetaRule
from truvar.algorithm import TruVarConfig
from truvar.algorithm import TruVarPolicy
from truvar.environments import build_environment
from truvar.environments import make_grid
from truvar.environments import multi_noise_env
from truvar.environments import synth_gp_function
from truvar.kernels import make_kernel
from truvar.metrics import eps_accuracy
from truvar.metrics import f1_score
from truvar.runner import STATUS_BUDGET
from truvar.runner import STATUS_COMPLETE
from truvar.theory import beta_union_bound
from truvar.util import ConfigError

FAR = np.array([[0.0], [100.0]])


def _state(config, n, **kwargs):
    return algorithm.initial_state(config, n, n, 1.0)._replace(**kwargs)


@pytest.mark.parametrize(
    ('a', 'size', 'epoch_start', 'expected'),
    (
        (0.5, 2500, 1, 3.9120),
        (1.0, 2500, 10, 12.4292),
        (0.7, math.e, 1, 0.7),
    ),
)
def test_beta_practical(a, size, epoch_start, expected):
    assert algorithm.beta_practical(a, size, epoch_start) == pytest.approx(expected, abs=1e-4)


def test_eta_schedule():
    config = TruVarConfig('bo', eta1=1.0, r=0.1)
    assert algorithm.eta_for(config, 1) == 1.0
    assert algorithm.eta_for(config, 3) == pytest.approx(0.01)
    assert algorithm.eta_for(config._replace(pure_variance_reduction=True), 3) == 0.0


def test_acquisition_single_point():
    env = build_environment(FAR, [0.0, 0.0], 1.0)
    config = TruVarConfig('bo')
    state = _state(config, 2, beta=4.0, eta=0.2, m=np.array([True, False]))
    posterior = gp.fit(SE, FAR)
    assert algorithm.acquisition(posterior, state, env, 0, 0) == pytest.approx(2.0)
    # the far point does not help
    assert algorithm.acquisition(posterior, state, env, 0, 1) == pytest.approx(0.0)


def test_acquisition_saturated():
    env = build_environment(make_grid([4]), np.zeros(4), 0.01)
    posterior = gp.fit(SE, env.points)
    state = _state(TruVarConfig('bo'), 4, beta=1.0, eta=1.0)
    scores = algorithm.acquisition_scores(
        posterior, state, env.costs, env.noise_vars, np.arange(4),
    )
    np.testing.assert_array_equal(scores, 0.0)
    choices = algorithm.select(posterior, state, TruVarConfig('bo'), env, 0)
    assert [c.index for c in choices] == [0]


def test_acquisition_scales_with_cost():
    points = make_grid([5])
    cheap = build_environment(points, np.zeros(5), 0.01, 1.0)
    dear = build_environment(points, np.zeros(5), 0.01, 2.0)
    posterior = gp.fit(make_kernel('se', [0.3]), points)
    state = _state(TruVarConfig('bo'), 5, beta=2.0, eta=0.1)
    for index in range(5):
        a = algorithm.acquisition(posterior, state, cheap, 0, index)
        b = algorithm.acquisition(posterior, state, dear, 0, index)
        assert b == pytest.approx(a / 2)


def test_acquisition_rejects_non_positive_cost():
    posterior = gp.fit(SE, FAR)
    state = _state(TruVarConfig('bo'), 2)
    with pytest.raises(ConfigError):
        algorithm.acquisition_scores(
            posterior, state, np.array([[1.0], [0.0]]), np.full((2, 1), 0.1),
            np.arange(2),
        )


def test_select_single_candidate():
    env = build_environment(FAR, [0.0, 0.0], 0.1)
    config = TruVarConfig('bo', restrict_to_m=True)
    state = _state(config, 2, m=np.array([False, True]))
    choices = algorithm.select(gp.fit(SE, FAR), state, config, env, 0)
    assert [c.index for c in choices] == [1]


def test_select_empty_candidates():
    env = build_environment(FAR, [0.0, 0.0], 0.1)
    config = TruVarConfig('bo', restrict_to_m=True)
    state = _state(config, 2, m=np.zeros(2, dtype=bool))
    assert algorithm.select(gp.fit(SE, FAR), state, config, env, 0) == []


def test_batch_matches_sequential_greedy():
    points = np.array([[0.0], [0.1], [0.25]])
    kernel = make_kernel('se', [0.1])
    env = build_environment(points, np.zeros(3), 0.1)
    config = TruVarConfig('bo', batch_size=2)
    state = _state(config, 3, beta=2.0, eta=0.3)
    posterior = gp.fit(kernel, points)

    expected = []
    virtual = posterior
    for _ in range(2):
        before = np.maximum(2.0 * virtual.variance, 0.09).sum()
        gains = [
            before - np.maximum(2.0 * virtual.lookahead_variances(x, range(3), 0.1), 0.09).sum()
            for x in range(3)
        ]
        best = int(np.argmax(gains))
        expected.append(best)
        virtual = virtual.extend(best, 0.0, 0.1)

    choices = algorithm.select(posterior, state, config, env, 0)
    assert [c.index for c in choices] == expected


def test_initial_bounds_are_symmetric():
    config = TruVarConfig('lse', threshold=0.5)
    posterior = gp.fit(SE, make_grid([3]))
    state = algorithm.update_sets(posterior, _state(config, 3, beta=4.0), config)
    np.testing.assert_allclose(state.upper, 2.0)
    np.testing.assert_allclose(state.lower, -2.0)
    assert state.m.all()
    assert not state.high.any() and not state.low.any()


def test_bo_sets_from_fixed_posterior():
    config = TruVarConfig('bo')
    posterior = posterior_with([0.0, 1.0, 2.0], [0.01, 0.01, 0.01])
    state = algorithm.update_sets(posterior, _state(config, 3, beta=1.0), config)
    np.testing.assert_allclose(state.upper, [0.1, 1.1, 2.1])
    np.testing.assert_array_equal(state.m, [False, False, True])


def test_lse_classification_is_sticky():
    h = 0.0
    m = np.ones(2, dtype=bool)
    high = np.zeros(2, dtype=bool)
    low = np.zeros(2, dtype=bool)
    m, high, low = algorithm.classify(
        'lse', h, np.array([0.01, -1.0]), np.array([0.5, 1.0]), m, high, low,
    )
    np.testing.assert_array_equal(high, [True, False])
    np.testing.assert_array_equal(m, [False, True])
    # later bounds that straddle h again do not undo the classification
    m, high, low = algorithm.classify(
        'lse', h, np.array([-1.0, -1.0]), np.array([1.0, 1.0]), m, high, low,
    )
    np.testing.assert_array_equal(high, [True, False])
    np.testing.assert_array_equal(m, [False, True])


def test_non_monotone_rebuilds_sets():
    m, high, low = algorithm.classify(
        'lse', 0.0, np.array([-1.0, -1.0]), np.array([1.0, -0.5]),
        np.array([False, True]), np.array([True, False]), np.zeros(2, dtype=bool),
        monotone=False,
    )
    np.testing.assert_array_equal(m, [True, False])
    np.testing.assert_array_equal(high, [False, False])
    np.testing.assert_array_equal(low, [False, True])


def test_epoch_advances_on_boundary():
    config = TruVarConfig('bo', eta1=0.5, r=0.1)
    posterior = posterior_with([0.0, 0.0], [0.25, 0.25])
    state = _state(config, 2, beta=1.0)
    state = algorithm.maybe_advance_epoch(posterior, state, config, 2)
    assert state.epoch == 2
    assert state.eta == pytest.approx(0.05)
    assert not state.finished


def test_epoch_holds_above_boundary():
    config = TruVarConfig('bo', eta1=0.5, delta_bar=0.1)
    posterior = posterior_with([0.0, 0.0], [0.36, 0.36])
    state = algorithm.maybe_advance_epoch(posterior, _state(config, 2, beta=1.0), config, 2)
    assert state.epoch == 1


def test_empty_m_finishes():
    config = TruVarConfig('lse', threshold=0.0)
    posterior = posterior_with([0.0, 0.0], [1.0, 1.0])
    state = _state(config, 2, m=np.zeros(2, dtype=bool))
    state = algorithm.maybe_advance_epoch(posterior, state, config, 2)
    assert state.finished
    assert state.epoch == 2


def test_pure_variance_reduction_never_advances():
    config = TruVarConfig('bo', pure_variance_reduction=True)
    posterior = posterior_with([0.0, 0.0], [0.01, 0.01])
    state = algorithm.maybe_advance_epoch(posterior, _state(config, 2), config, 2)
    assert state.epoch == 1
    assert state.eta == 0.0
    assert not state.finished


@pytest.mark.parametrize(
    ('config', 'field'),
    (
        (TruVarConfig('max'), 'truvar.mode'),
        (TruVarConfig('lse'), 'truvar.threshold'),
        (TruVarConfig('bo', r=1.0), 'truvar.r'),
        (TruVarConfig('bo', eta1=0.0), 'truvar.eta1'),
        (TruVarConfig('bo', delta_bar=-0.1), 'truvar.delta_bar'),
        (TruVarConfig('bo', batch_size=0), 'truvar.batch_size'),
        (TruVarConfig('bo', beta_rule=BetaRule('magic')), 'truvar.beta.kind'),
        (TruVarConfig('bo', beta_rule=BetaRule(a=0.0)), 'truvar.beta.a'),
        (
            TruVarConfig('bo', beta_rule=BetaRule('theoretical', delta=1.5)),
            'truvar.beta.delta',
        ),
    ),
)
def test_validate_config(config, field):
    with pytest.raises(ConfigError) as excinfo:
        algorithm.validate_config(config)
    assert excinfo.value.field == field


def test_budget_below_first_cost():
    env = build_environment(FAR, [1.0, -1.0], 0.01, 5.0)
    trace = algorithm.run(env, TruVarConfig('lse', threshold=0.0), SE, 4.0, seed=0)
    assert trace.steps == []
    assert trace.status == STATUS_BUDGET


def test_budget_must_be_positive():
    env = build_environment(FAR, [1.0, -1.0], 0.01)
    with pytest.raises(ConfigError):
        algorithm.run(env, TruVarConfig('bo'), SE, 0.0, seed=0)


def test_noiseless_two_point_lse_terminates():
    env = build_environment(FAR, [1.0, -1.0], 1e-6)
    policy_config = TruVarConfig('lse', threshold=0.0)
    finals = []

    def observer(posterior, policy, cost):
        finals.append((posterior, policy.sets()))

    trace = algorithm.run(env, policy_config, SE, 10.0, seed=0, observer=observer)
    assert trace.status == STATUS_COMPLETE
    assert sorted(s.index for s in trace.steps) == [0, 1]
    posterior, (m, high, low) = finals[-1]
    assert not m.any()
    np.testing.assert_array_equal(high, [True, False])
    np.testing.assert_array_equal(low, [False, True])
    assert f1_score(posterior.mean, env.values, 0.0) == 1.0
    assert eps_accuracy(env.values, 'lse', 0.0, m, high, low, 0.0).holds


def _lse_env(seed, noise_var=0.01):
    kernel = make_kernel('se', [0.3])
    env = synth_gp_function(kernel, make_grid([6, 6]), None, seed, noise_var)
    return kernel, env, float(np.quantile(env.values, 0.6))


@pytest.mark.parametrize('monotone', (True, False))
def test_set_dynamics(monotone):
    for seed in range(5):
        kernel, env, h = _lse_env(seed)
        config = TruVarConfig('lse', threshold=h, monotone_m=monotone)
        history = []

        def observer(posterior, policy, cost):
            history.append(tuple(s.copy() for s in policy.sets()))

        algorithm.run(env, config, kernel, 20.0, seed, observer=observer)
        for m, high, low in history:
            np.testing.assert_array_equal(
                m.astype(int) + high.astype(int) + low.astype(int), 1,
            )
        if monotone:
            for (m0, h0, l0), (m1, h1, l1) in zip(history, history[1:]):
                assert not (m1 & ~m0).any()
                assert not (h0 & ~h1).any()
                assert not (l0 & ~l1).any()


def test_confidence_coverage():
    covered = 0
    seeds = range(20)
    for seed in seeds:
        kernel, env, h = _lse_env(seed)
        config = TruVarConfig(
            'lse', threshold=h, beta_rule=BetaRule('theoretical', delta=0.1),
        )
        ok = []

        def observer(posterior, policy, cost):
            state = policy.state
            ok.append(bool(np.all((state.lower <= env.values) & (env.values <= state.upper))))

        algorithm.run(env, config, kernel, 15.0, seed, observer=observer)
        covered += all(ok)
    assert covered / len(seeds) >= 0.85


def test_theoretical_beta_per_step():
    kernel, env, h = _lse_env(0)
    config = TruVarConfig('lse', threshold=h, beta_rule=BetaRule('theoretical', delta=0.1))
    policy = TruVarPolicy(env, config)
    posterior = gp.fit(kernel, env.points).extend(3, 0.0, 0.01)
    policy.update(posterior)
    assert policy.state.beta == pytest.approx(beta_union_bound(0.1, 36, 2))


def test_theoretical_beta_with_epoch_costs():
    rule = BetaRule('theoretical', delta=0.1, epoch_costs=(10.0, 20.0))
    # the table is padded with its last entry
    assert algorithm.epoch_beta(rule, 100, 3, 5, 5, 1.0) == pytest.approx(
        2 * math.log(100 * 50.0 ** 2 * math.pi ** 2 / 0.6),
    )


def test_multi_noise_bookkeeping():
    kernel = make_kernel('se', [0.3])
    base = synth_gp_function(kernel, make_grid([4, 4]), None, 2)
    env = multi_noise_env(base, [1e-6, 1e-3, 0.05], [15, 10, 2])
    h = float(np.quantile(env.values, 0.6))
    trace = algorithm.run(env, TruVarConfig('lse', threshold=h), kernel, 120.0, 1)
    assert trace.steps
    total = 0.0
    for step in trace.steps:
        assert step.cost == env.costs[step.index, step.level]
        total += step.cost
        assert step.cumulative_cost == pytest.approx(total)
    assert trace.total_cost <= 120.0


def test_batch_run_records_every_pick():
    kernel, env, h = _lse_env(1)
    config = TruVarConfig('lse', threshold=h, batch_size=3)
    trace = algorithm.run(env, config, kernel, 6.0, 1)
    assert len(trace.steps) == 6
    assert [s.t for s in trace.steps] == list(range(1, 7))


def test_run_is_deterministic():
    kernel, env, h = _lse_env(3)
    config = TruVarConfig('lse', threshold=h)
    a = algorithm.run(env, config, kernel, 12.0, 7)
    b = algorithm.run(env, config, kernel, 12.0, 7)
    assert a == b


ACCURACY = 0.2


def _accuracy_config(h, eta_floor):
    return TruVarConfig(
        'lse', threshold=h, delta_bar=0.1,
        beta_rule=BetaRule('theoretical', delta=0.1), eta_floor=eta_floor,
    )


def test_run_until_target_delivers_accuracy():
    # finishing when eta drops below r * eps / 4(1 + delta_bar) means the
    # last completed epoch had 4(1 + delta_bar) eta <= eps
    eta_floor = 0.1 * ACCURACY / (4 * 1.1)
    seeds = range(8)
    delivered = 0
    for seed in seeds:
        kernel, env, h = _lse_env(seed, noise_var=1e-4)
        policy = TruVarPolicy(env, _accuracy_config(h, eta_floor))
        costs = np.ones((env.size, 1))

        def observer(posterior, policy, cost):
            state = policy.state
            if state.finished:
                return
            candidates = np.arange(env.size)
            truncated = algorithm.acquisition_scores(
                posterior, state, costs, env.noise_vars, candidates,
            )[:, 0]
            targets = np.flatnonzero(state.m)
            untruncated = state.beta * posterior.variance_reductions(
                candidates, targets, env.noise_vars[:, 0],
            ).sum(axis=0)
            assert np.all(truncated >= -1e-12)
            assert np.all(truncated <= untruncated + 1e-9)

        trace = runner.run_policy(env, kernel, policy, 3000.0, seed, observer)
        assert trace.status == STATUS_COMPLETE
        assert policy.finished
        assert all(s.score >= -1e-12 for s in trace.steps)
        m, high, low = policy.sets()
        # an empty M also ends the run, possibly before the target epoch
        completed_eta = policy.state.eta / 0.1
        assert not m.any() or 4 * 1.1 * completed_eta <= ACCURACY
        delivered += eps_accuracy(env.values, 'lse', ACCURACY, m, high, low, h).holds
    assert delivered >= 7


def test_eta_floor_at_target_stops_one_epoch_early():
    kernel, env, h = _lse_env(0, noise_var=1e-4)
    policy = TruVarPolicy(env, _accuracy_config(h, ACCURACY / (4 * 1.1)))
    trace = runner.run_policy(env, kernel, policy, 3000.0, 0)
    assert trace.status == STATUS_COMPLETE
    # the last completed epoch ran at eta = 0.1, short of the target
    assert policy.state.epoch == 3
    assert policy.state.eta == pytest.approx(0.01)
