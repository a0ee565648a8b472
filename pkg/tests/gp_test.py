from __future__ import annotations

import numpy as np
import pytest

from testing.util import dense_posterior
from testing.util import SE
from truvar import gp
from truvar.kernels import make_kernel
from truvar.util import ConfigError
from truvar.util import NumericalError


def _instance(seed, n=30, t=10):
    stream = np.random.default_rng(seed)
    domain = stream.uniform(size=(n, 2))
    indices = stream.integers(n, size=t)
    observations = stream.normal(size=t)
    noise = 10 ** stream.uniform(-4, -1, size=t)
    return domain, indices, observations, noise


def test_prior():
    posterior = gp.fit(SE, np.random.default_rng(0).uniform(size=(5, 2)))
    assert posterior.t == 0
    np.testing.assert_array_equal(posterior.mean, 0.0)
    np.testing.assert_array_equal(posterior.variance, 1.0)


@pytest.mark.parametrize('noise', (1e-6, 0.01, 1.0, 4.0))
def test_single_observation(noise):
    domain = np.array([[0.0, 0.0], [5.0, 5.0]])
    posterior = gp.fit(SE, domain, [0], [2.0], [noise])
    assert posterior.mean[0] == pytest.approx(2.0 / (1 + noise))
    assert posterior.variance[0] == pytest.approx(noise / (1 + noise))
    # far away point is untouched
    assert posterior.variance[1] == pytest.approx(1.0)


@pytest.mark.parametrize('seed', range(5))
def test_fit_matches_dense_oracle(seed):
    domain, indices, observations, noise = _instance(seed, t=5)
    posterior = gp.fit(SE, domain, indices, observations, noise)
    mean, var = dense_posterior(SE, domain, indices, observations, noise)
    np.testing.assert_allclose(posterior.mean, mean, atol=1e-8)
    np.testing.assert_allclose(posterior.variance, var, atol=1e-8)


@pytest.mark.parametrize('seed', range(5))
def test_extend_equals_refit(seed):
    domain, indices, observations, noise = _instance(seed)
    posterior = gp.fit(SE, domain)
    for i, y, v in zip(indices, observations, noise):
        posterior = posterior.extend(i, y, v)
    refit = gp.fit(SE, domain, indices, observations, noise)
    np.testing.assert_allclose(posterior.mean, refit.mean, atol=1e-8)
    np.testing.assert_allclose(posterior.variance, refit.variance, atol=1e-8)
    np.testing.assert_array_equal(posterior.indices, indices)


def test_repeated_measurements_shrink_variance():
    domain = np.array([[0.0], [0.5]])
    posterior = gp.fit(SE, domain)
    previous = posterior.variance[0]
    for _ in range(5):
        posterior = posterior.extend(0, 1.0, 0.1)
        assert posterior.variance[0] < previous
        previous = posterior.variance[0]


def test_uninformative_observation():
    posterior = gp.fit(SE, np.array([[0.0], [0.3]])).extend(0, 5.0, 1e6)
    assert 1.0 - posterior.variance[0] < 1e-5


def test_posterior_is_read_only():
    posterior = gp.fit(SE, np.array([[0.0], [0.3]]), [0], [1.0], [0.1])
    with pytest.raises(ValueError):
        posterior.mean[0] = 3.0


def test_fit_does_not_freeze_caller_arrays():
    observations = np.array([1.0])
    gp.fit(SE, np.array([[0.0], [0.3]]), [0], observations, [0.1])
    observations[0] = 2.0


@pytest.mark.parametrize(
    ('indices', 'observations', 'noise'),
    (
        ([0, 1], [1.0], [0.1, 0.1]),
        ([0], [1.0], []),
        ([7], [1.0], [0.1]),
    ),
)
def test_fit_rejects_bad_history(indices, observations, noise):
    with pytest.raises(ConfigError):
        gp.fit(SE, np.array([[0.0], [0.3]]), indices, observations, noise)


def test_lookahead_single_point():
    posterior = gp.fit(SE, np.array([[0.0], [10.0]]))
    out = posterior.lookahead_variances(0, [0, 1], 0.25)
    assert out[0] == pytest.approx(0.25 / 1.25)
    # uncorrelated point is unaffected
    assert out[1] == pytest.approx(1.0)


def test_lookahead_rejects_empty_targets():
    posterior = gp.fit(SE, np.array([[0.0], [10.0]]))
    with pytest.raises(ConfigError):
        posterior.lookahead_variances(0, [], 0.1)


@pytest.mark.parametrize('seed', range(40))
def test_lookahead_matches_refit(seed):
    domain, indices, observations, noise = _instance(seed, n=50, t=20)
    stream = np.random.default_rng(1000 + seed)
    posterior = gp.fit(SE, domain, indices, observations, noise)
    x = int(stream.integers(50))
    targets = stream.choice(50, size=30, replace=False)
    v = float(10 ** stream.uniform(-4, -1))

    out = posterior.lookahead_variances(x, targets, v)
    _, oracle = dense_posterior(
        SE, domain, np.append(indices, x), np.append(observations, 0.0),
        np.append(noise, v),
    )
    np.testing.assert_allclose(out, oracle[targets], atol=1e-8)

    picks = [(int(i), float(w)) for i, w in zip(stream.integers(50, size=3), 10 ** stream.uniform(-4, -1, size=3))]
    batch = posterior.batch_lookahead_variances(picks, targets)
    _, oracle = dense_posterior(
        SE, domain,
        np.append(indices, [p[0] for p in picks]),
        np.append(observations, np.zeros(3)),
        np.append(noise, [p[1] for p in picks]),
    )
    np.testing.assert_allclose(batch, oracle[targets], atol=1e-8)


def test_batch_lookahead_empty_and_single():
    domain, indices, observations, noise = _instance(3)
    posterior = gp.fit(SE, domain, indices, observations, noise)
    targets = np.arange(10)
    np.testing.assert_allclose(
        posterior.batch_lookahead_variances([], targets),
        posterior.variance[targets],
    )
    np.testing.assert_allclose(
        posterior.batch_lookahead_variances([(4, 0.01)], targets),
        posterior.lookahead_variances(4, targets, 0.01),
        atol=1e-12,
    )


def test_batch_duplicates_average():
    posterior = gp.fit(SE, np.random.default_rng(2).uniform(size=(4, 2)))
    twice = posterior.batch_lookahead_variances([(1, 0.2), (1, 0.2)], [1])
    once = posterior.batch_lookahead_variances([(1, 0.1)], [1])
    np.testing.assert_allclose(twice, once, atol=1e-12)


def test_variance_reductions_are_non_negative():
    domain, indices, observations, noise = _instance(4)
    posterior = gp.fit(SE, domain, indices, observations, noise)
    drop = posterior.variance_reductions(np.arange(30), np.arange(30), np.full(30, 0.01))
    assert drop.shape == (30, 30)
    assert np.all(drop >= 0)


@pytest.mark.parametrize(('scale', 'floor'), ((1.0, 0.0), (4.0, 0.04), (2.0, 0.5)))
def test_truncated_reductions_match_brute_force(scale, floor, monkeypatch):
    monkeypatch.setattr(gp, 'CHUNK_ENTRIES', 7)
    domain, indices, observations, noise = _instance(5, n=12, t=4)
    posterior = gp.fit(SE, domain, indices, observations, noise)
    targets = np.array([0, 3, 5, 8])
    candidates = np.arange(12)
    noise_vars = np.linspace(0.01, 0.1, 12)

    out = posterior.truncated_reductions(candidates, targets, noise_vars, scale, floor)
    before = np.maximum(scale * posterior.variance[targets], floor).sum()
    for j in candidates:
        after = posterior.lookahead_variances(j, targets, noise_vars[j])
        expected = before - np.maximum(scale * after, floor).sum()
        assert out[j] == pytest.approx(expected, abs=1e-10)


def test_truncated_reductions_empty_targets():
    posterior = gp.fit(SE, np.array([[0.0], [1.0]]))
    out = posterior.truncated_reductions([0, 1], [], 0.1)
    np.testing.assert_array_equal(out, [0.0, 0.0])


def test_jitter_recovers_singular_matrix():
    chol, jitter = gp.jittered_cholesky(np.ones((3, 3)))
    assert jitter > 0
    np.testing.assert_allclose(chol @ chol.T, np.ones((3, 3)) + jitter * np.eye(3))


@pytest.mark.parametrize('matrix', (-np.eye(2), np.full((2, 2), np.nan)))
def test_cholesky_failure(matrix):
    with pytest.raises(NumericalError):
        gp.jittered_cholesky(matrix)


def test_noise_floor():
    np.testing.assert_array_equal(gp.floor_noise([0.0, 1.0]), [gp.NOISE_FLOOR, 1.0])


def test_noiseless_duplicate_observations_fit():
    domain = np.array([[0.0], [0.5]])
    posterior = gp.fit(SE, domain, [0, 0], [1.0, 1.0], [0.0, 0.0])
    assert posterior.variance[0] < 1e-6


def test_dense_variances_match_posterior():
    domain, indices, observations, noise = _instance(6)
    posterior = gp.fit(SE, domain, indices, observations, noise)
    dense = gp.dense_variances(SE, domain, indices, noise, np.arange(30))
    np.testing.assert_allclose(dense, posterior.variance, atol=1e-8)


def test_sample_prior_is_deterministic():
    points = np.random.default_rng(0).uniform(size=(10, 2))
    kernel = make_kernel('matern52', [0.3])
    a = gp.sample_prior(kernel, points, np.random.default_rng(7))
    b = gp.sample_prior(kernel, points, np.random.default_rng(7))
    np.testing.assert_array_equal(a, b)
