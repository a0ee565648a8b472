from __future__ import annotations

import os.path

import numpy as np

from truvar import gp
from truvar.kernels import Kernel
from truvar.kernels import make_kernel


TESTING_DIR = os.path.abspath(os.path.dirname(__file__))

SE = make_kernel('se', [0.1])


def get_resource_path(path):
    return os.path.join(TESTING_DIR, 'resources', path)


def dense_posterior(kernel: Kernel, domain, indices, observations, noise_vars):
    """Mean and variance by explicit inversion of ``K_t + Sigma``."""
    domain = np.atleast_2d(np.asarray(domain, dtype=float))
    indices = np.asarray(indices, dtype=int)
    if indices.size == 0:
        return np.zeros(len(domain)), kernel.diag(domain)
    points = domain[indices]
    gram = kernel(points, points) + np.diag(gp.floor_noise(noise_vars))
    inv = np.linalg.inv(gram)
    k_t = kernel(points, domain)
    mean = k_t.T @ inv @ np.asarray(observations, dtype=float)
    var = kernel.diag(domain) - np.einsum('ij,ik,kj->j', k_t, inv, k_t)
    return mean, np.maximum(var, 0.0)


def posterior_with(mean, variance, domain=None, kernel: Kernel = SE):
    """Posterior with hand-set mean and variance and an empty history."""
    mean = np.asarray(mean, dtype=float)
    n = len(mean)
    if domain is None:
        # far apart, so the prior covariance between points is ~0
        domain = np.arange(n, dtype=float)[:, None] * 100.0
    return gp.GpPosterior(
        kernel, np.asarray(domain, dtype=float),
        np.zeros(0, dtype=int), np.zeros(0), np.zeros(0),
        np.zeros((0, 0)), 0.0, np.zeros((0, n)), np.zeros(0),
        mean=mean, variance=np.asarray(variance, dtype=float),
    )


def random_domain(stream: np.random.Generator, n: int, dim: int = 2):
    return stream.uniform(size=(n, dim))
