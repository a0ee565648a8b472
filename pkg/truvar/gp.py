"""Zero-mean Gaussian-process posteriors over a finite domain.

A posterior keeps the lower Cholesky factor ``L`` of ``K_t + Sigma_t`` and
the whitened cross-covariance ``V = L^-1 k_t(D)``.  Everything the
sampling rules need follows from those two:

- ``mu_t = V^T L^-1 y``
- ``sigma_t^2 = k(x, x) - sum(V^2)``
- ``Cov_t(a, b) = k(a, b) - V[:, a]^T V[:, b]``

so a one-step lookahead costs one column of ``V`` and never a refit.
"""
from __future__ import annotations

import logging
from typing import Sequence

import numpy as np
import scipy.linalg

from truvar.kernels import Kernel
from truvar.util import ConfigError
from truvar.util import NumericalError

logger = logging.getLogger(__name__)

NOISE_FLOOR = 1e-10
JITTER_LADDER = (0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6)

# upper bound on targets x candidates entries held at once
CHUNK_ENTRIES = 1 << 21


def floor_noise(noise_vars: np.ndarray | float) -> np.ndarray:
    return np.maximum(np.asarray(noise_vars, dtype=float), NOISE_FLOOR)


def jittered_cholesky(matrix: np.ndarray) -> tuple[np.ndarray, float]:
    """Lower Cholesky factor, escalating diagonal jitter on failure."""
    eye = np.eye(matrix.shape[0])
    for jitter in JITTER_LADDER:
        try:
            chol = scipy.linalg.cholesky(matrix + jitter * eye, lower=True)
        except (np.linalg.LinAlgError, ValueError):
            continue
        if jitter:
            logger.info('cholesky needed jitter %g (n=%d)', jitter, len(matrix))
        return chol, jitter

    with np.errstate(all='ignore'):
        cond = np.linalg.cond(matrix) if np.all(np.isfinite(matrix)) else np.inf
    raise NumericalError(
        f'cholesky failed for a {len(matrix)}x{len(matrix)} matrix with '
        f'jitter up to {JITTER_LADDER[-1]:g} (condition number {cond:.3g})',
    )


def _freeze(*arrays: np.ndarray) -> None:
    for arr in arrays:
        arr.setflags(write=False)


class GpPosterior:
    def __init__(
            self,
            kernel: Kernel,
            domain: np.ndarray,
            indices: np.ndarray,
            observations: np.ndarray,
            noise_vars: np.ndarray,
            chol: np.ndarray,
            jitter: float,
            cross: np.ndarray,
            alpha: np.ndarray,
            mean: np.ndarray | None = None,
            variance: np.ndarray | None = None,
    ) -> None:
        self.kernel = kernel
        self.domain = domain
        self.indices = indices
        self.observations = observations
        # declared values; the factor uses the floored ones
        self.noise_vars = noise_vars
        self.chol = chol
        self.jitter = jitter
        self._cross = cross
        self._alpha = alpha
        self.prior_variance = kernel.diag(domain)
        if mean is None:
            mean = cross.T @ alpha
        if variance is None:
            variance = self.prior_variance - np.sum(cross ** 2, axis=0)
        self.mean = mean
        self.variance = np.clip(variance, 0.0, self.prior_variance)
        _freeze(
            self.indices, self.observations, self.noise_vars, self.chol,
            self._cross, self._alpha, self.mean, self.variance,
            self.prior_variance,
        )

    def __repr__(self) -> str:
        return f'GpPosterior(t={self.t}, n={self.size})'

    @property
    def t(self) -> int:
        return len(self.indices)

    @property
    def size(self) -> int:
        return len(self.domain)

    @property
    def std(self) -> np.ndarray:
        return np.sqrt(self.variance)

    def covariance(
            self,
            targets: Sequence[int] | np.ndarray,
            sources: Sequence[int] | np.ndarray,
    ) -> np.ndarray:
        targets = np.asarray(targets, dtype=int)
        sources = np.asarray(sources, dtype=int)
        prior = self.kernel(self.domain[targets], self.domain[sources])
        if self.t == 0:
            return prior
        return prior - self._cross[:, targets].T @ self._cross[:, sources]

    def variance_reductions(
            self,
            candidates: Sequence[int] | np.ndarray,
            targets: Sequence[int] | np.ndarray,
            noise_vars: Sequence[float] | np.ndarray,
    ) -> np.ndarray:
        """Drop in posterior variance at each target per observed candidate.

        Returns a ``(len(targets), len(candidates))`` matrix whose column j
        is ``sigma_t^2(targets) - sigma_{t|x_j}^2(targets)`` when candidate j
        is observed with noise ``noise_vars[j]``.
        """
        candidates = np.asarray(candidates, dtype=int)
        cov = self.covariance(targets, candidates)
        denom = floor_noise(noise_vars) + self.variance[candidates]
        if np.any(denom <= 0):
            raise NumericalError('non-positive lookahead denominator')
        return cov ** 2 / denom

    def truncated_reductions(
            self,
            candidates: Sequence[int] | np.ndarray,
            targets: Sequence[int] | np.ndarray,
            noise_vars: Sequence[float] | np.ndarray,
            scale: float = 1.0,
            floor: float = 0.0,
    ) -> np.ndarray:
        """Drop in the truncated variance sum over ``targets`` per candidate.

        Each target contributes ``max{scale * sigma^2, floor}``.  Candidates
        are processed in chunks of at most ``CHUNK_ENTRIES`` matrix entries.
        """
        candidates = np.asarray(candidates, dtype=int)
        targets = np.asarray(targets, dtype=int)
        noise_vars = np.broadcast_to(
            np.asarray(noise_vars, dtype=float), candidates.shape,
        )
        out = np.zeros(candidates.size)
        if targets.size == 0 or candidates.size == 0:
            return out
        var = self.variance[targets][:, None]
        before = np.maximum(scale * var, floor)
        chunk = max(1, CHUNK_ENTRIES // targets.size)
        for lo in range(0, candidates.size, chunk):
            drop = self.variance_reductions(
                candidates[lo:lo + chunk], targets, noise_vars[lo:lo + chunk],
            )
            after = np.maximum(scale * np.maximum(var - drop, 0.0), floor)
            out[lo:lo + chunk] = np.sum(before - after, axis=0)
        return out

    def lookahead_variances(
            self,
            index: int,
            targets: Sequence[int] | np.ndarray,
            noise_var: float,
    ) -> np.ndarray:
        targets = np.asarray(targets, dtype=int)
        if targets.size == 0:
            raise ConfigError('targets', 'lookahead needs a non-empty set')
        drop = self.variance_reductions([index], targets, [noise_var])[:, 0]
        return np.maximum(self.variance[targets] - drop, 0.0)

    def batch_lookahead_variances(
            self,
            picks: Sequence[tuple[int, float]],
            targets: Sequence[int] | np.ndarray,
    ) -> np.ndarray:
        """Variances at ``targets`` after observing every ``(index, noise)``.

        Repeated indices count once per occurrence.
        """
        targets = np.asarray(targets, dtype=int)
        pick_indices = np.asarray([p[0] for p in picks], dtype=int)
        union, inverse = np.unique(
            np.concatenate([targets, pick_indices]), return_inverse=True,
        )
        cov = self.covariance(union, union)
        for pos, (_, noise_var) in zip(inverse[len(targets):], picks):
            col = cov[:, pos].copy()
            denom = cov[pos, pos] + float(floor_noise(noise_var))
            if denom <= 0:
                raise NumericalError('non-positive lookahead denominator')
            cov -= np.outer(col, col) / denom
        return np.maximum(np.diag(cov)[inverse[:len(targets)]], 0.0)

    def extend(self, index: int, y: float, noise_var: float) -> GpPosterior:
        """Posterior after one more observation, via a rank-one factor update.

        Falls back to a full refit (with jitter escalation) if the new
        pivot is not positive.
        """
        index = int(index)
        noise = float(floor_noise(noise_var))
        link = self._cross[:, index]
        pivot_sq = self.prior_variance[index] + noise + self.jitter - link @ link
        if not pivot_sq > 0:
            logger.info('non-positive pivot at t=%d, refitting', self.t)
            return fit(
                self.kernel, self.domain,
                np.append(self.indices, index),
                np.append(self.observations, y),
                np.append(self.noise_vars, noise_var),
            )
        pivot = np.sqrt(pivot_sq)
        k_row = self.kernel(self.domain[index:index + 1], self.domain)[0]
        new_row = (k_row - link @ self._cross) / pivot
        new_alpha = (y - link @ self._alpha) / pivot

        t = self.t
        chol = np.zeros((t + 1, t + 1))
        chol[:t, :t] = self.chol
        chol[t, :t] = link
        chol[t, t] = pivot
        return GpPosterior(
            self.kernel,
            self.domain,
            np.append(self.indices, index),
            np.append(self.observations, float(y)),
            np.append(self.noise_vars, float(noise_var)),
            chol,
            self.jitter,
            np.vstack([self._cross, new_row]),
            np.append(self._alpha, new_alpha),
            mean=self.mean + new_row * new_alpha,
            variance=self.variance - new_row ** 2,
        )


def fit(
        kernel: Kernel,
        domain: np.ndarray,
        indices: Sequence[int] | np.ndarray = (),
        observations: Sequence[float] | np.ndarray = (),
        noise_vars: Sequence[float] | np.ndarray = (),
) -> GpPosterior:
    domain = np.atleast_2d(np.asarray(domain, dtype=float))
    kernel.scales_for(domain.shape[1])
    indices = np.array(indices, dtype=int).ravel()
    observations = np.array(observations, dtype=float).ravel()
    noise_vars = np.array(noise_vars, dtype=float).ravel()
    if not len(indices) == len(observations) == len(noise_vars):
        raise ConfigError(
            'history',
            f'lengths differ: {len(indices)} points, '
            f'{len(observations)} observations, {len(noise_vars)} noise values',
        )
    if len(indices) and (indices.min() < 0 or indices.max() >= len(domain)):
        raise ConfigError('history', 'point index outside the domain')

    if len(indices) == 0:
        return GpPosterior(
            kernel, domain, indices, observations, noise_vars,
            np.zeros((0, 0)), 0.0, np.zeros((0, len(domain))), np.zeros(0),
        )

    points = domain[indices]
    gram = kernel(points, points) + np.diag(floor_noise(noise_vars))
    chol, jitter = jittered_cholesky(gram)
    cross = scipy.linalg.solve_triangular(
        chol, kernel(points, domain), lower=True,
    )
    alpha = scipy.linalg.solve_triangular(chol, observations, lower=True)
    return GpPosterior(
        kernel, domain, indices, observations, noise_vars,
        chol, jitter, cross, alpha,
    )


def dense_variances(
        kernel: Kernel,
        domain: np.ndarray,
        indices: Sequence[int] | np.ndarray,
        noise_vars: Sequence[float] | np.ndarray,
        targets: Sequence[int] | np.ndarray,
) -> np.ndarray:
    """Posterior variances by a direct dense solve, no factor reuse."""
    domain = np.atleast_2d(np.asarray(domain, dtype=float))
    indices = np.asarray(indices, dtype=int)
    targets = np.asarray(targets, dtype=int)
    prior = kernel.diag(domain[targets])
    if indices.size == 0:
        return prior
    points = domain[indices]
    gram = kernel(points, points) + np.diag(floor_noise(noise_vars))
    k_t = kernel(points, domain[targets])
    return np.maximum(
        prior - np.sum(k_t * np.linalg.solve(gram, k_t), axis=0), 0.0,
    )


def sample_prior(
        kernel: Kernel,
        points: np.ndarray,
        stream: np.random.Generator,
) -> np.ndarray:
    """One draw of f at ``points`` from the zero-mean GP prior."""
    gram = kernel(points, points)
    eigvals, eigvecs = scipy.linalg.eigh(gram)
    z = stream.standard_normal(len(points))
    return eigvecs @ (np.sqrt(np.clip(eigvals, 0.0, None)) * z)
