from __future__ import annotations

from typing import NamedTuple
from typing import Sequence

import numpy as np
from scipy.spatial.distance import cdist

from truvar.util import ConfigError

FAMILIES = ('se', 'matern52')

_SQRT5 = np.sqrt(5.0)


class Kernel(NamedTuple):
    family: str
    length_scales: tuple[float, ...]
    variance: float = 1.0

    def scales_for(self, dim: int) -> np.ndarray:
        scales = np.asarray(self.length_scales, dtype=float)
        if scales.size == 1:
            return np.full(dim, float(scales[0]))
        elif scales.size == dim:
            return scales
        else:
            raise ConfigError(
                'kernel.length_scales',
                f'{scales.size} length scales for {dim}-dimensional points',
            )

    def __call__(self, x1: np.ndarray, x2: np.ndarray) -> np.ndarray:
        x1 = np.atleast_2d(np.asarray(x1, dtype=float))
        x2 = np.atleast_2d(np.asarray(x2, dtype=float))
        if x1.shape[1] != x2.shape[1]:
            raise ConfigError(
                'kernel', f'dimension mismatch {x1.shape[1]} != {x2.shape[1]}',
            )
        scales = self.scales_for(x1.shape[1])
        r = cdist(x1 / scales, x2 / scales, 'euclidean')
        return self.variance * _profile(self.family, r)

    def diag(self, x: np.ndarray) -> np.ndarray:
        return np.full(np.atleast_2d(x).shape[0], float(self.variance))


def _profile(family: str, r: np.ndarray) -> np.ndarray:
    if family == 'se':
        return np.exp(-0.5 * r ** 2)
    elif family == 'matern52':
        sr = _SQRT5 * r
        return (1.0 + sr + sr ** 2 / 3.0) * np.exp(-sr)
    else:
        raise ConfigError('kernel.family', f'unknown family {family!r}')


def make_kernel(
        family: str,
        length_scales: Sequence[float] | float,
        variance: float = 1.0,
) -> Kernel:
    if family not in FAMILIES:
        raise ConfigError(
            'kernel.family',
            f'expected one of {", ".join(FAMILIES)}, got {family!r}',
        )
    scales = tuple(float(s) for s in np.atleast_1d(length_scales))
    if not scales or any(not np.isfinite(s) or s <= 0 for s in scales):
        raise ConfigError('kernel.length_scales', 'must be positive')
    if not np.isfinite(variance) or variance <= 0:
        raise ConfigError('kernel.variance', 'must be positive')
    return Kernel(family, scales, float(variance))


def kernel_eval(
        kernel: Kernel,
        x: Sequence[float],
        x_prime: Sequence[float],
) -> float:
    return float(kernel(np.asarray(x)[None, :], np.asarray(x_prime)[None, :])[0, 0])
