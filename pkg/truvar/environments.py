from __future__ import annotations

import csv
import logging
from typing import NamedTuple
from typing import Sequence

import numpy as np
import scipy.linalg

from truvar.gp import floor_noise
from truvar.gp import jittered_cholesky
from truvar.gp import sample_prior
from truvar.kernels import Kernel
from truvar.util import ConfigError
from truvar.util import FUNCTION_STREAM
from truvar.util import format_float
from truvar.util import make_stream

logger = logging.getLogger(__name__)

COST_MODELS = ('table', 'travel')


class Environment(NamedTuple):
    points: np.ndarray
    values: np.ndarray
    noise_vars: np.ndarray
    costs: np.ndarray
    cost_model: str = 'table'

    @property
    def size(self) -> int:
        return len(self.points)

    @property
    def levels(self) -> int:
        return self.noise_vars.shape[1]

    @property
    def sampling_size(self) -> int:
        """``|D|`` of the product domain ``D0 x levels``."""
        return self.size * self.levels

    def cost_matrix(self, previous: int | None) -> np.ndarray:
        """``(size, levels)`` query costs given the previously sampled point."""
        if self.cost_model == 'table':
            return self.costs
        if previous is None:
            raise ConfigError('environment.cost', 'travel cost needs a start')
        travel = _travel_costs(self.points[previous], self.points)
        return np.repeat(travel[:, None], self.levels, axis=1)

    def cost(self, previous: int | None, index: int, level: int) -> float:
        if self.cost_model == 'table':
            return float(self.costs[index, level])
        if previous is None:
            raise ConfigError('environment.cost', 'travel cost needs a start')
        return travel_cost(self.points[previous], self.points[index])

    def cheapest_level(self, index: int) -> int:
        if self.cost_model == 'table':
            return int(np.argmin(self.costs[index]))
        return 0

    def min_cost(self) -> float:
        if self.cost_model == 'table':
            return float(self.costs.min())
        # staying put at the shallowest point
        return float(4.0 * (np.abs(self.points[:, 1]).min() + 1.0))


def build_environment(
        points: np.ndarray,
        values: np.ndarray,
        noise_vars: np.ndarray | float,
        costs: np.ndarray | float = 1.0,
        cost_model: str = 'table',
) -> Environment:
    points = np.atleast_2d(np.asarray(points, dtype=float))
    values = np.asarray(values, dtype=float).ravel()
    n = len(points)
    if n < 2:
        raise ConfigError('environment', 'domain needs at least 2 points')
    if len(values) != n:
        raise ConfigError('environment.values', f'expected {n} values')
    if not np.all(np.isfinite(points)):
        raise ConfigError('environment.points', 'non-finite coordinate')
    if not np.all(np.isfinite(values)):
        raise ConfigError('environment.values', 'non-finite value')
    if len(np.unique(points, axis=0)) != n:
        raise ConfigError('environment.points', 'duplicate points')

    noise = _per_level('environment.noise_var', noise_vars, n, None)
    if not np.all(np.isfinite(noise)) or np.any(noise < 0):
        raise ConfigError('environment.noise_var', 'must be finite and >= 0')
    cost = _per_level('environment.cost', costs, n, noise.shape[1])
    if not np.all(np.isfinite(cost)) or np.any(cost <= 0):
        raise ConfigError('environment.cost', 'costs must be positive')

    if cost_model not in COST_MODELS:
        raise ConfigError('environment.cost', f'unknown model {cost_model!r}')
    if cost_model == 'travel' and points.shape[1] != 2:
        raise ConfigError('environment.cost', 'travel cost needs 2-d points')

    return Environment(points, values, noise, cost, cost_model)


def _per_level(
        field: str,
        values: np.ndarray | float,
        n: int,
        levels: int | None,
) -> np.ndarray:
    """Broadcast a scalar, per-point or ``(n, levels)`` table to 2-d."""
    arr = np.asarray(values, dtype=float)
    if arr.ndim == 0:
        arr = np.full((n, 1), float(arr))
    elif arr.ndim == 1:
        if len(arr) != n:
            raise ConfigError(field, f'expected {n} values, got {len(arr)}')
        arr = arr[:, None]
    elif arr.ndim != 2 or arr.shape[0] != n:
        raise ConfigError(field, f'expected {n} rows, got shape {arr.shape}')
    if levels is not None and arr.shape[1] != levels:
        if arr.shape[1] != 1:
            raise ConfigError(field, f'expected {levels} noise levels')
        arr = np.repeat(arr, levels, axis=1)
    return np.array(arr, dtype=float)


def make_grid(shape: Sequence[int]) -> np.ndarray:
    """Uniform grid on ``[0, 1]^d`` in lexicographic order."""
    if not shape or any(int(s) < 1 for s in shape):
        raise ConfigError('environment.grid', 'grid sides must be >= 1')
    axes = [np.linspace(0.0, 1.0, int(s)) for s in shape]
    mesh = np.meshgrid(*axes, indexing='ij')
    return np.stack([m.ravel() for m in mesh], axis=1)


def anchored_function(
        kernel: Kernel,
        grid: np.ndarray,
        anchors: np.ndarray,
        anchor_values: np.ndarray,
) -> np.ndarray:
    """Noiseless posterior mean through ``(anchors, anchor_values)``."""
    chol, _ = jittered_cholesky(kernel(anchors, anchors))
    weights = scipy.linalg.cho_solve((chol, True), anchor_values)
    return kernel(grid, anchors) @ weights


def synth_gp_function(
        kernel: Kernel,
        grid: np.ndarray,
        n_anchor: int | None,
        seed: int,
        noise_var: float = 1e-6,
) -> Environment:
    """Unit-cost environment with a GP-sampled truth.

    With ``n_anchor`` the truth is the posterior mean through that many
    uniformly placed anchors whose values are a joint prior draw; without
    it the truth is a direct prior draw on the grid itself.
    """
    grid = np.atleast_2d(np.asarray(grid, dtype=float))
    if grid.size == 0:
        raise ConfigError('environment.grid', 'empty grid')
    stream = make_stream(seed, FUNCTION_STREAM)
    if n_anchor is None:
        values = sample_prior(kernel, grid, stream)
    else:
        if n_anchor < 1:
            raise ConfigError('environment.n_anchor', 'must be >= 1')
        anchors = stream.uniform(size=(n_anchor, grid.shape[1]))
        chol, _ = jittered_cholesky(kernel(anchors, anchors))
        anchor_values = chol @ stream.standard_normal(n_anchor)
        values = anchored_function(kernel, grid, anchors, anchor_values)
    return build_environment(grid, values, noise_var)


def travel_cost(previous: Sequence[float], candidate: Sequence[float]) -> float:
    """Cost of moving the sampler from ``previous`` to ``candidate``.

    Horizontal travel ``|x1 - x1'|`` is cheap; depth ``|x2|`` is expensive
    regardless of where the sampler came from.
    """
    return float(_travel_costs(np.asarray(previous), np.atleast_2d(candidate))[0])


def _travel_costs(previous: np.ndarray, points: np.ndarray) -> np.ndarray:
    if previous.shape[-1] != 2 or points.shape[1] != 2:
        raise ConfigError('environment.cost', 'travel cost needs 2-d points')
    return 0.25 * np.abs(points[:, 0] - previous[0]) + 4.0 * (np.abs(points[:, 1]) + 1.0)


def multi_noise_env(
        base: Environment,
        variances: Sequence[float],
        costs: Sequence[float],
) -> Environment:
    if len(variances) != len(costs) or not len(variances):
        raise ConfigError(
            'environment.noise_levels', 'variances and costs differ in length',
        )
    if base.levels != 1 or base.cost_model != 'table':
        raise ConfigError(
            'environment.noise_levels',
            'noise levels need a single-level table-cost base environment',
        )
    level_vars = np.asarray(variances, dtype=float)
    level_costs = np.asarray(costs, dtype=float)
    if np.any(level_vars <= 0) or np.any(level_costs <= 0):
        raise ConfigError('environment.noise_levels', 'must be positive')
    n = base.size
    return base._replace(
        noise_vars=np.tile(level_vars, (n, 1)),
        costs=np.tile(level_costs, (n, 1)),
    )


def observe(
        env: Environment,
        index: int,
        level: int,
        stream: np.random.Generator,
) -> float:
    """One noisy sample ``f(x) + z``, ``z ~ N(0, sigma^2(x, level))``."""
    noise = float(floor_noise(env.noise_vars[index, level]))
    return float(env.values[index] + np.sqrt(noise) * stream.standard_normal())


def load_grid_csv(
        path: str,
        default_noise_var: float = 1e-6,
        default_cost: float = 1.0,
) -> Environment:
    with open(path, encoding='UTF-8', newline='') as f:
        reader = csv.reader(f)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ConfigError(path, 'empty file')
        if 'f' not in header:
            raise ConfigError(f'{path}:1', 'header has no f column')
        dim = header.index('f')
        if dim < 1 or header[:dim] != [f'x{i + 1}' for i in range(dim)]:
            raise ConfigError(f'{path}:1', 'header must start with x1..xd,f')
        extras = header[dim + 1:]
        if any(e not in ('noise_var', 'cost') for e in extras):
            raise ConfigError(f'{path}:1', f'unknown columns {extras}')

        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row or not ''.join(row).strip():
                continue
            if len(row) != len(header):
                raise ConfigError(
                    f'{path}:{lineno}',
                    f'expected {len(header)} fields, got {len(row)}',
                )
            try:
                parsed = [float(v) for v in row]
            except ValueError as exc:
                raise ConfigError(f'{path}:{lineno}', str(exc))
            if not all(np.isfinite(parsed)):
                raise ConfigError(f'{path}:{lineno}', 'non-finite value')
            rows.append(parsed)

    if not rows:
        raise ConfigError(path, 'no data rows')
    data = np.array(rows)
    order = np.lexsort(data[:, :dim].T[::-1])
    data = data[order]
    points = data[:, :dim]
    if len(np.unique(points, axis=0)) != len(points):
        raise ConfigError(path, 'duplicate point coordinates')
    columns = {name: data[:, dim + 1 + i] for i, name in enumerate(extras)}
    noise = columns.get('noise_var', np.full(len(data), default_noise_var))
    cost = columns.get('cost', np.full(len(data), default_cost))
    logger.info('loaded %d points from %s', len(data), path)
    return build_environment(points, data[:, dim], noise, cost)


def write_grid_csv(env: Environment, path: str) -> None:
    if env.levels != 1 or env.cost_model != 'table':
        raise ConfigError(path, 'only single-level table-cost grids are written')
    dim = env.points.shape[1]
    with open(path, 'w', encoding='UTF-8', newline='') as f:
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow([f'x{i + 1}' for i in range(dim)] + ['f', 'noise_var', 'cost'])
        for i in range(env.size):
            writer.writerow(
                [format_float(v) for v in env.points[i]] +
                [
                    format_float(env.values[i]),
                    format_float(env.noise_vars[i, 0]),
                    format_float(env.costs[i, 0]),
                ],
            )
