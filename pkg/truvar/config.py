"""Experiment and bound configuration files.

Files are YAML (``.yaml`` / ``.yml``) or TOML (``.toml``).  Every key is
checked: unknown keys, wrong types and out-of-range values raise
``ConfigError`` naming the dotted path of the offending field.
"""
from __future__ import annotations

import os.path
import sys
from typing import Any
from typing import NamedTuple

import numpy as np
import ruamel.yaml

from truvar.algorithm import BetaRule
from truvar.algorithm import TruVarConfig
from truvar.algorithm import validate_config as validate_truvar
from truvar.baselines import BaselineConfig
from truvar.baselines import RULES as BASELINE_RULES
from truvar.baselines import validate_config as validate_baseline
from truvar.environments import make_grid
from truvar.kernels import Kernel
from truvar.kernels import make_kernel
from truvar.theory import BoundInputs
from truvar.theory import DEFAULT_CAP
from truvar.theory import gamma_greedy_curve
from truvar.theory import validate_bound_inputs
from truvar.util import ConfigError

if sys.version_info >= (3, 11):  # pragma: >=3.11 cover
    import tomllib
else:  # pragma: <3.11 cover
    import tomli as tomllib

yaml = ruamel.yaml.YAML(typ='safe')

ALGORITHM_KINDS = ('truvar',) + BASELINE_RULES
ENVIRONMENT_KINDS = ('synthetic', 'csv')
COSTS = ('unit', 'travel', 'table')

_MISSING = object()


class EnvironmentSpec(NamedTuple):
    kind: str
    grid: tuple[int, ...] = (30, 30)
    n_anchor: int | None = None
    # None draws a fresh function per run seed
    function_seed: int | None = None
    noise_var: float = 1e-6
    cost: str = 'unit'
    noise_levels: tuple[tuple[float, float], ...] = ()
    path: str | None = None
    default_noise_var: float = 1e-6


class AlgorithmSpec(NamedTuple):
    name: str
    kind: str
    truvar: TruVarConfig | None = None
    baseline: BaselineConfig | None = None


class ExperimentConfig(NamedTuple):
    mode: str
    threshold: float | None
    threshold_quantile: float | None
    kernel: Kernel
    environment: EnvironmentSpec
    algorithms: tuple[AlgorithmSpec, ...]
    budget: float
    cadence: float
    seeds: tuple[int, ...]
    epsilons: tuple[float, ...] = ()
    initial_observation: bool = False
    output: str | None = None


class _Section:
    def __init__(self, data: Any, path: str) -> None:
        if not isinstance(data, dict):
            raise ConfigError(path or '<root>', 'expected a mapping')
        self.data = dict(data)
        self.path = path

    def field(self, key: str) -> str:
        return f'{self.path}.{key}' if self.path else key

    def has(self, key: str) -> bool:
        return key in self.data

    def raw(self, key: str, default: Any = _MISSING) -> Any:
        if key not in self.data:
            if default is _MISSING:
                raise ConfigError(self.field(key), 'is required')
            return default
        return self.data.pop(key)

    def number(self, key: str, default: Any = _MISSING) -> Any:
        value = self.raw(key, default)
        if value is default and default is not _MISSING:
            return value
        return _as_number(self.field(key), value)

    def integer(self, key: str, default: Any = _MISSING) -> Any:
        value = self.raw(key, default)
        if value is default and default is not _MISSING:
            return value
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(self.field(key), f'expected an integer, got {value!r}')
        return value

    def boolean(self, key: str, default: Any = _MISSING) -> Any:
        value = self.raw(key, default)
        if not isinstance(value, bool):
            raise ConfigError(self.field(key), f'expected true or false, got {value!r}')
        return value

    def choice(self, key: str, choices: tuple[str, ...], default: Any = _MISSING) -> Any:
        value = self.raw(key, default)
        if value not in choices:
            raise ConfigError(
                self.field(key),
                f'expected one of {", ".join(choices)}, got {value!r}',
            )
        return value

    def string(self, key: str, default: Any = _MISSING) -> Any:
        value = self.raw(key, default)
        if value is default and default is not _MISSING:
            return value
        if not isinstance(value, str):
            raise ConfigError(self.field(key), f'expected a string, got {value!r}')
        return value

    def numbers(self, key: str, default: Any = _MISSING) -> Any:
        value = self.raw(key, default)
        if value is default and default is not _MISSING:
            return value
        if not isinstance(value, list):
            value = [value]
        return tuple(
            _as_number(f'{self.field(key)}[{i}]', v) for i, v in enumerate(value)
        )

    def section(self, key: str, default: Any = _MISSING) -> _Section:
        return _Section(self.raw(key, default), self.field(key))

    def finish(self) -> None:
        if self.data:
            key = sorted(self.data, key=str)[0]
            raise ConfigError(self.field(str(key)), 'unknown key')


def _as_number(field: str, value: Any) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(field, f'expected a number, got {value!r}')
    if not np.isfinite(value):
        raise ConfigError(field, 'must be finite')
    return float(value)


def load_file(path: str) -> Any:
    _, ext = os.path.splitext(path)
    try:
        if ext in ('.yaml', '.yml'):
            with open(path, encoding='UTF-8') as f:
                return yaml.load(f)
        elif ext == '.toml':
            with open(path, 'rb') as fb:
                return tomllib.load(fb)
    except ruamel.yaml.YAMLError as exc:
        raise ConfigError(path, f'invalid yaml: {exc}')
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(path, f'invalid toml: {exc}')
    except OSError as exc:
        raise ConfigError(path, exc.strerror or str(exc))
    raise ConfigError(path, 'expected a .yaml, .yml or .toml file')


def parse_kernel(section: _Section) -> Kernel:
    family = section.choice('family', ('se', 'matern52'), 'se')
    scales = section.numbers('length_scales', (0.1,))
    variance = section.number('variance', 1.0)
    section.finish()
    try:
        return make_kernel(family, scales, variance)
    except ConfigError as exc:
        key = exc.field.rsplit('.', 1)[-1]
        raise ConfigError(section.field(key), exc.message)


def _noise_levels(section: _Section) -> tuple[tuple[float, float], ...]:
    variances = section.numbers('variances')
    costs = section.numbers('costs')
    section.finish()
    if len(variances) != len(costs) or not variances:
        raise ConfigError(section.path, 'variances and costs must be non-empty and equally long')
    if any(v <= 0 for v in variances) or any(c <= 0 for c in costs):
        raise ConfigError(section.path, 'variances and costs must be > 0')
    return tuple(zip(variances, costs))


def parse_environment(section: _Section, base_dir: str) -> EnvironmentSpec:
    kind = section.choice('kind', ENVIRONMENT_KINDS)
    grid = section.raw('grid', [30, 30])
    if not isinstance(grid, list) or not grid or any(
            isinstance(g, bool) or not isinstance(g, int) or g < 1 for g in grid
    ):
        raise ConfigError(section.field('grid'), 'expected a list of positive integers')
    n_anchor = section.integer('n_anchor', None)
    if n_anchor is not None and n_anchor < 1:
        raise ConfigError(section.field('n_anchor'), 'must be >= 1')
    function_seed = section.integer('function_seed', None)
    noise_var = section.number('noise_var', 1e-6)
    if noise_var < 0:
        raise ConfigError(section.field('noise_var'), 'must be >= 0')
    cost = section.choice('cost', COSTS, 'unit')
    levels: tuple[tuple[float, float], ...] = ()
    if section.has('noise_levels'):
        levels = _noise_levels(section.section('noise_levels'))
    path = section.string('path', None)
    default_noise_var = section.number('default_noise_var', 1e-6)
    section.finish()

    if kind == 'csv':
        if path is None:
            raise ConfigError(section.field('path'), 'csv environments need a path')
        path = os.path.join(base_dir, path)
    elif cost == 'table':
        raise ConfigError(section.field('cost'), 'table costs come from a csv file')
    if levels and cost == 'travel':
        raise ConfigError(section.field('noise_levels'), 'noise levels need level costs, not travel')
    if cost == 'travel' and kind == 'synthetic' and len(grid) != 2:
        raise ConfigError(section.field('cost'), 'travel cost needs a 2-d grid')
    return EnvironmentSpec(
        kind=kind,
        grid=tuple(grid),
        n_anchor=n_anchor,
        function_seed=function_seed,
        noise_var=noise_var,
        cost=cost,
        noise_levels=levels,
        path=path,
        default_noise_var=default_noise_var,
    )


def parse_algorithm(section: _Section, mode: str) -> AlgorithmSpec:
    kind = section.choice('kind', ALGORITHM_KINDS)
    name = section.string('name', kind)
    # the real threshold is resolved per environment
    threshold = 0.0 if mode == 'lse' else None
    if kind == 'truvar':
        beta = section.section('beta', {})
        rule = BetaRule(
            kind=beta.choice('kind', ('practical', 'theoretical'), 'practical'),
            a=beta.number('a', 1.0),
            delta=beta.number('delta', 0.1),
            epoch_costs=beta.numbers('epoch_costs', ()),
        )
        beta.finish()
        truvar = TruVarConfig(
            mode=mode,
            threshold=threshold,
            eta1=section.number('eta1', 1.0),
            r=section.number('r', 0.1),
            delta_bar=section.number('delta_bar', 0.0),
            beta_rule=rule,
            restrict_to_m=section.boolean('restrict_to_m', False),
            monotone_m=section.boolean('monotone_m', True),
            batch_size=section.integer('batch_size', 1),
            pure_variance_reduction=section.boolean('pure_variance_reduction', False),
            eta_floor=section.number('eta_floor', 1e-8),
        )
        section.finish()
        validate_truvar(truvar, section.path)
        return AlgorithmSpec(name, kind, truvar=truvar)

    baseline = BaselineConfig(
        rule=kind,
        mode=mode,
        threshold=threshold,
        beta_sqrt=section.number('beta_sqrt', 3.0),
        delta=section.number('delta', 0.1),
        divisor=section.number('divisor', 5.0),
        noise_level=section.integer('noise_level', 0),
        ei_reference=section.choice('ei_reference', ('observed', 'mean'), 'observed'),
    )
    section.finish()
    validate_baseline(baseline, section.path)
    return AlgorithmSpec(name, kind, baseline=baseline)


def parse_seeds(value: Any, field: str = 'seeds') -> tuple[int, ...]:
    if isinstance(value, bool):
        raise ConfigError(field, 'expected a count or a list of seeds')
    if isinstance(value, int):
        if value < 1:
            raise ConfigError(field, 'need at least one seed')
        return tuple(range(value))
    if isinstance(value, list) and value:
        seeds = []
        for i, seed in enumerate(value):
            if isinstance(seed, bool) or not isinstance(seed, int) or seed < 0:
                raise ConfigError(f'{field}[{i}]', f'expected a non-negative integer, got {seed!r}')
            seeds.append(seed)
        if len(set(seeds)) != len(seeds):
            raise ConfigError(field, 'duplicate seeds')
        return tuple(seeds)
    raise ConfigError(field, 'expected a count or a non-empty list of seeds')


def parse_experiment(data: Any, base_dir: str = '.') -> ExperimentConfig:
    root = _Section(data, '')
    mode = root.choice('mode', ('bo', 'lse'))
    threshold = root.number('threshold', None)
    quantile = root.number('threshold_quantile', None)
    if mode == 'lse':
        if (threshold is None) == (quantile is None):
            raise ConfigError('threshold', 'lse needs exactly one of threshold or threshold_quantile')
        if quantile is not None and not 0 <= quantile < 1:
            raise ConfigError('threshold_quantile', 'must lie in [0, 1)')
    elif threshold is not None or quantile is not None:
        raise ConfigError('threshold', 'only lse mode takes a threshold')

    kernel = parse_kernel(root.section('kernel', {}))
    environment = parse_environment(root.section('environment'), base_dir)

    raw_algorithms = root.raw('algorithms')
    if not isinstance(raw_algorithms, list) or not raw_algorithms:
        raise ConfigError('algorithms', 'expected a non-empty list')
    algorithms = tuple(
        parse_algorithm(_Section(item, f'algorithms[{i}]'), mode)
        for i, item in enumerate(raw_algorithms)
    )
    names = [a.name for a in algorithms]
    if len(set(names)) != len(names):
        raise ConfigError('algorithms', f'duplicate names in {names}')
    levels = max(len(environment.noise_levels), 1)
    for i, alg in enumerate(algorithms):
        if alg.baseline is not None and alg.baseline.noise_level >= levels:
            raise ConfigError(
                f'algorithms[{i}].noise_level',
                f'environment has {levels} noise levels',
            )

    budget = root.number('budget')
    if not budget > 0:
        raise ConfigError('budget', 'must be > 0')
    cadence = root.number('cadence')
    if not cadence > 0:
        raise ConfigError('cadence', 'must be > 0')
    seeds = parse_seeds(root.raw('seeds', 1))
    epsilons = root.numbers('epsilons', ())
    if any(e < 0 for e in epsilons):
        raise ConfigError('epsilons', 'must be >= 0')
    initial_observation = root.boolean('initial_observation', False)
    output = root.string('output', None)
    root.finish()

    return ExperimentConfig(
        mode=mode,
        threshold=threshold,
        threshold_quantile=quantile,
        kernel=kernel,
        environment=environment,
        algorithms=algorithms,
        budget=budget,
        cadence=cadence,
        seeds=seeds,
        epsilons=epsilons,
        initial_observation=initial_observation,
        output=output,
    )


def load_experiment(path: str) -> ExperimentConfig:
    return parse_experiment(load_file(path), os.path.dirname(os.path.abspath(path)))


def parse_bounds(data: Any) -> BoundInputs:
    root = _Section(data, '')
    domain_size = root.integer('domain_size', None)
    noise_var = root.number('noise_var')
    raw_gamma = root.raw('gamma')
    gamma: float | tuple[float, ...]
    if isinstance(raw_gamma, dict):
        section = _Section(raw_gamma, 'gamma')
        kernel = parse_kernel(section.section('kernel', {}))
        grid = section.raw('grid')
        if not isinstance(grid, list) or not grid or any(
                isinstance(g, bool) or not isinstance(g, int) or g < 1 for g in grid
        ):
            raise ConfigError('gamma.grid', 'expected a list of positive integers')
        horizon = section.integer('horizon', 100)
        section.finish()
        points = make_grid(grid)
        if domain_size is None:
            domain_size = len(points)
        gamma = tuple(float(g) for g in gamma_greedy_curve(kernel, points, noise_var, horizon))
    else:
        gamma = _as_number('gamma', raw_gamma)
    if domain_size is None:
        raise ConfigError('domain_size', 'is required unless gamma has a grid')

    levels: tuple[tuple[float, float], ...] = ()
    if root.has('noise_levels'):
        levels = _noise_levels(root.section('noise_levels'))
    inputs = BoundInputs(
        domain_size=domain_size,
        noise_var=noise_var,
        epsilon=root.number('epsilon'),
        delta=root.number('delta', 0.1),
        delta_bar=root.number('delta_bar'),
        gamma=gamma,
        eta1=root.number('eta1', 1.0),
        r=root.number('r', 0.1),
        noise_levels=levels,
        cap=root.integer('cap', DEFAULT_CAP),
    )
    root.finish()
    return validate_bound_inputs(inputs)


def load_bounds(path: str) -> BoundInputs:
    return parse_bounds(load_file(path))
