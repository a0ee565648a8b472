"""Experiment wiring, checkpointed metrics and the CSV / JSON outputs.

Layout of an experiment directory::

    <out>/<algorithm>/seed-<n>.steps.csv
    <out>/<algorithm>/seed-<n>.metrics.csv
    <out>/summary.csv

Every CSV starts with a ``# truvar-trace v1`` line and a ``#`` line of
``key=value`` run metadata.
"""
from __future__ import annotations

import concurrent.futures
import csv
import glob
import io
import json
import logging
import math
import os.path
import re
from typing import Any
from typing import NamedTuple
from typing import Sequence

import numpy as np
from scipy.stats import binomtest
from scipy.stats import trim_mean

from truvar import gp
from truvar.algorithm import TruVarPolicy
from truvar.baselines import BaselinePolicy
from truvar.config import AlgorithmSpec
from truvar.config import EnvironmentSpec
from truvar.config import ExperimentConfig
from truvar.environments import build_environment
from truvar.environments import Environment
from truvar.environments import load_grid_csv
from truvar.environments import make_grid
from truvar.environments import multi_noise_env
from truvar.environments import synth_gp_function
from truvar.kernels import Kernel
from truvar.metrics import eps_accuracy
from truvar.metrics import f1_score
from truvar.metrics import reported_regret
from truvar.runner import Policy
from truvar.runner import run_policy
from truvar.runner import RunTrace
from truvar.runner import start_index
from truvar.runner import StepRecord
from truvar.theory import BoundInputs
from truvar.theory import corollary_bounds
from truvar.util import AlignmentError
from truvar.util import atomic_write
from truvar.util import ConfigError
from truvar.util import format_float

logger = logging.getLogger(__name__)

TRACE_HEADER = '# truvar-trace v1'
TRIM_FRACTION = 0.05


class Checkpoint(NamedTuple):
    boundary: float
    cumulative_cost: float
    t: int
    metric: float
    eps_flags: tuple[bool | None, ...]
    # true when the run ended before reaching the boundary
    carried: bool = False


class RunResult(NamedTuple):
    trace: RunTrace
    metric_name: str
    threshold: float | None
    checkpoints: list[Checkpoint]


def make_environment(spec: EnvironmentSpec, kernel: Kernel, seed: int) -> Environment:
    if spec.kind == 'synthetic':
        function_seed = seed if spec.function_seed is None else spec.function_seed
        env = synth_gp_function(
            kernel, make_grid(spec.grid), spec.n_anchor, function_seed,
            spec.noise_var,
        )
    else:
        assert spec.path is not None
        env = load_grid_csv(spec.path, spec.default_noise_var)

    if spec.cost == 'travel':
        env = build_environment(env.points, env.values, env.noise_vars, 1.0, 'travel')
    elif spec.cost == 'unit':
        env = env._replace(costs=np.ones_like(env.costs))
    if spec.noise_levels:
        variances = [v for v, _ in spec.noise_levels]
        costs = [c for _, c in spec.noise_levels]
        env = multi_noise_env(env, variances, costs)
    return env


def resolve_threshold(config: ExperimentConfig, env: Environment) -> float | None:
    if config.mode != 'lse':
        return None
    if config.threshold is not None:
        return config.threshold
    assert config.threshold_quantile is not None
    return float(np.quantile(env.values, config.threshold_quantile))


def make_policy(
        spec: AlgorithmSpec,
        env: Environment,
        threshold: float | None,
) -> Policy:
    if spec.truvar is not None:
        return TruVarPolicy(env, spec.truvar._replace(threshold=threshold), spec.name)
    assert spec.baseline is not None
    return BaselinePolicy(env, spec.baseline._replace(threshold=threshold), spec.name)


def boundaries(budget: float, cadence: float) -> list[float]:
    count = int(math.floor(budget / cadence + 1e-9))
    return [j * cadence for j in range(count + 1)]


def metric_value(
        mode: str,
        posterior: gp.GpPosterior,
        env: Environment,
        threshold: float | None,
) -> float:
    if mode == 'lse':
        assert threshold is not None
        return f1_score(posterior.mean, env.values, threshold)
    return reported_regret(posterior, env)


class Checkpointer:
    """Observer recording metrics the first time each boundary is crossed."""

    def __init__(
            self,
            config: ExperimentConfig,
            env: Environment,
            threshold: float | None,
    ) -> None:
        self.config = config
        self.env = env
        self.threshold = threshold
        self.pending = boundaries(config.budget, config.cadence)
        self.rows: list[Checkpoint] = []

    def __call__(self, posterior: gp.GpPosterior, policy: Policy, cost: float) -> None:
        if not self.pending or self.pending[0] > cost:
            return
        metric = metric_value(self.config.mode, posterior, self.env, self.threshold)
        flags = self._eps_flags(policy)
        while self.pending and self.pending[0] <= cost:
            boundary = self.pending.pop(0)
            self.rows.append(
                Checkpoint(boundary, cost, posterior.t, metric, flags),
            )

    def _eps_flags(self, policy: Policy) -> tuple[bool | None, ...]:
        sets = policy.sets()
        if sets is None:
            return tuple(None for _ in self.config.epsilons)
        m, high, low = sets
        return tuple(
            eps_accuracy(
                self.env.values, self.config.mode, eps, m, high, low,
                self.threshold,
            ).holds
            for eps in self.config.epsilons
        )

    def close(self, posterior: gp.GpPosterior, policy: Policy, cost: float, t: int) -> None:
        """Carry the final metrics forward to the boundaries never reached."""
        if not self.pending:
            return
        if self.rows and self.rows[-1].t == t:
            metric, flags = self.rows[-1].metric, self.rows[-1].eps_flags
        else:
            metric = metric_value(self.config.mode, posterior, self.env, self.threshold)
            flags = self._eps_flags(policy)
        for boundary in self.pending:
            self.rows.append(Checkpoint(boundary, cost, t, metric, flags, carried=True))
        self.pending = []


def _failed_run(
        config: ExperimentConfig,
        spec: AlgorithmSpec,
        env: Environment,
        seed: int,
        threshold: float | None,
        reason: str,
) -> RunResult:
    """A run that never started; its checkpoints carry NaN metrics."""
    trace = RunTrace(spec.name, seed, start_index(env, seed), [], f'failed: {reason}')
    flags = tuple(None for _ in config.epsilons)
    checkpoints = [
        Checkpoint(boundary, 0.0, 0, math.nan, flags, carried=boundary > 0)
        for boundary in boundaries(config.budget, config.cadence)
    ]
    metric_name = 'f1' if config.mode == 'lse' else 'regret'
    return RunResult(trace, metric_name, threshold, checkpoints)


def run_one(config: ExperimentConfig, algorithm: int, seed: int) -> RunResult:
    spec = config.algorithms[algorithm]
    env = make_environment(config.environment, config.kernel, seed)
    threshold = resolve_threshold(config, env)
    if threshold is not None and not np.any(env.values > threshold):
        return _failed_run(
            config, spec, env, seed, threshold, 'threshold above max f',
        )
    policy = make_policy(spec, env, threshold)
    checkpointer = Checkpointer(config, env, threshold)
    trace = run_policy(
        env, config.kernel, policy, config.budget, seed,
        observer=checkpointer,
        initial_observation=config.initial_observation,
    )
    if checkpointer.pending:
        posterior = replay_posterior(env, config.kernel, trace)
        checkpointer.close(posterior, policy, trace.total_cost, len(trace.steps))
    metric_name = 'f1' if config.mode == 'lse' else 'regret'
    return RunResult(trace, metric_name, threshold, checkpointer.rows)


def replay_posterior(
        env: Environment,
        kernel: Kernel,
        trace: RunTrace,
        steps: int | None = None,
) -> gp.GpPosterior:
    posterior = gp.fit(kernel, env.points)
    for step in trace.steps[:steps]:
        posterior = posterior.extend(
            step.index, step.y, env.noise_vars[step.index, step.level],
        )
    return posterior


def _meta_line(**meta: Any) -> str:
    return '# ' + ' '.join(f'{k}={v}' for k, v in meta.items())


def _cell(value: Any) -> str:
    if value is None:
        return ''
    if isinstance(value, bool):
        return str(value).lower()
    if isinstance(value, (float, np.floating)):
        return format_float(value)
    return str(value)


def format_steps(trace: RunTrace, dim: int) -> str:
    out = io.StringIO()
    out.write(f'{TRACE_HEADER}\n')
    out.write(
        _meta_line(
            algorithm=trace.algorithm, seed=trace.seed, start=trace.start,
            status=trace.status.replace(' ', '_'),
        ) + '\n',
    )
    writer = csv.writer(out, lineterminator='\n')
    writer.writerow(
        ['t', 'index'] + [f'x{i + 1}' for i in range(dim)] + [
            'level', 'cost', 'cumulative_cost', 'y', 'm_size', 'h_size',
            'l_size', 'epoch', 'eta', 'beta', 'score',
        ],
    )
    for s in trace.steps:
        writer.writerow(
            [_cell(s.t), _cell(s.index)] + [_cell(v) for v in s.point] + [
                _cell(v) for v in (
                    s.level, s.cost, s.cumulative_cost, s.y, s.m_size,
                    s.h_size, s.l_size, s.epoch, s.eta, s.beta, s.score,
                )
            ],
        )
    return out.getvalue()


def format_metrics(result: RunResult, epsilons: Sequence[float]) -> str:
    out = io.StringIO()
    out.write(f'{TRACE_HEADER}\n')
    out.write(
        _meta_line(
            algorithm=result.trace.algorithm, seed=result.trace.seed,
            metric=result.metric_name, threshold=_cell(result.threshold),
            status=result.trace.status.replace(' ', '_'),
        ) + '\n',
    )
    writer = csv.writer(out, lineterminator='\n')
    writer.writerow(
        ['boundary', 'cumulative_cost', 't', result.metric_name] +
        [f'eps={format_float(e)}' for e in epsilons] + ['carried'],
    )
    for c in result.checkpoints:
        writer.writerow(
            [_cell(c.boundary), _cell(c.cumulative_cost), _cell(c.t), _cell(c.metric)] +
            [_cell(f) for f in c.eps_flags] + [_cell(c.carried)],
        )
    return out.getvalue()


def summarize(results: Sequence[RunResult]) -> str:
    """Per algorithm and boundary: mean, median and trimmed mean over seeds."""
    grouped: dict[str, dict[float, list[float]]] = {}
    for result in results:
        by_boundary = grouped.setdefault(result.trace.algorithm, {})
        for c in result.checkpoints:
            by_boundary.setdefault(c.boundary, []).append(c.metric)
    metric = results[0].metric_name if results else ''

    out = io.StringIO()
    out.write(f'{TRACE_HEADER}\n')
    out.write(_meta_line(metric=metric) + '\n')
    writer = csv.writer(out, lineterminator='\n')
    writer.writerow(['algorithm', 'boundary', 'runs', 'mean', 'median', 'trimmed_mean'])
    for algorithm, by_boundary in grouped.items():
        for boundary in sorted(by_boundary):
            # failed runs carry NaN and are left out
            values = np.array(by_boundary[boundary])
            values = values[np.isfinite(values)]
            stats: list[float | None]
            if values.size:
                stats = [
                    float(np.mean(values)),
                    float(np.median(values)),
                    float(trim_mean(values, TRIM_FRACTION)),
                ]
            else:
                stats = [None, None, None]
            writer.writerow(
                [algorithm, _cell(boundary), values.size] +
                [_cell(s) for s in stats],
            )
    return out.getvalue()


def run_path(out_dir: str, algorithm: str, seed: int, kind: str) -> str:
    return os.path.join(out_dir, algorithm, f'seed-{seed}.{kind}.csv')


def run_experiment(
        config: ExperimentConfig,
        out_dir: str,
        threads: int = 1,
) -> list[str]:
    """Run every (algorithm, seed) pair and write traces plus a summary.

    Returns the paths written, summary last.
    """
    jobs = [
        (a, seed)
        for a in range(len(config.algorithms))
        for seed in config.seeds
    ]
    logger.info('running %d jobs on %d workers', len(jobs), threads)
    if threads > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=threads) as ex:
            futures = [ex.submit(run_one, config, a, seed) for a, seed in jobs]
            results = [f.result() for f in futures]
    else:
        results = [run_one(config, a, seed) for a, seed in jobs]

    dim = len(config.environment.grid)
    written = []
    for result in results:
        trace = result.trace
        if trace.steps:
            dim = len(trace.steps[0].point)
        steps_path = run_path(out_dir, trace.algorithm, trace.seed, 'steps')
        atomic_write(steps_path, format_steps(trace, dim))
        metrics_path = run_path(out_dir, trace.algorithm, trace.seed, 'metrics')
        atomic_write(metrics_path, format_metrics(result, config.epsilons))
        written.extend([steps_path, metrics_path])
    summary_path = os.path.join(out_dir, 'summary.csv')
    atomic_write(summary_path, summarize(results))
    written.append(summary_path)
    failed = [r.trace for r in results if r.trace.status.startswith('failed')]
    for trace in failed:
        logger.warning('%s seed %d: %s', trace.algorithm, trace.seed, trace.status)
    return written


class TraceFile(NamedTuple):
    meta: dict[str, str]
    header: list[str]
    rows: list[dict[str, str]]


_META_RE = re.compile(r'(\w+)=(\S*)')


def read_trace_file(path: str) -> TraceFile:
    with open(path, encoding='UTF-8', newline='') as f:
        first = f.readline().rstrip('\n')
        if first != TRACE_HEADER:
            raise ConfigError(path, f'expected {TRACE_HEADER!r} on line 1')
        meta = dict(_META_RE.findall(f.readline()))
        reader = csv.DictReader(f)
        rows = list(reader)
        header = list(reader.fieldnames or [])
    return TraceFile(meta, header, rows)


class SeriesSet(NamedTuple):
    label: str
    metric: str
    boundaries: tuple[float, ...]
    # seed -> metric value per boundary
    runs: dict[int, tuple[float, ...]]


def load_series(run_dir: str) -> SeriesSet:
    paths = sorted(glob.glob(os.path.join(run_dir, 'seed-*.metrics.csv')))
    if not paths:
        raise ConfigError(run_dir, 'no seed-*.metrics.csv files')
    metric = ''
    bounds: tuple[float, ...] | None = None
    runs = {}
    for path in paths:
        trace = read_trace_file(path)
        metric = trace.meta.get('metric', '')
        these = tuple(float(r['boundary']) for r in trace.rows)
        if bounds is None:
            bounds = these
        elif these != bounds:
            raise AlignmentError(path, 'checkpoints differ from other seeds')
        runs[int(trace.meta['seed'])] = tuple(float(r[metric]) for r in trace.rows)
    assert bounds is not None
    return SeriesSet(run_dir, metric, bounds, runs)


class Comparison(NamedTuple):
    header: list[str]
    rows: list[list[str]]
    targets: dict[str, float | None]


def _finite_mean(values: Sequence[float]) -> float | None:
    arr = np.asarray(values, dtype=float)
    arr = arr[np.isfinite(arr)]
    return float(np.mean(arr)) if arr.size else None


def _reaches(metric: str, value: float, target: float) -> bool:
    return value <= target if metric == 'regret' else value >= target


def compare(run_dirs: Sequence[str], target: float | None = None) -> Comparison:
    """Align several algorithm directories on checkpoints and paired seeds.

    The first directory is the reference; every other gets a mean paired
    delta and a two-sided sign-test p-value per checkpoint.
    """
    if not run_dirs:
        raise ConfigError('compare', 'nothing to compare')
    series = [load_series(d) for d in run_dirs]
    ref = series[0]
    for s in series[1:]:
        if s.boundaries != ref.boundaries:
            raise AlignmentError(s.label, f'checkpoints differ from {ref.label}')
        if s.metric != ref.metric:
            raise AlignmentError(s.label, f'metric {s.metric} differs from {ref.metric}')

    labels = [f'{i}:{os.path.basename(os.path.normpath(s.label))}' for i, s in enumerate(series)]
    header = ['boundary'] + [f'mean[{lb}]' for lb in labels]
    for lb in labels[1:]:
        header += [f'delta[{lb}]', f'p_value[{lb}]']

    means = [
        [
            _finite_mean([run[j] for run in s.runs.values()])
            for j in range(len(ref.boundaries))
        ]
        for s in series
    ]
    rows = []
    for j, boundary in enumerate(ref.boundaries):
        row = [_cell(boundary)] + [_cell(m[j]) for m in means]
        for s in series[1:]:
            common = sorted(set(s.runs) & set(ref.runs))
            if not common:
                raise AlignmentError(s.label, f'no seeds in common with {ref.label}')
            deltas = np.array([s.runs[k][j] - ref.runs[k][j] for k in common])
            deltas = deltas[np.isfinite(deltas)]
            if not deltas.size:
                row += ['', '']
                continue
            wins = int(np.sum(deltas > 0))
            trials = int(np.sum(deltas != 0))
            p_value = binomtest(wins, trials, 0.5).pvalue if trials else 1.0
            row += [_cell(float(np.mean(deltas))), _cell(float(p_value))]
        rows.append(row)

    targets: dict[str, float | None] = {}
    if target is not None:
        for lb, s, m in zip(labels, series, means):
            hit = [
                b for b, v in zip(s.boundaries, m)
                if v is not None and _reaches(s.metric, v, target)
            ]
            targets[lb] = hit[0] if hit else None
    return Comparison(header, rows, targets)


def format_comparison(comparison: Comparison) -> str:
    out = io.StringIO()
    writer = csv.writer(out, lineterminator='\n')
    writer.writerow(comparison.header)
    writer.writerows(comparison.rows)
    for label, reached in comparison.targets.items():
        out.write(f'# target {label}: {_cell(reached) or "not reached"}\n')
    return out.getvalue()


def bounds_report(inputs: BoundInputs) -> dict[str, Any]:
    report = corollary_bounds(inputs)
    return {
        'c1': report.c1,
        't_simplified': report.t_simplified,
        't_improved': report.t_improved,
        'levels': [
            {
                'noise_var': lb.noise_var,
                'cost': lb.cost,
                't_star': lb.t_star,
                'total_cost': lb.total_cost,
            }
            for lb in report.levels
        ],
        'best_level': report.best_level,
        'c_multi_noise': report.c_multi_noise,
    }


def run_bounds(inputs: BoundInputs, out_path: str | None = None) -> str:
    contents = json.dumps(bounds_report(inputs), indent=2, sort_keys=True) + '\n'
    if out_path is not None:
        atomic_write(out_path, contents)
    return contents


def read_steps(path: str) -> RunTrace:
    """Parse a steps CSV back into the fields needed for a replay."""
    trace = read_trace_file(path)
    dims = [h for h in trace.header if re.fullmatch(r'x\d+', h)]

    def opt(value: str, kind: type) -> Any:
        return kind(value) if value != '' else None

    steps = [
        StepRecord(
            t=int(r['t']),
            index=int(r['index']),
            point=tuple(float(r[d]) for d in dims),
            level=int(r['level']),
            cost=float(r['cost']),
            cumulative_cost=float(r['cumulative_cost']),
            y=float(r['y']),
            m_size=opt(r['m_size'], int),
            h_size=opt(r['h_size'], int),
            l_size=opt(r['l_size'], int),
            epoch=opt(r['epoch'], int),
            eta=opt(r['eta'], float),
            beta=opt(r['beta'], float),
            score=opt(r['score'], float),
        )
        for r in trace.rows
    ]
    return RunTrace(
        trace.meta.get('algorithm', ''),
        int(trace.meta.get('seed', 0)),
        int(trace.meta.get('start', 0)),
        steps,
        trace.meta.get('status', ''),
    )


def replay_metric(
        env: Environment,
        kernel: Kernel,
        trace: RunTrace,
        mode: str,
        threshold: float | None,
) -> np.ndarray:
    """Metric after each of ``0..len(steps)`` observations, from raw data."""
    posterior = gp.fit(kernel, env.points)
    values = [metric_value(mode, posterior, env, threshold)]
    for step in trace.steps:
        posterior = posterior.extend(
            step.index, step.y, env.noise_vars[step.index, step.level],
        )
        values.append(metric_value(mode, posterior, env, threshold))
    return np.array(values)
