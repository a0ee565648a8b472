from __future__ import annotations

import argparse
from typing import Sequence

from truvar import harness
from truvar.config import load_bounds
from truvar.config import load_experiment
from truvar.config import parse_seeds
from truvar.util import atomic_write
from truvar.util import ConfigError
from truvar.util import configure_logging
from truvar.util import csv_split
from truvar.util import InfeasibleError
from truvar.util import NumericalError

EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_INFEASIBLE = 4

DEFAULT_OUT = 'truvar-out'


def _seed_list(s: str) -> tuple[int, ...]:
    parts = csv_split(s)
    try:
        seeds = [int(part) for part in parts]
    except ValueError:
        raise argparse.ArgumentTypeError(f'expected comma separated integers: {s!r}')
    return parse_seeds(seeds, '--seed-list')


def _run(args: argparse.Namespace) -> int:
    config = load_experiment(args.config)
    if args.seed_list is not None:
        config = config._replace(seeds=args.seed_list)
    elif args.seeds is not None:
        config = config._replace(seeds=parse_seeds(args.seeds, '--seeds'))
    if args.threads < 1:
        raise ConfigError('--threads', 'must be >= 1')
    out_dir = args.out or config.output or DEFAULT_OUT
    written = harness.run_experiment(config, out_dir, args.threads)
    for path in written:
        print(path)
    return 0


def _bounds(args: argparse.Namespace) -> int:
    contents = harness.run_bounds(load_bounds(args.config), args.out)
    if args.out is None:
        print(contents, end='')
    else:
        print(args.out)
    return 0


def _compare(args: argparse.Namespace) -> int:
    comparison = harness.compare(args.run_dirs, args.target)
    contents = harness.format_comparison(comparison)
    if args.out is None:
        print(contents, end='')
    else:
        atomic_write(args.out, contents)
        print(args.out)
    return 0


def _validate_config(args: argparse.Namespace) -> int:
    if args.bounds:
        load_bounds(args.config)
    else:
        load_experiment(args.config)
    print(f'{args.config}: ok')
    return 0


def main(argv: Sequence[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog='truvar')
    subparsers = parser.add_subparsers(dest='command', required=True)

    run_parser = subparsers.add_parser('run', help='Run an experiment suite.')
    run_parser.add_argument('--config', required=True)
    seeds = run_parser.add_mutually_exclusive_group()
    seeds.add_argument(
        '--seeds', type=int,
        help='Run seeds 0..N-1 instead of the configured seeds.',
    )
    seeds.add_argument(
        '--seed-list', type=_seed_list,
        help='Comma separated seeds, e.g. `--seed-list 3,7,11`.',
    )
    run_parser.add_argument(
        '--out', help=f'Output directory (default: config `output` or {DEFAULT_OUT}).',
    )
    run_parser.add_argument('--threads', type=int, default=1)
    run_parser.set_defaults(func=_run)

    bounds_parser = subparsers.add_parser(
        'bounds', help='Evaluate the sample-complexity bounds.',
    )
    bounds_parser.add_argument('--config', required=True)
    bounds_parser.add_argument('--out', help='Write the JSON report here.')
    bounds_parser.set_defaults(func=_bounds)

    compare_parser = subparsers.add_parser(
        'compare', help='Tabulate paired-seed metric differences.',
    )
    compare_parser.add_argument(
        'run_dirs', nargs='+',
        help='Per-algorithm output directories; the first is the reference.',
    )
    compare_parser.add_argument(
        '--target', type=float,
        help='Report the first checkpoint whose mean metric reaches this.',
    )
    compare_parser.add_argument('--out')
    compare_parser.set_defaults(func=_compare)

    validate_parser = subparsers.add_parser(
        'validate-config', help='Check a config file without running it.',
    )
    validate_parser.add_argument('--config', required=True)
    validate_parser.add_argument(
        '--bounds', action='store_true', help='Validate as a bound config.',
    )
    validate_parser.set_defaults(func=_validate_config)

    args = parser.parse_args(argv)

    try:
        configure_logging()
        return args.func(args)
    except ConfigError as exc:
        print(f'config error: {exc}')
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f'numerical failure: {exc}')
        return EXIT_NUMERICAL
    except InfeasibleError as exc:
        print(f'infeasible: {exc}')
        return EXIT_INFEASIBLE


if __name__ == '__main__':
    raise SystemExit(main())
