from __future__ import annotations

import logging
import os
import tempfile

import numpy as np

# Philox key purposes, one independent stream per concern.
FUNCTION_STREAM = 0
OBSERVATION_STREAM = 1
START_STREAM = 2
PROBE_STREAM = 3


class ConfigError(ValueError):
    def __init__(self, field: str, message: str) -> None:
        super().__init__(f'{field}: {message}' if field else message)
        self.field = field
        self.message = message


class AlignmentError(ConfigError):
    pass


class NumericalError(RuntimeError):
    pass


class InfeasibleError(RuntimeError):
    pass


def make_stream(seed: int, purpose: int) -> np.random.Generator:
    """Counter-based generator keyed by ``(seed, purpose)``."""
    key = np.array([seed, purpose], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def argmax_first(scores: np.ndarray) -> int:
    """Index of the largest entry, lowest index on ties (row-major)."""
    return int(np.argmax(np.asarray(scores).ravel()))


def mask_to_indices(mask: np.ndarray) -> np.ndarray:
    return np.flatnonzero(mask)


def atomic_write(path: str, contents: str) -> None:
    dirname = os.path.dirname(os.path.abspath(path))
    os.makedirs(dirname, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=dirname, prefix='.tmp-')
    try:
        with os.fdopen(fd, 'w', encoding='UTF-8', newline='') as f:
            f.write(contents)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise


def format_float(value: float | None) -> str:
    if value is None:
        return ''
    return repr(float(value))


def configure_logging(env_var: str = 'TRUVAR_LOG') -> None:
    level_name = os.environ.get(env_var, 'WARNING').upper()
    level = logging.getLevelName(level_name)
    if not isinstance(level, int):
        raise ConfigError(env_var, f'unknown log level {level_name!r}')
    logging.basicConfig(
        level=level,
        format='%(levelname)s %(name)s: %(message)s',
    )


def csv_split(s: str) -> list[str]:
    s = s.strip().strip(',')
    if s:
        return [part.strip() for part in s.split(',')]
    else:
        return []
