import zlib
from typing import Iterable, Optional

import numpy as np


def _check_even(*vals: int) -> Iterable[int]:
    return _check_divisible_by_n(2, *vals)


def _check_divisible_by_n(n: int, *vals: int) -> Iterable[int]:
    for v in vals:
        if v % n != 0:
            raise ValueError(f"Expected an integer divisible by {n}, but got {v}")
    return (v // n for v in vals)


def split_rng(seed: int, stream: str) -> np.random.Generator:
    """
    Derive an independent generator for a named stream (a layer, the shuffler,
    dropout, ...) from the single run seed.
    """
    return np.random.default_rng([seed, zlib.crc32(stream.encode("utf-8"))])


class AGIFError(Exception):
    pass


class ConfigError(AGIFError):
    pass


class ShapeError(AGIFError, ValueError):
    pass


class DatasetFormatError(AGIFError):
    def __init__(self, message: str, path: Optional[str] = None, line_number: Optional[int] = None):
        self.path = path
        self.line_number = line_number
        where = ""
        if path is not None:
            where = f"{path}:{line_number}: " if line_number is not None else f"{path}: "
        elif line_number is not None:
            where = f"line {line_number}: "
        super().__init__(f"{where}{message}")


class MixError(AGIFError):
    pass


class CheckpointError(AGIFError):
    pass


class TrainingDivergedError(AGIFError):
    pass


class GradientCheckError(AGIFError):
    pass
