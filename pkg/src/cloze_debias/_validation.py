"""Input validation helpers and the package's exception types."""

import zlib

import numpy as np


class ParseError(ValueError):
    """Raised when an interaction log line cannot be parsed."""

    def __init__(self, lineno, message):
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno


class DomainError(ValueError):
    """A value lies outside the mathematical domain of an estimator (e.g. zero propensity)."""


class SamplingError(ValueError):
    """Not enough eligible items or cells to draw the requested sample."""


class ModeError(ValueError):
    """An operation was requested in a mode whose inputs are missing."""


class TrainingError(RuntimeError):
    """Optimization diverged (non-finite loss)."""


def check_probability_open(value, name):
    if not (0.0 < value <= 1.0):
        raise ValueError(f"{name} must lie in (0, 1], got {value!r}")
    return float(value)


def check_positive_int(value, name, minimum=1):
    if int(value) != value or value < minimum:
        raise ValueError(f"{name} must be an integer >= {minimum}, got {value!r}")
    return int(value)


def check_tokens(tokens, item_count, allow_mask=False):
    """Validate a token matrix and return it as a 2-D int64 array."""
    tokens = np.asarray(tokens)
    if tokens.ndim == 1:
        tokens = tokens[None, :]
    if tokens.ndim != 2:
        raise ValueError(f"token matrix must be 2-D, got shape {tokens.shape}")
    if not np.issubdtype(tokens.dtype, np.integer):
        raise ValueError("token matrix must hold integers")
    upper = item_count + 1 if allow_mask else item_count
    if tokens.size and (tokens.min() < 0 or tokens.max() > upper):
        raise ValueError(
            f"token out of range [0, {upper}] (item_count={item_count})"
        )
    return tokens.astype(np.int64, copy=False)


def check_same_shape(a, b, what):
    if np.shape(a) != np.shape(b):
        raise ValueError(f"{what}: shape mismatch {np.shape(a)} vs {np.shape(b)}")


def derive_seed(master, name):
    """Derive a stable 32-bit child seed from a master seed and a label."""
    ss = np.random.SeedSequence([int(master) & 0xFFFFFFFF, zlib.crc32(name.encode())])
    return int(ss.generate_state(1)[0])


def as_generator(seed):
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)
