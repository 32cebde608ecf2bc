"""Input checks in the spirit of ``sklearn.utils.validation``."""
import numpy as np

from .exceptions import ConfigurationError, NotFittedError


def check_discount(discount):
    if not 0.0 <= discount < 1.0:
        raise ConfigurationError(f"discount must lie in [0, 1), got {discount}")
    return float(discount)


def check_rows(table, name="table", tol=1e-12):
    """Raise unless every last-axis row of ``table`` is a probability vector."""
    table = np.asarray(table, dtype=float)
    if np.any(~np.isfinite(table)) or np.any(table < 0):
        raise ValueError(f"{name} has negative or non-finite entries")
    sums = table.sum(axis=-1)
    bad = np.argwhere(np.abs(sums - 1.0) > tol)
    if len(bad):
        where = tuple(int(i) for i in bad[0])
        raise ValueError(f"{name} row {where} sums to {sums[tuple(bad[0])]!r}")
    return table


def check_positive_int(value, name, minimum=1):
    if int(value) != value or value < minimum:
        raise ConfigurationError(f"{name} must be an integer >= {minimum}, got {value!r}")
    return int(value)


def check_nonnegative(value, name):
    if not np.isfinite(value) or value < 0:
        raise ConfigurationError(f"{name} must be finite and >= 0, got {value!r}")
    return float(value)


def check_random_state(seed):
    """Turn ``None``, an int, or a Generator into a ``numpy.random.Generator``."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def check_is_fitted(estimator, attributes):
    if isinstance(attributes, str):
        attributes = [attributes]
    if not all(hasattr(estimator, attr) for attr in attributes):
        raise NotFittedError(
            f"This {type(estimator).__name__} instance is not fitted yet; call 'fit' first."
        )
