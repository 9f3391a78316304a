import math

import numpy as np


def split_range(total, limit=256):
    """Splits range(total) into consecutive (start, stop) chunks of at most `limit`."""
    return [(i, min(i + limit, total)) for i in range(0, total, limit)]


def mean_and_variance(values):
    """Compensated mean and unbiased sample variance (None for fewer than two values)."""
    values = np.asarray(values, dtype=float)
    m = len(values)
    if m == 0:
        raise ValueError("No samples to average")
    mean = math.fsum(values) / m
    if m == 1:
        return mean, None
    var = math.fsum((values - mean) ** 2) / (m - 1)
    return mean, var


def format_float(value):
    """Shortest round-trip text for a float; empty for missing values."""
    return "" if value is None else repr(float(value))
