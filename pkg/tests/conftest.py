import numpy as np
import pytest

from logcan.tensor import Tensor


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def preclassifier(rng, prefix, channels, classes, bias2=True, scale=0.5):
    """Random pre-classifier parameters as plain arrays."""
    p = {
        f"{prefix}.cls1.weight": rng.standard_normal((channels, channels, 1, 1)) * scale,
        f"{prefix}.cls1.bias": rng.standard_normal(channels) * 0.1,
        f"{prefix}.cls2.weight": rng.standard_normal((classes, channels, 1, 1)) * scale,
    }
    if bias2:
        p[f"{prefix}.cls2.bias"] = rng.standard_normal(classes) * 0.1
    return p


def as_tensors(arrays, dtype=np.float64):
    return {k: Tensor(v, dtype=dtype) for k, v in arrays.items()}
