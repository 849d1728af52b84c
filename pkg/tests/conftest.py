import numpy as np
import pytest
import torch

# Single-threaded torch keeps reductions bit-deterministic across runs,
# which the determinism/resume tests rely on. Toy models are tiny anyway.
torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(20260814)


def random_xyxy(rng, n, span=100.0):
    """Random valid xyxy boxes with strictly positive extent."""
    x1 = rng.uniform(0, span, size=n)
    y1 = rng.uniform(0, span, size=n)
    w = rng.uniform(0.5, span / 2, size=n)
    h = rng.uniform(0.5, span / 2, size=n)
    return np.stack([x1, y1, x1 + w, y1 + h], axis=1)
