from __future__ import annotations

import numpy as np
import pytest

from tweedieflow.nn import NetConfig, VelocityNet


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_net():
    """A 2-D net well under the 1000-parameter budget used for gradient checks."""
    return VelocityNet.init(NetConfig(2, 0, (12, 12), 2), 7)


def linear_net(w: np.ndarray) -> VelocityNet:
    """Single linear layer on the state slice, no time features, no bias."""
    w = np.atleast_2d(np.asarray(w, dtype=np.float64))
    cfg = NetConfig(w.shape[1], 0, (), 0)
    return VelocityNet(cfg, [w], [np.zeros(w.shape[0])])
