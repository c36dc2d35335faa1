"""Pytest configuration and shared fixtures."""
import sys
from pathlib import Path

import numpy as np
import pytest

# Ensure project root is importable regardless of where pytest is invoked
sys.path.insert(0, str(Path(__file__).resolve().parents[1]))

from common.models import ConfidenceThreshold, ErrorModel, UncertainPrediction  # noqa: E402


def make_controlled_case(seed: int = 0, n: int = 4000, center: float = 2.5, spread: float = 0.3,
                         u_low=(0.05, 0.15), u_high=(0.4, 1.2), confident_share: float = 0.5):
    """Labels crowd around ``center``; prediction = label + Normal(0, u).

    Returns (confident, uncertain, truth) where truth is indexed by input_index.
    The error model sigma = u is exact by construction.
    """
    rng = np.random.default_rng(seed)
    truth = rng.normal(center, spread, size=n)
    n_conf = int(n * confident_share)
    u = np.concatenate([rng.uniform(*u_low, size=n_conf), rng.uniform(*u_high, size=n - n_conf)])
    pred = truth + rng.normal(0.0, u)
    preds = [UncertainPrediction(prediction=(float(pred[i]),), uncertainty=(float(u[i]),),
                                 input_index=i) for i in range(n)]
    return preds[:n_conf], preds[n_conf:], truth


@pytest.fixture
def identity_error_model() -> ErrorModel:
    """sigma = u."""
    return ErrorModel(a0=(0.0,), a1=(1.0,), segments=40)


@pytest.fixture
def unit_threshold() -> ConfidenceThreshold:
    return ConfidenceThreshold(tau=(0.2,), eta=0.9)


@pytest.fixture
def controlled_case():
    return make_controlled_case()
