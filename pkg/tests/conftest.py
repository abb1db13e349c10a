"""Shared fixtures: small synthetic scenes and geometry helpers."""

from __future__ import annotations

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from mbasfm.synthetic import SyntheticConfig, generate


def random_rotation(rng):
    axis = rng.standard_normal(3)
    axis /= np.linalg.norm(axis)
    return Rotation.from_rotvec(rng.uniform(0.05, 1.5) * axis).as_matrix()


@pytest.fixture(scope="session")
def clean_scene():
    """Six orbiting cameras over a wavy surface, no noise, no outliers."""
    cfg = SyntheticConfig(
        frame_count=6,
        trajectory="orbit",
        surface="sinusoid_heightfield",
        affine_alpha_range=(0.85, 1.15),
        affine_beta_range=(-0.15, 0.15),
        seed=5,
    )
    return generate(cfg)


@pytest.fixture(scope="session")
def noisy_scene():
    """Eight orbiting cameras with pixel noise and uniform outliers."""
    cfg = SyntheticConfig(
        frame_count=8,
        trajectory="orbit",
        surface="sinusoid_heightfield",
        affine_alpha_range=(0.85, 1.15),
        affine_beta_range=(-0.15, 0.15),
        corr_noise_px=1.0,
        outlier_fraction=0.1,
        seed=7,
        pair_window=3,
    )
    return generate(cfg)
