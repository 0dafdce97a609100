"""Shared fixtures: seeded tiny scenes, cameras and quiet logging."""

import sys
from pathlib import Path

import numpy as np
import pytest

# Add repository root to path so the package and shared_config import without installation
sys.path.insert(0, str(Path(__file__).parent.parent))

import shared_config  # noqa: E402
from freefix.config import RasterSettings, SyntheticSpec  # noqa: E402
from freefix.scene import CameraView, GaussianScene, ViewSet  # noqa: E402
from freefix.seeding import make_rng  # noqa: E402

# No truncation, no early termination: the renderer is smooth in every parameter
EXACT = RasterSettings(cutoff_sigma=None, t_min=0.0)


@pytest.fixture(autouse=True)
def quiet_progress(monkeypatch):
    monkeypatch.setattr(shared_config.Config, "VERBOSE", False)


def random_scene(seed: int, n: int = 10) -> GaussianScene:
    """Small cluster around the origin, opacities capped at 0.9."""
    rng = make_rng(seed, 17)
    return GaussianScene(
        mu=np.column_stack([rng.uniform(-0.6, 0.6, n), rng.uniform(-0.6, 0.6, n), rng.uniform(-0.3, 0.3, n)]),
        q=rng.standard_normal((n, 4)),
        s=rng.uniform(0.08, 0.3, (n, 3)),
        eta=rng.uniform(0.2, 0.9, n),
        rgb=rng.uniform(0.05, 0.95, (n, 3)),
    )


def front_view(size: int = 32, eye=(0.0, 0.0, -3.0), name: str = "front") -> CameraView:
    return CameraView.look_at(eye, (0.0, 0.0, 0.0), size, size, fov_x_deg=50.0, name=name)


def ring_views(count: int, size: int = 32, radius: float = 3.0, spread: float = 0.5) -> ViewSet:
    angles = np.linspace(-spread, spread, count) if count > 1 else [0.0]
    views = [
        CameraView.look_at((radius * np.sin(a), 0.0, -radius * np.cos(a)), (0.0, 0.0, 0.0), size, size,
                           fov_x_deg=50.0, name=f"ring_{k}")
        for k, a in enumerate(angles)
    ]
    return ViewSet(views)


@pytest.fixture
def scene():
    return random_scene(0)


@pytest.fixture
def view():
    return front_view()


@pytest.fixture
def small_spec():
    """Synthetic scene small enough for quick end-to-end runs."""
    return SyntheticSpec(kind="textured-wall", seed=3, n_primitives=64, n_train=4, n_extrapolated=2,
                         width=24, height=24)
