"""
Seeded synthetic scenes, camera paths and floater corruption.

Every scene sits around the world origin and is viewed from z < 0 looking
toward +z (camera y points down). Training cameras lie on a short arc of
radius 4; extrapolated cameras continue away from it along one of three
paths and keep at least ``d_min`` from every training center:

    arc        continue the training arc (translation plus yaw)
    translate  slide sideways with optical axes parallel to the arc center's
    rotate     orbit upward over the scene (pitch)

Usage:
    from freefix.synthetic import make_synthetic_scene, corrupt_scene

    scene, train, extrapolated = make_synthetic_scene(SyntheticSpec(kind="textured-wall", seed=7))
    corrupted, floaters = corrupt_scene(scene, train, extrapolated, CorruptionSpec(floaters=5))
"""

import logging
from typing import Callable, Dict, List, Tuple

import numpy as np

from .config import CorruptionSpec, RasterSettings, SyntheticSpec
from .errors import ConfigError, PlacementError
from .render import DEFAULT_SETTINGS, project_arrays, render_color
from .scene import CameraView, GaussianScene, SceneMeta, ViewSet, rotmat_to_quat
from .seeding import make_rng

logger = logging.getLogger(__name__)

RIG_RADIUS = 4.0
TRAIN_HALF_ANGLE = np.radians(7.0)
PATH_SPACING = 0.06
NEAR, FAR = 0.1, 100.0


# ============================================================================
# SCENE KINDS
# ============================================================================

def _procedural_color(points: np.ndarray) -> np.ndarray:
    x, y, z = points[:, 0], points[:, 1], points[:, 2]
    rgb = np.stack([
        0.5 + 0.4 * np.sin(3.1 * x + 0.7 * z) * np.cos(2.3 * y),
        0.5 + 0.4 * np.cos(2.7 * x - 1.9 * y),
        0.5 + 0.4 * np.sin(1.7 * y + 2.9 * z + 1.0) * np.sin(2.2 * x + 0.4),
    ], axis=1)
    return np.clip(rgb, 0.0, 1.0)


def _grid(n: int, rng: np.random.Generator, lo: float = -2.0, hi: float = 2.0) -> Tuple[np.ndarray, float]:
    side = max(1, int(np.ceil(np.sqrt(n))))
    spacing = (hi - lo) / side
    u, v = np.meshgrid((np.arange(side) + 0.5) * spacing + lo, (np.arange(side) + 0.5) * spacing + lo)
    pts = np.stack([u.ravel(), v.ravel()], axis=1)[:n]
    pts = pts + rng.uniform(-0.2, 0.2, size=pts.shape) * spacing
    return pts, spacing


def _flat_patches(plane_pts: np.ndarray, spacing: float, rotation: np.ndarray, offset: np.ndarray,
                  rng: np.random.Generator) -> Dict[str, np.ndarray]:
    """Gaussians on a plane: plane (a, b) coordinates mapped by ``rotation`` columns plus ``offset``."""
    n = len(plane_pts)
    mu = plane_pts[:, 0:1] * rotation[:, 0] + plane_pts[:, 1:2] * rotation[:, 1] + offset
    s = np.column_stack([
        spacing * rng.uniform(0.55, 0.75, n),
        spacing * rng.uniform(0.55, 0.75, n),
        np.full(n, 0.01),
    ])
    q = np.tile(rotmat_to_quat(rotation), (n, 1))
    eta = rng.uniform(0.85, 0.99, n)
    return {"mu": mu, "q": q, "s": s, "eta": eta, "rgb": _procedural_color(mu)}


def _textured_wall(n: int, rng: np.random.Generator) -> Dict[str, np.ndarray]:
    pts, spacing = _grid(n, rng)
    return _flat_patches(pts, spacing, np.eye(3), np.zeros(3), rng)


def _box_room(n: int, rng: np.random.Generator) -> Dict[str, np.ndarray]:
    # back wall, floor, ceiling, left and right walls of an open-front box
    faces = [
        (np.eye(3), np.array([0.0, 0.0, 2.0])),
        (np.array([[1.0, 0, 0], [0, 0, -1.0], [0, 1.0, 0]]), np.array([0.0, 1.5, 0.5])),
        (np.array([[1.0, 0, 0], [0, 0, 1.0], [0, -1.0, 0]]), np.array([0.0, -1.5, 0.5])),
        (np.array([[0, 0, 1.0], [0, 1.0, 0], [-1.0, 0, 0]]), np.array([-2.0, 0.0, 0.5])),
        (np.array([[0, 0, -1.0], [0, 1.0, 0], [1.0, 0, 0]]), np.array([2.0, 0.0, 0.5])),
    ]
    counts = [n // len(faces) + (1 if i < n % len(faces) else 0) for i in range(len(faces))]
    parts = []
    for (rotation, offset), count in zip(faces, counts):
        if count == 0:
            continue
        pts, spacing = _grid(count, rng, -1.5, 1.5)
        parts.append(_flat_patches(pts, spacing, rotation, offset, rng))
    if not parts:
        return _empty_fields()
    return {k: np.concatenate([p[k] for p in parts]) for k in parts[0]}


def _random_blobs(n: int, rng: np.random.Generator) -> Dict[str, np.ndarray]:
    direction = rng.standard_normal((n, 3))
    direction /= np.maximum(np.linalg.norm(direction, axis=1, keepdims=True), 1e-12)
    mu = direction * 1.5 * rng.uniform(0.0, 1.0, (n, 1)) ** (1.0 / 3.0)
    q = rng.standard_normal((n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    return {
        "mu": mu,
        "q": q,
        "s": rng.uniform(0.05, 0.25, (n, 3)),
        "eta": rng.uniform(0.3, 0.95, n),
        "rgb": rng.uniform(0.05, 0.95, (n, 3)),
    }


def _empty_fields() -> Dict[str, np.ndarray]:
    return {"mu": np.zeros((0, 3)), "q": np.zeros((0, 4)), "s": np.zeros((0, 3)),
            "eta": np.zeros(0), "rgb": np.zeros((0, 3))}


SCENE_KINDS: Dict[str, Callable[[int, np.random.Generator], Dict[str, np.ndarray]]] = {
    "textured-wall": _textured_wall,
    "box-room": _box_room,
    "random-blobs": _random_blobs,
}


# ============================================================================
# CAMERA PATHS
# ============================================================================

def _arc_eye(angle: float, elevation: float = 0.0) -> np.ndarray:
    return RIG_RADIUS * np.array([np.sin(angle) * np.cos(elevation), -np.sin(elevation),
                                  -np.cos(angle) * np.cos(elevation)])


def _path_pose(mode: str, u: float) -> Tuple[np.ndarray, np.ndarray]:
    """(eye, target) at path parameter u >= 0, starting at the end of the training arc."""
    if mode == "arc":
        return _arc_eye(TRAIN_HALF_ANGLE + u), np.zeros(3)
    if mode == "translate":
        eye = _arc_eye(TRAIN_HALF_ANGLE) + np.array([RIG_RADIUS * u, 0.0, 0.0])
        return eye, eye + np.array([0.0, 0.0, RIG_RADIUS])
    if mode == "rotate":
        return _arc_eye(TRAIN_HALF_ANGLE, u), np.zeros(3)
    raise ConfigError(f"unknown extrapolation mode {mode!r}", locations=["synthetic.extrapolation"])


def training_arc(spec: SyntheticSpec) -> List[CameraView]:
    angles = np.linspace(-TRAIN_HALF_ANGLE, TRAIN_HALF_ANGLE, spec.n_train) if spec.n_train > 1 else [0.0]
    return [
        CameraView.look_at(_arc_eye(a), np.zeros(3), spec.width, spec.height, spec.fov_deg,
                           near=NEAR, far=FAR, name=f"train_{k:03d}")
        for k, a in enumerate(angles)
    ]


def extrapolated_path(spec: SyntheticSpec, train_centers: np.ndarray) -> List[CameraView]:
    """Cameras along the extrapolation path, the first one just past distance d_min."""
    def clearance(u: float) -> float:
        eye, _ = _path_pose(spec.extrapolation, u)
        return float(np.min(np.linalg.norm(train_centers - eye, axis=1)))

    u0 = 0.0
    while clearance(u0) < spec.d_min:
        u0 += 0.005
        if u0 > np.pi / 2:
            raise ConfigError(f"d_min={spec.d_min} unreachable on the {spec.extrapolation} path",
                              locations=["synthetic.d_min"])
    views = []
    for k in range(spec.n_extrapolated):
        eye, target = _path_pose(spec.extrapolation, u0 + k * PATH_SPACING)
        views.append(CameraView.look_at(eye, target, spec.width, spec.height, spec.fov_deg,
                                        near=NEAR, far=FAR, name=f"extrap_{k:03d}"))
    return views


# ============================================================================
# ENTRY POINTS
# ============================================================================

def make_synthetic_scene(spec: SyntheticSpec, settings: RasterSettings = DEFAULT_SETTINGS
                         ) -> Tuple[GaussianScene, ViewSet, ViewSet]:
    """
    Ground-truth scene, training views and an extrapolated trajectory.

    Returns:
        Tuple[GaussianScene, ViewSet, ViewSet]: scene, training set and
        extrapolated set, both with ground-truth renders when
        ``spec.render_images`` is set
    """
    if spec.kind not in SCENE_KINDS:
        raise ConfigError(f"unknown synthetic scene kind {spec.kind!r}; expected one of {sorted(SCENE_KINDS)}",
                          locations=["synthetic.kind"])
    rng = make_rng(spec.seed)
    fields = SCENE_KINDS[spec.kind](spec.n_primitives, rng) if spec.n_primitives else _empty_fields()
    scene = GaussianScene(meta=SceneMeta(name=spec.kind, unit_scale=1.0, seed=spec.seed), **fields)

    train_views = training_arc(spec)
    extrap_views = extrapolated_path(spec, np.stack([v.center for v in train_views]))
    train = ViewSet(train_views, kind="training")
    extrapolated = ViewSet(extrap_views, kind="extrapolated")
    if spec.render_images:
        train = train.with_images([render_color(v, scene, settings) for v in train_views])
        extrapolated = extrapolated.with_images([render_color(v, scene, settings) for v in extrap_views])
    logger.info("synthesized %s: %d primitives, %d training and %d extrapolated views",
                spec.kind, len(scene), len(train), len(extrapolated))
    return scene, train, extrapolated


def _unseen_by(point_scene: GaussianScene, views: ViewSet, settings: RasterSettings) -> bool:
    return all(len(project_arrays(v, point_scene, settings)) == 0 for v in views)


def corrupt_scene(scene: GaussianScene, train: ViewSet, extrapolated: ViewSet, spec: CorruptionSpec,
                  settings: RasterSettings = DEFAULT_SETTINGS) -> Tuple[GaussianScene, List[int]]:
    """
    Append floaters that show up in extrapolated views but in no training view.

    Each floater sits at a random pixel of an extrapolated view (round robin)
    at a random depth; candidates whose truncated footprint reaches any
    training image are rejected.

    Returns:
        Tuple[GaussianScene, List[int]]: the corrupted scene and the indices of the floaters
    """
    if spec.floaters == 0:
        return scene, []
    if len(extrapolated) == 0:
        raise PlacementError("floaters need at least one extrapolated view", placed=0, requested=spec.floaters)

    rng = make_rng(spec.seed, 0xF10A7)
    placed: List[GaussianScene] = []
    for k in range(spec.floaters):
        view = extrapolated[k % len(extrapolated)]
        for _attempt in range(spec.max_retries):
            u = rng.uniform(0.1, 0.9) * view.width
            v = rng.uniform(0.1, 0.9) * view.height
            depth = rng.uniform(spec.depth_min, spec.depth_max)
            p_cam = np.array([(u - view.cx) / view.fx * depth, (v - view.cy) / view.fy * depth, depth])
            mu = view.R.T @ (p_cam - view.t)
            candidate = GaussianScene(
                mu=mu[None, :],
                q=np.array([[1.0, 0.0, 0.0, 0.0]]),
                s=np.full((1, 3), rng.uniform(spec.scale_min, spec.scale_max)),
                eta=np.array([rng.uniform(spec.opacity_min, spec.opacity_max)]),
                rgb=rng.uniform(0.0, 1.0, (1, 3)),
            )
            if _unseen_by(candidate, train, settings) and len(project_arrays(view, candidate, settings)) == 1:
                placed.append(candidate)
                break
        else:
            raise PlacementError(
                f"placed {len(placed)} of {spec.floaters} floaters before exhausting {spec.max_retries} retries",
                placed=len(placed), requested=spec.floaters,
            )

    corrupted = scene
    for floater in placed:
        corrupted = corrupted.concat(floater)
    indices = list(range(len(scene), len(corrupted)))
    logger.info("placed %d floaters at indices %s", len(indices), indices)
    return corrupted, indices
