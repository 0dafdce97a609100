"""
Scene data model: Gaussian primitives, cameras, view sets and their file formats.

Conventions:
    - Quaternions are stored scalar-first (w, x, y, z) and kept unit length.
    - Cameras are pinhole, world-to-camera, right-handed with x right, y down,
      z forward (the optical axis). Pixel (row, col) has image coordinates
      (u, v) = (col, row); the principal point (cx, cy) is in the same units.
    - Scene JSON stores post-activation values (opacity in [0, 1], positive
      scales, RGB in [0, 1]). The 3DGS PLY convention stores pre-activation
      values and is converted on import/export.

Usage:
    from freefix.scene import load_scene, save_scene, import_ply_3dgs

    scene = import_ply_3dgs("point_cloud.ply")
    save_scene(scene, "scene.json")
"""

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import TYPE_CHECKING, List, Optional, Sequence, Tuple, Union

import numpy as np
from plyfile import PlyData, PlyElement
from pydantic import BaseModel, ConfigDict, ValidationError
from scipy.spatial.transform import Rotation

from .errors import InvariantError, SceneFormatError
from .images import AttributeImage, read_pfm, write_pfm

if TYPE_CHECKING:
    from .confidence import FisherAccumulator

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

# Zeroth-order real spherical harmonic
SH_C0 = 0.28209479177387814

VIEW_KINDS = ("training", "extrapolated", "fixed")


# ============================================================================
# QUATERNIONS
# ============================================================================

def normalize_quaternions(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    norms = np.linalg.norm(q, axis=-1, keepdims=True)
    return q / norms


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Rotation matrices for (..., 4) unit quaternions (w, x, y, z)."""
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def rotmat_to_quat(R: np.ndarray) -> np.ndarray:
    xyzw = Rotation.from_matrix(R).as_quat()
    q = np.array([xyzw[3], xyzw[0], xyzw[1], xyzw[2]])
    return q if q[0] >= 0 else -q


# ============================================================================
# GAUSSIANS
# ============================================================================

@dataclass(frozen=True)
class GaussianPrimitive:
    mu: Tuple[float, float, float]
    q: Tuple[float, float, float, float]
    s: Tuple[float, float, float]
    eta: float
    rgb: Tuple[float, float, float]


@dataclass(frozen=True)
class SceneMeta:
    name: str = "scene"
    unit_scale: float = 1.0
    seed: Optional[int] = None

    def to_dict(self) -> dict:
        return {"name": self.name, "unit_scale": self.unit_scale, "seed": self.seed}


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class GaussianScene:
    """
    Ordered collection of Gaussian primitives, stored column-wise.

    Arrays are read-only; every edit constructs a new scene. Quaternions are
    renormalized on construction, and non-finite or out-of-range fields raise
    InvariantError naming the first offending primitive.
    """

    mu: np.ndarray
    q: np.ndarray
    s: np.ndarray
    eta: np.ndarray
    rgb: np.ndarray
    meta: SceneMeta = field(default_factory=SceneMeta)
    fisher: Optional["FisherAccumulator"] = None

    def __post_init__(self):
        n = len(np.asarray(self.eta).reshape(-1))
        arrays = {
            "mu": np.asarray(self.mu, dtype=np.float64).reshape(n, 3),
            "q": np.asarray(self.q, dtype=np.float64).reshape(n, 4),
            "s": np.asarray(self.s, dtype=np.float64).reshape(n, 3),
            "eta": np.asarray(self.eta, dtype=np.float64).reshape(n),
            "rgb": np.asarray(self.rgb, dtype=np.float64).reshape(n, 3),
        }
        for name, arr in arrays.items():
            bad = ~np.isfinite(arr).reshape(n, -1).all(axis=1)
            if bad.any():
                idx = int(np.argmax(bad))
                raise InvariantError(f"primitive {idx}: non-finite {name}", index=idx, field=name)

        qn = np.linalg.norm(arrays["q"], axis=1)
        if (qn < 1e-12).any():
            idx = int(np.argmax(qn < 1e-12))
            raise InvariantError(f"primitive {idx}: zero-length quaternion", index=idx, field="q")
        arrays["q"] = arrays["q"] / qn[:, None]

        checks = (
            ("s", (arrays["s"] <= 0).any(axis=1), "scale components must be > 0"),
            ("eta", (arrays["eta"] < 0) | (arrays["eta"] > 1), "opacity must lie in [0, 1]"),
            ("rgb", ((arrays["rgb"] < 0) | (arrays["rgb"] > 1)).any(axis=1), "rgb must lie in [0, 1]"),
        )
        for name, bad, what in checks:
            if bad.any():
                idx = int(np.argmax(bad))
                raise InvariantError(f"primitive {idx}: {what}", index=idx, field=name)

        if self.fisher is not None and len(self.fisher) != n:
            raise InvariantError(
                f"fisher accumulator has {len(self.fisher)} entries for {n} primitives", field="fisher"
            )
        for name, arr in arrays.items():
            object.__setattr__(self, name, _readonly(arr))

    # ------------------------------------------------------------------
    # construction helpers
    # ------------------------------------------------------------------

    @classmethod
    def empty(cls, meta: Optional[SceneMeta] = None) -> "GaussianScene":
        return cls(np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 3)), np.zeros(0), np.zeros((0, 3)),
                   meta=meta or SceneMeta())

    @classmethod
    def from_primitives(cls, primitives: Sequence[GaussianPrimitive],
                        meta: Optional[SceneMeta] = None) -> "GaussianScene":
        if not primitives:
            return cls.empty(meta)
        return cls(
            mu=[p.mu for p in primitives],
            q=[p.q for p in primitives],
            s=[p.s for p in primitives],
            eta=[p.eta for p in primitives],
            rgb=[p.rgb for p in primitives],
            meta=meta or SceneMeta(),
        )

    def __len__(self) -> int:
        return self.eta.shape[0]

    @property
    def primitives(self) -> List[GaussianPrimitive]:
        return [self.primitive(i) for i in range(len(self))]

    def primitive(self, i: int) -> GaussianPrimitive:
        return GaussianPrimitive(
            mu=tuple(self.mu[i]), q=tuple(self.q[i]), s=tuple(self.s[i]),
            eta=float(self.eta[i]), rgb=tuple(self.rgb[i]),
        )

    def replace(self, **changes) -> "GaussianScene":
        """New scene with some arrays swapped; the Fisher accumulator is dropped unless passed."""
        changes.setdefault("fisher", None)
        return replace(self, **changes)

    def with_fisher(self, fisher: Optional["FisherAccumulator"]) -> "GaussianScene":
        return replace(self, fisher=fisher)

    def concat(self, other: "GaussianScene") -> "GaussianScene":
        """Append ``other``; a Fisher accumulator on self is kept with zero information for the new primitives."""
        fisher = self.fisher.extended(len(other)) if self.fisher is not None and other.fisher is None else None
        return GaussianScene(
            mu=np.concatenate([self.mu, other.mu]),
            q=np.concatenate([self.q, other.q]),
            s=np.concatenate([self.s, other.s]),
            eta=np.concatenate([self.eta, other.eta]),
            rgb=np.concatenate([self.rgb, other.rgb]),
            fisher=fisher,
            meta=self.meta,
        )

    def take(self, order: Sequence[int]) -> "GaussianScene":
        order = np.asarray(order, dtype=int)
        return GaussianScene(self.mu[order], self.q[order], self.s[order], self.eta[order], self.rgb[order],
                             meta=self.meta)

    def extent(self) -> float:
        """Bounding-box diagonal of the primitive centers (1.0 for degenerate scenes)."""
        if len(self) < 2:
            return 1.0
        diag = float(np.linalg.norm(self.mu.max(axis=0) - self.mu.min(axis=0)))
        return diag if diag > 0 else 1.0

    def fields_equal(self, other: "GaussianScene", atol: float = 0.0) -> bool:
        if len(self) != len(other):
            return False
        return all(
            np.allclose(getattr(self, k), getattr(other, k), rtol=0.0, atol=atol)
            for k in ("mu", "q", "s", "eta", "rgb")
        )


# ============================================================================
# CAMERAS
# ============================================================================

@dataclass(frozen=True)
class CameraView:
    """Pinhole camera with a world-to-camera pose."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: Tuple[float, float, float, float] = (1.0, 0.0, 0.0, 0.0)
    translation: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    near: float = 0.01
    far: float = 100.0
    name: str = ""

    def __post_init__(self):
        values = [self.fx, self.fy, self.cx, self.cy, self.near, self.far, *self.rotation, *self.translation]
        if not all(np.isfinite(values)):
            raise InvariantError(f"camera {self.name!r}: non-finite field")
        if self.width < 8 or self.height < 8:
            raise InvariantError(f"camera {self.name!r}: image must be at least 8x8", field="width")
        if self.fx <= 0 or self.fy <= 0:
            raise InvariantError(f"camera {self.name!r}: focal lengths must be > 0", field="fx")
        if not 0 < self.near < self.far:
            raise InvariantError(f"camera {self.name!r}: need 0 < near < far", field="near")
        q = np.asarray(self.rotation, dtype=np.float64)
        norm = np.linalg.norm(q)
        if norm < 1e-12:
            raise InvariantError(f"camera {self.name!r}: zero rotation quaternion", field="q")
        object.__setattr__(self, "rotation", tuple(float(v) for v in q / norm))
        object.__setattr__(self, "translation", tuple(float(v) for v in self.translation))
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))

    @property
    def R(self) -> np.ndarray:
        return quat_to_rotmat(np.asarray(self.rotation))

    @property
    def t(self) -> np.ndarray:
        return np.asarray(self.translation)

    @property
    def center(self) -> np.ndarray:
        return -self.R.T @ self.t

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.R.T + self.t

    @classmethod
    def look_at(cls, eye: Sequence[float], target: Sequence[float], width: int, height: int,
                fov_x_deg: float = 60.0, down: Sequence[float] = (0.0, 1.0, 0.0),
                near: float = 0.01, far: float = 100.0, name: str = "") -> "CameraView":
        """Camera at ``eye`` whose optical axis passes through ``target``."""
        eye = np.asarray(eye, dtype=np.float64)
        z_c = np.asarray(target, dtype=np.float64) - eye
        z_c /= np.linalg.norm(z_c)
        x_c = np.cross(np.asarray(down, dtype=np.float64), z_c)
        x_c /= np.linalg.norm(x_c)
        y_c = np.cross(z_c, x_c)
        R = np.stack([x_c, y_c, z_c])
        fx = 0.5 * width / np.tan(np.radians(fov_x_deg) / 2.0)
        return cls(
            fx=fx, fy=fx, cx=width / 2.0, cy=height / 2.0, width=width, height=height,
            rotation=tuple(rotmat_to_quat(R)), translation=tuple(-R @ eye),
            near=near, far=far, name=name,
        )


@dataclass(frozen=True)
class ViewSet:
    """Ordered cameras with optional parallel images."""

    views: Tuple[CameraView, ...]
    images: Optional[Tuple[AttributeImage, ...]] = None
    kind: str = "training"

    def __post_init__(self):
        object.__setattr__(self, "views", tuple(self.views))
        if self.kind not in VIEW_KINDS:
            raise InvariantError(f"unknown view-set kind {self.kind!r}", field="kind")
        if self.images is not None:
            object.__setattr__(self, "images", tuple(self.images))
            if len(self.images) != len(self.views):
                raise InvariantError(
                    f"{len(self.images)} images for {len(self.views)} views", field="images"
                )

    def __len__(self) -> int:
        return len(self.views)

    def __iter__(self):
        return iter(self.views)

    def __getitem__(self, i: int) -> CameraView:
        return self.views[i]

    def camera_centers(self) -> np.ndarray:
        if not self.views:
            return np.zeros((0, 3))
        return np.stack([v.center for v in self.views])

    def with_images(self, images: Sequence[AttributeImage]) -> "ViewSet":
        return ViewSet(self.views, tuple(images), self.kind)


# ============================================================================
# FILE SCHEMAS
# ============================================================================

class _GaussianRecord(BaseModel):
    model_config = ConfigDict(extra="forbid")

    mu: Tuple[float, float, float]
    q: Tuple[float, float, float, float]
    s: Tuple[float, float, float]
    eta: float
    rgb: Tuple[float, float, float]


class _SceneMetaRecord(BaseModel):
    model_config = ConfigDict(extra="allow")

    name: str = "scene"
    unit_scale: float = 1.0
    seed: Optional[int] = None


class _SceneFile(BaseModel):
    model_config = ConfigDict(extra="forbid")

    meta: _SceneMetaRecord = _SceneMetaRecord()
    gaussians: List[_GaussianRecord]


class _CameraRecord(BaseModel):
    model_config = ConfigDict(extra="forbid")

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    q: Tuple[float, float, float, float]
    t: Tuple[float, float, float]
    near: float
    far: float
    name: str = ""


class _CameraFile(BaseModel):
    model_config = ConfigDict(extra="forbid")

    views: List[_CameraRecord]
    kind: str = "training"
    images: Optional[List[str]] = None


def read_json(path: Path) -> object:
    try:
        text = path.read_text()
    except OSError as e:
        raise SceneFormatError(f"cannot read {path}: {e}", path=str(path))
    try:
        return json.loads(text)
    except json.JSONDecodeError as e:
        raise SceneFormatError(f"invalid JSON: {e.msg}", path=str(path), line=e.lineno)


def _schema_error(e: ValidationError, path: Path) -> SceneFormatError:
    first = e.errors()[0]
    loc = ".".join(str(p) for p in first["loc"])
    return SceneFormatError(f"schema violation at {loc}: {first['msg']}", path=str(path), field=loc)


# ============================================================================
# SCENE I/O
# ============================================================================

def load_scene(path: PathLike) -> GaussianScene:
    """Load a scene JSON file; quaternions are renormalized, invariants enforced."""
    path = Path(path)
    raw = read_json(path)
    try:
        doc = _SceneFile.model_validate(raw)
    except ValidationError as e:
        raise _schema_error(e, path)

    meta = SceneMeta(name=doc.meta.name, unit_scale=doc.meta.unit_scale, seed=doc.meta.seed)
    if not doc.gaussians:
        return GaussianScene.empty(meta)
    scene = GaussianScene(
        mu=[g.mu for g in doc.gaussians],
        q=[g.q for g in doc.gaussians],
        s=[g.s for g in doc.gaussians],
        eta=[g.eta for g in doc.gaussians],
        rgb=[g.rgb for g in doc.gaussians],
        meta=meta,
    )
    logger.debug("loaded %d gaussians from %s", len(scene), path)
    return scene


def scene_to_dict(scene: GaussianScene) -> dict:
    gaussians = []
    for i in range(len(scene)):
        gaussians.append({
            "mu": [float(v) for v in scene.mu[i]],
            "q": [float(v) for v in scene.q[i]],
            "s": [float(v) for v in scene.s[i]],
            "eta": float(scene.eta[i]),
            "rgb": [float(v) for v in scene.rgb[i]],
        })
    return {"meta": scene.meta.to_dict(), "gaussians": gaussians}


def save_scene(scene: GaussianScene, path: PathLike) -> Path:
    path = Path(path)
    path.write_text(json.dumps(scene_to_dict(scene), indent=1) + "\n")
    return path


# ============================================================================
# CAMERA I/O
# ============================================================================

def load_views(path: PathLike) -> ViewSet:
    """Load a camera JSON file; images listed in it are read from PFM files beside it."""
    path = Path(path)
    raw = read_json(path)
    try:
        doc = _CameraFile.model_validate(raw)
    except ValidationError as e:
        raise _schema_error(e, path)

    views = []
    for idx, rec in enumerate(doc.views):
        try:
            views.append(CameraView(
                fx=rec.fx, fy=rec.fy, cx=rec.cx, cy=rec.cy, width=rec.width, height=rec.height,
                rotation=rec.q, translation=rec.t, near=rec.near, far=rec.far, name=rec.name,
            ))
        except InvariantError as e:
            raise InvariantError(f"view {idx}: {e.message}", index=idx, field=e.context.get("field"))

    images = None
    if doc.images is not None:
        images = tuple(read_pfm(path.parent / rel) for rel in doc.images)
    return ViewSet(tuple(views), images, doc.kind)


def save_views(views: ViewSet, path: PathLike) -> Path:
    path = Path(path)
    records = []
    for v in views.views:
        records.append({
            "fx": v.fx, "fy": v.fy, "cx": v.cx, "cy": v.cy,
            "width": v.width, "height": v.height,
            "q": list(v.rotation), "t": list(v.translation),
            "near": v.near, "far": v.far, "name": v.name,
        })
    doc = {"views": records, "kind": views.kind}
    if views.images is not None:
        image_dir = path.parent / f"{path.stem}_images"
        image_dir.mkdir(parents=True, exist_ok=True)
        rels = []
        for k, img in enumerate(views.images):
            write_pfm(img, image_dir / f"view_{k:03d}.pfm")
            rels.append(f"{image_dir.name}/view_{k:03d}.pfm")
        doc["images"] = rels
    path.write_text(json.dumps(doc, indent=1) + "\n")
    return path


# ============================================================================
# 3DGS PLY INTEROP
# ============================================================================

PLY_REQUIRED = (
    "x", "y", "z", "opacity",
    "scale_0", "scale_1", "scale_2",
    "rot_0", "rot_1", "rot_2", "rot_3",
    "f_dc_0", "f_dc_1", "f_dc_2",
)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-x))


def import_ply_3dgs(path: PathLike) -> GaussianScene:
    """
    Import a binary little-endian 3DGS PLY export.

    Opacity goes through a sigmoid, scales through exp, and color is the SH DC
    term mapped as 0.5 + SH_C0 * f_dc (clamped). Higher-order SH is ignored.
    """
    path = Path(path)
    try:
        ply = PlyData.read(str(path))
    except Exception as e:
        raise SceneFormatError(f"cannot parse PLY: {e}", path=str(path))
    if ply.text or ply.byte_order != "<":
        raise SceneFormatError("unsupported PLY encoding (need binary_little_endian)", path=str(path))
    if "vertex" not in ply:
        raise SceneFormatError("PLY has no vertex element", path=str(path), field="vertex")

    vertex = ply["vertex"].data
    names = vertex.dtype.names
    for prop in PLY_REQUIRED:
        if prop not in names:
            raise SceneFormatError(f"missing vertex property {prop!r}", path=str(path), field=prop)

    def col(name):
        return np.asarray(vertex[name], dtype=np.float64)

    mu = np.stack([col("x"), col("y"), col("z")], axis=1)
    s = np.exp(np.stack([col(f"scale_{k}") for k in range(3)], axis=1))
    q = np.stack([col(f"rot_{k}") for k in range(4)], axis=1)
    eta = _sigmoid(col("opacity"))
    rgb = np.clip(0.5 + SH_C0 * np.stack([col(f"f_dc_{k}") for k in range(3)], axis=1), 0.0, 1.0)

    logger.info("imported %d gaussians from %s", len(eta), path)
    return GaussianScene(mu=mu, q=q, s=s, eta=eta, rgb=rgb, meta=SceneMeta(name=path.stem))


def export_ply_3dgs(scene: GaussianScene, path: PathLike) -> Path:
    """Write the scene in the 3DGS PLY convention (inverse activations, DC-only SH)."""
    path = Path(path)
    eta = np.clip(scene.eta, 1e-7, 1.0 - 1e-7)
    columns = {
        "x": scene.mu[:, 0], "y": scene.mu[:, 1], "z": scene.mu[:, 2],
        "nx": np.zeros(len(scene)), "ny": np.zeros(len(scene)), "nz": np.zeros(len(scene)),
    }
    for k in range(3):
        columns[f"f_dc_{k}"] = (scene.rgb[:, k] - 0.5) / SH_C0
    columns["opacity"] = np.log(eta / (1.0 - eta))
    for k in range(3):
        columns[f"scale_{k}"] = np.log(scene.s[:, k])
    for k in range(4):
        columns[f"rot_{k}"] = scene.q[:, k]

    elements = np.empty(len(scene), dtype=[(name, "<f4") for name in columns])
    for name, values in columns.items():
        elements[name] = values
    PlyData([PlyElement.describe(elements, "vertex")], byte_order="<").write(str(path))
    return path
