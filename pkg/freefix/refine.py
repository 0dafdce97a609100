"""
3D refinement against training views and fixed (generated) images.

Generated views are supervised through a per-view affine color correction
(A_f * I + A_b) so the scene does not absorb color bias from the denoiser;
training views are supervised directly. The loss is

    (1 - lambda_s) * L1 + lambda_s * (1 - SSIM)

scaled by w_g for generated views. View sampling follows a fixed cadence: the
current view is revisited every 3 steps in the first third of a stage, every 5
in the second and every 8 in the last; other steps draw a previously fixed
view with probability p_fixed and a training view otherwise.
Learning rates decay log-linearly over a stage down to lr_final_ratio times
their configured value (constant by default).

Usage:
    from freefix.refine import FixedViewSet, refine_3d

    fixed = FixedViewSet()
    entry = fixed.append(view, fixed_image)
    scene = refine_3d(scene, train_views, fixed, current=len(fixed) - 1, config=RefineConfig())
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Tuple, Union

import numpy as np
from tqdm import tqdm

from .config import PARAM_GROUPS, RasterSettings, RefineConfig, progress_enabled
from .errors import InvariantError, RefinementError, ShapeMismatchError
from .images import AttributeImage
from .metrics import psnr, ssim_with_grad, write_csv
from .render import DEFAULT_SETTINGS, ParamGradients, backprop, render_color
from .scene import CameraView, GaussianScene, ViewSet, normalize_quaternions
from .seeding import make_rng

logger = logging.getLogger(__name__)

ROLE_TRAIN = "train"
ROLE_FIXED = "fixed"
ROLE_CURRENT = "current"


# ============================================================================
# AFFINE COLOR
# ============================================================================

@dataclass(frozen=True)
class AffineColor:
    A_f: np.ndarray
    A_b: np.ndarray

    def __post_init__(self):
        a_f = np.array(self.A_f, dtype=np.float64).reshape(3, 3)
        a_b = np.array(self.A_b, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(a_f)) and np.all(np.isfinite(a_b))):
            raise InvariantError("affine color parameters must be finite", field="affine")
        a_f.setflags(write=False)
        a_b.setflags(write=False)
        object.__setattr__(self, "A_f", a_f)
        object.__setattr__(self, "A_b", a_b)

    @classmethod
    def identity(cls) -> "AffineColor":
        return cls(np.eye(3), np.zeros(3))

    def to_dict(self) -> dict:
        return {"A_f": self.A_f.tolist(), "A_b": self.A_b.tolist()}


def affine_apply(image: AttributeImage, aff: AffineColor) -> AttributeImage:
    """Per-pixel A_f @ rgb + A_b, unclamped."""
    if image.channels != 3:
        raise ShapeMismatchError(f"affine color needs 3 channels, got {image.channels}")
    return AttributeImage(image.data @ aff.A_f.T + aff.A_b)


# ============================================================================
# LOSS
# ============================================================================

def photometric_loss(pred: AttributeImage, target: AttributeImage,
                     lambda_s: float) -> Tuple[float, AttributeImage]:
    """
    L1/SSIM blend and its gradient with respect to ``pred``.

    Returns:
        Tuple[float, AttributeImage]: loss value and adjoint image
    """
    pred.require_same_shape(target, "target")
    diff = pred.data - target.data
    loss = (1.0 - lambda_s) * float(np.mean(np.abs(diff)))
    grad = (1.0 - lambda_s) * np.sign(diff) / diff.size
    if lambda_s > 0.0:
        value, g_ssim = ssim_with_grad(pred, target)
        loss += lambda_s * (1.0 - value)
        grad = grad - lambda_s * g_ssim
    return loss, AttributeImage(grad)


# ============================================================================
# FIXED VIEWS AND SAMPLING
# ============================================================================

@dataclass
class FixedEntry:
    view: CameraView
    image: AttributeImage
    affine: AffineColor = field(default_factory=AffineColor.identity)


class FixedViewSet:
    """Append-only (view, fixed image, affine) entries; affines persist for each entry's lifetime."""

    def __init__(self):
        self._entries: List[FixedEntry] = []

    def append(self, view: CameraView, image: AttributeImage) -> FixedEntry:
        if (image.height, image.width) != (view.height, view.width):
            raise ShapeMismatchError(f"fixed image {image.shape} does not match view {view.height}x{view.width}")
        entry = FixedEntry(view, image)
        self._entries.append(entry)
        return entry

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self) -> Iterator[FixedEntry]:
        return iter(self._entries)

    def __getitem__(self, i: int) -> FixedEntry:
        return self._entries[i]

    def set_affine(self, i: int, affine: AffineColor) -> None:
        self._entries[i].affine = affine


@dataclass(frozen=True)
class ViewChoice:
    view: CameraView
    target: AttributeImage
    role: str
    index: int

    @property
    def view_id(self) -> str:
        return self.view.name or f"{self.role}_{self.index}"


def current_period(step: int, total: int) -> int:
    """Revisit period of the current view: 3, 5 or 8 by third (boundaries floor(total/3), floor(2*total/3))."""
    if step < total // 3:
        return 3
    if step < (2 * total) // 3:
        return 5
    return 8


def sample_view(step: int, total: int, train: ViewSet, fixed: FixedViewSet, current: Optional[int],
                rng: np.random.Generator, p_fixed: float = 0.25) -> ViewChoice:
    """Pick the supervision view for one refinement step."""
    if current is not None and step % current_period(step, total) == 0:
        entry = fixed[current]
        return ViewChoice(entry.view, entry.image, ROLE_CURRENT, current)

    others = [i for i in range(len(fixed)) if i != current]
    if current is not None and not others and len(train) == 0:
        entry = fixed[current]
        return ViewChoice(entry.view, entry.image, ROLE_CURRENT, current)
    draw = rng.random()
    if others and (len(train) == 0 or draw < p_fixed):
        i = others[int(rng.integers(len(others)))]
        return ViewChoice(fixed[i].view, fixed[i].image, ROLE_FIXED, i)
    if len(train) == 0:
        raise InvariantError("nothing to sample: no training views and no fixed views", field="views")
    if train.images is None:
        raise InvariantError("training views need images for refinement", field="images")
    i = int(rng.integers(len(train)))
    return ViewChoice(train[i], train.images[i], ROLE_TRAIN, i)


# ============================================================================
# OPTIMIZER
# ============================================================================

class _AdamMoments:
    def __init__(self, shape):
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.t = 0

    def delta(self, grad: np.ndarray, lr: float, beta1: float, beta2: float, eps: float) -> np.ndarray:
        self.t += 1
        self.m = beta1 * self.m + (1.0 - beta1) * grad
        self.v = beta2 * self.v + (1.0 - beta2) * grad * grad
        m_hat = self.m / (1.0 - beta1 ** self.t)
        v_hat = self.v / (1.0 - beta2 ** self.t)
        return -lr * m_hat / (np.sqrt(v_hat) + eps)


class SceneOptimizer:
    """Adam over the five Gaussian parameter groups plus one affine per fixed entry."""

    def __init__(self, scene: GaussianScene, config: RefineConfig):
        self.config = config
        self.meta = scene.meta
        self.params: Dict[str, np.ndarray] = {g: np.array(getattr(scene, g)) for g in PARAM_GROUPS}
        self.rates = config.learning_rates(scene.extent())
        self.lr_scale = 1.0
        self._moments = {g: _AdamMoments(self.params[g].shape) for g in PARAM_GROUPS}
        self.affines: Dict[int, AffineColor] = {}
        self._affine_moments: Dict[int, Tuple[_AdamMoments, _AdamMoments]] = {}

    def scene(self) -> GaussianScene:
        return GaussianScene(meta=self.meta, **self.params)

    def affine(self, index: int) -> AffineColor:
        return self.affines.get(index, AffineColor.identity())

    def apply(self, grads: ParamGradients) -> None:
        c = self.config
        for group in PARAM_GROUPS:
            if group in c.frozen_groups:
                continue
            self.params[group] = self.params[group] + self._moments[group].delta(
                getattr(grads, group), self.rates[group] * self.lr_scale, c.beta1, c.beta2, c.adam_eps)
        self._clamp()

    def apply_affine(self, index: int, g_af: np.ndarray, g_ab: np.ndarray) -> None:
        c = self.config
        if "affine" in c.frozen_groups:
            return
        if index not in self._affine_moments:
            self._affine_moments[index] = (_AdamMoments((3, 3)), _AdamMoments(3))
        m_f, m_b = self._affine_moments[index]
        aff = self.affine(index)
        lr = self.rates["affine"] * self.lr_scale
        self.affines[index] = AffineColor(
            aff.A_f + m_f.delta(g_af, lr, c.beta1, c.beta2, c.adam_eps),
            aff.A_b + m_b.delta(g_ab, lr, c.beta1, c.beta2, c.adam_eps),
        )

    def _clamp(self) -> None:
        self.params["q"] = normalize_quaternions(self.params["q"]) if len(self.params["q"]) else self.params["q"]
        self.params["s"] = np.maximum(self.params["s"], self.config.min_scale)
        self.params["eta"] = np.clip(self.params["eta"], 0.0, 1.0)
        self.params["rgb"] = np.clip(self.params["rgb"], 0.0, 1.0)


@dataclass
class RefineStepReport:
    step: int
    role: str
    view_id: str
    loss: float
    psnr: float
    grad_norms: Dict[str, float] = field(default_factory=dict)

    def row(self) -> dict:
        return {"step": self.step, "role": self.role, "view": self.view_id, "loss": self.loss, "psnr": self.psnr}


def refine_step(optimizer: SceneOptimizer, choice: ViewChoice, config: RefineConfig,
                settings: RasterSettings = DEFAULT_SETTINGS, step: int = 0) -> RefineStepReport:
    """
    One optimization step on one view.

    Raises RefinementError without touching the optimizer state when the loss
    or any gradient is non-finite.
    """
    scene = optimizer.scene()
    render = render_color(choice.view, scene, settings)
    use_affine = config.use_affine and choice.role in (ROLE_FIXED, ROLE_CURRENT)
    affine = optimizer.affine(choice.index) if use_affine else None
    pred = affine_apply(render, affine) if affine is not None else render

    loss, adjoint = photometric_loss(pred, choice.target, config.lambda_s)
    weight = 1.0 if choice.role == ROLE_TRAIN else config.w_g
    loss *= weight
    if not np.isfinite(loss):
        raise RefinementError(f"non-finite loss at step {step} on {choice.role} view {choice.view_id}",
                              step=step, role=choice.role, view=choice.view_id)

    g_pred = adjoint.data * weight
    if affine is not None:
        flat_g = g_pred.reshape(-1, 3)
        flat_p = render.data.reshape(-1, 3)
        g_af = flat_g.T @ flat_p
        g_ab = flat_g.sum(axis=0)
        g_render = (flat_g @ affine.A_f).reshape(g_pred.shape)
    else:
        g_render = g_pred

    grads = backprop(choice.view, scene, AttributeImage(g_render), settings)
    if not grads.is_finite():
        raise RefinementError(f"non-finite gradient at step {step} on {choice.role} view {choice.view_id}",
                              step=step, role=choice.role, view=choice.view_id, norms=grads.norms())

    optimizer.apply(grads)
    if affine is not None:
        optimizer.apply_affine(choice.index, g_af, g_ab)
    return RefineStepReport(step, choice.role, choice.view_id, loss, psnr(pred.clamped(), choice.target),
                            grads.norms())


# ============================================================================
# REFINEMENT LOOP
# ============================================================================

class RefineSession:
    """One stage of refinement: ``config.steps`` sampled steps on a private copy of the scene."""

    def __init__(self, scene: GaussianScene, train: ViewSet, fixed: FixedViewSet, current: Optional[int],
                 config: RefineConfig, settings: RasterSettings = DEFAULT_SETTINGS, salt: int = 0,
                 steps: Optional[int] = None):
        if current is not None and not 0 <= current < len(fixed):
            raise InvariantError(f"current entry {current} not in fixed set of {len(fixed)}", field="current")
        self.scene = scene
        self.train = train
        self.fixed = fixed
        self.current = current
        self.config = config
        self.settings = settings
        self.steps = config.steps if steps is None else steps
        self.rng = make_rng(config.seed, salt)
        self.reports: List[RefineStepReport] = []

    def run(self) -> GaussianScene:
        if self.steps == 0:
            return self.scene
        optimizer = SceneOptimizer(self.scene, self.config)
        for i, entry in enumerate(self.fixed):
            optimizer.affines[i] = entry.affine

        bar = tqdm(range(self.steps), desc="refine", leave=False, disable=not progress_enabled())
        for step in bar:
            choice = sample_view(step, self.steps, self.train, self.fixed, self.current, self.rng,
                                 self.config.p_fixed)
            optimizer.lr_scale = self.config.lr_scale(step, self.steps)
            report = refine_step(optimizer, choice, self.config, self.settings, step)
            self.reports.append(report)
            bar.set_postfix(loss=f"{report.loss:.4f}")

        for i in range(len(self.fixed)):
            self.fixed.set_affine(i, optimizer.affine(i))
        losses = [r.loss for r in self.reports]
        logger.info("refined %d steps: loss %.4f -> %.4f", self.steps, losses[0], losses[-1])
        return optimizer.scene()

    def write_log(self, path: Union[str, Path]) -> Path:
        return write_csv([r.row() for r in self.reports], path, ["step", "role", "view", "loss", "psnr"])


def refine_3d(scene: GaussianScene, train: ViewSet, fixed: FixedViewSet, current: Optional[int],
              config: RefineConfig, settings: RasterSettings = DEFAULT_SETTINGS, salt: int = 0,
              log_path: Optional[Union[str, Path]] = None, steps: Optional[int] = None) -> GaussianScene:
    """Run one refinement stage and return the refined scene; ``scene`` itself is untouched."""
    session = RefineSession(scene, train, fixed, current, config, settings, salt, steps)
    refined = session.run()
    if log_path is not None and session.reports:
        session.write_log(log_path)
    return refined


def fit_scene(scene: GaussianScene, train: ViewSet, config: RefineConfig,
              settings: RasterSettings = DEFAULT_SETTINGS, log_path: Optional[Union[str, Path]] = None,
              salt: int = 0) -> GaussianScene:
    """Refine against training views only."""
    return refine_3d(scene, train, FixedViewSet(), None, config, settings, salt, log_path)
