"""
Fisher information, per-Gaussian certainty and rendered confidence maps.

Information H_i is the diagonal Gauss-Newton term of the color render summed
over training views. The default uncertainty is inverse information
(median-normalized), so Gaussians no training view constrains get the largest
uncertainty; ``literal-at-view`` mode instead reports the squared Jacobian at
the query view.

Usage:
    from freefix.confidence import accumulate_training_fisher, build_confidence_maps

    acc = accumulate_training_fisher(scene, train_views, ("mu", "eta", "rgb"))
    maps, opacity = build_confidence_maps(view, scene, acc, (0.001, 0.01, 0.1))
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Dict, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from .config import GuidanceConfig, RasterSettings, progress_enabled
from .errors import ConfigError, InvariantError
from .images import AttributeImage
from .render import DEFAULT_SETTINGS, per_gaussian_squared_jacobian, render_attribute, render_opacity
from .scene import CameraView, GaussianScene, ViewSet

logger = logging.getLogger(__name__)

DEFAULT_EPS_H = 1e-12
RELATIVE_FLOOR = 1e-8
MIN_CERTAINTY = np.finfo(np.float64).tiny
INVERSE_INFORMATION = "inverse-information"
LITERAL_AT_VIEW = "literal-at-view"


# ============================================================================
# FISHER INFORMATION
# ============================================================================

@dataclass(frozen=True)
class FisherAccumulator:
    """
    Per-Gaussian information sums.

    ``information`` holds the raw sums so accumulators over disjoint view sets
    add exactly; ``regularized`` adds eps_h on read and floors the result at
    RELATIVE_FLOOR * s_H, which caps inverse-information uncertainty at 1e8.
    """

    information: np.ndarray
    views_seen: int = 0
    param_mask: Tuple[str, ...] = ("mu", "eta", "rgb")
    eps_h: float = DEFAULT_EPS_H

    def __post_init__(self):
        info = np.array(self.information, dtype=np.float64).reshape(-1)
        if np.any(info < 0) or not np.all(np.isfinite(info)):
            raise InvariantError("Fisher information must be finite and nonnegative", field="fisher")
        info.setflags(write=False)
        object.__setattr__(self, "information", info)
        object.__setattr__(self, "param_mask", tuple(self.param_mask))

    def __len__(self) -> int:
        return self.information.shape[0]

    @classmethod
    def empty(cls, n: int, param_mask: Sequence[str] = ("mu", "eta", "rgb"),
              eps_h: float = DEFAULT_EPS_H) -> "FisherAccumulator":
        return cls(np.zeros(n), 0, tuple(param_mask), eps_h)

    @property
    def regularized(self) -> np.ndarray:
        return np.maximum(self.information + self.eps_h, RELATIVE_FLOOR * self.scale)

    @property
    def scale(self) -> float:
        """Global normalizer s_H: the median of the eps_h-shifted information."""
        if len(self) == 0:
            return 1.0
        return float(np.median(self.information + self.eps_h))

    def merge(self, other: "FisherAccumulator") -> "FisherAccumulator":
        if len(other) != len(self):
            raise InvariantError(f"cannot merge accumulators of {len(self)} and {len(other)} Gaussians",
                                 field="fisher")
        if other.param_mask != self.param_mask:
            raise InvariantError("cannot merge accumulators with different parameter masks", field="param_mask")
        return FisherAccumulator(self.information + other.information, self.views_seen + other.views_seen,
                                 self.param_mask, self.eps_h)

    def extended(self, extra: int) -> "FisherAccumulator":
        """Zero information for ``extra`` Gaussians appended to the scene."""
        return FisherAccumulator(np.concatenate([self.information, np.zeros(extra)]), self.views_seen,
                                 self.param_mask, self.eps_h)


def accumulate_training_fisher(scene: GaussianScene, train_views: ViewSet,
                               param_mask: Sequence[str] = ("mu", "eta", "rgb"),
                               settings: RasterSettings = DEFAULT_SETTINGS,
                               eps_h: float = DEFAULT_EPS_H, threads: int = 1) -> FisherAccumulator:
    """
    Sum the per-Gaussian squared Jacobian over every training view.

    Views may be evaluated on worker threads; the reduction always runs in
    view order.
    """
    views = list(train_views)
    if not views:
        raise InvariantError("Fisher accumulation needs at least one training view", field="views")

    def one(view: CameraView) -> np.ndarray:
        return per_gaussian_squared_jacobian(view, scene, param_mask, settings)

    if threads > 1 and len(views) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            per_view = list(pool.map(one, views))
    else:
        per_view = [one(v) for v in tqdm(views, desc="fisher", leave=False, disable=not progress_enabled())]

    info = np.zeros(len(scene))
    for contribution in per_view:
        info = info + contribution
    logger.debug("Fisher over %d views: median %.3e, zero-information Gaussians %d",
                 len(views), float(np.median(info)) if len(info) else 0.0, int(np.sum(info == 0)))
    return FisherAccumulator(info, len(views), tuple(param_mask), eps_h)


# ============================================================================
# UNCERTAINTY AND CERTAINTY
# ============================================================================

def uncertainty_attribute(acc: FisherAccumulator, mode: str = INVERSE_INFORMATION,
                          view: Optional[CameraView] = None, scene: Optional[GaussianScene] = None,
                          settings: RasterSettings = DEFAULT_SETTINGS) -> np.ndarray:
    """
    Per-Gaussian uncertainty.

    Returns:
        np.ndarray: s_H / H_i in inverse-information mode, or the squared
        Jacobian at ``view`` divided by s_H in literal-at-view mode
    """
    s_h = acc.scale
    if mode == INVERSE_INFORMATION:
        return s_h / acc.regularized
    if mode == LITERAL_AT_VIEW:
        if view is None or scene is None:
            raise InvariantError("literal-at-view uncertainty needs a view and a scene", field="view")
        return per_gaussian_squared_jacobian(view, scene, acc.param_mask, settings) / s_h
    raise ConfigError(f"unknown uncertainty mode {mode!r}", locations=["confidence.mode"])


def certainty_attribute(uncertainty: np.ndarray, gamma: float) -> np.ndarray:
    """
    C = exp(-gamma * uncertainty), floored at MIN_CERTAINTY.

    Values lie in [MIN_CERTAINTY, 1] (about [2.2e-308, 1]); an uncertainty
    large enough to underflow the exponential reports the floor, so unseen
    Gaussians keep a strictly positive certainty at every gamma level.
    """
    if gamma <= 0:
        raise InvariantError(f"gamma must be > 0, got {gamma}", field="gamma")
    uncertainty = np.asarray(uncertainty, dtype=np.float64)
    if np.any(uncertainty < 0):
        raise InvariantError("uncertainty must be nonnegative", field="uncertainty")
    return np.maximum(np.exp(-gamma * uncertainty), MIN_CERTAINTY)


def gamma_for_step(config: GuidanceConfig, step: int, total: int) -> float:
    """Multi-level gamma: lo for the first third of steps, mid for the second, hi for the last."""
    if not 0 <= step < total:
        raise InvariantError(f"step {step} outside [0, {total})", field="step")
    lo, mid, hi = config.gammas
    if not lo <= mid <= hi:
        raise ConfigError("gamma levels must satisfy gamma_lo <= gamma_mid <= gamma_hi",
                          locations=["guidance.gamma_lo", "guidance.gamma_mid", "guidance.gamma_hi"])
    if step < total // 3:
        return lo
    if step < (2 * total) // 3:
        return mid
    return hi


# ============================================================================
# CONFIDENCE MAPS
# ============================================================================

@dataclass(frozen=True)
class ConfidenceMap:
    image: AttributeImage
    gamma: float
    view_id: str = ""

    def __post_init__(self):
        if self.image.channels != 1:
            raise InvariantError(f"confidence map must have 1 channel, got {self.image.channels}")
        if self.image.data.min(initial=0.0) < 0.0 or self.image.data.max(initial=0.0) > 1.0:
            raise InvariantError("confidence map values must lie in [0, 1]")

    @property
    def data(self) -> np.ndarray:
        return self.image.data

    @property
    def shape(self):
        return self.image.shape


def render_confidence_map(view: CameraView, scene: GaussianScene, certainty: np.ndarray,
                          settings: RasterSettings = DEFAULT_SETTINGS, gamma: float = 0.0,
                          opacity: Optional[AttributeImage] = None) -> ConfidenceMap:
    """Rendered certainty times rendered opacity, clamped to [0, 1]."""
    certainty = np.asarray(certainty, dtype=np.float64)
    if np.any(certainty < 0) or np.any(certainty > 1):
        raise InvariantError("certainty must lie in [0, 1]", field="certainty")
    rendered = render_attribute(view, scene, certainty, settings)
    opacity = opacity if opacity is not None else render_opacity(view, scene, settings)
    return ConfidenceMap(AttributeImage(np.clip(rendered.data * opacity.data, 0.0, 1.0)), gamma, view.name)


def render_uncertainty_map(view: CameraView, scene: GaussianScene, uncertainty: np.ndarray,
                           settings: RasterSettings = DEFAULT_SETTINGS) -> AttributeImage:
    """Attribute-rendered uncertainty. Unbounded; kept for comparison with the certainty map."""
    return render_attribute(view, scene, uncertainty, settings)


def build_confidence_maps(view: CameraView, scene: GaussianScene, acc: FisherAccumulator,
                          gammas: Sequence[float], mode: str = INVERSE_INFORMATION,
                          settings: RasterSettings = DEFAULT_SETTINGS
                          ) -> Tuple[Dict[float, ConfidenceMap], AttributeImage]:
    """Confidence maps for every gamma level plus the opacity render they share."""
    uncertainty = uncertainty_attribute(acc, mode, view, scene, settings)
    opacity = render_opacity(view, scene, settings)
    maps = {}
    for gamma in gammas:
        certainty = certainty_attribute(uncertainty, gamma)
        maps[gamma] = render_confidence_map(view, scene, certainty, settings, gamma, opacity)
    return maps, opacity


# ============================================================================
# RESIZING
# ============================================================================

def resize_weights(n_in: int, n_out: int) -> np.ndarray:
    """
    (n_out, n_in) resampling operator along one axis.

    Area-average when shrinking, bilinear (pixel-center aligned, edge-clamped)
    when enlarging, identity when equal.
    """
    if n_in < 1 or n_out < 1:
        raise InvariantError(f"resize dimensions must be >= 1, got {n_in} -> {n_out}")
    if n_in == n_out:
        return np.eye(n_in)
    weights = np.zeros((n_out, n_in))
    ratio = n_in / n_out
    if n_out < n_in:
        for j in range(n_out):
            lo, hi = j * ratio, (j + 1) * ratio
            for i in range(int(np.floor(lo)), min(n_in, int(np.ceil(hi)))):
                weights[j, i] = max(0.0, min(hi, i + 1) - max(lo, i))
            weights[j] /= ratio
    else:
        for j in range(n_out):
            src = min(max((j + 0.5) * ratio - 0.5, 0.0), n_in - 1)
            i0 = int(np.floor(src))
            i1 = min(i0 + 1, n_in - 1)
            frac = src - i0
            weights[j, i0] += 1.0 - frac
            weights[j, i1] += frac
    return weights


def resize_image(image: AttributeImage, width: int, height: int) -> AttributeImage:
    if (image.width, image.height) == (width, height):
        return image
    wy = resize_weights(image.height, height)
    wx = resize_weights(image.width, width)
    return AttributeImage(np.einsum("ab,bcd,ec->aed", wy, image.data, wx))


def resize_to_latent(conf: ConfidenceMap, width: int, height: int) -> ConfidenceMap:
    """Resample a confidence map to latent dimensions; unchanged when they already match."""
    if (conf.image.width, conf.image.height) == (width, height):
        return conf
    resized = resize_image(conf.image, width, height)
    return ConfidenceMap(resized.clamped(0.0, 1.0), conf.gamma, conf.view_id)
