"""
Confidence-guided denoising.

Flow-matching convention throughout:

    x_t   = (1 - sigma_t) * x0 + sigma_t * noise
    x0_hat = x_t - sigma_t * F(x_t, t)

Each Euler step blends the denoiser's prediction with the rendered reference
under the confidence map before stepping to the next noise level, and during
the first rho * T steps additionally pulls weakly observed regions toward the
render with strength beta times the rendered opacity.

Denoisers are plain callables ``F = denoiser(x_t, t, sigma_t)``. Oracle doubles
stand in for real backbones, and ``ExternalDenoiserBridge`` hands requests to
an out-of-process model through an exchange directory.

Usage:
    from freefix.guidance import denoise_with_guidance, oracle_denoiser

    fixed = denoise_with_guidance(render, maps, opacity, oracle_denoiser(target), GuidanceConfig())
"""

import itertools
import json
import logging
import os
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, Iterator, Mapping, Optional, Protocol, Sequence, Tuple, Union

import numpy as np

from .config import Config, GuidanceConfig, RasterSettings
from .confidence import ConfidenceMap, gamma_for_step, resize_image, resize_to_latent
from .errors import BridgeTimeoutError, ConfigError, DenoiserError, InvariantError, SceneFormatError, ShapeMismatchError
from .images import AttributeImage, read_pfm, write_pfm
from .render import DEFAULT_SETTINGS, render_color
from .scene import CameraView, GaussianScene
from .seeding import make_rng

logger = logging.getLogger(__name__)

MaskLike = Union[ConfidenceMap, AttributeImage]


# ============================================================================
# SCHEDULE AND STATE
# ============================================================================

@dataclass(frozen=True)
class SigmaSchedule:
    """Noise levels sigma_T > ... > sigma_0 = 0, stored from T down to 0."""

    sigmas: Tuple[float, ...]

    def __post_init__(self):
        sigmas = tuple(float(s) for s in self.sigmas)
        if len(sigmas) < 3:
            raise InvariantError("a schedule needs at least two steps")
        if sigmas[-1] != 0.0:
            raise InvariantError("schedule must end at sigma 0")
        if any(b >= a for a, b in zip(sigmas, sigmas[1:])):
            raise InvariantError("schedule must be strictly decreasing")
        object.__setattr__(self, "sigmas", sigmas)

    @property
    def steps(self) -> int:
        return len(self.sigmas) - 1

    def sigma(self, t: int) -> float:
        """Noise level at time index t (T at the start, 0 at the end)."""
        return self.sigmas[self.steps - t]

    @property
    def schedule_id(self) -> str:
        return f"linear-T{self.steps}-s{self.sigmas[0]:g}"


def make_schedule(steps: int, sigma_start: float) -> SigmaSchedule:
    """Linear descent sigma_k = sigma_start * k / T for k = T..0."""
    if steps < 2:
        raise InvariantError(f"need at least 2 steps, got {steps}", field="steps")
    if not 0.0 < sigma_start <= 1.0:
        raise InvariantError(f"sigma_start must be in (0, 1], got {sigma_start}", field="sigma_start")
    return SigmaSchedule(tuple(sigma_start * k / steps for k in range(steps, -1, -1)))


@dataclass
class DiffusionState:
    x_t: AttributeImage
    t: int
    reference: AttributeImage
    prediction: Optional[AttributeImage] = None
    guided: Optional[AttributeImage] = None

    def __post_init__(self):
        self.reference.require_same_shape(self.x_t, "latent")


# ============================================================================
# ELEMENTWISE STEPS
# ============================================================================

def add_noise(x0: AttributeImage, sigma: float, seed: int) -> AttributeImage:
    """(1 - sigma) * x0 + sigma * eps with eps ~ N(0, 1) per element from ``seed``."""
    if not 0.0 <= sigma <= 1.0:
        raise InvariantError(f"sigma must lie in [0, 1], got {sigma}", field="sigma")
    eps = make_rng(seed).standard_normal(x0.shape)
    return AttributeImage((1.0 - sigma) * x0.data + sigma * eps)


def predict_x0(x_t: AttributeImage, velocity: AttributeImage, sigma_t: float) -> AttributeImage:
    x_t.require_same_shape(velocity, "velocity")
    return AttributeImage(x_t.data - sigma_t * velocity.data)


def _mask_data(mask: MaskLike, what: str) -> np.ndarray:
    data = mask.data
    if data.min(initial=0.0) < 0.0 or data.max(initial=0.0) > 1.0:
        raise InvariantError(f"{what} values must lie in [0, 1]", field=what)
    return data


def guided_x0(prediction: AttributeImage, reference: AttributeImage, confidence: MaskLike,
              opacity: MaskLike, beta: float, in_overall_phase: bool) -> AttributeImage:
    """
    Blend the rendered reference into the denoiser prediction.

    Outside the overall phase: M * ref + (1 - M) * pred. Inside it the
    prediction is first pulled toward the reference by beta * opacity.
    Single-channel masks broadcast across image channels.
    """
    reference.require_same_shape(prediction, "prediction")
    m_c = _mask_data(confidence, "confidence")
    if m_c.shape[:2] != reference.shape[:2]:
        raise ShapeMismatchError(f"confidence map {m_c.shape} does not match latent {reference.shape}")
    x_pred = prediction.data
    if in_overall_phase and beta > 0.0:
        m_a = _mask_data(opacity, "opacity")
        if m_a.shape[:2] != reference.shape[:2]:
            raise ShapeMismatchError(f"opacity map {m_a.shape} does not match latent {reference.shape}")
        w = beta * m_a
        x_pred = w * reference.data + (1.0 - w) * x_pred
    return AttributeImage(m_c * reference.data + (1.0 - m_c) * x_pred)


def guided_step(x_t: AttributeImage, x0_guided: AttributeImage, sigma_t: float,
                sigma_prev: float) -> AttributeImage:
    """x_{t-1} = (sigma_{t-1}/sigma_t) x_t - ((sigma_{t-1} - sigma_t)/sigma_t) x0_guided."""
    if sigma_t <= 0.0:
        raise InvariantError("guided step needs sigma_t > 0", field="sigma_t")
    if sigma_prev >= sigma_t:
        raise InvariantError("guided step needs sigma_{t-1} < sigma_t", field="sigma_prev")
    x_t.require_same_shape(x0_guided, "guided prediction")
    ratio = sigma_prev / sigma_t
    return AttributeImage(ratio * x_t.data - ((sigma_prev - sigma_t) / sigma_t) * x0_guided.data)


# ============================================================================
# DENOISERS
# ============================================================================

class DenoiserContract(Protocol):
    def __call__(self, x_t: AttributeImage, t: int, sigma_t: float) -> AttributeImage:
        ...


class OracleDenoiser:
    """Velocity that makes every prediction land exactly on ``target``."""

    def __init__(self, target: AttributeImage):
        self.target = target

    def __call__(self, x_t: AttributeImage, t: int, sigma_t: float) -> AttributeImage:
        if sigma_t <= 0.0:
            raise DenoiserError("oracle denoiser queried at sigma 0", step=t, sigma=sigma_t)
        self.target.require_same_shape(x_t, "latent")
        return AttributeImage((x_t.data - self.target.data) / sigma_t)


class NoisyOracleDenoiser(OracleDenoiser):
    """Oracle toward a target perturbed once, at creation, by seeded Gaussian noise."""

    def __init__(self, target: AttributeImage, perturb_sigma: float, seed: int = 0):
        noise = make_rng(seed).standard_normal(target.shape) * perturb_sigma
        super().__init__(AttributeImage(target.data + noise))
        self.clean_target = target
        self.perturb_sigma = perturb_sigma


class IdentityDenoiser:
    def __call__(self, x_t: AttributeImage, t: int, sigma_t: float) -> AttributeImage:
        return AttributeImage(np.zeros(x_t.shape))


def oracle_denoiser(target: AttributeImage) -> OracleDenoiser:
    return OracleDenoiser(target)


def noisy_oracle_denoiser(target: AttributeImage, perturb_sigma: float, seed: int = 0) -> NoisyOracleDenoiser:
    return NoisyOracleDenoiser(target, perturb_sigma, seed)


def identity_denoiser() -> IdentityDenoiser:
    return IdentityDenoiser()


class ExternalDenoiserBridge:
    """
    Denoiser served by another process through an exchange directory.

    Per call n the bridge writes ``req_<n>.pfm`` (x_t) and then
    ``req_<n>.json`` ({t, sigma_t, shape, schedule_id, view_id}), and waits for
    ``res_<n>.pfm`` holding F. Responders should write the result under a
    temporary name and rename it into place. Consumed files are deleted.
    """

    def __init__(self, directory: Union[str, Path], timeout: Optional[float] = None,
                 poll: Optional[float] = None, schedule_id: str = "", view_id: str = "",
                 counter: Optional[Iterator[int]] = None):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)
        self.timeout = Config.BRIDGE_TIMEOUT if timeout is None else timeout
        self.poll = Config.BRIDGE_POLL if poll is None else poll
        self.schedule_id = schedule_id
        self.view_id = view_id
        self._counter = counter if counter is not None else itertools.count()

    def _write_request(self, n: int, x_t: AttributeImage, t: int, sigma_t: float) -> Tuple[Path, Path]:
        req_pfm = self.directory / f"req_{n}.pfm"
        req_json = self.directory / f"req_{n}.json"
        write_pfm(x_t, req_pfm)
        tmp = self.directory / f".req_{n}.json.tmp"
        tmp.write_text(json.dumps({
            "t": t,
            "sigma_t": sigma_t,
            "shape": list(x_t.shape),
            "schedule_id": self.schedule_id,
            "view_id": self.view_id,
        }))
        os.replace(tmp, req_json)
        return req_pfm, req_json

    def __call__(self, x_t: AttributeImage, t: int, sigma_t: float) -> AttributeImage:
        n = next(self._counter)
        req_pfm, req_json = self._write_request(n, x_t, t, sigma_t)
        res_pfm = self.directory / f"res_{n}.pfm"
        deadline = time.monotonic() + self.timeout
        logger.debug("bridge request %d (t=%d, sigma=%.4f) written to %s", n, t, sigma_t, self.directory)

        try:
            while True:
                if res_pfm.exists():
                    try:
                        velocity = read_pfm(res_pfm)
                        break
                    except SceneFormatError:
                        # partially written; keep polling until the deadline
                        pass
                if time.monotonic() > deadline:
                    raise BridgeTimeoutError(
                        f"no response {res_pfm.name} within {self.timeout}s", step=t, sigma=sigma_t
                    )
                time.sleep(self.poll)
        finally:
            for path in (req_pfm, req_json):
                path.unlink(missing_ok=True)
        res_pfm.unlink(missing_ok=True)

        if velocity.shape != x_t.shape:
            raise DenoiserError(f"bridge response shape {velocity.shape} does not match request {x_t.shape}",
                                step=t, sigma=sigma_t)
        return velocity


def external_denoiser_bridge(directory: Union[str, Path], timeout: Optional[float] = None) -> ExternalDenoiserBridge:
    return ExternalDenoiserBridge(directory, timeout)


# ============================================================================
# PER-VIEW DENOISER PROVIDERS
# ============================================================================

class DenoiserProvider(Protocol):
    def for_view(self, index: int, view: CameraView) -> DenoiserContract:
        ...


class ConstantProvider:
    """Same denoiser for every trajectory view."""

    def __init__(self, denoiser: DenoiserContract):
        self.denoiser = denoiser

    def for_view(self, index: int, view: CameraView) -> DenoiserContract:
        return self.denoiser


class OracleProvider:
    """
    (Noisy) oracles whose target is the ground-truth render of each view.

    ``color_gain``/``color_offset`` plant a global per-channel color bias in
    every target (clamped to [0, 1]), the way a diffusion backbone shifts tones.
    """

    def __init__(self, gt_scene: GaussianScene, noise_sigma: float = 0.0, seed: int = 0,
                 settings: RasterSettings = DEFAULT_SETTINGS, codec: Optional["PixelLatentCodec"] = None,
                 color_gain: Sequence[float] = (1.0, 1.0, 1.0), color_offset: Sequence[float] = (0.0, 0.0, 0.0)):
        self.gt_scene = gt_scene
        self.noise_sigma = noise_sigma
        self.seed = seed
        self.settings = settings
        self.codec = codec or PixelLatentCodec(1)
        self.color_gain = np.asarray(color_gain, dtype=np.float64).reshape(3)
        self.color_offset = np.asarray(color_offset, dtype=np.float64).reshape(3)

    def _biased(self, image: AttributeImage) -> AttributeImage:
        if np.all(self.color_gain == 1.0) and np.all(self.color_offset == 0.0):
            return image
        return AttributeImage(np.clip(image.data * self.color_gain + self.color_offset, 0.0, 1.0))

    def for_view(self, index: int, view: CameraView) -> DenoiserContract:
        target = self.codec.encode(self._biased(render_color(view, self.gt_scene, self.settings)))
        if self.noise_sigma > 0.0:
            return NoisyOracleDenoiser(target, self.noise_sigma, seed=int(make_rng(self.seed, index).integers(2**31)))
        return OracleDenoiser(target)


class BridgeProvider:
    """Bridge denoisers sharing one exchange directory and request counter."""

    def __init__(self, directory: Union[str, Path], schedule_id: str = "", timeout: Optional[float] = None):
        self.directory = Path(directory)
        self.schedule_id = schedule_id
        self.timeout = timeout
        self._counter = itertools.count()

    def for_view(self, index: int, view: CameraView) -> DenoiserContract:
        return ExternalDenoiserBridge(self.directory, self.timeout, schedule_id=self.schedule_id,
                                      view_id=view.name or str(index), counter=self._counter)


def provider_from_name(name: str, gt_scene: Optional[GaussianScene] = None, noise_sigma: float = 0.05,
                       seed: int = 0, settings: RasterSettings = DEFAULT_SETTINGS,
                       guidance: Optional[GuidanceConfig] = None) -> DenoiserProvider:
    """Build the provider for a ``--denoiser`` value: oracle, noisy-oracle, identity or bridge:<dir>."""
    guidance = guidance or GuidanceConfig()
    codec = PixelLatentCodec(guidance.latent_scale)
    if name == "identity":
        return ConstantProvider(IdentityDenoiser())
    if name.startswith("bridge:"):
        schedule = make_schedule(guidance.steps, guidance.sigma_start)
        return BridgeProvider(name[len("bridge:"):], schedule.schedule_id)
    if name in ("oracle", "noisy-oracle"):
        if gt_scene is None:
            raise ConfigError(f"denoiser {name!r} needs a ground-truth scene (gt_scene)", locations=["gt_scene"])
        sigma = noise_sigma if name == "noisy-oracle" else 0.0
        return OracleProvider(gt_scene, sigma, seed, settings, codec)
    raise ConfigError(f"unknown denoiser {name!r}", locations=["denoiser"])


# ============================================================================
# LATENT CODEC
# ============================================================================

class PixelLatentCodec:
    """Pixel-space latents: identity at scale 1, area-downsampled by ``scale`` otherwise."""

    def __init__(self, scale: int = 1):
        if scale < 1:
            raise InvariantError(f"latent scale must be >= 1, got {scale}", field="latent_scale")
        self.scale = scale

    def latent_size(self, width: int, height: int) -> Tuple[int, int]:
        return max(1, width // self.scale), max(1, height // self.scale)

    def encode(self, image: AttributeImage) -> AttributeImage:
        if self.scale == 1:
            return image
        return resize_image(image, *self.latent_size(image.width, image.height))

    def decode(self, latent: AttributeImage, width: int, height: int) -> AttributeImage:
        if (latent.width, latent.height) == (width, height):
            return latent
        return resize_image(latent, width, height)


# ============================================================================
# GUIDED DENOISING LOOP
# ============================================================================

def _checked_velocity(denoiser: DenoiserContract, x_t: AttributeImage, t: int, step: int,
                      sigma_t: float) -> AttributeImage:
    try:
        velocity = denoiser(x_t, t, sigma_t)
    except DenoiserError:
        raise
    except Exception as e:
        raise DenoiserError(f"denoiser failed at step {step}: {e}", step=step, sigma=sigma_t) from e
    if not isinstance(velocity, AttributeImage):
        try:
            velocity = AttributeImage(np.asarray(velocity))
        except ShapeMismatchError as e:
            raise DenoiserError(f"invalid velocity at step {step}: {e.message}", step=step, sigma=sigma_t) from e
    if velocity.shape != x_t.shape:
        raise DenoiserError(f"denoiser returned shape {velocity.shape} for latent {x_t.shape}",
                            step=step, sigma=sigma_t)
    return velocity


def denoise_with_guidance(render: AttributeImage, conf_maps: Mapping[float, MaskLike],
                          opacity: MaskLike, denoiser: DenoiserContract, config: GuidanceConfig,
                          codec: Optional[PixelLatentCodec] = None,
                          callback: Optional[Callable[[DiffusionState], None]] = None) -> AttributeImage:
    """
    Run the guided sampler from sigma_start down to 0 and return the fixed image in [0, 1].

    ``conf_maps`` maps each configured gamma level to its confidence map at
    render resolution; maps and opacity are resized to the latent grid once.
    """
    codec = codec or PixelLatentCodec(config.latent_scale)
    missing = [g for g in config.gammas if g not in conf_maps]
    if missing:
        raise InvariantError(f"no confidence map for gamma levels {missing}", field="conf_maps")

    reference = codec.encode(render)
    lw, lh = reference.width, reference.height
    latent_maps: Dict[float, MaskLike] = {}
    for gamma in config.gammas:
        m = conf_maps[gamma]
        if isinstance(m, ConfidenceMap):
            latent_maps[gamma] = resize_to_latent(m, lw, lh)
        else:
            latent_maps[gamma] = resize_image(m, lw, lh).clamped()
    latent_opacity = resize_image(opacity if isinstance(opacity, AttributeImage) else opacity.image, lw, lh).clamped()

    schedule = make_schedule(config.steps, config.sigma_start)
    T = schedule.steps
    overall_steps = config.rho * T
    x_t = add_noise(reference, config.sigma_start, config.seed)
    state = DiffusionState(x_t, T, reference)

    for t in range(T, 0, -1):
        step = T - t
        sigma_t, sigma_prev = schedule.sigma(t), schedule.sigma(t - 1)
        velocity = _checked_velocity(denoiser, state.x_t, t, step, sigma_t)
        state.prediction = predict_x0(state.x_t, velocity, sigma_t)
        gamma = gamma_for_step(config, step, T)
        state.guided = guided_x0(state.prediction, reference, latent_maps[gamma], latent_opacity,
                                 config.beta, step < overall_steps)
        state.x_t = guided_step(state.x_t, state.guided, sigma_t, sigma_prev)
        state.t = t - 1
        if callback is not None:
            callback(state)

    return codec.decode(state.x_t, render.width, render.height).clamped(0.0, 1.0)
