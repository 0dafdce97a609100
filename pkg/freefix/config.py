"""
Configuration module for FreeFix runs

This module holds the structured run configuration (guidance, refinement,
pipeline, synthetic scenes, ablation) as validated pydantic models, and
extends the environment-driven shared configuration with engine settings.

NOTE: Ambient settings (verbosity, threads, bridge timeouts) come from the shared
configuration in the root directory and its .env file.

Usage:
    from freefix.config import Config, RunConfig, load_run_config

    run = load_run_config("run.json")
    run = apply_overrides(run, {"pipeline.guidance.beta": 0.3})
"""

import json
import math
import sys
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

# Add parent directory to path to import shared_config
sys.path.insert(0, str(Path(__file__).parent.parent))

from shared_config import Config as SharedConfig, configure_logging, progress_enabled  # noqa: E402,F401

from .errors import ConfigError  # noqa: E402

PARAM_GROUPS = ("mu", "q", "s", "eta", "rgb")
ABLATION_TOGGLES = ("confidence-guidance", "interleave", "overall-guidance", "affine")


class Config(SharedConfig):
    """
    Engine-specific configuration that extends the shared configuration.

    Holds the output layout contract shared by the pipeline and the CLI.
    """

    # Output layout
    STAGE_DIR = "stage_{index}"
    RECORDS_FILE = "records.json"
    SCENE_FINAL_FILE = "scene_final.json"
    SCENE_LAST_GOOD_FILE = "scene_last_good.json"
    EFFECTIVE_CONFIG_FILE = "effective_config.json"
    REFINE_LOG_FILE = "refine_log.csv"


class _Settings(BaseModel):
    model_config = ConfigDict(extra="forbid", allow_inf_nan=False, frozen=True)


# ============================================================================
# RENDERING
# ============================================================================

class RasterSettings(_Settings):
    """Splatting constants. cutoff_sigma=None disables the 3-sigma truncation."""

    aa_floor: float = Field(0.3, ge=0.0)
    t_min: float = Field(1e-4, ge=0.0, lt=1.0)
    alpha_max: float = Field(0.999, gt=0.0, le=1.0)
    cutoff_sigma: Optional[float] = Field(3.0, gt=0.0)
    pixel_budget: int = Field(default_factory=lambda: SharedConfig.PIXEL_BUDGET, ge=1024)


# ============================================================================
# CONFIDENCE / GUIDANCE / REFINEMENT
# ============================================================================

class ConfidenceSettings(_Settings):
    param_mask: Tuple[str, ...] = ("mu", "eta", "rgb")
    mode: Literal["inverse-information", "literal-at-view"] = "inverse-information"
    eps_h: float = Field(1e-12, gt=0.0)
    threads: int = Field(1, ge=1)

    @field_validator("param_mask")
    @classmethod
    def _known_groups(cls, v):
        if not v:
            raise ValueError("param_mask must not be empty")
        unknown = [g for g in v if g not in PARAM_GROUPS]
        if unknown:
            raise ValueError(f"unknown parameter groups {unknown}")
        return tuple(g for g in PARAM_GROUPS if g in v)


class GuidanceConfig(_Settings):
    steps: int = Field(30, ge=2)
    sigma_start: float = Field(1.0, gt=0.0, le=1.0)
    gamma_lo: float = Field(0.001, gt=0.0)
    gamma_mid: float = Field(0.01, gt=0.0)
    gamma_hi: float = Field(0.1, gt=0.0)
    beta: float = Field(0.5, ge=0.0, le=1.0)
    rho: float = Field(0.2, ge=0.0, le=1.0)
    latent_scale: int = Field(1, ge=1)
    seed: int = 0

    @model_validator(mode="after")
    def _monotone_gammas(self):
        if not self.gamma_lo <= self.gamma_mid <= self.gamma_hi:
            raise ValueError("gamma levels must satisfy gamma_lo <= gamma_mid <= gamma_hi")
        return self

    @property
    def gammas(self) -> Tuple[float, float, float]:
        return (self.gamma_lo, self.gamma_mid, self.gamma_hi)


class RefineConfig(_Settings):
    steps: int = Field(300, ge=0)
    lambda_s: float = Field(0.2, ge=0.0, le=1.0)
    lr_mu: float = Field(2e-4, gt=0.0)
    lr_q: float = Field(1e-3, gt=0.0)
    lr_s: float = Field(5e-3, gt=0.0)
    lr_eta: float = Field(5e-2, gt=0.0)
    lr_rgb: float = Field(2.5e-2, gt=0.0)
    lr_affine: float = Field(1e-3, gt=0.0)
    lr_final_ratio: float = Field(1.0, gt=0.0, le=1.0)
    w_g: float = Field(0.5, gt=0.0, le=1.0)
    p_fixed: float = Field(0.25, gt=0.0, lt=1.0)
    beta1: float = Field(0.9, ge=0.0, lt=1.0)
    beta2: float = Field(0.999, ge=0.0, lt=1.0)
    adam_eps: float = Field(1e-15, gt=0.0)
    min_scale: float = Field(1e-6, gt=0.0)
    use_affine: bool = True
    frozen_groups: Tuple[str, ...] = ()
    seed: int = 0

    @field_validator("frozen_groups")
    @classmethod
    def _known_frozen(cls, v):
        unknown = [g for g in v if g not in PARAM_GROUPS + ("affine",)]
        if unknown:
            raise ValueError(f"unknown parameter groups {unknown}")
        return tuple(v)

    def learning_rates(self, extent: float = 1.0) -> Dict[str, float]:
        """Per-group rates; the position rate scales with the scene extent."""
        return {
            "mu": self.lr_mu * extent,
            "q": self.lr_q,
            "s": self.lr_s,
            "eta": self.lr_eta,
            "rgb": self.lr_rgb,
            "affine": self.lr_affine,
        }

    def lr_scale(self, step: int, total: int) -> float:
        """Log-linear decay from 1 at the first step to lr_final_ratio at the last."""
        if self.lr_final_ratio == 1.0 or total <= 1:
            return 1.0
        t = min(max(step / (total - 1), 0.0), 1.0)
        return math.exp(t * math.log(self.lr_final_ratio))


# ============================================================================
# PIPELINE
# ============================================================================

class PipelineConfig(_Settings):
    guidance: GuidanceConfig = GuidanceConfig()
    refine: RefineConfig = RefineConfig()
    confidence: ConfidenceSettings = ConfidenceSettings()
    raster: RasterSettings = Field(default_factory=RasterSettings)
    fisher_refresh: Literal["per-stage", "once"] = "per-stage"
    confidence_guidance: bool = True
    interleave: bool = True
    output_dir: Optional[str] = None
    max_view_gap: float = Field(1.0, gt=0.0)
    seed: int = 0


# ============================================================================
# SYNTHETIC SCENES AND ABLATION
# ============================================================================

class SyntheticSpec(_Settings):
    kind: str = "textured-wall"
    seed: int = 0
    n_primitives: int = Field(300, ge=0)
    n_train: int = Field(8, ge=1)
    n_extrapolated: int = Field(5, ge=0)
    width: int = Field(48, ge=8)
    height: int = Field(48, ge=8)
    fov_deg: float = Field(60.0, gt=5.0, lt=150.0)
    d_min: float = Field(1.0, ge=0.0)
    extrapolation: Literal["arc", "translate", "rotate"] = "arc"
    render_images: bool = True


class CorruptionSpec(_Settings):
    floaters: int = Field(5, ge=0)
    opacity_min: float = Field(0.6, ge=0.0, le=1.0)
    opacity_max: float = Field(0.9, ge=0.0, le=1.0)
    scale_min: float = Field(0.04, gt=0.0)
    scale_max: float = Field(0.1, gt=0.0)
    depth_min: float = Field(0.6, gt=0.0)
    depth_max: float = Field(1.6, gt=0.0)
    max_retries: int = Field(500, ge=1)
    seed: int = 0

    @model_validator(mode="after")
    def _ordered_ranges(self):
        if self.opacity_min > self.opacity_max:
            raise ValueError("opacity_min must be <= opacity_max")
        if self.scale_min > self.scale_max:
            raise ValueError("scale_min must be <= scale_max")
        if self.depth_min >= self.depth_max:
            raise ValueError("depth_min must be < depth_max")
        return self


class AblationSpec(_Settings):
    """Seeds, toggles and the simulated denoiser (noise plus a global color bias) of an ablation run."""

    seeds: Tuple[int, ...] = tuple(range(20))
    toggles: Tuple[str, ...] = ABLATION_TOGGLES
    noise_sigma: float = Field(0.05, ge=0.0)
    color_gain: Tuple[float, float, float] = (0.92, 1.06, 0.96)
    color_offset: Tuple[float, float, float] = (0.03, -0.02, 0.02)

    @field_validator("toggles")
    @classmethod
    def _known_toggles(cls, v):
        unknown = [t for t in v if t not in ABLATION_TOGGLES]
        if unknown:
            raise ValueError(f"unknown ablation toggles {unknown}")
        return tuple(v)


class RunConfig(_Settings):
    """Everything a CLI run needs; every CLI flag overrides one key here."""

    scene: Optional[str] = None
    gt_scene: Optional[str] = None
    train_views: Optional[str] = None
    trajectory: Optional[str] = None
    out: str = Field(default_factory=lambda: str(SharedConfig.OUTPUT_DIR))
    denoiser: str = "noisy-oracle"
    noise_sigma: float = Field(0.05, ge=0.0)
    threads: int = Field(default_factory=lambda: SharedConfig.THREADS, ge=1)
    pipeline: PipelineConfig = PipelineConfig()
    synthetic: SyntheticSpec = SyntheticSpec()
    corruption: CorruptionSpec = CorruptionSpec()
    ablation: AblationSpec = AblationSpec()

    @field_validator("denoiser")
    @classmethod
    def _known_denoiser(cls, v):
        if v in ("oracle", "noisy-oracle", "identity") or v.startswith("bridge:"):
            return v
        raise ValueError("denoiser must be oracle, noisy-oracle, identity or bridge:<dir>")


# ============================================================================
# LOADING AND OVERRIDES
# ============================================================================

ModelT = Union[RunConfig, PipelineConfig, GuidanceConfig, RefineConfig, SyntheticSpec, CorruptionSpec]


def _validation_failure(e: ValidationError, what: str) -> ConfigError:
    locations = [".".join(str(p) for p in err["loc"]) for err in e.errors()]
    first = e.errors()[0]
    return ConfigError(f"invalid {what}: {locations[0]}: {first['msg']}", locations=locations)


def validate_model(cls, data: Dict[str, Any], what: str = "configuration"):
    try:
        return cls.model_validate(data)
    except ValidationError as e:
        raise _validation_failure(e, what)


def load_run_config(path: Union[str, Path]) -> RunConfig:
    """Parse a run configuration JSON file; unknown keys are rejected."""
    from .scene import read_json

    return validate_model(RunConfig, read_json(Path(path)), what=f"run config {path}")


def apply_overrides(model: ModelT, overrides: Dict[str, Any]) -> ModelT:
    """Return a re-validated copy with dotted-key overrides applied (None values skipped)."""
    data = model.model_dump()
    for dotted, value in overrides.items():
        if value is None:
            continue
        node = data
        keys = dotted.split(".")
        for key in keys[:-1]:
            if key not in node or not isinstance(node[key], dict):
                raise ConfigError(f"unknown configuration key {dotted!r}", locations=[dotted])
            node = node[key]
        if keys[-1] not in node:
            raise ConfigError(f"unknown configuration key {dotted!r}", locations=[dotted])
        node[keys[-1]] = value
    return validate_model(type(model), data)


def dump_config(model: BaseModel, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.write_text(json.dumps(model.model_dump(mode="json"), indent=2, sort_keys=True) + "\n")
    return path


def parse_gamma_levels(text: str) -> Dict[str, float]:
    parts = [p for p in text.split(",") if p.strip()]
    if len(parts) != 3:
        raise ConfigError("--gamma expects three comma-separated values lo,mid,hi", locations=["gamma"])
    try:
        lo, mid, hi = (float(p) for p in parts)
    except ValueError:
        raise ConfigError(f"--gamma values must be numbers, got {text!r}", locations=["gamma"])
    return {"gamma_lo": lo, "gamma_mid": mid, "gamma_hi": hi}


def seed_list(text: str) -> List[int]:
    """Parse '0-19' or '1,2,5' into a list of seeds."""
    if "-" in text and "," not in text:
        a, b = text.split("-", 1)
        return list(range(int(a), int(b) + 1))
    return [int(p) for p in text.split(",") if p.strip()]
