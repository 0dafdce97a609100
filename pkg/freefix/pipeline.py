"""
Interleaved 2D fixing and 3D refinement along an extrapolated trajectory.

For each trajectory view in order: render the current scene, build the
per-gamma confidence maps from training-view Fisher information, fix the
render with guided denoising, add it to the fixed-view set and refine the
scene against training views plus every fixed view so far.

Usage:
    from freefix.pipeline import run_freefix, OutputManager

    scene, records = run_freefix(initial, train, trajectory, PipelineConfig(), provider,
                                 output=OutputManager("runs/demo"))
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from tqdm import tqdm

from .config import ABLATION_TOGGLES, Config, PipelineConfig, RunConfig, progress_enabled
from .confidence import ConfidenceMap, FisherAccumulator, accumulate_training_fisher, build_confidence_maps
from .errors import PipelineError
from .guidance import ConstantProvider, DenoiserProvider, OracleProvider, denoise_with_guidance
from .images import AttributeImage, write_heatmap, write_pfm, write_png
from .metrics import MetricReport, psnr, sign_test, ssim, write_csv, write_markdown
from .refine import FixedViewSet, refine_3d
from .render import render_color
from .scene import GaussianScene, ViewSet, save_scene
from .seeding import make_rng
from .synthetic import corrupt_scene, make_synthetic_scene

logger = logging.getLogger(__name__)


# ============================================================================
# STAGE RECORDS AND OUTPUT
# ============================================================================

@dataclass
class StageRecord:
    stage: int
    view_id: str
    render: AttributeImage
    conf_maps: Dict[float, ConfidenceMap]
    fixed: AttributeImage
    prior_psnr: List[float] = field(default_factory=list)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "stage": self.stage,
            "view_id": self.view_id,
            "gammas": sorted(self.conf_maps),
            "conf_mean": {f"{g:g}": float(m.data.mean()) for g, m in sorted(self.conf_maps.items())},
            "render_psnr_vs_fixed": psnr(self.render, self.fixed),
            "prior_psnr": [round(float(p), 10) for p in self.prior_psnr],
        }


class OutputManager:
    """Writes the stage directory layout and the run summary files."""

    def __init__(self, output_dir: Union[str, Path, None] = None):
        self.output_dir = Path(output_dir or Config.OUTPUT_DIR)
        self.output_dir.mkdir(parents=True, exist_ok=True)

    def stage_dir(self, index: int) -> Path:
        path = self.output_dir / Config.STAGE_DIR.format(index=index)
        path.mkdir(parents=True, exist_ok=True)
        return path

    def save_stage(self, record: StageRecord) -> Path:
        """Save render, confidence maps and fixed image of one stage"""
        path = self.stage_dir(record.stage)
        write_pfm(record.render, path / "render.pfm")
        write_png(record.render, path / "render.png")
        for gamma, conf in sorted(record.conf_maps.items()):
            write_pfm(conf.image, path / f"conf_{gamma:g}.pfm")
            write_heatmap(conf.image, path / f"conf_{gamma:g}.png")
        write_pfm(record.fixed, path / "fixed.pfm")
        write_png(record.fixed, path / "fixed.png")
        return path

    def save_records(self, records: Sequence[StageRecord]) -> Path:
        path = self.output_dir / Config.RECORDS_FILE
        path.write_text(json.dumps([r.to_dict() for r in records], indent=2, sort_keys=True) + "\n")
        return path

    def save_scene(self, scene: GaussianScene, name: str = Config.SCENE_FINAL_FILE) -> Path:
        return save_scene(scene, self.output_dir / name)

    def save_last_good(self, scene: GaussianScene) -> Path:
        return self.save_scene(scene, Config.SCENE_LAST_GOOD_FILE)

    def refine_log(self, index: int) -> Path:
        return self.stage_dir(index) / Config.REFINE_LOG_FILE


# ============================================================================
# PIPELINE
# ============================================================================

def _provider(denoiser) -> DenoiserProvider:
    return denoiser if hasattr(denoiser, "for_view") else ConstantProvider(denoiser)


def _check_continuity(trajectory: ViewSet, max_gap: float) -> None:
    centers = trajectory.camera_centers()
    for i in range(1, len(centers)):
        gap = float(np.linalg.norm(centers[i] - centers[i - 1]))
        if gap > max_gap:
            logger.warning("trajectory views %d and %d are %.3f apart (max_view_gap %.3f)",
                           i - 1, i, gap, max_gap)


def _prior_psnr(scene: GaussianScene, fixed: FixedViewSet, config: PipelineConfig) -> List[float]:
    return [psnr(render_color(e.view, scene, config.raster).clamped(), e.image) for e in fixed]


class FreeFixPipeline:
    """One run over a trajectory; holds the evolving scene, Fisher state and fixed-view set."""

    def __init__(self, initial: GaussianScene, train: ViewSet, trajectory: ViewSet, config: PipelineConfig,
                 denoiser, output: Optional[OutputManager] = None):
        self.scene = initial
        self.train = train
        self.trajectory = trajectory
        self.config = config
        self.provider = _provider(denoiser)
        self.output = output
        self.fixed = FixedViewSet()
        self.records: List[StageRecord] = []
        self._fisher: Optional[FisherAccumulator] = initial.fisher

    def _fisher_for(self, scene: GaussianScene) -> FisherAccumulator:
        """Training-view Fisher for ``scene``; in "once" mode the first accumulator (or the scene's own) is reused."""
        c = self.config
        if self._fisher is None or c.fisher_refresh == "per-stage":
            self._fisher = accumulate_training_fisher(scene, self.train, c.confidence.param_mask, c.raster,
                                                      c.confidence.eps_h, c.confidence.threads)
        return self._fisher

    def fix_view(self, index: int, scene: GaussianScene) -> Tuple[AttributeImage, Dict[float, ConfidenceMap],
                                                                  AttributeImage]:
        """Render, build confidence maps and run guided denoising for one trajectory view"""
        c = self.config
        view = self.trajectory[index]
        render = render_color(view, scene, c.raster)
        maps, opacity = build_confidence_maps(view, scene, self._fisher_for(scene), c.guidance.gammas,
                                              c.confidence.mode, c.raster)
        guide_maps = maps if c.confidence_guidance else {g: opacity for g in maps}
        stage_seed = int(make_rng(c.seed, c.guidance.seed, index).integers(2**31))
        guidance = c.guidance.model_copy(update={"seed": stage_seed})
        fixed = denoise_with_guidance(render, guide_maps, opacity, self.provider.for_view(index, view), guidance)
        return render, maps, fixed

    def _finish_stage(self, index: int, render, maps, fixed) -> StageRecord:
        view = self.trajectory[index]
        record = StageRecord(index, view.name or str(index), render, maps, fixed,
                             _prior_psnr(self.scene, self.fixed, self.config))
        if self.output is not None:
            self.output.save_stage(record)
        self.records.append(record)
        return record

    def _fail(self, stage: int, last_good: GaussianScene, error: Exception) -> PipelineError:
        scene_path = None
        if self.output is not None:
            scene_path = str(self.output.save_last_good(last_good))
            self.output.save_records(self.records)
        logger.error("stage %d failed: %s", stage, error)
        return PipelineError(f"stage {stage} failed: {type(error).__name__}: {error}", stage=stage,
                             records=list(self.records), scene_path=scene_path)

    def run_interleaved(self) -> GaussianScene:
        c = self.config
        bar = tqdm(range(len(self.trajectory)), desc="stages", disable=not progress_enabled())
        for i in bar:
            last_good = self.scene
            try:
                render, maps, fixed = self.fix_view(i, self.scene)
                self.fixed.append(self.trajectory[i], fixed)
                log_path = self.output.refine_log(i) if self.output is not None else None
                self.scene = refine_3d(self.scene, self.train, self.fixed, len(self.fixed) - 1, c.refine,
                                       c.raster, salt=i, log_path=log_path)
                record = self._finish_stage(i, render, maps, fixed)
            except Exception as e:
                raise self._fail(i, last_good, e) from e
            logger.info("stage %d (%s): prior-view PSNR %s", i, record.view_id,
                        ", ".join(f"{p:.2f}" for p in record.prior_psnr))
        return self.scene

    def run_batch(self) -> GaussianScene:
        """Fix every view against the initial scene, then refine once over all of them."""
        c = self.config
        staged = []
        initial = self.scene
        for i in range(len(self.trajectory)):
            try:
                render, maps, fixed = self.fix_view(i, initial)
            except Exception as e:
                raise self._fail(i, initial, e) from e
            self.fixed.append(self.trajectory[i], fixed)
            staged.append((render, maps, fixed))
        try:
            log_path = self.output.refine_log(0) if self.output is not None else None
            self.scene = refine_3d(initial, self.train, self.fixed, None, c.refine, c.raster, salt=0,
                                   log_path=log_path, steps=c.refine.steps * len(self.trajectory))
            for i, (render, maps, fixed) in enumerate(staged):
                self._finish_stage(i, render, maps, fixed)
        except Exception as e:
            raise self._fail(len(self.records), initial, e) from e
        return self.scene

    def run(self) -> Tuple[GaussianScene, List[StageRecord]]:
        if len(self.trajectory) == 0:
            return self.scene, []
        _check_continuity(self.trajectory, self.config.max_view_gap)
        scene = self.run_interleaved() if self.config.interleave else self.run_batch()
        if self.output is not None:
            self.output.save_records(self.records)
            self.output.save_scene(scene)
        return scene, self.records


def run_freefix(initial: GaussianScene, train: ViewSet, trajectory: ViewSet, config: PipelineConfig,
                denoiser, output: Optional[OutputManager] = None) -> Tuple[GaussianScene, List[StageRecord]]:
    """
    Fix every trajectory view in order and fold the fixes back into the scene.

    ``denoiser`` is either a denoiser callable or a per-view provider.
    Raises PipelineError carrying the completed stage records when a stage fails.
    """
    if output is None and config.output_dir:
        output = OutputManager(config.output_dir)
    return FreeFixPipeline(initial, train, trajectory, config, denoiser, output).run()


# ============================================================================
# EVALUATION AND ABLATION
# ============================================================================

def evaluate_views(scene: GaussianScene, views: ViewSet, config: Optional[PipelineConfig] = None,
                   **meta: Any) -> MetricReport:
    """PSNR/SSIM of the scene's renders against the reference images of ``views``."""
    if views.images is None:
        raise PipelineError("evaluation views carry no reference images", stage=-1)
    raster = (config or PipelineConfig()).raster
    report = MetricReport(meta=dict(meta))
    for k, (view, reference) in enumerate(zip(views, views.images)):
        render = render_color(view, scene, raster).clamped()
        report.add(view.name or str(k), psnr(render, reference), ssim(render, reference))
    return report


def ablation_variants(toggles: Sequence[str]) -> Dict[str, Tuple[str, ...]]:
    """Variant name -> toggles switched off: the full method, each single toggle off, and all off."""
    variants = {"full": ()}
    for toggle in toggles:
        variants[f"no-{toggle}"] = (toggle,)
    variants["all-off"] = tuple(toggles)
    return variants


def apply_toggles(config: PipelineConfig, off: Sequence[str]) -> PipelineConfig:
    updates: Dict[str, Any] = {}
    if "confidence-guidance" in off:
        updates["confidence_guidance"] = False
    if "interleave" in off:
        updates["interleave"] = False
    if "overall-guidance" in off:
        updates["guidance"] = config.guidance.model_copy(update={"beta": 0.0})
    if "affine" in off:
        updates["refine"] = config.refine.model_copy(update={"use_affine": False})
    return config.model_copy(update=updates)


@dataclass
class AblationTable:
    rows: List[Dict[str, Any]]
    summary: List[Dict[str, Any]]

    def write(self, output_dir: Union[str, Path]) -> Tuple[Path, Path]:
        output_dir = Path(output_dir)
        output_dir.mkdir(parents=True, exist_ok=True)
        csv_path = write_csv(self.rows, output_dir / "ablation.csv", ["variant", "seed", "psnr", "ssim"])
        md_path = write_markdown(self.summary, output_dir / "ablation.md",
                                 ["variant", "mean_psnr", "mean_ssim", "p_full_better"],
                                 title="Ablation")
        return csv_path, md_path

    def mean_psnr(self, variant: str) -> float:
        return float(np.mean([r["psnr"] for r in self.rows if r["variant"] == variant]))


def run_ablation(base: RunConfig, toggles: Optional[Sequence[str]] = None,
                 seeds: Optional[Sequence[int]] = None) -> AblationTable:
    """
    Compare the full method with toggled-off variants on corrupted synthetic scenes.

    Each seed synthesizes and corrupts its own scene; every variant of that
    seed starts from the same corrupted scene and uses a noisy, color-biased
    oracle toward the ground truth. Scores are mean PSNR/SSIM over the
    extrapolated views.
    """
    toggles = tuple(base.ablation.toggles if toggles is None else toggles)
    unknown = [t for t in toggles if t not in ABLATION_TOGGLES]
    if unknown:
        raise PipelineError(f"unknown ablation toggles {unknown}", stage=-1)
    seeds = list(base.ablation.seeds if seeds is None else seeds)
    variants = ablation_variants(toggles)
    raster = base.pipeline.raster
    rows: List[Dict[str, Any]] = []

    for seed in tqdm(seeds, desc="ablation", disable=not progress_enabled()):
        spec = base.synthetic.model_copy(update={"seed": seed})
        gt, train, extrapolated = make_synthetic_scene(spec, raster)
        corrupted, _ = corrupt_scene(gt, train, extrapolated,
                                     base.corruption.model_copy(update={"seed": seed}), raster)
        provider = OracleProvider(gt, base.ablation.noise_sigma, seed, raster,
                                  color_gain=base.ablation.color_gain, color_offset=base.ablation.color_offset)
        init_report = evaluate_views(corrupted, extrapolated, base.pipeline)
        rows.append({"variant": "init", "seed": seed, "psnr": init_report.mean_psnr,
                     "ssim": init_report.mean_ssim})
        for name, off in variants.items():
            config = apply_toggles(base.pipeline.model_copy(update={"seed": seed, "output_dir": None}), off)
            refined, _ = run_freefix(corrupted, train, extrapolated, config, provider)
            report = evaluate_views(refined, extrapolated, config)
            rows.append({"variant": name, "seed": seed, "psnr": report.mean_psnr, "ssim": report.mean_ssim})
            logger.info("seed %d %-24s PSNR %.3f SSIM %.4f", seed, name, report.mean_psnr, report.mean_ssim)

    full = [r["psnr"] for r in rows if r["variant"] == "full"]
    summary = []
    for name in ["init"] + list(variants):
        scores = [r for r in rows if r["variant"] == name]
        summary.append({
            "variant": name,
            "mean_psnr": float(np.mean([r["psnr"] for r in scores])),
            "mean_ssim": float(np.mean([r["ssim"] for r in scores])),
            "p_full_better": sign_test(full, [r["psnr"] for r in scores]) if name != "full" else float("nan"),
        })
    return AblationTable(rows, summary)
