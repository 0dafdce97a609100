"""
Command-line entry point.

Every subcommand is a thin wrapper over one engine entry point. Settings come
from an optional JSON run config (--config) with command-line flags layered
on top; the resulting effective configuration is written to the output
directory so a run can be repeated exactly.

Usage:
    python -m freefix synth --kind textured-wall --seed 7 --out runs/wall
    python -m freefix corrupt --scene runs/wall/scene.json --trajectory runs/wall/trajectory.json \\
        --train-views runs/wall/train_views.json --out runs/wall
    python -m freefix refine --config runs/wall/effective_config.json --denoiser noisy-oracle --out runs/fix
"""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np

from .config import (Config, RunConfig, apply_overrides, configure_logging, dump_config, load_run_config,
                     parse_gamma_levels, seed_list)
from .confidence import (accumulate_training_fisher, build_confidence_maps, render_uncertainty_map,
                         uncertainty_attribute)
from .errors import ConfigError, FreeFixError, SceneFormatError
from .guidance import provider_from_name
from .images import AttributeImage, read_pfm, read_png, write_heatmap, write_pfm, write_png
from .metrics import MetricReport, psnr, ssim, write_csv, write_markdown
from .pipeline import OutputManager, evaluate_views, run_ablation, run_freefix
from .refine import fit_scene
from .render import render_color, render_depth, render_opacity
from .scene import GaussianScene, import_ply_3dgs, load_scene, load_views, save_scene, save_views
from .synthetic import corrupt_scene, make_synthetic_scene

logger = logging.getLogger(__name__)


# ============================================================================
# ARGUMENTS
# ============================================================================

def _common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON run configuration")
    parser.add_argument("--out", help="output directory")
    parser.add_argument("--seed", type=int, help="seed for every random stream of the run")
    parser.add_argument("--denoiser", help="oracle | noisy-oracle | identity | bridge:<dir>")
    parser.add_argument("--gamma", help="confidence levels lo,mid,hi")
    parser.add_argument("--beta", type=float, help="overall-guidance strength")
    parser.add_argument("--rho", type=float, help="overall-guidance fraction of denoising steps")
    parser.add_argument("--sigma-start", type=float, help="initial noise level")
    parser.add_argument("--steps", type=int, help="denoising steps")
    parser.add_argument("--refine-steps", type=int, help="3D refinement steps per stage")
    parser.add_argument("--threads", type=int, help="worker threads")
    parser.add_argument("--scene", help="scene JSON or 3DGS PLY")
    parser.add_argument("--gt-scene", help="ground-truth scene (oracle denoisers)")
    parser.add_argument("--train-views", help="training camera JSON (with images)")
    parser.add_argument("--trajectory", help="extrapolated camera JSON")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="freefix", description="Fix extrapolated views of Gaussian-splat scenes")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic scene with training and extrapolated cameras")
    _common(p)
    p.add_argument("--kind", help="textured-wall | box-room | random-blobs")
    p.add_argument("--primitives", type=int, help="number of Gaussians")
    p.add_argument("--extrapolation", help="arc | translate | rotate")

    p = sub.add_parser("corrupt", help="add floaters visible only from extrapolated views")
    _common(p)
    p.add_argument("--floaters", type=int, help="number of floaters")

    p = sub.add_parser("fit", help="refine a scene against its training views only")
    _common(p)

    p = sub.add_parser("render", help="render color, depth and opacity for a camera file")
    _common(p)
    p.add_argument("--views", help="camera JSON to render (defaults to --trajectory)")

    p = sub.add_parser("confidence", help="write per-gamma confidence maps")
    _common(p)
    p.add_argument("--views", help="camera JSON to evaluate (defaults to --trajectory)")
    p.add_argument("--uncertainty", action="store_true", help="also write the unbounded uncertainty maps")

    p = sub.add_parser("refine", help="run the interleaved fixing pipeline")
    _common(p)

    p = sub.add_parser("ablate", help="ablation table over seeded synthetic scenes")
    _common(p)
    p.add_argument("--seeds", help="seed list, e.g. 0-19 or 1,4,7")
    p.add_argument("--toggles", help="comma-separated toggles to ablate")

    p = sub.add_parser("eval", help="PSNR/SSIM of predictions against references")
    _common(p)
    p.add_argument("--pred", help="directory of predicted images (PFM or PNG)")
    p.add_argument("--ref", help="directory of reference images with matching names")
    p.add_argument("--views", help="camera JSON with reference images (with --scene)")
    return parser


def overrides_from_args(args: argparse.Namespace) -> Dict[str, Any]:
    """Dotted RunConfig keys for every flag that was given."""
    seed = args.seed
    out: Dict[str, Any] = {
        "out": args.out,
        "denoiser": args.denoiser,
        "scene": args.scene,
        "gt_scene": args.gt_scene,
        "train_views": args.train_views,
        "trajectory": args.trajectory,
        "threads": args.threads,
        "pipeline.confidence.threads": args.threads,
        "pipeline.guidance.beta": args.beta,
        "pipeline.guidance.rho": args.rho,
        "pipeline.guidance.sigma_start": args.sigma_start,
        "pipeline.guidance.steps": args.steps,
        "pipeline.refine.steps": args.refine_steps,
        "pipeline.seed": seed,
        "pipeline.guidance.seed": seed,
        "pipeline.refine.seed": seed,
        "synthetic.seed": seed,
        "corruption.seed": seed,
    }
    if args.gamma:
        out.update({f"pipeline.guidance.{k}": v for k, v in parse_gamma_levels(args.gamma).items()})
    for flag, key in (("kind", "synthetic.kind"), ("primitives", "synthetic.n_primitives"),
                      ("extrapolation", "synthetic.extrapolation"), ("floaters", "corruption.floaters")):
        if hasattr(args, flag):
            out[key] = getattr(args, flag)
    if getattr(args, "toggles", None):
        out["ablation.toggles"] = [t.strip() for t in args.toggles.split(",") if t.strip()]
    if getattr(args, "seeds", None):
        out["ablation.seeds"] = seed_list(args.seeds)
    return out


def resolve_config(args: argparse.Namespace) -> RunConfig:
    base = load_run_config(args.config) if args.config else RunConfig()
    return apply_overrides(base, overrides_from_args(args))


# ============================================================================
# HELPERS
# ============================================================================

def _require(value: Optional[str], flag: str) -> str:
    if not value:
        raise ConfigError(f"{flag} is required for this command", locations=[flag.lstrip("-").replace("-", "_")])
    return value


def _load_any_scene(path: str) -> GaussianScene:
    return import_ply_3dgs(path) if path.lower().endswith(".ply") else load_scene(path)


def _out_dir(run: RunConfig) -> Path:
    out = Path(run.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _read_image(path: Path) -> AttributeImage:
    return read_pfm(path) if path.suffix.lower() == ".pfm" else read_png(path)


# ============================================================================
# COMMANDS
# ============================================================================

def cmd_synth(run: RunConfig, args: argparse.Namespace) -> Dict[str, Any]:
    out = _out_dir(run)
    scene, train, extrapolated = make_synthetic_scene(run.synthetic, run.pipeline.raster)
    save_scene(scene, out / "scene.json")
    save_views(train, out / "train_views.json")
    save_views(extrapolated, out / "trajectory.json")
    return {"scene": str(out / "scene.json"), "primitives": len(scene),
            "train_views": len(train), "trajectory": len(extrapolated)}


def cmd_corrupt(run: RunConfig, args: argparse.Namespace) -> Dict[str, Any]:
    out = _out_dir(run)
    scene = _load_any_scene(_require(run.scene, "--scene"))
    train = load_views(_require(run.train_views, "--train-views"))
    trajectory = load_views(_require(run.trajectory, "--trajectory"))
    corrupted, floaters = corrupt_scene(scene, train, trajectory, run.corruption, run.pipeline.raster)
    save_scene(corrupted, out / "scene_corrupted.json")
    (out / "floaters.json").write_text(json.dumps({"indices": floaters}) + "\n")
    return {"scene": str(out / "scene_corrupted.json"), "floaters": floaters}


def cmd_fit(run: RunConfig, args: argparse.Namespace) -> Dict[str, Any]:
    out = _out_dir(run)
    scene = _load_any_scene(_require(run.scene, "--scene"))
    train = load_views(_require(run.train_views, "--train-views"))
    before = evaluate_views(scene, train, run.pipeline)
    fitted = fit_scene(scene, train, run.pipeline.refine, run.pipeline.raster, out / Config.REFINE_LOG_FILE)
    after = evaluate_views(fitted, train, run.pipeline)
    save_scene(fitted, out / "scene_fit.json")
    return {"scene": str(out / "scene_fit.json"), "psnr_before": before.mean_psnr, "psnr_after": after.mean_psnr}


def cmd_render(run: RunConfig, args: argparse.Namespace) -> Dict[str, Any]:
    out = _out_dir(run)
    scene = _load_any_scene(_require(run.scene, "--scene"))
    views = load_views(_require(args.views or run.trajectory, "--views"))
    raster = run.pipeline.raster
    for k, view in enumerate(views):
        stem = view.name or f"view_{k:03d}"
        color = render_color(view, scene, raster)
        write_pfm(color, out / f"{stem}_color.pfm")
        write_png(color, out / f"{stem}_color.png")
        write_pfm(render_depth(view, scene, raster), out / f"{stem}_depth.pfm")
        opacity = render_opacity(view, scene, raster)
        write_pfm(opacity, out / f"{stem}_opacity.pfm")
        write_png(opacity, out / f"{stem}_opacity.png")
    return {"rendered": len(views)}


def cmd_confidence(run: RunConfig, args: argparse.Namespace) -> Dict[str, Any]:
    out = _out_dir(run)
    scene = _load_any_scene(_require(run.scene, "--scene"))
    train = load_views(_require(run.train_views, "--train-views"))
    views = load_views(_require(args.views or run.trajectory, "--views"))
    p = run.pipeline
    acc = accumulate_training_fisher(scene, train, p.confidence.param_mask, p.raster, p.confidence.eps_h,
                                     p.confidence.threads)
    sidecar: List[Dict[str, Any]] = []
    for k, view in enumerate(views):
        stem = view.name or f"view_{k:03d}"
        maps, _ = build_confidence_maps(view, scene, acc, p.guidance.gammas, p.confidence.mode, p.raster)
        for gamma, conf in sorted(maps.items()):
            write_pfm(conf.image, out / f"{stem}_conf_{gamma:g}.pfm")
            write_heatmap(conf.image, out / f"{stem}_conf_{gamma:g}.png")
            sidecar.append({"view": stem, "gamma": gamma, "min": float(conf.data.min()),
                            "max": float(conf.data.max()), "mean": float(conf.data.mean())})
        if args.uncertainty:
            uncertainty = uncertainty_attribute(acc, p.confidence.mode, view, scene, p.raster)
            umap = render_uncertainty_map(view, scene, uncertainty, p.raster)
            write_pfm(umap, out / f"{stem}_uncertainty.pfm")
            top = float(np.percentile(umap.data, 99.0)) or 1.0
            write_heatmap(umap, out / f"{stem}_uncertainty.png", vmin=0.0, vmax=top, cmap="magma")
    (out / "confidence.json").write_text(json.dumps(sidecar, indent=2) + "\n")
    return {"views": len(views), "maps": len(sidecar)}


def cmd_refine(run: RunConfig, args: argparse.Namespace) -> Dict[str, Any]:
    output = OutputManager(_out_dir(run))
    scene = _load_any_scene(_require(run.scene, "--scene"))
    train = load_views(_require(run.train_views, "--train-views"))
    trajectory = load_views(_require(run.trajectory, "--trajectory"))
    gt = _load_any_scene(run.gt_scene) if run.gt_scene else None
    provider = provider_from_name(run.denoiser, gt, run.noise_sigma, run.pipeline.seed, run.pipeline.raster,
                                  run.pipeline.guidance)
    refined, records = run_freefix(scene, train, trajectory, run.pipeline, provider, output)
    summary: Dict[str, Any] = {"stages": len(records), "scene": str(output.output_dir / Config.SCENE_FINAL_FILE)}
    if trajectory.images is not None:
        summary["psnr_before"] = evaluate_views(scene, trajectory, run.pipeline).mean_psnr
        summary["psnr_after"] = evaluate_views(refined, trajectory, run.pipeline).mean_psnr
    return summary


def cmd_ablate(run: RunConfig, args: argparse.Namespace) -> Dict[str, Any]:
    out = _out_dir(run)
    table = run_ablation(run)
    csv_path, md_path = table.write(out)
    return {"csv": str(csv_path), "markdown": str(md_path),
            "mean_psnr": {row["variant"]: row["mean_psnr"] for row in table.summary}}


def cmd_eval(run: RunConfig, args: argparse.Namespace) -> Dict[str, Any]:
    out = _out_dir(run)
    if args.pred or args.ref:
        pred_dir, ref_dir = Path(_require(args.pred, "--pred")), Path(_require(args.ref, "--ref"))
        report = MetricReport(meta={"pred": str(pred_dir), "ref": str(ref_dir)})
        names = sorted(p.name for p in pred_dir.iterdir() if p.suffix.lower() in (".pfm", ".png"))
        for name in names:
            if not (ref_dir / name).exists():
                raise SceneFormatError(f"no reference image for {name}", path=str(ref_dir / name))
            a, b = _read_image(pred_dir / name), _read_image(ref_dir / name)
            report.add(name, psnr(a, b), ssim(a, b))
    else:
        scene = _load_any_scene(_require(run.scene, "--scene"))
        views = load_views(_require(args.views or run.trajectory, "--views"))
        report = evaluate_views(scene, views, run.pipeline, scene=scene.meta.name)
    columns = ["view", "psnr", "ssim"]
    write_csv(report.rows(), out / "eval.csv", columns)
    write_markdown(report.rows() + [{"view": "mean", "psnr": report.mean_psnr, "ssim": report.mean_ssim}],
                   out / "eval.md", columns, title="Evaluation")
    return {"views": len(report), "mean_psnr": report.mean_psnr, "mean_ssim": report.mean_ssim}


COMMANDS = {
    "synth": cmd_synth,
    "corrupt": cmd_corrupt,
    "fit": cmd_fit,
    "render": cmd_render,
    "confidence": cmd_confidence,
    "refine": cmd_refine,
    "ablate": cmd_ablate,
    "eval": cmd_eval,
}


# ============================================================================
# MAIN EXECUTION
# ============================================================================

def main(argv: Optional[List[str]] = None) -> int:
    """Main execution function"""
    args = build_parser().parse_args(argv)
    configure_logging(debug=True if args.verbose else None)

    try:
        if not Config.validate():
            raise ConfigError("invalid environment settings (see messages above)", locations=["environment"])
        run = resolve_config(args)
        if Config.VERBOSE:
            Config.print_summary()
        out = _out_dir(run)
        dump_config(run, out / Config.EFFECTIVE_CONFIG_FILE)
        result = COMMANDS[args.command](run, args)
    except FreeFixError as e:
        print(json.dumps(e.to_dict()), file=sys.stderr)
        return e.exit_code
    except OSError as e:
        print(json.dumps({"error": type(e).__name__, "message": str(e),
                          "path": getattr(e, "filename", None)}), file=sys.stderr)
        return 1

    print(json.dumps({"command": args.command, **result}, default=str))
    return 0
