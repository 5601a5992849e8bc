"""
cli.py
------
Command-line entry point.

    phantom    build a traveling-subject scenario bundle
    train      train the target-domain classifier on the bundle
    harmonize  search the style for the labeled source subject(s)
    evaluate   before/after report over the bundle's travel pairs
    demo       all of the above, plus the acceptance summary
    manifold   style-manifold inspection strips (PGM)

Exit status: 0 success, 1 configuration or usage error, 2 runtime error
(including runs that logged an ERROR). Diagnostics go to standard error;
standard output carries results only.
"""

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Dict, List, Optional

import config
import downstream
import eval_harness
import harmonizer
import imagecore
import logging_setup
import phantom
from errors import ConfigError
from style_manifold import (apply_style, attribute_presets, identity_anchor_latent,
                            params_to_latent, style_path_strip)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RUNTIME = 2


class _Parser(argparse.ArgumentParser):
    """Usage errors become ConfigError instead of SystemExit(2)."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON run config")
    common.add_argument("--seed", type=int, help="master seed (overrides run config)")
    common.add_argument("--out", help="output directory")
    common.add_argument("--threads", type=int, help="worker threads; results do not depend on it")

    parser = _Parser(prog="tgtfree", description="Target-free MRI harmonization on synthetic phantoms")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("phantom", parents=[common], help="build a scenario bundle")
    p.add_argument("--bundle", type=Path, help="bundle directory (default <out>/bundle)")

    p = sub.add_parser("train", parents=[common], help="train the downstream classifier")
    p.add_argument("--bundle", type=Path)
    p.add_argument("--model", type=Path, help="model file to write (default <out>/model.json)")

    p = sub.add_parser("harmonize", parents=[common], help="estimate the target style")
    p.add_argument("--bundle", type=Path)
    p.add_argument("--model", type=Path, required=True, help="trained model JSON")
    p.add_argument("--snapshots", action=argparse.BooleanOptionalAction, default=None)

    p = sub.add_parser("evaluate", parents=[common], help="evaluate travel pairs")
    p.add_argument("--bundle", type=Path)
    p.add_argument("--model", type=Path)
    p.add_argument("--style", type=Path, help="best_style.json (default <out>/best_style.json)")

    p = sub.add_parser("demo", parents=[common], help="end-to-end default pipeline")
    p.add_argument("--snapshots", action=argparse.BooleanOptionalAction, default=None)

    sub.add_parser("manifold", parents=[common], help="style manifold inspection strips")
    return parser


# ============================================================================
# Helpers
# ============================================================================

def _out_dir(cfg: config.RunConfig) -> Path:
    out = Path(cfg.output.directory)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _bundle_dir(args, out: Path) -> Path:
    return args.bundle if getattr(args, "bundle", None) else out / "bundle"


def _read_bundle(bundle_dir: Path) -> phantom.Bundle:
    if (bundle_dir / "manifest.json").exists():
        return phantom.read_bundle(bundle_dir)
    raise ConfigError(f"no bundle at {bundle_dir}; run the phantom command first")


def _emit(result: dict):
    print(json.dumps(result, indent=2, sort_keys=True))


def write_provenance(out: Path, command: str, cfg: config.RunConfig, extra: Optional[Dict] = None) -> Path:
    """
    Everything needed to rerun the command byte-for-byte. The output
    directory itself is left out so reruns elsewhere compare equal.
    """
    resolved = cfg.model_dump(mode="json")
    resolved["output"].pop("directory", None)
    doc = {
        "command": command,
        "config": resolved,
        "seeds": {
            "master_seed": cfg.seed,
            "anatomy_seed_base": phantom.anatomy_seed_base(cfg.seed),
            "harmonization_seed": cfg.harmonization.seed,
            "noise_seed": cfg.harmonization.noise_seed,
        },
    }
    doc.update(extra or {})
    path = out / "provenance.json"
    path.write_text(json.dumps(doc, indent=2, sort_keys=True), encoding="utf-8")
    return path


# ============================================================================
# Commands
# ============================================================================

def cmd_phantom(args, cfg: config.RunConfig) -> dict:
    out = _out_dir(cfg)
    bundle = phantom.build_scenario(cfg.scenario.to_scenario(), cfg.seed)
    bundle_dir = _bundle_dir(args, out)
    phantom.write_bundle(bundle, bundle_dir)
    write_provenance(out, "phantom", cfg, {"anatomy_seeds": bundle.anatomy_seeds()})
    return {"bundle": str(bundle_dir)}


def _train(bundle: phantom.Bundle, cfg: config.RunConfig) -> downstream.SegModel:
    t = cfg.downstream
    return downstream.train(phantom.training_pairs(bundle.target_train), t.feature_spec(),
                            iterations=t.iterations, step=t.step, l2=t.l2)


def cmd_train(args, cfg: config.RunConfig) -> dict:
    out = _out_dir(cfg)
    bundle = _read_bundle(_bundle_dir(args, out))
    model = _train(bundle, cfg)
    model_path = downstream.save_model(model, args.model or out / "model.json")
    write_provenance(out, "train", cfg)
    return {"model": str(model_path), "final_loss": model.train_loss_curve[-1] if model.train_loss_curve else None}


def _harmonize(bundle: phantom.Bundle, model: downstream.SegModel, cfg: config.RunConfig,
               out: Path) -> harmonizer.HarmonizationResult:
    sources = [s.image for s in bundle.source_labeled]
    labels = [s.labels for s in bundle.source_labeled]
    result = harmonizer.harmonize(sources, labels, model, cfg.harmonization)
    harmonizer.write_result(result, out, export_snapshots=cfg.output.snapshots)
    return result


def cmd_harmonize(args, cfg: config.RunConfig) -> dict:
    out = _out_dir(cfg)
    bundle = _read_bundle(_bundle_dir(args, out))
    model = downstream.load_model(args.model)
    result = _harmonize(bundle, model, cfg, out)
    write_provenance(out, "harmonize", cfg, {"applied_style": result.best_params.to_dict()})
    return {"best_dice": result.best_dice, "unharmonized_dice": result.unharmonized_dice,
            "style": result.best_params.to_dict()}


def cmd_evaluate(args, cfg: config.RunConfig) -> dict:
    out = _out_dir(cfg)
    bundle = _read_bundle(_bundle_dir(args, out))
    model = downstream.load_model(args.model or out / "model.json")
    params = harmonizer.read_style(args.style or out / "best_style.json")

    rows = eval_harness.evaluate_bundle(bundle, model, params)
    summary = eval_harness.write_report(rows, out / "report.csv", out / "summary.json")
    write_provenance(out, "evaluate", cfg, {"applied_style": params.to_dict()})
    return summary


def cmd_demo(args, cfg: config.RunConfig) -> dict:
    out = _out_dir(cfg)
    bundle = phantom.build_scenario(cfg.scenario.to_scenario(), cfg.seed)
    phantom.write_bundle(bundle, out / "bundle")

    model = _train(bundle, cfg)
    downstream.save_model(model, out / "model.json")

    result = _harmonize(bundle, model, cfg, out)
    rows = eval_harness.evaluate_bundle(bundle, model, result.best_params)
    eval_harness.write_report(rows, out / "report.csv", out / "summary.json")

    acceptance = eval_harness.acceptance_summary(rows, eval_harness.in_domain_dice(bundle, model))
    (out / "acceptance.json").write_text(json.dumps(acceptance, indent=2, sort_keys=True), encoding="utf-8")
    write_provenance(out, "demo", cfg, {"applied_style": result.best_params.to_dict(),
                                        "anatomy_seeds": bundle.anatomy_seeds()})

    passed = sum(g["passed"] for g in acceptance.values())
    logging.info(f"✓ Demo finished: {passed}/{len(acceptance)} acceptance gates passed")
    return acceptance


def cmd_manifold(args, cfg: config.RunConfig) -> dict:
    out = _out_dir(cfg)
    scenario = cfg.scenario.to_scenario()
    _, content = phantom.generate_anatomy(replace(scenario.anatomy, seed=phantom.anatomy_seed_base(cfg.seed)))

    presets = attribute_presets()
    frames = [content] + [apply_style(content, p, noise_seed=[cfg.seed, i])
                          for i, p in enumerate(presets.values())]
    presets_path = imagecore.export_pgm(imagecore.hstack_strip(frames), out / "manifold_presets.pgm")

    z_source = params_to_latent(scenario.source.base_style)
    path_frames = style_path_strip(content, z_source, identity_anchor_latent())
    path_path = imagecore.export_pgm(imagecore.hstack_strip(path_frames), out / "manifold_path.pgm")

    write_provenance(out, "manifold", cfg, {"presets": {k: v.to_dict() for k, v in presets.items()}})
    return {"presets": str(presets_path), "path": str(path_path), "preset_order": list(presets)}


COMMANDS = {
    "phantom": cmd_phantom,
    "train": cmd_train,
    "harmonize": cmd_harmonize,
    "evaluate": cmd_evaluate,
    "demo": cmd_demo,
    "manifold": cmd_manifold,
}


def main(argv: Optional[List[str]] = None) -> int:
    """Parse, configure, run one command; returns the exit status."""
    try:
        args = build_parser().parse_args(argv)
    except ConfigError as e:
        print(f"ERROR: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except SystemExit as e:
        # --help
        return int(e.code or 0)

    try:
        config.load_config("config.ini")
    except ConfigError as e:
        print(f"ERROR: {e}", file=sys.stderr)
        return EXIT_CONFIG

    logging_setup.setup_logging(config.get_path("PATHS", "LOG_PATH"),
                                config.get_flag("BEHAVIOR", "DEBUG_MODE", False))
    logging_setup.reset_error_flag()

    try:
        run_cfg = config.resolve_run_config(
            config.load_run_config(args.config), seed=args.seed, out=args.out,
            threads=args.threads, snapshots=getattr(args, "snapshots", None),
        )
        logging.info(f"Command: {args.command} (seed {run_cfg.seed}, output {run_cfg.output.directory})")
        result = COMMANDS[args.command](args, run_cfg)
    except ConfigError as e:
        logging.error(f"Configuration error: {e}")
        return EXIT_CONFIG
    except Exception as e:
        logging.error(f"{args.command} failed: {e}")
        logging.exception("Full traceback:")
        return EXIT_RUNTIME

    _emit(result)
    if logging_setup.has_errors():
        logging.warning("Errors were logged during the run")
        return EXIT_RUNTIME
    return EXIT_OK
