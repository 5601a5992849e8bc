"""
harmonizer.py
-------------
Target-free harmonization: search the style manifold for the style under
which the target-trained classifier segments the labeled source subject
best, then render the whole source volume with that single style.
"""

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

import bo
import imagecore
from downstream import SegModel, predict
from errors import ContractError, FormatError
from metrics import macro_dice
from style_manifold import (DEFAULT_BOUNDS, StyleParams, apply_style, identity_anchor_latent,
                            latent_to_params)

DEFAULT_SNAPSHOTS = (0, 10, 25, 50, 100)

Volumeish = Union[np.ndarray, Sequence[np.ndarray]]


class HarmonizationConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    acquisition: bo.AcquisitionConfig = bo.AcquisitionConfig()
    init_samples: int = Field(100, ge=1)
    iterations: int = Field(100, ge=1)
    seed: int = Field(0, ge=0)
    noise_seed: int = Field(0, ge=0)
    max_slices: int = Field(8, ge=1)
    fit_steps: int = Field(50, ge=0)
    fit_step: float = Field(0.1, gt=0.0)
    refit_every: int = Field(10, ge=0)
    refit_steps: int = Field(10, ge=0)
    include_identity_anchor: bool = True
    output_noise: bool = False
    snapshot_iterations: Tuple[int, ...] = DEFAULT_SNAPSHOTS
    threads: int = Field(1, ge=1)


@dataclass
class HarmonizationResult:
    best_latent: np.ndarray
    best_params: StyleParams
    best_dice: float
    unharmonized_dice: float
    trace: bo.BoState
    harmonized: np.ndarray
    snapshots: Dict[int, np.ndarray] = field(default_factory=dict)


def guide_slices(volume: np.ndarray, labels: np.ndarray, max_slices: int) -> List[Tuple[np.ndarray, np.ndarray]]:
    """At most max_slices evenly spaced (slice, labels) pairs, in slice order."""
    vol = imagecore.as_volume(volume)
    lab = imagecore.as_volume(labels)
    if vol.shape != lab.shape:
        raise ContractError(f"source {vol.shape} and labels {lab.shape} differ in shape")
    n = vol.shape[0]
    picks = np.unique(np.round(np.linspace(0, n - 1, min(n, max_slices))).astype(int))
    return [(vol[k], lab[k]) for k in picks]


def _subjects(source: Volumeish, label: Volumeish, max_slices: int):
    if isinstance(source, (list, tuple)):
        if len(source) != len(label) or not source:
            raise ContractError("need one label volume per source subject")
        return [guide_slices(s, l, max_slices) for s, l in zip(source, label)]
    return [guide_slices(source, label, max_slices)]


def _mean_subject_dice(subjects, model: SegModel, render) -> float:
    per_subject = []
    for i, slices in enumerate(subjects):
        scores = [macro_dice(predict(model, render(img, i, k)), lab) for k, (img, lab) in enumerate(slices)]
        per_subject.append(float(np.mean(scores)))
    return float(np.mean(per_subject))


def objective_eval(z, source: Volumeish, label: Volumeish, model: SegModel,
                   cfg: HarmonizationConfig = HarmonizationConfig()) -> float:
    """
    Guiding macro-Dice of the classifier on the source rendered with the
    style decoded from z. Noise seeds are fixed per (subject, slice), so
    the value is a deterministic function of z.
    """
    subjects = _subjects(source, label, cfg.max_slices)
    params = latent_to_params(z)

    def render(img, subject, k):
        return apply_style(img, params, noise_seed=[cfg.noise_seed, subject, k])

    return _mean_subject_dice(subjects, model, render)


def unharmonized_dice(source: Volumeish, label: Volumeish, model: SegModel,
                      cfg: HarmonizationConfig = HarmonizationConfig()) -> float:
    subjects = _subjects(source, label, cfg.max_slices)
    return _mean_subject_dice(subjects, model, lambda img, subject, k: img)


def apply_to_volume(vol: np.ndarray, params: StyleParams, noise: bool = False,
                    noise_seed: int = 0) -> np.ndarray:
    """Render every slice with the same style; noise is off unless asked for."""
    data = imagecore.as_volume(vol)
    style = params if noise else params.without_noise()
    return np.stack([apply_style(sl, style, noise_seed=[noise_seed, k]) for k, sl in enumerate(data)])


def harmonize(source: Volumeish, label: Volumeish, model: SegModel,
              cfg: HarmonizationConfig = HarmonizationConfig()) -> HarmonizationResult:
    subjects = _subjects(source, label, cfg.max_slices)
    first_volume = imagecore.as_volume(source[0] if isinstance(source, (list, tuple)) else source)
    middle = first_volume[first_volume.shape[0] // 2]

    design = bo.init_design(cfg.seed, cfg.init_samples)
    if cfg.include_identity_anchor:
        design[0] = identity_anchor_latent()

    snapshots: Dict[int, np.ndarray] = {}
    wanted = set(cfg.snapshot_iterations)

    def snapshot(state: bo.BoState):
        if state.iteration in wanted and state.best_z is not None:
            snapshots[state.iteration] = apply_style(middle, latent_to_params(state.best_z).without_noise())

    def objective(z):
        return objective_eval(z, source, label, model, cfg)

    baseline = unharmonized_dice(source, label, model, cfg)
    logging.info(f"Harmonizing: {len(subjects)} labeled subject(s), unharmonized Dice {baseline:.4f}")

    state = bo.run_bo(
        objective, cfg.acquisition, cfg.init_samples, cfg.iterations, cfg.seed,
        fit_steps=cfg.fit_steps, fit_step=cfg.fit_step,
        refit_every=cfg.refit_every, refit_steps=cfg.refit_steps,
        design=design, max_workers=cfg.threads, on_iteration=snapshot,
    )

    if state.best_z is None:
        logging.error("Every objective evaluation failed; falling back to the identity style")
        best_z = identity_anchor_latent()
    else:
        best_z = state.best_z
    best_params = latent_to_params(best_z)
    harmonized = apply_to_volume(first_volume, best_params, noise=cfg.output_noise, noise_seed=cfg.noise_seed)

    logging.info(
        f"✓ Harmonized: best Dice {state.best_value:.4f} (unharmonized {baseline:.4f}), "
        f"style {best_params.to_dict()}"
    )
    return HarmonizationResult(best_z, best_params, state.best_value, baseline, state, harmonized, snapshots)


# ============================================================================
# Persistence
# ============================================================================

def write_result(result: HarmonizationResult, out_dir: Path, export_snapshots: bool = True) -> Dict[str, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {"trace": bo.write_trace(result.trace, out_dir / "trace.csv")}

    style_doc = {
        "latent": [float(v) for v in result.best_latent],
        "params": result.best_params.to_dict(),
        "best_dice": result.best_dice,
        "unharmonized_dice": result.unharmonized_dice,
        "evaluations": result.trace.evaluations,
        "failures": result.trace.failures,
        "snapshot_iterations": sorted(result.snapshots),
    }
    paths["style"] = out_dir / "best_style.json"
    paths["style"].write_text(json.dumps(style_doc, indent=2, sort_keys=True), encoding="utf-8")
    paths["harmonized"] = imagecore.write_volume(result.harmonized, out_dir / "harmonized.img1")

    if export_snapshots and result.snapshots:
        frames = [result.snapshots[k] for k in sorted(result.snapshots)]
        paths["snapshots"] = imagecore.export_pgm(imagecore.hstack_strip(frames), out_dir / "snapshots.pgm")

    logging.info(f"Harmonization result written to {out_dir}")
    return paths


def read_style(path: Path) -> StyleParams:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
        params = StyleParams.from_dict(doc["params"])
    except (json.JSONDecodeError, KeyError, TypeError) as e:
        raise FormatError(f"unreadable style file {path.name}: {e}")
    if not params.within(DEFAULT_BOUNDS):
        raise ContractError(f"style in {path.name} lies outside the style bounds")
    if not all(math.isfinite(v) for v in params.as_vector()):
        raise ContractError(f"style in {path.name} is not finite")
    return params
