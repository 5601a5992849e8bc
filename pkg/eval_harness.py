"""
eval_harness.py
---------------
Before/after evaluation on travel pairs: image similarity against the
target rendering and segmentation overlap against the true labels, for
the unharmonized source, the histogram-matching baseline and the
target-free harmonization.

Report CSV columns: pair_id, method, psnr, ssim, macro_dice, macro_iou
(an infinite PSNR is written as "inf"). The summary JSON is keyed by
method and holds mean and population std of every metric.
"""

import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from downstream import SegModel, predict
from errors import ContractError, DegenerateInputError
from harmonizer import apply_to_volume
from imagecore import check_image
from metrics import mse_psnr, overlap, ssim
from phantom import Bundle
from style_manifold import StyleParams

METHODS = ("none", "histogram_matching", "tgtfree")
METRICS = ("psnr", "ssim", "macro_dice", "macro_iou")
REPORT_COLUMNS = ("pair_id", "method") + METRICS

# Acceptance gates
MIN_IN_DOMAIN_DICE = 0.85
MIN_DOMAIN_GAP = 0.10
MIN_HARMONIZED_GAIN = 0.05
MAX_HARMONIZED_SHORTFALL = 0.05
MIN_PSNR_GAIN_DB = 2.0


@dataclass(frozen=True)
class EvalRow:
    pair_id: int
    method: str
    psnr: float
    ssim: float
    macro_dice: float
    macro_iou: float


def histogram_match(source: np.ndarray, reference: np.ndarray) -> np.ndarray:
    """
    Rank-order transform: the k-th smallest source pixel takes the k-th
    smallest reference value. Ties in the source keep pixel-index order.

    Needs the reference, so this is a comparison baseline only.
    """
    src = np.asarray(source, dtype=np.float64)
    ref = np.asarray(reference, dtype=np.float64)
    if src.size != ref.size:
        raise ContractError(f"pixel counts differ: {src.size} vs {ref.size}")
    if np.ptp(ref) == 0:
        raise DegenerateInputError("reference image is constant")

    order = np.argsort(src.ravel(), kind="stable")
    out = np.empty(src.size)
    out[order] = np.sort(ref.ravel(), kind="stable")
    return out.reshape(src.shape)


def _row(pair_id: int, method: str, image, target, label, model: SegModel) -> EvalRow:
    _, psnr = mse_psnr(image, target)
    report = overlap(predict(model, image), label)
    return EvalRow(pair_id, method, psnr, ssim(image, target), report.macro_dice, report.macro_iou)


def evaluate_pair(source: np.ndarray, target: np.ndarray, label: np.ndarray,
                  model: SegModel, harmonized: np.ndarray, pair_id: int = 0) -> List[EvalRow]:
    source = check_image(source, "source")
    target = check_image(target, "target")
    harmonized = check_image(harmonized, "harmonized")
    if not (source.shape == target.shape == harmonized.shape == np.shape(label)):
        raise ContractError("travel pair images, harmonized image and labels must share a shape")

    candidates = {
        "none": source,
        "histogram_matching": histogram_match(source, target),
        "tgtfree": harmonized,
    }
    return [_row(pair_id, m, candidates[m], target, label, model) for m in METHODS]


def _slice_average(pair_id: int, per_slice: List[List[EvalRow]]) -> List[EvalRow]:
    rows = []
    for i, method in enumerate(METHODS):
        values = {m: float(np.mean([getattr(r[i], m) for r in per_slice])) for m in METRICS}
        rows.append(EvalRow(pair_id, method, **values))
    return rows


def evaluate_bundle(bundle: Bundle, model: SegModel, params: StyleParams) -> List[EvalRow]:
    """Slice-averaged rows for every travel pair, harmonizing with one style."""
    rows = []
    for pair in bundle.travel_pairs:
        harmonized = apply_to_volume(pair.source, params)
        per_slice = [
            evaluate_pair(s, t, lab, model, h, pair.pair_id)
            for s, t, lab, h in zip(pair.source, pair.target, pair.labels, harmonized)
        ]
        rows.extend(_slice_average(pair.pair_id, per_slice))
    logging.info(f"✓ Evaluated {len(bundle.travel_pairs)} travel pair(s)")
    return rows


def in_domain_dice(bundle: Bundle, model: SegModel) -> float:
    """Mean macro-Dice on the target renderings of the travel pairs."""
    per_pair = [
        np.mean([overlap(predict(model, t), lab).macro_dice for t, lab in zip(p.target, p.labels)])
        for p in bundle.travel_pairs
    ]
    return float(np.mean(per_pair))


def report_frame(rows: Sequence[EvalRow]) -> pd.DataFrame:
    return pd.DataFrame([asdict(r) for r in rows], columns=list(REPORT_COLUMNS))


def summarize(frame: pd.DataFrame) -> Dict[str, Dict[str, Dict[str, float]]]:
    summary = {}
    for method in METHODS:
        sub = frame[frame["method"] == method]
        if sub.empty:
            continue
        summary[method] = {
            m: {"mean": float(sub[m].mean()), "std": float(sub[m].std(ddof=0)), "n": int(len(sub))}
            for m in METRICS
        }
    return summary


def write_report(rows: Sequence[EvalRow], csv_path: Path,
                 summary_path: Optional[Path] = None) -> Dict[str, Dict[str, Dict[str, float]]]:
    if not rows:
        raise ContractError("cannot write an empty report")
    csv_path = Path(csv_path)
    summary_path = Path(summary_path) if summary_path else csv_path.with_name("summary.json")
    csv_path.parent.mkdir(parents=True, exist_ok=True)

    frame = report_frame(rows)
    frame.to_csv(csv_path, index=False, float_format="%.17g", lineterminator="\n")
    summary = summarize(frame)
    summary_path.write_text(json.dumps(summary, indent=2, sort_keys=True), encoding="utf-8")

    logging.info(f"Report written: {csv_path} ({len(frame)} rows), summary {summary_path}")
    return summary


def acceptance_summary(rows: Sequence[EvalRow], d_in_domain: float) -> Dict[str, Dict[str, object]]:
    """Pass/fail table for the end-to-end gates."""
    summary = summarize(report_frame(rows))
    d_s = summary["none"]["macro_dice"]["mean"]
    d_h = summary["tgtfree"]["macro_dice"]["mean"]
    psnr_none = summary["none"]["psnr"]["mean"]
    psnr_h = summary["tgtfree"]["psnr"]["mean"]
    ssim_none = summary["none"]["ssim"]["mean"]
    ssim_h = summary["tgtfree"]["ssim"]["mean"]

    def gate(value, threshold, passed):
        return {"value": float(value), "threshold": float(threshold), "passed": bool(passed)}

    return {
        "in_domain_dice": gate(d_in_domain, MIN_IN_DOMAIN_DICE, d_in_domain >= MIN_IN_DOMAIN_DICE),
        "domain_gap": gate(d_s, d_in_domain - MIN_DOMAIN_GAP, d_s <= d_in_domain - MIN_DOMAIN_GAP),
        "harmonized_gain": gate(d_h, d_s + MIN_HARMONIZED_GAIN, d_h >= d_s + MIN_HARMONIZED_GAIN),
        "harmonized_near_in_domain": gate(d_h, d_in_domain - MAX_HARMONIZED_SHORTFALL,
                                          d_h >= d_in_domain - MAX_HARMONIZED_SHORTFALL),
        "psnr_gain": gate(psnr_h, psnr_none + MIN_PSNR_GAIN_DB, psnr_h >= psnr_none + MIN_PSNR_GAIN_DB),
        "ssim_gain": gate(ssim_h, ssim_none, ssim_h > ssim_none),
    }
